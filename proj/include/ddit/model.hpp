#pragma once

// Toy diffusion transformer that runs one frozen backbone at several patch
// sizes. Multiplier 1 is the base path; larger multipliers swap in their own
// patch (de-)embedders, add a size identifier, enable the LoRA deltas on the
// feed-forward projections and add a gated residual from the input latent
// to the output.
//
// Conventions: activations are row-per-token matrices, linear layers compute
// Y = X * W + b with W stored (in x out). LoRA deltas follow the usual
// shapes A: r x in, B: out x r, so the effective weight is W + s * A^T B^T.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "ddit/error.hpp"
#include "ddit/latent.hpp"
#include "ddit/patching.hpp"
#include "ddit/tensor.hpp"

namespace ddit {

struct ModelConfig {
  int hidden = 64;
  int layers = 4;
  int heads = 4;
  int ffn_mult = 4;
  int base_patch = 2;
  int height = 64;
  int width = 64;
  int channels = 4;
  std::vector<int> multipliers{1, 2, 4};
  int lora_rank = 8;
  int lora_alpha = 8;
  int vocab = 4;
  int t_train = 1000;

  int ffn_hidden() const { return hidden * ffn_mult; }
  int head_dim() const { return hidden / heads; }
  int patch_edge(int m) const { return base_patch * m; }
  int patch_dim(int m) const { return patch_edge(m) * patch_edge(m) * channels; }
  int grid_rows(int m) const { return height / patch_edge(m); }
  int grid_cols(int m) const { return width / patch_edge(m); }
  int tokens(int m) const { return grid_rows(m) * grid_cols(m); }
  double lora_scale() const { return static_cast<double>(lora_alpha) / lora_rank; }
  int max_multiplier() const { return *std::max_element(multipliers.begin(), multipliers.end()); }

  bool supports(int m) const {
    return std::find(multipliers.begin(), multipliers.end(), m) != multipliers.end();
  }

  std::string multipliers_string() const {
    std::string s = "{";
    for (std::size_t i = 0; i < multipliers.size(); ++i)
      s += (i ? "," : "") + std::to_string(multipliers[i]);
    return s + "}";
  }

  void require_supported(int m) const {
    if (!supports(m))
      throw ValidationError("unsupported patch multiplier " + std::to_string(m) +
                            "; supported: " + multipliers_string());
  }

  void validate() const {
    require(hidden >= 2 && hidden % 2 == 0, "hidden size must be even and >= 2");
    require(layers >= 1, "layers must be >= 1");
    require(heads >= 1 && hidden % heads == 0, "hidden size must be divisible by heads");
    require(ffn_mult >= 1 && base_patch >= 1 && channels >= 1, "ffn_mult, base_patch, channels must be >= 1");
    require(lora_rank >= 1 && lora_alpha >= 1, "LoRA rank and alpha must be >= 1");
    require(vocab >= 1 && t_train >= 1, "vocab and t_train must be >= 1");
    require(!multipliers.empty() && multipliers.front() == 1, "multipliers must start with 1");
    for (std::size_t i = 1; i < multipliers.size(); ++i)
      require(multipliers[i] > multipliers[i - 1], "multipliers must be strictly increasing");
    for (int m : multipliers)
      require(height % patch_edge(m) == 0 && width % patch_edge(m) == 0,
              "latent " + std::to_string(height) + "x" + std::to_string(width) +
                  " is not divisible by patch edge " + std::to_string(patch_edge(m)));
  }

  bool operator==(const ModelConfig&) const = default;
};

template <typename Real>
struct Linear {
  Mat<Real> weight;  // in x out
  Vec<Real> bias;
};

template <typename Real>
struct LayerNormParams {
  Vec<Real> gain;
  Vec<Real> bias;
};

template <typename Real>
struct LoraDelta {
  Mat<Real> a;  // r x in
  Mat<Real> b;  // out x r, zero at init
};

template <typename Real>
struct Block {
  LayerNormParams<Real> ln1, ln2;
  Mat<Real> wq, wk, wv, wo;
  Linear<Real> ffn1, ffn2;
  LoraDelta<Real> lora1, lora2;
};

template <typename Real>
struct ModelWeights {
  ModelConfig config;
  Linear<Real> t_mlp1, t_mlp2;
  Mat<Real> cond_table;  // vocab x d
  PositionalGrid<Real> pos;
  std::map<int, PatchEmbedder<Real>> embedders;
  std::map<int, PatchDeembedder<Real>> deembedders;
  SizeIdentifier<Real> ident;
  std::map<int, Vec<Real>> gates;  // one scalar per multiplier > 1
  std::vector<Block<Real>> blocks;
};

/// Zero-filled weights with every tensor at its final shape.
template <typename Real>
ModelWeights<Real> allocate_weights(const ModelConfig& cfg) {
  cfg.validate();
  const int d = cfg.hidden, f = cfg.ffn_hidden(), r = cfg.lora_rank;
  ModelWeights<Real> w;
  w.config = cfg;
  w.t_mlp1 = {Mat<Real>::Zero(d, d), Vec<Real>::Zero(d)};
  w.t_mlp2 = {Mat<Real>::Zero(d, d), Vec<Real>::Zero(d)};
  w.cond_table = Mat<Real>::Zero(cfg.vocab, d);
  w.pos.rows = cfg.grid_rows(1);
  w.pos.cols = cfg.grid_cols(1);
  w.pos.base = Mat<Real>::Zero(cfg.tokens(1), d);
  w.ident.hidden = d;
  for (int m : cfg.multipliers) {
    PatchEmbedder<Real> e;
    e.multiplier = m;
    e.edge = cfg.patch_edge(m);
    e.channels = cfg.channels;
    e.weight = Mat<Real>::Zero(cfg.patch_dim(m), d);
    e.bias = Vec<Real>::Zero(d);
    w.embedders.emplace(m, std::move(e));
    PatchDeembedder<Real> de;
    de.multiplier = m;
    de.edge = cfg.patch_edge(m);
    de.channels = cfg.channels;
    de.weight = Mat<Real>::Zero(d, cfg.patch_dim(m));
    de.bias = Vec<Real>::Zero(cfg.patch_dim(m));
    w.deembedders.emplace(m, std::move(de));
    if (m > 1) {
      w.ident.vectors.emplace(m, Vec<Real>::Zero(d));
      w.gates.emplace(m, Vec<Real>::Zero(1));
    }
  }
  w.blocks.resize(static_cast<std::size_t>(cfg.layers));
  for (auto& b : w.blocks) {
    b.ln1 = {Vec<Real>::Ones(d), Vec<Real>::Zero(d)};
    b.ln2 = {Vec<Real>::Ones(d), Vec<Real>::Zero(d)};
    b.wq = b.wk = b.wv = b.wo = Mat<Real>::Zero(d, d);
    b.ffn1 = {Mat<Real>::Zero(d, f), Vec<Real>::Zero(f)};
    b.ffn2 = {Mat<Real>::Zero(f, d), Vec<Real>::Zero(d)};
    b.lora1 = {Mat<Real>::Zero(r, d), Mat<Real>::Zero(f, r)};
    b.lora2 = {Mat<Real>::Zero(r, f), Mat<Real>::Zero(d, r)};
  }
  rebuild_pos_cache(w.pos, cfg.multipliers);
  return w;
}

/// Flat view of one parameter tensor.
template <typename Real>
struct ParamView {
  std::string name;
  Real* data;
  std::size_t size;
  bool trainable;
};

namespace detail {
template <typename Real, typename Dense>
ParamView<Real> view(std::string name, Dense& t, bool trainable) {
  return {std::move(name), t.data(), static_cast<std::size_t>(t.size()), trainable};
}
}  // namespace detail

/// Every parameter in serialization order: the frozen base first, then the
/// parameters that fine-tuning is allowed to touch.
template <typename Real>
std::vector<ParamView<Real>> parameters(ModelWeights<Real>& w) {
  using detail::view;
  std::vector<ParamView<Real>> out;
  out.push_back(view<Real>("t_mlp.w1", w.t_mlp1.weight, false));
  out.push_back(view<Real>("t_mlp.b1", w.t_mlp1.bias, false));
  out.push_back(view<Real>("t_mlp.w2", w.t_mlp2.weight, false));
  out.push_back(view<Real>("t_mlp.b2", w.t_mlp2.bias, false));
  out.push_back(view<Real>("cond.table", w.cond_table, false));
  out.push_back(view<Real>("pos.base", w.pos.base, false));
  out.push_back(view<Real>("embed.m1.w", w.embedders.at(1).weight, false));
  out.push_back(view<Real>("embed.m1.b", w.embedders.at(1).bias, false));
  out.push_back(view<Real>("deembed.m1.w", w.deembedders.at(1).weight, false));
  out.push_back(view<Real>("deembed.m1.b", w.deembedders.at(1).bias, false));
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    auto& b = w.blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    out.push_back(view<Real>(p + "ln1.gain", b.ln1.gain, false));
    out.push_back(view<Real>(p + "ln1.bias", b.ln1.bias, false));
    out.push_back(view<Real>(p + "attn.wq", b.wq, false));
    out.push_back(view<Real>(p + "attn.wk", b.wk, false));
    out.push_back(view<Real>(p + "attn.wv", b.wv, false));
    out.push_back(view<Real>(p + "attn.wo", b.wo, false));
    out.push_back(view<Real>(p + "ln2.gain", b.ln2.gain, false));
    out.push_back(view<Real>(p + "ln2.bias", b.ln2.bias, false));
    out.push_back(view<Real>(p + "ffn.w1", b.ffn1.weight, false));
    out.push_back(view<Real>(p + "ffn.b1", b.ffn1.bias, false));
    out.push_back(view<Real>(p + "ffn.w2", b.ffn2.weight, false));
    out.push_back(view<Real>(p + "ffn.b2", b.ffn2.bias, false));
  }
  for (int m : w.config.multipliers) {
    if (m == 1) continue;
    const std::string p = ".m" + std::to_string(m);
    out.push_back(view<Real>("embed" + p + ".w", w.embedders.at(m).weight, true));
    out.push_back(view<Real>("embed" + p + ".b", w.embedders.at(m).bias, true));
    out.push_back(view<Real>("deembed" + p + ".w", w.deembedders.at(m).weight, true));
    out.push_back(view<Real>("deembed" + p + ".b", w.deembedders.at(m).bias, true));
    out.push_back(view<Real>("ident" + p, w.ident.vectors.at(m), true));
    out.push_back(view<Real>("gate" + p, w.gates.at(m), true));
  }
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    auto& b = w.blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".lora.";
    out.push_back(view<Real>(p + "ffn1.a", b.lora1.a, true));
    out.push_back(view<Real>(p + "ffn1.b", b.lora1.b, true));
    out.push_back(view<Real>(p + "ffn2.a", b.lora2.a, true));
    out.push_back(view<Real>(p + "ffn2.b", b.lora2.b, true));
  }
  return out;
}

template <typename Real>
std::vector<ParamView<const Real>> parameters(const ModelWeights<Real>& w) {
  auto views = parameters(const_cast<ModelWeights<Real>&>(w));
  std::vector<ParamView<const Real>> out;
  out.reserve(views.size());
  for (auto& v : views) out.push_back({std::move(v.name), v.data, v.size, v.trainable});
  return out;
}

/// Same shapes as w, every entry zero (gradient accumulator).
template <typename Real>
ModelWeights<Real> zeros_like(const ModelWeights<Real>& w) {
  ModelWeights<Real> out = allocate_weights<Real>(w.config);
  for (auto& b : out.blocks) {
    b.ln1.gain.setZero();
    b.ln2.gain.setZero();
  }
  return out;
}

template <typename To, typename From>
ModelWeights<To> cast_weights(const ModelWeights<From>& w) {
  ModelWeights<To> out = allocate_weights<To>(w.config);
  auto src = parameters(w);
  auto dst = parameters(out);
  for (std::size_t i = 0; i < src.size(); ++i)
    for (std::size_t k = 0; k < src[i].size; ++k) dst[i].data[k] = static_cast<To>(src[i].data[k]);
  rebuild_pos_cache(out.pos, out.config.multipliers);
  return out;
}

// ---------------------------------------------------------------------------
// Timestep conditioning

/// Sinusoidal features: [sin(t f_k)]_k ++ [cos(t f_k)]_k with
/// f_k = 10000^(-k / (d/2)).
template <typename Real>
Vec<Real> timestep_features(int t, int d) {
  require(d >= 2 && d % 2 == 0, "timestep feature width must be even");
  const int half = d / 2;
  Vec<Real> out(d);
  for (int k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * k / half);
    out[k] = static_cast<Real>(std::sin(t * freq));
    out[half + k] = static_cast<Real>(std::cos(t * freq));
  }
  return out;
}

namespace detail {
template <typename Real>
Real silu(Real x) { return x / (Real(1) + std::exp(-x)); }
}  // namespace detail

/// Features followed by Linear -> SiLU -> Linear.
template <typename Real>
Vec<Real> timestep_embedding(const ModelWeights<Real>& w, int t, MacCounter* counter = nullptr) {
  if (t < 0 || t > w.config.t_train)
    throw ValidationError("timestep " + std::to_string(t) + " outside [0, " +
                          std::to_string(w.config.t_train) + "]");
  const Vec<Real> feat = timestep_features<Real>(t, w.config.hidden);
  Mat<Real> h = matmul<Real>(feat.transpose(), w.t_mlp1.weight, counter);
  h += w.t_mlp1.bias.transpose();
  h = h.unaryExpr([](Real x) { return detail::silu(x); });
  Mat<Real> out = matmul<Real>(h, w.t_mlp2.weight, counter);
  out += w.t_mlp2.bias.transpose();
  return out.transpose();
}

// ---------------------------------------------------------------------------
// Forward / backward

template <typename Real>
struct BlockCache {
  Mat<Real> x_in, h1, q, k, v, attn_out, x_mid, h2, u, act, c1, c2;
  Vec<Real> mean1, rstd1, mean2, rstd2;
  std::vector<Mat<Real>> probs;  // per head, N x N
};

template <typename Real>
struct ForwardCache {
  int multiplier = 1;
  BasicLatent<Real> input;
  Mat<Real> patches;
  Mat<Real> x_final;
  std::vector<BlockCache<Real>> blocks;
};

namespace detail {
inline constexpr double kLayerNormEps = 1e-5;

template <typename Real>
Mat<Real> layer_norm(const Mat<Real>& x, const LayerNormParams<Real>& p, Vec<Real>& mean,
                     Vec<Real>& rstd) {
  const auto n = x.rows(), d = x.cols();
  mean.resize(n);
  rstd.resize(n);
  Mat<Real> y(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Real mu = x.row(i).mean();
    const Real var = (x.row(i).array() - mu).square().mean();
    const Real rs = Real(1) / std::sqrt(var + static_cast<Real>(kLayerNormEps));
    mean[i] = mu;
    rstd[i] = rs;
    y.row(i) = ((x.row(i).array() - mu) * rs).matrix().cwiseProduct(p.gain.transpose()) +
               p.bias.transpose();
  }
  return y;
}

// Input gradient only; gain and bias are frozen.
template <typename Real>
Mat<Real> layer_norm_backward(const Mat<Real>& x, const LayerNormParams<Real>& p,
                              const Vec<Real>& mean, const Vec<Real>& rstd, const Mat<Real>& dy) {
  const auto n = x.rows(), d = x.cols();
  Mat<Real> dx(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Array<Real, 1, Eigen::Dynamic> xhat = (x.row(i).array() - mean[i]) * rstd[i];
    const Eigen::Array<Real, 1, Eigen::Dynamic> dxhat = dy.row(i).array() * p.gain.transpose().array();
    const Real m1 = dxhat.mean();
    const Real m2 = (dxhat * xhat).mean();
    dx.row(i) = (rstd[i] * (dxhat - m1 - xhat * m2)).matrix();
  }
  return dx;
}

// tanh-approximated GELU and its derivative, elementwise. Array tanh keeps
// this vectorized; the scalar libm call dominated the feed-forward cost.
template <typename Real>
Mat<Real> gelu(const Mat<Real>& u) {
  constexpr Real k = static_cast<Real>(0.7978845608028654);  // sqrt(2/pi)
  const auto a = u.array();
  return (Real(0.5) * a * (Real(1) + (k * (a + Real(0.044715) * a.cube())).tanh())).matrix();
}

template <typename Real>
Mat<Real> gelu_grad(const Mat<Real>& u) {
  constexpr Real k = static_cast<Real>(0.7978845608028654);
  const auto a = u.array();
  const Eigen::Array<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> th =
      (k * (a + Real(0.044715) * a.cube())).tanh();
  return (Real(0.5) * (Real(1) + th) +
          Real(0.5) * a * (Real(1) - th.square()) * k * (Real(1) + Real(3 * 0.044715) * a.square()))
      .matrix();
}

// softmax(scale * s) row by row, in place; one row stays in L1 across the
// max, exp and normalize passes.
template <typename Real>
void softmax_rows(Mat<Real>& s, Real scale) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    auto row = s.row(r).array();
    row = (scale * (row - row.maxCoeff())).exp();
    row /= row.sum();
  }
}
}  // namespace detail

/// Noise prediction for latent z at timestep t under condition label cond,
/// tokenized with patch multiplier m. Pass a cache to enable backward().
template <typename Real>
BasicLatent<Real> forward(const ModelWeights<Real>& w, const BasicLatent<Real>& z, int t, int cond,
                          int m, ForwardCache<Real>* cache = nullptr,
                          MacCounter* counter = nullptr) {
  const ModelConfig& cfg = w.config;
  cfg.require_supported(m);
  if (z.height() != cfg.height || z.width() != cfg.width || z.channels() != cfg.channels)
    throw ValidationError("latent " + z.shape() + " does not match model latent " +
                          std::to_string(cfg.height) + "x" + std::to_string(cfg.width) + "x" +
                          std::to_string(cfg.channels));
  if (cond < 0 || cond >= cfg.vocab)
    throw ValidationError("condition label " + std::to_string(cond) + " outside vocabulary of " +
                          std::to_string(cfg.vocab));

  const int d = cfg.hidden, heads = cfg.heads, dh = cfg.head_dim();
  const bool adapted = m > 1;
  const Real lora_s = static_cast<Real>(cfg.lora_scale());
  const Real attn_scale = Real(1) / std::sqrt(static_cast<Real>(dh));

  const Vec<Real> cond_vec = w.cond_table.row(cond).transpose();
  const Vec<Real> t_vec = timestep_embedding(w, t, counter) + cond_vec;
  Mat<Real> patches = patchify(z, cfg.patch_edge(m));
  TokenSequence<Real> seq = embed(patches, w.embedders.at(m), cached_pos(w.pos, m), w.ident.get(m),
                                  t_vec, cfg.grid_rows(m), cfg.grid_cols(m), counter);
  Mat<Real> x = std::move(seq.tokens);
  const auto n = x.rows();

  if (cache) {
    cache->multiplier = m;
    cache->input = z;
    cache->patches = patches;
    cache->blocks.assign(w.blocks.size(), {});
  }

  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    const Block<Real>& b = w.blocks[l];
    BlockCache<Real> local;
    BlockCache<Real>& bc = cache ? cache->blocks[l] : local;

    bc.x_in = x;
    bc.h1 = detail::layer_norm(x, b.ln1, bc.mean1, bc.rstd1);
    bc.q = matmul<Real>(bc.h1, b.wq, counter);
    bc.k = matmul<Real>(bc.h1, b.wk, counter);
    bc.v = matmul<Real>(bc.h1, b.wv, counter);
    bc.attn_out.resize(n, d);
    if (cache) bc.probs.resize(static_cast<std::size_t>(heads));
    for (int hd = 0; hd < heads; ++hd) {
      Mat<Real> s = matmul<Real>(bc.q.middleCols(hd * dh, dh),
                                 bc.k.middleCols(hd * dh, dh).transpose(), counter);
      detail::softmax_rows(s, attn_scale);
      bc.attn_out.middleCols(hd * dh, dh) = matmul<Real>(s, bc.v.middleCols(hd * dh, dh), counter);
      if (cache) bc.probs[static_cast<std::size_t>(hd)] = std::move(s);
    }
    x += matmul<Real>(bc.attn_out, b.wo, counter);
    bc.x_mid = x;

    bc.h2 = detail::layer_norm(x, b.ln2, bc.mean2, bc.rstd2);
    bc.u = matmul<Real>(bc.h2, b.ffn1.weight, counter);
    bc.u.rowwise() += b.ffn1.bias.transpose();
    if (adapted) {
      bc.c1 = matmul<Real>(bc.h2, b.lora1.a.transpose(), counter);
      bc.u += lora_s * matmul<Real>(bc.c1, b.lora1.b.transpose(), counter);
    }
    bc.act = detail::gelu(bc.u);
    Mat<Real> f = matmul<Real>(bc.act, b.ffn2.weight, counter);
    f.rowwise() += b.ffn2.bias.transpose();
    if (adapted) {
      bc.c2 = matmul<Real>(bc.act, b.lora2.a.transpose(), counter);
      f += lora_s * matmul<Real>(bc.c2, b.lora2.b.transpose(), counter);
    }
    x += f;
  }

  const auto& de = w.deembedders.at(m);
  Mat<Real> out = matmul<Real>(x, de.weight, counter);
  out.rowwise() += de.bias.transpose();
  if (cache) cache->x_final = std::move(x);

  BasicLatent<Real> eps = depatchify(out, cfg.patch_edge(m), cfg.height, cfg.width);
  if (adapted) {
    const Real g = w.gates.at(m)[0];
    for (std::size_t i = 0; i < eps.size(); ++i) eps[i] += g * z[i];
  }
  if (!eps.all_finite())
    throw NumericError("non-finite activations in forward pass (t=" + std::to_string(t) +
                       ", m=" + std::to_string(m) + ")");
  return eps;
}

/// Accumulates dL/dparam for the trainable parameters of the adapted path
/// (m > 1) into grads, given dL/d(output). Frozen tensors are left untouched.
template <typename Real>
void backward(const ModelWeights<Real>& w, const ForwardCache<Real>& cache,
              const BasicLatent<Real>& d_out, ModelWeights<Real>& grads) {
  const ModelConfig& cfg = w.config;
  const int m = cache.multiplier;
  require(m > 1, "backward is defined for the adapted path (multiplier > 1)");
  require(cache.blocks.size() == w.blocks.size(), "backward: cache was not filled by forward");
  require_same_shape(d_out, cache.input, "backward");
  const int heads = cfg.heads, dh = cfg.head_dim();
  const Real lora_s = static_cast<Real>(cfg.lora_scale());
  const Real attn_scale = Real(1) / std::sqrt(static_cast<Real>(dh));

  Real dgate = 0;
  for (std::size_t i = 0; i < d_out.size(); ++i) dgate += d_out[i] * cache.input[i];
  grads.gates.at(m)[0] += dgate;

  const Mat<Real> dy = patchify(d_out, cfg.patch_edge(m));
  const auto& de = w.deembedders.at(m);
  auto& gde = grads.deembedders.at(m);
  gde.weight.noalias() += cache.x_final.transpose() * dy;
  gde.bias += dy.colwise().sum().transpose();
  Mat<Real> dx = dy * de.weight.transpose();

  for (std::size_t li = w.blocks.size(); li-- > 0;) {
    const Block<Real>& b = w.blocks[li];
    const BlockCache<Real>& bc = cache.blocks[li];
    Block<Real>& gb = grads.blocks[li];

    // Feed-forward with LoRA deltas.
    const Mat<Real>& df = dx;
    Mat<Real> dact = df * b.ffn2.weight.transpose();
    {
      const Mat<Real> dc2 = lora_s * (df * b.lora2.b);  // N x r
      gb.lora2.b.noalias() += lora_s * (df.transpose() * bc.c2);
      gb.lora2.a.noalias() += dc2.transpose() * bc.act;
      dact.noalias() += dc2 * b.lora2.a;
    }
    Mat<Real> du = dact.cwiseProduct(detail::gelu_grad(bc.u));
    Mat<Real> dh2 = du * b.ffn1.weight.transpose();
    {
      const Mat<Real> dc1 = lora_s * (du * b.lora1.b);
      gb.lora1.b.noalias() += lora_s * (du.transpose() * bc.c1);
      gb.lora1.a.noalias() += dc1.transpose() * bc.h2;
      dh2.noalias() += dc1 * b.lora1.a;
    }
    dx += detail::layer_norm_backward(bc.x_mid, b.ln2, bc.mean2, bc.rstd2, dh2);

    // Attention.
    const Mat<Real> d_attn = dx * b.wo.transpose();
    Mat<Real> dq(d_attn.rows(), d_attn.cols()), dk(dq.rows(), dq.cols()), dv(dq.rows(), dq.cols());
    for (int hd = 0; hd < heads; ++hd) {
      const Mat<Real>& p = bc.probs[static_cast<std::size_t>(hd)];
      const auto d_o = d_attn.middleCols(hd * dh, dh);
      const Mat<Real> dp = d_o * bc.v.middleCols(hd * dh, dh).transpose();
      dv.middleCols(hd * dh, dh) = p.transpose() * d_o;
      const Vec<Real> row_dot = (dp.cwiseProduct(p)).rowwise().sum();
      Mat<Real> ds = p.cwiseProduct(dp - row_dot.replicate(1, dp.cols()));
      ds *= attn_scale;
      dq.middleCols(hd * dh, dh) = ds * bc.k.middleCols(hd * dh, dh);
      dk.middleCols(hd * dh, dh) = ds.transpose() * bc.q.middleCols(hd * dh, dh);
    }
    Mat<Real> dh1 = dq * b.wq.transpose();
    dh1.noalias() += dk * b.wk.transpose();
    dh1.noalias() += dv * b.wv.transpose();
    dx += detail::layer_norm_backward(bc.x_in, b.ln1, bc.mean1, bc.rstd1, dh1);
  }

  auto& ge = grads.embedders.at(m);
  ge.weight.noalias() += cache.patches.transpose() * dx;
  const Vec<Real> col = dx.colwise().sum().transpose();
  ge.bias += col;
  grads.ident.vectors.at(m) += col;
}

// ---------------------------------------------------------------------------
// Cost model

/// Analytic FLOP count (2 x multiply-accumulates of every matrix product in
/// forward()), with N = HW/(p m)^2 tokens, P = (p m)^2 C patch width,
/// d hidden, f = ffn_mult * d, r LoRA rank, L layers:
///   time MLP     2 d^2
///   embed        N P d
///   qkv + out    L * 4 N d^2
///   scores QK^T  L * N^2 d
///   values AV    L * N^2 d
///   ffn          L * 2 N d f
///   lora (m>1)   L * 2 N r (d + f)
///   de-embed     N d P
/// Elementwise work (softmax, norms, activations) is not counted.
struct FlopEstimate {
  std::uint64_t tokens = 0;
  std::uint64_t time_mlp = 0;
  std::uint64_t embed = 0;
  std::uint64_t attention_proj = 0;
  std::uint64_t attention_scores = 0;
  std::uint64_t attention_values = 0;
  std::uint64_t ffn = 0;
  std::uint64_t lora = 0;
  std::uint64_t deembed = 0;

  std::uint64_t attention() const { return attention_proj + attention_scores + attention_values; }
  std::uint64_t total() const {
    return time_mlp + embed + attention() + ffn + lora + deembed;
  }
};

inline FlopEstimate count_flops(int m, const ModelConfig& cfg) {
  cfg.require_supported(m);
  using U = std::uint64_t;
  const U n = static_cast<U>(cfg.tokens(m)), p = static_cast<U>(cfg.patch_dim(m));
  const U d = static_cast<U>(cfg.hidden), f = static_cast<U>(cfg.ffn_hidden());
  const U r = static_cast<U>(cfg.lora_rank), l = static_cast<U>(cfg.layers);
  FlopEstimate e;
  e.tokens = n;
  e.time_mlp = 2 * (2 * d * d);
  e.embed = 2 * n * p * d;
  e.attention_proj = 2 * l * 4 * n * d * d;
  e.attention_scores = 2 * l * n * n * d;
  e.attention_values = 2 * l * n * n * d;
  e.ffn = 2 * l * 2 * n * d * f;
  e.lora = m > 1 ? 2 * l * 2 * n * r * (d + f) : 0;
  e.deembed = 2 * n * d * p;
  return e;
}

}  // namespace ddit
