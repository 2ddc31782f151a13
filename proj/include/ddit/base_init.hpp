#pragma once

// Seeded construction of the frozen base model and of the adapter
// parameters for larger patch sizes.
//
// There is no pretrained backbone at this scale, so the base model is built
// procedurally to behave like a plausible noise predictor: the base patch
// embedder is an isometry onto a p*p*C dimensional "patch subspace" of the
// hidden space and the de-embedder is its transpose, so the residual stream
// carries the input latent through to the output. Positional, timestep and
// conditioning signals live mostly in the orthogonal complement; only the
// conditioning writes a small class prototype (the mean-removed local
// pattern of that label's data kind) into the patch subspace. Block output
// projections are scaled down so attention and feed-forward layers perturb
// the prediction without swamping it.

#include <cmath>
#include <cstdint>

#include "ddit/dataset.hpp"
#include "ddit/model.hpp"
#include "ddit/patching.hpp"
#include "ddit/rng.hpp"

namespace ddit {

struct BaseInitOptions {
  double block_out_scale = 0.005;   // std multiplier for attention-out and ffn-out weights
  double cond_texture_gain = 0.05;  // weight of the class prototype in the patch subspace
  double context_scale = 0.5;       // magnitude of positional / time / condition vectors
  double time_cutoff = 0.02;        // timestep features faster than this (rad per step of t) are damped
};

namespace detail {

template <typename Real>
Mat<Real> gaussian(CounterRng& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
  Mat<Real> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Real>(stddev * rng.normal());
  return m;
}

// Average over base patches of (patch - per-channel patch mean), flattened
// in (row, col, channel) order.
inline Eigen::VectorXd class_prototype(DataKind kind, const ModelConfig& cfg, std::uint64_t seed) {
  const Latent z = generate_latent(kind, {cfg.height, cfg.width, cfg.channels}, seed, 0);
  const Mat<float> patches = patchify(z, cfg.base_patch);
  const int pp = cfg.base_patch * cfg.base_patch, ch = cfg.channels;
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(patches.cols());
  for (Eigen::Index r = 0; r < patches.rows(); ++r)
    for (int c = 0; c < ch; ++c) {
      double mean = 0.0;
      for (int k = 0; k < pp; ++k) mean += patches(r, k * ch + c);
      mean /= pp;
      for (int k = 0; k < pp; ++k) acc[k * ch + c] += patches(r, k * ch + c) - mean;
    }
  return acc / static_cast<double>(patches.rows());
}

}  // namespace detail

template <typename Real>
ModelWeights<Real> make_base_weights(const ModelConfig& cfg, std::uint64_t seed,
                                     const BaseInitOptions& opt = {}) {
  using detail::gaussian;
  ModelWeights<Real> w = allocate_weights<Real>(cfg);
  const int d = cfg.hidden, f = cfg.ffn_hidden(), p1 = cfg.patch_dim(1);
  std::uint64_t stream = 0;
  auto rng = [&] { return CounterRng(seed, ++stream); };

  // Orthonormal basis of the hidden space; the leading columns span the
  // patch subspace.
  auto r0 = rng();
  const Mat<double> q = Eigen::HouseholderQR<Mat<double>>(gaussian<double>(r0, d, d, 1.0))
                            .householderQ() * Mat<double>::Identity(d, d);
  const int k = std::min(p1, d);
  const int rest = d - k;
  Mat<double> emb = Mat<double>::Zero(p1, d);
  if (p1 <= d) {
    emb = q.leftCols(p1).transpose();
  } else {
    auto r = rng();
    emb = Eigen::HouseholderQR<Mat<double>>(gaussian<double>(r, p1, d, 1.0)).householderQ() *
          Mat<double>::Identity(p1, d);
  }
  const Mat<double> complement = rest > 0 ? Mat<double>(q.rightCols(rest)) : Mat<double>(q);
  // Context vector: random coefficients on the complement basis.
  auto context = [&](CounterRng& r) -> Eigen::RowVectorXd {
    const Eigen::VectorXd g = gaussian<double>(r, complement.cols(), 1, 1.0).col(0);
    const double norm_fix = std::sqrt(static_cast<double>(d) / complement.cols());
    return (opt.context_scale * norm_fix * (complement * g)).transpose();
  };

  w.embedders.at(1).weight = emb.template cast<Real>();
  {
    auto r = rng();
    w.embedders.at(1).bias = (0.5 * context(r)).transpose().template cast<Real>();
  }
  w.deembedders.at(1).weight = emb.transpose().template cast<Real>();

  {
    auto r = rng();
    w.t_mlp1.weight = gaussian<Real>(r, d, d, 1.0 / std::sqrt(d));
    // A trained network responds smoothly to t; mimic that by reading only
    // the slowly varying sinusoid features.
    const int half = d / 2;
    for (int j = 0; j < half; ++j) {
      const double freq = std::exp(-std::log(10000.0) * j / half);
      const double keep = 1.0 / (1.0 + std::pow(freq / opt.time_cutoff, 4));
      w.t_mlp1.weight.row(j) *= static_cast<Real>(keep);
      w.t_mlp1.weight.row(half + j) *= static_cast<Real>(keep);
    }
    const Mat<double> g = gaussian<double>(r, d, complement.cols(), 1.0);
    const double gain = opt.context_scale * std::sqrt(2.0 / complement.cols());
    w.t_mlp2.weight = (gain * g * complement.transpose()).template cast<Real>();
  }

  {
    // Smooth 2-D sinusoids mixed into the complement.
    auto r = rng();
    const int half = d / 2;
    const Mat<double> mix = gaussian<double>(r, d, complement.cols(), 1.0 / std::sqrt(d));
    for (int y = 0; y < w.pos.rows; ++y)
      for (int x = 0; x < w.pos.cols; ++x) {
        Eigen::VectorXd feat(d);
        for (int j = 0; j < half; ++j) {
          const double freq = std::pow(0.5, j % 6) * 0.5;
          const double coord = (j % 2 == 0) ? y : x;
          feat[2 * j] = std::sin(freq * coord + j);
          feat[2 * j + 1] = std::cos(freq * coord + j);
        }
        const Eigen::VectorXd v = opt.context_scale * std::sqrt(2.0) * complement * (mix.transpose() * feat);
        w.pos.base.row(y * w.pos.cols + x) = v.transpose().template cast<Real>();
      }
  }

  for (int c = 0; c < cfg.vocab; ++c) {
    auto r = rng();
    Eigen::RowVectorXd row = context(r);
    if (opt.cond_texture_gain != 0.0) {
      const DataKind kind = kAllKinds[static_cast<std::size_t>(c) % kAllKinds.size()];
      const Eigen::VectorXd proto = detail::class_prototype(kind, cfg, seed);
      row += opt.cond_texture_gain * (proto.transpose() * emb);
    }
    w.cond_table.row(c) = row.template cast<Real>();
  }

  for (auto& b : w.blocks) {
    auto r = rng();
    const double s_in = 1.0 / std::sqrt(d);
    b.wq = gaussian<Real>(r, d, d, s_in);
    b.wk = gaussian<Real>(r, d, d, s_in);
    b.wv = gaussian<Real>(r, d, d, s_in);
    b.wo = gaussian<Real>(r, d, d, opt.block_out_scale * s_in);
    b.ffn1.weight = gaussian<Real>(r, d, f, s_in);
    b.ffn2.weight = gaussian<Real>(r, f, d, opt.block_out_scale / std::sqrt(f));
  }
  rebuild_pos_cache(w.pos, cfg.multipliers);
  return w;
}

/// Fresh adapters for every multiplier > 1: pseudo-inverse embedders,
/// upsampling de-embedders, zero identifiers and gates, LoRA with B = 0.
template <typename Real>
void init_adapters(ModelWeights<Real>& w, std::uint64_t seed) {
  const ModelConfig& cfg = w.config;
  for (int m : cfg.multipliers) {
    if (m == 1) continue;
    w.embedders.at(m) = init_pseudo_inverse(w.embedders.at(1), m);
    w.deembedders.at(m) = init_upsampled_deembedder(w.deembedders.at(1), m);
    w.ident.vectors.at(m).setZero();
    w.gates.at(m).setZero();
  }
  CounterRng r(seed, 0xADA97E5ull);
  for (auto& b : w.blocks) {
    b.lora1.a = detail::gaussian<Real>(r, cfg.lora_rank, cfg.hidden, 1.0 / std::sqrt(cfg.hidden));
    b.lora1.b.setZero();
    b.lora2.a = detail::gaussian<Real>(r, cfg.lora_rank, cfg.ffn_hidden(), 1.0 / std::sqrt(cfg.ffn_hidden()));
    b.lora2.b.setZero();
  }
}

template <typename Real>
ModelWeights<Real> make_model(const ModelConfig& cfg, std::uint64_t seed, const BaseInitOptions& opt = {}) {
  ModelWeights<Real> w = make_base_weights<Real>(cfg, seed, opt);
  init_adapters(w, seed);
  return w;
}

}  // namespace ddit
