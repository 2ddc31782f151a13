#pragma once

// Multi-size patch tokenization: patchify/depatchify, bilinear resizing,
// patch (de-)embedders, positional-grid interpolation and size identifiers.
// Patches are flattened in (row, col, channel) order and enumerated
// row-major from the top-left of the latent.

#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <vector>
#include <sstream>
#include <string>

#include "ddit/error.hpp"
#include "ddit/latent.hpp"
#include "ddit/tensor.hpp"

namespace ddit {

template <typename Real>
Mat<Real> patchify(const BasicLatent<Real>& z, int edge) {
  if (edge < 1 || z.height() % edge != 0 || z.width() % edge != 0)
    throw ValidationError("patch edge " + std::to_string(edge) + " does not divide latent " +
                          z.shape());
  const int gr = z.height() / edge, gc = z.width() / edge, ch = z.channels();
  Mat<Real> out(gr * gc, edge * edge * ch);
  for (int pr = 0; pr < gr; ++pr)
    for (int pc = 0; pc < gc; ++pc) {
      const int row = pr * gc + pc;
      int col = 0;
      for (int y = 0; y < edge; ++y)
        for (int x = 0; x < edge; ++x)
          for (int c = 0; c < ch; ++c) out(row, col++) = z.at(pr * edge + y, pc * edge + x, c);
    }
  return out;
}

template <typename Real>
BasicLatent<Real> depatchify(const Mat<Real>& patches, int edge, int height, int width) {
  require(edge >= 1 && height % edge == 0 && width % edge == 0,
          "depatchify: edge " + std::to_string(edge) + " does not divide " +
              std::to_string(height) + "x" + std::to_string(width));
  const int gr = height / edge, gc = width / edge;
  if (patches.rows() != gr * gc)
    throw ValidationError("depatchify: expected " + std::to_string(gr * gc) + " patches, got " +
                          std::to_string(patches.rows()));
  require(patches.cols() % (edge * edge) == 0 && patches.cols() > 0,
          "depatchify: patch width is not a multiple of edge^2");
  const int ch = static_cast<int>(patches.cols()) / (edge * edge);
  BasicLatent<Real> z(height, width, ch);
  for (int pr = 0; pr < gr; ++pr)
    for (int pc = 0; pc < gc; ++pc) {
      const int row = pr * gc + pc;
      int col = 0;
      for (int y = 0; y < edge; ++y)
        for (int x = 0; x < edge; ++x)
          for (int c = 0; c < ch; ++c) z.at(pr * edge + y, pc * edge + x, c) = patches(row, col++);
    }
  return z;
}

namespace detail {
// Align-corners source coordinate of output index i when resizing n -> m.
inline double align_corners_coord(int i, int src, int dst) {
  if (dst <= 1 || src <= 1) return 0.0;
  return static_cast<double>(i) * static_cast<double>(src - 1) / static_cast<double>(dst - 1);
}

struct Tap {
  int lo, hi;
  double frac;
};

inline Tap tap(int i, int src, int dst) {
  const double s = align_corners_coord(i, src, dst);
  int lo = static_cast<int>(std::floor(s));
  if (lo > src - 1) lo = src - 1;
  const int hi = lo + 1 < src ? lo + 1 : lo;
  return {lo, hi, s - lo};
}
}  // namespace detail

/// Align-corners bilinear resize of a square edge x edge x C patch.
template <typename Real>
BasicLatent<Real> bilinear_resize(const BasicLatent<Real>& patch, int new_edge) {
  require(patch.height() == patch.width(), "bilinear_resize expects a square patch, got " +
                                               patch.shape());
  require(new_edge >= 1, "bilinear_resize target edge must be positive");
  const int e = patch.height(), ch = patch.channels();
  BasicLatent<Real> out(new_edge, new_edge, ch);
  for (int y = 0; y < new_edge; ++y) {
    const auto ty = detail::tap(y, e, new_edge);
    for (int x = 0; x < new_edge; ++x) {
      const auto tx = detail::tap(x, e, new_edge);
      for (int c = 0; c < ch; ++c) {
        const double top = (1 - tx.frac) * patch.at(ty.lo, tx.lo, c) + tx.frac * patch.at(ty.lo, tx.hi, c);
        const double bot = (1 - tx.frac) * patch.at(ty.hi, tx.lo, c) + tx.frac * patch.at(ty.hi, tx.hi, c);
        out.at(y, x, c) = static_cast<Real>((1 - ty.frac) * top + ty.frac * bot);
      }
    }
  }
  return out;
}

/// Matrix R with R * flatten(x) == flatten(bilinear_resize(x, to_edge)).
inline Mat<double> resize_matrix(int from_edge, int to_edge, int channels) {
  const int rows = to_edge * to_edge * channels, cols = from_edge * from_edge * channels;
  Mat<double> r = Mat<double>::Zero(rows, cols);
  auto src = [&](int y, int x, int c) { return (y * from_edge + x) * channels + c; };
  for (int y = 0; y < to_edge; ++y) {
    const auto ty = detail::tap(y, from_edge, to_edge);
    for (int x = 0; x < to_edge; ++x) {
      const auto tx = detail::tap(x, from_edge, to_edge);
      for (int c = 0; c < channels; ++c) {
        const int row = (y * to_edge + x) * channels + c;
        r(row, src(ty.lo, tx.lo, c)) += (1 - ty.frac) * (1 - tx.frac);
        r(row, src(ty.lo, tx.hi, c)) += (1 - ty.frac) * tx.frac;
        r(row, src(ty.hi, tx.lo, c)) += ty.frac * (1 - tx.frac);
        r(row, src(ty.hi, tx.hi, c)) += ty.frac * tx.frac;
      }
    }
  }
  return r;
}

/// Linear patch -> token projection; weight is (edge*edge*C) x d.
template <typename Real>
struct PatchEmbedder {
  int multiplier = 1;
  int edge = 1;
  int channels = 1;
  Mat<Real> weight;
  Vec<Real> bias;

  int patch_dim() const { return edge * edge * channels; }
  int hidden() const { return static_cast<int>(bias.size()); }
};

/// Token -> patch projection; weight is d x (edge*edge*C).
template <typename Real>
struct PatchDeembedder {
  int multiplier = 1;
  int edge = 1;
  int channels = 1;
  Mat<Real> weight;
  Vec<Real> bias;

  int patch_dim() const { return edge * edge * channels; }
};

template <typename Real>
struct TokenSequence {
  Mat<Real> tokens;  // N x d
  int multiplier = 1;
  int grid_rows = 0;
  int grid_cols = 0;
};

// Positional table for a grid of rows x cols tokens, one row per token.
template <typename Real>
struct PositionalGrid {
  int rows = 0;
  int cols = 0;
  Mat<Real> base;                   // (rows*cols) x d
  std::map<int, Mat<Real>> cache;   // multiplier -> interpolated table
};

/// Align-corners bilinear interpolation of the base grid onto
/// (rows/m) x (cols/m) cells.
template <typename Real>
Mat<Real> interpolate_pos(const PositionalGrid<Real>& pos, int multiplier) {
  require(multiplier >= 1 && pos.rows % multiplier == 0 && pos.cols % multiplier == 0,
          "positional grid " + std::to_string(pos.rows) + "x" + std::to_string(pos.cols) +
              " cannot be coarsened by " + std::to_string(multiplier));
  if (multiplier == 1) return pos.base;
  const int tr = pos.rows / multiplier, tc = pos.cols / multiplier;
  const auto d = pos.base.cols();
  Mat<Real> out(tr * tc, d);
  for (int y = 0; y < tr; ++y) {
    const auto ty = detail::tap(y, pos.rows, tr);
    for (int x = 0; x < tc; ++x) {
      const auto tx = detail::tap(x, pos.cols, tc);
      const auto row = [&](int r, int c) { return pos.base.row(r * pos.cols + c).template cast<double>(); };
      const Eigen::RowVectorXd top = (1 - tx.frac) * row(ty.lo, tx.lo) + tx.frac * row(ty.lo, tx.hi);
      const Eigen::RowVectorXd bot = (1 - tx.frac) * row(ty.hi, tx.lo) + tx.frac * row(ty.hi, tx.hi);
      out.row(y * tc + x) = ((1 - ty.frac) * top + ty.frac * bot).template cast<Real>();
    }
  }
  return out;
}

template <typename Real>
void rebuild_pos_cache(PositionalGrid<Real>& pos, const std::vector<int>& multipliers) {
  pos.cache.clear();
  for (int m : multipliers) pos.cache.emplace(m, interpolate_pos(pos, m));
}

template <typename Real>
const Mat<Real>& cached_pos(const PositionalGrid<Real>& pos, int multiplier) {
  auto it = pos.cache.find(multiplier);
  if (it == pos.cache.end())
    throw ValidationError("no positional table prepared for multiplier " + std::to_string(multiplier));
  return it->second;
}

/// Learned per-size vector added to every token; multiplier 1 is pinned to zero.
template <typename Real>
struct SizeIdentifier {
  int hidden = 0;
  std::map<int, Vec<Real>> vectors;  // only multipliers > 1 are stored

  Vec<Real> get(int multiplier) const {
    if (multiplier == 1) return Vec<Real>::Zero(hidden);
    auto it = vectors.find(multiplier);
    if (it == vectors.end())
      throw ValidationError("no size identifier for multiplier " + std::to_string(multiplier));
    return it->second;
  }
};

/// token_i = W^T patch_i + b + pos_i + ident + t_embed.
template <typename Real>
TokenSequence<Real> embed(const Mat<Real>& patches, const PatchEmbedder<Real>& embedder,
                          const Mat<Real>& pos, const Vec<Real>& ident, const Vec<Real>& t_embed,
                          int grid_rows, int grid_cols, MacCounter* counter = nullptr) {
  if (patches.cols() != embedder.weight.rows())
    throw ValidationError("embed: patch width " + std::to_string(patches.cols()) +
                          " does not match embedder input " + std::to_string(embedder.weight.rows()));
  if (pos.rows() != patches.rows() || pos.cols() != embedder.weight.cols())
    throw ValidationError("embed: positional table shape does not match token grid");
  if (ident.size() != embedder.weight.cols() || t_embed.size() != embedder.weight.cols())
    throw ValidationError("embed: identifier/time embedding width mismatch");
  require(static_cast<Eigen::Index>(grid_rows) * grid_cols == patches.rows(),
          "embed: grid dims do not match patch count");
  TokenSequence<Real> seq;
  seq.multiplier = embedder.multiplier;
  seq.grid_rows = grid_rows;
  seq.grid_cols = grid_cols;
  seq.tokens = matmul<Real>(patches, embedder.weight, counter);
  const Vec<Real> shift = embedder.bias + ident + t_embed;
  seq.tokens += pos;
  seq.tokens.rowwise() += shift.transpose();
  return seq;
}

struct PseudoInverseReport {
  double condition_number = 0.0;
};

/// FlexiViT-style resize: the new weights solve U^T w_new = w_base with
/// minimum norm, where U is the bilinear upsampling p -> p*m. Hence
/// embed_m(upsample(x)) == embed_1(x) for every base-sized patch x.
template <typename Real>
PatchEmbedder<Real> init_pseudo_inverse(const PatchEmbedder<Real>& base, int multiplier,
                                        PseudoInverseReport* report = nullptr,
                                        double max_condition = 1e6) {
  require(base.multiplier == 1, "pseudo-inverse init expects the base (m=1) embedder");
  require(multiplier >= 1, "multiplier must be positive");
  if (multiplier == 1) return base;
  const int new_edge = base.edge * multiplier;
  const Mat<double> up = resize_matrix(base.edge, new_edge, base.channels);
  Eigen::JacobiSVD<Mat<double>> svd(up);
  const auto& sv = svd.singularValues();
  const double cond = sv.minCoeff() > 0 ? sv.maxCoeff() / sv.minCoeff()
                                        : std::numeric_limits<double>::infinity();
  if (report) report->condition_number = cond;
  if (!(cond <= max_condition)) {
    std::ostringstream os;
    os << "bilinear projection " << base.edge << "->" << new_edge
       << " is ill-conditioned (condition number " << cond << ")";
    throw NumericError(os.str());
  }
  const Mat<double> up_t = up.transpose();
  const Mat<double> pinv = up_t.completeOrthogonalDecomposition().pseudoInverse();
  PatchEmbedder<Real> out;
  out.multiplier = multiplier;
  out.edge = new_edge;
  out.channels = base.channels;
  out.weight = (pinv * base.weight.template cast<double>()).template cast<Real>();
  out.bias = base.bias;
  return out;
}

/// De-embedder whose output is the bilinear upsample of the base output.
template <typename Real>
PatchDeembedder<Real> init_upsampled_deembedder(const PatchDeembedder<Real>& base, int multiplier) {
  require(base.multiplier == 1, "upsampled de-embedder init expects the base (m=1) de-embedder");
  if (multiplier == 1) return base;
  const int new_edge = base.edge * multiplier;
  const Mat<double> up = resize_matrix(base.edge, new_edge, base.channels);
  PatchDeembedder<Real> out;
  out.multiplier = multiplier;
  out.edge = new_edge;
  out.channels = base.channels;
  out.weight = (base.weight.template cast<double>() * up.transpose()).template cast<Real>();
  out.bias = (up * base.bias.template cast<double>()).template cast<Real>();
  return out;
}

}  // namespace ddit
