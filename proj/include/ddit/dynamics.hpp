#pragma once

// Finite-difference statistics of a denoising trajectory: differences of
// order 1..3 over the most recent latents, per-patch spread of the
// difference field, and percentile aggregation across patches.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "ddit/error.hpp"
#include "ddit/latent.hpp"

namespace ddit {

template <typename Real>
BasicLatent<Real> first_difference(const BasicLatent<Real>& newer, const BasicLatent<Real>& older) {
  require_same_shape(newer, older, "first_difference");
  BasicLatent<Real> out(newer.height(), newer.width(), newer.channels());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = newer[i] - older[i];
  return out;
}

/// Fixed-capacity window of the newest latents of one trajectory, oldest first.
template <typename Real>
class BasicTrajectoryWindow {
 public:
  static constexpr std::size_t kCapacity = 4;

  struct Entry {
    int timestep;
    BasicLatent<Real> latent;
  };

  void push(int timestep, BasicLatent<Real> latent) {
    if (!entries_.empty()) {
      if (timestep >= entries_.back().timestep)
        throw ValidationError("trajectory timesteps must strictly decrease: " +
                              std::to_string(timestep) + " after " +
                              std::to_string(entries_.back().timestep));
      require_same_shape(latent, entries_.back().latent, "trajectory window");
    }
    if (entries_.size() == kCapacity) entries_.erase(entries_.begin());
    entries_.push_back({timestep, std::move(latent)});
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  void clear() { entries_.clear(); }

  // i = 0 is the oldest retained entry.
  const Entry& operator[](std::size_t i) const { return entries_[i]; }
  const Entry& newest() const { return entries_.back(); }
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  std::vector<Entry> entries_;
};

using TrajectoryWindow = BasicTrajectoryWindow<float>;

namespace detail {
template <typename Real>
void require_history(const BasicTrajectoryWindow<Real>& w, int order) {
  if (order < 1 || order > 3)
    throw ValidationError("difference order must be 1, 2 or 3, got " + std::to_string(order));
  if (w.size() < static_cast<std::size_t>(order) + 1)
    throw ValidationError("order-" + std::to_string(order) + " difference needs a window of " +
                          std::to_string(order + 1) + " latents, have " +
                          std::to_string(w.size()));
}
}  // namespace detail

/// Order-n difference at the newest entry, built as differences of differences.
template <typename Real>
BasicLatent<Real> nth_difference(const BasicTrajectoryWindow<Real>& window, int order) {
  detail::require_history(window, order);
  const std::size_t first = window.size() - static_cast<std::size_t>(order) - 1;
  std::vector<BasicLatent<Real>> level;
  for (std::size_t i = first + 1; i < window.size(); ++i)
    level.push_back(first_difference(window[i].latent, window[i - 1].latent));
  while (level.size() > 1) {
    std::vector<BasicLatent<Real>> next;
    for (std::size_t i = 1; i < level.size(); ++i)
      next.push_back(first_difference(level[i], level[i - 1]));
    level = std::move(next);
  }
  return level.front();
}

/// Same quantity via the binomial expansion sum_k (-1)^k C(n,k) z_{newest-k}.
template <typename Real>
BasicLatent<Real> nth_difference_closed_form(const BasicTrajectoryWindow<Real>& window, int order) {
  detail::require_history(window, order);
  static constexpr std::array<std::array<int, 4>, 4> kBinomial{{
      {1, 0, 0, 0}, {1, -1, 0, 0}, {1, -2, 1, 0}, {1, -3, 3, -1}}};
  const auto& coef = kBinomial[static_cast<std::size_t>(order)];
  const BasicLatent<Real>& ref = window.newest().latent;
  BasicLatent<Real> out(ref.height(), ref.width(), ref.channels());
  const std::size_t newest = window.size() - 1;
  for (std::size_t e = 0; e < out.size(); ++e) {
    Real acc = Real(0);
    for (int k = 0; k <= order; ++k)
      acc += static_cast<Real>(coef[static_cast<std::size_t>(k)]) *
             window[newest - static_cast<std::size_t>(k)].latent[e];
    out[e] = acc;
  }
  return out;
}

/// Per-patch population standard deviation on a (H/edge) x (W/edge) grid.
struct VarianceField {
  int rows = 0;
  int cols = 0;
  int patch_edge = 0;
  int multiplier = 0;  // filled by callers that know the base patch
  std::vector<double> values;

  double at(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }
};

// Each patch pools patch_edge^2 * C values; the reduction order is fixed
// (row, col, channel) so results do not depend on scheduling.
template <typename Real>
VarianceField per_patch_std(const BasicLatent<Real>& field, int patch_edge) {
  if (patch_edge < 1 || field.height() % patch_edge != 0 || field.width() % patch_edge != 0)
    throw ValidationError("patch edge " + std::to_string(patch_edge) +
                          " does not divide latent " + field.shape());
  VarianceField out;
  out.rows = field.height() / patch_edge;
  out.cols = field.width() / patch_edge;
  out.patch_edge = patch_edge;
  out.values.resize(static_cast<std::size_t>(out.rows) * out.cols);
  const int ch = field.channels();
  const double count = static_cast<double>(patch_edge) * patch_edge * ch;
  for (int pr = 0; pr < out.rows; ++pr) {
    for (int pc = 0; pc < out.cols; ++pc) {
      double sum = 0.0;
      for (int y = 0; y < patch_edge; ++y)
        for (int x = 0; x < patch_edge; ++x)
          for (int c = 0; c < ch; ++c)
            sum += static_cast<double>(field.at(pr * patch_edge + y, pc * patch_edge + x, c));
      const double mean = sum / count;
      double sq = 0.0;
      for (int y = 0; y < patch_edge; ++y)
        for (int x = 0; x < patch_edge; ++x)
          for (int c = 0; c < ch; ++c) {
            const double d =
                static_cast<double>(field.at(pr * patch_edge + y, pc * patch_edge + x, c)) - mean;
            sq += d * d;
          }
      out.values[static_cast<std::size_t>(pr) * out.cols + pc] = std::sqrt(sq / count);
    }
  }
  return out;
}

/// Linear interpolation between closest ranks: r = rho * (n - 1).
inline double percentile(std::span<const double> values, double rho) {
  if (values.empty()) throw ValidationError("percentile of an empty sequence");
  if (!(rho >= 0.0 && rho <= 1.0))
    throw ValidationError("percentile rho must lie in [0, 1], got " + std::to_string(rho));
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  const double rank = rho * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const double frac = rank - static_cast<double>(lo);
  if (lo + 1 >= v.size()) return v.back();
  return v[lo] + frac * (v[lo + 1] - v[lo]);
}

}  // namespace ddit
