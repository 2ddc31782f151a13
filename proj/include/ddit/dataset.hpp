#pragma once

// Procedural latent generators standing in for VAE latents of real images.
// Each condition label owns one generator kind; every sample is normalized
// to zero mean and unit variance over all of its elements.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "ddit/error.hpp"
#include "ddit/latent.hpp"
#include "ddit/rng.hpp"

namespace ddit {

enum class DataKind : int {
  smooth_blobs = 0,
  low_freq_gradient = 1,
  checkerboard_texture = 2,
  noise_texture = 3,
};

inline constexpr std::array<DataKind, 4> kAllKinds{DataKind::smooth_blobs, DataKind::low_freq_gradient,
                                                   DataKind::checkerboard_texture,
                                                   DataKind::noise_texture};

inline std::string to_string(DataKind k) {
  switch (k) {
    case DataKind::smooth_blobs: return "smooth-blobs";
    case DataKind::low_freq_gradient: return "low-freq-gradient";
    case DataKind::checkerboard_texture: return "checkerboard-texture";
    case DataKind::noise_texture: return "noise-texture";
  }
  return "unknown";
}

/// Accepts the canonical names, the short aliases "smooth" / "gradient" /
/// "textured" / "noise", and the numeric label.
inline DataKind parse_kind(const std::string& s) {
  if (s == "smooth-blobs" || s == "smooth" || s == "0") return DataKind::smooth_blobs;
  if (s == "low-freq-gradient" || s == "gradient" || s == "1") return DataKind::low_freq_gradient;
  if (s == "checkerboard-texture" || s == "textured" || s == "checkerboard" || s == "2")
    return DataKind::checkerboard_texture;
  if (s == "noise-texture" || s == "noise" || s == "3") return DataKind::noise_texture;
  throw ValidationError("unknown data kind '" + s +
                        "'; expected smooth-blobs, low-freq-gradient, checkerboard-texture or noise-texture");
}

inline int label_of(DataKind k) { return static_cast<int>(k); }
inline bool is_textured(DataKind k) {
  return k == DataKind::checkerboard_texture || k == DataKind::noise_texture;
}

struct LatentShape {
  int height = 64;
  int width = 64;
  int channels = 4;
};

struct Sample {
  Latent latent;
  int label = 0;
};

struct SyntheticDataset {
  std::vector<Sample> samples;
  std::vector<DataKind> kinds;
  std::uint64_t seed = 0;
};

/// Mean over channels and non-overlapping 2x2 windows of the spatial
/// population standard deviation inside each window.
template <typename Real>
double mean_local_std(const BasicLatent<Real>& z) {
  const int rows = z.height() / 2, cols = z.width() / 2;
  require(rows >= 1 && cols >= 1, "mean_local_std needs at least a 2x2 latent");
  double total = 0.0;
  for (int c = 0; c < z.channels(); ++c)
    for (int r = 0; r < rows; ++r)
      for (int q = 0; q < cols; ++q) {
        double v[4] = {z.at(2 * r, 2 * q, c), z.at(2 * r, 2 * q + 1, c), z.at(2 * r + 1, 2 * q, c),
                       z.at(2 * r + 1, 2 * q + 1, c)};
        const double mu = (v[0] + v[1] + v[2] + v[3]) / 4.0;
        double sq = 0.0;
        for (double x : v) sq += (x - mu) * (x - mu);
        total += std::sqrt(sq / 4.0);
      }
  return total / (static_cast<double>(rows) * cols * z.channels());
}

namespace detail {

inline void normalize(std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / static_cast<double>(v.size()));
  for (double& x : v) x = sd > 0 ? (x - mean) / sd : 0.0;
}

inline std::vector<double> blobs(CounterRng& rng, const LatentShape& s, int count) {
  std::vector<double> v(static_cast<std::size_t>(s.height) * s.width * s.channels, 0.0);
  for (int b = 0; b < count; ++b) {
    const double cy = rng.uniform(0, s.height), cx = rng.uniform(0, s.width);
    const double sigma = rng.uniform(s.height / 8.0, s.height / 4.0);
    std::vector<double> amp(static_cast<std::size_t>(s.channels));
    for (auto& a : amp) a = rng.normal();
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x) {
        const double r2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
        const double g = std::exp(-r2 / (2 * sigma * sigma));
        for (int c = 0; c < s.channels; ++c)
          v[(static_cast<std::size_t>(y) * s.width + x) * s.channels + c] += amp[c] * g;
      }
  }
  return v;
}

inline std::vector<double> generate_raw(DataKind kind, const LatentShape& s, CounterRng& rng) {
  const std::size_t n = static_cast<std::size_t>(s.height) * s.width * s.channels;
  auto idx = [&](int y, int x, int c) { return (static_cast<std::size_t>(y) * s.width + x) * s.channels + c; };
  switch (kind) {
    case DataKind::smooth_blobs:
      return blobs(rng, s, 4 + static_cast<int>(rng.below(3)));
    case DataKind::low_freq_gradient: {
      std::vector<double> v(n);
      for (int c = 0; c < s.channels; ++c) {
        const double gx = rng.normal(), gy = rng.normal(), a = rng.normal();
        const double fx = static_cast<double>(rng.below(2)), fy = static_cast<double>(rng.below(2));
        const double ph = rng.uniform(0, 2 * std::numbers::pi);
        for (int y = 0; y < s.height; ++y)
          for (int x = 0; x < s.width; ++x) {
            const double u = static_cast<double>(x) / s.width, w = static_cast<double>(y) / s.height;
            v[idx(y, x, c)] = gx * u + gy * w + a * std::cos(2 * std::numbers::pi * (fx * u + fy * w) + ph);
          }
      }
      return v;
    }
    case DataKind::checkerboard_texture: {
      std::vector<double> v = blobs(rng, s, 2);
      std::vector<double> mod = blobs(rng, s, 2);
      std::vector<double> amp(static_cast<std::size_t>(s.channels));
      for (auto& a : amp) a = 1.0 + 0.5 * rng.uniform();
      for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x) {
          const double sign = ((x + y) % 2 == 0) ? 1.0 : -1.0;
          for (int c = 0; c < s.channels; ++c) {
            const std::size_t i = idx(y, x, c);
            v[i] = 0.3 * v[i] + sign * amp[c] * (1.0 + 0.3 * std::tanh(mod[i]));
          }
        }
      return v;
    }
    case DataKind::noise_texture: {
      std::vector<double> v(n);
      for (auto& x : v) x = rng.normal();
      return v;
    }
  }
  throw ValidationError("unknown data kind");
}

}  // namespace detail

inline constexpr double kSmoothLocalStdCeiling = 0.5;

/// Deterministic in (kind, index, seed).
inline Latent generate_latent(DataKind kind, const LatentShape& shape, std::uint64_t seed,
                              std::uint64_t index) {
  CounterRng rng(seed, (static_cast<std::uint64_t>(kind) << 32) | index);
  std::vector<double> raw = detail::generate_raw(kind, shape, rng);
  detail::normalize(raw);
  std::vector<float> vals(raw.begin(), raw.end());
  Latent z(shape.height, shape.width, shape.channels, std::move(vals));
  const double ls = mean_local_std(z);
  if (is_textured(kind) ? !(ls > kSmoothLocalStdCeiling) : !(ls < kSmoothLocalStdCeiling))
    throw NumericError("generated " + to_string(kind) + " latent has mean local std " +
                       std::to_string(ls) + " on the wrong side of " +
                       std::to_string(kSmoothLocalStdCeiling));
  return z;
}

inline SyntheticDataset generate_dataset(DataKind kind, int n, std::uint64_t seed,
                                         const LatentShape& shape = {}) {
  require(n >= 1, "dataset size must be >= 1");
  SyntheticDataset ds;
  ds.seed = seed;
  ds.kinds = {kind};
  for (int i = 0; i < n; ++i)
    ds.samples.push_back({generate_latent(kind, shape, seed, static_cast<std::uint64_t>(i)), label_of(kind)});
  return ds;
}

/// n samples of each kind, interleaved by kind.
inline SyntheticDataset generate_mixed_dataset(int n_per_kind, std::uint64_t seed,
                                               const LatentShape& shape = {}) {
  require(n_per_kind >= 1, "dataset size must be >= 1");
  SyntheticDataset ds;
  ds.seed = seed;
  ds.kinds.assign(kAllKinds.begin(), kAllKinds.end());
  for (int i = 0; i < n_per_kind; ++i)
    for (DataKind k : kAllKinds)
      ds.samples.push_back({generate_latent(k, shape, seed, static_cast<std::uint64_t>(i)), label_of(k)});
  return ds;
}

/// Training corpus used by `ddit train --data mixed` and the acceptance run:
/// 16 samples of each kind, with a disjoint held-out draw of 4 per kind.
inline SyntheticDataset default_train_set(std::uint64_t seed = 0, int n_per_kind = 16) {
  return generate_mixed_dataset(n_per_kind, seed);
}

inline SyntheticDataset default_heldout_set(std::uint64_t seed = 0, int n_per_kind = 4) {
  return generate_mixed_dataset(n_per_kind, seed + 1000);
}

}  // namespace ddit
