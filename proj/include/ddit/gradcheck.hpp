#pragma once

// Central-difference check of backward() on the adapted path. The probe
// loss is L = <probe, forward(z)>, so dL/d(output) = probe exactly.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "ddit/model.hpp"
#include "ddit/rng.hpp"

namespace ddit {

struct GradCheckEntry {
  std::string name;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double worst = 0.0;
};

/// Checks `count` trainable entries relevant to multiplier m: the first and
/// last entry of every relevant tensor, then random picks.
inline GradCheckReport gradient_check(ModelWeights<double>& w, const BasicLatent<double>& z,
                                      const BasicLatent<double>& probe, int t, int cond, int m,
                                      std::size_t count, double h, std::uint64_t seed) {
  require(m > 1, "gradient_check needs an adapted multiplier");
  auto loss = [&] {
    const auto out = forward(w, z, t, cond, m);
    double s = 0;
    for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * probe[i];
    return s;
  };
  ForwardCache<double> cache;
  forward(w, z, t, cond, m, &cache);
  auto grads = zeros_like(w);
  backward(w, cache, probe, grads);

  auto pv = parameters(w);
  auto gv = parameters(grads);
  const std::string tag = ".m" + std::to_string(m);
  auto relevant = [&](std::size_t i) {
    if (!pv[i].trainable) return false;
    const auto& n = pv[i].name;
    return n.find(".m") == std::string::npos || n.find(tag) != std::string::npos;
  };
  std::vector<std::pair<std::size_t, std::size_t>> picks;
  for (std::size_t i = 0; i < pv.size(); ++i)
    if (relevant(i)) {
      picks.emplace_back(i, 0);
      picks.emplace_back(i, pv[i].size - 1);
    }
  CounterRng rng(seed, 0x6C4Eu);
  while (picks.size() < count) {
    const auto i = static_cast<std::size_t>(rng.below(pv.size()));
    if (relevant(i)) picks.emplace_back(i, static_cast<std::size_t>(rng.below(pv[i].size)));
  }
  picks.resize(count);

  GradCheckReport rep;
  for (auto [i, k] : picks) {
    double& p = pv[i].data[k];
    const double keep = p;
    p = keep + h;
    const double up = loss();
    p = keep - h;
    const double down = loss();
    p = keep;
    GradCheckEntry e;
    e.name = pv[i].name;
    e.index = k;
    e.numeric = (up - down) / (2 * h);
    e.analytic = gv[i].data[k];
    e.rel_error = std::abs(e.numeric - e.analytic) / std::max({std::abs(e.numeric), std::abs(e.analytic), 1e-6});
    rep.worst = std::max(rep.worst, e.rel_error);
    rep.entries.push_back(std::move(e));
  }
  return rep;
}

/// Micro configuration used for gradient checks (d=8, one block, 8x8x1 latent).
inline ModelConfig micro_config() {
  ModelConfig c;
  c.hidden = 8;
  c.layers = 1;
  c.heads = 2;
  c.height = c.width = 8;
  c.channels = 1;
  c.lora_rank = 2;
  c.lora_alpha = 2;
  return c;
}

/// Perturbs every trainable tensor so LoRA B and the gates are nonzero and
/// each trainable parameter has a live gradient.
template <typename Real>
void perturb_trainables(ModelWeights<Real>& w, std::uint64_t seed, double scale) {
  CounterRng rng(seed, 3);
  for (auto& v : parameters(w))
    if (v.trainable)
      for (std::size_t i = 0; i < v.size; ++i) v.data[i] += static_cast<Real>(scale * rng.normal());
}

}  // namespace ddit
