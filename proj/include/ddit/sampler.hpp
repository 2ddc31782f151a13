#pragma once

// Deterministic DDIM (eta = 0) sampling with per-step patch scheduling and
// cost accounting.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ddit/dynamics.hpp"
#include "ddit/error.hpp"
#include "ddit/latent.hpp"
#include "ddit/model.hpp"
#include "ddit/rng.hpp"
#include "ddit/scheduler.hpp"

namespace ddit {

/// Linear-beta DDPM schedule. alpha_bar(-1) denotes the clean endpoint (1).
struct NoiseSchedule {
  int t_train = 1000;
  std::vector<double> betas, alphas, alpha_bars;

  static NoiseSchedule linear(int t_train = 1000, double beta_start = 1e-4, double beta_end = 0.02) {
    require(t_train >= 2, "t_train must be >= 2");
    NoiseSchedule s;
    s.t_train = t_train;
    double acc = 1.0;
    for (int t = 0; t < t_train; ++t) {
      const double b = beta_start + (beta_end - beta_start) * t / (t_train - 1);
      s.betas.push_back(b);
      s.alphas.push_back(1.0 - b);
      acc *= 1.0 - b;
      s.alpha_bars.push_back(acc);
    }
    return s;
  }

  double alpha_bar(int t) const {
    if (t == -1) return 1.0;
    if (t < 0 || t >= t_train)
      throw ValidationError("timestep " + std::to_string(t) + " outside schedule [0, " +
                            std::to_string(t_train) + ")");
    return alpha_bars[static_cast<std::size_t>(t)];
  }
};

/// Uniform stride from t_train-1 down to 0, both endpoints included.
inline std::vector<int> sampling_timesteps(int steps, int t_train) {
  require(steps >= 1, "steps must be >= 1");
  require(steps <= t_train, "steps cannot exceed t_train");
  std::vector<int> ts;
  if (steps == 1) return {t_train - 1};
  for (int i = 0; i < steps; ++i)
    ts.push_back(static_cast<int>(std::lround(static_cast<double>(t_train - 1) * (steps - 1 - i) / (steps - 1))));
  return ts;
}

/// z_{t_prev} = sqrt(ab_prev) x0 + sqrt(1 - ab_prev) eps, with
/// x0 = (z_t - sqrt(1 - ab_t) eps) / sqrt(ab_t). t_prev = -1 is the clean endpoint.
template <typename Real>
BasicLatent<Real> ddim_step(const BasicLatent<Real>& z_t, const BasicLatent<Real>& eps, int t, int t_prev,
                            const NoiseSchedule& schedule) {
  require_same_shape(z_t, eps, "ddim_step");
  if (t_prev > t)
    throw ValidationError("ddim_step: t_prev " + std::to_string(t_prev) + " must not exceed t " +
                          std::to_string(t));
  if (t_prev == t) return z_t;
  const double ab = schedule.alpha_bar(t), ab_prev = schedule.alpha_bar(t_prev);
  const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
  const double sa_p = std::sqrt(ab_prev), sb_p = std::sqrt(1.0 - ab_prev);
  BasicLatent<Real> out(z_t.height(), z_t.width(), z_t.channels());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double e = eps[i];
    const double x0 = (static_cast<double>(z_t[i]) - sb * e) / sa;
    out[i] = static_cast<Real>(sa_p * x0 + sb_p * e);
  }
  return out;
}

/// Forward process q(z_t | z_0).
template <typename Real>
BasicLatent<Real> add_noise(const BasicLatent<Real>& z0, const BasicLatent<Real>& noise, int t,
                            const NoiseSchedule& schedule) {
  require_same_shape(z0, noise, "add_noise");
  const double ab = schedule.alpha_bar(t);
  const double a = std::sqrt(ab), s = std::sqrt(1.0 - ab);
  BasicLatent<Real> out(z0.height(), z0.width(), z0.channels());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<Real>(a * z0[i] + s * noise[i]);
  return out;
}

template <typename Real>
BasicLatent<Real> gaussian_latent(int h, int w, int c, std::uint64_t seed, std::uint64_t stream) {
  CounterRng rng(seed, stream);
  BasicLatent<Real> z(h, w, c);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = static_cast<Real>(rng.normal());
  return z;
}

inline constexpr std::uint64_t kInitialNoiseStream = 0x5A3B1E;

struct SampleOptions {
  int steps = 50;
  int cond = 0;
  std::uint64_t seed = 0;
  SchedulerConfig scheduler;
  bool keep_trajectory = false;
  // Called after each decision (with cumulative cost filled in).
  std::function<void(const ScheduleDecision&)> on_decision;
};

struct SampleReport {
  Latent final_latent;
  ScheduleTrace trace;
  std::uint64_t token_steps = 0;
  std::uint64_t baseline_token_steps = 0;
  std::uint64_t total_flops = 0;
  std::uint64_t baseline_flops = 0;
  double speedup_estimate = 1.0;
  double wall_ms = 0.0;
  // Latent each step started from, when keep_trajectory is set.
  std::vector<RecordedStep<float>> trajectory;

  std::map<int, int> steps_per_multiplier() const {
    std::map<int, int> out;
    for (const auto& d : trace.decisions) ++out[d.chosen_multiplier];
    return out;
  }
};

inline SampleReport sample(const ModelWeights<float>& w, const SampleOptions& opt,
                           const NoiseSchedule& schedule = NoiseSchedule::linear()) {
  const ModelConfig& cfg = w.config;
  opt.scheduler.validate();
  require(opt.steps >= 1, "steps must be >= 1");
  require(schedule.t_train <= cfg.t_train + 1, "schedule is longer than the model's timestep range");
  for (int m : opt.scheduler.candidates) cfg.require_supported(m);
  if (opt.scheduler.force_multiplier) cfg.require_supported(*opt.scheduler.force_multiplier);

  const auto start = std::chrono::steady_clock::now();
  const std::vector<int> ts = sampling_timesteps(opt.steps, schedule.t_train);
  const std::uint64_t base_flops_step = count_flops(1, cfg).total();

  SampleReport rep;
  rep.trace.config = opt.scheduler;
  rep.trace.base_patch = cfg.base_patch;
  Latent z = gaussian_latent<float>(cfg.height, cfg.width, cfg.channels, opt.seed, kInitialNoiseStream);
  TrajectoryWindow window;

  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const int t_prev = i + 1 < ts.size() ? ts[i + 1] : -1;
    window.push(t, z);
    if (opt.keep_trajectory) rep.trajectory.push_back({t, z});
    ScheduleDecision d = decide(window, opt.scheduler, static_cast<int>(i), cfg.base_patch);
    rep.total_flops += count_flops(d.chosen_multiplier, cfg).total();
    rep.baseline_flops += base_flops_step;
    rep.token_steps += d.token_count;
    rep.baseline_token_steps += static_cast<std::uint64_t>(cfg.tokens(1));
    d.cum_flops = rep.total_flops;
    if (opt.on_decision) opt.on_decision(d);

    const Latent eps = forward(w, z, t, opt.cond, d.chosen_multiplier);
    z = ddim_step(z, eps, t, t_prev, schedule);
    if (!z.all_finite())
      throw NumericError("non-finite latent after step " + std::to_string(i) + " (t=" + std::to_string(t) + ")");
    rep.trace.decisions.push_back(std::move(d));
  }
  rep.final_latent = std::move(z);
  rep.speedup_estimate = static_cast<double>(rep.baseline_flops) / static_cast<double>(rep.total_flops);
  rep.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

struct Comparison {
  SampleReport dynamic;
  SampleReport baseline;
  double rmse = 0.0;
};

inline SampleOptions baseline_options(SampleOptions opt) {
  opt.scheduler.force_multiplier = 1;
  opt.on_decision = nullptr;
  return opt;
}

/// Dynamic run and forced-base run from the same seed.
inline Comparison compare_to_baseline(const ModelWeights<float>& w, const SampleOptions& opt,
                                      const NoiseSchedule& schedule = NoiseSchedule::linear()) {
  Comparison c;
  c.dynamic = sample(w, opt, schedule);
  c.baseline = sample(w, baseline_options(opt), schedule);
  c.rmse = rmse(c.dynamic.final_latent, c.baseline.final_latent);
  return c;
}

}  // namespace ddit
