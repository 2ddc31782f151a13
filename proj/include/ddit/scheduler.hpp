#pragma once

// Training-free patch-size scheduling from the spread of the latent's
// finite-difference "acceleration" field.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ddit/dynamics.hpp"
#include "ddit/error.hpp"

namespace ddit {

struct SchedulerConfig {
  double tau = 0.001;
  double rho = 0.4;
  std::vector<int> candidates{2, 4};
  int order = 3;
  int warmup_steps = 3;
  // Ablation hook: when set, every step uses this multiplier.
  std::optional<int> force_multiplier;

  void validate() const {
    // tau = 0 is accepted and means "never coarsen"; +inf means "always".
    require(tau >= 0.0 && !std::isnan(tau), "tau must be >= 0");
    require(rho >= 0.0 && rho <= 1.0, "rho must lie in [0, 1]");
    require(order >= 1 && order <= 3, "difference order must be 1, 2 or 3");
    require(warmup_steps >= order, "warmup_steps must be >= order");
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      require(candidates[i] >= 2, "candidate multipliers must be >= 2");
      if (i > 0) require(candidates[i] > candidates[i - 1], "candidates must be strictly increasing");
    }
    if (force_multiplier) require(*force_multiplier >= 1, "forced multiplier must be >= 1");
  }
};

enum class DecisionReason { warmup, threshold_pass, default_base, forced };

inline std::string to_string(DecisionReason r) {
  switch (r) {
    case DecisionReason::warmup: return "warmup";
    case DecisionReason::threshold_pass: return "threshold_pass";
    case DecisionReason::default_base: return "default_base";
    case DecisionReason::forced: return "forced";
  }
  return "unknown";
}

inline DecisionReason parse_reason(const std::string& s) {
  if (s == "warmup") return DecisionReason::warmup;
  if (s == "threshold_pass") return DecisionReason::threshold_pass;
  if (s == "default_base") return DecisionReason::default_base;
  if (s == "forced") return DecisionReason::forced;
  throw ValidationError("unknown decision reason '" + s + "'");
}

struct ScheduleDecision {
  int timestep = 0;
  int chosen_multiplier = 1;
  std::map<int, double> candidate_stats;  // multiplier -> rho-percentile of per-patch std
  std::uint64_t token_count = 0;
  DecisionReason reason = DecisionReason::warmup;
  std::uint64_t cum_flops = 0;  // filled by the sampler

  bool operator==(const ScheduleDecision&) const = default;
};

struct ScheduleTrace {
  SchedulerConfig config;
  int base_patch = 0;
  std::vector<ScheduleDecision> decisions;

  std::uint64_t total_tokens() const {
    std::uint64_t s = 0;
    for (const auto& d : decisions) s += d.token_count;
    return s;
  }
};

inline std::uint64_t token_count(int height, int width, int base_patch, int multiplier) {
  const auto e = static_cast<std::uint64_t>(base_patch) * static_cast<std::uint64_t>(multiplier);
  return (static_cast<std::uint64_t>(height) * static_cast<std::uint64_t>(width)) / (e * e);
}

/// Percentile spread of the order-n difference field for each candidate.
template <typename Real>
std::map<int, double> candidate_spreads(const BasicLatent<Real>& diff, const SchedulerConfig& cfg,
                                        int base_patch) {
  std::map<int, double> out;
  for (int m : cfg.candidates) {
    VarianceField f = per_patch_std(diff, base_patch * m);
    f.multiplier = m;
    out[m] = percentile(f.values, cfg.rho);
  }
  return out;
}

/// Patch multiplier for the step about to run, given the latents produced
/// so far (newest last). step_index counts from 0.
template <typename Real>
ScheduleDecision decide(const BasicTrajectoryWindow<Real>& window, const SchedulerConfig& cfg,
                        int step_index, int base_patch) {
  cfg.validate();
  require(!window.empty(), "decide: empty trajectory window");
  require(base_patch >= 1, "base patch must be >= 1");
  const auto& z = window.newest().latent;
  for (int m : cfg.candidates)
    if (z.height() % (base_patch * m) != 0 || z.width() % (base_patch * m) != 0)
      throw ValidationError("latent " + z.shape() + " is not divisible by patch edge " +
                            std::to_string(base_patch * m));

  ScheduleDecision d;
  d.timestep = window.newest().timestep;
  const bool have_history = step_index >= cfg.warmup_steps &&
                            window.size() >= static_cast<std::size_t>(cfg.order) + 1;
  if (have_history) d.candidate_stats = candidate_spreads(nth_difference(window, cfg.order), cfg, base_patch);

  if (cfg.force_multiplier) {
    d.chosen_multiplier = *cfg.force_multiplier;
    d.reason = DecisionReason::forced;
  } else if (!have_history) {
    d.chosen_multiplier = 1;
    d.reason = DecisionReason::warmup;
  } else {
    d.chosen_multiplier = 1;
    d.reason = DecisionReason::default_base;
    for (auto it = cfg.candidates.rbegin(); it != cfg.candidates.rend(); ++it) {
      if (d.candidate_stats.at(*it) < cfg.tau) {
        d.chosen_multiplier = *it;
        d.reason = DecisionReason::threshold_pass;
        break;
      }
    }
  }
  d.token_count = token_count(z.height(), z.width(), base_patch, d.chosen_multiplier);
  return d;
}

template <typename Real>
struct RecordedStep {
  int timestep;
  BasicLatent<Real> latent;
};

struct SweepRow {
  double tau = 0.0;
  std::uint64_t total_tokens = 0;
  std::vector<ScheduleDecision> decisions;
};

/// Replays decide() along a recorded trajectory (the latent each step
/// started from) for every tau, without touching the model.
template <typename Real>
std::vector<SweepRow> sweep(const std::vector<RecordedStep<Real>>& trajectory,
                            const std::vector<double>& taus, const SchedulerConfig& cfg, int base_patch) {
  require(!taus.empty(), "sweep needs at least one tau");
  require(trajectory.size() >= static_cast<std::size_t>(cfg.order) + 1,
          "sweep needs a trajectory of at least order+1 latents");
  std::vector<SweepRow> rows;
  for (double tau : taus) {
    SchedulerConfig c = cfg;
    c.tau = tau;
    c.validate();
    SweepRow row;
    row.tau = tau;
    BasicTrajectoryWindow<Real> window;
    for (std::size_t i = 0; i < trajectory.size(); ++i) {
      window.push(trajectory[i].timestep, trajectory[i].latent);
      row.decisions.push_back(decide(window, c, static_cast<int>(i), base_patch));
      row.total_tokens += row.decisions.back().token_count;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// JSON Lines trace: {"t","m","reason","sigma":{"<m>":v},"tokens","cum_flops"}

inline double round_significant(double v, int digits = 9) {
  if (!std::isfinite(v) || v == 0.0) return v;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return std::strtod(buf, nullptr);
}

inline nlohmann::ordered_json to_json(const ScheduleDecision& d) {
  nlohmann::ordered_json j;
  j["t"] = d.timestep;
  j["m"] = d.chosen_multiplier;
  j["reason"] = to_string(d.reason);
  nlohmann::ordered_json sigma = nlohmann::ordered_json::object();
  for (const auto& [m, v] : d.candidate_stats) sigma[std::to_string(m)] = round_significant(v);
  j["sigma"] = std::move(sigma);
  j["tokens"] = d.token_count;
  j["cum_flops"] = d.cum_flops;
  return j;
}

inline std::string to_jsonl_line(const ScheduleDecision& d) { return to_json(d).dump(); }

inline std::string to_jsonl(const std::vector<ScheduleDecision>& decisions) {
  std::string out;
  for (const auto& d : decisions) out += to_jsonl_line(d) + "\n";
  return out;
}

inline ScheduleDecision decision_from_json(const nlohmann::json& j) {
  ScheduleDecision d;
  d.timestep = j.at("t").get<int>();
  d.chosen_multiplier = j.at("m").get<int>();
  d.reason = parse_reason(j.at("reason").get<std::string>());
  for (const auto& [k, v] : j.at("sigma").items()) d.candidate_stats[std::stoi(k)] = v.get<double>();
  d.token_count = j.at("tokens").get<std::uint64_t>();
  d.cum_flops = j.at("cum_flops").get<std::uint64_t>();
  return d;
}

/// Parses a trace; errors name the 1-based offending line.
inline std::vector<ScheduleDecision> parse_jsonl(const std::string& text) {
  std::vector<ScheduleDecision> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(decision_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw FormatError("trace line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace ddit
