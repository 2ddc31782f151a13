#pragma once

// Distillation of the adapted (m > 1) path against the frozen base path:
// both see the same noised latent z_t, the teacher tokenizes it at p, the
// student at p*m, and the student's trainable parameters follow the
// gradient of the mean squared difference of their noise predictions.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "ddit/dataset.hpp"
#include "ddit/error.hpp"
#include "ddit/model.hpp"
#include "ddit/rng.hpp"
#include "ddit/sampler.hpp"

namespace ddit {

/// Mean over all elements of the squared difference.
template <typename Real>
double distill_loss(const BasicLatent<Real>& student, const BasicLatent<Real>& teacher) {
  require_same_shape(student, teacher, "distill_loss");
  double acc = 0.0;
  for (std::size_t i = 0; i < student.size(); ++i) {
    const double d = static_cast<double>(student[i]) - static_cast<double>(teacher[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(student.size());
}

enum class LrSchedule { constant, cosine };

// cycle: one multiplier per step, in turn. joint: every multiplier on every
// step, sharing the teacher pass.
enum class MultiplierMode { cycle, joint };

struct TrainConfig {
  int steps = 2000;
  int batch_size = 3;
  double learning_rate = 2e-3;  // peak rate
  LrSchedule schedule = LrSchedule::cosine;
  double final_lr_fraction = 0.0;  // cosine only: rate at the last step relative to peak
  // The zero-initialized gates have to travel to ~1; at the shared rate they
  // get nowhere near in 2000 steps.
  double gate_lr_scale = 10.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<int> multipliers{2, 4};
  MultiplierMode multiplier_mode = MultiplierMode::joint;
  std::uint64_t seed = 0;
  int heldout_size = 16;
  double max_loss = 1e6;  // abort threshold

  double learning_rate_at(int step) const {
    if (schedule == LrSchedule::constant || steps <= 1) return learning_rate;
    const double progress = static_cast<double>(step) / static_cast<double>(steps - 1);
    const double c = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    return learning_rate * (final_lr_fraction + (1.0 - final_lr_fraction) * c);
  }
};

/// Adam over the trainable views of a model; moments are kept per view.
template <typename Real>
class Adam {
 public:
  Adam(const TrainConfig& cfg, ModelWeights<Real>& w) : cfg_(cfg) {
    for (const auto& v : parameters(w))
      if (v.trainable) {
        m_.emplace_back(v.size, 0.0);
        v_.emplace_back(v.size, 0.0);
        scale_.push_back(v.name.starts_with("gate.") ? cfg.gate_lr_scale : 1.0);
      }
  }

  void step(ModelWeights<Real>& w, ModelWeights<Real>& grads) { step(w, grads, cfg_.learning_rate); }

  void step(ModelWeights<Real>& w, ModelWeights<Real>& grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, t_), c2 = 1.0 - std::pow(cfg_.beta2, t_);
    auto pv = parameters(w);
    auto gv = parameters(grads);
    std::size_t k = 0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
      if (!pv[i].trainable) continue;
      auto& m = m_[k];
      auto& v = v_[k];
      const double rate = lr * scale_[k];
      ++k;
      for (std::size_t j = 0; j < pv[i].size; ++j) {
        const double g = gv[i].data[j];
        m[j] = cfg_.beta1 * m[j] + (1 - cfg_.beta1) * g;
        v[j] = cfg_.beta2 * v[j] + (1 - cfg_.beta2) * g * g;
        pv[i].data[j] -= static_cast<Real>(rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps));
      }
    }
  }

  int steps_taken() const { return t_; }

 private:
  TrainConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::vector<double> scale_;
  int t_ = 0;
};

/// One noised training example.
template <typename Real>
struct DistillExample {
  BasicLatent<Real> z_t;
  int t = 0;
  int label = 0;
};

template <typename Real>
DistillExample<Real> make_example(const Sample& s, const NoiseSchedule& sched, CounterRng& rng) {
  DistillExample<Real> ex;
  ex.t = static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.t_train)));
  ex.label = s.label;
  const auto z0 = s.latent.template cast<Real>();
  BasicLatent<Real> noise(z0.height(), z0.width(), z0.channels());
  for (std::size_t i = 0; i < noise.size(); ++i) noise[i] = static_cast<Real>(rng.normal());
  ex.z_t = add_noise(z0, noise, ex.t, sched);
  return ex;
}

/// Loss of the student at m against a precomputed teacher output and, when
/// grads is given, its gradient scaled by `weight` accumulated into grads.
template <typename Real>
double student_loss(const ModelWeights<Real>& w, const DistillExample<Real>& ex, const BasicLatent<Real>& teacher,
                    int m, ModelWeights<Real>* grads = nullptr, double weight = 1.0) {
  ForwardCache<Real> cache;
  const BasicLatent<Real> student = forward(w, ex.z_t, ex.t, ex.label, m, grads ? &cache : nullptr);
  const double loss = distill_loss(student, teacher);
  if (grads) {
    BasicLatent<Real> d_out(student.height(), student.width(), student.channels());
    const double k = 2.0 * weight / static_cast<double>(student.size());
    for (std::size_t i = 0; i < d_out.size(); ++i)
      d_out[i] = static_cast<Real>(k * (static_cast<double>(student[i]) - static_cast<double>(teacher[i])));
    backward(w, cache, d_out, *grads);
  }
  return loss;
}

template <typename Real>
double example_loss(const ModelWeights<Real>& w, const DistillExample<Real>& ex, int m,
                    ModelWeights<Real>* grads = nullptr, double weight = 1.0) {
  return student_loss(w, ex, forward(w, ex.z_t, ex.t, ex.label, 1), m, grads, weight);
}

/// One optimizer step on a batch; the loss is averaged over the examples and
/// over `ms`, and the teacher runs once per example. Returns that mean.
template <typename Real>
double train_step(ModelWeights<Real>& w, const std::vector<DistillExample<Real>>& batch,
                  const std::vector<int>& ms, Adam<Real>& opt, const TrainConfig& cfg, double lr) {
  require(!ms.empty(), "train_step: no multipliers");
  for (int m : ms) {
    require(m > 1, "train_step trains the adapted path; multiplier must be > 1");
    w.config.require_supported(m);
  }
  require(!batch.empty(), "train_step: empty batch");
  ModelWeights<Real> grads = zeros_like(w);
  double loss = 0.0;
  const double weight = 1.0 / static_cast<double>(batch.size() * ms.size());
  for (const auto& ex : batch) {
    const BasicLatent<Real> teacher = forward(w, ex.z_t, ex.t, ex.label, 1);
    for (int m : ms) loss += weight * student_loss(w, ex, teacher, m, &grads, weight);
  }
  if (!std::isfinite(loss) || loss > cfg.max_loss) {
    std::string which;
    for (int m : ms) which += (which.empty() ? "" : ",") + std::to_string(m);
    throw NumericError("distillation loss diverged at step " + std::to_string(opt.steps_taken()) +
                       " (loss=" + std::to_string(loss) + ", m=" + which + ")");
  }
  opt.step(w, grads, lr);
  return loss;
}

template <typename Real>
double train_step(ModelWeights<Real>& w, const std::vector<DistillExample<Real>>& batch, int m,
                  Adam<Real>& opt, const TrainConfig& cfg, double lr) {
  return train_step(w, batch, std::vector<int>{m}, opt, cfg, lr);
}

/// Fixed evaluation set drawn from held-out samples.
template <typename Real>
std::vector<DistillExample<Real>> make_heldout(const SyntheticDataset& ds, int count, std::uint64_t seed,
                                               const NoiseSchedule& sched) {
  require(!ds.samples.empty(), "held-out set needs samples");
  CounterRng rng(seed, 0x4E1D0u);
  std::vector<DistillExample<Real>> out;
  for (int i = 0; i < count; ++i)
    out.push_back(make_example<Real>(ds.samples[static_cast<std::size_t>(i) % ds.samples.size()], sched, rng));
  return out;
}

/// Mean loss over the held-out examples and every trained multiplier.
template <typename Real>
double heldout_loss(const ModelWeights<Real>& w, const std::vector<DistillExample<Real>>& heldout,
                    const std::vector<int>& multipliers) {
  double acc = 0.0;
  for (int m : multipliers)
    for (const auto& ex : heldout) acc += example_loss(w, ex, m);
  return acc / static_cast<double>(heldout.size() * multipliers.size());
}

struct TrainLogRow {
  int step = 0;
  double loss = 0.0;
  double learning_rate = 0.0;
  double wall_ms = 0.0;
};

struct TrainResult {
  double init_heldout = 0.0;
  double final_heldout = 0.0;
  std::vector<TrainLogRow> log;
};

template <typename Real>
TrainResult train(ModelWeights<Real>& w, const SyntheticDataset& train_set, const SyntheticDataset& heldout_set,
                  const TrainConfig& cfg, const std::function<void(const TrainLogRow&)>& on_step = {},
                  const NoiseSchedule& sched = NoiseSchedule::linear()) {
  require(cfg.steps >= 0 && cfg.batch_size >= 1, "train: steps >= 0 and batch_size >= 1 required");
  require(cfg.gate_lr_scale > 0, "train: gate_lr_scale must be positive");
  require(cfg.learning_rate > 0 && cfg.final_lr_fraction >= 0 && cfg.final_lr_fraction <= 1,
          "train: learning rate must be positive and final_lr_fraction in [0, 1]");
  require(!cfg.multipliers.empty(), "train: no multipliers to train");
  require(!train_set.samples.empty(), "train: empty dataset");
  for (int m : cfg.multipliers) {
    require(m > 1, "train: only multipliers > 1 are trainable");
    w.config.require_supported(m);
  }
  const auto heldout = make_heldout<Real>(heldout_set, cfg.heldout_size, cfg.seed, sched);
  TrainResult res;
  res.init_heldout = heldout_loss(w, heldout, cfg.multipliers);

  Adam<Real> opt(cfg, w);
  CounterRng rng(cfg.seed, 0x7EA1Bu);
  const auto start = std::chrono::steady_clock::now();
  for (int step = 0; step < cfg.steps; ++step) {
    const std::vector<int> ms =
        cfg.multiplier_mode == MultiplierMode::joint
            ? cfg.multipliers
            : std::vector<int>{cfg.multipliers[static_cast<std::size_t>(step) % cfg.multipliers.size()]};
    std::vector<DistillExample<Real>> batch;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const auto& s = train_set.samples[rng.below(train_set.samples.size())];
      batch.push_back(make_example<Real>(s, sched, rng));
    }
    TrainLogRow row;
    row.step = step;
    row.learning_rate = cfg.learning_rate_at(step);
    row.loss = train_step(w, batch, ms, opt, cfg, row.learning_rate);
    row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    res.log.push_back(row);
    if (on_step) on_step(row);
  }
  res.final_heldout = heldout_loss(w, heldout, cfg.multipliers);
  return res;
}

}  // namespace ddit
