// ddit: train, sample, sweep, bench and analyze the dynamic-patch toy DiT.

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <set>
#include <nlohmann/json.hpp>
#include <sstream>
#include <thread>

#include "ddit/base_init.hpp"
#include "ddit/dataset.hpp"
#include "ddit/distill.hpp"
#include "ddit/sampler.hpp"
#include "ddit/scheduler.hpp"
#include "ddit/weights_io.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace ddit;

namespace {

constexpr const char* kToolVersion = "ddit 0.1.0";
constexpr std::uint64_t kBaseSeed = 1;  // identity of the procedural base model

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t tt = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

unsigned worker_count() {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("DDIT_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw UsageError(std::string("DDIT_THREADS must be a positive integer, got '") + env + "'");
    n = std::min<unsigned>(n, static_cast<unsigned>(v));
  }
  return n;
}

// Runs fn(i) for i in [0, n) on up to worker_count() threads.
template <typename Fn>
void parallel_for(std::size_t n, Fn fn) {
  const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(worker_count(), n));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

void ensure_parent(const std::string& path) {
  const fs::path p = fs::path(path).parent_path();
  if (!p.empty()) fs::create_directories(p);
}

void write_text(const std::string& path, const std::string& text) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::runtime, "cannot write '" + path + "'");
  out << text;
  if (!out) throw Error(ErrorKind::runtime, "failed writing '" + path + "'");
}

std::string read_text(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  return {bytes.begin(), bytes.end()};
}

// One manifest per artifact directory, named manifest.json.
void write_manifest(const std::string& command, const ordered_json& config, std::uint64_t seed,
                    const std::vector<std::string>& outputs, const std::string& started) {
  if (outputs.empty()) return;
  ordered_json m;
  m["command"] = command;
  m["config"] = config;
  m["seed"] = seed;
  m["tool_version"] = kToolVersion;
  m["outputs"] = outputs;
  m["started_at"] = started;
  m["finished_at"] = utc_now();
  const fs::path dir = fs::path(outputs.front()).parent_path();
  write_text((dir / "manifest.json").string(), m.dump(2) + "\n");
}

/// Binary PGM of channel 0, min-max scaled to 0..255.
std::string render_pgm(const Latent& z) {
  float lo = z.at(0, 0, 0), hi = lo;
  for (int y = 0; y < z.height(); ++y)
    for (int x = 0; x < z.width(); ++x) {
      lo = std::min(lo, z.at(y, x, 0));
      hi = std::max(hi, z.at(y, x, 0));
    }
  std::ostringstream os;
  os << "P5\n" << z.width() << " " << z.height() << "\n255\n";
  const double span = hi > lo ? static_cast<double>(hi) - lo : 1.0;
  for (int y = 0; y < z.height(); ++y)
    for (int x = 0; x < z.width(); ++x) {
      const double v = (static_cast<double>(z.at(y, x, 0)) - lo) / span;
      os.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
    }
  return os.str();
}

int parse_cond(const std::string& s) { return label_of(parse_kind(s)); }

ordered_json scheduler_json(const SchedulerConfig& c) {
  ordered_json j;
  j["tau"] = c.tau;
  j["rho"] = c.rho;
  j["order"] = c.order;
  j["candidates"] = c.candidates;
  j["warmup_steps"] = c.warmup_steps;
  if (c.force_multiplier) j["force_multiplier"] = *c.force_multiplier;
  return j;
}

ordered_json report_json(const SampleReport& r) {
  ordered_json j;
  j["steps"] = r.trace.decisions.size();
  j["token_steps"] = r.token_steps;
  j["baseline_token_steps"] = r.baseline_token_steps;
  j["total_flops"] = r.total_flops;
  j["baseline_flops"] = r.baseline_flops;
  j["speedup_estimate"] = r.speedup_estimate;
  ordered_json per = ordered_json::object();
  for (const auto& [m, n] : r.steps_per_multiplier()) per[std::to_string(m)] = n;
  j["steps_per_multiplier"] = per;
  j["wall_ms"] = r.wall_ms;
  return j;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string data = "mixed";
  int steps = 2000;
  std::vector<int> multipliers{2, 4};
  std::uint64_t seed = 0;
  std::uint64_t base_seed = kBaseSeed;
  double lr = TrainConfig{}.learning_rate;
  std::string lr_schedule = TrainConfig{}.schedule == LrSchedule::cosine ? "cosine" : "constant";
  double final_lr_fraction = TrainConfig{}.final_lr_fraction;
  double gate_lr_scale = TrainConfig{}.gate_lr_scale;
  std::string multiplier_mode = TrainConfig{}.multiplier_mode == MultiplierMode::joint ? "joint" : "cycle";
  int batch = TrainConfig{}.batch_size;
  int samples = 16;
  std::string out, log;
};

int cmd_train(const TrainArgs& a) {
  const std::string started = utc_now();
  const ModelConfig cfg;
  for (int m : a.multipliers) {
    cfg.require_supported(m);
    require(m > 1, "--multiplier must name an enlarged patch size (2 or 4)");
  }
  require(a.samples >= 1, "--samples must be >= 1");
  const LatentShape shape{cfg.height, cfg.width, cfg.channels};
  SyntheticDataset train_set, held;
  if (a.data == "mixed") {
    train_set = generate_mixed_dataset(a.samples, a.seed, shape);
    held = generate_mixed_dataset(std::max(1, a.samples / 4), a.seed + 1000, shape);
  } else {
    const DataKind k = parse_kind(a.data);
    train_set = generate_dataset(k, a.samples * 4, a.seed, shape);
    held = generate_dataset(k, a.samples, a.seed + 1000, shape);
  }

  ModelWeights<float> w = make_base_weights<float>(cfg, a.base_seed);
  init_adapters(w, a.seed);
  TrainConfig tc;
  tc.steps = a.steps;
  tc.multipliers = a.multipliers;
  tc.seed = a.seed;
  tc.learning_rate = a.lr;
  tc.batch_size = a.batch;
  tc.schedule = a.lr_schedule == "cosine" ? LrSchedule::cosine : LrSchedule::constant;
  tc.final_lr_fraction = a.final_lr_fraction;
  tc.gate_lr_scale = a.gate_lr_scale;
  tc.multiplier_mode = a.multiplier_mode == "joint" ? MultiplierMode::joint : MultiplierMode::cycle;
  require(a.lr > 0, "--lr must be positive");

  const std::string log_path = a.log.empty() ? fs::path(a.out).replace_extension(".csv").string() : a.log;
  ensure_parent(log_path);
  std::ofstream log(log_path);
  if (!log) throw Error(ErrorKind::runtime, "cannot write '" + log_path + "'");
  log << "step,loss,learning_rate,wall_ms\n";
  const auto res = train(w, train_set, held, tc, [&](const TrainLogRow& r) {
    log << r.step << "," << std::setprecision(9) << r.loss << "," << r.learning_rate << ","
        << std::setprecision(6) << r.wall_ms << "\n";
    if ((r.step + 1) % 100 == 0 || r.step + 1 == tc.steps)
      std::cerr << "step " << r.step + 1 << "/" << tc.steps << " loss " << r.loss << "\n";
  });
  log.close();
  ensure_parent(a.out);
  save_weights(a.out, w);
  std::cout << "held-out loss " << res.init_heldout << " -> " << res.final_heldout << "\n";

  ordered_json c;
  c["data"] = a.data;
  c["steps"] = a.steps;
  c["multipliers"] = a.multipliers;
  c["learning_rate"] = a.lr;
  c["lr_schedule"] = a.lr_schedule;
  c["final_lr_fraction"] = a.final_lr_fraction;
  c["gate_lr_scale"] = a.gate_lr_scale;
  c["multiplier_mode"] = a.multiplier_mode;
  c["batch_size"] = a.batch;
  c["samples_per_kind"] = a.samples;
  c["base_seed"] = a.base_seed;
  c["init_heldout"] = res.init_heldout;
  c["final_heldout"] = res.final_heldout;
  write_manifest("train", c, a.seed, {a.out, log_path}, started);
  return 0;
}

struct SampleArgs {
  std::string weights, cond = "smooth-blobs";
  int steps = 50;
  SchedulerConfig sched;
  int force = 0;
  std::uint64_t seed = 0;
  bool baseline = false;
  std::string out, trace, report;
};

int cmd_sample(const SampleArgs& a) {
  const std::string started = utc_now();
  const auto w = load_weights(a.weights);
  SampleOptions o;
  o.steps = a.steps;
  o.cond = parse_cond(a.cond);
  o.seed = a.seed;
  o.scheduler = a.sched;
  if (a.force) o.scheduler.force_multiplier = a.force;

  std::ofstream trace;
  if (!a.trace.empty()) {
    ensure_parent(a.trace);
    trace.open(a.trace, std::ios::binary);
    if (!trace) throw Error(ErrorKind::runtime, "cannot write '" + a.trace + "'");
    o.on_decision = [&](const ScheduleDecision& d) { trace << to_jsonl_line(d) << "\n" << std::flush; };
  }
  const SampleReport r = sample(w, o);
  trace.close();

  ordered_json rep = report_json(r);
  if (a.baseline) {
    const SampleReport b = sample(w, baseline_options(o));
    rep["rmse_vs_baseline"] = rmse(r.final_latent, b.final_latent);
  }
  std::vector<std::string> outputs;
  if (!a.out.empty()) {
    write_text(a.out, render_pgm(r.final_latent));
    outputs.push_back(a.out);
  }
  if (!a.trace.empty()) outputs.push_back(a.trace);
  if (!a.report.empty()) {
    write_text(a.report, rep.dump(2) + "\n");
    outputs.push_back(a.report);
  }
  std::cout << rep.dump() << "\n";

  ordered_json c;
  c["weights"] = a.weights;
  c["cond"] = a.cond;
  c["steps"] = a.steps;
  c["scheduler"] = scheduler_json(o.scheduler);
  write_manifest("sample", c, a.seed, outputs, started);
  return 0;
}

struct SweepArgs {
  std::string weights, cond = "smooth-blobs", out;
  std::vector<double> taus{0.0005, 0.001, 0.01};
  std::vector<int> orders{3};
  std::vector<std::uint64_t> seeds{0};
  int steps = 50;
  double rho = 0.4;
};

int cmd_sweep(const SweepArgs& a) {
  const std::string started = utc_now();
  const auto w = load_weights(a.weights);
  for (double t : a.taus) require(t >= 0, "taus must be >= 0");
  const int cond = parse_cond(a.cond);

  // Baselines once per seed, then one cell per (tau, order, seed).
  std::vector<SampleReport> base(a.seeds.size());
  parallel_for(a.seeds.size(), [&](std::size_t i) {
    SampleOptions o;
    o.steps = a.steps;
    o.cond = cond;
    o.seed = a.seeds[i];
    base[i] = sample(w, baseline_options(o));
  });

  struct Cell {
    double tau;
    int order;
    std::size_t seed_idx;
    SampleReport rep;
  };
  std::vector<Cell> cells;
  for (double tau : a.taus)
    for (int order : a.orders)
      for (std::size_t s = 0; s < a.seeds.size(); ++s) cells.push_back({tau, order, s, {}});
  parallel_for(cells.size(), [&](std::size_t i) {
    SampleOptions o;
    o.steps = a.steps;
    o.cond = cond;
    o.seed = a.seeds[cells[i].seed_idx];
    o.scheduler.tau = cells[i].tau;
    o.scheduler.order = cells[i].order;
    o.scheduler.rho = a.rho;
    cells[i].rep = sample(w, o);
  });

  std::ostringstream csv;
  csv << "tau,order,token_steps,flop_ratio,rmse\n";
  for (std::size_t i = 0; i < cells.size(); i += a.seeds.size()) {
    std::uint64_t tokens = 0, flops = 0, base_flops = 0;
    double err = 0;
    for (std::size_t s = 0; s < a.seeds.size(); ++s) {
      const auto& c = cells[i + s];
      tokens += c.rep.token_steps;
      flops += c.rep.total_flops;
      base_flops += c.rep.baseline_flops;
      err += rmse(c.rep.final_latent, base[s].final_latent);
    }
    csv << std::setprecision(9) << cells[i].tau << "," << cells[i].order << "," << tokens << ","
        << static_cast<double>(base_flops) / static_cast<double>(flops) << ","
        << err / static_cast<double>(a.seeds.size()) << "\n";
  }
  if (a.out.empty()) {
    std::cout << csv.str();
  } else {
    write_text(a.out, csv.str());
    ordered_json c;
    c["weights"] = a.weights;
    c["cond"] = a.cond;
    c["taus"] = a.taus;
    c["orders"] = a.orders;
    c["seeds"] = a.seeds;
    c["steps"] = a.steps;
    c["rho"] = a.rho;
    write_manifest("sweep", c, a.seeds.front(), {a.out}, started);
  }
  return 0;
}

struct BenchArgs {
  std::string weights, out;
  int repetitions = 5;
  int warmup = 1;
  std::uint64_t seed = 0;
};

int cmd_bench(const BenchArgs& a) {
  const std::string started = utc_now();
  if (a.repetitions < 1) throw UsageError("--repetitions must be >= 1");
  if (a.warmup < 0) throw UsageError("--warmup must be >= 0");
  const auto w = a.weights.empty() ? make_model<float>(ModelConfig{}, kBaseSeed) : load_weights(a.weights);
  const auto& cfg = w.config;
  const Latent z = gaussian_latent<float>(cfg.height, cfg.width, cfg.channels, a.seed, kInitialNoiseStream);

  ordered_json j;
  j["repetitions"] = a.repetitions;
  j["warmup"] = a.warmup;
  std::map<int, double> median;
  ordered_json per = ordered_json::object();
  for (int m : cfg.multipliers) {
    for (int i = 0; i < a.warmup; ++i) forward(w, z, 500, 0, m);
    std::vector<double> ms;
    for (int i = 0; i < a.repetitions; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      forward(w, z, 500, 0, m);
      ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    std::sort(ms.begin(), ms.end());
    median[m] = ms.size() % 2 ? ms[ms.size() / 2] : 0.5 * (ms[ms.size() / 2 - 1] + ms[ms.size() / 2]);
    const auto f = count_flops(m, cfg);
    ordered_json e;
    e["tokens"] = f.tokens;
    e["median_ms"] = median[m];
    e["flops"] = f.total();
    e["attention_score_flops"] = f.attention_scores;
    per[std::to_string(m)] = e;
  }
  const auto f1 = count_flops(1, cfg);
  for (int m : cfg.multipliers) {
    if (m == 1) continue;
    const auto fm = count_flops(m, cfg);
    auto& e = per[std::to_string(m)];
    e["time_ratio_vs_m1"] = median[1] / median[m];
    e["flop_ratio_vs_m1"] = static_cast<double>(f1.total()) / static_cast<double>(fm.total());
    e["attention_score_ratio_vs_m1"] = static_cast<double>(f1.attention_scores) / static_cast<double>(fm.attention_scores);
  }
  j["multipliers"] = per;
  const std::string text = j.dump(2) + "\n";
  std::cout << text;
  if (!a.out.empty()) {
    write_text(a.out, text);
    ordered_json c;
    c["weights"] = a.weights.empty() ? "procedural" : a.weights;
    c["repetitions"] = a.repetitions;
    c["warmup"] = a.warmup;
    write_manifest("bench", c, a.seed, {a.out}, started);
  }
  return 0;
}

struct AnalyzeArgs {
  std::vector<std::string> traces;
  std::string profile, summary;
};

int cmd_analyze(const AnalyzeArgs& a) {
  const std::string started = utc_now();
  std::ostringstream csv;
  std::set<int> cand;
  std::vector<std::vector<ScheduleDecision>> all;
  for (const auto& path : a.traces) {
    try {
      all.push_back(parse_jsonl(read_text(path)));
    } catch (const FormatError& e) {
      throw FormatError(path + ": " + e.what());
    }
    for (const auto& d : all.back())
      for (const auto& [m, v] : d.candidate_stats) cand.insert(m);
  }
  csv << "trace,t,m,reason,tokens";
  for (int m : cand) csv << ",sigma_m" << m;
  csv << "\n";

  ordered_json summary = ordered_json::array();
  for (std::size_t i = 0; i < all.size(); ++i) {
    std::map<int, int> count;
    std::uint64_t tokens = 0;
    for (const auto& d : all[i]) {
      ++count[d.chosen_multiplier];
      tokens += d.token_count;
      csv << a.traces[i] << "," << d.timestep << "," << d.chosen_multiplier << "," << to_string(d.reason) << ","
          << d.token_count;
      for (int m : cand) {
        csv << ",";
        if (auto it = d.candidate_stats.find(m); it != d.candidate_stats.end()) csv << std::setprecision(9) << it->second;
      }
      csv << "\n";
    }
    ordered_json s;
    s["trace"] = a.traces[i];
    s["steps"] = all[i].size();
    s["token_steps"] = tokens;
    s["final_cum_flops"] = all[i].empty() ? 0 : all[i].back().cum_flops;
    ordered_json frac = ordered_json::object();
    for (const auto& [m, n] : count)
      frac[std::to_string(m)] = static_cast<double>(n) / static_cast<double>(all[i].size());
    s["fraction_per_multiplier"] = frac;
    s["fine_fraction"] = all[i].empty() ? 0.0 : static_cast<double>(count[1]) / static_cast<double>(all[i].size());
    summary.push_back(s);
  }
  std::vector<std::string> outputs;
  if (!a.profile.empty()) {
    write_text(a.profile, csv.str());
    outputs.push_back(a.profile);
  }
  const std::string text = summary.dump(2) + "\n";
  if (!a.summary.empty()) {
    write_text(a.summary, text);
    outputs.push_back(a.summary);
  }
  std::cout << text;
  ordered_json c;
  c["traces"] = a.traces;
  write_manifest("analyze", c, 0, outputs, started);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic patch scheduling for a toy diffusion transformer"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "distill the enlarged-patch adapters against the frozen base");
  train_cmd->add_option("--data", ta.data, "mixed, smooth-blobs, low-freq-gradient, checkerboard-texture or noise-texture");
  train_cmd->add_option("--steps", ta.steps, "optimizer steps")->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--multiplier", ta.multipliers, "multiplier(s) to train");
  train_cmd->add_option("--multiplier-mode", ta.multiplier_mode,
                        "joint: every multiplier each step; cycle: one per step in turn")
      ->check(CLI::IsMember({"joint", "cycle"}));
  train_cmd->add_option("--seed", ta.seed, "data, adapter init and noise seed");
  train_cmd->add_option("--base-seed", ta.base_seed, "seed of the procedural base model");
  train_cmd->add_option("--lr", ta.lr, "Adam learning rate (peak value under --lr-schedule cosine)");
  train_cmd->add_option("--lr-schedule", ta.lr_schedule, "constant or cosine")
      ->check(CLI::IsMember({"constant", "cosine"}));
  train_cmd->add_option("--final-lr-fraction", ta.final_lr_fraction, "cosine floor as a fraction of --lr")
      ->check(CLI::Range(0.0, 1.0));
  train_cmd->add_option("--gate-lr-scale", ta.gate_lr_scale, "learning-rate multiplier for the residual gates")
      ->check(CLI::PositiveNumber);
  train_cmd->add_option("--batch", ta.batch, "examples per step")->check(CLI::PositiveNumber);
  train_cmd->add_option("--samples", ta.samples, "training samples per data kind");
  train_cmd->add_option("--out", ta.out, "checkpoint path")->required();
  train_cmd->add_option("--log", ta.log, "CSV log path (default: checkpoint path with .csv)");

  SampleArgs sa;
  auto* sample_cmd = app.add_subcommand("sample", "generate a latent with the dynamic scheduler");
  sample_cmd->add_option("--weights", sa.weights, "checkpoint")->required();
  sample_cmd->add_option("--cond", sa.cond, "condition: smooth, gradient, textured/checkerboard, noise or 0-3");
  sample_cmd->add_option("--steps", sa.steps, "denoising steps");
  sample_cmd->add_option("--tau", sa.sched.tau, "variance threshold");
  sample_cmd->add_option("--rho", sa.sched.rho, "percentile over patches");
  sample_cmd->add_option("--order", sa.sched.order, "finite-difference order (1-3)");
  sample_cmd->add_option("--force-multiplier", sa.force, "bypass the scheduler with a fixed multiplier");
  sample_cmd->add_option("--seed", sa.seed, "initial noise seed");
  sample_cmd->add_flag("--baseline", sa.baseline, "also run the base-patch baseline and report RMSE");
  sample_cmd->add_option("--out", sa.out, "PGM image of latent channel 0");
  sample_cmd->add_option("--trace", sa.trace, "JSON Lines schedule trace");
  sample_cmd->add_option("--report", sa.report, "JSON report");

  SweepArgs wa;
  auto* sweep_cmd = app.add_subcommand("sweep", "threshold / order sweep against the baseline");
  sweep_cmd->add_option("--weights", wa.weights, "checkpoint")->required();
  sweep_cmd->add_option("--cond", wa.cond, "condition");
  sweep_cmd->add_option("--taus", wa.taus, "thresholds")->delimiter(',');
  sweep_cmd->add_option("--orders", wa.orders, "difference orders")->delimiter(',');
  sweep_cmd->add_option("--seeds", wa.seeds, "noise seeds averaged per cell")->delimiter(',');
  sweep_cmd->add_option("--steps", wa.steps, "denoising steps");
  sweep_cmd->add_option("--rho", wa.rho, "percentile over patches");
  sweep_cmd->add_option("--out", wa.out, "CSV path (default: stdout)");

  BenchArgs ba;
  auto* bench_cmd = app.add_subcommand("bench", "time forward passes per multiplier");
  bench_cmd->add_option("--weights", ba.weights, "checkpoint (default: procedural base model)");
  bench_cmd->add_option("--repetitions", ba.repetitions, "timed runs per multiplier");
  bench_cmd->add_option("--warmup", ba.warmup, "untimed runs per multiplier");
  bench_cmd->add_option("--seed", ba.seed, "input latent seed");
  bench_cmd->add_option("--out", ba.out, "JSON path");

  AnalyzeArgs aa;
  auto* analyze_cmd = app.add_subcommand("analyze", "per-timestep profile and schedule summary of traces");
  analyze_cmd->add_option("traces", aa.traces, "trace.jsonl files")->required();
  analyze_cmd->add_option("--profile", aa.profile, "per-timestep CSV");
  analyze_cmd->add_option("--summary", aa.summary, "summary JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ErrorKind::usage);
  }

  try {
    worker_count();  // validate DDIT_THREADS early
    if (*train_cmd) return cmd_train(ta);
    if (*sample_cmd) return cmd_sample(sa);
    if (*sweep_cmd) return cmd_sweep(wa);
    if (*bench_cmd) return cmd_bench(ba);
    if (*analyze_cmd) return cmd_analyze(aa);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(ErrorKind::runtime);
  }
  return 0;
}
