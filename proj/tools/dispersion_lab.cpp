/* Copyright 2026 The Dispersion Lab Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
// dispersion-lab: experiment runner over the dlab library. Every subcommand
// writes its outputs and a manifest.json under --out.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 a scientific check
// failed.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dlab/analysis.hpp"
#include "dlab/errors.hpp"
#include "dlab/model.hpp"
#include "dlab/serialize.hpp"
#include "dlab/ssm.hpp"
#include "dlab/traced.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";
constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kCheckFailed = 2;

// Thrown for a failed scientific check after outputs are written.
struct CheckFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// "64..4096" doubles from 64 up to 4096; otherwise a comma-separated list.
std::vector<std::size_t> parse_sizes(const std::string& text) {
  std::vector<std::size_t> out;
  try {
    const auto dots = text.find("..");
    if (dots != std::string::npos) {
      const std::size_t lo = std::stoul(text.substr(0, dots));
      const std::size_t hi = std::stoul(text.substr(dots + 2));
      if (lo == 0 || hi < lo) throw dlab::ConfigError("bad range '" + text + "'");
      for (std::size_t n = lo; n <= hi; n *= 2) out.push_back(n);
      return out;
    }
    std::stringstream ss(text);
    for (std::string item; std::getline(ss, item, ',');) out.push_back(std::stoul(item));
  } catch (const std::logic_error&) {
    throw dlab::ConfigError("cannot parse size list '" + text + "'");
  }
  if (out.empty()) throw dlab::ConfigError("empty size list");
  return out;
}

std::vector<std::string> split_names(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

class Run {
 public:
  Run(std::string subcommand, const std::string& out_dir, std::uint64_t seed)
      : subcommand_(std::move(subcommand)), dir_(out_dir), seed_(seed) {
    fs::create_directories(dir_);
  }

  json& config() { return config_; }

  fs::path write(const std::string& name, const std::string& text) {
    const fs::path path = dir_ / name;
    dlab::write_text_file(path, text);
    outputs_.push_back(name);
    return path;
  }

  void note_output(const std::string& name) { outputs_.push_back(name); }
  const fs::path& dir() const { return dir_; }

  void finish() {
    const json manifest{{"subcommand", subcommand_}, {"config", config_},   {"seed", seed_},
                        {"version", kVersion},       {"timestamp", utc_timestamp()}, {"outputs", outputs_}};
    dlab::write_text_file(dir_ / "manifest.json", manifest.dump(2) + "\n");
  }

 private:
  std::string subcommand_;
  fs::path dir_;
  std::uint64_t seed_;
  json config_ = json::object();
  std::vector<std::string> outputs_;
};

struct Common {
  std::string out = "dispersion-lab-out";
  std::uint64_t seed = 42;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--out", c.out, "Output directory")->capture_default_str();
  cmd->add_option("--seed", c.seed, "Root seed")->capture_default_str();
}

// disperse ------------------------------------------------------------------

struct DisperseArgs {
  Common common;
  std::string variant = "softmax";
  std::string kernel;
  std::string n = "64..4096";
  std::size_t trials = 32;
  std::size_t d = 16;
  std::size_t w = 8;
  double logit_bound = 1.0;
  unsigned threads = 0;
};

int cmd_disperse(const DisperseArgs& a) {
  dlab::DispersionConfig cfg;
  cfg.variant = dlab::parse_variant(a.variant);
  cfg.kernel = a.kernel.empty() ? dlab::default_kernel(cfg.variant) : json::parse(a.kernel).get<dlab::KernelSpec>();
  cfg.n_values = parse_sizes(a.n);
  cfg.trials = a.trials;
  cfg.seed = a.common.seed;
  cfg.window = a.w;
  cfg.threads = a.threads;
  cfg.sampler.d = a.d;
  cfg.sampler.logit_bound = a.logit_bound;
  if (cfg.variant == dlab::Variant::kWindow) cfg.sampler.tile = a.w;

  Run run("disperse", a.common.out, a.common.seed);
  run.config() = {{"variant", a.variant}, {"kernel", cfg.kernel}, {"n", cfg.n_values}, {"trials", a.trials},
                  {"d", a.d},             {"w", a.w},             {"logit_bound", a.logit_bound}};

  dlab::DispersionReport report;
  std::string verdict = "pass";
  try {
    report = dlab::measure_dispersion(cfg);
  } catch (const dlab::InvariantViolation& e) {
    run.write("dispersion.json", json{{"bounds_hold", false}, {"error", e.what()}}.dump(2) + "\n");
    run.finish();
    throw CheckFailure(e.what());
  }

  bool slope_ok = true;
  if (cfg.variant == dlab::Variant::kSoftmax || cfg.variant == dlab::Variant::kLinear) {
    slope_ok = report.slope >= -1.15 && report.slope <= -0.85;
  } else if (cfg.variant == dlab::Variant::kWindow) {
    for (double m : report.max_coeff) slope_ok = slope_ok && m == report.max_coeff.front();
    slope_ok = slope_ok && report.slope == 0.0;
  }
  if (!slope_ok) verdict = "fail";

  json summary = report;
  summary["bounds_hold"] = true;
  summary["slope_ok"] = slope_ok;
  summary["verdict"] = verdict;
  run.write("dispersion.csv", dlab::dispersion_csv(report));
  run.write("dispersion.json", summary.dump(2) + "\n");
  run.finish();
  std::printf("variant=%s slope=%.6f coefficients=%llu bounds=hold verdict=%s\n", a.variant.c_str(), report.slope,
              static_cast<unsigned long long>(report.coefficients_checked), verdict.c_str());
  if (!slope_ok) throw CheckFailure("fitted slope outside its expected range");
  return kOk;
}

// bounds --------------------------------------------------------------------

struct BoundsArgs {
  Common common;
  std::string variants = "softmax,linear,focused,mila,differential";
  std::string n = "64..4096";
  double phi_a = std::exp(-1.0);
  double phi_b = std::exp(1.0);
};

int cmd_bounds(const BoundsArgs& a) {
  Run run("bounds", a.common.out, a.common.seed);
  run.config() = {{"variants", a.variants}, {"n", a.n}, {"phi_a", a.phi_a}, {"phi_b", a.phi_b}};
  std::ostringstream csv;
  csv << std::setprecision(17) << "variant,n,lower,upper\n";
  for (const auto& name : split_names(a.variants)) {
    const dlab::Variant v = dlab::parse_variant(name);
    for (std::size_t n : parse_sizes(a.n)) {
      const dlab::Bounds b = dlab::coefficient_bounds({v, a.phi_a, a.phi_b, n});
      csv << name << ',' << n << ',' << b.lower << ',' << b.upper << '\n';
    }
  }
  run.write("bounds.csv", csv.str());
  run.finish();
  std::cout << csv.str();
  return kOk;
}

// ssm-check -----------------------------------------------------------------

struct SsmArgs {
  Common common;
  std::size_t instances = 100;
  std::size_t n = 16;
  std::size_t d_state = 8;
  std::size_t channels = 8;
  double perturb = 0.0;
};

int cmd_ssm_check(const SsmArgs& a) {
  const dlab::EquivalenceReport r =
      dlab::ssm_equivalence(a.instances, a.n, a.d_state, a.channels, a.common.seed, a.perturb);
  Run run("ssm-check", a.common.out, a.common.seed);
  run.config() = {{"instances", a.instances}, {"n", a.n},           {"d_state", a.d_state},
                  {"channels", a.channels},   {"perturb", a.perturb}};
  const bool ok = r.max_abs_diff() < 1e-12;
  run.write("ssm_check.json", json{{"instances", r.instances},
                                   {"prefixes", r.prefixes},
                                   {"scan_vs_closed", r.scan_vs_closed},
                                   {"scan_vs_attention", r.scan_vs_attention},
                                   {"max_abs_diff", r.max_abs_diff()},
                                   {"pass", ok}}
                                  .dump(2) + "\n");
  run.finish();
  std::printf("instances=%zu prefixes=%zu max_abs_diff=%.3e %s\n", r.instances, r.prefixes, r.max_abs_diff(),
              ok ? "pass" : "FAIL");
  if (!ok) throw CheckFailure("scan, closed form and attention form disagree");
  return kOk;
}

// gradcheck -----------------------------------------------------------------

struct GradcheckArgs {
  Common common;
  std::string variants = "softmax,linear,focused,window,sema,mila";
  double tol = 1e-5;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  Run run("gradcheck", a.common.out, a.common.seed);
  run.config() = {{"variants", a.variants}, {"tol", a.tol}};
  std::ostringstream csv;
  csv << std::setprecision(17) << "variant,max_rel_err,max_abs_err,coordinates,pass\n";
  bool all = true;
  for (const auto& name : split_names(a.variants)) {
    const auto r = dlab::ad::gradcheck_variant(dlab::parse_variant(name), a.common.seed, a.tol);
    all = all && r.pass;
    csv << name << ',' << r.max_rel_err << ',' << r.max_abs_err << ',' << r.coordinates << ',' << r.pass << '\n';
    std::printf("%-8s max_rel_err=%.3e %s\n", name.c_str(), r.max_rel_err, r.pass ? "pass" : "FAIL");
  }
  run.write("gradcheck.csv", csv.str());
  run.finish();
  if (!all) throw CheckFailure("gradient check failed");
  return kOk;
}

// bench ---------------------------------------------------------------------

struct BenchArgs {
  Common common;
  std::string variants = "sema,softmax";
  std::string n = "256..8192";
  std::size_t d = 16;
  std::size_t w = 32;
};

int cmd_bench(const BenchArgs& a) {
  dlab::BenchConfig cfg;
  cfg.variants.clear();
  for (const auto& name : split_names(a.variants)) cfg.variants.push_back(dlab::parse_variant(name));
  cfg.n_values = parse_sizes(a.n);
  cfg.d = a.d;
  cfg.w = a.w;
  cfg.seed = a.common.seed;
  const dlab::BenchResult result = dlab::run_bench(cfg);

  Run run("bench", a.common.out, a.common.seed);
  run.config() = {{"variants", a.variants}, {"n", cfg.n_values}, {"d", a.d}, {"w", a.w}};
  std::ostringstream csv;
  csv << std::setprecision(17) << "variant,n,seconds,multiply_adds,analytic_multiply_adds\n";
  bool counts_match = true;
  for (const auto& row : result.rows) {
    counts_match = counts_match && row.multiply_adds == row.analytic_multiply_adds;
    csv << dlab::to_string(row.variant) << ',' << row.n << ',' << row.seconds << ',' << row.multiply_adds << ','
        << row.analytic_multiply_adds << '\n';
  }
  json exponents = json::object();
  for (const auto& [variant, e] : result.time_exponents) {
    exponents[dlab::to_string(variant)] = e;
    std::printf("%-8s time exponent %.3f\n", dlab::to_string(variant).c_str(), e);
  }
  run.write("bench.csv", csv.str());
  run.write("bench.json", json{{"time_exponents", exponents}, {"counts_match", counts_match}}.dump(2) + "\n");
  run.finish();
  if (!counts_match) throw CheckFailure("instrumented multiply-adds differ from the closed form");
  return kOk;
}

// train-toy -----------------------------------------------------------------

struct TrainArgs {
  Common common;
  std::string config;
  std::string averaging = "on";
  int epochs = 30;
  std::size_t batch = 16;
  double lr = 0.05;
};

bool parse_on_off(const std::string& s) {
  if (s == "on") return true;
  if (s == "off") return false;
  throw dlab::ConfigError("expected on or off, got '" + s + "'");
}

int cmd_train_toy(const TrainArgs& a) {
  const dlab::SyntheticTask task;
  dlab::ModelConfig cfg = task.model_config(parse_on_off(a.averaging), a.common.seed);
  if (!a.config.empty()) cfg = dlab::read_json_file(a.config).get<dlab::ModelConfig>();
  dlab::TrainOptions opts;
  opts.epochs = a.epochs;
  opts.batch_size = a.batch;
  opts.lr = a.lr;
  opts.seed = a.common.seed;

  Run run("train-toy", a.common.out, a.common.seed);
  run.config() = {{"model", cfg}, {"epochs", a.epochs}, {"batch", a.batch}, {"lr", a.lr}};
  dlab::TrainResult result;
  try {
    result = dlab::train_toy(cfg, task, opts);
  } catch (const dlab::TrainingError& e) {
    run.finish();
    throw CheckFailure(std::string(e.what()) + " at epoch " + std::to_string(e.epoch()));
  }
  run.write("metrics.csv", dlab::metrics_csv(result.history));
  dlab::save_checkpoint(run.dir() / "best.json", cfg, result.best_params);
  run.note_output("best.json");
  run.note_output("best.bin");
  run.finish();
  const auto& last = result.history.back();
  std::printf("epochs=%d final val_acc=%.4f best val_acc=%.4f (epoch %d)\n", last.epoch, last.val_acc,
              result.best_val_acc, result.best_epoch);
  return kOk;
}

// probe-rf ------------------------------------------------------------------

struct ProbeArgs {
  Common common;
  std::string config;
  std::string averaging = "on";
  std::size_t token = 0;
  bool keep_lepe = false;
};

int cmd_probe_rf(const ProbeArgs& a) {
  const dlab::SyntheticTask task;
  dlab::ModelConfig cfg = task.model_config(true, a.common.seed);
  if (!a.config.empty()) cfg = dlab::read_json_file(a.config).get<dlab::ModelConfig>();
  cfg.averaging_enabled = parse_on_off(a.averaging);
  dlab::ModelParams params = dlab::init_params(cfg);
  if (!a.keep_lepe) dlab::zero_lepe(params);

  const dlab::Tensor map = dlab::receptive_field_map(cfg, params, a.token);
  const dlab::GridSpec grid = dlab::stage_grids(cfg).front();
  const std::size_t w = dlab::stage_window(cfg, grid);
  const std::size_t reach = a.keep_lepe ? cfg.lepe_size / 2 : 0;
  const std::size_t ti = a.token / grid.width, tj = a.token % grid.width;

  // Averaging on: every entry nonzero. Off: zero outside the query's window,
  // widened by the LePE radius when LePE is kept.
  bool ok = true;
  std::ostringstream csv;
  csv << std::setprecision(17);
  for (std::size_t r = 0; r < grid.height; ++r) {
    for (std::size_t c = 0; c < grid.width; ++c) {
      const double m = map(r, c);
      csv << (c ? "," : "") << m;
      if (cfg.averaging_enabled) {
        ok = ok && m > 0.0;
      } else {
        const auto inside = [&](std::size_t x, std::size_t tx) {
          const std::size_t lo = (tx / w) * w;
          return x + reach >= lo && x < lo + w + reach;
        };
        if (!(inside(r, ti) && inside(c, tj))) ok = ok && m == 0.0;
      }
    }
    csv << '\n';
  }
  Run run("probe-rf", a.common.out, a.common.seed);
  run.config() = {{"model", cfg}, {"averaging", a.averaging}, {"token", a.token}, {"keep_lepe", a.keep_lepe}};
  run.write("rf.csv", csv.str());
  run.finish();
  std::printf("token=%zu grid=%zux%zu window=%zu averaging=%s structure=%s\n", a.token, grid.height, grid.width, w,
              a.averaging.c_str(), ok ? "pass" : "FAIL");
  if (!ok) throw CheckFailure("receptive field does not have the expected structure");
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dispersion-lab: attention dispersion experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  DisperseArgs disperse;
  auto* c_disperse = app.add_subcommand("disperse", "Empirical dispersion sweep with bound containment");
  add_common(c_disperse, disperse.common);
  c_disperse->add_option("--variant", disperse.variant, "softmax, linear, focused or window")->capture_default_str();
  c_disperse->add_option("--kernel", disperse.kernel, "KernelSpec JSON, e.g. {\"phi\":\"exp\",\"psi\":\"identity\"}");
  c_disperse->add_option("--n", disperse.n, "Sizes: lo..hi (doubling) or a comma list")->capture_default_str();
  c_disperse->add_option("--trials", disperse.trials)->capture_default_str();
  c_disperse->add_option("--d", disperse.d, "Head dimension")->capture_default_str();
  c_disperse->add_option("--w", disperse.w, "Window size (window variant)")->capture_default_str();
  c_disperse->add_option("--logit-bound", disperse.logit_bound, "Bound M on |q.k|")->capture_default_str();
  c_disperse->add_option("--threads", disperse.threads, "Worker threads (0: DISPERSION_LAB_THREADS or all)");

  BoundsArgs bounds;
  auto* c_bounds = app.add_subcommand("bounds", "Tabulate the coefficient bounds per variant");
  add_common(c_bounds, bounds.common);
  c_bounds->add_option("--variants", bounds.variants)->capture_default_str();
  c_bounds->add_option("--n", bounds.n)->capture_default_str();
  c_bounds->add_option("--phi-a", bounds.phi_a, "Smallest kernel value")->capture_default_str();
  c_bounds->add_option("--phi-b", bounds.phi_b, "Largest kernel value")->capture_default_str();

  SsmArgs ssm;
  auto* c_ssm = app.add_subcommand("ssm-check", "Scan, closed form and attention form equivalence");
  add_common(c_ssm, ssm.common);
  c_ssm->add_option("--instances", ssm.instances)->capture_default_str();
  c_ssm->add_option("--n", ssm.n, "Largest sequence length")->capture_default_str();
  c_ssm->add_option("--d-state", ssm.d_state)->capture_default_str();
  c_ssm->add_option("--channels", ssm.channels)->capture_default_str();
  c_ssm->add_option("--perturb", ssm.perturb, "Offset added to the attention form (negative control)")
      ->group("");

  GradcheckArgs grad;
  auto* c_grad = app.add_subcommand("gradcheck", "Finite-difference gradient checks of the attention variants");
  add_common(c_grad, grad.common);
  c_grad->add_option("--variants", grad.variants)->capture_default_str();
  c_grad->add_option("--tol", grad.tol)->capture_default_str();

  BenchArgs bench;
  auto* c_bench = app.add_subcommand("bench", "Wall time and multiply-add scaling");
  add_common(c_bench, bench.common);
  c_bench->add_option("--variants", bench.variants)->capture_default_str();
  c_bench->add_option("--n", bench.n)->capture_default_str();
  c_bench->add_option("--d", bench.d)->capture_default_str();
  c_bench->add_option("--w", bench.w)->capture_default_str();

  TrainArgs train;
  auto* c_train = app.add_subcommand("train-toy", "Train the single-block model on the global-majority task");
  add_common(c_train, train.common);
  c_train->add_option("--config", train.config, "ModelConfig JSON (default: the task's single-block model)");
  c_train->add_option("--averaging", train.averaging, "on or off")->capture_default_str();
  c_train->add_option("--epochs", train.epochs)->capture_default_str();
  c_train->add_option("--batch", train.batch)->capture_default_str();
  c_train->add_option("--lr", train.lr)->capture_default_str();

  ProbeArgs probe;
  auto* c_probe = app.add_subcommand("probe-rf", "Jacobian magnitude map of one block");
  add_common(c_probe, probe.common);
  c_probe->add_option("--config", probe.config, "ModelConfig JSON (default: the task's single-block model)");
  c_probe->add_option("--averaging", probe.averaging, "on or off")->capture_default_str();
  c_probe->add_option("--token", probe.token, "Output token index")->capture_default_str();
  c_probe->add_flag("--keep-lepe", probe.keep_lepe, "Keep the initialized LePE kernels instead of zeroing them");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*c_disperse) return cmd_disperse(disperse);
    if (*c_bounds) return cmd_bounds(bounds);
    if (*c_ssm) return cmd_ssm_check(ssm);
    if (*c_grad) return cmd_gradcheck(grad);
    if (*c_bench) return cmd_bench(bench);
    if (*c_train) return cmd_train_toy(train);
    if (*c_probe) return cmd_probe_rf(probe);
  } catch (const CheckFailure& e) {
    std::cerr << "check failed: " << e.what() << "\n";
    return kCheckFailed;
  } catch (const dlab::InvariantViolation& e) {
    std::cerr << "check failed: " << e.what() << "\n";
    return kCheckFailed;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.get_subcommands().front()->help();
    return kUsage;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
