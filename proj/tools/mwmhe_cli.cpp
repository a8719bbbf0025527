#include <CLI11.hpp>

#include <nlohmann/json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

#include "mwmhe/dkf.hpp"
#include "mwmhe/estimators.hpp"
#include "mwmhe/harness.hpp"
#include "mwmhe/io.hpp"

namespace {

using namespace mwmhe;

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> repeats;
  std::optional<int> workers;
  std::optional<std::string> eviction;
  bool no_timing = false;
};

harness::ExperimentConfig configure(const std::string& path, const Overrides& o) {
  auto cfg = harness::load_config(path);
  if (o.seed) cfg.seed = *o.seed;
  if (o.out) cfg.out_dir = *o.out;
  if (o.repeats) cfg.repeats = *o.repeats;
  if (o.workers) cfg.workers = *o.workers;
  if (o.eviction) cfg.eviction = est::parse_eviction_rule(*o.eviction);
  if (o.no_timing) cfg.timing = false;
  for (const auto& w : cfg.warnings) std::cerr << "warning: " << w << "\n";
  return cfg;
}

int cmd_validate(const std::string& path) {
  const auto spec = load_system(path);
  const auto report = validate_system(spec.sys);
  for (const auto& c : report.checks) {
    std::printf("%-32s %s  (rank %ld, required %ld)\n", c.name.c_str(), c.passed ? "pass" : "FAIL",
                static_cast<long>(c.rank), static_cast<long>(c.required));
  }
  std::printf("constraint rows: %ld\n", static_cast<long>(spec.constraints.rows()));
  return report.ok() ? 0 : 2;
}

int cmd_simulate(const std::string& path, const Overrides& o) {
  const auto cfg = configure(path, o);
  const auto ds = harness::generate_data(cfg, cfg.system);
  std::filesystem::create_directories(cfg.out_dir);
  const auto file = cfg.out_dir / "trajectory.csv";
  std::ofstream out(file, std::ios::binary);
  const auto n = cfg.system.sys.n();
  const auto m = cfg.system.sys.m();
  out << "t";
  for (Eigen::Index i = 0; i < n; ++i) out << ",x" << i;
  for (Eigen::Index i = 0; i < m; ++i) out << ",y" << i;
  out << "\n";
  for (int k = 0; k <= cfg.T_final; ++k) {
    out << k;
    for (Eigen::Index i = 0; i < n; ++i) out << "," << harness::format_double(ds.truth.x[k](i));
    for (Eigen::Index i = 0; i < m; ++i) {
      out << "," << (k == 0 ? std::string() : harness::format_double(ds.meas.y(k)(i)));
    }
    out << "\n";
  }
  std::printf("wrote %s (%d steps, %zu constraint violations)\n", file.string().c_str(),
              cfg.T_final, ds.truth.violations.size());
  return 0;
}

int cmd_tune(const std::string& path, double bound, int max_lag) {
  const auto spec = load_system(path);
  const auto sel = dkf::select_horizon<double>(spec.sys, bound, max_lag);
  std::printf("N_FC = %d\ncoupling norm = %.6e\n", sel.lag, sel.norm);
  return 0;
}

int cmd_estimate(const std::string& path, const std::string& method, std::optional<int> N,
                 std::optional<int> nfc, const Overrides& o) {
  const auto cfg = configure(path, o);
  const auto ds = harness::generate_data(cfg, cfg.system);
  est::EstimateSeries s;
  const int horizon = N ? *N : (cfg.horizons.empty() ? 1 : cfg.horizons.front());
  if (method == "fie") {
    s = est::fie_run(cfg.system, ds.data, cfg.T_final);
  } else if (method == "mhe") {
    s = est::mhe_run(cfg.system, ds.data, horizon, cfg.T_final);
  } else if (method == "mwmhe") {
    est::MwConfig mw;
    mw.N = horizon;
    mw.rule = cfg.eviction;
    mw.max_lag = cfg.max_lag;
    if (nfc) {
      mw.N_FC = *nfc;
    } else if (cfg.coupling_bound) {
      mw.U = cfg.coupling_bound;
    } else {
      mw.N_FC = std::max(0, horizon - 1);
    }
    est::RunOptions opts;
    opts.check_hypothesis = cfg.check_hypothesis;
    s = est::mwmhe_run(cfg.system, ds.data, mw, cfg.T_final, opts);
  } else {
    throw ValidationError("method must be fie, mhe or mwmhe");
  }
  std::filesystem::create_directories(cfg.out_dir);
  const std::string tag = method + "_" + std::to_string(s.N);
  harness::write_estimates(s, ds.truth, cfg.out_dir / ("estimates_" + tag + ".csv"));
  if (method == "mwmhe") harness::write_ledger(s, cfg.out_dir / ("ledger_" + tag + ".jsonl"));
  std::printf("%s N=%d N_FC=%d mse=%s time_ms=%.3f\n", method.c_str(), s.N, s.N_FC,
              harness::format_double(harness::mse(s, ds.truth)).c_str(), s.total_ms());
  return 0;
}

int cmd_bench(const std::string& path, const Overrides& o) {
  const auto cfg = configure(path, o);
  const auto report = harness::run_benchmark(cfg);
  harness::emit_report(report, cfg.out_dir);
  std::cout << harness::summary_csv(report);
  bool failed = false;
  for (const auto& r : report.rows) {
    if (r.failed) {
      std::cerr << r.method << " N=" << r.N << " failed: " << r.error << "\n";
      failed = true;
    }
  }
  return failed ? 3 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Constrained state estimation for descriptor systems"};
  app.require_subcommand(1);

  Overrides o;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--seed", o.seed, "RNG seed");
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--eviction-rule", o.eviction, "text | flowchart")
        ->check(CLI::IsMember({"text", "flowchart"}));
  };

  std::string file;
  auto* validate = app.add_subcommand("validate", "check the structural assumptions");
  validate->add_option("system", file)->required();

  auto* simulate = app.add_subcommand("simulate", "generate data for a configuration");
  simulate->add_option("config", file)->required();
  add_common(simulate);

  double bound = 0;
  int max_lag = 1000;
  auto* tune = app.add_subcommand("tune", "pick N_FC from a coupling bound");
  tune->add_option("system", file)->required();
  tune->add_option("--bound", bound, "coupling bound U")->required();
  tune->add_option("--max-lag", max_lag, "largest lag tried");

  std::string method;
  std::optional<int> N, nfc;
  auto* estimate = app.add_subcommand("estimate", "run one estimator");
  estimate->add_option("config", file)->required();
  estimate->add_option("--method", method)->required()->check(CLI::IsMember({"fie", "mhe", "mwmhe"}));
  estimate->add_option("--N", N, "sliding window length");
  estimate->add_option("--nfc", nfc, "maximum lag");
  add_common(estimate);

  auto* bench = app.add_subcommand("bench", "run the comparison grid");
  bench->add_option("config", file)->required();
  bench->add_option("--repeats", o.repeats, "timing repeats");
  bench->add_option("--workers", o.workers, "concurrent grid cells");
  bench->add_flag("--no-timing", o.no_timing, "leave timing columns empty");
  add_common(bench);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*validate) return cmd_validate(file);
    if (*simulate) return cmd_simulate(file, o);
    if (*tune) return cmd_tune(file, bound, max_lag);
    if (*estimate) return cmd_estimate(file, method, N, nfc, o);
    if (*bench) return cmd_bench(file, o);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
