#include "mwmhe/harness.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <numbers>
#include <set>
#include <sstream>
#include <thread>

namespace mwmhe::harness {

namespace {

int positive_int(const nlohmann::json& v, const std::string& key, int min) {
  if (!v.is_number_integer()) throw ValidationError(key + " must be an integer");
  const auto x = v.get<long long>();
  if (x < min) throw ValidationError(key + " must be at least " + std::to_string(min));
  return static_cast<int>(x);
}

double number(const nlohmann::json& v, const std::string& key) {
  if (!v.is_number()) throw ValidationError(key + " must be a number");
  return v.get<double>();
}

std::vector<int> dedup(const std::vector<int>& in, const std::string& key,
                       std::vector<std::string>& warnings) {
  std::vector<int> out;
  std::set<int> seen;
  for (int v : in) {
    if (seen.insert(v).second) {
      out.push_back(v);
    } else {
      warnings.push_back("duplicate " + key + " value " + std::to_string(v) + " dropped");
    }
  }
  return out;
}

}  // namespace

ExperimentConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  if (!j.is_object()) throw ValidationError("configuration must be a JSON object");
  static const std::set<std::string> known = {
      "system",          "T_final",     "horizons",   "nfc",           "coupling_bound",
      "mw_horizon",      "max_lag",     "process_variance", "measurement_variance", "seed",
      "disturbance",     "x0",          "out_dir",    "methods",       "repeats",
      "workers",         "eviction_rule", "timing",   "check_hypothesis"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ValidationError("unknown configuration key: " + key);
  }
  ExperimentConfig cfg;
  if (!j.contains("system")) throw ValidationError("configuration lacks system");
  if (!j.contains("T_final")) throw ValidationError("configuration lacks T_final");

  if (j.at("system").is_string()) {
    cfg.system_path = j.at("system").get<std::string>();
    if (cfg.system_path.is_relative() && !base_dir.empty()) cfg.system_path = base_dir / cfg.system_path;
    cfg.system = load_system(cfg.system_path);
  } else {
    cfg.system = system_from_json(j.at("system"));
  }
  cfg.T_final = positive_int(j.at("T_final"), "T_final", 1);

  if (j.contains("horizons")) {
    if (!j.at("horizons").is_array()) throw ValidationError("horizons must be an array");
    std::vector<int> hs;
    for (const auto& v : j.at("horizons")) hs.push_back(positive_int(v, "N", 1));
    cfg.horizons = dedup(hs, "N", cfg.warnings);
  }
  if (j.contains("nfc")) {
    if (!j.at("nfc").is_array()) throw ValidationError("nfc must be an array");
    for (const auto& v : j.at("nfc")) cfg.nfc.push_back(positive_int(v, "N_FC", 0));
  }
  if (j.contains("coupling_bound")) {
    cfg.coupling_bound = number(j.at("coupling_bound"), "coupling_bound");
    if (!(*cfg.coupling_bound > 0)) throw ValidationError("coupling_bound must be positive");
  }
  if (!cfg.nfc.empty() && cfg.coupling_bound) {
    throw ValidationError("give either nfc or coupling_bound, not both");
  }
  if (j.contains("mw_horizon")) cfg.mw_horizon = positive_int(j.at("mw_horizon"), "mw_horizon", 1);
  if (j.contains("max_lag")) cfg.max_lag = positive_int(j.at("max_lag"), "max_lag", 1);
  if (j.contains("process_variance")) {
    cfg.process_variance = number(j.at("process_variance"), "process_variance");
  }
  if (j.contains("measurement_variance")) {
    cfg.measurement_variance = number(j.at("measurement_variance"), "measurement_variance");
  }
  if (cfg.process_variance < 0 || cfg.measurement_variance < 0) {
    throw ValidationError("noise variances must be non-negative");
  }
  if (j.contains("seed")) {
    const auto& v = j.at("seed");
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<long long>() < 0)) {
      throw ValidationError("seed must be a non-negative integer");
    }
    cfg.seed = j.at("seed").get<std::uint64_t>();
  }
  if (j.contains("disturbance")) {
    if (!j.at("disturbance").is_array()) throw ValidationError("disturbance must be an array");
    for (const auto& step : j.at("disturbance")) {
      if (!step.is_array() || step.size() != 2) {
        throw ValidationError("disturbance entries must be [t, value] pairs");
      }
      StepChange c;
      c.t = positive_int(step[0], "disturbance time", 0);
      c.value = step[1].is_array() ? vector_from_json(step[1], "disturbance value")
                                   : Vector::Constant(1, number(step[1], "disturbance value"));
      cfg.disturbance.push_back(std::move(c));
    }
    std::stable_sort(cfg.disturbance.begin(), cfg.disturbance.end(),
                     [](const StepChange& a, const StepChange& b) { return a.t < b.t; });
  }
  if (j.contains("x0")) cfg.x0 = vector_from_json(j.at("x0"), "x0");
  if (j.contains("out_dir")) cfg.out_dir = j.at("out_dir").get<std::string>();
  if (j.contains("methods")) {
    cfg.run_fie = cfg.run_mhe = cfg.run_mwmhe = false;
    for (const auto& m : j.at("methods")) {
      const auto name = m.get<std::string>();
      if (name == "fie") {
        cfg.run_fie = true;
      } else if (name == "mhe") {
        cfg.run_mhe = true;
      } else if (name == "mwmhe") {
        cfg.run_mwmhe = true;
      } else {
        throw ValidationError("unknown method " + name);
      }
    }
  }
  if (j.contains("repeats")) cfg.repeats = positive_int(j.at("repeats"), "repeats", 1);
  if (j.contains("workers")) cfg.workers = positive_int(j.at("workers"), "workers", 1);
  if (j.contains("eviction_rule")) {
    cfg.eviction = est::parse_eviction_rule(j.at("eviction_rule").get<std::string>());
  }
  if (j.contains("timing")) cfg.timing = j.at("timing").get<bool>();
  if (j.contains("check_hypothesis")) cfg.check_hypothesis = j.at("check_hypothesis").get<bool>();

  if (!cfg.nfc.empty() && cfg.nfc.size() != cfg.horizons.size()) {
    throw ValidationError("nfc must have one entry per horizon");
  }
  for (int N : cfg.horizons) {
    if (N >= cfg.T_final) {
      throw ValidationError("T_final must exceed every horizon (N=" + std::to_string(N) + ")");
    }
  }
  if (cfg.x0 && cfg.x0->size() != cfg.system.sys.n()) {
    throw DimensionError("x0 must have length " + std::to_string(cfg.system.sys.n()));
  }
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  const nlohmann::json j = read_json_file(path);
  try {
    return config_from_json(j, path.parent_path());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

double NormalStream::next() {
  if (spare_) {
    const double v = *spare_;
    spare_.reset();
    return v;
  }
  // Uniforms in (0, 1] from the top 53 bits.
  auto uniform = [this] { return (double((engine_() >> 11) + 1)) * 0x1.0p-53; };
  const double u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  return radius * std::cos(angle);
}

Vector NormalStream::next(Eigen::Index n, double stddev) {
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = stddev * next();
  return v;
}

std::vector<Vector> step_series(const std::vector<StepChange>& schedule, Eigen::Index channels,
                                int T) {
  if (channels == 0) return {};
  std::vector<Vector> out;
  Vector current = Vector::Zero(channels);
  std::size_t next = 0;
  for (int k = 0; k < T; ++k) {
    // free_series_k shapes x_{k+1}.
    while (next < schedule.size() && schedule[next].t <= k + 1) {
      if (schedule[next].value.size() != channels) {
        throw DimensionError("disturbance value has " + std::to_string(schedule[next].value.size()) +
                             " entries, system has " + std::to_string(channels) + " free channels");
      }
      current = schedule[next].value;
      ++next;
    }
    out.push_back(current);
  }
  return out;
}

Dataset generate_data(const ExperimentConfig& cfg, const SystemSpec& spec) {
  const auto& sys = spec.sys;
  const int T = cfg.T_final;
  NormalStream rng(cfg.seed);
  SimulationInput in;
  in.x0 = cfg.x0 ? *cfg.x0 : spec.prior.x0;
  const double sw = std::sqrt(cfg.process_variance);
  const double sv = std::sqrt(cfg.measurement_variance);
  for (int k = 0; k < T; ++k) {
    in.process_noise.push_back(rng.next(sys.n1(), sw));
    in.measurement_noise.push_back(rng.next(sys.m(), sv));
  }
  const Eigen::Index channels = null_basis(sys.E).cols();
  in.free_series = step_series(cfg.disturbance, channels, T);
  auto [traj, meas] = simulate(sys, spec.constraints, in, T);
  Dataset d;
  d.data = est::EstimationData::from(sys, traj, meas);
  d.truth = std::move(traj);
  d.meas = std::move(meas);
  return d;
}

SystemSpec actuator_standin() {
  // Euler discretization of
  //   Jm wm' = -bm wm - k th + u,  th' = wm - wl,  Jl wl' = k th - bl wl - d
  // with d_k acting on step k -> k+1. Each dynamics row is scaled so a
  // unit-variance w is a small disturbance on that state. Sensors: a coarse
  // motor encoder and a load accelerometer, the only channel that sees d.
  const double dt = 0.1, Jm = 1.0, Jl = 2.0, k = 0.5, bm = 5.4, bl = 2.4;
  const double encoder_gain = 0.0125;
  SystemSpec s;
  auto& sys = s.sys;
  sys.E = Matrix::Zero(3, 4);
  sys.E.leftCols(3).setIdentity();
  sys.A = Matrix::Zero(3, 4);
  sys.A << 1 - dt * bm / Jm, -dt * k / Jm, 0, 0,
           dt, 1, -dt, 0,
           0, dt * k / Jl, 1 - dt * bl / Jl, -dt / Jl;
  sys.B = Matrix::Zero(3, 1);
  sys.B(0, 0) = dt / Jm;
  const Eigen::DiagonalMatrix<double, 3> row_scale(16.0, 12.0, 30.0);
  sys.E = row_scale * sys.E;
  sys.A = row_scale * sys.A;
  sys.B = row_scale * sys.B;
  sys.H = Matrix::Zero(2, 4);
  sys.H << encoder_gain, 0, 0, 0,
           0, k / Jl, -bl / Jl, -1 / Jl;
  sys.Q = Matrix::Identity(3, 3);
  sys.R = 0.1 * Matrix::Identity(2, 2);
  s.constraints.Ec = Matrix::Zero(2, 4);
  s.constraints.Ec(0, 3) = 1;
  s.constraints.Ec(1, 3) = -1;
  s.constraints.Ac = Matrix::Zero(2, 4);
  s.constraints.dc = Vector::Constant(2, 35.0);
  s.prior.x0 = Vector::Zero(4);
  s.prior.P0 = Matrix::Identity(4, 4);
  return s;
}

std::vector<StepChange> actuator_profile() {
  auto v = [](double d) { return Vector::Constant(1, d); };
  return {{0, v(0)}, {40, v(35)}, {70, v(10)}, {120, v(-35)}, {150, v(-5)}, {220, v(35)},
          {240, v(0)}};
}

double mse(const est::EstimateSeries& s, const Trajectory& truth) {
  if (s.steps.empty()) return 0;
  double total = 0;
  for (const auto& r : s.steps) {
    total += (r.x_filtered - truth.x.at(static_cast<std::size_t>(r.T))).squaredNorm();
  }
  return total / double(s.steps.size());
}

namespace {

struct Cell {
  std::string method;
  int N = 0;      // matched MHE horizon (T_final for FIE)
  int N_FC = 0;
  int index = 0;  // row position
};

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

BenchmarkReport run_benchmark(const ExperimentConfig& cfg) {
  const SystemSpec& spec = cfg.system;
  const Dataset ds = generate_data(cfg, spec);

  BenchmarkReport report;
  report.truth = ds.truth;
  report.timing = cfg.timing;
  if (!spec.constraints.empty()) {
    int touching = 0;
    for (int k = 1; k <= cfg.T_final; ++k) {
      const Vector slack = spec.constraints.slack(ds.truth.x[static_cast<std::size_t>(k - 1)],
                                                  ds.truth.x[static_cast<std::size_t>(k)]);
      if ((slack.array() <= 1e-6 * (1.0 + spec.constraints.dc.array().abs())).any()) ++touching;
    }
    report.truth_active_fraction = double(touching) / cfg.T_final;
  }

  std::vector<Cell> cells;
  if (cfg.run_fie) cells.push_back({"fie", cfg.T_final, 0, 0});
  std::optional<int> selected;
  if (cfg.coupling_bound) {
    selected = dkf::select_horizon<double>(spec.sys, *cfg.coupling_bound, cfg.max_lag).lag;
  }
  for (std::size_t i = 0; i < cfg.horizons.size(); ++i) {
    const int N = cfg.horizons[i];
    if (cfg.run_mhe) cells.push_back({"mhe", N, 0, 0});
    if (cfg.run_mwmhe) {
      const int nfc = !cfg.nfc.empty() ? cfg.nfc[i] : selected ? *selected : N - cfg.mw_horizon;
      cells.push_back({"mwmhe", N, std::max(nfc, 0), 0});
    }
  }
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i].index = static_cast<int>(i);

  std::optional<dkf::RiccatiResult<double>> steady;
  std::optional<Matrix> gain;
  try {
    steady = dkf::riccati_steady_state<double>(spec.sys);
    gain = dkf::steady_state_gain(spec.sys, *steady);
  } catch (const NumericalError& e) {
    std::cerr << "warning: no steady state for the coupling column: " << e.what() << "\n";
  }

  est::RunOptions opts;
  opts.check_hypothesis = cfg.check_hypothesis;
  report.rows.resize(cells.size());

  auto run_cell = [&](const Cell& c) {
    BenchmarkRow row;
    row.method = c.method;
    row.N = c.N;
    row.N_FC = c.N_FC;
    try {
      std::vector<double> times;
      for (int rep = 0; rep < (cfg.timing ? cfg.repeats : 1); ++rep) {
        est::EstimateSeries s;
        if (c.method == "fie") {
          s = est::fie_run(spec, ds.data, cfg.T_final, opts);
        } else if (c.method == "mhe") {
          s = est::mhe_run(spec, ds.data, c.N, cfg.T_final, opts);
        } else {
          est::MwConfig mw;
          mw.N = cfg.mw_horizon;
          mw.N_FC = c.N_FC;
          mw.rule = cfg.eviction;
          s = est::mwmhe_run(spec, ds.data, mw, cfg.T_final, opts);
        }
        times.push_back(s.total_ms());
        if (rep == 0) row.series = std::move(s);
      }
      row.time_ms = median(times);
      row.mse = mse(row.series, ds.truth);
      double vars = 0;
      int active = 0, counted = 0;
      for (const auto& r : row.series.steps) {
        vars += r.variables;
        row.max_kkt_residual = std::max(row.max_kkt_residual, r.residuals.max());
        row.hypothesis_violations += r.hypothesis_violations;
        if (r.T > r.exit || c.method == "fie") {
          ++counted;
          if (!r.active.empty()) ++active;
        }
      }
      row.mean_variables = vars / std::max<std::size_t>(1, row.series.steps.size());
      row.exit_active_fraction = counted ? double(active) / counted : 0.0;
      if (c.method == "mwmhe" && steady && c.N_FC >= 1) {
        Matrix M = Matrix::Identity(spec.sys.n(), spec.sys.n());
        for (int q = 1; q < c.N_FC; ++q) M = M * *gain;
        row.coupling_norm = dkf::coupling_norm<double>(steady->gamma, M);
      }
    } catch (const std::exception& e) {
      row.failed = true;
      row.error = e.what();
    }
    report.rows[static_cast<std::size_t>(c.index)] = std::move(row);
  };

  const int workers = std::max(1, std::min<int>(cfg.workers, static_cast<int>(cells.size())));
  if (workers == 1) {
    for (const auto& c : cells) run_cell(c);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) run_cell(cells[i]);
      });
    }
    for (auto& t : pool) t.join();
  }

  // Reduction relative to MHE at the same horizon.
  for (auto& row : report.rows) {
    if (row.method != "mwmhe" || row.failed || !cfg.timing) continue;
    for (const auto& other : report.rows) {
      if (other.method == "mhe" && other.N == row.N && !other.failed && other.time_ms > 0) {
        row.time_reduction_pct = (row.time_ms - other.time_ms) / other.time_ms * 100.0;
      }
    }
  }
  return report;
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::scientific);
  return std::string(buf, res.ptr);
}

std::string summary_csv(const BenchmarkReport& report) {
  std::string out = "method,N,N_FC,mse,time_ms,time_reduction_pct,coupling_norm\n";
  for (const auto& r : report.rows) {
    out += r.method + "," + std::to_string(r.N) + "," + std::to_string(r.N_FC) + ",";
    if (r.failed) {
      out += "FAILED,,,\n";
      continue;
    }
    out += format_double(r.mse) + ",";
    out += report.timing ? format_double(r.time_ms) : std::string();
    out += ",";
    out += r.time_reduction_pct ? format_double(*r.time_reduction_pct) : std::string();
    out += ",";
    out += r.coupling_norm ? format_double(*r.coupling_norm) : std::string();
    out += "\n";
  }
  return out;
}

void write_estimates(const est::EstimateSeries& s, const Trajectory& truth,
                     const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw Error("cannot write " + file.string());
  const Eigen::Index n = truth.x.empty() ? 0 : truth.x.front().size();
  out << "t";
  for (Eigen::Index i = 0; i < n; ++i) out << ",x" << i << "_true";
  for (Eigen::Index i = 0; i < n; ++i) out << ",x" << i << "_est";
  out << "\n";
  for (const auto& r : s.steps) {
    out << r.T;
    const auto& x = truth.x.at(static_cast<std::size_t>(r.T));
    for (Eigen::Index i = 0; i < n; ++i) out << "," << format_double(x(i));
    for (Eigen::Index i = 0; i < n; ++i) out << "," << format_double(r.x_filtered(i));
    out << "\n";
  }
}

void write_ledger(const est::EstimateSeries& s, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw Error("cannot write " + file.string());
  for (const auto& r : s.steps) out << est::ledger_trace(r).dump() << "\n";
}

void emit_report(const BenchmarkReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "summary.csv", std::ios::binary);
    if (!out) throw Error("cannot write " + (dir / "summary.csv").string());
    out << summary_csv(report);
  }
  for (const auto& r : report.rows) {
    if (r.failed) continue;
    const std::string tag = r.method + "_" + std::to_string(r.N);
    write_estimates(r.series, report.truth, dir / ("estimates_" + tag + ".csv"));
    if (r.method == "mwmhe") write_ledger(r.series, dir / ("ledger_" + tag + ".jsonl"));
  }
}

}  // namespace mwmhe::harness
