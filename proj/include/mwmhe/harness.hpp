#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "mwmhe/estimators.hpp"
#include "mwmhe/io.hpp"

namespace mwmhe::harness {

/// From time t on, the free channels take `value`.
struct StepChange {
  int t = 0;
  Vector value;
};

struct ExperimentConfig {
  std::filesystem::path system_path;
  SystemSpec system;
  int T_final = 0;
  std::vector<int> horizons;           // MHE horizons; MW-MHE is paired with each
  std::vector<int> nfc;                // per horizon; empty means N - 1 (or U below)
  std::optional<double> coupling_bound;  // U, selects one N_FC for every horizon
  int mw_horizon = 1;                  // sliding-window length of MW-MHE
  int max_lag = 1000;
  double process_variance = 1.0;
  double measurement_variance = 0.1;
  std::uint64_t seed = 0;
  std::vector<StepChange> disturbance;
  std::optional<Vector> x0;  // true initial state; prior mean when absent
  std::filesystem::path out_dir = "out";
  bool run_fie = true;
  bool run_mhe = true;
  bool run_mwmhe = true;
  int repeats = 5;
  int workers = 1;
  est::EvictionRule eviction = est::EvictionRule::text;
  bool timing = true;
  bool check_hypothesis = false;
  std::vector<std::string> warnings;
};

/// Relative paths resolve against `base_dir`. Unknown keys are rejected.
ExperimentConfig config_from_json(const nlohmann::json& j,
                                  const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);

/// Standard normal draws from mt19937_64 through Box-Muller, so the stream is
/// the same on every platform (std::normal_distribution is not specified).
class NormalStream {
 public:
  explicit NormalStream(std::uint64_t seed) : engine_(seed) {}
  double next();
  Vector next(Eigen::Index n, double stddev);

 private:
  std::mt19937_64 engine_;
  std::optional<double> spare_;
};

struct Dataset {
  Trajectory truth;
  MeasurementRecord meas;
  est::EstimationData data;
};

/// Free-channel series for T steps from a step schedule.
std::vector<Vector> step_series(const std::vector<StepChange>& schedule, Eigen::Index channels,
                                int T);

Dataset generate_data(const ExperimentConfig& cfg, const SystemSpec& spec);

/// Three-state drive chain (motor speed, shaft twist, load speed) with an
/// unknown load torque d as a fourth, algebraically free state. |d| <= 35.
SystemSpec actuator_standin();

/// Step profile for d used by the shipped benchmark configuration.
std::vector<StepChange> actuator_profile();

double mse(const est::EstimateSeries& s, const Trajectory& truth);

struct BenchmarkRow {
  std::string method;
  int N = 0;
  int N_FC = 0;
  double mse = 0;
  double time_ms = 0;
  std::optional<double> time_reduction_pct;
  std::optional<double> coupling_norm;
  double mean_variables = 0;
  double exit_active_fraction = 0;
  int hypothesis_violations = 0;
  double max_kkt_residual = 0;
  bool failed = false;
  std::string error;
  est::EstimateSeries series;
};

struct BenchmarkReport {
  std::vector<BenchmarkRow> rows;
  Trajectory truth;
  double truth_active_fraction = 0;  // steps whose true state touches a bound
  bool timing = true;
};

BenchmarkReport run_benchmark(const ExperimentConfig& cfg);

/// summary.csv, estimates_<method>_<N>.csv and ledger_<method>_<N>.jsonl.
void emit_report(const BenchmarkReport& report, const std::filesystem::path& dir);
void write_estimates(const est::EstimateSeries& s, const Trajectory& truth,
                     const std::filesystem::path& file);
void write_ledger(const est::EstimateSeries& s, const std::filesystem::path& file);
std::string summary_csv(const BenchmarkReport& report);

/// Locale-independent shortest-exact scientific formatting.
std::string format_double(double v);

}  // namespace mwmhe::harness
