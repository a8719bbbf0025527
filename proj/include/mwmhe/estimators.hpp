#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "mwmhe/dkf.hpp"
#include "mwmhe/io.hpp"
#include "mwmhe/model.hpp"
#include "mwmhe/qp.hpp"

namespace mwmhe::est {

using FilterState = dkf::FilterState<double>;
using SmootherStep = dkf::SmootherStep<double>;
using Propagator = dkf::Propagator<double>;

/// Bookkeeping in the window ledger went wrong (missing stored step data,
/// overlapping windows, ...).
class LedgerError : public Error {
 public:
  using Error::Error;
};

/// Inputs u_0..u_{T-1} and measurements y_1..y_T.
struct EstimationData {
  std::vector<Vector> u;
  std::vector<Vector> y;  // slot 0 unused

  int horizon() const { return static_cast<int>(y.size()) - 1; }
  const Vector& input(int k) const { return u.at(static_cast<std::size_t>(k)); }
  const Vector& measurement(int k) const { return y.at(static_cast<std::size_t>(k)); }

  /// Empty trajectory inputs become zero vectors of the system's input size.
  static EstimationData from(const DescriptorSystem& sys, const Trajectory& traj,
                             const MeasurementRecord& meas);
};

/// ||E x - z||^2 over P(-) where z = A x_post + B u.
struct ArrivalCost {
  Vector z;
  Matrix weight;

  double operator()(const DescriptorSystem& sys, const Vector& x) const;
};

ArrivalCost arrival_cost(const DescriptorSystem& sys, const FilterState& state, const Vector& u);

/// Descriptor Kalman filter over a data set, advanced lazily. Smoother
/// quantities are computed on first use and cached. Keeps a reference to
/// `data`, which must outlive it.
class FilterHistory {
 public:
  FilterHistory(DescriptorSystem sys, const Prior& prior, const EstimationData& data);

  const FilterState& state(int k);
  const SmootherStep& smoother(int k);
  /// Arrival cost for a window whose first state is x_f.
  ArrivalCost arrival(int f);
  const DescriptorSystem& system() const { return sys_; }
  const EstimationData& data() const { return *data_; }
  /// Drops cached smoother data below k.
  void release_before(int k);

 private:
  DescriptorSystem sys_;
  const EstimationData* data_;
  std::vector<FilterState> states_;
  std::vector<std::optional<SmootherStep>> smoothers_;
};

/// Staged QP over state blocks labelled by time. States must be registered
/// in increasing time order.
class StageBuilder {
 public:
  explicit StageBuilder(const DescriptorSystem& sys) : sys_(sys) {}

  int state(int k);
  bool has_state(int k) const;

  void arrival(int f, const ArrivalCost& cost);
  /// ||H x_k - y||_R.
  void measurement(int k, const Vector& y);
  /// ||E x_{k+1} - A x_k - B u||_Q.
  void dynamics(int k, const Vector& u);
  /// ||x_k - G x_{k+1} - r||_Gamma.
  void smoother(int k, const SmootherStep& step);
  /// ||x_from - M x_to - offset||_W for an eliminated stretch.
  void marginal(int from, int to, const Propagator& prop);
  /// E_c x_j - A_c x_{j-1} <= d_c, tagged with j.
  void constraint(int j, const ConstraintSet& c);

  const std::vector<int>& constraint_targets() const { return targets_; }
  qp::Problem build() const;

 private:
  const DescriptorSystem& sys_;
  qp::Layout layout_;
  std::vector<int> labels_;
  std::vector<qp::QuadraticTerm> terms_;
  std::vector<qp::LinearRows> ineqs_;
  std::vector<int> targets_;
};

/// Terms of the FIE/MHE problem on states x_f..x_T: arrival cost at f,
/// measurements f..T, dynamics f..T-1, constraints on targets f+1..T.
void add_sliding_window(StageBuilder& b, FilterHistory& hist, const ConstraintSet& c, int f, int T);

struct StepRecord {
  int T = 0;
  int exit = 0;  // f = T - N (1 during warm-up)
  Vector x_filtered;
  Vector x_exit;
  double objective = 0;
  int variables = 0;
  int inequality_rows = 0;
  int qp_iterations = 0;
  qp::KktResiduals residuals;
  double wall_ms = 0;
  std::vector<int> active;  // rows of the exit check, empty when none
  std::vector<int> constraint_targets;
  std::vector<std::pair<int, int>> windows;  // [a_s, b_s]
  std::vector<std::string> events;
  int hypothesis_violations = 0;
};

struct EstimateSeries {
  std::string method;
  int N = 0;
  int N_FC = 0;
  std::vector<StepRecord> steps;  // steps[T - 1]

  double total_ms() const;
  const StepRecord& at(int T) const { return steps.at(static_cast<std::size_t>(T - 1)); }
};

struct RunOptions {
  qp::Settings qp;
  double eps_act = 1e-6;
  double divergence_bound = 1e12;  // on ||x_hat||_inf
  bool check_hypothesis = false;
};

/// Full information estimate at time T.
StepRecord fie_solve(const SystemSpec& spec, const EstimationData& data, int T,
                     const RunOptions& opts = {});
StepRecord fie_solve(const SystemSpec& spec, FilterHistory& hist, int T, const RunOptions& opts = {});
EstimateSeries fie_run(const SystemSpec& spec, const EstimationData& data, int T_final,
                       const RunOptions& opts = {});

/// FIE up to T = N, then N-stage windows with the Kalman arrival cost.
EstimateSeries mhe_run(const SystemSpec& spec, const EstimationData& data, int N, int T_final,
                       const RunOptions& opts = {});

/// Descriptor Kalman filter means as a series (no QP).
EstimateSeries kf_run(const SystemSpec& spec, const EstimationData& data, int T_final);

enum class EvictionRule { text, flowchart };

EvictionRule parse_eviction_rule(const std::string& s);
std::string to_string(EvictionRule r);

struct FixedWindow {
  enum class Status { growing, detached, vanishing };
  int s = 0;
  int a = 0;
  int b = 0;
  Status status = Status::growing;
};

/// Eliminated states first..last between two fixed windows (or between the
/// newest window and the sliding window). `prop` spans the smoother chain
/// first..last-1, so prop.q == c == last - first + 1 once c >= 1.
struct UnconstrainedWindow {
  int s = 0;
  int first = 0;
  int last = 0;
  Propagator prop;

  int count() const { return last - first + 1; }
};

class WindowLedger {
 public:
  WindowLedger(int N, int N_FC, EvictionRule rule) : N_(N), N_FC_(N_FC), rule_(rule) {}

  int N() const { return N_; }
  int N_FC() const { return N_FC_; }
  EvictionRule rule() const { return rule_; }
  bool empty() const { return fixed_.empty(); }
  bool new_window_flag() const { return flag_; }
  const std::vector<FixedWindow>& fixed() const { return fixed_; }
  const std::vector<UnconstrainedWindow>& gaps() const { return gaps_; }

  /// Drops windows past the maximum lag before the solve at time T.
  std::vector<std::string> evict(int T);
  /// Extends the newest gap so it ends at f - 1.
  void sync(FilterHistory& hist, int f);
  /// Adds FC/UC terms for every live window.
  void add_terms(StageBuilder& b, FilterHistory& hist, const ConstraintSet& c) const;
  /// Flowchart update after the active-set check at exit time f.
  std::string update(bool active, int f);
  void check_invariants(int f) const;
  std::vector<std::pair<int, int>> spans() const;

 private:
  int N_, N_FC_;
  EvictionRule rule_;
  bool flag_ = true;
  int next_s_ = 0;
  std::vector<FixedWindow> fixed_;
  std::vector<UnconstrainedWindow> gaps_;  // gaps_[i] follows fixed_[i]
};

/// Fixed-cost terms sum_{k=a}^{b} ||x_k - x_sm_k(x_{k+1})||_{Gamma_k}.
void build_fixed_cost(StageBuilder& b, FilterHistory& hist, const FixedWindow& w);
/// Marginal of an eliminated stretch plus the terminal smoother term that
/// couples x_last to x_{last+1}.
void build_unconstrained_cost(StageBuilder& b, FilterHistory& hist, const UnconstrainedWindow& g);

/// States first+1..last-1 of a stretch, recovered from its end points.
std::vector<Vector> recover_gap(FilterHistory& hist, const UnconstrainedWindow& g,
                                const Vector& x_first, const Vector& x_last);

/// Rows of d_c + A_c x_sm_{f-1}(x_f) - E_c x_f at or below eps (1 + |d|).
std::vector<int> exit_active_set(FilterHistory& hist, const ConstraintSet& c, int f,
                                 const Vector& x_f, double eps_act);

StepRecord mwmhe_step(const SystemSpec& spec, WindowLedger& ledger, FilterHistory& hist, int T,
                      const RunOptions& opts = {});

struct MwConfig {
  int N = 1;
  std::optional<int> N_FC;
  std::optional<double> U;  // used when N_FC is absent
  int max_lag = 1000;
  EvictionRule rule = EvictionRule::text;
};

EstimateSeries mwmhe_run(const SystemSpec& spec, const EstimationData& data, const MwConfig& cfg,
                         int T_final, const RunOptions& opts = {});

/// One JSON object per step.
nlohmann::json ledger_trace(const StepRecord& r);

}  // namespace mwmhe::est
