#include "mwmhe/estimators.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <set>

namespace mwmhe::est {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

Vector block_of(const qp::Problem& p, const Vector& z, int k) {
  const int idx = p.layout().find(k);
  if (idx < 0) throw LedgerError("state x_" + std::to_string(k) + " is not in the problem");
  return z.segment(p.layout().offset(idx), p.layout().size(idx));
}

void guard(const Vector& x, int T, double bound) {
  if (!x.allFinite() || x.lpNorm<Eigen::Infinity>() > bound) {
    throw DivergenceError("estimate norm exceeded " + std::to_string(bound) + " at T=" +
                              std::to_string(T),
                          T);
  }
}

/// Solves, fills the shared record fields and the exit/terminal blocks.
StepRecord solve_stage(const StageBuilder& b, int f, int T, const RunOptions& opts) {
  const qp::Problem p = b.build();
  const qp::Solution sol = qp::solve(p, opts.qp);
  StepRecord r;
  r.T = T;
  r.exit = f;
  r.x_filtered = block_of(p, sol.z, T);
  r.x_exit = block_of(p, sol.z, f);
  r.objective = sol.objective;
  r.variables = static_cast<int>(p.dim());
  r.inequality_rows = static_cast<int>(p.inequality_rows());
  r.qp_iterations = sol.iterations;
  r.residuals = sol.residuals;
  r.constraint_targets = b.constraint_targets();
  guard(r.x_filtered, T, opts.divergence_bound);
  return r;
}

}  // namespace

EstimationData EstimationData::from(const DescriptorSystem& sys, const Trajectory& traj,
                                    const MeasurementRecord& meas) {
  EstimationData d;
  d.y = meas.y_;
  const int T = meas.horizon();
  for (int k = 0; k < T; ++k) {
    d.u.push_back(k < static_cast<int>(traj.u.size()) ? traj.u[static_cast<std::size_t>(k)]
                                                      : Vector::Zero(sys.q()));
  }
  return d;
}

double ArrivalCost::operator()(const DescriptorSystem& sys, const Vector& x) const {
  return weighted_sq_norm<double>(Vector(sys.E * x - z), weight);
}

ArrivalCost arrival_cost(const DescriptorSystem& sys, const FilterState& state, const Vector& u) {
  return {sys.A * state.x_post + sys.B * u, state.P_prior};
}

FilterHistory::FilterHistory(DescriptorSystem sys, const Prior& prior, const EstimationData& data)
    : sys_(std::move(sys)), data_(&data) {
  sys_.check_dimensions();
  states_.push_back(dkf::initial_state<double>(sys_, prior.x0, prior.P0));
}

const FilterState& FilterHistory::state(int k) {
  if (k < 0 || k > data_->horizon()) {
    throw LedgerError("filter state requested outside 0.." + std::to_string(data_->horizon()) +
                      ": " + std::to_string(k));
  }
  while (static_cast<int>(states_.size()) <= k) {
    const int next = static_cast<int>(states_.size());
    states_.push_back(
        dkf::filter_step<double>(sys_, states_.back(), data_->input(next - 1), data_->measurement(next)));
  }
  return states_[static_cast<std::size_t>(k)];
}

const SmootherStep& FilterHistory::smoother(int k) {
  if (k < 0 || k >= static_cast<int>(data_->u.size())) {
    throw LedgerError("smoother step requested without stored input: " + std::to_string(k));
  }
  if (static_cast<int>(smoothers_.size()) <= k) smoothers_.resize(static_cast<std::size_t>(k) + 1);
  auto& slot = smoothers_[static_cast<std::size_t>(k)];
  if (!slot) {
    const auto& s = state(k);
    slot = dkf::smoother_params<double>(sys_, s.x_post, s.P_post, data_->input(k));
  }
  return *slot;
}

ArrivalCost FilterHistory::arrival(int f) {
  return arrival_cost(sys_, state(f - 1), data_->input(f - 1));
}

void FilterHistory::release_before(int k) {
  const auto end = std::min<std::size_t>(smoothers_.size(), static_cast<std::size_t>(std::max(k, 0)));
  for (std::size_t i = 0; i < end; ++i) smoothers_[i].reset();
}

int StageBuilder::state(int k) {
  auto it = std::lower_bound(labels_.begin(), labels_.end(), k);
  if (it != labels_.end() && *it == k) return static_cast<int>(it - labels_.begin());
  if (it != labels_.end()) {
    throw LedgerError("state x_" + std::to_string(k) + " registered after x_" +
                      std::to_string(labels_.back()));
  }
  labels_.push_back(k);
  return layout_.add_block(k, sys_.n());
}

bool StageBuilder::has_state(int k) const {
  return std::binary_search(labels_.begin(), labels_.end(), k);
}

void StageBuilder::arrival(int f, const ArrivalCost& cost) {
  terms_.push_back({{{state(f), sys_.E}}, cost.z, cost.weight});
}

void StageBuilder::measurement(int k, const Vector& y) {
  if (sys_.m() == 0) return;
  terms_.push_back({{{state(k), sys_.H}}, y, sys_.R});
}

void StageBuilder::dynamics(int k, const Vector& u) {
  const int from = state(k);
  const int to = state(k + 1);
  terms_.push_back({{{from, Matrix(-sys_.A)}, {to, sys_.E}}, sys_.B * u, sys_.Q});
}

void StageBuilder::smoother(int k, const SmootherStep& step) {
  const int from = state(k);
  const int to = state(k + 1);
  const Eigen::Index n = sys_.n();
  terms_.push_back(
      {{{from, Matrix::Identity(n, n)}, {to, Matrix(-step.map.gain)}}, step.map.offset, step.gamma});
}

void StageBuilder::marginal(int from, int to, const Propagator& prop) {
  const int a = state(from);
  const int b = state(to);
  const Eigen::Index n = sys_.n();
  terms_.push_back({{{a, Matrix::Identity(n, n)}, {b, Matrix(-prop.M)}}, prop.offset, prop.weight});
}

void StageBuilder::constraint(int j, const ConstraintSet& c) {
  if (c.empty()) return;
  std::vector<qp::BlockEntry> entries;
  if (!c.Ac.isZero(0.0)) entries.push_back({state(j - 1), Matrix(-c.Ac)});
  entries.push_back({state(j), c.Ec});
  ineqs_.push_back({std::move(entries), c.dc, j});
  targets_.push_back(j);
}

qp::Problem StageBuilder::build() const { return qp::assemble(layout_, terms_, {}, ineqs_); }

void add_sliding_window(StageBuilder& b, FilterHistory& hist, const ConstraintSet& c, int f, int T) {
  const auto& data = hist.data();
  for (int k = f; k <= T; ++k) b.state(k);
  b.arrival(f, hist.arrival(f));
  for (int k = f; k <= T; ++k) b.measurement(k, data.measurement(k));
  for (int k = f; k < T; ++k) b.dynamics(k, data.input(k));
  for (int j = f + 1; j <= T; ++j) b.constraint(j, c);
}

double EstimateSeries::total_ms() const {
  double t = 0;
  for (const auto& s : steps) t += s.wall_ms;
  return t;
}

StepRecord fie_solve(const SystemSpec& spec, FilterHistory& hist, int T, const RunOptions& opts) {
  if (T < 1) throw ValidationError("FIE needs T >= 1");
  const auto t0 = Clock::now();
  StageBuilder b(spec.sys);
  add_sliding_window(b, hist, spec.constraints, 1, T);
  StepRecord r = solve_stage(b, 1, T, opts);
  r.wall_ms = elapsed_ms(t0);
  return r;
}

StepRecord fie_solve(const SystemSpec& spec, const EstimationData& data, int T,
                     const RunOptions& opts) {
  FilterHistory hist(spec.sys, spec.prior, data);
  return fie_solve(spec, hist, T, opts);
}

EstimateSeries fie_run(const SystemSpec& spec, const EstimationData& data, int T_final,
                       const RunOptions& opts) {
  EstimateSeries out;
  out.method = "fie";
  out.N = T_final;
  FilterHistory hist(spec.sys, spec.prior, data);
  for (int T = 1; T <= T_final; ++T) out.steps.push_back(fie_solve(spec, hist, T, opts));
  return out;
}

EstimateSeries mhe_run(const SystemSpec& spec, const EstimationData& data, int N, int T_final,
                       const RunOptions& opts) {
  if (N < 1) throw ValidationError("MHE horizon N must be at least 1");
  EstimateSeries out;
  out.method = "mhe";
  out.N = N;
  FilterHistory hist(spec.sys, spec.prior, data);
  for (int T = 1; T <= T_final; ++T) {
    const auto t0 = Clock::now();
    const int f = std::max(1, T - N);
    StageBuilder b(spec.sys);
    add_sliding_window(b, hist, spec.constraints, f, T);
    StepRecord r = solve_stage(b, f, T, opts);
    if (T > N) r.active = exit_active_set(hist, spec.constraints, f, r.x_exit, opts.eps_act);
    hist.release_before(f - 1);
    r.wall_ms = elapsed_ms(t0);
    out.steps.push_back(std::move(r));
  }
  return out;
}

EstimateSeries kf_run(const SystemSpec& spec, const EstimationData& data, int T_final) {
  EstimateSeries out;
  out.method = "kf";
  FilterHistory hist(spec.sys, spec.prior, data);
  for (int T = 1; T <= T_final; ++T) {
    const auto t0 = Clock::now();
    StepRecord r;
    r.T = T;
    r.exit = T;
    r.x_filtered = hist.state(T).x_post;
    r.x_exit = r.x_filtered;
    r.wall_ms = elapsed_ms(t0);
    out.steps.push_back(std::move(r));
  }
  return out;
}

EvictionRule parse_eviction_rule(const std::string& s) {
  if (s == "text") return EvictionRule::text;
  if (s == "flowchart") return EvictionRule::flowchart;
  throw ValidationError("eviction rule must be 'text' or 'flowchart', got '" + s + "'");
}

std::string to_string(EvictionRule r) { return r == EvictionRule::text ? "text" : "flowchart"; }

std::vector<std::string> WindowLedger::evict(int T) {
  auto expired = [&](const FixedWindow& w, int t) {
    const int lag = rule_ == EvictionRule::text ? N_ + N_FC_ + 1 : N_FC_ + 1;
    return t > w.b + lag;
  };
  std::vector<std::string> events;
  while (!fixed_.empty() && expired(fixed_.front(), T)) {
    const FixedWindow w = fixed_.front();
    if (fixed_.size() == 1 && !flag_) flag_ = true;
    fixed_.erase(fixed_.begin());
    gaps_.erase(gaps_.begin());
    events.push_back("evict " + std::to_string(w.s) + " [" + std::to_string(w.a) + "," +
                     std::to_string(w.b) + "]");
  }
  for (auto& w : fixed_) {
    if (w.status == FixedWindow::Status::detached && expired(w, T + 1)) {
      w.status = FixedWindow::Status::vanishing;
    }
  }
  return events;
}

void WindowLedger::sync(FilterHistory& hist, int f) {
  if (gaps_.empty()) return;
  auto& g = gaps_.back();
  if (g.count() <= 0 && f - 1 >= g.first) {
    g.last = g.first;
    g.prop = Propagator::start(hist.system().n());
  }
  while (g.last < f - 1) {
    g.prop = dkf::propagator_advance(g.prop, hist.smoother(g.last));
    ++g.last;
  }
}

void build_fixed_cost(StageBuilder& b, FilterHistory& hist, const FixedWindow& w) {
  for (int k = w.a; k <= w.b; ++k) b.smoother(k, hist.smoother(k));
}

void build_unconstrained_cost(StageBuilder& b, FilterHistory& hist, const UnconstrainedWindow& g) {
  if (g.count() < 1) return;
  if (g.prop.q != g.count()) {
    throw LedgerError("propagator of gap [" + std::to_string(g.first) + "," +
                      std::to_string(g.last) + "] covers " + std::to_string(g.prop.q) + " states");
  }
  if (g.count() >= 2) b.marginal(g.first, g.last, g.prop);
  b.smoother(g.last, hist.smoother(g.last));
}

void WindowLedger::add_terms(StageBuilder& b, FilterHistory& hist, const ConstraintSet& c) const {
  if (fixed_.empty()) return;
  const int a0 = fixed_.front().a;
  b.smoother(a0 - 1, hist.smoother(a0 - 1));
  for (std::size_t i = 0; i < fixed_.size(); ++i) {
    build_fixed_cost(b, hist, fixed_[i]);
    for (int j = fixed_[i].a; j <= fixed_[i].b; ++j) b.constraint(j, c);
    build_unconstrained_cost(b, hist, gaps_[i]);
  }
}

std::string WindowLedger::update(bool active, int f) {
  if (active) {
    if (flag_) {
      FixedWindow w;
      w.s = next_s_++;
      w.a = w.b = f;
      fixed_.push_back(w);
      UnconstrainedWindow g;
      g.s = w.s;
      g.first = f + 1;
      g.last = f;
      gaps_.push_back(g);
      flag_ = false;
      return "form " + std::to_string(w.s) + " at " + std::to_string(f);
    }
    auto& w = fixed_.back();
    if (w.b != f - 1) {
      throw LedgerError("growing window " + std::to_string(w.s) + " ends at " +
                        std::to_string(w.b) + ", exit is " + std::to_string(f));
    }
    w.b = f;
    auto& g = gaps_.back();
    g.first = f + 1;
    g.last = f;
    g.prop = {};
    return "grow " + std::to_string(w.s) + " to " + std::to_string(f);
  }
  if (fixed_.empty()) return {};
  if (!flag_) {
    flag_ = true;
    fixed_.back().status = FixedWindow::Status::detached;
    return "detach " + std::to_string(fixed_.back().s);
  }
  return "extend gap " + std::to_string(gaps_.back().s);
}

void WindowLedger::check_invariants(int f) const {
  if (fixed_.size() != gaps_.size()) throw LedgerError("window and gap lists differ in length");
  for (std::size_t i = 0; i < fixed_.size(); ++i) {
    const auto& w = fixed_[i];
    const auto& g = gaps_[i];
    if (w.a > w.b) throw LedgerError("window " + std::to_string(w.s) + " has a > b");
    if (g.first != w.b + 1) throw LedgerError("gap " + std::to_string(g.s) + " detached from its window");
    const int end = i + 1 < fixed_.size() ? fixed_[i + 1].a - 1 : f - 1;
    if (g.last != end) {
      throw LedgerError("gap " + std::to_string(g.s) + " ends at " + std::to_string(g.last) +
                        ", expected " + std::to_string(end));
    }
    if (i + 1 < fixed_.size() && g.count() < 1) {
      throw LedgerError("windows " + std::to_string(w.s) + " and " +
                        std::to_string(fixed_[i + 1].s) + " are not separated");
    }
  }
}

std::vector<std::pair<int, int>> WindowLedger::spans() const {
  std::vector<std::pair<int, int>> out;
  for (const auto& w : fixed_) out.emplace_back(w.a, w.b);
  return out;
}

std::vector<Vector> recover_gap(FilterHistory& hist, const UnconstrainedWindow& g,
                                const Vector& x_first, const Vector& x_last) {
  const int c = g.count();
  if (c <= 2) return {};
  const Vector delta = x_first - g.prop.M * x_last - g.prop.offset;
  const Vector lambda = SpdFactor<double>(g.prop.weight, "marginal weight").solve(delta);

  // e_i = Gamma_i M_i' lambda along the chain first..last-1.
  std::vector<Vector> e;
  Propagator prop = Propagator::start(hist.system().n());
  for (int k = g.first; k < g.last; ++k) {
    const auto& step = hist.smoother(k);
    e.push_back(step.gamma * prop.M.transpose() * lambda);
    prop = dkf::propagator_advance(prop, step);
  }
  std::vector<Vector> states(static_cast<std::size_t>(c - 2));
  Vector next = x_last;
  for (int k = g.last - 1; k > g.first; --k) {
    const auto& step = hist.smoother(k);
    next = step.map(next) + e[static_cast<std::size_t>(k - g.first)];
    states[static_cast<std::size_t>(k - g.first - 1)] = next;
  }
  return states;
}

std::vector<int> exit_active_set(FilterHistory& hist, const ConstraintSet& c, int f,
                                 const Vector& x_f, double eps_act) {
  std::vector<int> out;
  if (c.empty()) return out;
  const Vector x_prev = hist.smoother(f - 1).map(x_f);
  const Vector slack = c.slack(x_prev, x_f);
  for (Eigen::Index l = 0; l < slack.size(); ++l) {
    if (slack(l) <= eps_act * (1.0 + std::abs(c.dc(l)))) out.push_back(static_cast<int>(l));
  }
  return out;
}

namespace {

/// Constraint targets the ledger promises: every [a_s, b_s] plus f+1..T.
std::vector<int> expected_targets(const WindowLedger& ledger, int f, int T) {
  std::vector<int> out;
  for (const auto& w : ledger.fixed()) {
    for (int j = w.a; j <= w.b; ++j) out.push_back(j);
  }
  for (int j = f + 1; j <= T; ++j) out.push_back(j);
  return out;
}

int count_gap_violations(FilterHistory& hist, const ConstraintSet& c, const WindowLedger& ledger,
                         const qp::Problem& p, const Vector& z) {
  int violations = 0;
  for (const auto& g : ledger.gaps()) {
    if (g.count() <= 2) continue;
    const Vector first = block_of(p, z, g.first);
    const Vector last = block_of(p, z, g.last);
    std::vector<Vector> xs{first};
    for (auto& x : recover_gap(hist, g, first, last)) xs.push_back(std::move(x));
    xs.push_back(last);
    for (std::size_t i = 1; i < xs.size(); ++i) {
      if ((c.slack(xs[i - 1], xs[i]).array() < -1e-9).any()) ++violations;
    }
  }
  return violations;
}

}  // namespace

StepRecord mwmhe_step(const SystemSpec& spec, WindowLedger& ledger, FilterHistory& hist, int T,
                      const RunOptions& opts) {
  const int f = T - ledger.N();
  if (f < 1) throw LedgerError("MW-MHE step at T=" + std::to_string(T) + " needs T > N");
  const auto t0 = Clock::now();
  std::vector<std::string> events = ledger.evict(T);
  ledger.sync(hist, f);
  ledger.check_invariants(f);
  const auto windows = ledger.spans();

  StageBuilder b(spec.sys);
  ledger.add_terms(b, hist, spec.constraints);
  add_sliding_window(b, hist, spec.constraints, f, T);
  if (!spec.constraints.empty() && b.constraint_targets() != expected_targets(ledger, f, T)) {
    throw LedgerError("constraint rows in the QP do not match the ledger at T=" +
                      std::to_string(T));
  }

  const qp::Problem p = b.build();
  const qp::Solution sol = qp::solve(p, opts.qp);
  StepRecord r;
  r.T = T;
  r.exit = f;
  r.x_filtered = block_of(p, sol.z, T);
  r.x_exit = block_of(p, sol.z, f);
  r.objective = sol.objective;
  r.variables = static_cast<int>(p.dim());
  r.inequality_rows = static_cast<int>(p.inequality_rows());
  r.qp_iterations = sol.iterations;
  r.residuals = sol.residuals;
  r.constraint_targets = b.constraint_targets();
  r.windows = windows;
  guard(r.x_filtered, T, opts.divergence_bound);
  if (opts.check_hypothesis) {
    r.hypothesis_violations = count_gap_violations(hist, spec.constraints, ledger, p, sol.z);
  }

  r.active = exit_active_set(hist, spec.constraints, f, r.x_exit, opts.eps_act);
  const std::string event = ledger.update(!r.active.empty(), f);
  if (!event.empty()) events.push_back(event);
  r.events = std::move(events);

  const int keep = ledger.empty() ? f - 1 : ledger.fixed().front().a - 1;
  hist.release_before(keep);
  r.wall_ms = elapsed_ms(t0);
  return r;
}

EstimateSeries mwmhe_run(const SystemSpec& spec, const EstimationData& data, const MwConfig& cfg,
                         int T_final, const RunOptions& opts) {
  if (cfg.N < 1) throw ValidationError("MW-MHE horizon N must be at least 1");
  int n_fc = 0;
  if (cfg.N_FC) {
    n_fc = *cfg.N_FC;
  } else if (cfg.U) {
    n_fc = dkf::select_horizon<double>(spec.sys, *cfg.U, cfg.max_lag).lag;
  } else {
    throw ValidationError("MW-MHE needs either N_FC or a coupling bound U");
  }
  if (n_fc < 0) throw ValidationError("N_FC must be non-negative");

  EstimateSeries out;
  out.method = "mwmhe";
  out.N = cfg.N;
  out.N_FC = n_fc;
  FilterHistory hist(spec.sys, spec.prior, data);
  WindowLedger ledger(cfg.N, n_fc, cfg.rule);
  for (int T = 1; T <= T_final; ++T) {
    if (T <= cfg.N) {
      out.steps.push_back(fie_solve(spec, hist, T, opts));
    } else {
      out.steps.push_back(mwmhe_step(spec, ledger, hist, T, opts));
    }
  }
  return out;
}

nlohmann::json ledger_trace(const StepRecord& r) {
  nlohmann::json windows = nlohmann::json::array();
  for (const auto& [a, b] : r.windows) windows.push_back({a, b});
  return {{"T", r.T},
          {"exit", r.exit},
          {"window_count", r.windows.size()},
          {"windows", windows},
          {"variables", r.variables},
          {"inequality_rows", r.inequality_rows},
          {"active", r.active},
          {"events", r.events},
          {"objective", r.objective},
          {"qp_iterations", r.qp_iterations},
          {"hypothesis_violations", r.hypothesis_violations},
          {"wall_ms", r.wall_ms}};
}

}  // namespace mwmhe::est
