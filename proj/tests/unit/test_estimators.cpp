#include <doctest.h>

#include <nlohmann/json.hpp>

#include "../fixtures.hpp"
#include "../oracles.hpp"
#include "mwmhe/estimators.hpp"

using namespace mwmhe;

namespace {

SystemSpec scalar_spec(std::optional<double> upper = {}) {
  SystemSpec s;
  s.sys.E = s.sys.A = s.sys.H = s.sys.Q = s.sys.R = Matrix::Ones(1, 1);
  s.sys.B = Matrix::Zero(1, 0);
  if (upper) s.constraints = {Matrix::Ones(1, 1), Matrix::Zero(1, 1), Vector::Constant(1, *upper)};
  s.prior = {Vector::Zero(1), Matrix::Ones(1, 1)};
  return s;
}

est::EstimationData constant_data(int T, double y, Eigen::Index q = 0) {
  est::EstimationData d;
  d.y.emplace_back();
  for (int k = 0; k < T; ++k) {
    d.u.push_back(Vector::Zero(q));
    d.y.push_back(Vector::Constant(1, y));
  }
  return d;
}

double max_gap(const est::EstimateSeries& a, const est::EstimateSeries& b) {
  double g = 0;
  for (std::size_t i = 0; i < a.steps.size(); ++i) {
    g = std::max(g, (a.steps[i].x_filtered - b.steps[i].x_filtered).lpNorm<Eigen::Infinity>());
  }
  return g;
}

}  // namespace

TEST_CASE("eviction rule names") {
  CHECK(est::parse_eviction_rule("text") == est::EvictionRule::text);
  CHECK(est::parse_eviction_rule("flowchart") == est::EvictionRule::flowchart);
  CHECK(est::to_string(est::EvictionRule::flowchart) == "flowchart");
  CHECK_THROWS_AS(est::parse_eviction_rule("never"), ValidationError);
}

TEST_CASE("arrival cost") {
  DescriptorSystem s;
  s.E = s.A = s.H = s.Q = s.R = Matrix::Identity(2, 2);
  s.B = Matrix::Zero(2, 0);
  est::FilterState st{0, Vector::Ones(2), Matrix::Identity(2, 2), 2 * Matrix::Identity(2, 2)};
  const auto cost = est::arrival_cost(s, st, Vector::Zero(0));
  CHECK(cost.z == Vector::Ones(2));
  CHECK(cost(s, Vector::Ones(2)) == doctest::Approx(0));
  CHECK(cost(s, Vector::Ones(2) + Vector::Unit(2, 0)) == doctest::Approx(0.5));
}

TEST_CASE("fie at T = 1 is one measurement update") {
  oracle::Rng rng(17);
  for (int i = 0; i < 5; ++i) {
    SystemSpec spec;
    spec.sys = oracle::random_descriptor(rng, 3);
    spec.prior = {rng.vector(3), rng.spd(3)};
    const auto d = oracle::random_data(rng, spec.sys, 2);
    const auto r = est::fie_solve(spec, d, 1);
    const Matrix Pm = dkf::time_update<double>(spec.sys, spec.prior.P0);
    const auto [x, P] = dkf::measurement_update<double>(spec.sys, spec.prior.x0, Pm, d.u[0], d.y[1]);
    CHECK((r.x_filtered - x).norm() <= 1e-7 * (1 + x.norm()));
  }
}

TEST_CASE("fie clips a scalar at its bound") {
  const auto spec = scalar_spec(0.5);
  const auto d = constant_data(4, 10);
  const auto s = est::fie_run(spec, d, 4);
  // No constraint applies to the first state of the problem.
  CHECK(s.at(1).x_filtered(0) > 1);
  for (int T = 2; T <= 4; ++T) CHECK(s.at(T).x_filtered(0) == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("mhe with a full horizon is fie") {
  const auto spec = fixture::reference_system(0.6);
  const auto run = fixture::reference_run(spec, 25, 1, std::sqrt(0.1), 3, fixture::reference_profile(0.6));
  const auto fie = est::fie_run(spec, run.data, 25);
  const auto mhe = est::mhe_run(spec, run.data, 25, 25);
  CHECK(max_gap(fie, mhe) <= 1e-6);
}

TEST_CASE("unconstrained mhe is the filter") {
  auto spec = fixture::reference_system();
  spec.constraints = {};
  const auto run = fixture::reference_run(spec, 40, 1, std::sqrt(0.1), 5, fixture::reference_profile());
  const auto kf = est::kf_run(spec, run.data, 40);
  for (int N : {1, 4}) CHECK(max_gap(kf, est::mhe_run(spec, run.data, N, 40)) <= 1e-7);
}

TEST_CASE("fixed cost vanishes on the smoothed trajectory") {
  oracle::Rng rng(23);
  SystemSpec spec;
  spec.sys = oracle::random_state_space(rng, 3);
  spec.prior = {Vector::Zero(3), Matrix::Identity(3, 3)};
  const auto d = oracle::random_data(rng, spec.sys, 12);
  est::FilterHistory hist(spec.sys, spec.prior, d);
  est::FixedWindow w;
  w.a = 3;
  w.b = 8;
  std::vector<Vector> x(10);
  x[9] = rng.vector(3);
  for (int k = 8; k >= 3; --k) x[k] = hist.smoother(k).map(x[k + 1]);
  est::StageBuilder b(spec.sys);
  est::build_fixed_cost(b, hist, w);
  const auto p = b.build();
  Vector z(p.dim());
  for (int k = 3; k <= 9; ++k) z.segment(p.layout().offset(p.layout().find(k)), 3) = x[k];
  CHECK(p.objective(z) <= 1e-20);
  z(0) += 1;
  CHECK(p.objective(z) > 1e-3);
}

TEST_CASE("ledger episode") {
  est::WindowLedger L(2, 3, est::EvictionRule::text);
  CHECK(L.update(false, 4).empty());
  CHECK(L.update(true, 5) == "form 0 at 5");
  CHECK(L.update(true, 6) == "grow 0 to 6");
  CHECK(L.update(false, 7) == "detach 0");
  CHECK(L.update(false, 8) == "extend gap 0");
  CHECK(L.fixed().front().status == est::FixedWindow::Status::detached);
  CHECK(L.evict(11).empty());
  CHECK(L.fixed().front().status == est::FixedWindow::Status::detached);
  CHECK(L.evict(12).empty());
  CHECK(L.fixed().front().status == est::FixedWindow::Status::vanishing);
  CHECK(L.evict(13) == std::vector<std::string>{"evict 0 [5,6]"});
  CHECK(L.empty());
  CHECK(L.update(true, 11) == "form 1 at 11");
  CHECK_THROWS_AS(L.update(true, 13), est::LedgerError);

  est::WindowLedger F(2, 3, est::EvictionRule::flowchart);
  F.update(true, 5);
  CHECK(F.evict(9).empty());
  CHECK(F.evict(10).size() == 1);
}

TEST_CASE("mw-mhe windows on the reference system") {
  const auto spec = fixture::reference_system(0.6);
  const auto run = fixture::reference_run(spec, 120, 1, std::sqrt(0.1), 11, fixture::reference_profile(0.6));
  est::MwConfig cfg;
  cfg.N = 3;
  cfg.N_FC = 4;
  est::RunOptions opts;
  opts.check_hypothesis = true;
  const auto s = est::mwmhe_run(spec, run.data, cfg, 120, opts);
  int formed = 0;
  for (const auto& r : s.steps) {
    for (const auto& e : r.events) formed += e.rfind("form", 0) == 0;
    for (const auto& [a, b] : r.windows) {
      CHECK(a <= b);
      CHECK(b < r.exit);
      CHECK(r.T <= b + cfg.N + 4 + 1);
    }
    CHECK(r.residuals.max() <= 1e-7);
    const auto trace = est::ledger_trace(r);
    CHECK(trace["T"] == r.T);
    CHECK(trace["window_count"] == r.windows.size());
  }
  CHECK(formed > 0);
}

TEST_CASE("mw-mhe corner cases") {
  const auto spec = fixture::reference_system(0.6);
  const auto run = fixture::reference_run(spec, 60, 1, std::sqrt(0.1), 2, fixture::reference_profile(0.6));
  est::MwConfig cfg;
  cfg.N = 2;
  cfg.N_FC = 0;
  const auto s = est::mwmhe_run(spec, run.data, cfg, 60);
  CHECK(s.steps.size() == 60);

  cfg.N = 8;
  const auto warm = est::mwmhe_run(spec, run.data, cfg, 8);
  CHECK(max_gap(warm, est::fie_run(spec, run.data, 8)) <= 1e-7);

  cfg.N = 0;
  CHECK_THROWS_AS(est::mwmhe_run(spec, run.data, cfg, 8), ValidationError);
  cfg.N = 2;
  cfg.N_FC.reset();
  CHECK_THROWS_AS(est::mwmhe_run(spec, run.data, cfg, 8), ValidationError);
}

TEST_CASE("coupling bound picks the lag") {
  const auto spec = fixture::reference_system(0.6);
  const auto run = fixture::reference_run(spec, 20, 1, std::sqrt(0.1), 2, fixture::reference_profile(0.6));
  est::MwConfig cfg;
  cfg.N = 2;
  cfg.U = 1e-2;
  const auto s = est::mwmhe_run(spec, run.data, cfg, 20);
  CHECK(s.N_FC == dkf::select_horizon<double>(spec.sys, 1e-2, 1000).lag);
}
