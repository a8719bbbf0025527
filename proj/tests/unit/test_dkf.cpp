#include <doctest.h>

#include "../oracles.hpp"
#include "mwmhe/dkf.hpp"

using namespace mwmhe;

namespace {

DescriptorSystem scalar(double a, double h = 1, double q = 1, double r = 1) {
  DescriptorSystem s;
  s.E = Matrix::Ones(1, 1);
  s.A = Matrix::Constant(1, 1, a);
  s.B = Matrix::Zero(1, 0);
  s.H = Matrix::Constant(1, 1, h);
  s.Q = Matrix::Constant(1, 1, q);
  s.R = Matrix::Constant(1, 1, r);
  return s;
}

DescriptorSystem identity(int n) {
  DescriptorSystem s;
  s.E = s.A = s.H = s.Q = s.R = Matrix::Identity(n, n);
  s.B = Matrix::Zero(n, 0);
  return s;
}

}  // namespace

TEST_CASE("time_update") {
  const auto s = identity(2);
  CHECK(dkf::time_update<double>(s, Matrix::Identity(2, 2)).isApprox(2 * Matrix::Identity(2, 2)));
  auto z = s;
  z.A.setZero();
  CHECK(dkf::time_update<double>(z, 3 * Matrix::Identity(2, 2)) == Matrix::Identity(2, 2));
}

TEST_CASE("measurement_update on identity matrices") {
  const auto s = identity(2);
  const Vector x0 = Vector::Zero(2), y = Vector::Ones(2);
  const auto [x, P] = dkf::measurement_update<double>(s, x0, 2 * Matrix::Identity(2, 2),
                                                      Vector::Zero(0), y);
  CHECK(P.isApprox((2.0 / 3.0) * Matrix::Identity(2, 2)));
  CHECK(x.isApprox((2.0 / 3.0) * Vector::Ones(2)));
}

TEST_CASE("measurement_update against dense formulas") {
  oracle::Rng rng(8);
  for (int i = 0; i < 20; ++i) {
    const auto s = oracle::random_descriptor(rng, 4);
    const Vector xp = rng.vector(4), u = rng.vector(1), y = rng.vector(s.m());
    const Matrix Pm = rng.spd(s.n1());
    const auto [x, P] = dkf::measurement_update<double>(s, xp, Pm, u, y);
    const Matrix Pmi = Pm.inverse(), Ri = s.R.inverse();
    const Matrix Pref = (s.E.transpose() * Pmi * s.E + s.H.transpose() * Ri * s.H).inverse();
    const Vector xref = Pref * (s.E.transpose() * Pmi * (s.A * xp + s.B * u) + s.H.transpose() * Ri * y);
    CHECK((P - Pref).norm() <= 1e-9 * (1 + Pref.norm()));
    CHECK((x - xref).norm() <= 1e-9 * (1 + xref.norm()));
  }
}

TEST_CASE("smoother_params") {
  const auto s = identity(2);
  const auto st = dkf::smoother_params<double>(s, Vector::Ones(2), Matrix::Identity(2, 2),
                                               Vector::Zero(0));
  CHECK(st.gamma.isApprox(0.5 * Matrix::Identity(2, 2)));
  CHECK(st.map.gain.isApprox(0.5 * Matrix::Identity(2, 2)));
  CHECK(st.map.offset.isApprox(0.5 * Vector::Ones(2)));

  auto z = s;
  z.A.setZero();
  const Matrix P = 3 * Matrix::Identity(2, 2);
  const auto sz = dkf::smoother_params<double>(z, Vector::Ones(2), P, Vector::Zero(0));
  CHECK(sz.gamma.isApprox(P));
  CHECK(sz.map.gain.isZero());
  CHECK(sz.map.offset.isApprox(Vector::Ones(2)));
}

TEST_CASE("riccati steady state") {
  SUBCASE("no dynamics") {
    const auto r = dkf::riccati_steady_state<double>(scalar(0));
    CHECK(r.P_post(0, 0) == doctest::Approx(0.5));
    CHECK(r.gamma(0, 0) == doctest::Approx(0.5));
  }
  SUBCASE("scalar root") {
    // P = (1/(P + 1) + 1)^{-1}  =>  P^2 + P - 1 = 0.
    const auto r = dkf::riccati_steady_state<double>(scalar(1));
    CHECK(r.P_post(0, 0) == doctest::Approx((std::sqrt(5.0) - 1) / 2).epsilon(1e-9));
    CHECK(r.fixed_point_residual <= 1e-9);
  }
  SUBCASE("undetectable unstable mode") {
    CHECK_THROWS_AS(dkf::riccati_steady_state<double>(scalar(2, 0)), DivergenceError);
  }
}

TEST_CASE("propagator") {
  SUBCASE("no dynamics") {
    auto s = identity(2);
    s.A.setZero();
    auto p = dkf::Propagator<double>::start(2);
    p = dkf::propagator_advance<double>(s, p, Vector::Ones(2), Matrix::Identity(2, 2),
                                        Vector::Zero(0));
    CHECK(p.q == 2);
    CHECK(p.M.isZero());
    CHECK(p.offset.isApprox(Vector::Ones(2)));
    CHECK(p.weight.isApprox(Matrix::Identity(2, 2)));
  }
  SUBCASE("scalar power") {
    const auto s = scalar(0.5);
    const auto ss = dkf::riccati_steady_state<double>(s);
    const double g = ss.gamma(0, 0) * 0.5;
    auto p = dkf::Propagator<double>::start(1);
    for (int q = 2; q <= 6; ++q) {
      p = dkf::propagator_advance<double>(s, p, Vector::Zero(1), ss.P_post, Vector::Zero(0));
      CHECK(p.M(0, 0) == doctest::Approx(std::pow(g, q - 1)));
    }
  }
  SUBCASE("decays on a stable system") {
    DescriptorSystem s = identity(3);
    s.A << 0.5, 0.2, 0, 0, 0.4, 0.1, 0, 0, 0.3;
    s.H = Matrix::Identity(1, 3);
    s.R = Matrix::Identity(1, 1);
    const auto ss = dkf::riccati_steady_state<double>(s);
    auto p = dkf::Propagator<double>::start(3);
    for (int q = 2; q <= 50; ++q) {
      p = dkf::propagator_advance<double>(s, p, Vector::Zero(3), ss.P_post, Vector::Zero(0));
    }
    CHECK(p.M.norm() <= 1e-6);
  }
  SUBCASE("weight matches the chain") {
    oracle::Rng rng(4);
    const auto s = oracle::random_state_space(rng, 3);
    auto p = dkf::Propagator<double>::start(3);
    Matrix W = Matrix::Zero(3, 3), M = Matrix::Identity(3, 3);
    for (int i = 0; i < 5; ++i) {
      const Matrix P = rng.spd(3);
      const auto st = dkf::smoother_params<double>(s, Vector::Zero(3), P, Vector::Zero(s.q()));
      W += M * st.gamma * M.transpose();
      M = M * st.map.gain;
      p = dkf::propagator_advance(p, st);
    }
    CHECK((p.M - M).norm() <= 1e-12 * (1 + M.norm()));
    CHECK((p.weight - W).norm() <= 1e-12 * (1 + W.norm()));
  }
}

TEST_CASE("coupling_norm") {
  CHECK(dkf::coupling_norm<double>(Matrix::Identity(2, 2), Matrix::Zero(2, 2)) == 0);
  CHECK(dkf::coupling_norm<double>(0.5 * Matrix::Identity(2, 2), Matrix::Identity(2, 2)) ==
        doctest::Approx(2));
  Matrix M = Matrix::Zero(2, 2);
  M(0, 1) = 3;
  CHECK(dkf::coupling_norm<double>(Matrix::Identity(2, 2), M) == doctest::Approx(3));
}

TEST_CASE("select_horizon") {
  CHECK_THROWS_AS(dkf::select_horizon<double>(scalar(0.5), 0.0, 10), HorizonSelectionError);

  const auto s = scalar(0.5);
  const auto ss = dkf::riccati_steady_state<double>(s);
  const double gamma = ss.gamma(0, 0), g = gamma * 0.5;
  const double bound = 1e-3;
  int expected = 1;
  while (std::pow(g, expected) / gamma > bound) ++expected;
  const auto sel = dkf::select_horizon<double>(s, bound, 100);
  CHECK(sel.lag == expected);
  CHECK(sel.norm <= bound);

  try {
    dkf::select_horizon<double>(s, 1e-30, 3);
    FAIL("no error");
  } catch (const HorizonSelectionError& e) {
    CHECK(e.achieved_norm() == doctest::Approx(std::pow(g, 3) / gamma));
  }
}

TEST_CASE("long double instantiation") {
  BasicDescriptorSystem<long double> s;
  s.E = s.A = s.H = s.Q = s.R = MatrixX<long double>::Identity(1, 1);
  s.B = MatrixX<long double>::Zero(1, 0);
  const auto r = dkf::riccati_steady_state<long double>(s);
  CHECK(static_cast<double>(r.P_post(0, 0)) == doctest::Approx((std::sqrt(5.0) - 1) / 2));
}
