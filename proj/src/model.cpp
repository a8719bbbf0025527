#include "mwmhe/model.hpp"

#include <Eigen/QR>

#include <sstream>

namespace mwmhe {

namespace {

std::string shape(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

bool is_spd(const Matrix& m) {
  if (m.rows() != m.cols() || m.rows() == 0) return m.rows() == 0 && m.cols() == 0;
  if ((m - m.transpose()).norm() > 1e-12 * (1.0 + m.norm())) return false;
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(m), Eigen::EigenvaluesOnly);
  const double scale = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  return es.eigenvalues().minCoeff() > double(m.rows()) * scale * 1e-14;
}

const Vector& or_zero(const std::vector<Vector>& series, int k, const Vector& zero) {
  if (series.empty()) return zero;
  return series.at(static_cast<std::size_t>(k));
}

}  // namespace

void ConstraintSet::check_dimensions(Eigen::Index n) const {
  if (Ec.rows() != dc.size() || Ac.rows() != dc.size()) {
    throw DimensionError("constraint row counts differ: Ec " + shape(Ec) + ", Ac " + shape(Ac) +
                         ", dc " + std::to_string(dc.size()));
  }
  if (dc.size() > 0 && (Ec.cols() != n || Ac.cols() != n)) {
    throw DimensionError("constraint matrices must have " + std::to_string(n) + " columns");
  }
}

bool ValidationReport::ok() const {
  for (const auto& c : checks) {
    if (!c.passed) return false;
  }
  return true;
}

ValidationReport validate_system(const DescriptorSystem& sys) {
  sys.check_dimensions();
  ValidationReport report;

  Matrix ea(sys.n1(), 2 * sys.n());
  ea << sys.E, sys.A;
  const auto rank_ea = numerical_rank(ea);
  report.checks.push_back({"[E A] full row rank", rank_ea == sys.n1(), rank_ea, sys.n1()});

  Matrix eh(sys.n1() + sys.m(), sys.n());
  eh << sys.E, sys.H;
  const auto rank_eh = numerical_rank(eh);
  report.checks.push_back({"[E; H] full column rank", rank_eh == sys.n(), rank_eh, sys.n()});

  report.checks.push_back({"Q symmetric positive definite", is_spd(sys.Q),
                           numerical_rank(sys.Q), sys.n1()});
  report.checks.push_back({"R symmetric positive definite", is_spd(sys.R),
                           numerical_rank(sys.R), sys.m()});
  return report;
}

std::pair<Trajectory, MeasurementRecord> simulate(const DescriptorSystem& sys,
                                                  const ConstraintSet& constraints,
                                                  const SimulationInput& input, int T) {
  sys.check_dimensions();
  constraints.check_dimensions(sys.n());
  if (input.x0.size() != sys.n()) {
    throw DimensionError("initial state has length " + std::to_string(input.x0.size()) +
                         ", expected " + std::to_string(sys.n()));
  }
  auto check_series = [T](const std::vector<Vector>& s, Eigen::Index len, const char* name) {
    if (s.empty()) return;
    if (static_cast<int>(s.size()) < T) {
      throw DimensionError(std::string(name) + " has fewer than T entries");
    }
    for (int k = 0; k < T; ++k) {
      if (s[static_cast<std::size_t>(k)].size() != len) {
        throw DimensionError(std::string(name) + " entry " + std::to_string(k) + " has length " +
                             std::to_string(s[static_cast<std::size_t>(k)].size()) +
                             ", expected " + std::to_string(len));
      }
    }
  };
  const Matrix nullspace = null_basis(sys.E);
  check_series(input.inputs, sys.q(), "inputs");
  check_series(input.process_noise, sys.n1(), "process noise");
  check_series(input.measurement_noise, sys.m(), "measurement noise");
  check_series(input.free_series, nullspace.cols(), "free series");

  const Vector zero_u = Vector::Zero(sys.q());
  const Vector zero_w = Vector::Zero(sys.n1());
  const Vector zero_v = Vector::Zero(sys.m());
  const Vector zero_f = Vector::Zero(nullspace.cols());

  Eigen::CompleteOrthogonalDecomposition<Matrix> cod(sys.E);

  Trajectory traj;
  MeasurementRecord meas;
  traj.x.push_back(input.x0);
  meas.y_.emplace_back();
  for (int k = 0; k < T; ++k) {
    const Vector& u = or_zero(input.inputs, k, zero_u);
    const Vector& w = or_zero(input.process_noise, k, zero_w);
    const Vector& v = or_zero(input.measurement_noise, k, zero_v);
    const Vector& f = or_zero(input.free_series, k, zero_f);

    const Vector& xk = traj.x.back();
    const Vector rhs = sys.A * xk + sys.B * u + w;
    Vector next = cod.solve(rhs);
    const double inconsistency = (sys.E * next - rhs).lpNorm<Eigen::Infinity>();
    const double scale = 1.0 + (rhs.size() ? rhs.lpNorm<Eigen::Infinity>() : 0.0);
    if (inconsistency > 1e-10 * scale) {
      throw InfeasibleDynamicsError(
          "E x = A x_k + B u_k + w_k has no solution at step " + std::to_string(k), k);
    }
    next += nullspace * f;
    const double residual =
        rhs.size() ? (sys.E * next - rhs).lpNorm<Eigen::Infinity>() : 0.0;

    if (!constraints.empty() && (constraints.slack(xk, next).array() < -1e-12).any()) {
      traj.violations.push_back(k + 1);
    }
    traj.u.push_back(u);
    traj.w.push_back(w);
    traj.residual.push_back(residual);
    meas.y_.push_back(sys.H * next + v);
    meas.v.push_back(v);
    traj.x.push_back(std::move(next));
  }
  return {std::move(traj), std::move(meas)};
}

}  // namespace mwmhe
