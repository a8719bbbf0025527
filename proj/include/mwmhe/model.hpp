#pragma once

#include <string>
#include <vector>

#include "mwmhe/linalg.hpp"

namespace mwmhe {

/// E x_{k+1} = A x_k + B u_k + w_k,  y_{k+1} = H x_{k+1} + v_k.
///
/// E and A are n1 x n, B is n1 x q, H is m x n. Q (n1 x n1) and R (m x m) are
/// the process and measurement weights; norms use the inverse convention
/// ||z||^2_W = z' W^{-1} z throughout the library.
template <typename Scalar>
struct BasicDescriptorSystem {
  MatrixX<Scalar> E, A, B, H, Q, R;

  Eigen::Index n() const { return E.cols(); }
  Eigen::Index n1() const { return E.rows(); }
  Eigen::Index m() const { return H.rows(); }
  Eigen::Index q() const { return B.cols(); }

  /// Throws DimensionError naming the first inconsistent pair.
  void check_dimensions() const {
    auto require = [](bool ok, const char* a, const MatrixX<Scalar>& ma, const char* b,
                      const MatrixX<Scalar>& mb) {
      if (ok) return;
      auto shape = [](const MatrixX<Scalar>& m) {
        return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
      };
      throw DimensionError(std::string("dimension mismatch between ") + a + " (" + shape(ma) +
                           ") and " + b + " (" + shape(mb) + ")");
    };
    require(E.rows() == A.rows() && E.cols() == A.cols(), "E", E, "A", A);
    require(B.rows() == E.rows(), "E", E, "B", B);
    require(H.cols() == E.cols(), "E", E, "H", H);
    require(Q.rows() == E.rows() && Q.cols() == E.rows(), "E", E, "Q", Q);
    require(R.rows() == H.rows() && R.cols() == H.rows(), "H", H, "R", R);
  }
};

using DescriptorSystem = BasicDescriptorSystem<double>;

/// E_c x_{k+1} <= A_c x_k + d_c. Empty means unconstrained.
struct ConstraintSet {
  Matrix Ec, Ac;
  Vector dc;

  Eigen::Index rows() const { return dc.size(); }
  bool empty() const { return dc.size() == 0; }
  void check_dimensions(Eigen::Index n) const;

  /// d_c + A_c x_prev - E_c x_next; negative entries are violations.
  Vector slack(const Vector& x_prev, const Vector& x_next) const {
    return dc + Ac * x_prev - Ec * x_next;
  }
};

struct Prior {
  Vector x0;
  Matrix P0;
};

struct AssumptionCheck {
  std::string name;
  bool passed = false;
  Eigen::Index rank = 0;
  Eigen::Index required = 0;
};

struct ValidationReport {
  std::vector<AssumptionCheck> checks;
  bool ok() const;
};

/// Full row rank of [E A], full column rank of [E; H], Q and R SPD.
ValidationReport validate_system(const DescriptorSystem& sys);

/// States x_0..x_T, inputs and process noises for k = 0..T-1.
struct Trajectory {
  std::vector<Vector> x;
  std::vector<Vector> u;
  std::vector<Vector> w;
  std::vector<double> residual;  // ||E x_{k+1} - A x_k - B u_k - w_k||_inf
  std::vector<int> violations;   // steps k+1 whose constraint rows were violated

  int horizon() const { return static_cast<int>(x.size()) - 1; }
  bool constraint_warning() const { return !violations.empty(); }
};

/// Measurements y_1..y_T (y(k) for k >= 1) and noises v_0..v_{T-1}.
struct MeasurementRecord {
  std::vector<Vector> y_;  // slot 0 unused
  std::vector<Vector> v;

  const Vector& y(int k) const { return y_.at(static_cast<std::size_t>(k)); }
  int horizon() const { return static_cast<int>(y_.size()) - 1; }
};

struct SimulationInput {
  Vector x0;
  std::vector<Vector> inputs;           // u_k; empty means zero input
  std::vector<Vector> process_noise;    // w_k; empty means zero
  std::vector<Vector> measurement_noise;  // v_k; empty means zero
  std::vector<Vector> free_series;      // coefficients on null_basis(E); empty means zero
};

/// Propagates the model for T steps. Underdetermined steps use the minimum
/// norm solution plus null_basis(E) * free_series_k. Constraint violations are
/// recorded, never enforced.
std::pair<Trajectory, MeasurementRecord> simulate(const DescriptorSystem& sys,
                                                  const ConstraintSet& constraints,
                                                  const SimulationInput& input, int T);

}  // namespace mwmhe
