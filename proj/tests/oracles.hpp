#pragma once

// Dense reference computations used to check the library. Everything here is
// written with explicit inverses and textbook formulas on purpose; none of it
// calls into the code under test except for plain data types.

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <random>
#include <utility>
#include <vector>

#include "mwmhe/estimators.hpp"
#include "mwmhe/model.hpp"

namespace oracle {

using mwmhe::DescriptorSystem;
using mwmhe::Matrix;
using mwmhe::Vector;

// ---------------------------------------------------------------------------
// Random instances

struct Rng {
  std::mt19937_64 engine;
  explicit Rng(std::uint64_t seed) : engine(seed) {}

  double uniform(double lo = -1, double hi = 1) {
    return std::uniform_real_distribution<double>(lo, hi)(engine);
  }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine); }
  Matrix matrix(Eigen::Index r, Eigen::Index c) {
    Matrix m(r, c);
    for (Eigen::Index j = 0; j < c; ++j)
      for (Eigen::Index i = 0; i < r; ++i) m(i, j) = uniform();
    return m;
  }
  Vector vector(Eigen::Index n, double scale = 1) { return scale * matrix(n, 1); }
  /// SPD with eigenvalues roughly in [lo, lo + n].
  Matrix spd(Eigen::Index n, double lo = 0.5) {
    const Matrix x = matrix(n, n);
    return x * x.transpose() + lo * Matrix::Identity(n, n);
  }
};

inline double spectral_radius(const Matrix& m) {
  return Eigen::EigenSolver<Matrix>(m, false).eigenvalues().cwiseAbs().maxCoeff();
}

/// E = I, A scaled to spectral radius in [0.3, 1.05], H with 1..n rows.
inline DescriptorSystem random_state_space(Rng& rng, int n) {
  DescriptorSystem s;
  s.E = Matrix::Identity(n, n);
  s.A = rng.matrix(n, n);
  s.A *= rng.uniform(0.3, 1.05) / std::max(1e-3, spectral_radius(s.A));
  const int q = rng.integer(0, 2);
  s.B = rng.matrix(n, q);
  s.H = rng.matrix(rng.integer(1, n), n);
  s.Q = rng.spd(n, 0.2);
  s.R = rng.spd(s.H.rows(), 0.2);
  return s;
}

/// n1 < n rows of dynamics and enough measurement rows to make [E; H] full
/// column rank for a generic draw.
inline DescriptorSystem random_descriptor(Rng& rng, int n) {
  DescriptorSystem s;
  const int n1 = rng.integer(1, n - 1);
  const int m = rng.integer(n - n1, n);
  s.E = rng.matrix(n1, n);
  s.A = 0.5 * rng.matrix(n1, n);
  s.B = rng.matrix(n1, 1);
  s.H = rng.matrix(m, n);
  s.Q = rng.spd(n1, 0.2);
  s.R = rng.spd(m, 0.2);
  return s;
}

/// Inputs and measurements of a noisy random run, u_0..u_{T-1}, y_1..y_T.
inline mwmhe::est::EstimationData random_data(Rng& rng, const DescriptorSystem& s, int T) {
  mwmhe::est::EstimationData d;
  d.y.emplace_back();
  for (int k = 0; k < T; ++k) {
    d.u.push_back(rng.vector(s.q()));
    d.y.push_back(rng.vector(s.m(), 2.0));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Dense least squares: sum of ||sum_j F_j z[off_j] - t||^2_W.

class LeastSquares {
 public:
  explicit LeastSquares(Eigen::Index dim) : dim_(dim) {}

  void add(const std::vector<std::pair<Eigen::Index, Matrix>>& blocks, const Vector& target,
           const Matrix& weight) {
    // Whitening by W^{-1/2} from a plain eigen decomposition.
    Eigen::SelfAdjointEigenSolver<Matrix> es(weight);
    const Matrix root_inv = es.eigenvectors() *
                            es.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() *
                            es.eigenvectors().transpose();
    Matrix rows = Matrix::Zero(target.size(), dim_);
    for (const auto& [off, F] : blocks) rows.middleCols(off, F.cols()) += F;
    append(root_inv * rows, root_inv * target);
  }

  Eigen::Index dim() const { return dim_; }
  const Matrix& J() const { return J_; }
  const Vector& t() const { return t_; }

  double value(const Vector& z) const { return (J_ * z - t_).squaredNorm(); }
  Vector minimizer() const { return J_.colPivHouseholderQr().solve(t_); }

 private:
  void append(const Matrix& rows, const Vector& target) {
    Matrix J(J_.rows() + rows.rows(), dim_);
    J << J_, rows;
    Vector t(t_.size() + target.size());
    t << t_, target;
    J_ = std::move(J);
    t_ = std::move(t);
  }

  Eigen::Index dim_;
  Matrix J_ = Matrix(0, dim_);
  Vector t_ = Vector(0);
};

struct QpResult {
  Vector z;
  double objective = std::numeric_limits<double>::infinity();
  std::vector<int> active;
  bool found = false;
};

/// min ||J z - t||^2 s.t. G z <= h by trying every subset of rows as
/// equalities and keeping the feasible KKT point with non-negative
/// multipliers. Only for a handful of rows.
inline QpResult enumerate_active_sets(const LeastSquares& ls, const Matrix& G, const Vector& h) {
  const Eigen::Index n = ls.dim();
  const Matrix H = 2 * ls.J().transpose() * ls.J();
  const Vector c = -2 * ls.J().transpose() * ls.t();
  const int m = static_cast<int>(h.size());
  QpResult best;
  for (unsigned mask = 0; mask < (1u << m); ++mask) {
    std::vector<int> rows;
    for (int i = 0; i < m; ++i)
      if (mask & (1u << i)) rows.push_back(i);
    const auto k = static_cast<Eigen::Index>(rows.size());
    Matrix K = Matrix::Zero(n + k, n + k);
    Vector rhs(n + k);
    K.topLeftCorner(n, n) = H;
    rhs.head(n) = -c;
    for (Eigen::Index r = 0; r < k; ++r) {
      K.block(n + r, 0, 1, n) = G.row(rows[r]);
      K.block(0, n + r, n, 1) = G.row(rows[r]).transpose();
      rhs(n + r) = h(rows[r]);
    }
    Eigen::FullPivLU<Matrix> lu(K);
    if (!lu.isInvertible()) continue;
    const Vector sol = lu.solve(rhs);
    const Vector z = sol.head(n);
    const Vector mult = sol.tail(k);
    const double scale = 1 + h.cwiseAbs().maxCoeff();
    if (((G * z - h).array() > 1e-9 * scale).any()) continue;
    if (k > 0 && (mult.array() < -1e-9 * (1 + mult.cwiseAbs().maxCoeff())).any()) continue;
    const double f = ls.value(z);
    if (f < best.objective) {
      best = {z, f, rows, true};
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Textbook descriptor filter and smoother with explicit inverses.

struct KfStep {
  Vector x;      // filtered mean
  Matrix P;      // filtered weight
  Matrix Pm;     // predicted weight for the next step
  Matrix gamma;  // smoother weight
  Matrix G;      // smoother gain on x_{k+1}
  Vector r;      // smoother offset
  double innovation = 0;  // constant dropped by the measurement update at k
};

inline std::vector<KfStep> filter(const DescriptorSystem& s, const Vector& x0, const Matrix& P0,
                                  const mwmhe::est::EstimationData& d, int T) {
  std::vector<KfStep> out;
  const Matrix Qi = s.Q.inverse();
  const Matrix Ri = s.R.inverse();
  auto smoother = [&](KfStep& st, const Vector& u) {
    st.gamma = (st.P.inverse() + s.A.transpose() * Qi * s.A).inverse();
    st.G = st.gamma * s.A.transpose() * Qi * s.E;
    st.r = st.x - st.gamma * s.A.transpose() * Qi * (s.A * st.x + s.B * u);
  };
  KfStep first;
  first.x = x0;
  first.P = P0;
  first.Pm = s.A * P0 * s.A.transpose() + s.Q;
  out.push_back(first);
  for (int k = 1; k <= T; ++k) {
    auto& prev = out.back();
    const Vector& u = d.u[k - 1];
    smoother(prev, u);
    const Vector z = s.A * prev.x + s.B * u;
    const Matrix Pmi = prev.Pm.inverse();
    KfStep st;
    st.P = (s.E.transpose() * Pmi * s.E + s.H.transpose() * Ri * s.H).inverse();
    st.x = st.P * (s.E.transpose() * Pmi * z + s.H.transpose() * Ri * d.y[k]);
    st.Pm = s.A * st.P * s.A.transpose() + s.Q;
    const Vector ey = d.y[k] - s.H * st.x;
    const Vector ez = s.E * st.x - z;
    st.innovation = ey.dot(Ri * ey) + ez.dot(Pmi * ez);
    out.push_back(st);
  }
  if (T < static_cast<int>(d.u.size())) smoother(out.back(), d.u[T]);
  return out;
}

// ---------------------------------------------------------------------------
// Full information objective over x_1..x_T (block k at offset (k-1) n).

inline LeastSquares fie_objective(const DescriptorSystem& s, const Vector& x0, const Matrix& P0,
                                  const mwmhe::est::EstimationData& d, int T) {
  const Eigen::Index n = s.n();
  LeastSquares ls(n * T);
  auto off = [n](int k) { return (k - 1) * n; };
  ls.add({{off(1), s.E}}, s.A * x0 + s.B * d.u[0], s.A * P0 * s.A.transpose() + s.Q);
  for (int k = 1; k < T; ++k) {
    ls.add({{off(k + 1), s.E}, {off(k), Matrix(-s.A)}}, s.B * d.u[k], s.Q);
  }
  for (int k = 1; k <= T; ++k) ls.add({{off(k), s.H}}, d.y[k], s.R);
  return ls;
}

}  // namespace oracle
