#pragma once

#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "mwmhe/linalg.hpp"

namespace mwmhe::qp {

class InfeasibleProblem : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class IterationLimit : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

/// Decision vector made of consecutive blocks. Blocks are labelled (e.g. with
/// a time index) so callers can find the variables that belong to a stage.
class Layout {
 public:
  int add_block(int label, Eigen::Index size);

  int blocks() const { return static_cast<int>(sizes_.size()); }
  Eigen::Index offset(int block) const { return offsets_.at(static_cast<std::size_t>(block)); }
  Eigen::Index size(int block) const { return sizes_.at(static_cast<std::size_t>(block)); }
  int label(int block) const { return labels_.at(static_cast<std::size_t>(block)); }
  Eigen::Index dim() const { return dim_; }
  /// Block index carrying `label`, or -1.
  int find(int label) const;

 private:
  std::vector<Eigen::Index> offsets_, sizes_;
  std::vector<int> labels_;
  Eigen::Index dim_ = 0;
};

/// coeff * zeta[block].
struct BlockEntry {
  int block = 0;
  Matrix coeff;
};

/// ||sum_j F_j zeta_j - target||^2_weight with the inverse-weight convention.
struct QuadraticTerm {
  std::vector<BlockEntry> entries;
  Vector target;
  Matrix weight;
};

/// sum_j F_j zeta_j  (<= or ==)  rhs. `tag` is free for caller bookkeeping.
struct LinearRows {
  std::vector<BlockEntry> entries;
  Vector rhs;
  int tag = -1;
};

class Problem {
 public:
  const Layout& layout() const { return layout_; }
  const std::vector<QuadraticTerm>& terms() const { return terms_; }
  const std::vector<LinearRows>& equalities() const { return equalities_; }
  const std::vector<LinearRows>& inequalities() const { return inequalities_; }

  Eigen::Index dim() const { return layout_.dim(); }
  Eigen::Index equality_rows() const { return eq_rhs_.size(); }
  Eigen::Index inequality_rows() const { return in_rhs_.size(); }

  /// The objective is 0.5 z'Hz + c'z + constant.
  const Vector& linear() const { return linear_; }
  double constant() const { return constant_; }
  const Vector& equality_rhs() const { return eq_rhs_; }
  const Vector& inequality_rhs() const { return in_rhs_; }
  /// Scalar half-bandwidth of the Hessian and inequality coupling pattern.
  Eigen::Index bandwidth() const { return bandwidth_; }
  /// Lower band of H: band(i - j, j) = H(i, j) for 0 <= i - j <= bandwidth.
  const Matrix& hessian_band() const { return band_; }
  /// Inequality row -> tag of the LinearRows it came from.
  const std::vector<int>& inequality_tags() const { return in_tags_; }

  // Dense views, built on demand.
  Matrix hessian() const;
  Matrix equality_matrix() const;
  Matrix inequality_matrix() const;

  Vector hessian_times(const Vector& z) const;
  Vector equality_times(const Vector& z) const;
  Vector equality_transpose_times(const Vector& nu) const;
  Vector inequality_times(const Vector& z) const;
  Vector inequality_transpose_times(const Vector& lambda) const;

  /// Sum of the quadratic terms evaluated term by term.
  double objective(const Vector& z) const;

  friend Problem assemble(Layout layout, std::vector<QuadraticTerm> terms,
                          std::vector<LinearRows> equalities, std::vector<LinearRows> inequalities);

 private:
  Layout layout_;
  std::vector<QuadraticTerm> terms_;
  std::vector<LinearRows> equalities_, inequalities_;
  Matrix band_;
  Vector linear_, eq_rhs_, in_rhs_;
  double constant_ = 0;
  Eigen::Index bandwidth_ = 0;
  std::vector<int> in_tags_;
};

/// Validates every entry against the layout and builds the dense views.
Problem assemble(Layout layout, std::vector<QuadraticTerm> terms,
                 std::vector<LinearRows> equalities = {}, std::vector<LinearRows> inequalities = {});

struct Settings {
  double tol = 1e-9;                   // stationarity and primal feasibility
  double complementarity_tol = 1e-12;  // max_i |lambda_i slack_i|
  int max_iter = 100;
  double sigma_min = 0.05;
  double sigma_max = 0.95;
  double step_fraction = 0.99;
};

struct KktResiduals {
  double stationarity = 0;
  double primal = 0;
  double dual = 0;  // max(0, -min lambda)
  double complementarity = 0;

  double max() const;
};

struct Solution {
  Vector z;
  Vector eq_duals;
  Vector ineq_duals;
  double objective = 0;
  KktResiduals residuals;
  int iterations = 0;
  double wall_ms = 0;
};

KktResiduals kkt_residuals(const Problem& p, const Vector& z, const Vector& eq_duals,
                           const Vector& ineq_duals);

/// Primal-dual interior point with Mehrotra predictor-corrector. Without
/// equality rows the reduced Newton system is factored in band storage, so a
/// staged problem costs O(horizon n^3) per iteration. Equality rows fall back
/// to a dense saddle-point factorization.
Solution solve(const Problem& p, const Settings& settings = {});

struct ActiveSet {
  std::vector<int> by_slack;
  std::vector<int> by_dual;
};

/// Slack detector: b_l - (A z)_l <= eps_act (1 + |b_l|). The dual detector
/// (lambda_l >= eps_dual) is reported alongside; callers use by_slack.
ActiveSet active_set(const Solution& sol, const Problem& p, double eps_act = 1e-6,
                     double eps_dual = 1e-5);

/// Dense dump for cross-checking against external solvers.
nlohmann::json to_json(const Problem& p);

}  // namespace mwmhe::qp
