#include "mwmhe/qp.hpp"

#include <Eigen/LU>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

namespace mwmhe::qp {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double inf_norm(const Vector& v) { return v.size() ? v.lpNorm<Eigen::Infinity>() : 0.0; }

void check_entries(const Layout& layout, const std::vector<BlockEntry>& entries, Eigen::Index rows,
                   const std::string& what) {
  for (const auto& e : entries) {
    if (e.block < 0 || e.block >= layout.blocks()) {
      throw DimensionError(what + " references unknown block " + std::to_string(e.block));
    }
    if (e.coeff.rows() != rows || e.coeff.cols() != layout.size(e.block)) {
      throw DimensionError(what + " coefficient is " + std::to_string(e.coeff.rows()) + "x" +
                           std::to_string(e.coeff.cols()) + ", expected " + std::to_string(rows) +
                           "x" + std::to_string(layout.size(e.block)));
    }
  }
}

Eigen::Index entry_bandwidth(const Layout& layout, const std::vector<BlockEntry>& entries) {
  if (entries.empty()) return 0;
  int lo = entries.front().block, hi = lo;
  for (const auto& e : entries) {
    lo = std::min(lo, e.block);
    hi = std::max(hi, e.block);
  }
  return layout.offset(hi) + layout.size(hi) - 1 - layout.offset(lo);
}

/// band(i - j, j) += block(i - r0, j - c0) for the lower-triangle entries.
void add_to_band(Matrix& band, Eigen::Index r0, Eigen::Index c0, const Matrix& block) {
  for (Eigen::Index j = 0; j < block.cols(); ++j) {
    for (Eigen::Index i = 0; i < block.rows(); ++i) {
      const Eigen::Index r = r0 + i, c = c0 + j;
      if (r >= c) band(r - c, c) += block(i, j);
    }
  }
}

/// Sum of coeff_j^T diag(d) coeff_i over entry pairs of a row group.
void add_gram_to_band(Matrix& band, const Layout& layout, const std::vector<BlockEntry>& entries,
                      const Vector& scale) {
  for (const auto& ei : entries) {
    const Matrix dfi = scale.asDiagonal() * ei.coeff;
    for (const auto& ej : entries) {
      if (ej.block < ei.block) continue;
      add_to_band(band, layout.offset(ej.block), layout.offset(ei.block),
                  ej.coeff.transpose() * dfi);
    }
  }
}

Matrix band_to_dense(const Matrix& band) {
  const Eigen::Index n = band.cols();
  Matrix dense = Matrix::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index d = 0; d < band.rows() && j + d < n; ++d) {
      dense(j + d, j) = band(d, j);
      dense(j, j + d) = band(d, j);
    }
  }
  return dense;
}

/// In-place lower Cholesky in band storage. Returns false on a non-positive pivot.
bool band_cholesky(Matrix& L) {
  const Eigen::Index p = L.rows() - 1;
  const Eigen::Index n = L.cols();
  for (Eigen::Index k = 0; k < n; ++k) {
    double d = L(0, k);
    for (Eigen::Index j = std::max<Eigen::Index>(0, k - p); j < k; ++j) {
      d -= L(k - j, j) * L(k - j, j);
    }
    if (!(d > 0.0) || !std::isfinite(d)) return false;
    const double lkk = std::sqrt(d);
    L(0, k) = lkk;
    const Eigen::Index i1 = std::min(n - 1, k + p);
    for (Eigen::Index i = k + 1; i <= i1; ++i) {
      double v = L(i - k, k);
      for (Eigen::Index j = std::max<Eigen::Index>(0, i - p); j < k; ++j) {
        v -= L(i - j, j) * L(k - j, j);
      }
      L(i - k, k) = v / lkk;
    }
  }
  return true;
}

void band_solve(const Matrix& L, Vector& x) {
  const Eigen::Index p = L.rows() - 1;
  const Eigen::Index n = L.cols();
  for (Eigen::Index i = 0; i < n; ++i) {
    double v = x(i);
    for (Eigen::Index j = std::max<Eigen::Index>(0, i - p); j < i; ++j) v -= L(i - j, j) * x(j);
    x(i) = v / L(0, i);
  }
  for (Eigen::Index i = n - 1; i >= 0; --i) {
    double v = x(i);
    for (Eigen::Index j = i + 1; j <= std::min(n - 1, i + p); ++j) v -= L(j - i, i) * x(j);
    x(i) = v / L(0, i);
  }
}

/// Factorization of [K A_eq'; A_eq 0], or of K alone without equality rows.
class NewtonSystem {
 public:
  NewtonSystem(const Problem& p, const Matrix& K_band) : p_(p) {
    if (p.equality_rows() == 0) {
      L_ = K_band;
      if (!band_cholesky(L_)) {
        const double jitter =
            1e-12 * std::max(1.0, K_band.row(0).cwiseAbs().maxCoeff());
        L_ = K_band;
        L_.row(0).array() += jitter;
        if (!band_cholesky(L_)) {
          throw NumericalError("KKT factorization failed: Hessian is not positive definite");
        }
      }
      return;
    }
    const Eigen::Index n = K_band.cols();
    const Eigen::Index neq = p.equality_rows();
    const Matrix Aeq = p.equality_matrix();
    Matrix kkt = Matrix::Zero(n + neq, n + neq);
    kkt.topLeftCorner(n, n) = band_to_dense(K_band);
    kkt.topRightCorner(n, neq) = Aeq.transpose();
    kkt.bottomLeftCorner(neq, n) = Aeq;
    lu_.compute(kkt);
    const double det = lu_.determinant();
    if (!(std::abs(det) > 0.0) || !std::isfinite(det)) {
      throw NumericalError("KKT factorization failed: saddle-point matrix is singular");
    }
  }

  /// Solves K dz + A_eq' dnu = rz, A_eq dz = re.
  void solve(const Vector& rz, const Vector& re, Vector& dz, Vector& dnu) const {
    if (p_.equality_rows() == 0) {
      dz = rz;
      band_solve(L_, dz);
      dnu.resize(0);
      return;
    }
    const Eigen::Index n = rz.size();
    Vector rhs(n + re.size());
    rhs << rz, re;
    const Vector sol = lu_.solve(rhs);
    dz = sol.head(n);
    dnu = sol.tail(re.size());
  }

 private:
  const Problem& p_;
  Matrix L_;
  Eigen::PartialPivLU<Matrix> lu_;
};

double max_step(const Vector& v, const Vector& dv) {
  double alpha = 1.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (dv(i) < 0.0) alpha = std::min(alpha, -v(i) / dv(i));
  }
  return alpha;
}

Vector rows_times(const Layout& layout, const std::vector<LinearRows>& groups, Eigen::Index total,
                  const Vector& z) {
  Vector out(total);
  Eigen::Index row = 0;
  for (const auto& g : groups) {
    auto seg = out.segment(row, g.rhs.size());
    seg.setZero();
    for (const auto& e : g.entries) seg += e.coeff * z.segment(layout.offset(e.block), e.coeff.cols());
    row += g.rhs.size();
  }
  return out;
}

Vector rows_transpose_times(const Layout& layout, const std::vector<LinearRows>& groups,
                            const Vector& y) {
  Vector out = Vector::Zero(layout.dim());
  Eigen::Index row = 0;
  for (const auto& g : groups) {
    const auto seg = y.segment(row, g.rhs.size());
    for (const auto& e : g.entries) {
      out.segment(layout.offset(e.block), e.coeff.cols()) += e.coeff.transpose() * seg;
    }
    row += g.rhs.size();
  }
  return out;
}

Matrix rows_dense(const Layout& layout, const std::vector<LinearRows>& groups, Eigen::Index total) {
  Matrix A = Matrix::Zero(total, layout.dim());
  Eigen::Index row = 0;
  for (const auto& g : groups) {
    for (const auto& e : g.entries) {
      A.block(row, layout.offset(e.block), g.rhs.size(), e.coeff.cols()) += e.coeff;
    }
    row += g.rhs.size();
  }
  return A;
}

Vector stack_rhs(const std::vector<LinearRows>& groups, std::vector<int>* tags) {
  Eigen::Index total = 0;
  for (const auto& g : groups) total += g.rhs.size();
  Vector b(total);
  Eigen::Index row = 0;
  for (const auto& g : groups) {
    b.segment(row, g.rhs.size()) = g.rhs;
    if (tags) tags->insert(tags->end(), static_cast<std::size_t>(g.rhs.size()), g.tag);
    row += g.rhs.size();
  }
  return b;
}

}  // namespace

int Layout::add_block(int label, Eigen::Index size) {
  offsets_.push_back(dim_);
  sizes_.push_back(size);
  labels_.push_back(label);
  dim_ += size;
  return static_cast<int>(sizes_.size()) - 1;
}

int Layout::find(int label) const {
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    if (labels_[i] == label) return static_cast<int>(i);
  }
  return -1;
}

Matrix Problem::hessian() const { return band_to_dense(band_); }

Matrix Problem::equality_matrix() const {
  return rows_dense(layout_, equalities_, equality_rows());
}

Matrix Problem::inequality_matrix() const {
  return rows_dense(layout_, inequalities_, inequality_rows());
}

Vector Problem::hessian_times(const Vector& z) const {
  const Eigen::Index n = dim();
  Vector y = Vector::Zero(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    y(j) += band_(0, j) * z(j);
    for (Eigen::Index d = 1; d < band_.rows() && j + d < n; ++d) {
      y(j + d) += band_(d, j) * z(j);
      y(j) += band_(d, j) * z(j + d);
    }
  }
  return y;
}

Vector Problem::equality_times(const Vector& z) const {
  return rows_times(layout_, equalities_, equality_rows(), z);
}

Vector Problem::equality_transpose_times(const Vector& nu) const {
  return rows_transpose_times(layout_, equalities_, nu);
}

Vector Problem::inequality_times(const Vector& z) const {
  return rows_times(layout_, inequalities_, inequality_rows(), z);
}

Vector Problem::inequality_transpose_times(const Vector& lambda) const {
  return rows_transpose_times(layout_, inequalities_, lambda);
}

double Problem::objective(const Vector& z) const {
  double total = 0.0;
  for (const auto& t : terms_) {
    Vector r = -t.target;
    for (const auto& e : t.entries) r += e.coeff * z.segment(layout_.offset(e.block), e.coeff.cols());
    total += weighted_sq_norm<double>(r, t.weight);
  }
  return total;
}

Problem assemble(Layout layout, std::vector<QuadraticTerm> terms,
                 std::vector<LinearRows> equalities, std::vector<LinearRows> inequalities) {
  Problem p;
  const Eigen::Index n = layout.dim();

  for (std::size_t i = 0; i < terms.size(); ++i) {
    const auto& t = terms[i];
    const std::string what = "quadratic term " + std::to_string(i);
    if (t.weight.rows() != t.target.size() || t.weight.cols() != t.target.size()) {
      throw DimensionError(what + " weight does not match its residual length");
    }
    check_entries(layout, t.entries, t.target.size(), what);
    p.bandwidth_ = std::max(p.bandwidth_, entry_bandwidth(layout, t.entries));
  }
  for (std::size_t i = 0; i < equalities.size(); ++i) {
    check_entries(layout, equalities[i].entries, equalities[i].rhs.size(),
                  "equality block " + std::to_string(i));
  }
  for (std::size_t i = 0; i < inequalities.size(); ++i) {
    check_entries(layout, inequalities[i].entries, inequalities[i].rhs.size(),
                  "inequality block " + std::to_string(i));
    p.bandwidth_ = std::max(p.bandwidth_, entry_bandwidth(layout, inequalities[i].entries));
  }
  p.bandwidth_ = std::min(p.bandwidth_, std::max<Eigen::Index>(n - 1, 0));

  p.band_ = Matrix::Zero(p.bandwidth_ + 1, n);
  p.linear_ = Vector::Zero(n);
  for (const auto& t : terms) {
    const SpdFactor<double> w(t.weight, "term weight");
    const Vector winv_g = w.solve(t.target);
    p.constant_ += t.target.dot(winv_g);
    for (const auto& ei : t.entries) {
      const Matrix winv_fi = w.solve(ei.coeff);
      p.linear_.segment(layout.offset(ei.block), ei.coeff.cols()) -=
          2.0 * ei.coeff.transpose() * winv_g;
      for (const auto& ej : t.entries) {
        add_to_band(p.band_, layout.offset(ej.block), layout.offset(ei.block),
                    2.0 * ej.coeff.transpose() * winv_fi);
      }
    }
  }

  p.eq_rhs_ = stack_rhs(equalities, nullptr);
  p.in_rhs_ = stack_rhs(inequalities, &p.in_tags_);
  p.layout_ = std::move(layout);
  p.terms_ = std::move(terms);
  p.equalities_ = std::move(equalities);
  p.inequalities_ = std::move(inequalities);
  return p;
}

double KktResiduals::max() const {
  return std::max({stationarity, primal, dual, complementarity});
}

KktResiduals kkt_residuals(const Problem& p, const Vector& z, const Vector& eq_duals,
                           const Vector& ineq_duals) {
  KktResiduals r;
  Vector grad = p.hessian_times(z) + p.linear();
  if (p.equality_rows()) grad += p.equality_transpose_times(eq_duals);
  if (p.inequality_rows()) grad += p.inequality_transpose_times(ineq_duals);
  r.stationarity = inf_norm(grad);
  if (p.equality_rows()) r.primal = inf_norm(Vector(p.equality_times(z) - p.equality_rhs()));
  if (p.inequality_rows()) {
    const Vector slack = p.inequality_rhs() - p.inequality_times(z);
    r.primal = std::max(r.primal, std::max(0.0, -slack.minCoeff()));
    r.dual = std::max(0.0, -ineq_duals.minCoeff());
    r.complementarity = inf_norm(Vector(ineq_duals.cwiseProduct(slack)));
  }
  return r;
}

Solution solve(const Problem& p, const Settings& settings) {
  const auto t0 = std::chrono::steady_clock::now();
  const Eigen::Index m = p.inequality_rows();
  const Eigen::Index neq = p.equality_rows();
  const Vector& b = p.inequality_rhs();

  Solution sol;
  auto finish = [&]() {
    sol.objective = p.objective(sol.z);
    sol.residuals = kkt_residuals(p, sol.z, sol.eq_duals, sol.ineq_duals);
    sol.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return sol;
  };

  // Starting point: minimizer subject to the equality rows only, followed by
  // one refinement step.
  {
    const NewtonSystem newton(p, p.hessian_band());
    newton.solve(-p.linear(), p.equality_rhs(), sol.z, sol.eq_duals);
    if (neq == 0) sol.eq_duals.resize(0);
    Vector grad = p.hessian_times(sol.z) + p.linear();
    if (neq) grad += p.equality_transpose_times(sol.eq_duals);
    Vector dz, dnu;
    newton.solve(-grad, neq ? Vector(p.equality_rhs() - p.equality_times(sol.z)) : Vector(), dz,
                 dnu);
    sol.z += dz;
    if (neq) sol.eq_duals += dnu;
  }
  if (m == 0) {
    sol.ineq_duals.resize(0);
    sol.iterations = 1;
    return finish();
  }

  Vector& z = sol.z;
  Vector nu = sol.eq_duals;
  Vector s = (b - p.inequality_times(z)).cwiseMax(1.0);
  Vector lambda = Vector::Ones(m);

  double best_primal = kInf;
  int stalled = 0;
  for (int it = 1; it <= settings.max_iter; ++it) {
    sol.iterations = it;
    Vector r_d = p.hessian_times(z) + p.linear() + p.inequality_transpose_times(lambda);
    if (neq) r_d += p.equality_transpose_times(nu);
    const Vector r_e = neq ? Vector(p.equality_times(z) - p.equality_rhs()) : Vector();
    const Vector r_i = p.inequality_times(z) + s - b;
    const double mu = s.dot(lambda) / double(m);

    sol.ineq_duals = lambda;
    sol.eq_duals = nu;
    const KktResiduals res = kkt_residuals(p, z, nu, lambda);
    if (res.stationarity <= settings.tol && res.primal <= settings.tol &&
        res.complementarity <= settings.complementarity_tol && inf_norm(r_i) <= settings.tol) {
      return finish();
    }

    const double primal_norm = std::max(inf_norm(r_i), inf_norm(r_e));
    if (primal_norm < 0.9 * best_primal) {
      best_primal = primal_norm;
      stalled = 0;
    } else if (++stalled >= 10 && lambda.maxCoeff() > 1e12) {
      throw InfeasibleProblem("inequality constraints appear infeasible (slack residual " +
                              std::to_string(primal_norm) + " not decreasing)");
    }

    Matrix K = p.hessian_band();
    {
      const Vector d = lambda.cwiseQuotient(s);
      Eigen::Index row = 0;
      for (const auto& g : p.inequalities()) {
        add_gram_to_band(K, p.layout(), g.entries, d.segment(row, g.rhs.size()));
        row += g.rhs.size();
      }
    }
    const NewtonSystem newton(p, K);

    auto direction = [&](const Vector& r_c, Vector& dz, Vector& dnu, Vector& ds, Vector& dl) {
      const Vector rz =
          -r_d + p.inequality_transpose_times((r_c - lambda.cwiseProduct(r_i)).cwiseQuotient(s));
      newton.solve(rz, neq ? Vector(-r_e) : Vector(), dz, dnu);
      ds = -r_i - p.inequality_times(dz);
      dl = (-r_c - lambda.cwiseProduct(ds)).cwiseQuotient(s);
    };

    Vector dz, dnu, ds, dl;
    const Vector r_c_aff = s.cwiseProduct(lambda);
    direction(r_c_aff, dz, dnu, ds, dl);
    const double alpha_aff = std::min(max_step(s, ds), max_step(lambda, dl));
    const double mu_aff = (s + alpha_aff * ds).dot(lambda + alpha_aff * dl) / double(m);
    const double sigma =
        std::clamp(std::pow(mu_aff / mu, 3.0), settings.sigma_min, settings.sigma_max);

    const Vector r_c = r_c_aff + ds.cwiseProduct(dl) - Vector::Constant(m, sigma * mu);
    direction(r_c, dz, dnu, ds, dl);
    const double alpha =
        std::min(1.0, settings.step_fraction * std::min(max_step(s, ds), max_step(lambda, dl)));

    z += alpha * dz;
    s += alpha * ds;
    lambda += alpha * dl;
    if (neq) nu += alpha * dnu;
    if (!z.allFinite() || !lambda.allFinite()) {
      throw NumericalError("interior point iterate became non-finite");
    }
  }
  throw IterationLimit("interior point method did not converge within " +
                       std::to_string(settings.max_iter) + " iterations");
}

ActiveSet active_set(const Solution& sol, const Problem& p, double eps_act, double eps_dual) {
  ActiveSet out;
  if (p.inequality_rows() == 0) return out;
  const Vector slack = p.inequality_rhs() - p.inequality_times(sol.z);
  for (Eigen::Index l = 0; l < slack.size(); ++l) {
    if (slack(l) <= eps_act * (1.0 + std::abs(p.inequality_rhs()(l)))) {
      out.by_slack.push_back(static_cast<int>(l));
    }
    if (sol.ineq_duals(l) >= eps_dual) out.by_dual.push_back(static_cast<int>(l));
  }
  return out;
}

nlohmann::json to_json(const Problem& p) {
  auto mat = [](const Matrix& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      nlohmann::json row = nlohmann::json::array();
      for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
      rows.push_back(std::move(row));
    }
    return rows;
  };
  auto vec = [](const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  nlohmann::json blocks = nlohmann::json::array();
  for (int i = 0; i < p.layout().blocks(); ++i) {
    blocks.push_back({{"label", p.layout().label(i)},
                      {"offset", p.layout().offset(i)},
                      {"size", p.layout().size(i)}});
  }
  return {{"objective", "0.5 z'Pz + q'z + r"},
          {"P", mat(p.hessian())},
          {"q", vec(p.linear())},
          {"r", p.constant()},
          {"A_eq", mat(p.equality_matrix())},
          {"b_eq", vec(p.equality_rhs())},
          {"A_in", mat(p.inequality_matrix())},
          {"b_in", vec(p.inequality_rhs())},
          {"blocks", blocks}};
}

}  // namespace mwmhe::qp
