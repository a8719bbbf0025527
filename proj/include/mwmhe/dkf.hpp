#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <utility>

#include "mwmhe/linalg.hpp"
#include "mwmhe/model.hpp"

namespace mwmhe::dkf {

/// Running quantities of the descriptor Kalman recursion at time k.
template <typename Scalar>
struct FilterState {
  int k = 0;
  VectorX<Scalar> x_post;   // filtered mean
  MatrixX<Scalar> P_post;   // n x n
  MatrixX<Scalar> P_prior;  // n1 x n1, weight of the next arrival term
};

/// Affine map x_{k+1} -> x_k of the unconstrained smoother:
///   x_k = x_post + Gamma A' Q^{-1} (E x_{k+1} - A x_post - B u) = gain x_{k+1} + offset.
template <typename Scalar>
struct SmootherMap {
  MatrixX<Scalar> gain;    // Gamma A' Q^{-1} E
  VectorX<Scalar> offset;  // x_post - Gamma A' Q^{-1} (A x_post + B u)

  VectorX<Scalar> operator()(const VectorX<Scalar>& x_next) const { return gain * x_next + offset; }
};

template <typename Scalar>
struct SmootherStep {
  MatrixX<Scalar> gamma;
  SmootherMap<Scalar> map;
};

/// P(-) = A P(+) A' + Q.
template <typename Scalar>
MatrixX<Scalar> time_update(const BasicDescriptorSystem<Scalar>& sys,
                            const MatrixX<Scalar>& P_post) {
  return symmetrize(MatrixX<Scalar>(sys.A * P_post * sys.A.transpose() + sys.Q));
}

template <typename Scalar>
std::pair<VectorX<Scalar>, MatrixX<Scalar>> measurement_update(
    const BasicDescriptorSystem<Scalar>& sys, const VectorX<Scalar>& x_prev_post,
    const MatrixX<Scalar>& P_prev_prior, const VectorX<Scalar>& u_prev,
    const VectorX<Scalar>& y) {
  const SpdFactor<Scalar> prior(P_prev_prior, "predicted weight");
  const SpdFactor<Scalar> meas(sys.R, "R");
  const MatrixX<Scalar> Et_Pinv = prior.solve(sys.E).transpose();
  const MatrixX<Scalar> Ht_Rinv = meas.solve(sys.H).transpose();
  const MatrixX<Scalar> info = symmetrize(MatrixX<Scalar>(Et_Pinv * sys.E + Ht_Rinv * sys.H));

  const SpdFactor<Scalar> info_factor(info, "E'P^-1 E + H'R^-1 H");
  const VectorX<Scalar> z = sys.A * x_prev_post + sys.B * u_prev;
  VectorX<Scalar> x_post = info_factor.solve(Ht_Rinv * y + Et_Pinv * z);
  return {std::move(x_post), info_factor.inverse()};
}

/// Gamma = (P(+)^{-1} + A' Q^{-1} A)^{-1} together with the smoother map.
template <typename Scalar>
SmootherStep<Scalar> smoother_params(const BasicDescriptorSystem<Scalar>& sys,
                                     const VectorX<Scalar>& x_post, const MatrixX<Scalar>& P_post,
                                     const VectorX<Scalar>& u) {
  const SpdFactor<Scalar> post(P_post, "filtered weight");
  const SpdFactor<Scalar> proc(sys.Q, "Q");
  const MatrixX<Scalar> At_Qinv = proc.solve(sys.A).transpose();
  const MatrixX<Scalar> P_inv = post.inverse();
  const MatrixX<Scalar> info = symmetrize(MatrixX<Scalar>(P_inv + At_Qinv * sys.A));
  const SpdFactor<Scalar> info_factor(info, "P^-1 + A'Q^-1 A");
  MatrixX<Scalar> gamma = info_factor.inverse();

  const MatrixX<Scalar> coupling = gamma * At_Qinv;
  SmootherMap<Scalar> map{coupling * sys.E,
                          x_post - coupling * (sys.A * x_post + sys.B * u)};
  return {std::move(gamma), std::move(map)};
}

template <typename Scalar>
FilterState<Scalar> initial_state(const BasicDescriptorSystem<Scalar>& sys,
                                  const VectorX<Scalar>& x0, const MatrixX<Scalar>& P0) {
  return {0, x0, symmetrize(P0), time_update(sys, P0)};
}

/// One measurement + time update: state at k-1 to state at k.
template <typename Scalar>
FilterState<Scalar> filter_step(const BasicDescriptorSystem<Scalar>& sys,
                                const FilterState<Scalar>& prev, const VectorX<Scalar>& u_prev,
                                const VectorX<Scalar>& y) {
  auto [x, P] = measurement_update(sys, prev.x_post, prev.P_prior, u_prev, y);
  MatrixX<Scalar> P_prior = time_update(sys, P);
  return {prev.k + 1, std::move(x), std::move(P), std::move(P_prior)};
}

template <typename Scalar>
struct RiccatiResult {
  MatrixX<Scalar> P_post;
  MatrixX<Scalar> P_prior;
  MatrixX<Scalar> gamma;
  int iterations = 0;
  Scalar fixed_point_residual = 0;
};

struct RiccatiOptions {
  double tol = 1e-11;
  int max_iter = 10000;
};

/// Iterates the covariance recursion to its fixed point
///   P = (E' (A P A' + Q)^{-1} E + H' R^{-1} H)^{-1}.
/// Non-convergence is reported as DivergenceError; in practice it signals a
/// detectability or stabilizability failure.
template <typename Scalar>
RiccatiResult<Scalar> riccati_steady_state(const BasicDescriptorSystem<Scalar>& sys,
                                           MatrixX<Scalar> P0 = {}, RiccatiOptions opts = {}) {
  const Eigen::Index n = sys.n();
  if (P0.size() == 0) P0 = MatrixX<Scalar>::Identity(n, n);
  const SpdFactor<Scalar> meas(sys.R, "R");
  const MatrixX<Scalar> HtRinvH = symmetrize(MatrixX<Scalar>(sys.H.transpose() * meas.solve(sys.H)));

  auto next = [&](const MatrixX<Scalar>& P) {
    const SpdFactor<Scalar> prior(time_update(sys, P), "predicted weight");
    const MatrixX<Scalar> info =
        symmetrize(MatrixX<Scalar>(sys.E.transpose() * prior.solve(sys.E) + HtRinvH));
    return SpdFactor<Scalar>(info, "information").inverse();
  };

  MatrixX<Scalar> P = symmetrize(P0);
  for (int it = 1; it <= opts.max_iter; ++it) {
    MatrixX<Scalar> P_next;
    try {
      P_next = next(P);
    } catch (const NumericalError&) {
      throw DivergenceError("Riccati recursion lost positive definiteness", it);
    }
    if (!P_next.allFinite() || P_next.norm() > Scalar(1e150)) {
      throw DivergenceError("Riccati recursion diverged", it);
    }
    const Scalar change = (P_next - P).norm();
    const bool done = change <= Scalar(opts.tol) * (Scalar(1) + P.norm());
    P = std::move(P_next);
    if (done) {
      RiccatiResult<Scalar> out;
      out.fixed_point_residual = (next(P) - P).norm();
      out.P_post = P;
      out.P_prior = time_update(sys, P);
      const VectorX<Scalar> zero_x = VectorX<Scalar>::Zero(n);
      const VectorX<Scalar> zero_u = VectorX<Scalar>::Zero(sys.q());
      out.gamma = smoother_params<Scalar>(sys, zero_x, P, zero_u).gamma;
      out.iterations = it;
      return out;
    }
  }
  throw DivergenceError("Riccati recursion did not converge within " +
                            std::to_string(opts.max_iter) + " iterations",
                        opts.max_iter);
}

/// Composition of smoother maps across an unconstrained stretch of c states
/// starting at x_{b+1}:
///   x_{b+1} = M_c x_{b+c} + sum_{i<c} M_i r_i + sum_{i<c} M_i e_i,
/// where e_i are the smoother residuals with weights Gamma_{b+i}. `weight`
/// accumulates sum_i M_i Gamma_{b+i} M_i', the exact weight of the eliminated
/// chain.
template <typename Scalar>
struct Propagator {
  MatrixX<Scalar> M;
  VectorX<Scalar> offset;
  MatrixX<Scalar> weight;
  int q = 1;

  static Propagator start(Eigen::Index n) {
    return {MatrixX<Scalar>::Identity(n, n), VectorX<Scalar>::Zero(n), MatrixX<Scalar>::Zero(n, n),
            1};
  }
};

/// M_q = M_{q-1} Gamma A' Q^{-1} E, offset += M_{q-1} r_{q-1},
/// weight += M_{q-1} Gamma M_{q-1}'.
template <typename Scalar>
Propagator<Scalar> propagator_advance(const Propagator<Scalar>& prop,
                                      const SmootherStep<Scalar>& step) {
  Propagator<Scalar> out;
  out.offset = prop.offset + prop.M * step.map.offset;
  out.weight = symmetrize(MatrixX<Scalar>(prop.weight + prop.M * step.gamma * prop.M.transpose()));
  out.M = prop.M * step.map.gain;
  out.q = prop.q + 1;
  return out;
}

template <typename Scalar>
Propagator<Scalar> propagator_advance(const BasicDescriptorSystem<Scalar>& sys,
                                      const Propagator<Scalar>& prop, const VectorX<Scalar>& x_post,
                                      const MatrixX<Scalar>& P_post, const VectorX<Scalar>& u) {
  return propagator_advance(prop, smoother_params(sys, x_post, P_post, u));
}

/// ||Gamma^{-1} M||_{i2}.
template <typename Scalar>
Scalar coupling_norm(const MatrixX<Scalar>& gamma, const MatrixX<Scalar>& M) {
  if (M.isZero(Scalar(0))) return Scalar(0);
  const SpdFactor<Scalar> g(gamma, "smoother weight");
  return induced_norm(MatrixX<Scalar>(g.solve(M)));
}

/// Gamma_inf A' Q^{-1} E at the steady state.
template <typename Scalar>
MatrixX<Scalar> steady_state_gain(const BasicDescriptorSystem<Scalar>& sys,
                                  const RiccatiResult<Scalar>& ss) {
  const SpdFactor<Scalar> proc(sys.Q, "Q");
  return ss.gamma * proc.solve(sys.A).transpose() * sys.E;
}

template <typename Scalar>
struct HorizonSelection {
  int lag = 0;
  Scalar norm = 0;
};

/// Smallest q >= 1 with ||Gamma_inf^{-1} (Gamma_inf A' Q^{-1} E)^q||_{i2} <= bound.
template <typename Scalar>
HorizonSelection<Scalar> select_horizon(const BasicDescriptorSystem<Scalar>& sys, Scalar bound,
                                        int q_max, RiccatiOptions opts = {}) {
  if (!(bound > Scalar(0))) {
    throw HorizonSelectionError("coupling bound must be positive", std::numeric_limits<double>::infinity());
  }
  const auto ss = riccati_steady_state<Scalar>(sys, {}, opts);
  const MatrixX<Scalar> gain = steady_state_gain(sys, ss);
  MatrixX<Scalar> power = gain;
  Scalar norm = 0;
  for (int q = 1; q <= q_max; ++q) {
    norm = coupling_norm(ss.gamma, power);
    if (norm <= bound) return {q, norm};
    power = power * gain;
  }
  throw HorizonSelectionError("coupling bound " + std::to_string(double(bound)) +
                                  " not reached within " + std::to_string(q_max) +
                                  " steps (achieved " + std::to_string(double(norm)) + ")",
                              double(norm));
}

}  // namespace mwmhe::dkf
