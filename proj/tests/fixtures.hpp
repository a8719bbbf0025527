#pragma once

#include <vector>

#include "mwmhe/estimators.hpp"
#include "mwmhe/harness.hpp"
#include "mwmhe/io.hpp"
#include "mwmhe/model.hpp"

namespace fixture {

using mwmhe::Matrix;
using mwmhe::Vector;

/// Two dynamic states driven by a third, algebraically free input channel
/// that is measured directly. Bounds |x3| <= bound.
inline mwmhe::SystemSpec reference_system(double bound = 1.0) {
  mwmhe::SystemSpec s;
  auto& sys = s.sys;
  sys.E = Matrix::Zero(2, 3);
  sys.E.leftCols(2).setIdentity();
  sys.A.resize(2, 3);
  sys.A << 0.8, 0.3, 0.1,
          -0.2, 0.6, 0.4;
  sys.B = Matrix::Zero(2, 1);
  sys.B(0, 0) = 1;
  sys.H.resize(2, 3);
  sys.H << 1, 0, 0,
           0, 0, 1;
  sys.Q = Matrix::Identity(2, 2);
  sys.R = 0.1 * Matrix::Identity(2, 2);
  s.constraints.Ec = Matrix::Zero(2, 3);
  s.constraints.Ec(0, 2) = 1;
  s.constraints.Ec(1, 2) = -1;
  s.constraints.Ac = Matrix::Zero(2, 3);
  s.constraints.dc = Vector::Constant(2, bound);
  s.prior.x0 = Vector::Zero(3);
  s.prior.P0 = Matrix::Identity(3, 3);
  return s;
}

/// Free channel of the reference system: sits on the upper bound, drops to
/// the lower one and wanders in between.
inline std::vector<mwmhe::harness::StepChange> reference_profile(double bound = 1.0) {
  auto at = [](int t, double v) { return mwmhe::harness::StepChange{t, Vector::Constant(1, v)}; };
  return {at(0, 0.2), at(20, bound), at(45, 0.4), at(80, -bound), at(95, -0.3), at(140, bound),
          at(150, 0.0)};
}

struct Run {
  mwmhe::Trajectory truth;
  mwmhe::MeasurementRecord meas;
  mwmhe::est::EstimationData data;
};

/// Simulates the reference system with the given noise levels. Inputs are a
/// slow sinusoid on the single input channel.
inline Run reference_run(const mwmhe::SystemSpec& spec, int T, double process_std,
                         double measurement_std, std::uint64_t seed,
                         const std::vector<mwmhe::harness::StepChange>& profile) {
  mwmhe::harness::NormalStream rng(seed);
  mwmhe::SimulationInput in;
  in.x0 = Vector::Zero(3);
  for (int k = 0; k < T; ++k) {
    in.inputs.push_back(Vector::Constant(1, 0.5 * std::sin(0.05 * k)));
    in.process_noise.push_back(rng.next(2, process_std));
    in.measurement_noise.push_back(rng.next(2, measurement_std));
  }
  in.free_series = mwmhe::harness::step_series(profile, 1, T);
  auto [traj, meas] = mwmhe::simulate(spec.sys, spec.constraints, in, T);
  Run r{std::move(traj), std::move(meas), {}};
  r.data = mwmhe::est::EstimationData::from(spec.sys, r.truth, r.meas);
  return r;
}

}  // namespace fixture
