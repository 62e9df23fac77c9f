#pragma once

// Forward-Euler integration of a bound compiled model with weekly output
// aggregation, plus the forward-sensitivity recurrence used for gradients.

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "epiagent/compiler.hpp"
#include "epiagent/error.hpp"

namespace epiagent {

struct InitialCondition {
  std::vector<double> fractions;  // one entry per compartment slot, model layout order
};

// Unlisted compartments start at zero. Per-patch sums must equal one.
inline InitialCondition make_initial_condition(const CompiledModel& model, const InitialFractions& spec) {
  const std::size_t P = model.num_patches();
  const std::size_t K = model.num_compartments();
  if (spec.empty()) throw SimulationError("scenario '" + model.scenario_id() + "' declares no initial conditions");
  if (spec.per_patch.size() != 1 && spec.per_patch.size() != P)
    throw SimulationError("initial conditions list " + std::to_string(spec.per_patch.size()) +
                          " patches, model has " + std::to_string(P));
  InitialCondition ic;
  ic.fractions.assign(K * P, 0.0);
  for (std::size_t p = 0; p < P; ++p) {
    const auto& m = spec.per_patch.size() == 1 ? spec.per_patch[0] : spec.per_patch[p];
    for (const auto& [id, v] : m) {
      auto k = model.graph().index_of(id);
      if (!k) throw SimulationError("initial condition for unknown compartment '" + id + "'");
      ic.fractions[model.slot(p, *k)] = v;
    }
  }
  return ic;
}

inline void check_initial_condition(const CompiledModel& model, const InitialCondition& x0) {
  if (x0.fractions.size() != model.num_slots())
    throw SimulationError("initial condition has " + std::to_string(x0.fractions.size()) + " entries, expected " +
                          std::to_string(model.num_slots()));
  for (std::size_t p = 0; p < model.num_patches(); ++p) {
    double sum = 0.0;
    for (std::size_t k = 0; k < model.num_compartments(); ++k) {
      const double v = x0.fractions[model.slot(p, k)];
      if (!(v >= 0.0) || !std::isfinite(v)) throw SimulationError("initial fractions must be finite and >= 0");
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-12)
      throw SimulationError("initial fractions of patch " + std::to_string(p) + " sum to " + std::to_string(sum) +
                            ", expected 1");
  }
}

// Weekly cumulative outputs in population fractions; entry [w * P + p] is
// the value at the end of week w + 1.
struct WeeklyOutputs {
  std::size_t weeks = 0;
  std::size_t patches = 0;
  std::vector<double> infections;
  std::vector<double> deaths;

  double infection(std::size_t w, std::size_t p) const { return infections[w * patches + p]; }
  double death(std::size_t w, std::size_t p) const { return deaths[w * patches + p]; }
};

struct StabilityFlag {
  enum class Reason { None, NaN, Inf, BlowUp };
  bool stable = true;
  std::optional<std::size_t> first_bad_step;
  Reason reason = Reason::None;

  std::string describe() const {
    if (stable) return "stable";
    static const char* names[] = {"none", "NaN", "Inf", "blow-up > 10"};
    return "unstable at step " + std::to_string(*first_bad_step) + " (" + names[static_cast<int>(reason)] + ")";
  }
};

struct Trajectory {
  std::vector<std::vector<double>> states;  // row n is the compartment state after n steps
  WeeklyOutputs weekly;                     // truncated to completed weeks on instability
  std::vector<StateSlot> layout;
  std::vector<double> populations;
  double dt = 1.0;
  double t0 = 0.0;  // start week
  std::size_t horizon_weeks = 0;
  bool verified_model = true;

  std::size_t patches() const { return populations.size(); }
};

struct SimulationResult {
  Trajectory trajectory;
  StabilityFlag stability;
};

inline std::size_t steps_per_week(double dt_days) {
  if (!(dt_days > 0.0) || !std::isfinite(dt_days)) throw SimulationError("dt must be positive");
  const double n = 7.0 / dt_days;
  const double r = std::round(n);
  if (r < 1.0 || std::abs(n - r) > 1e-9) throw SimulationError("dt must divide 7 days exactly");
  return static_cast<std::size_t>(r);
}

// Explicit Euler, x_{n+1} = x_n + dt * f(x_n, t_n). States are never
// clamped. Integration stops at the first non-finite state or |x| > 10.
inline SimulationResult simulate(const BoundModel& bound, const InitialCondition& x0, std::size_t horizon_weeks,
                                 double dt_days = 1.0) {
  const auto& model = bound.model();
  if (horizon_weeks == 0) throw SimulationError("horizon must be at least one week");
  const std::size_t spw = steps_per_week(dt_days);
  check_initial_condition(model, x0);

  const std::size_t n_slots = model.num_slots();
  const std::size_t P = model.num_patches();
  SimulationResult out;
  auto& traj = out.trajectory;
  traj.layout = model.layout();
  traj.populations = model.patches().populations;
  traj.dt = dt_days;
  traj.horizon_weeks = horizon_weeks;
  traj.verified_model = model.verified();
  traj.weekly.patches = P;

  std::vector<double> x(model.extended_size(), 0.0), dx(model.extended_size());
  std::copy(x0.fractions.begin(), x0.fractions.end(), x.begin());
  traj.states.reserve(horizon_weeks * spw + 1);
  traj.states.emplace_back(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(n_slots));

  const std::size_t total = horizon_weeks * spw;
  for (std::size_t n = 0; n < total; ++n) {
    bound.rhs(x, static_cast<double>(n) * dt_days, dx);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += dt_days * dx[i];

    // The magnitude bound applies to compartment fractions only: cumulative
    // counters grow without limit under reinfection.
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double v = x[i];
      StabilityFlag::Reason why = StabilityFlag::Reason::None;
      if (std::isnan(v)) why = StabilityFlag::Reason::NaN;
      else if (std::isinf(v)) why = StabilityFlag::Reason::Inf;
      else if (i < n_slots && std::abs(v) > 10.0) why = StabilityFlag::Reason::BlowUp;
      if (why != StabilityFlag::Reason::None) {
        out.stability = {false, n + 1, why};
        return out;
      }
    }
    traj.states.emplace_back(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(n_slots));
    if ((n + 1) % spw == 0) {
      ++traj.weekly.weeks;
      for (std::size_t p = 0; p < P; ++p) {
        traj.weekly.infections.push_back(x[model.infections_slot(p)]);
        traj.weekly.deaths.push_back(x[model.deaths_slot(p)]);
      }
    }
  }
  return out;
}

struct WeeklyDeltas {
  std::size_t weeks = 0;  // number of deltas
  std::size_t patches = 0;
  std::vector<double> infections;
  std::vector<double> deaths;
};

inline WeeklyDeltas weekly_deltas(const WeeklyOutputs& w) {
  if (w.weeks < 2) throw SimulationError("weekly deltas need at least two weeks");
  WeeklyDeltas d{w.weeks - 1, w.patches, {}, {}};
  for (std::size_t t = 0; t + 1 < w.weeks; ++t)
    for (std::size_t p = 0; p < w.patches; ++p) {
      d.infections.push_back(w.infection(t + 1, p) - w.infection(t, p));
      d.deaths.push_back(w.death(t + 1, p) - w.death(t, p));
    }
  return d;
}

inline WeeklyDeltas weekly_deltas(const Trajectory& traj) { return weekly_deltas(traj.weekly); }

// Weekly outputs and their Jacobian with respect to theta, from the exact
// sensitivity recurrence of the Euler scheme:
//   S_{n+1} = S_n + dt * (df/dx S_n + df/dtheta),  S_0 = 0.
struct SensitivityResult {
  WeeklyOutputs outputs;
  std::vector<double> d_infections;  // [(w * P + p) * M + j]
  std::vector<double> d_deaths;
  std::size_t dof = 0;
  bool finite = true;
};

inline SensitivityResult simulate_sensitivity(const BoundModel& bound, const InitialCondition& x0,
                                              std::size_t horizon_weeks, double dt_days = 1.0) {
  const auto& model = bound.model();
  if (model.has_residual()) throw SimulationError("sensitivities are unavailable with a residual term");
  if (horizon_weeks == 0) throw SimulationError("horizon must be at least one week");
  const std::size_t spw = steps_per_week(dt_days);
  check_initial_condition(model, x0);

  const std::size_t N = model.extended_size();
  const std::size_t M = model.dof();
  const std::size_t P = model.num_patches();
  const auto& theta = bound.theta();

  SensitivityResult out;
  out.dof = M;
  out.outputs.patches = P;
  std::vector<double> x(N, 0.0), dx(N, 0.0);
  std::copy(x0.fractions.begin(), x0.fractions.end(), x.begin());
  std::vector<double> S(N * M, 0.0), dS(N * M, 0.0), dflow(M);

  const std::size_t total = horizon_weeks * spw;
  for (std::size_t n = 0; n < total; ++n) {
    const double t = static_cast<double>(n) * dt_days;
    const double week = t / 7.0;
    std::fill(dx.begin(), dx.end(), 0.0);
    std::fill(dS.begin(), dS.end(), 0.0);
    for (const auto& f : model.flows()) {
      const double rate = f.rate.value(week, theta);
      const double xs = x[f.source];
      double esc = 1.0, lambda = 1.0;
      if (f.kind == FlowTerm::Kind::Infection) {
        if (f.escape) esc = f.escape->value(week, theta);
        lambda = 0.0;
        for (const auto& [s, c] : f.pressure) lambda += c * x[s];
      }
      const double v = rate * esc * xs * lambda;

      // Total derivative of the flow value along theta.
      std::fill(dflow.begin(), dflow.end(), 0.0);
      const double d_xs = rate * esc * lambda;
      if (d_xs != 0.0) {
        const double* row = &S[f.source * M];
        for (std::size_t j = 0; j < M; ++j) dflow[j] += d_xs * row[j];
      }
      if (f.kind == FlowTerm::Kind::Infection) {
        const double pref = rate * esc * xs;
        if (pref != 0.0)
          for (const auto& [s, c] : f.pressure) {
            const double* row = &S[s * M];
            for (std::size_t j = 0; j < M; ++j) dflow[j] += pref * c * row[j];
          }
      }
      std::size_t idx[2];
      double w[2];
      int np = f.rate.partials(week, idx, w);
      for (int i = 0; i < np; ++i) dflow[idx[i]] += w[i] * esc * xs * lambda;
      if (f.escape) {
        np = f.escape->partials(week, idx, w);
        for (int i = 0; i < np; ++i) dflow[idx[i]] += w[i] * rate * xs * lambda;
      }

      auto scatter = [&](std::size_t slot, double sign) {
        dx[slot] += sign * v;
        double* row = &dS[slot * M];
        for (std::size_t j = 0; j < M; ++j) row[j] += sign * dflow[j];
      };
      scatter(f.source, -1.0);
      scatter(f.target, 1.0);
      if (f.incidence) scatter(model.infections_slot(f.patch), 1.0);
      if (f.death) scatter(model.deaths_slot(f.patch), 1.0);
    }
    for (std::size_t i = 0; i < N; ++i) x[i] += dt_days * dx[i];
    for (std::size_t i = 0; i < N * M; ++i) S[i] += dt_days * dS[i];
    for (double v : x)
      if (!std::isfinite(v)) {
        out.finite = false;
        return out;
      }

    if ((n + 1) % spw == 0) {
      ++out.outputs.weeks;
      for (std::size_t p = 0; p < P; ++p) {
        out.outputs.infections.push_back(x[model.infections_slot(p)]);
        out.outputs.deaths.push_back(x[model.deaths_slot(p)]);
        const double* ri = &S[model.infections_slot(p) * M];
        const double* rd = &S[model.deaths_slot(p) * M];
        out.d_infections.insert(out.d_infections.end(), ri, ri + M);
        out.d_deaths.insert(out.d_deaths.end(), rd, rd + M);
      }
    }
  }
  return out;
}

}  // namespace epiagent
