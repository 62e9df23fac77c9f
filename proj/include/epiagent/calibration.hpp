#pragma once

// Calibration of trainable parameters against observed weekly cumulative
// series: the level-plus-first-difference loss, forward-sensitivity and
// finite-difference gradients, and Adam with a plateau scheduler.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "epiagent/compiler.hpp"
#include "epiagent/error.hpp"
#include "epiagent/simulator.hpp"

namespace epiagent {

// Observed weekly cumulative fractions for one scenario; [w * P + p] layout
// as in WeeklyOutputs. A zero mask entry marks the value as unobserved.
struct ObservedSeries {
  std::size_t weeks = 0;
  std::size_t patches = 0;
  std::vector<double> infections;
  std::vector<double> deaths;
  std::vector<std::uint8_t> infections_mask;
  std::vector<std::uint8_t> deaths_mask;

  static ObservedSeries fully_observed(const WeeklyOutputs& w) {
    return {w.weeks, w.patches, w.infections, w.deaths,
            std::vector<std::uint8_t>(w.infections.size(), 1), std::vector<std::uint8_t>(w.deaths.size(), 1)};
  }

  std::size_t observed_count() const {
    std::size_t n = 0;
    for (auto m : infections_mask) n += m;
    for (auto m : deaths_mask) n += m;
    return n;
  }
};

using Dataset = std::map<std::string, ObservedSeries>;

namespace detail {

// Loss and, when requested, its gradient with respect to the predictions.
// Returns nullopt when nothing is observed.
inline std::optional<double> loss_impl(const WeeklyOutputs& pred, const ObservedSeries& obs,
                                       std::vector<double>* g_inf, std::vector<double>* g_death) {
  if (pred.weeks != obs.weeks || pred.patches != obs.patches)
    throw CalibrationError("prediction shape (" + std::to_string(pred.weeks) + "x" + std::to_string(pred.patches) +
                           ") does not match observations (" + std::to_string(obs.weeks) + "x" +
                           std::to_string(obs.patches) + ")");
  const std::size_t T = obs.weeks, P = obs.patches;
  if (g_inf) g_inf->assign(T * P, 0.0);
  if (g_death) g_death->assign(T * P, 0.0);

  struct Series {
    const std::vector<double>& yhat;
    const std::vector<double>& y;
    const std::vector<std::uint8_t>& mask;
    std::vector<double>* grad;
  };
  const Series series[2] = {{pred.infections, obs.infections, obs.infections_mask, g_inf},
                            {pred.deaths, obs.deaths, obs.deaths_mask, g_death}};

  double total = 0.0;
  std::size_t patches_with_data = 0;
  std::vector<double> patch_terms;
  for (std::size_t p = 0; p < P; ++p) {
    double lvl = 0.0, dlt = 0.0;
    std::size_t n_lvl = 0, n_dlt = 0;
    for (const auto& s : series)
      for (std::size_t w = 0; w < T; ++w) {
        const std::size_t i = w * P + p;
        if (!s.mask[i]) continue;
        const double e = s.yhat[i] - s.y[i];
        lvl += e * e;
        ++n_lvl;
        if (w + 1 < T && s.mask[i + P]) {
          const double de = (s.yhat[i + P] - s.yhat[i]) - (s.y[i + P] - s.y[i]);
          dlt += de * de;
          ++n_dlt;
        }
      }
    if (n_lvl == 0) continue;
    ++patches_with_data;
    total += lvl / static_cast<double>(n_lvl) + (n_dlt ? dlt / static_cast<double>(n_dlt) : 0.0);

    for (const auto& s : series) {
      if (!s.grad) continue;
      for (std::size_t w = 0; w < T; ++w) {
        const std::size_t i = w * P + p;
        if (!s.mask[i]) continue;
        (*s.grad)[i] += 2.0 * (s.yhat[i] - s.y[i]) / static_cast<double>(n_lvl);
        if (w + 1 < T && s.mask[i + P]) {
          const double de = (s.yhat[i + P] - s.yhat[i]) - (s.y[i + P] - s.y[i]);
          const double g = 2.0 * de / static_cast<double>(n_dlt);
          (*s.grad)[i + P] += g;
          (*s.grad)[i] -= g;
        }
      }
    }
  }
  if (patches_with_data == 0) return std::nullopt;
  const double inv = 1.0 / static_cast<double>(patches_with_data);
  for (auto* g : {g_inf, g_death})
    if (g)
      for (auto& v : *g) v *= inv;
  return total * inv;
}

}  // namespace detail

// Mean over patches of MSE(levels) + MSE(first differences), both outputs
// pooled per patch, unobserved entries excluded. A difference counts only
// when both of its endpoints are observed.
inline double loss(const WeeklyOutputs& predicted, const ObservedSeries& observed) {
  auto l = detail::loss_impl(predicted, observed, nullptr, nullptr);
  if (!l) throw CalibrationError("loss: no observed entries");
  return *l;
}

enum class GradientMode { ForwardSensitivity, CentralDifference };

struct PlateauConfig {
  double factor = 0.5;
  std::size_t patience = 20;
  double min_lr = 1e-5;
  double threshold = 1e-6;  // relative improvement
};

struct CalibrationConfig {
  double learning_rate = 1e-2;
  std::size_t max_steps = 5000;
  PlateauConfig plateau;
  GradientMode gradient = GradientMode::ForwardSensitivity;
  double fd_step = 1e-5;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void check() const {
    if (!(learning_rate > 0.0)) throw CalibrationError("learning_rate must be positive");
    if (!(plateau.factor > 0.0 && plateau.factor < 1.0)) throw CalibrationError("plateau factor must be in (0,1)");
    if (!(plateau.min_lr > 0.0)) throw CalibrationError("min_lr must be positive");
    if (!(fd_step > 0.0)) throw CalibrationError("fd_step must be positive");
  }
};

// One scenario of a calibration problem. All scenarios share one flat
// parameter vector; scenario overrides make a parameter inert there.
struct ScenarioProblem {
  CompiledModel model;
  InitialCondition x0;
  ObservedSeries observed;
};

struct CalibrationProblem {
  std::vector<ScenarioProblem> scenarios;
  double dt_days = 1.0;

  std::size_t dof() const {
    if (scenarios.empty()) throw CalibrationError("calibration problem has no scenarios");
    const std::size_t m = scenarios.front().model.dof();
    for (const auto& s : scenarios)
      if (s.model.dof() != m) throw CalibrationError("scenario models disagree on parameter count");
    return m;
  }
};

struct LossAndGradient {
  double loss = 0.0;
  std::vector<double> gradient;
  std::vector<double> per_scenario;  // NaN for scenarios without observations
};

// Loss of one scenario at theta, or nullopt when it has no observed data.
inline std::optional<double> scenario_loss(const ScenarioProblem& sp, std::span<const double> theta, double dt) {
  BoundModel bound(sp.model, {theta.begin(), theta.end()});
  auto res = simulate(bound, sp.x0, sp.observed.weeks, dt);
  if (!res.stability.stable) return std::numeric_limits<double>::infinity();
  return detail::loss_impl(res.trajectory.weekly, sp.observed, nullptr, nullptr);
}

inline double total_loss(const CalibrationProblem& problem, std::span<const double> theta,
                         std::vector<double>* per_scenario = nullptr) {
  double total = 0.0;
  bool any = false;
  if (per_scenario) per_scenario->clear();
  for (const auto& sp : problem.scenarios) {
    auto l = scenario_loss(sp, theta, problem.dt_days);
    if (per_scenario) per_scenario->push_back(l ? *l : std::numeric_limits<double>::quiet_NaN());
    if (!l) continue;
    any = true;
    total += *l;
  }
  if (!any) throw CalibrationError("all data masked: no scenario has observed entries");
  return total;
}

// Central differences with step rel_step * |theta_j| (rel_step when theta_j = 0).
template <class F>
std::vector<double> central_difference(F&& f, std::span<const double> theta, double rel_step) {
  std::vector<double> g(theta.size());
  std::vector<double> x(theta.begin(), theta.end());
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double h = theta[j] != 0.0 ? rel_step * std::abs(theta[j]) : rel_step;
    x[j] = theta[j] + h;
    const double up = f(std::span<const double>(x));
    x[j] = theta[j] - h;
    const double down = f(std::span<const double>(x));
    x[j] = theta[j];
    g[j] = (up - down) / (2.0 * h);
  }
  return g;
}

inline LossAndGradient loss_and_gradient(const CalibrationProblem& problem, std::span<const double> theta,
                                         GradientMode mode, double fd_step = 1e-5) {
  const std::size_t M = problem.dof();
  if (theta.size() != M)
    throw CalibrationError("theta has length " + std::to_string(theta.size()) + ", expected " + std::to_string(M));
  LossAndGradient out;
  out.gradient.assign(M, 0.0);

  if (mode == GradientMode::CentralDifference) {
    out.loss = total_loss(problem, theta, &out.per_scenario);
    if (!std::isfinite(out.loss)) throw CalibrationError("non-finite loss at theta");
    out.gradient = central_difference([&](std::span<const double> t) { return total_loss(problem, t); }, theta,
                                      fd_step);
    return out;
  }

  bool any = false;
  std::vector<double> g_inf, g_death;
  for (const auto& sp : problem.scenarios) {
    BoundModel bound(sp.model, {theta.begin(), theta.end()});
    auto sens = simulate_sensitivity(bound, sp.x0, sp.observed.weeks, problem.dt_days);
    if (!sens.finite) throw CalibrationError("non-finite loss at theta (scenario '" + sp.model.scenario_id() + "')");
    auto l = detail::loss_impl(sens.outputs, sp.observed, &g_inf, &g_death);
    if (!l) {
      out.per_scenario.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    any = true;
    out.per_scenario.push_back(*l);
    out.loss += *l;
    for (std::size_t i = 0; i < g_inf.size(); ++i) {
      const double* ri = &sens.d_infections[i * M];
      const double* rd = &sens.d_deaths[i * M];
      for (std::size_t j = 0; j < M; ++j) out.gradient[j] += g_inf[i] * ri[j] + g_death[i] * rd[j];
    }
  }
  if (!any) throw CalibrationError("all data masked: no scenario has observed entries");
  if (!std::isfinite(out.loss)) throw CalibrationError("non-finite loss at theta");
  return out;
}

inline std::vector<double> gradient(const CalibrationProblem& problem, std::span<const double> theta,
                                    const CalibrationConfig& config) {
  return loss_and_gradient(problem, theta, config.gradient, config.fd_step).gradient;
}

struct CalibrationResult {
  std::vector<double> theta_star;
  std::vector<std::string> names;
  std::vector<double> loss_history;
  std::vector<double> lr_history;
  std::vector<std::string> constraint_report;  // parameters negative at theta_star
  std::vector<double> per_scenario_fit;
  double final_loss = 0.0;
};

struct Objective {
  double loss = 0.0;
  std::vector<double> gradient;
};

// Adam with a ReduceLROnPlateau-style schedule. loss_history[k] is the loss
// at iterate k (max_steps + 1 entries). Returns the lowest-loss iterate;
// values are never projected or clipped.
inline CalibrationResult minimize_adam(const std::function<Objective(std::span<const double>)>& objective,
                                       std::vector<double> theta0, const CalibrationConfig& config) {
  config.check();
  CalibrationResult r;
  std::vector<double> theta = std::move(theta0);
  const std::size_t M = theta.size();
  std::vector<double> m(M, 0.0), v(M, 0.0);
  double lr = config.learning_rate;
  double best_sched = std::numeric_limits<double>::infinity();
  std::size_t bad = 0;
  double best_loss = std::numeric_limits<double>::infinity();
  double b1t = 1.0, b2t = 1.0;

  for (std::size_t k = 0;; ++k) {
    Objective obj = objective(theta);
    if (!std::isfinite(obj.loss)) {
      if (k == 0) throw CalibrationError("non-finite loss at initialization");
      break;
    }
    r.loss_history.push_back(obj.loss);
    r.lr_history.push_back(lr);
    if (obj.loss < best_loss) {
      best_loss = obj.loss;
      r.theta_star = theta;
    }
    if (k == config.max_steps) break;

    b1t *= config.beta1;
    b2t *= config.beta2;
    for (std::size_t j = 0; j < M; ++j) {
      const double g = obj.gradient[j];
      m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g;
      v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g * g;
      const double mhat = m[j] / (1.0 - b1t);
      const double vhat = v[j] / (1.0 - b2t);
      theta[j] -= lr * mhat / (std::sqrt(vhat) + config.epsilon);
    }

    if (obj.loss < best_sched * (1.0 - config.plateau.threshold)) {
      best_sched = obj.loss;
      bad = 0;
    } else if (++bad > config.plateau.patience) {
      lr = std::max(lr * config.plateau.factor, config.plateau.min_lr);
      bad = 0;
    }
  }
  r.final_loss = best_loss;
  return r;
}

// Fits the shared parameter vector to all scenarios at once. Shared
// parameters receive the sum of per-scenario gradients.
inline CalibrationResult calibrate(const CalibrationProblem& problem, std::vector<double> theta0,
                                   const CalibrationConfig& config) {
  const std::size_t M = problem.dof();
  if (theta0.size() != M) throw CalibrationError("initial theta has the wrong length");
  bool any = false;
  for (const auto& s : problem.scenarios) any = any || s.observed.observed_count() > 0;
  if (!any) throw CalibrationError("all data masked: no scenario has observed entries");

  auto objective = [&](std::span<const double> theta) -> Objective {
    try {
      auto lg = loss_and_gradient(problem, theta, config.gradient, config.fd_step);
      return {lg.loss, std::move(lg.gradient)};
    } catch (const CalibrationError&) {
      return {std::numeric_limits<double>::infinity(), {}};
    }
  };
  auto r = minimize_adam(objective, std::move(theta0), config);
  r.names = problem.scenarios.front().model.parameters().flat_names();
  for (std::size_t j = 0; j < M; ++j)
    if (r.theta_star[j] < 0.0) r.constraint_report.push_back(r.names[j]);
  total_loss(problem, r.theta_star, &r.per_scenario_fit);
  return r;
}

}  // namespace epiagent
