#pragma once

// Parametric projection ensembles around calibrated parameters.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "epiagent/compiler.hpp"
#include "epiagent/error.hpp"
#include "epiagent/parallel.hpp"
#include "epiagent/simulator.hpp"

namespace epiagent {

// Linear interpolation between order statistics (h = (n - 1) q).
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw Error("quantile of an empty sample");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

struct Band {
  std::vector<double> median, lower50, upper50, lower80, upper80;
};

struct EnsembleBands {
  std::size_t weeks = 0;
  std::size_t patches = 0;
  Band infections;  // [w * P + p]
  Band deaths;
  std::size_t ensemble_size = 0;  // members kept
  std::size_t dropped = 0;
  double perturbation_scale = 0.0;
};

inline EnsembleBands bands_from_members(const std::vector<WeeklyOutputs>& members) {
  if (members.empty()) throw Error("ensemble has no members");
  EnsembleBands b;
  b.weeks = members.front().weeks;
  b.patches = members.front().patches;
  b.ensemble_size = members.size();
  const std::size_t n = b.weeks * b.patches;
  for (const auto& m : members)
    if (m.weeks != b.weeks || m.patches != b.patches) throw Error("ensemble members differ in shape");

  auto fill = [&](Band& band, auto get) {
    std::vector<double> sample(members.size());
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < members.size(); ++k) sample[k] = get(members[k])[i];
      std::sort(sample.begin(), sample.end());
      band.median.push_back(quantile_sorted(sample, 0.5));
      band.lower50.push_back(quantile_sorted(sample, 0.25));
      band.upper50.push_back(quantile_sorted(sample, 0.75));
      band.lower80.push_back(quantile_sorted(sample, 0.10));
      band.upper80.push_back(quantile_sorted(sample, 0.90));
    }
  };
  fill(b.infections, [](const WeeklyOutputs& w) -> const std::vector<double>& { return w.infections; });
  fill(b.deaths, [](const WeeklyOutputs& w) -> const std::vector<double>& { return w.deaths; });
  return b;
}

// theta_i = theta* (1 + scale z_i), z_i iid standard normal per component.
// Members that fail to integrate stably are dropped and counted.
inline EnsembleBands project_ensemble(const CompiledModel& model, const InitialCondition& x0,
                                      const std::vector<double>& theta_star, double perturbation_scale,
                                      std::size_t ensemble_size, std::uint64_t seed, std::size_t horizon_weeks,
                                      double dt_days = 1.0, std::size_t jobs = 1) {
  if (!(perturbation_scale >= 0.0)) throw Error("perturbation scale must be >= 0");
  if (ensemble_size == 0) throw Error("ensemble size must be at least 1");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> thetas(ensemble_size, theta_star);
  for (auto& th : thetas)
    for (auto& v : th) v *= 1.0 + perturbation_scale * normal(rng);

  std::vector<std::optional<WeeklyOutputs>> runs(ensemble_size);
  parallel_for(ensemble_size, jobs, [&](std::size_t i) {
    auto res = simulate(BoundModel(model, thetas[i]), x0, horizon_weeks, dt_days);
    if (res.stability.stable) runs[i] = std::move(res.trajectory.weekly);
  });

  std::vector<WeeklyOutputs> kept;
  for (auto& r : runs)
    if (r) kept.push_back(std::move(*r));
  if (kept.empty()) throw Error("every ensemble member was non-finite");
  auto bands = bands_from_members(kept);
  bands.dropped = ensemble_size - kept.size();
  bands.perturbation_scale = perturbation_scale;
  return bands;
}

}  // namespace epiagent
