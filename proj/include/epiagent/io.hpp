#pragma once

// File formats: patch and contact CSVs, observed-data CSV, trajectory and
// calibration exports, and the run configuration document.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "epiagent/agents.hpp"
#include "epiagent/calibration.hpp"
#include "epiagent/compiler.hpp"
#include "epiagent/ensemble.hpp"
#include "epiagent/error.hpp"
#include "epiagent/simulator.hpp"
#include "epiagent/vnv.hpp"

namespace epiagent::io {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << content;
}

// Round-trippable, locale-independent formatting.
inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Plain comma-separated rows (no quoting). Blank lines are skipped.
inline std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(trim(cell));
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(std::move(cells));
  }
  return rows;
}

inline double parse_number(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError(where + ": not a number: '" + s + "'");
  }
}

inline std::map<std::string, std::size_t> header_index(const std::vector<std::string>& header,
                                                       const std::vector<std::string>& required,
                                                       const std::string& what) {
  std::map<std::string, std::size_t> idx;
  for (std::size_t i = 0; i < header.size(); ++i) idx[header[i]] = i;
  for (const auto& r : required)
    if (!idx.count(r)) throw ParseError(what + ": missing column '" + r + "'");
  return idx;
}

// patch_id,population; optional contact CSV with P rows of P numbers.
inline PatchStructure parse_patches(const std::string& patches_csv, const std::string& contact_csv = "") {
  auto rows = parse_csv(patches_csv);
  if (rows.empty()) throw ParseError("patch file is empty");
  auto idx = header_index(rows[0], {"patch_id", "population"}, "patch file");
  PatchStructure ps;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const std::string where = "patch file line " + std::to_string(r + 1);
    ps.ids.push_back(rows[r].at(idx["patch_id"]));
    ps.populations.push_back(parse_number(rows[r].at(idx["population"]), where));
  }
  if (!contact_csv.empty()) {
    auto crow = parse_csv(contact_csv);
    for (std::size_t r = 0; r < crow.size(); ++r) {
      std::vector<double> row;
      for (const auto& c : crow[r]) row.push_back(parse_number(c, "contact matrix row " + std::to_string(r + 1)));
      ps.contact.push_back(std::move(row));
    }
  }
  try {
    ps.check();
  } catch (const CompileError& e) {
    throw ParseError(e.what());
  }
  return ps;
}

// scenario_id,patch_id,week,cumulative_infections,cumulative_deaths in
// counts; weeks start at 1; blank cells and absent rows are unobserved.
inline Dataset parse_dataset(const std::string& csv, const PatchStructure& patches) {
  auto rows = parse_csv(csv);
  if (rows.empty()) throw ParseError("data file is empty");
  auto idx = header_index(rows[0], {"scenario_id", "patch_id", "week", "cumulative_infections", "cumulative_deaths"},
                          "data file");
  std::map<std::string, std::size_t> patch_of;
  for (std::size_t p = 0; p < patches.ids.size(); ++p) patch_of[patches.ids[p]] = p;
  const std::size_t P = patches.size();

  struct Row {
    std::size_t patch, week;
    std::string inf, death;
  };
  std::map<std::string, std::vector<Row>> by_scenario;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const std::string where = "data file line " + std::to_string(r + 1);
    auto cell = [&](const char* name) -> std::string {
      const auto i = idx[name];
      return i < rows[r].size() ? rows[r][i] : std::string();
    };
    auto it = patch_of.find(cell("patch_id"));
    if (it == patch_of.end()) throw ParseError(where + ": unknown patch '" + cell("patch_id") + "'");
    const double wk = parse_number(cell("week"), where);
    if (wk < 1 || wk != std::floor(wk)) throw ParseError(where + ": week must be a positive integer");
    by_scenario[cell("scenario_id")].push_back(
        {it->second, static_cast<std::size_t>(wk), cell("cumulative_infections"), cell("cumulative_deaths")});
  }

  Dataset ds;
  for (const auto& [sid, list] : by_scenario) {
    std::size_t T = 0;
    for (const auto& r : list) T = std::max(T, r.week);
    ObservedSeries obs{T, P, std::vector<double>(T * P, 0.0), std::vector<double>(T * P, 0.0),
                       std::vector<std::uint8_t>(T * P, 0), std::vector<std::uint8_t>(T * P, 0)};
    for (const auto& r : list) {
      const std::size_t i = (r.week - 1) * P + r.patch;
      const double N = patches.populations[r.patch];
      const std::string where = "data for scenario '" + sid + "' week " + std::to_string(r.week);
      if (!r.inf.empty()) {
        obs.infections[i] = parse_number(r.inf, where) / N;
        obs.infections_mask[i] = 1;
      }
      if (!r.death.empty()) {
        obs.deaths[i] = parse_number(r.death, where) / N;
        obs.deaths_mask[i] = 1;
      }
    }
    for (const auto* pair : {&obs.infections, &obs.deaths}) {
      const auto& mask = pair == &obs.infections ? obs.infections_mask : obs.deaths_mask;
      for (std::size_t p = 0; p < P; ++p) {
        double prev = 0.0;
        for (std::size_t w = 0; w < T; ++w) {
          const std::size_t i = w * P + p;
          if (!mask[i]) continue;
          if ((*pair)[i] < 0.0) throw ParseError("data for scenario '" + sid + "': negative cumulative value");
          if ((*pair)[i] < prev) throw ParseError("data for scenario '" + sid + "': cumulative series decreases");
          prev = (*pair)[i];
        }
      }
    }
    ds.emplace(sid, std::move(obs));
  }
  return ds;
}

// Observed-data CSV generated from a weekly output series (counts).
inline std::string dataset_csv_rows(const std::string& scenario_id, const WeeklyOutputs& w,
                                    const PatchStructure& patches) {
  std::string out;
  for (std::size_t t = 0; t < w.weeks; ++t)
    for (std::size_t p = 0; p < w.patches; ++p)
      out += scenario_id + "," + patches.ids[p] + "," + std::to_string(t + 1) + "," +
             num(w.infection(t, p) * patches.populations[p]) + "," + num(w.death(t, p) * patches.populations[p]) + "\n";
  return out;
}

inline const char* dataset_csv_header() {
  return "scenario_id,patch_id,week,cumulative_infections,cumulative_deaths\n";
}

inline std::string trajectory_csv(const Trajectory& traj, const std::vector<std::string>& patch_ids) {
  std::string out =
      "week,patch_id,cumulative_infections_frac,cumulative_deaths_frac,cumulative_infections_count,"
      "cumulative_deaths_count\n";
  const auto& w = traj.weekly;
  for (std::size_t t = 0; t < w.weeks; ++t)
    for (std::size_t p = 0; p < w.patches; ++p)
      out += std::to_string(t + 1) + "," + patch_ids[p] + "," + num(w.infection(t, p)) + "," + num(w.death(t, p)) +
             "," + num(w.infection(t, p) * traj.populations[p]) + "," + num(w.death(t, p) * traj.populations[p]) +
             "\n";
  return out;
}

inline std::string state_dump_csv(const Trajectory& traj) {
  std::string out = "step,day";
  for (const auto& s : traj.layout) out += "," + s.compartment + "@" + std::to_string(s.patch);
  out += "\n";
  for (std::size_t n = 0; n < traj.states.size(); ++n) {
    out += std::to_string(n) + "," + num(static_cast<double>(n) * traj.dt);
    for (double v : traj.states[n]) out += "," + num(v);
    out += "\n";
  }
  return out;
}

inline std::string theta_csv(const std::vector<std::string>& names, const std::vector<double>& theta) {
  std::string out = "name,value\n";
  for (std::size_t i = 0; i < names.size(); ++i) out += names[i] + "," + num(theta[i]) + "\n";
  return out;
}

inline std::vector<double> parse_theta_csv(const std::string& csv, const std::vector<std::string>& names) {
  auto rows = parse_csv(csv);
  std::map<std::string, double> values;
  for (std::size_t r = 1; r < rows.size(); ++r) values[rows[r].at(0)] = parse_number(rows[r].at(1), "theta file");
  std::vector<double> out;
  for (const auto& n : names) {
    auto it = values.find(n);
    if (it == values.end()) throw ParseError("theta file: missing parameter '" + n + "'");
    out.push_back(it->second);
  }
  return out;
}

inline std::string loss_history_csv(const CalibrationResult& r) {
  std::string out = "step,loss,learning_rate\n";
  for (std::size_t i = 0; i < r.loss_history.size(); ++i)
    out += std::to_string(i) + "," + num(r.loss_history[i]) + "," + num(r.lr_history[i]) + "\n";
  return out;
}

inline std::string bands_csv(const EnsembleBands& b, const std::vector<std::string>& patch_ids) {
  std::string out = "week,patch_id,output,median,lower50,upper50,lower80,upper80\n";
  for (std::size_t t = 0; t < b.weeks; ++t)
    for (std::size_t p = 0; p < b.patches; ++p) {
      const std::size_t i = t * b.patches + p;
      for (const auto& [name, band] : {std::pair<const char*, const Band*>{"cumulative_infections", &b.infections},
                                       {"cumulative_deaths", &b.deaths}})
        out += std::to_string(t + 1) + "," + patch_ids[p] + "," + name + "," + num(band->median[i]) + "," +
               num(band->lower50[i]) + "," + num(band->upper50[i]) + "," + num(band->lower80[i]) + "," +
               num(band->upper80[i]) + "\n";
    }
  return out;
}

// ---------------------------------------------------------------------------
// Run configuration

struct EnsembleSettings {
  std::size_t size = 200;
  double scale = 0.1;
};

struct RunConfig {
  SimulationSettings simulation;
  CalibrationConfig calibration;
  VnvTolerances vnv;
  LoopConfig loop;
  EnsembleSettings ensemble;
  bool row_normalize_contacts = false;
};

inline RunConfig parse_config(const std::string& text) {
  RunConfig c;
  if (trim(text).empty()) return c;
  const auto j = detail::parse_json_text(text);
  try {
    if (j.contains("simulation")) {
      const auto& s = j.at("simulation");
      c.simulation.dt_days = s.value("dt_days", c.simulation.dt_days);
      c.simulation.horizon_weeks = s.value("horizon_weeks", c.simulation.horizon_weeks);
    }
    if (j.contains("calibration")) {
      const auto& s = j.at("calibration");
      auto& k = c.calibration;
      k.learning_rate = s.value("learning_rate", k.learning_rate);
      k.max_steps = s.value("max_steps", k.max_steps);
      k.fd_step = s.value("fd_step", k.fd_step);
      k.seed = s.value("seed", k.seed);
      const std::string mode = s.value("gradient", std::string("forward-sensitivity"));
      if (mode == "forward-sensitivity") k.gradient = GradientMode::ForwardSensitivity;
      else if (mode == "central-finite-difference") k.gradient = GradientMode::CentralDifference;
      else throw ParseError("calibration.gradient: unknown mode '" + mode + "'");
      if (s.contains("plateau")) {
        const auto& p = s.at("plateau");
        k.plateau.factor = p.value("factor", k.plateau.factor);
        k.plateau.patience = p.value("patience", k.plateau.patience);
        k.plateau.min_lr = p.value("min_lr", k.plateau.min_lr);
        k.plateau.threshold = p.value("threshold", k.plateau.threshold);
      }
      k.check();
    }
    if (j.contains("vnv")) {
      const auto& s = j.at("vnv");
      auto& t = c.vnv;
      t.state_nonneg = s.value("state_nonneg", t.state_nonneg);
      t.mass = s.value("mass", t.mass);
      t.monotone = s.value("monotone", t.monotone);
      t.ordering = s.value("ordering", t.ordering);
      t.stall_fraction = s.value("stall_fraction", t.stall_fraction);
      t.stall_improvement = s.value("stall_improvement", t.stall_improvement);
    }
    if (j.contains("loop")) {
      const auto& s = j.at("loop");
      auto& l = c.loop;
      l.max_graph_iters = s.value("max_graph_iters", l.max_graph_iters);
      l.max_code_retries = s.value("max_code_retries", l.max_code_retries);
      l.max_generations = s.value("max_generations", l.max_generations);
      l.temperature_step = s.value("temperature_step", l.temperature_step);
      l.accept_loss = s.value("accept_loss", l.accept_loss);
      l.verify_graphs = s.value("verify_graphs", l.verify_graphs);
      l.check();
    }
    if (j.contains("retrieval")) c.loop.retrieval_k = j.at("retrieval").value("k", c.loop.retrieval_k);
    if (j.contains("ensemble")) {
      c.ensemble.size = j.at("ensemble").value("size", c.ensemble.size);
      c.ensemble.scale = j.at("ensemble").value("scale", c.ensemble.scale);
    }
    if (j.contains("contact")) c.row_normalize_contacts = j.at("contact").value("row_normalize", false);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("config: ") + e.what());
  } catch (const CalibrationError& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
  return c;
}

}  // namespace epiagent::io
