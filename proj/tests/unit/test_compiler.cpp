#include <gtest/gtest.h>

#include <random>

#include "builders.hpp"
#include "epiagent/compiler.hpp"
#include "random_graphs.hpp"

using namespace epiagent;
using namespace testing_support;

namespace {

std::vector<double> eval_rhs(const CompiledModel& m, const std::vector<double>& x, double t,
                             const std::vector<double>& theta) {
  std::vector<double> ext(m.extended_size(), 0.0), dx(m.extended_size());
  std::copy(x.begin(), x.end(), ext.begin());
  m.rhs(ext, t, theta, dx);
  return dx;
}

std::vector<double> random_state(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> x(n);
  for (auto& v : x) v = u(rng);
  return x;
}

}  // namespace

TEST(Compile, SeirRhsMatchesClosedForm) {
  const auto model = compile(seir(), scenario("s", {{"S", 1.0}}), PatchStructure::single(),
                             params({{"beta", 0.4}, {"sigma", 0.2}, {"gamma", 0.1}}));
  std::mt19937_64 rng(1);
  const auto theta = model.default_theta();  // beta, gamma, sigma
  ASSERT_EQ(theta, (std::vector<double>{0.4, 0.1, 0.2}));
  for (int i = 0; i < 50; ++i) {
    const auto x = random_state(rng, 4);
    const double S = x[0], E = x[1], I = x[2];
    const auto dx = eval_rhs(model, x, 3.0, theta);
    EXPECT_NEAR(dx[0], -0.4 * S * I, 1e-15);
    EXPECT_NEAR(dx[1], 0.4 * S * I - 0.2 * E, 1e-15);
    EXPECT_NEAR(dx[2], 0.2 * E - 0.1 * I, 1e-15);
    EXPECT_NEAR(dx[3], 0.1 * I, 1e-15);
    EXPECT_NEAR(dx[model.infections_slot(0)], 0.4 * S * I, 1e-15);
    EXPECT_EQ(dx[model.deaths_slot(0)], 0.0);
  }
}

TEST(Compile, NoTransitionsGivesZeroRhs) {
  const FlowGraph g({comp("S")}, {});
  const auto model = compile(g, scenario("s", {{"S", 1.0}}), PatchStructure::single(), ParameterSet{});
  for (double t : {0.0, 3.5, 100.0}) {
    const auto dx = eval_rhs(model, {0.7}, t, {});
    for (double v : dx) EXPECT_EQ(v, 0.0);
  }
}

TEST(Compile, UnitEscapeEqualsNoEscape) {
  const auto with = sveird();
  std::vector<Transition> edges;
  for (auto t : with.transitions()) {
    if (auto* inf = std::get_if<InfectionFlow>(&t.kind)) inf->escape_param.reset();
    edges.push_back(t);
  }
  const FlowGraph without(with.compartments(), edges);
  auto s = parse_scenarios(read_fixture("scenarios/six_scenarios.json"))[0];  // escape overridden to 1.0
  const auto p_with = parse_parameters(read_fixture("params/sveird_true.json"));
  std::map<std::string, ParamEntry> e = p_with.entries();
  e.erase("escape");
  const ParameterSet p_without(e);
  auto s_without = s;
  s_without.overrides.clear();
  const auto m1 = compile(with, s, PatchStructure::single(), p_with);
  const auto m2 = compile(without, s_without, PatchStructure::single(), p_without);
  ASSERT_EQ(m1.default_theta(), m2.default_theta());
  std::mt19937_64 rng(2);
  for (int i = 0; i < 100; ++i) {
    const auto x = random_state(rng, m1.num_slots());
    EXPECT_EQ(eval_rhs(m1, x, 7.0 * i, m1.default_theta()), eval_rhs(m2, x, 7.0 * i, m2.default_theta()));
  }
}

TEST(Compile, Errors) {
  const auto sc = scenario("s", {{"S", 1.0}});
  const auto p = params({{"beta", 0.4}, {"sigma", 0.2}, {"gamma", 0.1}});
  auto bad = FlowGraph({comp("S"), comp("E"), comp("I"), comp("R")},
                       {infection("S", "E", "beta", {"I"}), linear("E", "I", "sigma"), linear("I", "R", "gamma"),
                        linear("S", "R", "rho")});
  auto p_bad = params({{"beta", 0.4}, {"sigma", 0.2}, {"gamma", 0.1}, {"rho", 0.1}});
  EXPECT_THROW(compile(bad, sc, PatchStructure::single(), p_bad), CompileError);
  CompileOptions allow;
  allow.allow_unverified = true;
  const auto m = compile(bad, sc, PatchStructure::single(), p_bad, allow);
  EXPECT_FALSE(m.verified());

  EXPECT_THROW(compile(seir(), sc, PatchStructure::single(), params({{"beta", 0.4}, {"sigma", 0.2}})), CompileError);
  EXPECT_THROW(compile(seir(), sc, PatchStructure::single(),
                       params({{"beta", 0.4}, {"sigma", 0.2}, {"gamma", 0.1}, {"zeta", 1.0}})),
               CompileError);
  auto over = sc;
  over.overrides["nope"] = 1.0;
  EXPECT_THROW(compile(seir(), over, PatchStructure::single(), p), CompileError);

  auto sv = FlowGraph({comp("S"), comp("E"), comp("I"), comp("R"), comp("V")},
                      {infection("S", "E", "beta", {"I"}), linear("E", "I", "sigma"), linear("I", "R", "gamma"),
                       scheduled("S", "V", "vax")});
  try {
    compile(sv, sc, PatchStructure::single(), p);
    FAIL();
  } catch (const CompileError& e) {
    EXPECT_NE(std::string(e.what()).find("unresolved schedule 'vax'"), std::string::npos);
  }
  CompileOptions bind;
  bind.schedule_bindings["vax"] = "uptake";
  auto with_sched = sc;
  with_sched.schedules["uptake"] = Schedule{{0}, {0.01}};
  EXPECT_NO_THROW(compile(sv, with_sched, PatchStructure::single(), p, bind));
}

TEST(BindParameters, CountsAndOrdering) {
  const auto p = params({{"beta", 0.4}, {"sigma", 0.2}, {"gamma", 0.1}});
  EXPECT_EQ(p.dof(), 3u);
  EXPECT_EQ(p.flat_names(), (std::vector<std::string>{"beta", "gamma", "sigma"}));
  EXPECT_EQ(flat_index(p, "beta"), 0u);
  EXPECT_EQ(flat_index(p, "gamma"), 1u);
  EXPECT_EQ(flat_index(p, "sigma"), 2u);
  EXPECT_THROW(flat_index(p, "mu"), Error);
  EXPECT_EQ(flat_index(p, "beta", 0), 0u);
  EXPECT_THROW(flat_index(p, "beta", 1), Error);

  std::map<std::string, ParamEntry> e = {{"beta", ParamEntry{Knots{{0, 4, 8, 12}, {0.5, 0.4, 0.3, 0.2}}}},
                                         {"sigma", ParamEntry{0.2}},
                                         {"gamma", ParamEntry{0.1}}};
  const ParameterSet tv(e);
  EXPECT_EQ(tv.dof(), 6u);
  EXPECT_EQ(flat_index(tv, "beta", 2), 2u);
  EXPECT_EQ(flat_index(tv, "gamma"), 4u);
  EXPECT_THROW(flat_index(tv, "beta", 4), Error);
  EXPECT_THROW(flat_index(tv, "beta"), Error);
}

TEST(BindParameters, RoundTripAndLengthMismatch) {
  const auto model = compile(seir(), scenario("s", {{"S", 1.0}}), PatchStructure::single(),
                             params({{"beta", 0.4}, {"sigma", 0.2}, {"gamma", 0.1}}));
  const auto bound = bind_parameters(model, {0.9, 0.8, 0.7});
  const auto named = bound.named();
  EXPECT_EQ(std::get<double>(named.at("beta").value), 0.9);
  EXPECT_EQ(std::get<double>(named.at("gamma").value), 0.8);
  EXPECT_EQ(std::get<double>(named.at("sigma").value), 0.7);
  EXPECT_EQ(named.flatten(), bound.theta());
  EXPECT_THROW(bind_parameters(model, {0.1, 0.2}), Error);

  std::vector<double> x = {0.5, 0.2, 0.2, 0.1, 0, 0}, d1(6), d2(6);
  bind_parameters(model, {0.9, 0.8, 0.7}).rhs(x, 1.0, d1);
  bind_parameters(model, {0.9, 0.8, 0.7}).rhs(x, 1.0, d2);
  EXPECT_EQ(d1, d2);
}

TEST(BindParameters, NonTrainableEntriesExcluded) {
  std::map<std::string, ParamEntry> e = {{"beta", ParamEntry{0.4}}, {"sigma", ParamEntry{0.2, false}},
                                         {"gamma", ParamEntry{0.1}}};
  const ParameterSet p(e);
  EXPECT_EQ(p.dof(), 2u);
  EXPECT_EQ(p.flat_names(), (std::vector<std::string>{"beta", "gamma"}));
  const auto model = compile(seir(), scenario("s", {{"S", 1.0}}), PatchStructure::single(), p);
  const auto dx = eval_rhs(model, {0.5, 0.3, 0.1, 0.1}, 0.0, {0.4, 0.1});
  EXPECT_NEAR(dx[2], 0.2 * 0.3 - 0.1 * 0.1, 1e-15);
}

TEST(Compile, TimeVaryingKnotsInterpolateInWeeks) {
  std::map<std::string, ParamEntry> e = {{"beta", ParamEntry{Knots{{0, 2}, {1.0, 3.0}}}},
                                         {"sigma", ParamEntry{0.2}},
                                         {"gamma", ParamEntry{0.1}}};
  const auto model = compile(seir(), scenario("s", {{"S", 1.0}}), PatchStructure::single(), ParameterSet(e));
  const std::vector<double> x = {1.0, 0.0, 1.0, 0.0};
  const auto theta = model.default_theta();
  EXPECT_DOUBLE_EQ(eval_rhs(model, x, 0.0, theta)[model.infections_slot(0)], 1.0);
  EXPECT_DOUBLE_EQ(eval_rhs(model, x, 7.0, theta)[model.infections_slot(0)], 2.0);
  EXPECT_DOUBLE_EQ(eval_rhs(model, x, 70.0, theta)[model.infections_slot(0)], 3.0);
}

TEST(Compile, IncidenceFallsBackToInfectiousWithoutExposed) {
  const FlowGraph sir({comp("S"), comp("I"), comp("R")}, {infection("S", "I", "beta", {"I"}), linear("I", "R", "gamma")});
  // S -> I is R2; compile the unverified graph to inspect the accounting only.
  CompileOptions o;
  o.allow_unverified = true;
  const auto model = compile(sir, scenario("s", {{"S", 1.0}}), PatchStructure::single(),
                             params({{"beta", 0.5}, {"gamma", 0.1}}), o);
  const auto dx = eval_rhs(model, {0.6, 0.4, 0.0}, 0.0, model.default_theta());
  EXPECT_NEAR(dx[model.infections_slot(0)], 0.5 * 0.6 * 0.4, 1e-15);
}

TEST(Compile, ContactMatrixForceOfInfection) {
  PatchStructure ps{{"a", "b"}, {100, 300}, {{1.0, 0.5}, {0.25, 2.0}}};
  const auto sc = Scenario{"s", "", {}, {}, {}, InitialFractions{{{{"S", 1.0}}}}};
  const auto p = params({{"beta", 0.3}, {"sigma", 0.2}, {"gamma", 0.1}});
  const auto model = compile(seir(), sc, ps, p);
  std::vector<double> x = {0.6, 0.1, 0.2, 0.1, 0.8, 0.05, 0.1, 0.05};
  const auto dx = eval_rhs(model, x, 0.0, model.default_theta());
  const double inc_a = 0.3 * 0.6 * (1.0 * 0.2 + 0.5 * 0.1);
  const double inc_b = 0.3 * 0.8 * (0.25 * 0.2 + 2.0 * 0.1);
  EXPECT_NEAR(dx[model.infections_slot(0)], inc_a, 1e-15);
  EXPECT_NEAR(dx[model.infections_slot(1)], inc_b, 1e-15);

  CompileOptions norm;
  norm.row_normalize_contacts = true;
  const auto mn = compile(seir(), sc, ps, p, norm);
  const auto dn = eval_rhs(mn, x, 0.0, mn.default_theta());
  EXPECT_NEAR(dn[mn.infections_slot(0)], 0.3 * 0.6 * (0.2 / 1.5 + 0.5 * 0.1 / 1.5), 1e-15);
  EXPECT_NEAR(dn[mn.infections_slot(1)], 0.3 * 0.8 * (0.25 * 0.2 / 2.25 + 2.0 * 0.1 / 2.25), 1e-15);

  PatchStructure bad{{"a", "b"}, {100, 300}, {{1.0, -0.5}, {0.25, 2.0}}};
  EXPECT_THROW(compile(seir(), sc, bad, p), CompileError);
}

TEST(Compile, MassClosureOnRandomGraphs) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const auto m = random_model(rng);
    for (int k = 0; k < 5; ++k) {
      const auto x = random_state(rng, m.model.num_slots());
      const auto dx = eval_rhs(m.model, x, 10.0 * k, m.model.default_theta());
      double sum = 0.0, scale = 0.0;
      for (std::size_t i = 0; i < m.model.num_slots(); ++i) {
        sum += dx[i];
        scale += std::abs(dx[i]);
      }
      EXPECT_LE(std::abs(sum), 1e-12) << trial;
    }
  }
}

TEST(Compile, StructuralPairsMatchGraph) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = random_model(rng);
    std::set<std::pair<std::string, std::string>> expected;
    for (const auto& t : m.graph.transitions()) expected.emplace(t.source, t.target);
    EXPECT_EQ(m.model.structural_pairs(), expected);
  }
}

TEST(Compile, InfectionFlowIsBilinear) {
  const auto model = compile(sveird(), parse_scenarios(read_fixture("scenarios/six_scenarios.json"))[3],
                             PatchStructure::single(), parse_parameters(read_fixture("params/sveird_true.json")));
  const auto theta = model.default_theta();
  std::mt19937_64 rng(13);
  for (const auto& f : model.flows()) {
    if (f.kind != FlowTerm::Kind::Infection) continue;
    const auto src_infectious = f.pressure.front().first;
    for (int i = 0; i < 20; ++i) {
      auto x = random_state(rng, model.extended_size());
      auto value = [&](std::size_t slot, double v) {
        auto y = x;
        y[slot] = v;
        return model.flow_value(f, y, 0.0, theta);
      };
      for (std::size_t slot : {f.source, src_infectious}) {
        const double a = x[slot], h = 0.1;
        // Second difference vanishes and the slope equals value / coordinate.
        EXPECT_NEAR(value(slot, a + h) - 2 * value(slot, a) + value(slot, a - h), 0.0, 1e-15);
        EXPECT_NEAR((value(slot, a + h) - value(slot, a - h)) / (2 * h), value(slot, a) / a, 1e-12);
        EXPECT_EQ(value(slot, 0.0), 0.0);
      }
    }
  }
}

TEST(Compile, OverrideLocality) {
  const auto scenarios = parse_scenarios(read_fixture("scenarios/six_scenarios.json"));
  const auto p = parse_parameters(read_fixture("params/sveird_true.json"));
  const auto g = sveird();
  auto a = scenarios[0], b = scenarios[1];
  const auto ma = compile(g, a, PatchStructure::single(), p);
  const auto mb = compile(g, b, PatchStructure::single(), p);
  auto a2 = a;
  a2.overrides["escape"] = 2.5;
  const auto ma2 = compile(g, a2, PatchStructure::single(), p);
  const auto mb2 = compile(g, b, PatchStructure::single(), p);
  std::mt19937_64 rng(14);
  bool changed = false;
  for (int i = 0; i < 20; ++i) {
    const auto x = random_state(rng, ma.num_slots());
    EXPECT_EQ(eval_rhs(mb, x, 1.0, p.flatten()), eval_rhs(mb2, x, 1.0, p.flatten()));
    changed = changed || eval_rhs(ma, x, 1.0, p.flatten()) != eval_rhs(ma2, x, 1.0, p.flatten());
  }
  EXPECT_TRUE(changed);
}

TEST(Compile, ResidualHookIsAdditive) {
  CompileOptions o;
  o.residual = [](std::span<const double>, double, std::span<double> dx) { dx[0] += 0.5; };
  const auto p = params({{"beta", 0.4}, {"sigma", 0.2}, {"gamma", 0.1}});
  const auto sc = scenario("s", {{"S", 1.0}});
  const auto plain = compile(seir(), sc, PatchStructure::single(), p);
  const auto hooked = compile(seir(), sc, PatchStructure::single(), p, o);
  const std::vector<double> x = {0.5, 0.2, 0.2, 0.1};
  const auto d0 = eval_rhs(plain, x, 0.0, p.flatten());
  const auto d1 = eval_rhs(hooked, x, 0.0, p.flatten());
  EXPECT_DOUBLE_EQ(d1[0] - d0[0], 0.5);
  for (std::size_t i = 1; i < d0.size(); ++i) EXPECT_EQ(d0[i], d1[i]);
}

TEST(ParameterFile, FormatsAndErrors) {
  const auto spec = parse_model_spec(R"({"parameters": {"beta": 0.3, "gamma": {"value": 0.1, "trainable": false},
      "sigma": {"knots": {"times": [0, 4], "values": [0.2, 0.25]}}}, "schedule_bindings": {"vax": "uptake"}})");
  EXPECT_EQ(spec.params.dof(), 3u);
  EXPECT_EQ(spec.schedule_bindings.at("vax"), "uptake");
  const auto bare = parse_model_spec(R"({"beta": 0.3, "schedule_bindings": {"vax": "uptake"}})");
  EXPECT_EQ(bare.params.dof(), 1u);
  EXPECT_THROW(parse_parameters(R"({"beta": "high"})"), ParseError);
  EXPECT_THROW(parse_parameters(R"({"beta": {"knots": {"times": [1, 0], "values": [1, 2]}}})"), Error);
  const auto round = parse_parameters(to_json(spec.params).dump());
  EXPECT_EQ(round.flatten(), spec.params.flatten());
  EXPECT_EQ(round.flat_names(), spec.params.flat_names());
}
