#include <catch_amalgamated.hpp>

#include "sdr/discrete.hpp"
#include "sdr/sem.hpp"

using namespace sdr;
using Catch::Approx;

namespace {

// Evaluate one node's structural formula on explicitly set parent values.
double eval_formula(const SemSpec& spec, const std::string& node, const std::map<std::string, double>& values) {
  const int k = spec.node_index(node);
  std::vector<double> v(spec.nodes.size(), 0.0);
  for (const auto& [nm, val] : values) v[static_cast<std::size_t>(spec.node_index(nm))] = val;
  return spec.nodes[static_cast<std::size_t>(k)].formula.eval(v);
}

}  // namespace

TEST_CASE("sim1 transcription") {
  auto spec = sim1_spec();
  REQUIRE(spec.K == 3);
  SECTION("outcome formula at t=3 is expit(L2*A3 + A2*L3 + L3*A3)") {
    const double l2 = 0.7, l3 = -1.1;
    const double expect = expit(l2 * 1 + 1 * l3 + l3 * 1);
    REQUIRE(eval_formula(spec, "Y3", {{"L2", l2}, {"L3", l3}, {"A2", 1}, {"A3", 1}}) ==
            Approx(expect).margin(1e-15));
    REQUIRE(eval_formula(spec, "Y3", {{"L2", l2}, {"L3", l3}, {"A2", 0}, {"A3", 0}}) == Approx(0.5).margin(1e-15));
  }
  SECTION("L3 mean is L1*A2 + A1*L2 + L2*A2") {
    REQUIRE(eval_formula(spec, "L3", {{"L1", 2.0}, {"L2", 3.0}, {"A1", 1}, {"A2", 1}}) ==
            Approx(2.0 + 3.0 + 3.0).margin(1e-15));
  }
  SECTION("deterministic intermediate outcomes are zero") {
    auto vals = sample_node_values(spec, 200, 5);
    const int y1 = spec.node_index("Y1"), y2 = spec.node_index("Y2");
    REQUIRE(vals.col(y1).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE(vals.col(y2).cwiseAbs().maxCoeff() == 0.0);
  }
  SECTION("mean of A1 is 1/2 by symmetry") {
    auto ds = sample(spec, 4000, 42);
    const double m = ds.treatment[0].cast<double>().mean();
    REQUIRE(std::fabs(m - 0.5) <= 4.0 * std::sqrt(0.25 / 4000));
  }
  SECTION("sampler determinism") {
    auto a = sample(spec, 500, 7);
    auto b = sample(spec, 500, 7);
    REQUIRE((a.outcome == b.outcome).all());
    REQUIRE((a.covariates[2].array() == b.covariates[2].array()).all());
  }
}

TEST_CASE("sim2 transcription") {
  auto spec = sim2_spec();
  REQUIRE(spec.K == 5);
  SECTION("treatment formula at t=2 is A1 * expit(1.7 - 2*1{expit(Z2) > 0.9})") {
    const double z_hi = logit(0.95), z_lo = logit(0.5);
    REQUIRE(eval_formula(spec, "A2", {{"A1", 1}, {"Z2", z_hi}, {"I2", 1}}) == Approx(expit(-0.3)).margin(1e-12));
    REQUIRE(eval_formula(spec, "A2", {{"A1", 1}, {"Z2", z_lo}, {"I2", 0}}) == Approx(expit(1.7)).margin(1e-12));
    REQUIRE(eval_formula(spec, "A2", {{"A1", 0}, {"I2", 0}}) == 0.0);
    // indicator thresholds: I2 at 0.9
    REQUIRE(eval_formula(spec, "I2", {{"Z2", logit(0.91)}}) == 1.0);
    REQUIRE(eval_formula(spec, "I2", {{"Z2", logit(0.89)}}) == 0.0);
  }
  SECTION("t=5 risk score includes 1.5*W*L4") {
    const double base = eval_formula(spec, "Z5", {{"L4", 2.0}, {"L5", 1.0}, {"W", 0.0}});
    const double with_w = eval_formula(spec, "Z5", {{"L4", 2.0}, {"L5", 1.0}, {"W", 1.0}});
    REQUIRE(with_w - base == Approx(1.5 * 1.0 * 2.0).margin(1e-12));
    REQUIRE(base == Approx(-1.0 + 0.25 * 2.0 + 0.5 * 1.0 - 0.1 * 1.0 * 2.0).margin(1e-12));
  }
  SECTION("treatment is monotone: once off standard of care, stays off") {
    auto ds = sample(spec, 5000, 11);
    for (int t = 2; t <= 5; ++t)
      for (int i = 0; i < ds.n; ++i)
        REQUIRE(ds.treatment[t - 1][i] <= ds.treatment[t - 2][i]);
  }
  SECTION("W is recorded as the baseline column") {
    auto ds = sample(spec, 10, 3);
    REQUIRE(ds.baseline_names == std::vector<std::string>{"L0_W"});
    REQUIRE(ds.covariate_names[4] ==
            std::vector<std::string>{"L5_ylag", "L5_l", "L5_z", "L5_i"});
  }
}

TEST_CASE("formula validation") {
  SemSpec s;
  s.K = 1;
  s.nodes.push_back({"A1", SemNode::Kind::Bernoulli, Expr::node("L9"), 0.0, SemNode::Role::Treatment, 1, -1, ""});
  s.nodes.push_back({"Y", SemNode::Kind::Bernoulli, Expr::constant(0.5), 0.0, SemNode::Role::Outcome, 1, -1, ""});
  REQUIRE_THROWS_WITH(s.validate(), Catch::Matchers::ContainsSubstring("undefined node"));
}

TEST_CASE("truth_q0") {
  SECTION("constant outcome gives the constant") {
    SemSpec s;
    s.K = 1;
    s.nodes.push_back({"L1", SemNode::Kind::Normal, Expr::constant(0.0), 1.0, SemNode::Role::Covariate, 1, 1, "l"});
    s.nodes.push_back({"A1", SemNode::Kind::Bernoulli, Expr::constant(0.5), 0.0, SemNode::Role::Treatment, 1, -1, ""});
    s.nodes.push_back({"Y", SemNode::Kind::Deterministic, Expr::constant(0.37), 0.0, SemNode::Role::Outcome, 1, -1, ""});
    s.validate();
    auto t = truth_q0(s, 1000, 3);
    REQUIRE(t.value == Approx(0.37).margin(1e-14));
    REQUIRE(t.mc_se == Approx(0.0).margin(1e-14));
  }
  SECTION("two independent seeds agree within joint Monte Carlo error") {
    auto spec = sim1_spec();
    auto a = truth_q0(spec, 400000, 1);
    auto b = truth_q0(spec, 400000, 2);
    const double joint = std::sqrt(a.mc_se * a.mc_se + b.mc_se * b.mc_se);
    REQUIRE(std::fabs(a.value - b.value) <= 4.0 * joint);
  }
}

TEST_CASE("intervention consistency: intervened sampler mean equals truth_q0") {
  auto spec = sim1_spec();
  auto ds = sample(spec, 200000, 5, /*intervene=*/true);
  auto t = truth_q0(spec, 200000, 6);
  const double se_s = std::sqrt(ds.outcome.square().mean() / 200000.0);
  REQUIRE(std::fabs(ds.outcome.mean() - t.value) <= 4.0 * std::sqrt(se_s * se_s + t.mc_se * t.mc_se));
  // every treatment is 1 under the intervention
  for (int tt = 1; tt <= 3; ++tt) REQUIRE((ds.treatment[tt - 1] == 1).all());
}

namespace {

// Discrete DGP expressed as a SEM, for cross-validating the two oracles.
SemSpec sem_from_binary_dgp() {
  SemSpec s;
  s.K = 1;
  s.name = "tiny";
  // L1 ~ Bern(0.4) (as a two-point covariate), A1 ~ Bern(0.3 + 0.4 L1), Y ~ Bern(0.2 + 0.3 L1 + 0.3 A1)
  s.nodes.push_back({"L1", SemNode::Kind::Bernoulli, Expr::constant(0.4), 0.0, SemNode::Role::Covariate, 1, 1, "l"});
  s.nodes.push_back({"A1", SemNode::Kind::Bernoulli,
                     Expr::constant(0.3) + Expr::constant(0.4) * Expr::node("L1"), 0.0,
                     SemNode::Role::Treatment, 1, -1, ""});
  s.nodes.push_back({"Y", SemNode::Kind::Bernoulli,
                     Expr::constant(0.2) + Expr::constant(0.3) * Expr::node("L1") +
                         Expr::constant(0.3) * Expr::node("A1"),
                     0.0, SemNode::Role::Outcome, 1, -1, ""});
  s.validate();
  return s;
}

DiscreteDgp dgp_matching_sem() {
  DiscreteDgp d;
  d.K = 1;
  d.l_support = {{0.0, 1.0}};
  d.y_support = {0.0, 1.0};
  d.l1 = {0.6, 0.4};
  d.pi = {{0.3, 0.7}};
  d.ytab.resize(4);
  // codeA(h1, a) = l1*2 + a
  d.ytab[0] = {0.8, 0.2};  // l=0,a=0
  d.ytab[1] = {0.5, 0.5};  // l=0,a=1
  d.ytab[2] = {0.5, 0.5};  // l=1,a=0
  d.ytab[3] = {0.2, 0.8};  // l=1,a=1
  return d;
}

}  // namespace

TEST_CASE("SEM Monte Carlo truth matches exhaustive enumeration on a shared law") {
  auto sem = sem_from_binary_dgp();
  auto dgp = dgp_matching_sem();
  const double exact = exact_q_all(dgp)[0][0];  // 0.6*0.5 + 0.4*0.8
  REQUIRE(exact == Approx(0.62).margin(1e-15));
  auto t = truth_q0(sem, 400000, 9);
  REQUIRE(std::fabs(t.value - exact) <= 4.0 * t.mc_se);
}

TEST_CASE("truth_q1 conditional Monte Carlo") {
  SECTION("deterministic continuation is exact with zero MC error") {
    SemSpec s;
    s.K = 1;
    s.nodes.push_back({"L1", SemNode::Kind::Normal, Expr::constant(0.0), 1.0, SemNode::Role::Covariate, 1, 1, "l"});
    s.nodes.push_back({"A1", SemNode::Kind::Bernoulli, Expr::constant(0.5), 0.0, SemNode::Role::Treatment, 1, -1, ""});
    s.nodes.push_back({"Y", SemNode::Kind::Deterministic, expit_of(Expr::node("L1")), 0.0,
                       SemNode::Role::Outcome, 1, -1, ""});
    s.validate();
    auto pts = sample(s, 50, 23);
    auto [mean, se] = truth_q1(s, pts, 100, 24);
    for (int j = 0; j < pts.n; ++j) {
      REQUIRE(mean[j] == Approx(expit(pts.covariates[0](j, 0))).margin(1e-12));
      REQUIRE(se[j] == 0.0);
    }
  }
  SECTION("matches enumerated Q1 on the shared binary law") {
    auto sem = sem_from_binary_dgp();
    auto dgp = dgp_matching_sem();
    auto q1 = exact_q(dgp, 1);  // Q1(l) = P(Y=1 | l, A=1)
    auto pts = sample(sem, 60, 31);
    auto [mean, se] = truth_q1(sem, pts, 4000, 32);
    for (int j = 0; j < pts.n; ++j) {
      const int l = static_cast<int>(pts.covariates[0](j, 0));
      REQUIRE(std::fabs(mean[j] - q1[static_cast<std::size_t>(l)]) <= 4.0 * se[j] + 1e-9);
    }
  }
  SECTION("doubling reps shrinks the MC-SE roughly by sqrt(2)") {
    auto spec = sim1_spec();
    auto pts = sample(spec, 30, 41);
    auto [m1, s1] = truth_q1(spec, pts, 4000, 42);
    auto [m2, s2] = truth_q1(spec, pts, 8000, 42);
    const double ratio = s2.mean() / s1.mean();
    REQUIRE(ratio == Approx(1.0 / std::sqrt(2.0)).epsilon(0.2));
  }
}
