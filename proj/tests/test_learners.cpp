#include <catch_amalgamated.hpp>

#include "sdr/cross_validation.hpp"
#include "sdr/learners.hpp"
#include "sdr/rng.hpp"

#include "oracles/newton_logistic.hpp"

using namespace sdr;
using Catch::Approx;

namespace {

MatrixXd random_design(int n, int p, std::uint64_t seed) {
  RngStream rng(seed);
  MatrixXd X(n, p);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < p; ++j) X(i, j) = rng.normal();
  return X;
}

}  // namespace

TEST_CASE("intercept-only logistic equals logit of the weighted mean") {
  MatrixXd X(4, 0);
  ArrayXd y(4), w = ArrayXd::Ones(4), off = ArrayXd::Zero(4);
  y << 0, 1, 1, 1;
  auto fl = fit_logistic(X, y, w, &off, true);
  REQUIRE(fl.beta[0] == Approx(logit(0.75)).margin(1e-10));
}

TEST_CASE("offset reparameterization leaves predictions unchanged") {
  const int n = 80;
  MatrixXd X = random_design(n, 2, 11);
  RngStream rng(12);
  ArrayXd y(n), w = ArrayXd::Ones(n);
  for (int i = 0; i < n; ++i) y[i] = rng.bernoulli(expit(0.5 * X(i, 0) - X(i, 1)));
  ArrayXd off0 = ArrayXd::Zero(n), offc = ArrayXd::Constant(n, 2.5);
  auto f0 = fit_logistic(X, y, w, &off0);
  auto fc = fit_logistic(X, y, w, &offc);
  ArrayXd p0 = f0.predict(X, &off0);
  ArrayXd pc = fc.predict(X, &offc);
  REQUIRE((p0 - pc).abs().maxCoeff() < 1e-12);
  REQUIRE(fc.beta[0] == Approx(f0.beta[0] - 2.5).margin(1e-9));
}

TEST_CASE("IRLS matches the independent Newton oracle") {
  const int n = 200;
  MatrixXd X = random_design(n, 2, 21);
  RngStream rng(22);
  ArrayXd y(n), w(n), off(n);
  for (int i = 0; i < n; ++i) {
    y[i] = rng.bernoulli(expit(0.7 * X(i, 0) - 0.4 * X(i, 1) + 0.2));
    w[i] = 0.5 + rng.uniform();
    off[i] = 0.3 * rng.normal();
  }
  auto fl = fit_logistic(X, y, w, &off);
  MatrixXd X1(n, 3);
  X1.col(0).setOnes();
  X1.col(1) = X.col(0);
  X1.col(2) = X.col(1);
  Eigen::VectorXd oracle = test_oracle::newton_logistic(X1, y, w, off);
  REQUIRE(fl.beta.size() == 3);
  for (int j = 0; j < 3; ++j) REQUIRE(fl.beta[j] == Approx(oracle[j]).margin(1e-6));
}

TEST_CASE("IRLS score residuals vanish at the solution") {
  const int n = 150;
  MatrixXd X = random_design(n, 3, 31);
  RngStream rng(32);
  ArrayXd y(n), w(n), off = ArrayXd::Zero(n);
  for (int i = 0; i < n; ++i) {
    y[i] = rng.uniform();  // fractional responses
    w[i] = rng.uniform() < 0.1 ? 0.0 : 1.0 + rng.uniform();
  }
  auto fl = fit_logistic(X, y, w, &off);
  ArrayXd p = fl.predict(X, &off);
  for (int j = 0; j < 3; ++j) {
    double score = 0.0;
    for (int i = 0; i < n; ++i) score += w[i] * (y[i] - p[i]) * X(i, j);
    REQUIRE(std::fabs(score) < 1e-8);
  }
  double s0 = (w * (y - p)).sum();
  REQUIRE(std::fabs(s0) < 1e-8);
}

TEST_CASE("logistic fit errors") {
  MatrixXd X(3, 1);
  X << 1, 2, 3;
  ArrayXd y = ArrayXd::Constant(3, 0.5), w = ArrayXd::Zero(3);
  REQUIRE_THROWS_WITH(fit_logistic(X, y, w), Catch::Matchers::ContainsSubstring("all weights zero"));
}

TEST_CASE("separation is ridge-stabilized and flagged") {
  MatrixXd X(6, 1);
  X << -3, -2, -1, 1, 2, 3;
  ArrayXd y(6), w = ArrayXd::Ones(6);
  y << 0, 0, 0, 1, 1, 1;  // perfectly separated
  auto fl = fit_logistic(X, y, w);
  REQUIRE(fl.stabilized);
}

TEST_CASE("boosted stumps basics") {
  const int n = 60;
  MatrixXd X = random_design(n, 2, 41);
  ArrayXd w = ArrayXd::Ones(n);
  SECTION("0 rounds gives the weighted mean") {
    ArrayXd y = X.col(0).array();
    RngStream rng(42);
    for (int i = 0; i < n; ++i) w[i] = 0.5 + rng.uniform();
    auto fl = fit_boosted_stumps(LearnerSpec::stumps(0, 0.1, 2, 1.0), X, y, w);
    const double mean = (w * y).sum() / w.sum();
    REQUIRE(fl.predict(X)[0] == Approx(mean).margin(1e-12));
  }
  SECTION("constant response is predicted exactly") {
    ArrayXd y = ArrayXd::Constant(n, 0.37);
    auto fl = fit_boosted_stumps(LearnerSpec::stumps(50, 0.2, 2, 1.0), X, y, w);
    REQUIRE((fl.predict(X) - 0.37).abs().maxCoeff() < 1e-12);
  }
  SECTION("single binary feature is fit exactly") {
    MatrixXd Xb(n, 1);
    for (int i = 0; i < n; ++i) Xb(i, 0) = i % 2;
    ArrayXd y = Xb.col(0).array();
    auto fl = fit_boosted_stumps(LearnerSpec::stumps(200, 0.3, 1, 1.0), Xb, y, w);
    REQUIRE((fl.predict(Xb) - y).square().mean() < 1e-6);
  }
  SECTION("training error is non-increasing in rounds") {
    RngStream rng(43);
    ArrayXd y(n);
    for (int i = 0; i < n; ++i) y[i] = X(i, 0) * X(i, 1) + 0.3 * rng.normal();
    double prev = std::numeric_limits<double>::infinity();
    for (int rounds : {0, 5, 10, 25, 50, 100}) {
      auto fl = fit_boosted_stumps(LearnerSpec::stumps(rounds, 0.1, 2, 2.0), X, y, w);
      const double mse = (w * (fl.predict(X) - y).square()).sum();
      REQUIRE(mse <= prev + 1e-12);
      prev = mse;
    }
  }
  SECTION("hyperparameters validated") {
    REQUIRE_THROWS_AS(fit_boosted_stumps(LearnerSpec::stumps(10, 0.1, 4, 1.0), X, ArrayXd::Zero(n), w),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(fit_boosted_stumps(LearnerSpec::stumps(10, -0.1, 2, 1.0), X, ArrayXd::Zero(n), w),
                      std::invalid_argument);
  }
}

TEST_CASE("empty learner leaves the offset unchanged") {
  auto fl = fit_empty();
  MatrixXd X(3, 2);
  X.setRandom();
  ArrayXd off(3);
  off << -1.0, 0.0, 2.0;
  ArrayXd p = fl.predict(X, &off);
  for (int i = 0; i < 3; ++i) REQUIRE(p[i] == Approx(expit(off[i])).margin(1e-15));
}

TEST_CASE("cv partition invariants") {
  auto part = CvPartition::make(103, 5, 7);
  std::vector<int> counts(5, 0);
  for (int f : part.fold) {
    REQUIRE(f >= 0);
    REQUIRE(f < 5);
    counts[static_cast<std::size_t>(f)]++;
  }
  int lo = 1000, hi = 0;
  for (int c : counts) {
    lo = std::min(lo, c);
    hi = std::max(hi, c);
  }
  REQUIRE(hi - lo <= 1);
  REQUIRE_THROWS_WITH(CvPartition::make(10, 1, 7), Catch::Matchers::ContainsSubstring("fold count >= 2"));
}

TEST_CASE("cv_select fixtures") {
  SECTION("single candidate selects index 0") {
    const int n = 40;
    CvFitData data{random_design(n, 1, 51), ArrayXd::Zero(n), ArrayXd::Ones(n), nullptr, LossKind::CrossEntropy};
    RngStream rng(52);
    for (int i = 0; i < n; ++i) data.y[i] = rng.bernoulli(0.3);
    auto sel = cv_select({LearnerSpec::intercept_only()}, data, CvPartition::make(n, 4, 1));
    REQUIRE(sel.selected == 0);
  }
  SECTION("signal learner beats the constant learner") {
    const int n = 300;
    MatrixXd X = random_design(n, 1, 53);
    ArrayXd y(n);
    RngStream rng(54);
    for (int i = 0; i < n; ++i) y[i] = rng.bernoulli(expit(3.0 * X(i, 0)));
    CvFitData data{X, y, ArrayXd::Ones(n), nullptr, LossKind::CrossEntropy};
    auto sel = cv_select({LearnerSpec::intercept_only(), LearnerSpec::logistic()}, data, CvPartition::make(n, 5, 2));
    REQUIRE(sel.selected == 1);
  }
  SECTION("ties break to the lowest index") {
    const int n = 50;
    MatrixXd X = random_design(n, 1, 55);
    ArrayXd y(n);
    RngStream rng(56);
    for (int i = 0; i < n; ++i) y[i] = rng.bernoulli(0.5);
    CvFitData data{X, y, ArrayXd::Ones(n), nullptr, LossKind::CrossEntropy};
    auto sel = cv_select({LearnerSpec::intercept_only(), LearnerSpec::intercept_only()}, data,
                         CvPartition::make(n, 5, 3));
    REQUIRE(sel.risks[0] == Approx(sel.risks[1]).margin(1e-12));
    REQUIRE(sel.selected == 0);
  }
  SECTION("hand-computed risks on a 3-candidate fixture") {
    // Two folds of two units each; intercept-only fits have closed-form risks.
    MatrixXd X(4, 1);
    X << 0, 1, 0, 1;
    ArrayXd y(4), w = ArrayXd::Ones(4);
    y << 0, 1, 1, 1;
    CvPartition part;
    part.V = 2;
    part.fold = {0, 0, 1, 1};
    CvFitData data{X, y, w, nullptr, LossKind::CrossEntropy};
    auto sel = cv_select({LearnerSpec::empty(), LearnerSpec::intercept_only(), LearnerSpec::logistic()}, data, part);
    // empty learner predicts 1/2 everywhere: risk = 4 * log 2
    REQUIRE(sel.risks[0] == Approx(4.0 * std::log(2.0)).margin(1e-10));
    // intercept-only: fold 0 trains on (1,1) -> p clipped at 1-1e-6; fold 1 trains on (0,1) -> p = 1/2
    const double p_hi = 1.0 - 1e-6;
    const double risk1 = -(std::log(1.0 - p_hi) + std::log(p_hi)) + 2.0 * std::log(2.0);
    REQUIRE(sel.risks[1] == Approx(risk1).epsilon(1e-6));
    REQUIRE(sel.selected == 0);
  }
}

TEST_CASE("convex ensemble") {
  SECTION("fewer than two candidates rejected") {
    const int n = 60;
    MatrixXd X = random_design(n, 1, 61);
    ArrayXd y = ArrayXd::Constant(n, 0.4);
    CvFitData data{X, y, ArrayXd::Ones(n), nullptr, LossKind::SquaredError};
    REQUIRE_THROWS_AS(fit_convex_ensemble({LearnerSpec::stumps(0, 0.1, 1, 1.0)}, data, CvPartition::make(n, 3, 6), 4),
                      std::invalid_argument);
  }
  SECTION("pointwise-dominant candidate gets weight (1,0)") {
    const int n = 120;
    MatrixXd X(n, 1);
    for (int i = 0; i < n; ++i) X(i, 0) = i % 2;
    ArrayXd y = X.col(0).array();  // candidate 0 can fit this exactly
    CvFitData data{X, y, ArrayXd::Ones(n), nullptr, LossKind::SquaredError};
    auto part = CvPartition::make(n, 4, 9);
    auto ens = fit_convex_ensemble({LearnerSpec::stumps(300, 0.3, 1, 1.0), LearnerSpec::stumps(0, 0.1, 1, 1.0)},
                                   data, part, 10);
    REQUIRE(ens.weights[0] == Approx(1.0).margin(1e-12));
    REQUIRE(ens.weights[1] == Approx(0.0).margin(1e-12));
  }
  SECTION("vertices-only grid reduces to the discrete selector") {
    const int n = 200;
    MatrixXd X = random_design(n, 1, 62);
    ArrayXd y(n);
    RngStream rng(63);
    for (int i = 0; i < n; ++i) y[i] = rng.bernoulli(expit(2.0 * X(i, 0)));
    CvFitData data{X, y, ArrayXd::Ones(n), nullptr, LossKind::CrossEntropy};
    auto part = CvPartition::make(n, 4, 7);
    auto sel = cv_select({LearnerSpec::intercept_only(), LearnerSpec::logistic()}, data, part);
    auto ens = fit_convex_ensemble({LearnerSpec::intercept_only(), LearnerSpec::logistic()}, data, part, 1);
    REQUIRE(ens.weights[sel.selected] == 1.0);
    REQUIRE(ens.risk == Approx(sel.risks[static_cast<std::size_t>(sel.selected)]).margin(1e-10));
  }
  SECTION("complementary candidates admit an interior optimum") {
    // Truth is additive in two halves of the feature space; each stump-depth-1
    // candidate captures one direction, the blend beats both vertices.
    const int n = 400;
    RngStream rng(64);
    MatrixXd X(n, 2);
    ArrayXd y(n);
    for (int i = 0; i < n; ++i) {
      X(i, 0) = rng.bernoulli(0.5);
      X(i, 1) = rng.bernoulli(0.5);
      y[i] = 0.5 * X(i, 0) + 0.5 * X(i, 1) + 0.05 * rng.normal();
    }
    CvFitData data{X, y, ArrayXd::Ones(n), nullptr, LossKind::SquaredError};
    auto part = CvPartition::make(n, 5, 8);
    std::vector<LearnerSpec> cands = {LearnerSpec::stumps(1, 1.0, 1, 1.0), LearnerSpec::stumps(0, 1.0, 1, 1.0)};
    auto sel = cv_select(cands, data, part);
    auto ens = fit_convex_ensemble(cands, data, part, 10);
    const double min_vertex = std::min(sel.risks[0], sel.risks[1]);
    REQUIRE(ens.risk <= min_vertex + 1e-9);
  }
}
