#include <catch_amalgamated.hpp>

#include "sdr/discrete.hpp"

using namespace sdr;
using Catch::Approx;

TEST_CASE("oracle support sizes") {
  auto dgp = discrete_oracle(1, OraclePreset::Binary, 3);
  // joint support: 2 (L1) * 2 (A1) * 2 (Y)
  REQUIRE(dgp.n_hist(1) == 2);
  REQUIRE(dgp.n_hist(1) * 2 * static_cast<std::size_t>(dgp.my()) == 8);
  auto dgp3 = discrete_oracle(3, OraclePreset::Small, 4);
  REQUIRE(dgp3.n_hist(3) == 3ul * 2 * 3 * 2 * 3);
}

TEST_CASE("oracle tables are probability tables with pi in range") {
  for (std::uint64_t seed : {1ull, 2ull, 99ull}) {
    auto dgp = discrete_oracle(3, OraclePreset::Rich, seed);
    double s1 = 0.0;
    for (double p : dgp.l1) s1 += p;
    REQUIRE(s1 == Approx(1.0).margin(1e-14));
    for (const auto& tab : dgp.ltab)
      for (const auto& row : tab) {
        double s = 0.0;
        for (double p : row) s += p;
        REQUIRE(s == Approx(1.0).margin(1e-14));
      }
    for (const auto& row : dgp.ytab) {
      double s = 0.0;
      for (double p : row) s += p;
      REQUIRE(s == Approx(1.0).margin(1e-14));
    }
    for (const auto& tab : dgp.pi)
      for (double p : tab) {
        REQUIRE(p >= 0.2);
        REQUIRE(p <= 0.9);
      }
  }
}

TEST_CASE("backward and forward Q0 enumeration agree") {
  for (int K = 1; K <= 3; ++K)
    for (std::uint64_t seed : {5ull, 6ull, 7ull}) {
      auto dgp = discrete_oracle(K, K == 2 ? OraclePreset::Small : OraclePreset::Binary, seed);
      const double back = exact_q_all(dgp)[0][0];
      const double fwd = forward_q0_enumeration(dgp);
      REQUIRE(std::fabs(back - fwd) <= 1e-13);
    }
}

TEST_CASE("constant outcome propagates through the recursion") {
  auto dgp = discrete_oracle(2, OraclePreset::Binary, 11);
  // force Y identically 0.6 by setting the support degenerate
  dgp.y_support = {0.6, 0.6};
  auto q = exact_q_all(dgp);
  for (int t = 0; t <= 2; ++t)
    for (double v : q[static_cast<std::size_t>(t)]) REQUIRE(v == Approx(0.6).margin(1e-14));
}

TEST_CASE("marginal history distribution sums to one") {
  auto dgp = discrete_oracle(3, OraclePreset::Binary, 13);
  for (int t = 0; t <= 3; ++t) {
    auto m = dgp.marginal_hist(t);
    double s = 0.0;
    for (double p : m) s += p;
    REQUIRE(s == Approx(1.0).margin(1e-12));
  }
}

TEST_CASE("sampling matches the law and records history codes") {
  auto dgp = discrete_oracle(2, OraclePreset::Binary, 17);
  const int n = 40000;
  auto so = sample_oracle(dgp, n, 99);
  REQUIRE(so.ds.n == n);
  // same seed reproduces bit-for-bit
  auto so2 = sample_oracle(dgp, n, 99);
  REQUIRE((so.ds.outcome == so2.ds.outcome).all());
  for (int t = 1; t <= 2; ++t) REQUIRE((so.ds.treatment[t - 1] == so2.ds.treatment[t - 1]).all());

  // empirical history frequencies near the enumerated marginal
  auto marg = dgp.marginal_hist(2);
  std::vector<double> freq(marg.size(), 0.0);
  for (int i = 0; i < n; ++i) freq[so.hist_code[1][static_cast<std::size_t>(i)]] += 1.0 / n;
  for (std::size_t c = 0; c < marg.size(); ++c) {
    const double se = std::sqrt(marg[c] * (1 - marg[c]) / n);
    REQUIRE(std::fabs(freq[c] - marg[c]) <= 5 * se + 1e-12);
  }

  // empirical treatment frequency within a history cell near pi
  const auto pi1 = exact_pi(dgp, 1);
  std::vector<double> num(pi1.size(), 0.0), den(pi1.size(), 0.0);
  for (int i = 0; i < n; ++i) {
    const auto c = so.hist_code[0][static_cast<std::size_t>(i)];
    den[c] += 1.0;
    num[c] += so.ds.treatment[0][i];
  }
  for (std::size_t c = 0; c < pi1.size(); ++c) {
    REQUIRE(den[c] > 0);
    const double se = std::sqrt(pi1[c] * (1 - pi1[c]) / den[c]);
    REQUIRE(std::fabs(num[c] / den[c] - pi1[c]) <= 5 * se);
  }
}

TEST_CASE("histories_as_dataset rows decode back to their codes") {
  auto dgp = discrete_oracle(3, OraclePreset::Small, 19);
  for (int t = 1; t <= 3; ++t) {
    auto [shell, codes] = histories_as_dataset(dgp, t);
    REQUIRE(shell.n == static_cast<int>(dgp.n_hist(t)));
    // rebuild each row's code from the stored covariate/treatment values
    for (int i = 0; i < shell.n; ++i) {
      std::size_t code = 0;
      for (int s = 1; s <= t; ++s) {
        const double lv = shell.covariates[static_cast<std::size_t>(s) - 1](i, 0);
        int v = 0;
        while (dgp.l_support[static_cast<std::size_t>(s) - 1][static_cast<std::size_t>(v)] != lv) ++v;
        code = (s == 1) ? static_cast<std::size_t>(v)
                        : dgp.child(s - 1, code, shell.treatment[static_cast<std::size_t>(s) - 2][i], v);
      }
      REQUIRE(code == codes[static_cast<std::size_t>(i)]);
    }
  }
}
