#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdr/dataset.hpp"
#include "sdr/rng.hpp"

namespace sdr {

// Fully discrete longitudinal law with enumerable support: scalar L_t per
// time (small support), binary A_t, outcome with support inside [0,1].
// Histories h̄_t = (l_1,a_1,...,l_t) are coded in mixed radix, extended by
// code' = (code*2 + a)*m_{t+1} + v; exact conditional expectations reduce to
// finite sums over these codes.
struct DiscreteDgp {
  int K = 1;
  std::vector<std::vector<double>> l_support;          // [t-1]: support of L_t
  std::vector<double> y_support;                       // outcome values in [0,1]
  std::vector<double> l1;                              // P(L_1 = v)
  std::vector<std::vector<std::vector<double>>> ltab;  // [t-2] for t>=2: [codeA(h̄_{t-1},a)][v]
  std::vector<std::vector<double>> pi;                 // [t-1]: π_t over codes of h̄_t
  std::vector<std::vector<double>> ytab;               // [codeA(h̄_K,a)][y index]

  int m(int t) const { return static_cast<int>(l_support[static_cast<std::size_t>(t) - 1].size()); }
  int my() const { return static_cast<int>(y_support.size()); }

  std::size_t n_hist(int t) const {
    std::size_t n = 1;
    for (int s = 1; s <= t; ++s) n *= static_cast<std::size_t>(m(s)) * (s == 1 ? 1 : 2);
    return n;
  }
  // Append (a_t, l_{t+1}) to a time-t history code (t >= 1).
  std::size_t child(int t, std::size_t code, int a, int v) const {
    return (code * 2 + static_cast<std::size_t>(a)) * static_cast<std::size_t>(m(t + 1)) +
           static_cast<std::size_t>(v);
  }
  std::size_t with_a(std::size_t code, int a) const { return code * 2 + static_cast<std::size_t>(a); }

  double p_l1(int v) const { return l1[static_cast<std::size_t>(v)]; }
  double p_l(int t, std::size_t prev_code, int a, int v) const {  // P(L_t = v | h̄_{t-1}, a), t >= 2
    return ltab[static_cast<std::size_t>(t) - 2][with_a(prev_code, a)][static_cast<std::size_t>(v)];
  }
  double p_y(std::size_t hK_code, int a, int y) const {
    return ytab[with_a(hK_code, a)][static_cast<std::size_t>(y)];
  }

  // Observed-law marginal of H̄_t over codes.
  std::vector<double> marginal_hist(int t) const {
    std::vector<double> p{1.0};
    for (int s = 1; s <= t; ++s) {
      std::vector<double> q(n_hist(s), 0.0);
      if (s == 1) {
        for (int v = 0; v < m(1); ++v) q[static_cast<std::size_t>(v)] = p_l1(v);
      } else {
        for (std::size_t c = 0; c < p.size(); ++c) {
          const double pr_a1 = pi[static_cast<std::size_t>(s) - 2][c];
          for (int a = 0; a <= 1; ++a) {
            const double pa = a ? pr_a1 : 1.0 - pr_a1;
            for (int v = 0; v < m(s); ++v) q[child(s - 1, c, a, v)] = p[c] * pa * p_l(s, c, a, v);
          }
        }
      }
      p = std::move(q);
    }
    return p;
  }
};

enum class OraclePreset { Binary, Small, Rich };

// Seeded random tables; every π_t value lies in [0.2, 0.9] and every
// conditional row is an exact probability vector.
inline DiscreteDgp discrete_oracle(int K, OraclePreset preset, std::uint64_t seed) {
  if (K < 1 || K > 4) throw std::invalid_argument("discrete_oracle: K must lie in 1..4");
  int ml = 2, my = 2;
  switch (preset) {
    case OraclePreset::Binary: ml = 2; my = 2; break;
    case OraclePreset::Small: ml = 3; my = 3; break;
    case OraclePreset::Rich: ml = 4; my = 4; break;
  }
  DiscreteDgp dgp;
  dgp.K = K;
  for (int t = 1; t <= K; ++t) {
    std::vector<double> sup;
    for (int v = 0; v < ml; ++v) sup.push_back(static_cast<double>(v));
    dgp.l_support.push_back(sup);
  }
  for (int v = 0; v < my; ++v) dgp.y_support.push_back(static_cast<double>(v) / (my - 1));

  RngStream rng(mix_seed(seed, 0xd15cULL));
  auto prob_row = [&](int cells) {
    std::vector<double> row(static_cast<std::size_t>(cells));
    double total = 0.0;
    for (auto& x : row) {
      x = 0.2 + 0.8 * rng.uniform();
      total += x;
    }
    for (auto& x : row) x /= total;
    return row;
  };

  dgp.l1 = prob_row(ml);
  for (int t = 2; t <= K; ++t) {
    std::vector<std::vector<double>> tab(dgp.n_hist(t - 1) * 2);
    for (auto& row : tab) row = prob_row(ml);
    dgp.ltab.push_back(std::move(tab));
  }
  for (int t = 1; t <= K; ++t) {
    std::vector<double> p(dgp.n_hist(t));
    for (auto& x : p) x = 0.2 + 0.7 * rng.uniform();
    dgp.pi.push_back(std::move(p));
  }
  dgp.ytab.resize(dgp.n_hist(K) * 2);
  for (auto& row : dgp.ytab) row = prob_row(my);
  return dgp;
}

// Exact backward recursion Q_t(h̄_t) = Σ_v Q_{t+1}(h̄_t,1,v) P(v | h̄_t, A_t = 1).
// Index K+1 is never materialized; Q_K integrates the outcome table directly.
inline std::vector<std::vector<double>> exact_q_all(const DiscreteDgp& dgp) {
  std::vector<std::vector<double>> q(static_cast<std::size_t>(dgp.K) + 1);  // q[t] over h̄_t codes, q[0] scalar
  q[static_cast<std::size_t>(dgp.K)].assign(dgp.n_hist(dgp.K), 0.0);
  for (std::size_t c = 0; c < dgp.n_hist(dgp.K); ++c) {
    double acc = 0.0;
    for (int y = 0; y < dgp.my(); ++y) acc += dgp.y_support[static_cast<std::size_t>(y)] * dgp.p_y(c, 1, y);
    q[static_cast<std::size_t>(dgp.K)][c] = acc;
  }
  for (int t = dgp.K - 1; t >= 1; --t) {
    q[static_cast<std::size_t>(t)].assign(dgp.n_hist(t), 0.0);
    for (std::size_t c = 0; c < dgp.n_hist(t); ++c) {
      double acc = 0.0;
      for (int v = 0; v < dgp.m(t + 1); ++v)
        acc += q[static_cast<std::size_t>(t) + 1][dgp.child(t, c, 1, v)] * dgp.p_l(t + 1, c, 1, v);
      q[static_cast<std::size_t>(t)][c] = acc;
    }
  }
  double q0 = 0.0;
  for (int v = 0; v < dgp.m(1); ++v) q0 += q[1][static_cast<std::size_t>(v)] * dgp.p_l1(v);
  q[0] = {q0};
  return q;
}

inline std::vector<double> exact_q(const DiscreteDgp& dgp, int t) {
  auto all = exact_q_all(dgp);
  return all[static_cast<std::size_t>(t)];
}

inline std::vector<double> exact_pi(const DiscreteDgp& dgp, int t) {
  return dgp.pi[static_cast<std::size_t>(t) - 1];
}

// Independent forward route: Q_0 = Σ_paths ∏_t P(l_t | h̄_{t-1}, Ā = 1) · y.
inline double forward_q0_enumeration(const DiscreteDgp& dgp) {
  struct Walk {
    const DiscreteDgp& d;
    double total = 0.0;
    void rec(int t, std::size_t code, double prob) {
      if (t == d.K) {
        for (int y = 0; y < d.my(); ++y)
          total += prob * d.p_y(code, 1, y) * d.y_support[static_cast<std::size_t>(y)];
        return;
      }
      for (int v = 0; v < d.m(t + 1); ++v) {
        const double pv = (t == 0) ? d.p_l1(v) : d.p_l(t + 1, code, 1, v);
        rec(t + 1, (t == 0) ? static_cast<std::size_t>(v) : d.child(t, code, 1, v), prob * pv);
      }
    }
  } walk{dgp};
  walk.rec(0, 0, 1.0);
  return walk.total;
}

struct SampledOracle {
  LongitudinalDataset ds;
  std::vector<std::vector<std::size_t>> hist_code;  // [t-1][i]: code of unit i's h̄_t
};

inline SampledOracle sample_oracle(const DiscreteDgp& dgp, int n, std::uint64_t seed) {
  SampledOracle out;
  std::vector<UnitRecord> recs(static_cast<std::size_t>(n));
  out.hist_code.assign(static_cast<std::size_t>(dgp.K), std::vector<std::size_t>(static_cast<std::size_t>(n)));
  for (int i = 0; i < n; ++i) {
    RngStream rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    auto& r = recs[static_cast<std::size_t>(i)];
    r.covariates.resize(static_cast<std::size_t>(dgp.K));
    r.treatment.resize(static_cast<std::size_t>(dgp.K));
    std::size_t code = 0;
    for (int t = 1; t <= dgp.K; ++t) {
      const double u = rng.uniform();
      int v = 0;
      double acc = 0.0;
      for (; v < dgp.m(t); ++v) {
        acc += (t == 1) ? dgp.p_l1(v) : dgp.p_l(t, code, r.treatment[static_cast<std::size_t>(t) - 2], v);
        if (u < acc) break;
      }
      if (v == dgp.m(t)) v = dgp.m(t) - 1;
      code = (t == 1) ? static_cast<std::size_t>(v)
                      : dgp.child(t - 1, code, r.treatment[static_cast<std::size_t>(t) - 2], v);
      out.hist_code[static_cast<std::size_t>(t) - 1][static_cast<std::size_t>(i)] = code;
      r.covariates[static_cast<std::size_t>(t) - 1] = {dgp.l_support[static_cast<std::size_t>(t) - 1][static_cast<std::size_t>(v)]};
      r.treatment[static_cast<std::size_t>(t) - 1] = rng.bernoulli(dgp.pi[static_cast<std::size_t>(t) - 1][code]);
    }
    const int aK = r.treatment[static_cast<std::size_t>(dgp.K) - 1];
    const double u = rng.uniform();
    int y = 0;
    double acc = 0.0;
    for (; y < dgp.my(); ++y) {
      acc += dgp.p_y(code, aK, y);
      if (u < acc) break;
    }
    if (y == dgp.my()) y = dgp.my() - 1;
    r.outcome = dgp.y_support[static_cast<std::size_t>(y)];
  }
  std::vector<std::vector<std::string>> names(static_cast<std::size_t>(dgp.K), std::vector<std::string>{"l"});
  out.ds = build_dataset(dgp.K, recs, {}, names);
  return out;
}

// One pseudo-unit per enumerated h̄_t (filler beyond t); lets fitted
// predictors be evaluated on the whole support. Returned codes align rows.
inline std::pair<LongitudinalDataset, std::vector<std::size_t>> histories_as_dataset(const DiscreteDgp& dgp, int t) {
  const std::size_t n = dgp.n_hist(t);
  std::vector<UnitRecord> recs(n);
  std::vector<std::size_t> codes(n);
  // Decode by walking the mixed radix from the top.
  for (std::size_t c = 0; c < n; ++c) {
    codes[c] = c;
    std::vector<int> l_idx(static_cast<std::size_t>(t)), a_val(static_cast<std::size_t>(t), 1);
    std::size_t rest = c;
    for (int s = t; s >= 1; --s) {
      l_idx[static_cast<std::size_t>(s) - 1] = static_cast<int>(rest % static_cast<std::size_t>(dgp.m(s)));
      rest /= static_cast<std::size_t>(dgp.m(s));
      if (s >= 2) {
        a_val[static_cast<std::size_t>(s) - 2] = static_cast<int>(rest % 2);
        rest /= 2;
      }
    }
    auto& r = recs[c];
    r.covariates.resize(static_cast<std::size_t>(dgp.K));
    r.treatment.resize(static_cast<std::size_t>(dgp.K));
    for (int s = 1; s <= dgp.K; ++s) {
      if (s <= t)
        r.covariates[static_cast<std::size_t>(s) - 1] = {
            dgp.l_support[static_cast<std::size_t>(s) - 1][static_cast<std::size_t>(l_idx[static_cast<std::size_t>(s) - 1])]};
      else
        r.covariates[static_cast<std::size_t>(s) - 1] = {0.0};
      r.treatment[static_cast<std::size_t>(s) - 1] = (s <= t - 1) ? a_val[static_cast<std::size_t>(s) - 1] : 1;
    }
    r.outcome = 0.0;
  }
  std::vector<std::vector<std::string>> names(static_cast<std::size_t>(dgp.K), std::vector<std::string>{"l"});
  return {build_dataset(dgp.K, recs, {}, names), codes};
}

}  // namespace sdr
