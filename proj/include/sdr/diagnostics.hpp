#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "sdr/discrete.hpp"
#include "sdr/math.hpp"

namespace sdr {

// Plugged-in nuisances evaluated over the enumerated support of a DiscreteDgp.
// q[s-1] tabulates Q̂_s over h̄_s codes (s = 1..K); Q̂_{K+1} is always the
// identity on the outcome. pihat[s-1] tabulates π̂_s.
struct NuisanceTables {
  double q0 = 0.5;
  std::vector<std::vector<double>> q;
  std::vector<std::vector<double>> pihat;

  static NuisanceTables exact(const DiscreteDgp& dgp) {
    NuisanceTables nt;
    auto all = exact_q_all(dgp);
    nt.q0 = all[0][0];
    for (int t = 1; t <= dgp.K; ++t) nt.q.push_back(all[static_cast<std::size_t>(t)]);
    nt.pihat = dgp.pi;
    return nt;
  }
};

namespace detail {

// E[Q̂_{s+1}(H̄_{s+1}) | h̄_s, A_s = 1]; q_hi == nullptr means level s+1 = K+1.
inline double expect_next_level(const DiscreteDgp& dgp, const std::vector<double>* q_hi, int s,
                                std::size_t code_s) {
  double acc = 0.0;
  if (s == dgp.K) {
    for (int y = 0; y < dgp.my(); ++y)
      acc += dgp.p_y(code_s, 1, y) * dgp.y_support[static_cast<std::size_t>(y)];
    return acc;
  }
  for (int v = 0; v < dgp.m(s + 1); ++v) {
    const double pv = (s == 0) ? dgp.p_l1(v) : dgp.p_l(s + 1, code_s, 1, v);
    const std::size_t next = (s == 0) ? static_cast<std::size_t>(v) : dgp.child(s, code_s, 1, v);
    acc += pv * (*q_hi)[next];
  }
  return acc;
}

// Walk from h̄_t to every reachable h̄_s along the a ≡ 1 branch of the observed
// law, accumulating P(l|·,1) path probabilities and π_r/π̂_r ratios for
// r = t+1..last_ratio. Calls leaf(code_s, weight).
template <typename Leaf>
void walk_ratio_paths(const DiscreteDgp& dgp, const std::vector<std::vector<double>>& pihat, int t, int s,
                      int last_ratio, std::size_t code_t, const Leaf& leaf) {
  std::function<void(int, std::size_t, double)> rec = [&](int r, std::size_t code, double w) {
    if (r > t && r <= last_ratio)
      w *= dgp.pi[static_cast<std::size_t>(r) - 1][code] / pihat[static_cast<std::size_t>(r) - 1][code];
    if (r == s) {
      leaf(code, w);
      return;
    }
    for (int v = 0; v < dgp.m(r + 1); ++v) {
      const double pv = (r == 0) ? dgp.p_l1(v) : dgp.p_l(r + 1, code, 1, v);
      const std::size_t next = (r == 0) ? static_cast<std::size_t>(v) : dgp.child(r, code, 1, v);
      rec(r + 1, next, w * pv);
    }
  };
  rec(t, code_t, 1.0);
}

inline std::size_t prefix_code(const DiscreteDgp& dgp, std::size_t code, int from_level, int to_level) {
  for (int r = from_level; r > to_level; --r) code = code / static_cast<std::size_t>(dgp.m(r)) / 2;
  return code;
}

inline void check_sp(const std::vector<std::vector<double>>& pihat) {
  for (const auto& tab : pihat)
    for (double p : tab)
      if (!(p > 0.0)) throw std::invalid_argument("SP violated: pihat has a non-positive value");
}

}  // namespace detail

// D_s^t(q_hi, q_lo)(h̄_t) = -E[(A_t/π_t) ∏_{r=t+1}^{s} (A_r/π̂_r) {q_hi(H̄_{s+1}) - q_lo(H̄_s)} | h̄_t].
// The level-t ratio uses the true π_t, which cancels against the branch
// probability; ratios π_r/π̂_r appear for r = t+1..s.
inline double d_term_value(const DiscreteDgp& dgp, const std::vector<std::vector<double>>& pihat,
                           const std::vector<double>* q_hi, const std::vector<double>& q_lo, int t, int s,
                           std::size_t code_t) {
  double acc = 0.0;
  detail::walk_ratio_paths(dgp, pihat, t, s, s, code_t, [&](std::size_t code_s, double w) {
    acc += w * (detail::expect_next_level(dgp, q_hi, s, code_s) - q_lo[code_s]);
  });
  return -acc;
}

// Rem_s^t(q_s)(h̄_t) = E[(A_t/π_t) ∏_{r=t+1}^{s-1} (A_r/π̂_r) (1 - π_s/π̂_s)(q_s - Q_s)(H̄_s) | h̄_t], s > t.
inline double rem_term_value(const DiscreteDgp& dgp, const std::vector<std::vector<double>>& pihat,
                             const std::vector<double>& q_s, const std::vector<double>& q_exact_s, int t,
                             int s, std::size_t code_t) {
  double acc = 0.0;
  detail::walk_ratio_paths(dgp, pihat, t, s, s - 1, code_t, [&](std::size_t code_s, double w) {
    const double ratio = dgp.pi[static_cast<std::size_t>(s) - 1][code_s] / pihat[static_cast<std::size_t>(s) - 1][code_s];
    acc += w * (1.0 - ratio) * (q_s[code_s] - q_exact_s[code_s]);
  });
  return acc;
}

struct ExpansionTerms {
  int t = 0;
  std::vector<std::vector<double>> D;    // D[k] = D_{t+k}^t over h̄_t codes, k = 0..K-t
  std::vector<std::vector<double>> Rem;  // Rem[k] = Rem_{t+1+k}^t, k = 0..K-t-1
  std::vector<double> D_total;           // Σ_s D_s^t
  std::vector<double> norm_D;            // L²(P) norms per s
  std::vector<double> norm_Rem;
  double norm_D_total = 0.0;
};

inline ExpansionTerms expansion_terms(const DiscreteDgp& dgp, const NuisanceTables& nt, int t) {
  if (t < 0 || t > dgp.K) throw std::invalid_argument("expansion_terms: t outside 0..K");
  detail::check_sp(nt.pihat);
  const std::size_t n = dgp.n_hist(t);
  auto q_exact = exact_q_all(dgp);
  auto q_at = [&](int level) -> const std::vector<double>* {
    return (level <= dgp.K) ? &nt.q[static_cast<std::size_t>(level) - 1] : nullptr;
  };
  std::vector<double> q0_table{nt.q0};
  auto q_lo_at = [&](int level) -> const std::vector<double>& {
    return (level == 0) ? q0_table : nt.q[static_cast<std::size_t>(level) - 1];
  };

  ExpansionTerms et;
  et.t = t;
  et.D_total.assign(n, 0.0);
  const auto marginal = dgp.marginal_hist(t);
  for (int s = t; s <= dgp.K; ++s) {
    std::vector<double> d(n), rem(n, 0.0);
    for (std::size_t c = 0; c < n; ++c) {
      d[c] = d_term_value(dgp, nt.pihat, q_at(s + 1), q_lo_at(s), t, s, c);
      et.D_total[c] += d[c];
      if (s > t)
        rem[c] = rem_term_value(dgp, nt.pihat, nt.q[static_cast<std::size_t>(s) - 1],
                                q_exact[static_cast<std::size_t>(s)], t, s, c);
    }
    auto l2 = [&](const std::vector<double>& f) {
      double acc = 0.0;
      for (std::size_t c = 0; c < n; ++c) acc += marginal[c] * f[c] * f[c];
      return std::sqrt(acc);
    };
    et.norm_D.push_back(l2(d));
    et.D.push_back(std::move(d));
    if (s > t) {
      et.norm_Rem.push_back(l2(rem));
      et.Rem.push_back(std::move(rem));
    }
  }
  double acc = 0.0;
  for (std::size_t c = 0; c < n; ++c) acc += marginal[c] * et.D_total[c] * et.D_total[c];
  et.norm_D_total = std::sqrt(acc);
  return et;
}

// Lemma-1 residual: max over h̄_t of |Q̂_t - Q_t - D^t - Σ_{s>t} Rem_s^t|.
// The identity is algebraic, so anything above ~1e-10 indicates a bug.
inline double verify_lemma1(const DiscreteDgp& dgp, const NuisanceTables& nt, int t) {
  auto et = expansion_terms(dgp, nt, t);
  auto q_exact = exact_q_all(dgp);
  const std::size_t n = dgp.n_hist(t);
  double worst = 0.0;
  for (std::size_t c = 0; c < n; ++c) {
    const double qhat = (t == 0) ? nt.q0 : nt.q[static_cast<std::size_t>(t) - 1][c];
    double rhs = et.D_total[c];
    for (const auto& rem : et.Rem) rhs += rem[c];
    worst = std::max(worst, std::fabs(qhat - q_exact[static_cast<std::size_t>(t)][c] - rhs));
  }
  return worst;
}

// Triangle bound ‖Q̂_t - Q_t‖ ≤ ‖D^t‖ + Σ_{s>t} ‖Rem_s^t‖ from Lemma 1; the
// right-hand side is the computed quantity driving the Theorem-1 diagnostic.
inline double lemma1_norm_bound(const DiscreteDgp& dgp, const NuisanceTables& nt, int t) {
  auto et = expansion_terms(dgp, nt, t);
  double b = et.norm_D_total;
  for (double r : et.norm_Rem) b += r;
  return b;
}

inline double q_error_norm(const DiscreteDgp& dgp, const NuisanceTables& nt, int t) {
  auto q_exact = exact_q_all(dgp);
  const auto marginal = dgp.marginal_hist(t);
  double acc = 0.0;
  for (std::size_t c = 0; c < dgp.n_hist(t); ++c) {
    const double qhat = (t == 0) ? nt.q0 : nt.q[static_cast<std::size_t>(t) - 1][c];
    const double diff = qhat - q_exact[static_cast<std::size_t>(t)][c];
    acc += marginal[c] * diff * diff;
  }
  return std::sqrt(acc);
}

// ---------------------------------------------------------------------------
// Targeting-stage excess risk (the Theorem-2 machinery).
// ---------------------------------------------------------------------------
struct ExcessRiskReport {
  double excess = 0.0;               // E[E_s^t(H̄_t)], ≥ -1e-12
  std::vector<double> pointwise;     // conditional excess risk per h̄_t code
  std::vector<double> eps_bar;       // population minimizer per h̄_t code
  std::vector<double> d_fitted;      // D_s^t(Q̂*_{s+1}, Q̂_s^{t,ε̂}) per code
  double bound_constant = 0.0;       // max D² / E over the support
};

// q_hi tabulates Q̂*_{s+1} (nullptr = outcome identity); q_init tabulates
// Q̂_s^{t+1} over h̄_s; eps_hat tabulates the fitted fluctuation over h̄_t.
// ε̄ solves the conditional score equation by one-dimensional Newton.
inline ExcessRiskReport excess_risk(const DiscreteDgp& dgp, const std::vector<std::vector<double>>& pihat,
                                    const std::vector<double>* q_hi, const std::vector<double>& q_init,
                                    const std::vector<double>& eps_hat, int s, int t) {
  if (!(t >= 0 && t <= s && s <= dgp.K)) throw std::invalid_argument("excess_risk: need 0 <= t <= s <= K");
  detail::check_sp(pihat);
  const std::size_t n = dgp.n_hist(t);
  ExcessRiskReport rep;
  rep.pointwise.assign(n, 0.0);
  rep.eps_bar.assign(n, 0.0);
  rep.d_fitted.assign(n, 0.0);

  const auto marginal = dgp.marginal_hist(t);
  // Fitted update as a level-s table for the D-term.
  std::vector<double> q_fitted(dgp.n_hist(s));
  for (std::size_t cs = 0; cs < q_fitted.size(); ++cs) {
    const std::size_t ct = detail::prefix_code(dgp, cs, s, t);
    q_fitted[cs] = expit(clipped_logit(q_init[cs]) + eps_hat[ct]);
  }

  for (std::size_t c = 0; c < n; ++c) {
    // leaves: weight ω_j (incl. π_t and ratios through s), mean outcome ȳ_j, offset η_j
    std::vector<double> omega, ybar, eta;
    const double pi_t = (t == 0) ? 1.0 : dgp.pi[static_cast<std::size_t>(t) - 1][c];
    detail::walk_ratio_paths(dgp, pihat, t, s, s, c, [&](std::size_t code_s, double w) {
      omega.push_back(pi_t * w);
      ybar.push_back(detail::expect_next_level(dgp, q_hi, s, code_s));
      eta.push_back(clipped_logit(q_init[code_s]));
    });
    double wsum = 0.0, wy = 0.0;
    for (std::size_t j = 0; j < omega.size(); ++j) {
      wsum += omega[j];
      wy += omega[j] * ybar[j];
    }
    if (!(wy > 1e-12 * wsum) || !(wy < (1.0 - 1e-12) * wsum))
      throw std::runtime_error("excess_risk: degenerate Q̂*_{s+1} (conditional mean at 0 or 1)");
    auto G = [&](double e) {
      double g = 0.0;
      for (std::size_t j = 0; j < omega.size(); ++j) g += omega[j] * cross_entropy(ybar[j], eta[j] + e);
      return g;
    };
    double e = 0.0;
    for (int it = 0; it < 200; ++it) {
      double g1 = 0.0, g2 = 0.0;
      for (std::size_t j = 0; j < omega.size(); ++j) {
        const double p = expit(eta[j] + e);
        g1 -= omega[j] * (ybar[j] - p);
        g2 += omega[j] * p * (1.0 - p);
      }
      if (std::fabs(g1) < 1e-12 * std::max(1.0, wsum)) break;
      double step = -g1 / std::max(g2, 1e-300);
      step = std::clamp(step, -10.0, 10.0);
      e += step;
      if (std::fabs(step) < 1e-14) break;
    }
    rep.eps_bar[c] = e;
    rep.pointwise[c] = G(eps_hat[c]) - G(e);
    rep.excess += marginal[c] * rep.pointwise[c];
    rep.d_fitted[c] = d_term_value(dgp, pihat, q_hi, q_fitted, t, s, c);
    const double denom = rep.pointwise[c];
    if (denom > 1e-300)
      rep.bound_constant = std::max(rep.bound_constant, rep.d_fitted[c] * rep.d_fitted[c] / denom);
  }
  return rep;
}

// E[Γ̂_t | A_t = 1, h̄_t] by exhaustive expectation over all future paths of
// the observed law (treatment branches included): an independent forward route
// against the backward recursion defining Q_t.
inline std::vector<double> gamma_conditional_mean(const DiscreteDgp& dgp, const NuisanceTables& nt, int t) {
  detail::check_sp(nt.pihat);
  const std::size_t n = dgp.n_hist(t);
  std::vector<double> out(n, 0.0);
  auto q_at = [&](int level, std::size_t code) -> double {
    return nt.q[static_cast<std::size_t>(level) - 1][code];
  };
  for (std::size_t c0 = 0; c0 < n; ++c0) {
    double acc = 0.0;
    // state: level r history code, path probability, cumulative ∏ a/π̂ from t+1..r, running Γ sum
    std::function<void(int, std::size_t, double, double, double)> rec = [&](int r, std::size_t code, double prob,
                                                                            double cumw, double gamma_sum) {
      if (r == dgp.K) {
        for (int a = 0; a <= 1; ++a) {
          const double pi_true = dgp.pi[static_cast<std::size_t>(r) - 1][code];
          const double pa = a ? pi_true : 1.0 - pi_true;
          if (pa <= 0.0) continue;
          const double w = a ? cumw / nt.pihat[static_cast<std::size_t>(r) - 1][code] : 0.0;
          for (int y = 0; y < dgp.my(); ++y) {
            const double py = dgp.p_y(code, a, y);
            if (py <= 0.0) continue;
            const double q_next = dgp.y_support[static_cast<std::size_t>(y)];  // Q̂_{K+1} = outcome
            acc += prob * pa * py * (gamma_sum + w * (q_next - q_at(r, code)));
          }
        }
        return;
      }
      for (int a = 0; a <= 1; ++a) {
        const double pi_true = dgp.pi[static_cast<std::size_t>(r) - 1][code];
        const double pa = a ? pi_true : 1.0 - pi_true;
        if (pa <= 0.0) continue;
        const double w = a ? cumw / nt.pihat[static_cast<std::size_t>(r) - 1][code] : 0.0;
        for (int v = 0; v < dgp.m(r + 1); ++v) {
          const double pv = dgp.p_l(r + 1, code, a, v);
          const std::size_t next = dgp.child(r, code, a, v);
          const double term = w * (q_at(r + 1, next) - q_at(r, code));
          rec(r + 1, next, prob * pa * pv, w, gamma_sum + term);
        }
      }
    };
    // condition on A_t = 1 and start with Γ's leading Q̂_{t+1} term
    if (t == dgp.K) {
      for (int y = 0; y < dgp.my(); ++y)
        acc += dgp.p_y(c0, 1, y) * dgp.y_support[static_cast<std::size_t>(y)];
    } else {
      for (int v = 0; v < dgp.m(t + 1); ++v) {
        const double pv = (t == 0) ? dgp.p_l1(v) : dgp.p_l(t + 1, c0, 1, v);
        const std::size_t next = (t == 0) ? static_cast<std::size_t>(v) : dgp.child(t, c0, 1, v);
        rec(t + 1, next, pv, 1.0, q_at(t + 1, next));
      }
    }
    out[c0] = acc;
  }
  return out;
}

// Evaluate a fitted per-dataset predictor over the enumerated support of H̄_t.
inline std::vector<double> table_from_predictor(const DiscreteDgp& dgp, int t,
                                                const std::function<ArrayXd(const LongitudinalDataset&)>& predict) {
  auto [shell, codes] = histories_as_dataset(dgp, t);
  ArrayXd vals = predict(shell);
  std::vector<double> table(dgp.n_hist(t));
  for (std::size_t r = 0; r < codes.size(); ++r) table[codes[r]] = vals[static_cast<Eigen::Index>(r)];
  return table;
}

}  // namespace sdr
