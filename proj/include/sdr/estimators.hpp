#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sdr/cross_validation.hpp"
#include "sdr/dataset.hpp"
#include "sdr/inference.hpp"
#include "sdr/learners.hpp"
#include "sdr/math.hpp"
#include "sdr/scenario.hpp"

namespace sdr {

// ---------------------------------------------------------------------------
// Fitted regression bound to a history level: remembers which columns of
// history(t) it saw, optional one-hot saturation, and the learner itself.
// ---------------------------------------------------------------------------
struct FittedRegression {
  int t = 0;
  HistoryKind kind = HistoryKind::OutcomeFit;
  std::vector<int> cols;
  bool saturated = false;
  std::vector<std::vector<double>> dict;  // distinct selected rows; cell 0 is the reference level
  FittedLearner learner;

  MatrixXd design_on(const LongitudinalDataset& ds) const {
    HistoryView hv = history(ds, t, kind);
    MatrixXd sel(ds.n, static_cast<Eigen::Index>(cols.size()));
    for (std::size_t j = 0; j < cols.size(); ++j) sel.col(static_cast<Eigen::Index>(j)) = hv.matrix.col(cols[j]);
    if (!saturated) return sel;
    MatrixXd hot = MatrixXd::Zero(ds.n, static_cast<Eigen::Index>(dict.size()) - 1);
    std::vector<double> row(cols.size());
    for (int i = 0; i < ds.n; ++i) {
      for (std::size_t j = 0; j < cols.size(); ++j) row[j] = sel(i, static_cast<Eigen::Index>(j));
      for (std::size_t c = 1; c < dict.size(); ++c)
        if (dict[c] == row) {
          hot(i, static_cast<Eigen::Index>(c) - 1) = 1.0;
          break;
        }
    }
    return hot;
  }
  ArrayXd link_on(const LongitudinalDataset& ds) const { return learner.link(design_on(ds)); }
  ArrayXd predict_on(const LongitudinalDataset& ds, const ArrayXd* offset = nullptr) const {
    return learner.predict(design_on(ds), offset);
  }
};

namespace detail {

inline std::vector<std::vector<double>> saturation_dict(const MatrixXd& X, const ArrayXd& w) {
  std::vector<std::vector<double>> dict;
  std::vector<double> row(static_cast<std::size_t>(X.cols()));
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    if (w[i] <= 0.0) continue;
    for (Eigen::Index j = 0; j < X.cols(); ++j) row[static_cast<std::size_t>(j)] = X(i, j);
    bool found = false;
    for (const auto& d : dict)
      if (d == row) {
        found = true;
        break;
      }
    if (!found) dict.push_back(row);
  }
  return dict;
}

// Fit a [0,1]-response regression of y on the allowed columns of H̄_t.
// Logistic families may be saturated (one-hot, reference cell absorbed by the
// intercept); boosted stumps run on the raw columns with the logit objective.
inline FittedRegression fit_q_regression(const LongitudinalDataset& ds, int t, const FitSpec& fs,
                                         const LearnerSpec& spec, const ArrayXd& y, const ArrayXd& w,
                                         const ArrayXd* offset) {
  FittedRegression reg;
  reg.t = t;
  reg.kind = HistoryKind::OutcomeFit;
  HistoryView hv = history(ds, t, reg.kind);
  reg.cols = fs.select_columns(hv.names);
  MatrixXd X(ds.n, static_cast<Eigen::Index>(reg.cols.size()));
  for (std::size_t j = 0; j < reg.cols.size(); ++j) X.col(static_cast<Eigen::Index>(j)) = hv.matrix.col(reg.cols[j]);
  if (fs.design == FitDesign::Saturated && spec.family == LearnerFamily::LogisticMainTerms) {
    reg.saturated = true;
    reg.dict = saturation_dict(X, w);
    MatrixXd hot = reg.design_on(ds);
    reg.learner = fit_logistic(hot, y, w, offset, /*intercept_only=*/false);
    return reg;
  }
  if (fs.design == FitDesign::InterceptOnly || spec.family == LearnerFamily::LogisticInterceptOnly) {
    reg.learner = fit_logistic(X, y, w, offset, /*intercept_only=*/true);
    return reg;
  }
  if (spec.family == LearnerFamily::BoostedStumps) {
    reg.learner = fit_boosted_logit(spec, X, y, w, offset);
    return reg;
  }
  if (spec.family == LearnerFamily::Empty) {
    reg.learner = fit_empty();
    return reg;
  }
  reg.learner = fit_logistic(X, y, w, offset, /*intercept_only=*/false);
  return reg;
}

// Unbounded-response regression for DR-transform pseudo-outcomes.
inline FittedRegression fit_gamma_regression(const LongitudinalDataset& ds, int t, const FitSpec& fs,
                                             const LearnerSpec& spec, const ArrayXd& y, const ArrayXd& w) {
  if (spec.family != LearnerFamily::BoostedStumps)
    throw std::invalid_argument("dr_transform requires a learner accepting unbounded responses (boosted stumps)");
  FittedRegression reg;
  reg.t = t;
  reg.kind = HistoryKind::OutcomeFit;
  HistoryView hv = history(ds, t, reg.kind);
  reg.cols = fs.select_columns(hv.names);
  MatrixXd X(ds.n, static_cast<Eigen::Index>(reg.cols.size()));
  for (std::size_t j = 0; j < reg.cols.size(); ++j) X.col(static_cast<Eigen::Index>(j)) = hv.matrix.col(reg.cols[j]);
  reg.learner = fit_boosted_stumps(spec, X, y, w);
  return reg;
}

inline void force_deterministic_one(const LongitudinalDataset& ds, int t, ArrayXd& q) {
  if (!ds.has_deterministic_one() || t < 1) return;
  for (int i = 0; i < ds.n; ++i)
    if (ds.det_one(t, i)) q[i] = 1.0;
}

inline ArrayXd mask_weights(const LongitudinalDataset& ds, int t, const ArrayXb& at_risk) {
  ArrayXd w(ds.n);
  for (int i = 0; i < ds.n; ++i) w[i] = (at_risk[i] && !ds.det_one(t, i)) ? 1.0 : 0.0;
  return w;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Treatment mechanism fits with strong-positivity truncation.
// ---------------------------------------------------------------------------
struct PropensityFit {
  double delta = 0.01;
  bool fitted = true;  // false when built from supplied values (oracle runs)
  std::vector<FittedRegression> fits;  // per t = 1..K
  std::vector<ArrayXd> pi_values;      // per t, truncated, evaluated on the source dataset
  int truncation_count = 0;
  int stabilized_count = 0;

  const ArrayXd& values(int t) const { return pi_values[static_cast<std::size_t>(t) - 1]; }

  ArrayXd predict_on(const LongitudinalDataset& ds, int t) const {
    if (!fitted) throw std::logic_error("propensity fit has no learners (built from exact values)");
    const auto& reg = fits[static_cast<std::size_t>(t) - 1];
    ArrayXd p = reg.predict_on(ds);
    for (int i = 0; i < ds.n; ++i) p[i] = std::max(p[i], delta);
    return p;
  }

  static PropensityFit from_values(std::vector<ArrayXd> values, double delta) {
    PropensityFit pf;
    pf.delta = delta;
    pf.fitted = false;
    pf.truncation_count = 0;
    for (auto& v : values) {
      for (Eigen::Index i = 0; i < v.size(); ++i)
        if (v[i] < delta) {
          v[i] = delta;
          ++pf.truncation_count;
        }
      pf.pi_values.push_back(std::move(v));
    }
    return pf;
  }
};

// π̂_t fits among treatment-fit at-risk units, truncated below at δ.
// `train_weight`, when given, further restricts the fitting rows (CV folds);
// predictions always cover the whole dataset.
inline PropensityFit fit_propensities(const LongitudinalDataset& ds, const ScenarioSpec& scenario,
                                      const LearnerSpec& learner, double delta,
                                      const ArrayXd* train_weight = nullptr) {
  if (!(delta > 0.0 && delta < 0.5)) throw std::invalid_argument("delta must lie in (0, 0.5)");
  if (learner.family == LearnerFamily::BoostedStumps || learner.family == LearnerFamily::Empty)
    throw std::invalid_argument("treatment mechanism fits use logistic learners");
  PropensityFit pf;
  pf.delta = delta;
  for (int t = 1; t <= ds.K; ++t) {
    HistoryView hv = history(ds, t, HistoryKind::TreatmentFit);
    ArrayXd w(ds.n);
    for (int i = 0; i < ds.n; ++i) w[i] = hv.at_risk[i] ? 1.0 : 0.0;
    if (train_weight) w *= *train_weight;
    if ((w <= 0.0).all()) throw std::runtime_error("no at-risk units for treatment fit at t=" + std::to_string(t));
    const FitSpec& fs = scenario.pi_at(t);
    FittedRegression reg;
    reg.t = t;
    reg.kind = HistoryKind::TreatmentFit;
    reg.cols = fs.select_columns(hv.names);
    MatrixXd X(ds.n, static_cast<Eigen::Index>(reg.cols.size()));
    for (std::size_t j = 0; j < reg.cols.size(); ++j)
      X.col(static_cast<Eigen::Index>(j)) = hv.matrix.col(reg.cols[j]);
    const ArrayXd y = ds.treatment[static_cast<std::size_t>(t) - 1].cast<double>();
    const bool intercept_only =
        fs.design == FitDesign::InterceptOnly || learner.family == LearnerFamily::LogisticInterceptOnly;
    if (fs.design == FitDesign::Saturated && !intercept_only) {
      reg.saturated = true;
      reg.dict = detail::saturation_dict(X, w);
      MatrixXd hot = reg.design_on(ds);
      reg.learner = fit_logistic(hot, y, w, nullptr, false);
    } else {
      reg.learner = fit_logistic(X, y, w, nullptr, intercept_only);
    }
    if (reg.learner.stabilized) ++pf.stabilized_count;
    ArrayXd p = reg.predict_on(ds);
    for (int i = 0; i < ds.n; ++i)
      if (p[i] < delta) {
        p[i] = delta;
        if (hv.at_risk[i]) ++pf.truncation_count;
      }
    pf.fits.push_back(std::move(reg));
    pf.pi_values.push_back(std::move(p));
  }
  return pf;
}

// ∏_{s=1}^{t} A_s/π̂_s per unit; index 0 is all ones.
inline std::vector<ArrayXd> cumulative_weights(const LongitudinalDataset& ds, const PropensityFit& pf) {
  std::vector<ArrayXd> cw(static_cast<std::size_t>(ds.K) + 1);
  cw[0] = ArrayXd::Ones(ds.n);
  for (int t = 1; t <= ds.K; ++t) {
    cw[static_cast<std::size_t>(t)] = cw[static_cast<std::size_t>(t) - 1];
    auto& w = cw[static_cast<std::size_t>(t)];
    const auto& pi = pf.values(t);
    for (int i = 0; i < ds.n; ++i)
      w[i] = (ds.treatment[static_cast<std::size_t>(t) - 1][i] == 1) ? w[i] / pi[i] : 0.0;
  }
  return cw;
}

using QPredictFn = std::function<ArrayXd(const LongitudinalDataset&)>;

struct EstimatorReport {
  std::string estimator;
  double estimate = std::numeric_limits<double>::quiet_NaN();
  std::optional<InfluenceCurve> influence;
  double se = std::numeric_limits<double>::quiet_NaN();
  double ci_lo = std::numeric_limits<double>::quiet_NaN();
  double ci_hi = std::numeric_limits<double>::quiet_NaN();
  std::vector<QPredictFn> q_predict;        // [t-1], t = 1..K
  std::vector<ArrayXd> q_values;            // [t-1], fitted Q̂_t on the source data
  std::map<std::string, double> diagnostics;

  void attach_inference(const LongitudinalDataset& ds, ArrayXd inf_values, double level = 0.95) {
    influence = InfluenceCurve::from_values(std::move(inf_values));
    se = influence->sd / std::sqrt(static_cast<double>(ds.n));
    auto ci = wald_ci(estimate, *influence, level);
    ci_lo = ci.first;
    ci_hi = ci.second;
  }
};

// Logit-scale chain: base regression plus additive updates, with the leading
// clipped-logit transform and deterministic-one forcing.
struct ChainPredictor {
  int t = 0;
  std::optional<FittedRegression> init;  // absent => constant base
  double base_value = 0.5;
  std::vector<FittedRegression> updates;
  std::shared_ptr<const PropensityFit> clever;  // LTMLE only: scale by 1/∏π̂
  double clever_eps = 0.0;

  ArrayXd eval(const LongitudinalDataset& ds) const {
    ArrayXd link(ds.n);
    if (init) {
      ArrayXd p = init->predict_on(ds);
      for (int i = 0; i < ds.n; ++i) link[i] = clipped_logit(p[i]);
    } else {
      link.setConstant(clipped_logit(base_value));
    }
    for (const auto& u : updates) link += u.link_on(ds);
    if (clever) {
      ArrayXd c = ArrayXd::Ones(ds.n);
      for (int s = 1; s <= t; ++s) c /= clever->predict_on(ds, s);
      link += clever_eps * c;
    }
    ArrayXd q = link.unaryExpr([](double e) { return expit(e); });
    detail::force_deterministic_one(ds, t, q);
    return q;
  }
};

// ---------------------------------------------------------------------------
// Direct plug-in (naive sequential regression); no influence function.
// ---------------------------------------------------------------------------
inline EstimatorReport direct_plugin(const LongitudinalDataset& ds, const ScenarioSpec& scenario,
                                     const std::vector<LearnerSpec>& learners) {
  if (static_cast<int>(learners.size()) != ds.K) throw std::invalid_argument("need one learner per time point");
  EstimatorReport rep;
  rep.estimator = "plugin";
  rep.q_values.resize(static_cast<std::size_t>(ds.K));
  rep.q_predict.resize(static_cast<std::size_t>(ds.K));
  ArrayXd q_next = ds.outcome;
  for (int t = ds.K; t >= 1; --t) {
    ArrayXd w = detail::mask_weights(ds, t, ds.at_risk_through(t));
    if ((w <= 0.0).all()) throw std::runtime_error("empty at-risk set at t=" + std::to_string(t));
    FittedRegression reg = detail::fit_q_regression(ds, t, scenario.q_at(t),
                                                    learners[static_cast<std::size_t>(t) - 1], q_next, w, nullptr);
    ArrayXd q_t = reg.predict_on(ds);
    detail::force_deterministic_one(ds, t, q_t);
    rep.q_values[static_cast<std::size_t>(t) - 1] = q_t;
    auto pred = std::make_shared<ChainPredictor>();
    pred->t = t;
    pred->init = std::move(reg);
    rep.q_predict[static_cast<std::size_t>(t) - 1] = [pred](const LongitudinalDataset& d) { return pred->eval(d); };
    q_next = std::move(q_t);
  }
  rep.estimate = q_next.mean();
  return rep;
}

// ---------------------------------------------------------------------------
// IPW: Q̂_0 = n^{-1} Σ_i (∏_t A_t/π̂_t) Y_i, CI from the centered terms.
// ---------------------------------------------------------------------------
inline EstimatorReport ipw(const LongitudinalDataset& ds, const PropensityFit& pf) {
  EstimatorReport rep;
  rep.estimator = "ipw";
  auto cw = cumulative_weights(ds, pf);
  ArrayXd terms = cw[static_cast<std::size_t>(ds.K)] * ds.outcome;
  rep.estimate = terms.mean();
  rep.attach_inference(ds, terms - rep.estimate);
  rep.diagnostics["trunc_count"] = pf.truncation_count;
  return rep;
}

namespace detail {

// One-parameter logistic fluctuation: maximize the weighted quasi-binomial
// likelihood of y on offset + eps * c. Newton with step halving.
inline double fit_fluctuation(const ArrayXd& c, const ArrayXd& y, const ArrayXd& w, const ArrayXd& offset) {
  double eps = 0.0;
  auto dev = [&](double e) {
    double d = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i)
      if (w[i] > 0.0) d += 2.0 * w[i] * cross_entropy(y[i], offset[i] + e * c[i]);
    return d;
  };
  double cur = dev(eps);
  for (int it = 0; it < 100; ++it) {
    double g = 0.0, h = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      if (w[i] <= 0.0) continue;
      const double p = expit(offset[i] + eps * c[i]);
      g += w[i] * (y[i] - p) * c[i];
      h += w[i] * p * (1.0 - p) * c[i] * c[i];
    }
    if (h <= 1e-300) break;
    double step = g / h;
    double lambda = 1.0;
    double next = dev(eps + step);
    for (int k = 0; k < 40 && next > cur + 1e-12; ++k) {
      lambda *= 0.5;
      next = dev(eps + lambda * step);
    }
    eps += lambda * step;
    const double change = cur - next;
    cur = next;
    if (std::fabs(change) < 1e-12 && std::fabs(g) < 1e-10) break;
  }
  return eps;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// LTMLE (Algorithm 2 with data-adaptive initial fits): backward recursion with
// a univariate logit fluctuation on the clever covariate 1/∏_{s<=t} π̂_s. On
// return the efficient estimating equation holds at IRLS precision.
// ---------------------------------------------------------------------------
inline EstimatorReport ltmle(const LongitudinalDataset& ds, const PropensityFit& pf, const ScenarioSpec& scenario,
                             const std::vector<LearnerSpec>& learners) {
  if (static_cast<int>(learners.size()) != ds.K) throw std::invalid_argument("need one learner per time point");
  EstimatorReport rep;
  rep.estimator = "ltmle";
  rep.q_values.resize(static_cast<std::size_t>(ds.K));
  rep.q_predict.resize(static_cast<std::size_t>(ds.K));
  auto cw = cumulative_weights(ds, pf);
  auto pf_shared = std::make_shared<PropensityFit>(pf);

  // clever covariate for every unit: ∏_{s<=t} 1/π̂_s (indicator-free)
  std::vector<ArrayXd> inv_cum(static_cast<std::size_t>(ds.K) + 1);
  inv_cum[0] = ArrayXd::Ones(ds.n);
  for (int t = 1; t <= ds.K; ++t)
    inv_cum[static_cast<std::size_t>(t)] = inv_cum[static_cast<std::size_t>(t) - 1] / pf.values(t);

  ArrayXd q_next = ds.outcome;
  double q0 = 0.0;
  for (int t = ds.K; t >= 0; --t) {
    ArrayXd offset(ds.n);
    std::optional<FittedRegression> init;
    double base = 0.5;
    ArrayXd w = (t == 0) ? ArrayXd::Ones(ds.n) : detail::mask_weights(ds, t, ds.at_risk_through(t));
    if ((w <= 0.0).all()) throw std::runtime_error("empty at-risk set at t=" + std::to_string(t));
    if (t == 0) {
      base = q_next.mean();
      offset.setConstant(clipped_logit(base));
    } else {
      init = detail::fit_q_regression(ds, t, scenario.q_at(t), learners[static_cast<std::size_t>(t) - 1], q_next,
                                      w, nullptr);
      ArrayXd p = init->predict_on(ds);
      for (int i = 0; i < ds.n; ++i) offset[i] = clipped_logit(p[i]);
    }
    const double eps = detail::fit_fluctuation(inv_cum[static_cast<std::size_t>(t)], q_next, w, offset);
    ArrayXd q_t = (offset + eps * inv_cum[static_cast<std::size_t>(t)]).unaryExpr([](double e) { return expit(e); });
    if (t >= 1) {
      detail::force_deterministic_one(ds, t, q_t);
      rep.q_values[static_cast<std::size_t>(t) - 1] = q_t;
      auto pred = std::make_shared<ChainPredictor>();
      pred->t = t;
      pred->init = std::move(*init);
      pred->clever = pf_shared;
      pred->clever_eps = eps;
      rep.q_predict[static_cast<std::size_t>(t) - 1] = [pred](const LongitudinalDataset& d) { return pred->eval(d); };
      q_next = std::move(q_t);
    } else {
      q0 = q_t[0];
    }
  }
  rep.estimate = q0;

  double resid = 0.0;
  for (int t = 0; t <= ds.K; ++t) {
    const ArrayXd& nxt = (t == ds.K) ? ds.outcome : rep.q_values[static_cast<std::size_t>(t)];
    const ArrayXd cur = (t == 0) ? ArrayXd::Constant(ds.n, q0) : rep.q_values[static_cast<std::size_t>(t) - 1];
    resid += (cw[static_cast<std::size_t>(t)] * (nxt - cur)).sum();
  }
  rep.diagnostics["score_resid"] = std::fabs(resid);
  rep.diagnostics["trunc_count"] = pf.truncation_count;
  rep.attach_inference(ds, influence_curve(ds, q0, rep.q_values, cw).values);
  return rep;
}

// ---------------------------------------------------------------------------
// SDR estimation via doubly robust unbiased transforms (Algorithm 1).
// Γ̂ pseudo-outcomes are left unclipped; regressions run among A_t = 1 units.
// ---------------------------------------------------------------------------
inline EstimatorReport dr_transform(const LongitudinalDataset& ds, const PropensityFit& pf,
                                    const ScenarioSpec& scenario, const std::vector<LearnerSpec>& learners) {
  if (static_cast<int>(learners.size()) != ds.K) throw std::invalid_argument("need one learner per time point");
  EstimatorReport rep;
  rep.estimator = "drtransform";
  rep.q_values.resize(static_cast<std::size_t>(ds.K));
  rep.q_predict.resize(static_cast<std::size_t>(ds.K));

  ArrayXd gamma = ds.outcome;  // Γ_K = Q̂_{K+1}
  ArrayXd q_next = ds.outcome;
  for (int t = ds.K; t >= 0; --t) {
    if (t < ds.K) {
      // Γ_t = Q̂_{t+1} + (A_{t+1}/π̂_{t+1}) (Γ_{t+1} − Q̂_{t+1})
      const auto& pi = pf.values(t + 1);
      ArrayXd next_gamma(ds.n);
      for (int i = 0; i < ds.n; ++i) {
        const double ratio = (ds.treatment[static_cast<std::size_t>(t)][i] == 1) ? 1.0 / pi[i] : 0.0;
        next_gamma[i] = q_next[i] + ratio * (gamma[i] - q_next[i]);
      }
      gamma = std::move(next_gamma);
    }
    if (t == 0) break;
    ArrayXd w(ds.n);
    for (int i = 0; i < ds.n; ++i)
      w[i] = (ds.treatment[static_cast<std::size_t>(t) - 1][i] == 1 && !ds.det_one(t, i)) ? 1.0 : 0.0;
    if ((w <= 0.0).all()) throw std::runtime_error("empty at-risk set at t=" + std::to_string(t));
    FittedRegression reg = detail::fit_gamma_regression(ds, t, scenario.q_at(t),
                                                        learners[static_cast<std::size_t>(t) - 1], gamma, w);
    ArrayXd q_t = reg.predict_on(ds);
    detail::force_deterministic_one(ds, t, q_t);
    rep.q_values[static_cast<std::size_t>(t) - 1] = q_t;
    auto pred = std::make_shared<FittedRegression>(std::move(reg));
    const int tt = t;
    rep.q_predict[static_cast<std::size_t>(t) - 1] = [pred, tt](const LongitudinalDataset& d) {
      ArrayXd q = pred->predict_on(d);
      detail::force_deterministic_one(d, tt, q);
      return q;
    };
    q_next = q_t;
  }
  rep.estimate = gamma.mean();  // the t = 0 regression is the empirical mean
  rep.attach_inference(ds, gamma - rep.estimate);
  rep.diagnostics["trunc_count"] = pf.truncation_count;
  return rep;
}

// ---------------------------------------------------------------------------
// iTMLE (Algorithm 3). For each s = K..t0 the estimate of Q_s is targeted
// towards every Q_t, t = s..t0, by a function-valued fluctuation of H̄_t with
// weight A_t ∏_{r=t+1}^s A_r/π̂_r. The targeting class at t = 0 is
// intercept-only, which makes every P_n ÎF_t vanish at the solution.
// ---------------------------------------------------------------------------
inline EstimatorReport itmle(const LongitudinalDataset& ds, int t0, const PropensityFit& pf,
                             const ScenarioSpec& scenario, const std::vector<LearnerSpec>& learners,
                             const std::vector<LearnerSpec>& targeting, bool plugin_init = true,
                             const std::vector<FitSpec>* targeting_design = nullptr) {
  if (t0 < 0 || t0 > ds.K) throw std::invalid_argument("t0 outside 0..K");
  if (static_cast<int>(learners.size()) != ds.K || static_cast<int>(targeting.size()) != ds.K)
    throw std::invalid_argument("need one learner and one targeting class per time point");
  EstimatorReport rep;
  rep.estimator = "itmle";
  rep.q_values.resize(static_cast<std::size_t>(ds.K));
  rep.q_predict.resize(static_cast<std::size_t>(ds.K));
  auto cw = cumulative_weights(ds, pf);

  ArrayXd q_star_next = ds.outcome;  // Q̂*_{s+1} during the backward sweep
  double q0 = std::numeric_limits<double>::quiet_NaN();
  for (int s = ds.K; s >= t0; --s) {
    auto pred = std::make_shared<ChainPredictor>();
    pred->t = s;
    ArrayXd link(ds.n);
    if (s >= 1 && plugin_init) {
      ArrayXd w = detail::mask_weights(ds, s, ds.at_risk_through(s));
      if ((w <= 0.0).all()) throw std::runtime_error("empty at-risk set at t=" + std::to_string(s));
      pred->init = detail::fit_q_regression(ds, s, scenario.q_at(s), learners[static_cast<std::size_t>(s) - 1],
                                            q_star_next, w, nullptr);
      ArrayXd p = pred->init->predict_on(ds);
      for (int i = 0; i < ds.n; ++i) link[i] = clipped_logit(p[i]);
    } else {
      link.setConstant(0.0);  // Q̂_s^{s+1} ≡ 1/2
    }
    // weight_t = A_t ∏_{r=t+1}^{s} A_r/π̂_r, built downward from w_s = A_s
    ArrayXd weight(ds.n);
    for (int i = 0; i < ds.n; ++i)
      weight[i] = (s >= 1 && ds.treatment[static_cast<std::size_t>(s) - 1][i] == 0) ? 0.0 : 1.0;
    for (int t = s; t >= t0; --t) {
      if (t < s) {
        const auto& pi = pf.values(t + 1);
        for (int i = 0; i < ds.n; ++i) {
          weight[i] /= pi[i];
          if (t >= 1 && ds.treatment[static_cast<std::size_t>(t) - 1][i] == 0) weight[i] = 0.0;
        }
      }
      ArrayXd w_fit = weight;
      if (s >= 1 && ds.has_deterministic_one())
        for (int i = 0; i < ds.n; ++i)
          if (ds.det_one(s, i)) w_fit[i] = 0.0;
      const LearnerSpec cls = (t == 0) ? LearnerSpec::intercept_only() : targeting[static_cast<std::size_t>(t) - 1];
      const FitSpec fs = (t >= 1 && targeting_design) ? (*targeting_design)[static_cast<std::size_t>(t) - 1]
                                                      : FitSpec::all();
      FittedRegression upd = detail::fit_q_regression(ds, t, fs, cls, q_star_next, w_fit, &link);
      link += upd.link_on(ds);
      pred->updates.push_back(std::move(upd));
    }
    ArrayXd q_star = link.unaryExpr([](double e) { return expit(e); });
    if (s >= 1) {
      detail::force_deterministic_one(ds, s, q_star);
      rep.q_values[static_cast<std::size_t>(s) - 1] = q_star;
      rep.q_predict[static_cast<std::size_t>(s) - 1] = [pred](const LongitudinalDataset& d) { return pred->eval(d); };
      q_star_next = std::move(q_star);
    } else {
      q0 = q_star[0];
    }
  }

  rep.diagnostics["trunc_count"] = pf.truncation_count;
  if (t0 == 0) {
    rep.estimate = q0;
    double max_term = 0.0;
    for (int t = 0; t <= ds.K; ++t) {
      const ArrayXd& nxt = (t == ds.K) ? ds.outcome : rep.q_values[static_cast<std::size_t>(t)];
      const ArrayXd cur = (t == 0) ? ArrayXd::Constant(ds.n, q0) : rep.q_values[static_cast<std::size_t>(t) - 1];
      max_term = std::max(max_term, std::fabs((cw[static_cast<std::size_t>(t)] * (nxt - cur)).mean()));
    }
    rep.diagnostics["max_if_mean"] = max_term;
    rep.attach_inference(ds, influence_curve(ds, q0, rep.q_values, cw).values);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// IPW squared-error risk of a candidate Q_t (empirical mean among A_t = 1).
// ---------------------------------------------------------------------------
inline double ipw_risk(const ArrayXd& q_candidate, const LongitudinalDataset& ds, const PropensityFit& pf, int t) {
  if (t > ds.K) throw std::invalid_argument("ipw_risk: t > K");
  ArrayXd tail = ArrayXd::Ones(ds.n);
  for (int s = ds.K; s >= t + 1; --s) {
    const auto& pi = pf.values(s);
    for (int i = 0; i < ds.n; ++i)
      tail[i] = (ds.treatment[static_cast<std::size_t>(s) - 1][i] == 1) ? tail[i] / pi[i] : 0.0;
  }
  double sum = 0.0;
  int count = 0;
  for (int i = 0; i < ds.n; ++i) {
    const bool in = (t == 0) || ds.treatment[static_cast<std::size_t>(t) - 1][i] == 1;
    if (!in) continue;
    ++count;
    const double d = ds.outcome[i] - q_candidate[i];
    sum += tail[i] * d * d;
  }
  if (count == 0) throw std::runtime_error("ipw_risk: no units with A_t = 1");
  return sum / count;
}

// ---------------------------------------------------------------------------
// Cross-validated iTMLE (Algorithm 4). Candidate fluctuations are fitted per
// training fold and selected by the pooled validation loss; the final stage
// towards t0 = 0 is intercept-only and fitted on all units with fold-assigned
// nuisances, so the full-sample score equations hold exactly.
// ---------------------------------------------------------------------------
struct CvItmleResult {
  EstimatorReport report;
  std::vector<int> selected;                    // per (s,t) stage, s = K..max(t0,1) outer, t = s..t0 inner
  std::vector<std::vector<double>> stage_risks; // pooled validation risk per candidate, same stage order
};

inline CvItmleResult cv_itmle(const LongitudinalDataset& ds, int t0, const std::vector<PropensityFit>& pf_folds,
                              const ScenarioSpec& scenario, const std::vector<LearnerSpec>& learners,
                              const std::vector<LearnerSpec>& candidates, const CvPartition& part,
                              bool plugin_init = true) {
  if (part.V < 2) throw std::invalid_argument("fold count >= 2 required");
  if (t0 < 0 || t0 > ds.K) throw std::invalid_argument("t0 outside 0..K");
  if (static_cast<int>(pf_folds.size()) != part.V) throw std::invalid_argument("need one propensity fit per fold");
  if (candidates.empty()) throw std::invalid_argument("no targeting candidates");
  if (static_cast<int>(part.fold.size()) != ds.n) throw std::invalid_argument("partition size mismatch");

  CvItmleResult out;
  EstimatorReport& rep = out.report;
  rep.estimator = "cvitmle";
  rep.q_values.resize(static_cast<std::size_t>(ds.K));
  rep.q_predict.resize(static_cast<std::size_t>(ds.K));

  const int V = part.V;
  std::vector<ArrayXd> train_w(static_cast<std::size_t>(V)), valid_mask(static_cast<std::size_t>(V));
  for (int v = 0; v < V; ++v) {
    train_w[static_cast<std::size_t>(v)] = ArrayXd::Zero(ds.n);
    valid_mask[static_cast<std::size_t>(v)] = ArrayXd::Zero(ds.n);
    for (int i = 0; i < ds.n; ++i)
      if (part.fold[static_cast<std::size_t>(i)] == v)
        valid_mask[static_cast<std::size_t>(v)][i] = 1.0;
      else
        train_w[static_cast<std::size_t>(v)][i] = 1.0;
  }

  // Q̂*_{s+1} per fold (all start at the outcome).
  std::vector<ArrayXd> q_star_next(static_cast<std::size_t>(V), ds.outcome);
  std::vector<std::vector<ArrayXd>> q_star_fold(static_cast<std::size_t>(ds.K));  // [t-1][v]
  // fold-assigned arrays for reporting
  auto fold_assigned = [&](const std::vector<ArrayXd>& per_fold) {
    ArrayXd out_arr(ds.n);
    for (int i = 0; i < ds.n; ++i) out_arr[i] = per_fold[static_cast<std::size_t>(part.fold[static_cast<std::size_t>(i)])][i];
    return out_arr;
  };

  double q0 = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::vector<std::shared_ptr<ChainPredictor>>> preds(static_cast<std::size_t>(ds.K));

  for (int s = ds.K; s >= std::max(t0, 1); --s) {
    std::vector<ArrayXd> link(static_cast<std::size_t>(V), ArrayXd::Zero(ds.n));
    std::vector<std::shared_ptr<ChainPredictor>> stage_preds(static_cast<std::size_t>(V));
    for (int v = 0; v < V; ++v) {
      stage_preds[static_cast<std::size_t>(v)] = std::make_shared<ChainPredictor>();
      stage_preds[static_cast<std::size_t>(v)]->t = s;
    }
    if (plugin_init) {
      for (int v = 0; v < V; ++v) {
        ArrayXd w = detail::mask_weights(ds, s, ds.at_risk_through(s)) * train_w[static_cast<std::size_t>(v)];
        if ((w <= 0.0).all()) throw std::runtime_error("empty training at-risk set at t=" + std::to_string(s));
        auto init = detail::fit_q_regression(ds, s, scenario.q_at(s), learners[static_cast<std::size_t>(s) - 1],
                                             q_star_next[static_cast<std::size_t>(v)], w, nullptr);
        ArrayXd p = init.predict_on(ds);
        for (int i = 0; i < ds.n; ++i) link[static_cast<std::size_t>(v)][i] = clipped_logit(p[i]);
        stage_preds[static_cast<std::size_t>(v)]->init = std::move(init);
      }
    }
    // per-fold weights A_t ∏ A_r/π̂_r, updated downward in t
    std::vector<ArrayXd> weight(static_cast<std::size_t>(V));
    for (int v = 0; v < V; ++v) {
      weight[static_cast<std::size_t>(v)].resize(ds.n);
      for (int i = 0; i < ds.n; ++i)
        weight[static_cast<std::size_t>(v)][i] =
            (ds.treatment[static_cast<std::size_t>(s) - 1][i] == 0) ? 0.0 : 1.0;
    }
    for (int t = s; t >= t0; --t) {
      if (t < s)
        for (int v = 0; v < V; ++v) {
          const auto& pi = pf_folds[static_cast<std::size_t>(v)].values(t + 1);
          for (int i = 0; i < ds.n; ++i) {
            weight[static_cast<std::size_t>(v)][i] /= pi[i];
            if (t >= 1 && ds.treatment[static_cast<std::size_t>(t) - 1][i] == 0)
              weight[static_cast<std::size_t>(v)][i] = 0.0;
          }
        }
      std::vector<ArrayXd> fit_w(static_cast<std::size_t>(V));
      for (int v = 0; v < V; ++v) {
        fit_w[static_cast<std::size_t>(v)] = weight[static_cast<std::size_t>(v)];
        if (ds.has_deterministic_one())
          for (int i = 0; i < ds.n; ++i)
            if (ds.det_one(s, i)) fit_w[static_cast<std::size_t>(v)][i] = 0.0;
      }
      if (t == 0) {
        // pooled intercept-only fluctuation with fold-assigned pieces
        ArrayXd y(ds.n), off(ds.n), w(ds.n);
        for (int i = 0; i < ds.n; ++i) {
          const int v = part.fold[static_cast<std::size_t>(i)];
          y[i] = q_star_next[static_cast<std::size_t>(v)][i];
          off[i] = link[static_cast<std::size_t>(v)][i];
          w[i] = fit_w[static_cast<std::size_t>(v)][i];
        }
        FittedLearner fl = fit_logistic(MatrixXd::Zero(ds.n, 0), y, w, &off, /*intercept_only=*/true);
        const double eps = fl.beta[0];
        for (int v = 0; v < V; ++v) link[static_cast<std::size_t>(v)] += eps;
        FittedRegression upd;
        upd.t = 0;
        upd.learner = std::move(fl);
        for (int v = 0; v < V; ++v) stage_preds[static_cast<std::size_t>(v)]->updates.push_back(upd);
        out.selected.push_back(0);
        continue;
      }
      // candidate fits per fold, selection by pooled validation loss
      std::vector<std::vector<FittedRegression>> fits(candidates.size(),
                                                      std::vector<FittedRegression>(static_cast<std::size_t>(V)));
      std::vector<double> risk(candidates.size(), 0.0);
      for (std::size_t m = 0; m < candidates.size(); ++m) {
        bool failed = false;
        for (int v = 0; v < V && !failed; ++v) {
          ArrayXd w = fit_w[static_cast<std::size_t>(v)] * train_w[static_cast<std::size_t>(v)];
          try {
            fits[m][static_cast<std::size_t>(v)] =
                detail::fit_q_regression(ds, t, FitSpec::all(), candidates[m],
                                         q_star_next[static_cast<std::size_t>(v)], w,
                                         &link[static_cast<std::size_t>(v)]);
          } catch (const std::exception&) {
            failed = true;
          }
        }
        if (failed) {
          risk[m] = std::numeric_limits<double>::infinity();
          continue;
        }
        double r = 0.0;
        for (int v = 0; v < V; ++v) {
          ArrayXd upd_link = fits[m][static_cast<std::size_t>(v)].link_on(ds);
          for (int i = 0; i < ds.n; ++i) {
            const double w = fit_w[static_cast<std::size_t>(v)][i];
            if (valid_mask[static_cast<std::size_t>(v)][i] <= 0.0 || w <= 0.0) continue;
            const double eta = link[static_cast<std::size_t>(v)][i] + upd_link[i];
            r += w * cross_entropy(q_star_next[static_cast<std::size_t>(v)][i], eta);
          }
        }
        risk[m] = r;
      }
      int best = 0;
      for (std::size_t m = 1; m < candidates.size(); ++m)
        if (risk[m] < risk[static_cast<std::size_t>(best)]) best = static_cast<int>(m);
      out.selected.push_back(best);
      out.stage_risks.push_back(risk);
      for (int v = 0; v < V; ++v) {
        link[static_cast<std::size_t>(v)] += fits[static_cast<std::size_t>(best)][static_cast<std::size_t>(v)].link_on(ds);
        stage_preds[static_cast<std::size_t>(v)]->updates.push_back(
            fits[static_cast<std::size_t>(best)][static_cast<std::size_t>(v)]);
      }
    }
    // Q̂*_s per fold
    q_star_fold[static_cast<std::size_t>(s) - 1].resize(static_cast<std::size_t>(V));
    for (int v = 0; v < V; ++v) {
      ArrayXd q = link[static_cast<std::size_t>(v)].unaryExpr([](double e) { return expit(e); });
      detail::force_deterministic_one(ds, s, q);
      q_star_fold[static_cast<std::size_t>(s) - 1][static_cast<std::size_t>(v)] = q;
      q_star_next[static_cast<std::size_t>(v)] = q;
    }
    preds[static_cast<std::size_t>(s) - 1] = stage_preds;
    rep.q_values[static_cast<std::size_t>(s) - 1] = fold_assigned(q_star_fold[static_cast<std::size_t>(s) - 1]);
    auto stage_copy = stage_preds;
    const int Vc = V;
    rep.q_predict[static_cast<std::size_t>(s) - 1] = [stage_copy, Vc](const LongitudinalDataset& d) {
      ArrayXd acc = ArrayXd::Zero(d.n);
      for (const auto& p : stage_copy) acc += p->eval(d);
      return acc / Vc;  // fold-average predictor for new data
    };
  }

  if (t0 == 0) {
    // final all-data regression: intercept-only, no offset => mean of Q̂*_1
    ArrayXd y = fold_assigned(q_star_fold[0]);
    q0 = y.mean();
    rep.estimate = q0;
    // fold-assigned cumulative weights for IF and score checks
    std::vector<ArrayXd> cw(static_cast<std::size_t>(ds.K) + 1, ArrayXd::Ones(ds.n));
    for (int t = 1; t <= ds.K; ++t) {
      cw[static_cast<std::size_t>(t)] = cw[static_cast<std::size_t>(t) - 1];
      for (int i = 0; i < ds.n; ++i) {
        const int v = part.fold[static_cast<std::size_t>(i)];
        const double pi = pf_folds[static_cast<std::size_t>(v)].values(t)[i];
        cw[static_cast<std::size_t>(t)][i] =
            (ds.treatment[static_cast<std::size_t>(t) - 1][i] == 1) ? cw[static_cast<std::size_t>(t)][i] / pi : 0.0;
      }
    }
    double max_term = 0.0;
    for (int t = 0; t <= ds.K; ++t) {
      const ArrayXd& nxt = (t == ds.K) ? ds.outcome : rep.q_values[static_cast<std::size_t>(t)];
      const ArrayXd cur = (t == 0) ? ArrayXd::Constant(ds.n, q0) : rep.q_values[static_cast<std::size_t>(t) - 1];
      max_term = std::max(max_term, std::fabs((cw[static_cast<std::size_t>(t)] * (nxt - cur)).mean()));
    }
    rep.diagnostics["max_if_mean"] = max_term;
    rep.attach_inference(ds, influence_curve(ds, q0, rep.q_values, cw).values);
  }
  int trunc = 0;
  for (const auto& pfv : pf_folds) trunc += pfv.truncation_count;
  rep.diagnostics["trunc_count"] = trunc;
  return out;
}

}  // namespace sdr
