#pragma once

#include <Eigen/Dense>
#include <cassert>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace sdr {

using Eigen::ArrayXd;
using Eigen::ArrayXi;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using ArrayXb = Eigen::Array<bool, Eigen::Dynamic, 1>;

// Longitudinal data unit O = (L_0, A_0, L_1, A_1, ..., A_K, L_{K+1}).
// A_0 is identically 1 and never stored; the outcome L_{K+1} lives in [0,1].
// Immutable after construction; safe to share across threads.
struct LongitudinalDataset {
  int n = 0;
  int K = 0;
  MatrixXd baseline;                                   // n x d0 (possibly 0 columns)
  std::vector<std::string> baseline_names;             // "L0_<name>"
  std::vector<MatrixXd> covariates;                    // [t-1]: n x d_t, t = 1..K
  std::vector<std::vector<std::string>> covariate_names;
  std::vector<ArrayXi> treatment;                      // [t-1]: n, values in {0,1}
  ArrayXd outcome;                                     // n, in [0,1]
  // Histories where Q_t is forced to 1 (time-to-event adapter); empty => none.
  std::vector<ArrayXb> deterministic_one;              // [t-1]: n

  bool has_deterministic_one() const { return !deterministic_one.empty(); }
  bool det_one(int t, int i) const {
    return has_deterministic_one() && deterministic_one[static_cast<std::size_t>(t) - 1][i];
  }

  // Indicator of ∏_{s=1}^{t} A_s = 1 (t = 0 gives all-true).
  ArrayXb at_risk_through(int t) const {
    ArrayXb a = ArrayXb::Constant(n, true);
    for (int s = 1; s <= t; ++s) a = a && (treatment[s - 1] == 1);
    return a;
  }
};

enum class HistoryKind { OutcomeFit, TreatmentFit };

// Design-matrix view of H̄_t = (L_0, A_1..A_{t-1}, L_1..L_t).
struct HistoryView {
  int t = 0;
  MatrixXd matrix;                 // n x d_t; zero columns at t = 0
  std::vector<std::string> names;  // column names, aligned with matrix
  ArrayXb at_risk;                 // per kind, see history()
};

struct UnitRecord {
  std::vector<double> baseline;
  std::vector<std::vector<double>> covariates;  // per t = 1..K
  std::vector<int> treatment;                   // per t = 1..K
  double outcome = 0.0;
};

namespace detail {
inline void check_time(int t, int K, int lo = 0) {
  if (t < lo || t > K) throw std::out_of_range("time index t=" + std::to_string(t) + " outside [" +
                                               std::to_string(lo) + "," + std::to_string(K) + "]");
}
}  // namespace detail

inline void validate_dataset(const LongitudinalDataset& ds) {
  if (ds.n <= 0) throw std::invalid_argument("dataset has no units");
  if (ds.K < 0) throw std::invalid_argument("negative K");
  if (ds.baseline.rows() != ds.n) throw std::invalid_argument("baseline row count mismatch");
  if (static_cast<int>(ds.covariates.size()) != ds.K || static_cast<int>(ds.treatment.size()) != ds.K)
    throw std::invalid_argument("per-time array count differs from K");
  for (int t = 1; t <= ds.K; ++t) {
    if (ds.covariates[t - 1].rows() != ds.n) throw std::invalid_argument("covariate rows != n at t=" + std::to_string(t));
    if (ds.treatment[t - 1].size() != ds.n) throw std::invalid_argument("treatment length != n at t=" + std::to_string(t));
    for (int i = 0; i < ds.n; ++i) {
      const int a = ds.treatment[t - 1][i];
      if (a != 0 && a != 1) throw std::invalid_argument("non-binary treatment at t=" + std::to_string(t));
    }
  }
  if (ds.outcome.size() != ds.n) throw std::invalid_argument("outcome length != n");
  for (int i = 0; i < ds.n; ++i)
    if (!(ds.outcome[i] >= 0.0 && ds.outcome[i] <= 1.0))
      throw std::invalid_argument("outcome outside [0,1] for unit " + std::to_string(i));
  if (!ds.deterministic_one.empty() && static_cast<int>(ds.deterministic_one.size()) != ds.K)
    throw std::invalid_argument("deterministic_one array count differs from K");
}

inline LongitudinalDataset build_dataset(int K, const std::vector<UnitRecord>& records,
                                         std::vector<std::string> baseline_names = {},
                                         std::vector<std::vector<std::string>> covariate_names = {}) {
  if (records.empty()) throw std::invalid_argument("no unit records");
  const int n = static_cast<int>(records.size());
  const int d0 = static_cast<int>(records.front().baseline.size());
  LongitudinalDataset ds;
  ds.n = n;
  ds.K = K;
  ds.baseline.resize(n, d0);
  ds.outcome.resize(n);
  std::vector<int> dt(static_cast<std::size_t>(K));
  for (int t = 1; t <= K; ++t) {
    if (static_cast<int>(records.front().covariates.size()) != K ||
        static_cast<int>(records.front().treatment.size()) != K)
      throw std::invalid_argument("record horizon differs from K");
    dt[t - 1] = static_cast<int>(records.front().covariates[t - 1].size());
    ds.covariates.emplace_back(n, dt[t - 1]);
    ds.treatment.emplace_back(n);
  }
  for (int i = 0; i < n; ++i) {
    const auto& r = records[i];
    if (static_cast<int>(r.baseline.size()) != d0 || static_cast<int>(r.covariates.size()) != K ||
        static_cast<int>(r.treatment.size()) != K)
      throw std::invalid_argument("dimension mismatch for unit " + std::to_string(i));
    for (int j = 0; j < d0; ++j) ds.baseline(i, j) = r.baseline[j];
    for (int t = 1; t <= K; ++t) {
      if (static_cast<int>(r.covariates[t - 1].size()) != dt[t - 1])
        throw std::invalid_argument("dimension mismatch for unit " + std::to_string(i) + " at t=" + std::to_string(t));
      for (int j = 0; j < dt[t - 1]; ++j) ds.covariates[t - 1](i, j) = r.covariates[t - 1][j];
      ds.treatment[t - 1][i] = r.treatment[t - 1];
    }
    ds.outcome[i] = r.outcome;
  }
  // Default column names.
  if (baseline_names.empty())
    for (int j = 0; j < d0; ++j) baseline_names.push_back("x" + std::to_string(j));
  if (covariate_names.empty()) {
    covariate_names.resize(static_cast<std::size_t>(K));
    for (int t = 1; t <= K; ++t)
      for (int j = 0; j < dt[t - 1]; ++j) covariate_names[t - 1].push_back("x" + std::to_string(j));
  }
  ds.baseline_names.clear();
  for (auto& nm : baseline_names) ds.baseline_names.push_back("L0_" + nm);
  ds.covariate_names.resize(static_cast<std::size_t>(K));
  for (int t = 1; t <= K; ++t) {
    ds.covariate_names[t - 1].clear();
    for (auto& nm : covariate_names[t - 1])
      ds.covariate_names[t - 1].push_back("L" + std::to_string(t) + "_" + nm);
  }
  validate_dataset(ds);
  return ds;
}

// H̄_t design matrix. Past treatments A_1..A_{t-1} are included as columns
// (constant columns are pruned later, at fit time, to keep IRLS well-posed).
inline HistoryView history(const LongitudinalDataset& ds, int t, HistoryKind kind,
                           bool include_past_treatments = true) {
  detail::check_time(t, ds.K);
  HistoryView hv;
  hv.t = t;
  int d = static_cast<int>(ds.baseline.cols());
  if (include_past_treatments) d += std::max(0, t - 1);
  for (int s = 1; s <= t; ++s) d += static_cast<int>(ds.covariates[s - 1].cols());
  hv.matrix.resize(ds.n, d);
  hv.names.reserve(static_cast<std::size_t>(d));
  int c = 0;
  for (int j = 0; j < ds.baseline.cols(); ++j, ++c) {
    hv.matrix.col(c) = ds.baseline.col(j);
    hv.names.push_back(ds.baseline_names[j]);
  }
  if (include_past_treatments)
    for (int s = 1; s <= t - 1; ++s, ++c) {
      hv.matrix.col(c) = ds.treatment[s - 1].cast<double>();
      hv.names.push_back("A" + std::to_string(s));
    }
  for (int s = 1; s <= t; ++s)
    for (int j = 0; j < ds.covariates[s - 1].cols(); ++j, ++c) {
      hv.matrix.col(c) = ds.covariates[s - 1].col(j);
      hv.names.push_back(ds.covariate_names[s - 1][j]);
    }
  const int upto = (kind == HistoryKind::OutcomeFit) ? t : t - 1;
  hv.at_risk = ds.at_risk_through(std::max(0, upto));
  return hv;
}

// Appendix-B adapter: discrete right censoring. C in 1..K+1, A_t = 1{C > t}.
// paths[i] holds the observed covariate vectors L_1..L_{min(C_i,K)}; for an
// uncensored unit (C = K+1) outcome[i] must be supplied. Covariates past C are
// stored as a 0 sentinel and are never read because at_risk is false there.
inline LongitudinalDataset from_right_censored(int K, const std::vector<int>& censor_time,
                                               const std::vector<std::vector<std::vector<double>>>& paths,
                                               const std::vector<std::optional<double>>& outcome,
                                               std::vector<std::vector<std::string>> covariate_names = {}) {
  const int n = static_cast<int>(censor_time.size());
  if (static_cast<int>(paths.size()) != n || static_cast<int>(outcome.size()) != n)
    throw std::invalid_argument("input length mismatch");
  std::vector<UnitRecord> recs(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int C = censor_time[i];
    if (C < 1 || C > K + 1) throw std::invalid_argument("censoring time outside 1..K+1");
    const int observed = std::min(C, K);
    if (static_cast<int>(paths[i].size()) != observed)
      throw std::invalid_argument("covariate path length differs from censoring time for unit " + std::to_string(i));
    auto& r = recs[static_cast<std::size_t>(i)];
    r.covariates.resize(static_cast<std::size_t>(K));
    r.treatment.resize(static_cast<std::size_t>(K));
    const std::size_t d = paths[i].empty() ? 0 : paths[i].front().size();
    for (int t = 1; t <= K; ++t) {
      r.treatment[t - 1] = (C > t) ? 1 : 0;
      r.covariates[t - 1] = (t <= observed) ? paths[i][t - 1] : std::vector<double>(d, 0.0);
    }
    if (C == K + 1) {
      if (!outcome[i]) throw std::invalid_argument("uncensored unit lacks outcome");
      r.outcome = *outcome[i];
    } else {
      r.outcome = 0.0;  // sentinel, masked by A_K = 0
    }
  }
  return build_dataset(K, recs, {}, std::move(covariate_names));
}

// Appendix-B adapter: time-to-event. Y = min(T,C) in 1..K+1, Δ = 1{T ≤ C}.
// Each observed covariate vector carries the event indicator 1{T ≤ t} in
// column event_col. A_t = 1{Y > t} ∪ {Δ = 1}; once the indicator is 1 the
// outcome is determined, so deterministic_one[t] marks those histories and
// covariates are carried forward from the last observed vector.
inline LongitudinalDataset from_time_to_event(int K, const std::vector<int>& y_time,
                                              const std::vector<int>& event,
                                              const std::vector<std::vector<std::vector<double>>>& paths,
                                              int event_col = 0,
                                              std::vector<std::vector<std::string>> covariate_names = {}) {
  const int n = static_cast<int>(y_time.size());
  if (static_cast<int>(event.size()) != n || static_cast<int>(paths.size()) != n)
    throw std::invalid_argument("input length mismatch");
  std::vector<UnitRecord> recs(static_cast<std::size_t>(n));
  std::vector<ArrayXb> det(static_cast<std::size_t>(K), ArrayXb::Constant(n, false));
  for (int i = 0; i < n; ++i) {
    const int Y = y_time[i];
    const int D = event[i];
    if (Y < 1 || Y > K + 1) throw std::invalid_argument("event/censoring time outside 1..K+1");
    if (D != 0 && D != 1) throw std::invalid_argument("non-binary event indicator");
    const int observed = std::min(Y, K);
    if (static_cast<int>(paths[i].size()) != observed)
      throw std::invalid_argument("covariate path length mismatch for unit " + std::to_string(i));
    auto& r = recs[static_cast<std::size_t>(i)];
    r.covariates.resize(static_cast<std::size_t>(K));
    r.treatment.resize(static_cast<std::size_t>(K));
    for (int t = 1; t <= observed; ++t) {
      const auto& v = paths[i][t - 1];
      if (event_col >= static_cast<int>(v.size())) throw std::invalid_argument("event column out of range");
      const double ind = v[static_cast<std::size_t>(event_col)];
      if (ind != 0.0 && ind != 1.0) throw std::invalid_argument("non-binary event indicator in covariates");
      const double expected = (D == 1 && Y <= t) ? 1.0 : 0.0;
      if (ind != expected)
        throw std::invalid_argument("inconsistent event indicators along path of unit " + std::to_string(i));
    }
    for (int t = 1; t <= K; ++t) {
      r.treatment[t - 1] = (Y > t || D == 1) ? 1 : 0;
      if (t <= observed) {
        r.covariates[t - 1] = paths[i][t - 1];
      } else if (D == 1) {
        r.covariates[t - 1] = paths[i].back();  // carried forward; indicator stays 1
        r.covariates[t - 1][static_cast<std::size_t>(event_col)] = 1.0;
      } else {
        r.covariates[t - 1] = std::vector<double>(paths[i].front().size(), 0.0);
      }
      if (r.covariates[t - 1][static_cast<std::size_t>(event_col)] == 1.0) det[t - 1][i] = true;
    }
    r.outcome = (D == 1 && Y <= K + 1) ? 1.0 : 0.0;
  }
  auto ds = build_dataset(K, recs, {}, std::move(covariate_names));
  ds.deterministic_one = std::move(det);
  return ds;
}

}  // namespace sdr
