#pragma once

#include <algorithm>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdr/dataset.hpp"

namespace sdr {

// Design of one nuisance fit: which columns of H̄_t it may see, and whether it
// is a main-terms, saturated (one-hot over distinct rows) or intercept-only fit.
enum class FitDesign { MainTerms, Saturated, InterceptOnly };

struct FitSpec {
  FitDesign design = FitDesign::MainTerms;
  std::optional<std::vector<std::string>> allowed;  // column allow-list; nullopt = all

  static FitSpec all() { return {}; }
  static FitSpec intercept_only() { return {FitDesign::InterceptOnly, std::nullopt}; }
  static FitSpec saturated() { return {FitDesign::Saturated, std::nullopt}; }
  static FitSpec drop(std::vector<std::string> names) {
    FitSpec fs;
    fs.allowed = std::nullopt;
    fs.dropped = std::move(names);
    return fs;
  }
  std::vector<std::string> dropped;  // subtractive form, applied after `allowed`

  std::vector<int> select_columns(const std::vector<std::string>& names) const {
    std::vector<int> cols;
    if (design == FitDesign::InterceptOnly) return cols;
    for (std::size_t j = 0; j < names.size(); ++j) {
      if (allowed && std::find(allowed->begin(), allowed->end(), names[j]) == allowed->end()) continue;
      if (std::find(dropped.begin(), dropped.end(), names[j]) != dropped.end()) continue;
      cols.push_back(static_cast<int>(j));
    }
    if (allowed)
      for (const auto& nm : *allowed)
        if (std::find(names.begin(), names.end(), nm) == names.end())
          throw std::invalid_argument("allow-list names unknown column '" + nm + "'");
    return cols;
  }
};

// Per-time correctness pattern of the nuisance estimation, labelled as in the
// simulation study (Qc.gc, Qi.gc, Qc.gi, Qi.gi, QSDR.gSDR) or custom.
struct ScenarioSpec {
  std::string label = "custom";
  std::vector<FitSpec> q;   // [t-1], fit design for Q_t, t = 1..K
  std::vector<FitSpec> pi;  // [t-1], fit design for π_t

  static ScenarioSpec all_correct(int K, FitDesign design = FitDesign::MainTerms) {
    ScenarioSpec s;
    s.label = "Qc.gc";
    s.q.assign(static_cast<std::size_t>(K), FitSpec{design, std::nullopt});
    s.pi.assign(static_cast<std::size_t>(K), FitSpec{design, std::nullopt});
    return s;
  }

  const FitSpec& q_at(int t) const { return q[static_cast<std::size_t>(t) - 1]; }
  const FitSpec& pi_at(int t) const { return pi[static_cast<std::size_t>(t) - 1]; }
};

namespace detail {

// The "incorrect" outcome regression drops the baseline block and the whole
// current-time block; the "incorrect" treatment mechanism is intercept-only.
inline FitSpec incorrect_q_fit(const LongitudinalDataset& prototype, int t) {
  FitSpec fs;
  fs.dropped = prototype.baseline_names;
  for (const auto& nm : prototype.covariate_names[static_cast<std::size_t>(t) - 1]) fs.dropped.push_back(nm);
  return fs;
}

}  // namespace detail

// Scenario factory for the simulation DGPs. `prototype` supplies column names.
inline ScenarioSpec make_scenario(const LongitudinalDataset& prototype, const std::string& label) {
  const int K = prototype.K;
  ScenarioSpec s = ScenarioSpec::all_correct(K);
  s.label = label;
  const bool q_incorrect = label == "Qi.gc" || label == "Qi.gi";
  const bool g_incorrect = label == "Qc.gi" || label == "Qi.gi";
  if (label == "Qc.gc" || q_incorrect || g_incorrect) {
    for (int t = 1; t <= K; ++t) {
      if (q_incorrect && t > 1) s.q[static_cast<std::size_t>(t) - 1] = detail::incorrect_q_fit(prototype, t);
      if (g_incorrect) s.pi[static_cast<std::size_t>(t) - 1] = FitSpec::intercept_only();
    }
    return s;
  }
  if (label == "QSDR.gSDR") {
    // Q_K incorrect, Q_t correct for t < K; π_K correct, π_t incorrect for t < K.
    s.q[static_cast<std::size_t>(K) - 1] = detail::incorrect_q_fit(prototype, K);
    for (int t = 1; t < K; ++t) s.pi[static_cast<std::size_t>(t) - 1] = FitSpec::intercept_only();
    return s;
  }
  throw std::invalid_argument("unknown scenario label '" + label + "'");
}

// Oracle variant: "correct" means saturated one-hot designs.
inline ScenarioSpec make_oracle_scenario(int K, const std::string& label) {
  ScenarioSpec s = ScenarioSpec::all_correct(K, FitDesign::Saturated);
  s.label = label;
  const bool q_incorrect = label == "Qi.gc" || label == "Qi.gi";
  const bool g_incorrect = label == "Qc.gi" || label == "Qi.gi";
  if (label == "Qc.gc" || q_incorrect || g_incorrect) {
    for (int t = 1; t <= K; ++t) {
      if (q_incorrect && t > 1) s.q[static_cast<std::size_t>(t) - 1] = FitSpec::intercept_only();
      if (g_incorrect) s.pi[static_cast<std::size_t>(t) - 1] = FitSpec::intercept_only();
    }
    return s;
  }
  if (label == "QSDR.gSDR") {
    s.q[static_cast<std::size_t>(K) - 1] = FitSpec::intercept_only();
    for (int t = 1; t < K; ++t) s.pi[static_cast<std::size_t>(t) - 1] = FitSpec::intercept_only();
    return s;
  }
  throw std::invalid_argument("unknown scenario label '" + label + "'");
}

}  // namespace sdr
