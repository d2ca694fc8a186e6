#pragma once

#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "sdr/csv.hpp"
#include "sdr/diagnostics.hpp"
#include "sdr/discrete.hpp"
#include "sdr/estimators.hpp"
#include "sdr/sem.hpp"

namespace sdr {

inline int worker_count(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("SDR_WORKERS")) {
    const int w = std::atoi(env);
    if (w > 0) return w;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

inline void parallel_for(int n_tasks, int workers, const std::function<void(int)>& fn) {
  workers = std::min(workers, n_tasks);
  if (workers <= 1) {
    for (int i = 0; i < n_tasks; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (int i = next.fetch_add(1); i < n_tasks; i = next.fetch_add(1)) fn(i);
    });
  for (auto& th : pool) th.join();
}

struct StudyConfig {
  std::string sim = "sim1";  // sim1 | sim2 | oracle
  std::string scenario = "Qc.gc";
  std::vector<std::string> estimators = {"plugin", "ipw", "ltmle", "drtransform", "itmle"};
  int n = 500;
  int reps = 200;
  std::uint64_t seed = 1;
  double delta = 0.01;
  int folds = 5;
  int oracle_K = 2;
  std::string oracle_preset = "binary";
  bool paper_scale = false;
  int workers = 0;
  int failure_budget = 0;
  int eval_points = 400;
  int truth_q1_reps = 20000;
  std::uint64_t truth_q0_reps = 2000000;
  std::optional<double> truth_q0_value;  // externally cached truth (overrides recomputation)
  std::optional<double> truth_q0_mc_se;
  std::string out_dir;
  bool plots = false;

  void validate() const {
    if (reps < 1) throw std::invalid_argument("reps must be >= 1");
    if (n < 10) throw std::invalid_argument("n must be >= 10");
    if (sim != "sim1" && sim != "sim2" && sim != "oracle") throw std::invalid_argument("unknown simulation id '" + sim + "'");
    static const std::vector<std::string> labels = {"Qc.gc", "Qi.gc", "Qc.gi", "Qi.gi", "QSDR.gSDR"};
    bool ok = false;
    for (const auto& l : labels) ok = ok || l == scenario;
    if (!ok) throw std::invalid_argument("unknown scenario label '" + scenario + "'");
    for (const auto& e : estimators)
      if (e != "plugin" && e != "ipw" && e != "ltmle" && e != "drtransform" && e != "itmle" && e != "cvitmle")
        throw std::invalid_argument("unknown estimator '" + e + "'");
  }
};

struct RepRow {
  int rep = 0;
  std::string estimator;
  double q0_hat = std::numeric_limits<double>::quiet_NaN();
  double se = std::numeric_limits<double>::quiet_NaN();
  double ci_lo = std::numeric_limits<double>::quiet_NaN();
  double ci_hi = std::numeric_limits<double>::quiet_NaN();
  double score_resid = std::numeric_limits<double>::quiet_NaN();
  double trunc_count = 0.0;
  double mse_q1 = std::numeric_limits<double>::quiet_NaN();
  int covered = -1;  // -1 = no CI
  std::string error;
};

struct EstimatorSummary {
  std::string estimator;
  int reps_ok = 0;
  double mean_q0 = 0.0, sd_q0 = 0.0;
  double bias = 0.0, abs_bias = 0.0, mc_se = 0.0;
  double rel_abs_bias = 0.0;
  double mse_q1 = std::numeric_limits<double>::quiet_NaN();
  double rel_mse_q1 = std::numeric_limits<double>::quiet_NaN();
  double coverage = std::numeric_limits<double>::quiet_NaN();
  double mean_ci_len = std::numeric_limits<double>::quiet_NaN();
  double max_score_resid = 0.0;
  int failures = 0;
};

struct StudyResult {
  StudyConfig config;
  double truth = 0.0;
  double truth_mc_se = 0.0;
  std::vector<RepRow> rows;                 // reps * estimators, replication-major order
  std::vector<EstimatorSummary> summary;
};

namespace study_detail {

struct SimContext {
  bool oracle = false;
  SemSpec sem;
  DiscreteDgp dgp;
  double truth = 0.0, truth_mc_se = 0.0;
  // Q1 evaluation
  LongitudinalDataset eval_set;  // sims only
  ArrayXd q1_truth;              // per eval point (sims) — oracle uses exact tables
  std::vector<double> q1_exact_table;  // oracle
  std::vector<double> q1_marginal;     // oracle: P(h̄_1)
};

inline OraclePreset parse_preset(const std::string& s) {
  if (s == "binary") return OraclePreset::Binary;
  if (s == "small") return OraclePreset::Small;
  if (s == "rich") return OraclePreset::Rich;
  throw std::invalid_argument("unknown oracle preset '" + s + "'");
}

inline SimContext make_context(const StudyConfig& cfg) {
  SimContext ctx;
  if (cfg.sim == "oracle") {
    ctx.oracle = true;
    ctx.dgp = discrete_oracle(cfg.oracle_K, parse_preset(cfg.oracle_preset), mix_seed(cfg.seed, 0xD6bULL));
    ctx.truth = exact_q_all(ctx.dgp)[0][0];
    ctx.truth_mc_se = 0.0;
    ctx.q1_exact_table = exact_q(ctx.dgp, 1);
    ctx.q1_marginal = ctx.dgp.marginal_hist(1);
    return ctx;
  }
  ctx.sem = (cfg.sim == "sim1") ? sim1_spec() : sim2_spec();
  if (cfg.truth_q0_value) {
    ctx.truth = *cfg.truth_q0_value;
    ctx.truth_mc_se = cfg.truth_q0_mc_se.value_or(0.0);
  } else {
    auto tq = truth_q0(ctx.sem, cfg.truth_q0_reps, mix_seed(cfg.seed, 0x70ULL));
    ctx.truth = tq.value;
    ctx.truth_mc_se = tq.mc_se;
  }
  ctx.eval_set = sample(ctx.sem, cfg.eval_points, mix_seed(cfg.seed, 0xE7a1ULL));
  auto q1 = truth_q1(ctx.sem, ctx.eval_set, cfg.truth_q1_reps, mix_seed(cfg.seed, 0x71ULL));
  ctx.q1_truth = q1.first;
  return ctx;
}

inline double eval_mse_q1(const SimContext& ctx, const DiscreteDgp* dgp, const EstimatorReport& rep) {
  if (rep.q_predict.empty() || !rep.q_predict[0]) return std::numeric_limits<double>::quiet_NaN();
  if (ctx.oracle) {
    auto table = table_from_predictor(*dgp, 1, rep.q_predict[0]);
    double acc = 0.0;
    for (std::size_t c = 0; c < table.size(); ++c) {
      const double d = table[c] - ctx.q1_exact_table[c];
      acc += ctx.q1_marginal[c] * d * d;
    }
    return acc;
  }
  ArrayXd pred = rep.q_predict[0](ctx.eval_set);
  return (pred - ctx.q1_truth).square().mean();
}

}  // namespace study_detail

// One replication: sample, fit nuisances, run the requested estimators.
inline std::vector<RepRow> run_replication(const StudyConfig& cfg, const study_detail::SimContext& ctx, int rep) {
  const std::uint64_t rep_seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(rep));
  std::vector<RepRow> rows;
  LongitudinalDataset ds;
  if (ctx.oracle)
    ds = sample_oracle(ctx.dgp, cfg.n, rep_seed).ds;
  else
    ds = sample(ctx.sem, cfg.n, rep_seed);

  const ScenarioSpec scenario = ctx.oracle ? make_oracle_scenario(ds.K, cfg.scenario) : make_scenario(ds, cfg.scenario);
  std::vector<LearnerSpec> q_learners(static_cast<std::size_t>(ds.K), LearnerSpec::logistic());
  std::vector<LearnerSpec> gamma_learners(static_cast<std::size_t>(ds.K),
                                          ctx.oracle ? LearnerSpec::stumps_deep() : LearnerSpec::stumps_medium());
  std::vector<LearnerSpec> targeting(static_cast<std::size_t>(ds.K), LearnerSpec::logistic());
  std::vector<FitSpec> targeting_design(static_cast<std::size_t>(ds.K),
                                        ctx.oracle ? FitSpec::saturated() : FitSpec::all());

  std::optional<PropensityFit> pf;
  std::string pf_error;
  try {
    pf = fit_propensities(ds, scenario, LearnerSpec::logistic(), cfg.delta);
  } catch (const std::exception& e) {
    pf_error = e.what();
  }

  for (const auto& name : cfg.estimators) {
    RepRow row;
    row.rep = rep;
    row.estimator = name;
    try {
      if (!pf && name != "plugin") throw std::runtime_error("propensity fit failed: " + pf_error);
      EstimatorReport er;
      if (name == "plugin") {
        er = direct_plugin(ds, scenario, q_learners);
      } else if (name == "ipw") {
        er = ipw(ds, *pf);
      } else if (name == "ltmle") {
        er = ltmle(ds, *pf, scenario, q_learners);
      } else if (name == "drtransform") {
        er = dr_transform(ds, *pf, scenario, gamma_learners);
      } else if (name == "itmle") {
        er = itmle(ds, 0, *pf, scenario, q_learners, targeting, true, &targeting_design);
      } else if (name == "cvitmle") {
        auto part = CvPartition::make(ds.n, cfg.folds, mix_seed(rep_seed, 0xCFULL));
        std::vector<PropensityFit> pfs;
        for (int v = 0; v < part.V; ++v) {
          ArrayXd tw = ArrayXd::Zero(ds.n);
          for (int i = 0; i < ds.n; ++i)
            if (part.fold[static_cast<std::size_t>(i)] != v) tw[i] = 1.0;
          pfs.push_back(fit_propensities(ds, scenario, LearnerSpec::logistic(), cfg.delta, &tw));
        }
        std::vector<LearnerSpec> candidates = {LearnerSpec::empty(), LearnerSpec::intercept_only(),
                                               LearnerSpec::logistic(), LearnerSpec::stumps_shallow()};
        er = cv_itmle(ds, 0, pfs, scenario, q_learners, candidates, part).report;
      }
      row.q0_hat = er.estimate;
      row.se = er.se;
      row.ci_lo = er.ci_lo;
      row.ci_hi = er.ci_hi;
      if (er.diagnostics.count("score_resid")) row.score_resid = er.diagnostics.at("score_resid");
      if (er.diagnostics.count("max_if_mean")) row.score_resid = er.diagnostics.at("max_if_mean");
      if (er.diagnostics.count("trunc_count")) row.trunc_count = er.diagnostics.at("trunc_count");
      row.mse_q1 = study_detail::eval_mse_q1(ctx, ctx.oracle ? &ctx.dgp : nullptr, er);
      if (er.influence) row.covered = (ctx.truth >= er.ci_lo && ctx.truth <= er.ci_hi) ? 1 : 0;
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::vector<EstimatorSummary> summarize(const StudyConfig& cfg, double truth,
                                               const std::vector<RepRow>& rows) {
  std::vector<EstimatorSummary> out;
  for (const auto& name : cfg.estimators) {
    EstimatorSummary s;
    s.estimator = name;
    std::vector<double> q0s, mses, lens;
    int covered = 0, with_ci = 0;
    for (const auto& r : rows) {
      if (r.estimator != name) continue;
      if (!r.error.empty()) {
        ++s.failures;
        continue;
      }
      q0s.push_back(r.q0_hat);
      if (std::isfinite(r.mse_q1)) mses.push_back(r.mse_q1);
      if (r.covered >= 0) {
        ++with_ci;
        covered += r.covered;
        lens.push_back(r.ci_hi - r.ci_lo);
      }
      if (std::isfinite(r.score_resid)) s.max_score_resid = std::max(s.max_score_resid, r.score_resid);
    }
    s.reps_ok = static_cast<int>(q0s.size());
    if (s.reps_ok > 0) {
      double sum = 0.0;
      for (double v : q0s) sum += v;
      s.mean_q0 = sum / s.reps_ok;
      double ss = 0.0;
      for (double v : q0s) ss += (v - s.mean_q0) * (v - s.mean_q0);
      s.sd_q0 = s.reps_ok > 1 ? std::sqrt(ss / (s.reps_ok - 1)) : 0.0;
      s.bias = s.mean_q0 - truth;
      s.abs_bias = std::fabs(s.bias);
      s.mc_se = s.reps_ok > 1 ? s.sd_q0 / std::sqrt(static_cast<double>(s.reps_ok)) : 0.0;
    }
    if (!mses.empty()) {
      double sum = 0.0;
      for (double v : mses) sum += v;
      s.mse_q1 = sum / static_cast<double>(mses.size());
    }
    if (with_ci > 0) {
      s.coverage = static_cast<double>(covered) / with_ci;
      double sum = 0.0;
      for (double v : lens) sum += v;
      s.mean_ci_len = sum / static_cast<double>(lens.size());
    }
    out.push_back(std::move(s));
  }
  // relative values, normalized by the best estimator in the panel
  double best_bias = std::numeric_limits<double>::infinity();
  double best_mse = std::numeric_limits<double>::infinity();
  for (const auto& s : out) {
    if (s.reps_ok > 0 && s.abs_bias < best_bias) best_bias = s.abs_bias;
    if (std::isfinite(s.mse_q1) && s.mse_q1 < best_mse) best_mse = s.mse_q1;
  }
  for (auto& s : out) {
    if (s.reps_ok > 0 && best_bias > 0.0) s.rel_abs_bias = s.abs_bias / best_bias;
    if (std::isfinite(s.mse_q1) && best_mse > 0.0) s.rel_mse_q1 = s.mse_q1 / best_mse;
  }
  return out;
}

inline void write_replication_csv(const StudyResult& res, std::ostream& out) {
  out << "estimator,scenario,seed,n,Q0_hat,se,ci_lo,ci_hi,score_resid,trunc_count,rep,mse_q1,covered,error\n";
  auto fmt = [](double v) { return std::isfinite(v) ? format_number(v) : std::string(""); };
  for (const auto& r : res.rows) {
    out << r.estimator << ',' << res.config.scenario << ',' << res.config.seed << ',' << res.config.n << ','
        << fmt(r.q0_hat) << ',' << fmt(r.se) << ',' << fmt(r.ci_lo) << ',' << fmt(r.ci_hi) << ','
        << fmt(r.score_resid) << ',' << fmt(r.trunc_count) << ',' << r.rep << ',' << fmt(r.mse_q1) << ','
        << (r.covered < 0 ? "" : std::to_string(r.covered)) << ',' << r.error << '\n';
  }
}

inline void write_summary_csv(const StudyResult& res, std::ostream& out) {
  out << "estimator,scenario,n,reps_ok,failures,truth,truth_mc_se,mean_Q0,sd_Q0,bias,abs_bias,mc_se,"
         "rel_abs_bias,mse_Q1,rel_mse_Q1,coverage,mean_ci_len,max_score_resid\n";
  auto fmt = [](double v) { return std::isfinite(v) ? format_number(v) : std::string(""); };
  for (const auto& s : res.summary) {
    out << s.estimator << ',' << res.config.scenario << ',' << res.config.n << ',' << s.reps_ok << ','
        << s.failures << ',' << fmt(res.truth) << ',' << fmt(res.truth_mc_se) << ',' << fmt(s.mean_q0) << ','
        << fmt(s.sd_q0) << ',' << fmt(s.bias) << ',' << fmt(s.abs_bias) << ',' << fmt(s.mc_se) << ','
        << fmt(s.rel_abs_bias) << ',' << fmt(s.mse_q1) << ',' << fmt(s.rel_mse_q1) << ',' << fmt(s.coverage)
        << ',' << fmt(s.mean_ci_len) << ',' << fmt(s.max_score_resid) << '\n';
  }
}

// Minimal grouped bar chart; the CSV stays canonical.
inline void write_summary_svg(const StudyResult& res, std::ostream& out) {
  const auto& sums = res.summary;
  const int n = static_cast<int>(sums.size());
  const int panel_w = 260, panel_h = 180, pad = 40;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << 3 * panel_w + 2 * pad << "\" height=\""
      << panel_h + 2 * pad << "\">\n";
  const char* metrics[3] = {"rel |bias| (Q0)", "rel MSE (Q1)", "coverage"};
  for (int p = 0; p < 3; ++p) {
    double maxv = 1.0;
    for (const auto& s : sums) {
      const double v = p == 0 ? s.rel_abs_bias : (p == 1 ? s.rel_mse_q1 : s.coverage);
      if (std::isfinite(v)) maxv = std::max(maxv, v);
    }
    const int x0 = pad + p * panel_w;
    out << "<text x=\"" << x0 << "\" y=\"" << pad - 10 << "\" font-size=\"12\">" << metrics[p] << " ["
        << res.config.scenario << "]</text>\n";
    for (int k = 0; k < n; ++k) {
      const auto& s = sums[static_cast<std::size_t>(k)];
      const double v = p == 0 ? s.rel_abs_bias : (p == 1 ? s.rel_mse_q1 : s.coverage);
      if (!std::isfinite(v)) continue;
      const double h = panel_h * (v / maxv);
      const int bw = (panel_w - 40) / std::max(1, n);
      out << "<rect x=\"" << x0 + k * bw << "\" y=\"" << pad + panel_h - h << "\" width=\"" << bw - 6
          << "\" height=\"" << h << "\" fill=\"#4477aa\"/>\n";
      out << "<text x=\"" << x0 + k * bw << "\" y=\"" << pad + panel_h + 14 << "\" font-size=\"9\">"
          << s.estimator << "</text>\n";
    }
  }
  out << "</svg>\n";
}

inline StudyResult run_study(StudyConfig cfg) {
  cfg.validate();
  auto ctx = study_detail::make_context(cfg);
  StudyResult res;
  res.config = cfg;
  res.truth = ctx.truth;
  res.truth_mc_se = ctx.truth_mc_se;
  std::vector<std::vector<RepRow>> per_rep(static_cast<std::size_t>(cfg.reps));
  parallel_for(cfg.reps, worker_count(cfg.workers), [&](int r) {
    per_rep[static_cast<std::size_t>(r)] = run_replication(cfg, ctx, r);
  });
  for (auto& rows : per_rep)
    for (auto& r : rows) res.rows.push_back(std::move(r));
  res.summary = summarize(cfg, res.truth, res.rows);
  if (!cfg.out_dir.empty()) {
    std::ofstream rf(cfg.out_dir + "/replications.csv");
    if (!rf) throw std::runtime_error("cannot write to output directory '" + cfg.out_dir + "'");
    write_replication_csv(res, rf);
    std::ofstream sf(cfg.out_dir + "/summary.csv");
    write_summary_csv(res, sf);
    if (cfg.plots) {
      std::ofstream pf(cfg.out_dir + "/summary.svg");
      write_summary_svg(res, pf);
    }
  }
  return res;
}

inline int total_failures(const StudyResult& res) {
  int f = 0;
  for (const auto& s : res.summary) f += s.failures;
  return f;
}

}  // namespace sdr
