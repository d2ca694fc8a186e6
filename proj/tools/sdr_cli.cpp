// Command-line harness: reproduce the simulation studies, run estimators on
// CSV data, regenerate cached truth constants, and run the identity suite.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "sdr/csv.hpp"
#include "sdr/diagnostics.hpp"
#include "sdr/simstudy.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TruthEntry {
  double value = 0.0, mc_se = 0.0;
  std::uint64_t reps = 0, seed = 0;
};

std::map<std::string, TruthEntry> load_truth(const std::string& path) {
  std::map<std::string, TruthEntry> out;
  std::ifstream in(path);
  if (!in) return out;
  json j;
  in >> j;
  for (auto it = j.begin(); it != j.end(); ++it) {
    TruthEntry e;
    e.value = it.value().at("value").get<double>();
    e.mc_se = it.value().at("mc_se").get<double>();
    e.reps = it.value().at("reps").get<std::uint64_t>();
    e.seed = it.value().at("seed").get<std::uint64_t>();
    out[it.key()] = e;
  }
  return out;
}

void save_truth(const std::string& path, const std::map<std::string, TruthEntry>& entries) {
  json j;
  for (const auto& [k, e] : entries)
    j[k] = {{"value", e.value}, {"mc_se", e.mc_se}, {"reps", e.reps}, {"seed", e.seed}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << j.dump(2) << "\n";
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

int cmd_simulate(const std::string& sim, int n, std::uint64_t seed, const std::string& out_path, bool intervene,
                 int oracle_k, const std::string& preset) {
  sdr::LongitudinalDataset ds;
  if (sim == "oracle") {
    auto dgp = sdr::discrete_oracle(oracle_k, sdr::study_detail::parse_preset(preset), sdr::mix_seed(seed, 0xD6bULL));
    ds = sdr::sample_oracle(dgp, n, seed).ds;
  } else {
    auto spec = (sim == "sim1") ? sdr::sim1_spec() : sdr::sim2_spec();
    ds = sdr::sample(spec, n, seed, intervene);
  }
  if (out_path == "-")
    sdr::write_dataset_csv(ds, std::cout);
  else
    sdr::write_dataset_csv(ds, out_path);
  return 0;
}

int cmd_estimate(const std::string& data_path, const std::string& estimators, std::uint64_t seed, double delta,
                 int folds, const std::string& out_path) {
  auto ds = sdr::read_dataset_csv(data_path);
  auto scen = sdr::ScenarioSpec::all_correct(ds.K);
  scen.label = "custom";
  std::vector<sdr::LearnerSpec> q_learners(static_cast<std::size_t>(ds.K), sdr::LearnerSpec::logistic());
  std::vector<sdr::LearnerSpec> gamma(static_cast<std::size_t>(ds.K), sdr::LearnerSpec::stumps_medium());
  std::vector<sdr::LearnerSpec> targeting(static_cast<std::size_t>(ds.K), sdr::LearnerSpec::logistic());

  std::ostringstream rows;
  rows << "estimator,scenario,seed,n,Q0_hat,se,ci_lo,ci_hi,score_resid,trunc_count\n";
  auto emit = [&](const sdr::EstimatorReport& er) {
    auto fmt = [](double v) { return std::isfinite(v) ? sdr::format_number(v) : std::string(""); };
    double score = std::numeric_limits<double>::quiet_NaN();
    if (er.diagnostics.count("score_resid")) score = er.diagnostics.at("score_resid");
    if (er.diagnostics.count("max_if_mean")) score = er.diagnostics.at("max_if_mean");
    double trunc = er.diagnostics.count("trunc_count") ? er.diagnostics.at("trunc_count") : 0.0;
    rows << er.estimator << ",custom," << seed << ',' << ds.n << ',' << fmt(er.estimate) << ',' << fmt(er.se)
         << ',' << fmt(er.ci_lo) << ',' << fmt(er.ci_hi) << ',' << fmt(score) << ',' << sdr::format_number(trunc)
         << '\n';
  };

  std::optional<sdr::PropensityFit> pf;
  for (const auto& name : split_list(estimators)) {
    if (!pf && name != "plugin") pf = sdr::fit_propensities(ds, scen, sdr::LearnerSpec::logistic(), delta);
    if (name == "plugin")
      emit(sdr::direct_plugin(ds, scen, q_learners));
    else if (name == "ipw")
      emit(sdr::ipw(ds, *pf));
    else if (name == "ltmle")
      emit(sdr::ltmle(ds, *pf, scen, q_learners));
    else if (name == "drtransform")
      emit(sdr::dr_transform(ds, *pf, scen, gamma));
    else if (name == "itmle")
      emit(sdr::itmle(ds, 0, *pf, scen, q_learners, targeting));
    else if (name == "cvitmle") {
      auto part = sdr::CvPartition::make(ds.n, folds, sdr::mix_seed(seed, 0xCFULL));
      std::vector<sdr::PropensityFit> pfs;
      for (int v = 0; v < part.V; ++v) {
        sdr::ArrayXd tw = sdr::ArrayXd::Zero(ds.n);
        for (int i = 0; i < ds.n; ++i)
          if (part.fold[static_cast<std::size_t>(i)] != v) tw[i] = 1.0;
        pfs.push_back(sdr::fit_propensities(ds, scen, sdr::LearnerSpec::logistic(), delta, &tw));
      }
      std::vector<sdr::LearnerSpec> cands = {sdr::LearnerSpec::empty(), sdr::LearnerSpec::intercept_only(),
                                             sdr::LearnerSpec::logistic()};
      emit(sdr::cv_itmle(ds, 0, pfs, scen, q_learners, cands, part).report);
    } else {
      throw std::runtime_error("unknown estimator '" + name + "'");
    }
  }
  if (out_path == "-")
    std::cout << rows.str();
  else {
    std::ofstream out(out_path);
    if (!out) throw std::runtime_error("cannot write '" + out_path + "'");
    out << rows.str();
  }
  return 0;
}

int cmd_truth(const std::string& sim, std::uint64_t reps, std::uint64_t seed, const std::string& path) {
  auto entries = load_truth(path);
  auto run_one = [&](const std::string& id) {
    auto spec = (id == "sim1") ? sdr::sim1_spec() : sdr::sim2_spec();
    auto t = sdr::truth_q0(spec, reps, seed);
    std::cout << id << ": Q0 = " << t.value << " (MC-SE " << t.mc_se << ", reps " << reps << ", seed " << seed
              << ")\n";
    if (entries.count(id)) {
      const auto& prev = entries[id];
      const double joint = std::sqrt(t.mc_se * t.mc_se + prev.mc_se * prev.mc_se);
      const double dev = std::fabs(t.value - prev.value);
      std::cout << "  previous cached value " << prev.value << " (seed " << prev.seed << "); |diff| = " << dev
                << (dev <= 4.0 * joint ? " <= " : " EXCEEDS ") << "4*joint-MC-SE = " << 4.0 * joint << "\n";
      if (dev > 4.0 * joint) throw std::runtime_error("truth constant mismatch for " + id);
    }
    entries[id] = {t.value, t.mc_se, reps, seed};
  };
  if (sim == "both" || sim == "sim1") run_one("sim1");
  if (sim == "both" || sim == "sim2") run_one("sim2");
  save_truth(path, entries);
  std::cout << "wrote " << path << "\n";
  return 0;
}

int cmd_reproduce(sdr::StudyConfig cfg, const std::string& truth_file) {
  if (!cfg.out_dir.empty()) fs::create_directories(cfg.out_dir);
  if (cfg.sim != "oracle") {
    auto entries = load_truth(truth_file);
    if (entries.count(cfg.sim)) {
      cfg.truth_q0_value = entries[cfg.sim].value;
      cfg.truth_q0_mc_se = entries[cfg.sim].mc_se;
    } else {
      std::cerr << "note: no cached truth for " << cfg.sim << " in '" << truth_file
                << "'; recomputing with " << cfg.truth_q0_reps << " draws\n";
    }
  }
  auto res = sdr::run_study(cfg);
  std::cout << "truth Q0 = " << res.truth << " (MC-SE " << res.truth_mc_se << ")\n";
  std::ostringstream tbl;
  sdr::write_summary_csv(res, tbl);
  std::cout << tbl.str();
  const int failures = sdr::total_failures(res);
  if (failures > cfg.failure_budget) {
    std::cerr << "FAIL: " << failures << " replication failures exceed budget " << cfg.failure_budget << "\n";
    return 1;
  }
  return 0;
}

int cmd_diagnose(int max_k, const std::string& preset, int n_seeds, int fit_n, std::uint64_t seed,
                 bool corrupt_rem) {
  bool all_pass = true;
  auto report = [&](const std::string& name, bool pass, double value, double tol) {
    std::cout << (pass ? "PASS " : "FAIL ") << name << " (measured " << value << ", tolerance " << tol << ")\n";
    all_pass = all_pass && pass;
  };

  // Identity suite over seeded oracles with perturbed nuisances.
  double worst_lemma = 0.0, worst_fwd = 0.0, worst_gamma = 0.0;
  std::string worst_stage;
  int idx = 0;
  for (int k = 1; k <= max_k; ++k) {
    for (int s = 0; s < n_seeds; ++s, ++idx) {
      auto dgp = sdr::discrete_oracle(k, sdr::study_detail::parse_preset(preset), sdr::mix_seed(seed, idx));
      worst_fwd = std::max(worst_fwd, std::fabs(sdr::exact_q_all(dgp)[0][0] - sdr::forward_q0_enumeration(dgp)));
      auto nt = sdr::NuisanceTables::exact(dgp);
      // exact nuisances: Γ conditional mean must equal Q_t
      for (int t = 0; t <= k; ++t) {
        auto gm = sdr::gamma_conditional_mean(dgp, nt, t);
        auto qx = sdr::exact_q(dgp, t);
        for (std::size_t c = 0; c < gm.size(); ++c)
          worst_gamma = std::max(worst_gamma, std::fabs(gm[c] - qx[c]));
      }
      // seeded perturbations of every table
      sdr::RngStream rng(sdr::mix_seed(seed, 0xBADULL + static_cast<std::uint64_t>(idx)));
      for (auto& tab : nt.q)
        for (auto& v : tab) v = std::clamp(v + 0.3 * (rng.uniform() - 0.5), 0.02, 0.98);
      nt.q0 = std::clamp(nt.q0 + 0.3 * (rng.uniform() - 0.5), 0.02, 0.98);
      for (auto& tab : nt.pihat)
        for (auto& v : tab) v = std::clamp(v + 0.3 * (rng.uniform() - 0.5), 0.05, 0.95);
      for (int t = 0; t <= k; ++t) {
        double resid = sdr::verify_lemma1(dgp, nt, t);
        if (corrupt_rem && t == 0) {
          // fault-injection hook: perturb one remainder term and re-evaluate
          auto et = sdr::expansion_terms(dgp, nt, t);
          if (!et.Rem.empty()) {
            auto qx = sdr::exact_q_all(dgp);
            const double qhat = nt.q0;
            double rhs = et.D_total[0] + 1e-3;  // corrupted Rem contribution
            for (const auto& rem : et.Rem) rhs += rem[0];
            resid = std::max(resid, std::fabs(qhat - qx[0][0] - rhs));
            worst_stage = "(s,t)=(1," + std::to_string(t) + ")";
          }
        }
        worst_lemma = std::max(worst_lemma, resid);
      }
    }
  }
  report("lemma1_identity_residual" + (worst_stage.empty() ? "" : " " + worst_stage), worst_lemma <= 1e-10,
         worst_lemma, 1e-10);
  report("backward_vs_forward_Q0", worst_fwd <= 1e-13, worst_fwd, 1e-13);
  report("dr_transform_conditional_unbiasedness", worst_gamma <= 1e-12, worst_gamma, 1e-12);

  // Score equations on a fitted run.
  {
    auto dgp = sdr::discrete_oracle(2, sdr::study_detail::parse_preset(preset), sdr::mix_seed(seed, 0x5C0ULL));
    auto ds = sdr::sample_oracle(dgp, fit_n, sdr::mix_seed(seed, 0x5C1ULL)).ds;
    auto scen = sdr::make_oracle_scenario(2, "Qc.gc");
    auto pf = sdr::fit_propensities(ds, scen, sdr::LearnerSpec::logistic(), 0.01);
    std::vector<sdr::LearnerSpec> ls(2, sdr::LearnerSpec::logistic());
    std::vector<sdr::FitSpec> td(2, sdr::FitSpec::saturated());
    auto l = sdr::ltmle(ds, pf, scen, ls);
    report("ltmle_estimating_equation", l.diagnostics.at("score_resid") <= 1e-6 * ds.n,
           l.diagnostics.at("score_resid"), 1e-6 * ds.n);
    auto it = sdr::itmle(ds, 0, pf, scen, ls, ls, true, &td);
    report("itmle_score_equations", it.diagnostics.at("max_if_mean") <= 1e-8, it.diagnostics.at("max_if_mean"),
           1e-8);
  }
  return all_pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sequentially doubly robust estimation of the longitudinal G-formula"};
  app.require_subcommand(1);

  // simulate
  auto* sim_cmd = app.add_subcommand("simulate", "Sample a dataset from a built-in DGP and write CSV");
  std::string sim_id = "sim1", sim_out = "-", sim_preset = "binary";
  int sim_n = 500, sim_k = 2;
  std::uint64_t sim_seed = 1;
  bool sim_intervene = false;
  sim_cmd->add_option("--sim", sim_id, "sim1 | sim2 | oracle");
  sim_cmd->add_option("--n", sim_n, "units");
  sim_cmd->add_option("--seed", sim_seed, "master seed");
  sim_cmd->add_option("--out", sim_out, "output CSV path or - for stdout");
  sim_cmd->add_flag("--intervene", sim_intervene, "set every treatment to 1");
  sim_cmd->add_option("--oracle-k", sim_k, "oracle horizon K (1..4)");
  sim_cmd->add_option("--oracle-preset", sim_preset, "binary | small | rich");

  // estimate
  auto* est_cmd = app.add_subcommand("estimate", "Run estimators on a CSV dataset");
  std::string est_data, est_list = "plugin,ipw,ltmle,drtransform,itmle", est_out = "-";
  std::uint64_t est_seed = 1;
  double est_delta = 0.01;
  int est_folds = 5;
  est_cmd->add_option("--data", est_data, "input CSV")->required();
  est_cmd->add_option("--estimators", est_list, "comma-separated list");
  est_cmd->add_option("--seed", est_seed, "seed");
  est_cmd->add_option("--delta", est_delta, "positivity truncation bound");
  est_cmd->add_option("--folds", est_folds, "fold count for cvitmle");
  est_cmd->add_option("--out", est_out, "output CSV path or -");

  // reproduce
  auto* rep_cmd = app.add_subcommand("reproduce", "Monte Carlo reproduction of the simulation studies");
  sdr::StudyConfig cfg;
  std::string rep_est = "plugin,ipw,ltmle,drtransform,itmle";
  std::string truth_file = "assets/truth_constants.json";
  bool n_given = false, reps_given = false;
  rep_cmd->add_option("--sim", cfg.sim, "sim1 | sim2 | oracle");
  rep_cmd->add_option("--scenario", cfg.scenario, "Qc.gc | Qi.gc | Qc.gi | Qi.gi | QSDR.gSDR");
  rep_cmd->add_option("--estimators", rep_est, "comma-separated list");
  rep_cmd->add_option("--n", cfg.n, "units per replication")->each([&](const std::string&) { n_given = true; });
  rep_cmd->add_option("--reps", cfg.reps, "replications")->each([&](const std::string&) { reps_given = true; });
  rep_cmd->add_option("--seed", cfg.seed, "master seed");
  rep_cmd->add_option("--delta", cfg.delta, "positivity truncation bound");
  rep_cmd->add_option("--folds", cfg.folds, "cvitmle folds");
  rep_cmd->add_option("--out", cfg.out_dir, "output directory");
  rep_cmd->add_option("--workers", cfg.workers, "worker threads (default: SDR_WORKERS or hardware)");
  rep_cmd->add_option("--failure-budget", cfg.failure_budget, "allowed replication failures");
  rep_cmd->add_option("--oracle-k", cfg.oracle_K, "oracle horizon K");
  rep_cmd->add_option("--oracle-preset", cfg.oracle_preset, "binary | small | rich");
  rep_cmd->add_option("--eval-points", cfg.eval_points, "evaluation points for MSE(Q1)");
  rep_cmd->add_option("--truth-file", truth_file, "cached truth constants JSON");
  rep_cmd->add_flag("--paper-scale", cfg.paper_scale, "full-scale run (sim2: n=5000, reps=1000)");
  rep_cmd->add_flag("--plots", cfg.plots, "also write summary.svg");

  // truth
  auto* truth_cmd = app.add_subcommand("truth", "Regenerate cached truth constants");
  std::string truth_sim = "both", truth_path = "assets/truth_constants.json";
  std::uint64_t truth_reps = 10000000, truth_seed = 20240501;
  truth_cmd->add_option("--sim", truth_sim, "sim1 | sim2 | both");
  truth_cmd->add_option("--reps", truth_reps, "Monte Carlo draws");
  truth_cmd->add_option("--seed", truth_seed, "seed");
  truth_cmd->add_option("--out", truth_path, "JSON path");

  // diagnose
  auto* diag_cmd = app.add_subcommand("diagnose", "Identity suite on the discrete oracle");
  int diag_k = 3, diag_seeds = 7, diag_n = 20000;
  std::uint64_t diag_seed = 99;
  std::string diag_preset = "binary";
  bool corrupt_rem = false;
  diag_cmd->add_option("--max-k", diag_k, "check K = 1..max-k");
  diag_cmd->add_option("--seeds", diag_seeds, "seeded oracles per K");
  diag_cmd->add_option("--n", diag_n, "sample size for fitted score checks");
  diag_cmd->add_option("--seed", diag_seed, "seed");
  diag_cmd->add_option("--oracle-preset", diag_preset, "binary | small | rich");
  diag_cmd->add_flag("--corrupt-rem", corrupt_rem, "fault-injection hook: corrupt one Rem term");

  CLI11_PARSE(app, argc, argv);

  try {
    if (sim_cmd->parsed()) return cmd_simulate(sim_id, sim_n, sim_seed, sim_out, sim_intervene, sim_k, sim_preset);
    if (est_cmd->parsed()) return cmd_estimate(est_data, est_list, est_seed, est_delta, est_folds, est_out);
    if (rep_cmd->parsed()) {
      if (cfg.paper_scale) {
        if (!n_given) cfg.n = (cfg.sim == "sim2") ? 5000 : 500;
        if (!reps_given) cfg.reps = 1000;
      } else {
        if (!n_given) cfg.n = (cfg.sim == "sim2") ? 2000 : 500;
        if (!reps_given) cfg.reps = 200;
      }
      cfg.estimators = split_list(rep_est);
      return cmd_reproduce(cfg, truth_file);
    }
    if (truth_cmd->parsed()) return cmd_truth(truth_sim, truth_reps, truth_seed, truth_path);
    if (diag_cmd->parsed()) return cmd_diagnose(diag_k, diag_preset, diag_seeds, diag_n, diag_seed, corrupt_rem);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
