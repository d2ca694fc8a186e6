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

#include "sdr/dataset.hpp"
#include "sdr/math.hpp"
#include "sdr/rng.hpp"

namespace sdr {

// Expression vocabulary: +, -, *, expit, |.|, 1{. > c}, node references and
// constants. Deliberately no general expression language.
struct Expr {
  enum class Op { Constant, Node, Add, Sub, Mul, Expit, Abs, IndicatorGt };
  Op op = Op::Constant;
  double value = 0.0;     // constant, or threshold for IndicatorGt
  std::string node_name;  // Op::Node before resolution
  int node_index = -1;
  std::vector<Expr> args;

  static Expr constant(double v) {
    Expr e;
    e.op = Op::Constant;
    e.value = v;
    return e;
  }
  static Expr node(std::string name) {
    Expr e;
    e.op = Op::Node;
    e.node_name = std::move(name);
    return e;
  }

  double eval(const std::vector<double>& values) const {
    switch (op) {
      case Op::Constant: return value;
      case Op::Node: return values[static_cast<std::size_t>(node_index)];
      case Op::Add: return args[0].eval(values) + args[1].eval(values);
      case Op::Sub: return args[0].eval(values) - args[1].eval(values);
      case Op::Mul: return args[0].eval(values) * args[1].eval(values);
      case Op::Expit: return expit(args[0].eval(values));
      case Op::Abs: return std::fabs(args[0].eval(values));
      case Op::IndicatorGt: return args[0].eval(values) > value ? 1.0 : 0.0;
    }
    return 0.0;
  }

  void resolve(const std::map<std::string, int>& index, int max_exclusive) {
    if (op == Op::Node) {
      auto it = index.find(node_name);
      if (it == index.end()) throw std::invalid_argument("formula references undefined node '" + node_name + "'");
      if (it->second >= max_exclusive)
        throw std::invalid_argument("formula references later node '" + node_name + "'");
      node_index = it->second;
    }
    for (auto& a : args) a.resolve(index, max_exclusive);
  }

  void collect_nodes(std::vector<int>& out) const {
    if (op == Op::Node) out.push_back(node_index);
    for (const auto& a : args) a.collect_nodes(out);
  }
};

inline Expr operator+(Expr a, Expr b) {
  Expr e;
  e.op = Expr::Op::Add;
  e.args = {std::move(a), std::move(b)};
  return e;
}
inline Expr operator-(Expr a, Expr b) {
  Expr e;
  e.op = Expr::Op::Sub;
  e.args = {std::move(a), std::move(b)};
  return e;
}
inline Expr operator*(Expr a, Expr b) {
  Expr e;
  e.op = Expr::Op::Mul;
  e.args = {std::move(a), std::move(b)};
  return e;
}
inline Expr expit_of(Expr a) {
  Expr e;
  e.op = Expr::Op::Expit;
  e.args = {std::move(a)};
  return e;
}
inline Expr abs_of(Expr a) {
  Expr e;
  e.op = Expr::Op::Abs;
  e.args = {std::move(a)};
  return e;
}
inline Expr indicator_gt(Expr a, double threshold) {
  Expr e;
  e.op = Expr::Op::IndicatorGt;
  e.value = threshold;
  e.args = {std::move(a)};
  return e;
}

struct SemNode {
  std::string name;
  enum class Kind { Normal, Bernoulli, Deterministic } kind = Kind::Deterministic;
  Expr formula;  // mean (Normal), probability (Bernoulli) or value (Deterministic)
  double sd = 1.0;
  enum class Role { Latent, Covariate, Treatment, Outcome } role = Role::Latent;
  int time = 0;           // SEM time point the node belongs to
  int record_block = -1;  // covariates: history block (0 = baseline); -1 = not exported
  std::string short_name;
  // filled by validate()
  int record_offset = -1;
};

// Declarative structural equation model. Node order is sampling order;
// formulas may only reference earlier nodes.
struct SemSpec {
  int K = 0;
  std::vector<SemNode> nodes;
  std::string name = "custom";
  // derived by validate()
  std::vector<int> treatment_node;  // [t-1] node index of A_t
  int outcome_node = -1;
  std::vector<int> block_width;  // [0..K] exported column count per block

  int node_index(const std::string& nm) const {
    for (std::size_t k = 0; k < nodes.size(); ++k)
      if (nodes[k].name == nm) return static_cast<int>(k);
    throw std::invalid_argument("unknown node '" + nm + "'");
  }

  void validate() {
    std::map<std::string, int> index;
    treatment_node.assign(static_cast<std::size_t>(K), -1);
    outcome_node = -1;
    block_width.assign(static_cast<std::size_t>(K) + 1, 0);
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      auto& nd = nodes[k];
      if (index.count(nd.name)) throw std::invalid_argument("duplicate node '" + nd.name + "'");
      nd.formula.resolve(index, static_cast<int>(k));
      index[nd.name] = static_cast<int>(k);
      if (nd.role == SemNode::Role::Treatment) {
        if (nd.kind != SemNode::Kind::Bernoulli) throw std::invalid_argument("treatment nodes must be Bernoulli");
        if (nd.time < 1 || nd.time > K) throw std::invalid_argument("treatment time out of range");
        if (treatment_node[static_cast<std::size_t>(nd.time) - 1] >= 0)
          throw std::invalid_argument("duplicate treatment node at t=" + std::to_string(nd.time));
        treatment_node[static_cast<std::size_t>(nd.time) - 1] = static_cast<int>(k);
      } else if (nd.role == SemNode::Role::Outcome) {
        if (outcome_node >= 0) throw std::invalid_argument("more than one outcome node");
        outcome_node = static_cast<int>(k);
      } else if (nd.role == SemNode::Role::Covariate && nd.record_block >= 0) {
        if (nd.record_block > K) throw std::invalid_argument("record block out of range");
        nd.record_offset = block_width[static_cast<std::size_t>(nd.record_block)]++;
      }
    }
    if (outcome_node < 0) throw std::invalid_argument("no outcome node");
    for (int t = 1; t <= K; ++t)
      if (treatment_node[static_cast<std::size_t>(t) - 1] < 0)
        throw std::invalid_argument("missing treatment node at t=" + std::to_string(t));
  }
};

namespace detail {

// One draw per (seed, unit, node); interventions never shift other nodes' draws.
inline double node_uniform(std::uint64_t seed, std::uint64_t unit, std::size_t node) {
  return u01_from_bits(splitmix64(mix_seed(mix_seed(seed, unit), static_cast<std::uint64_t>(node) + 1)));
}

inline void simulate_unit(const SemSpec& spec, std::uint64_t seed, std::uint64_t unit, bool intervene,
                          const std::function<bool(int, double&)>* clamp, std::vector<double>& values) {
  values.resize(spec.nodes.size());
  for (std::size_t k = 0; k < spec.nodes.size(); ++k) {
    const auto& nd = spec.nodes[k];
    if (intervene && nd.role == SemNode::Role::Treatment) {
      values[k] = 1.0;
      continue;
    }
    if (clamp) {
      double v = 0.0;
      if ((*clamp)(static_cast<int>(k), v)) {
        values[k] = v;
        continue;
      }
    }
    switch (nd.kind) {
      case SemNode::Kind::Deterministic:
        values[k] = nd.formula.eval(values);
        break;
      case SemNode::Kind::Normal:
        values[k] = nd.formula.eval(values) + nd.sd * normal_quantile(node_uniform(seed, unit, k));
        break;
      case SemNode::Kind::Bernoulli: {
        const double p = nd.formula.eval(values);
        if (p < 0.0 || p > 1.0) throw std::runtime_error("node '" + nd.name + "' probability outside [0,1]");
        values[k] = node_uniform(seed, unit, k) < p ? 1.0 : 0.0;
        break;
      }
    }
  }
}

}  // namespace detail

// Draw n i.i.d. units; bit-reproducible for a fixed (spec, n, seed) and
// unchanged under any parallel partition of units.
inline LongitudinalDataset sample(const SemSpec& spec, int n, std::uint64_t seed, bool intervene_all_treat = false) {
  LongitudinalDataset ds;
  ds.n = n;
  ds.K = spec.K;
  ds.baseline.resize(n, spec.block_width[0]);
  for (int t = 1; t <= spec.K; ++t) {
    ds.covariates.emplace_back(n, spec.block_width[static_cast<std::size_t>(t)]);
    ds.treatment.emplace_back(n);
  }
  ds.outcome.resize(n);

  std::vector<double> values;
  for (int i = 0; i < n; ++i) {
    detail::simulate_unit(spec, seed, static_cast<std::uint64_t>(i), intervene_all_treat, nullptr, values);
    for (std::size_t k = 0; k < spec.nodes.size(); ++k) {
      const auto& nd = spec.nodes[k];
      if (nd.role == SemNode::Role::Covariate && nd.record_block == 0)
        ds.baseline(i, nd.record_offset) = values[k];
      else if (nd.role == SemNode::Role::Covariate && nd.record_block > 0)
        ds.covariates[static_cast<std::size_t>(nd.record_block) - 1](i, nd.record_offset) = values[k];
    }
    for (int t = 1; t <= spec.K; ++t)
      ds.treatment[static_cast<std::size_t>(t) - 1][i] =
          static_cast<int>(values[static_cast<std::size_t>(spec.treatment_node[static_cast<std::size_t>(t) - 1])]);
    const double y = values[static_cast<std::size_t>(spec.outcome_node)];
    if (y < 0.0 || y > 1.0) throw std::runtime_error("sampled outcome outside [0,1]");
    ds.outcome[i] = y;
  }
  // column names
  ds.baseline_names.assign(static_cast<std::size_t>(spec.block_width[0]), "");
  ds.covariate_names.resize(static_cast<std::size_t>(spec.K));
  for (int t = 1; t <= spec.K; ++t)
    ds.covariate_names[static_cast<std::size_t>(t) - 1].assign(
        static_cast<std::size_t>(spec.block_width[static_cast<std::size_t>(t)]), "");
  for (const auto& nd : spec.nodes) {
    if (nd.role != SemNode::Role::Covariate || nd.record_block < 0) continue;
    const std::string label = "L" + std::to_string(nd.record_block) + "_" + nd.short_name;
    if (nd.record_block == 0)
      ds.baseline_names[static_cast<std::size_t>(nd.record_offset)] = label;
    else
      ds.covariate_names[static_cast<std::size_t>(nd.record_block) - 1][static_cast<std::size_t>(nd.record_offset)] = label;
  }
  validate_dataset(ds);
  return ds;
}

// Raw node values, for transcription checks.
inline MatrixXd sample_node_values(const SemSpec& spec, int n, std::uint64_t seed, bool intervene = false) {
  MatrixXd out(n, static_cast<Eigen::Index>(spec.nodes.size()));
  std::vector<double> values;
  for (int i = 0; i < n; ++i) {
    detail::simulate_unit(spec, seed, static_cast<std::uint64_t>(i), intervene, nullptr, values);
    for (std::size_t k = 0; k < spec.nodes.size(); ++k) out(i, static_cast<Eigen::Index>(k)) = values[k];
  }
  return out;
}

struct MonteCarloValue {
  double value = 0.0;
  double mc_se = 0.0;
  std::uint64_t reps = 0;
  std::uint64_t seed = 0;
};

// Q_0 = E[Y] under setting every treatment node to 1.
inline MonteCarloValue truth_q0(const SemSpec& spec, std::uint64_t reps, std::uint64_t seed) {
  if (reps < 2) throw std::invalid_argument("truth_q0: reps must be >= 2");
  double sum = 0.0, sumsq = 0.0;
  std::vector<double> values;
  for (std::uint64_t r = 0; r < reps; ++r) {
    detail::simulate_unit(spec, seed, r, /*intervene=*/true, nullptr, values);
    const double y = values[static_cast<std::size_t>(spec.outcome_node)];
    sum += y;
    sumsq += y * y;
  }
  const double mean = sum / static_cast<double>(reps);
  const double var = std::max(0.0, (sumsq - sum * mean) / (static_cast<double>(reps) - 1.0));
  return {mean, std::sqrt(var / static_cast<double>(reps)), reps, seed};
}

// Conditional Monte Carlo for Q_1: clamp the recorded baseline/time-1 nodes at
// each evaluation point, intervene on all treatments, and forward-simulate the
// remainder. Latent time-1 nodes must not be referenced after time 1.
inline std::pair<ArrayXd, ArrayXd> truth_q1(const SemSpec& spec, const LongitudinalDataset& eval_points,
                                            int reps_per_point, std::uint64_t seed) {
  if (reps_per_point < 2) throw std::invalid_argument("truth_q1: reps_per_point must be >= 2");
  // A time-<=1 node is usable downstream only if it is clamped, a treatment,
  // or deterministic in usable nodes; unrecorded latent randomness must not
  // feed later structure, because it cannot be conditioned on.
  std::vector<char> usable(spec.nodes.size(), 0);
  for (std::size_t k = 0; k < spec.nodes.size(); ++k) {
    const auto& nd = spec.nodes[k];
    if (nd.role == SemNode::Role::Treatment) {
      usable[k] = 1;
      continue;
    }
    if (nd.role == SemNode::Role::Covariate && nd.record_block >= 0 && nd.record_block <= 1) {
      usable[k] = 1;
      continue;
    }
    if (nd.time > 1 || nd.role == SemNode::Role::Outcome) {
      usable[k] = 1;  // re-simulated
      continue;
    }
    if (nd.kind == SemNode::Kind::Deterministic) {
      std::vector<int> refs;
      nd.formula.collect_nodes(refs);
      usable[k] = 1;
      for (int r : refs)
        if (!usable[static_cast<std::size_t>(r)]) usable[k] = 0;
    }
  }
  for (std::size_t k = 0; k < spec.nodes.size(); ++k) {
    const auto& nd = spec.nodes[k];
    if (nd.time <= 1 && nd.role != SemNode::Role::Outcome) continue;
    std::vector<int> refs;
    nd.formula.collect_nodes(refs);
    for (int r : refs)
      if (spec.nodes[static_cast<std::size_t>(r)].time <= 1 && !usable[static_cast<std::size_t>(r)])
        throw std::invalid_argument("truth_q1: latent node '" + spec.nodes[static_cast<std::size_t>(r)].name +
                                    "' feeds later structure");
  }
  ArrayXd mean(eval_points.n), se(eval_points.n);
  std::vector<double> values;
  for (int j = 0; j < eval_points.n; ++j) {
    std::function<bool(int, double&)> clamp = [&](int k, double& v) {
      const auto& nd = spec.nodes[static_cast<std::size_t>(k)];
      if (nd.role != SemNode::Role::Covariate || nd.record_block < 0 || nd.record_block > 1) return false;
      v = (nd.record_block == 0) ? eval_points.baseline(j, nd.record_offset)
                                 : eval_points.covariates[0](j, nd.record_offset);
      return true;
    };
    double sum = 0.0, sumsq = 0.0;
    for (int r = 0; r < reps_per_point; ++r) {
      detail::simulate_unit(spec, mix_seed(seed, static_cast<std::uint64_t>(j)), static_cast<std::uint64_t>(r),
                            /*intervene=*/true, &clamp, values);
      const double y = values[static_cast<std::size_t>(spec.outcome_node)];
      sum += y;
      sumsq += y * y;
    }
    mean[j] = sum / reps_per_point;
    const double var = std::max(0.0, (sumsq - sum * mean[j]) / (reps_per_point - 1.0));
    se[j] = std::sqrt(var / reps_per_point);
  }
  return {mean, se};
}

// Appendix D.1: 3 time points, binary exposure, terminal binary outcome.
inline SemSpec sim1_spec() {
  using N = SemNode;
  auto node = [](const std::string& nm) { return Expr::node(nm); };
  auto c = [](double v) { return Expr::constant(v); };
  SemSpec s;
  s.K = 3;
  s.name = "sim1";
  auto add = [&](SemNode nd) { s.nodes.push_back(std::move(nd)); };

  add({"L1", N::Kind::Normal, c(0.0), 1.0, N::Role::Covariate, 1, 1, "l"});
  add({"A1", N::Kind::Bernoulli, expit_of(node("L1")), 0.0, N::Role::Treatment, 1, -1, ""});
  add({"Y1", N::Kind::Deterministic, c(0.0), 0.0, N::Role::Covariate, 1, 2, "ylag"});

  add({"L2", N::Kind::Normal, c(0.0), 1.0, N::Role::Covariate, 2, 2, "l"});
  add({"A2", N::Kind::Bernoulli, expit_of(node("L2") + node("A1")), 0.0, N::Role::Treatment, 2, -1, ""});
  add({"Y2", N::Kind::Deterministic, c(0.0), 0.0, N::Role::Covariate, 2, 3, "ylag"});

  add({"L3", N::Kind::Normal, node("L1") * node("A2") + node("A1") * node("L2") + node("L2") * node("A2"), 1.0,
       N::Role::Covariate, 3, 3, "l"});
  add({"A3", N::Kind::Bernoulli, expit_of(node("L3") + node("A2")), 0.0, N::Role::Treatment, 3, -1, ""});
  add({"Y3", N::Kind::Bernoulli,
       expit_of(node("L2") * node("A3") + node("A2") * node("L3") + node("L3") * node("A3")), 0.0,
       N::Role::Outcome, 3, -1, ""});
  s.validate();
  return s;
}

// Appendix D.2: 5 time points; A_t = 1 is standard of care and switching is
// absorbing; Z_t is the running risk score with thresholds .9/.85/.80/.80.
// W is sampled once and treated as a baseline covariate (the t=5 display
// references it as W_0). Z_2..Z_4 are exact linear combinations of an
// intercept, L_{t-1} and L_t, so they are not exported as columns; Z_5 is.
inline SemSpec sim2_spec() {
  using N = SemNode;
  auto node = [](const std::string& nm) { return Expr::node(nm); };
  auto c = [](double v) { return Expr::constant(v); };
  SemSpec s;
  s.K = 5;
  s.name = "sim2";
  auto add = [&](SemNode nd) { s.nodes.push_back(std::move(nd)); };

  add({"UL1", N::Kind::Normal, c(0.0), 1.0, N::Role::Latent, 1, -1, ""});
  add({"W", N::Kind::Normal, c(0.0), 1.0, N::Role::Covariate, 1, 0, "W"});
  add({"L1", N::Kind::Deterministic, abs_of(node("UL1")), 0.0, N::Role::Covariate, 1, 1, "l"});
  add({"Z1", N::Kind::Deterministic, node("L1"), 0.0, N::Role::Covariate, 1, -1, ""});
  add({"A1", N::Kind::Bernoulli, expit_of(node("L1")), 0.0, N::Role::Treatment, 1, -1, ""});
  add({"Y1", N::Kind::Deterministic, c(0.0), 0.0, N::Role::Covariate, 1, 2, "ylag"});

  auto time_block = [&](int t, double intercept, double threshold) {
    const std::string T = std::to_string(t), P = std::to_string(t - 1);
    add({"UL" + T, N::Kind::Normal,
         t == 2 ? c(0.0)
                : (t == 3 ? node("A1") * node("L2") + node("L2") * node("A2")
                          : (t == 4 ? node("L2") * node("A3") + node("A2") * node("L3") + node("L3") * node("A3")
                                    : node("L2") * node("A4") + node("A2") * node("L4") + node("L4") * node("A4"))),
         1.0, N::Role::Latent, t, -1, ""});
    add({"L" + T, N::Kind::Deterministic, abs_of(node("UL" + T)), 0.0, N::Role::Covariate, t, t, "l"});
    if (t <= 4)
      add({"Z" + T, N::Kind::Deterministic, c(-2.0) + c(0.5) * node("L" + P) + node("L" + T), 0.0,
           N::Role::Covariate, t, -1, ""});
    else
      add({"Z" + T, N::Kind::Deterministic,
           c(-1.0) + c(0.25) * node("L4") + c(0.5) * node("L5") - c(0.1) * node("L5") * node("L4") +
               c(1.5) * node("W") * node("L4"),
           0.0, N::Role::Covariate, t, t, "z"});
    add({"I" + T, N::Kind::Deterministic, indicator_gt(expit_of(node("Z" + T)), threshold), 0.0,
         N::Role::Covariate, t, t, "i"});
    add({"A" + T, N::Kind::Bernoulli, node("A" + P) * expit_of(c(intercept) - c(2.0) * node("I" + T)), 0.0,
         N::Role::Treatment, t, -1, ""});
    if (t < 5)
      add({"Y" + T, N::Kind::Bernoulli,
           expit_of((t == 2 ? c(-3.0) : c(-3.0) * node("Y" + P)) +
                    c(0.5) * node("L" + P) * node("A" + T) + c(0.5) * node("A" + P) * node("L" + T) +
                    c(0.5) * node("L" + T) * node("A" + T)),
           0.0, N::Role::Covariate, t, t + 1, "ylag"});
    else
      add({"Y5", N::Kind::Bernoulli,
           expit_of(c(0.0) - node("Y4") + node("A5") + node("Z5") * node("A5") + c(0.2) * node("A4") * node("L5")),
           0.0, N::Role::Outcome, 5, -1, ""});
  };
  time_block(2, 1.7, 0.90);
  time_block(3, 1.7, 0.85);
  time_block(4, 1.7, 0.80);
  time_block(5, 2.0, 0.80);
  s.validate();
  return s;
}

}  // namespace sdr
