#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdr/math.hpp"

namespace sdr {

using Eigen::ArrayXd;
using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class LearnerFamily { LogisticMainTerms, LogisticInterceptOnly, BoostedStumps, Empty };

// Loss the fit optimizes. CrossEntropy fits live on the logit scale and accept
// an offset; SquaredError fits are raw-scale and may return values outside [0,1].
enum class LossKind { CrossEntropy, SquaredError };

struct LearnerSpec {
  LearnerFamily family = LearnerFamily::LogisticMainTerms;
  // boosted-stump hyperparameters
  int rounds = 100;
  double learning_rate = 0.1;
  int max_depth = 2;
  double min_leaf_weight = 5.0;

  static LearnerSpec logistic() { return {LearnerFamily::LogisticMainTerms}; }
  static LearnerSpec intercept_only() { return {LearnerFamily::LogisticInterceptOnly}; }
  static LearnerSpec empty() { return {LearnerFamily::Empty}; }
  static LearnerSpec stumps(int rounds, double lr, int depth, double min_leaf) {
    return {LearnerFamily::BoostedStumps, rounds, lr, depth, min_leaf};
  }
  // The three boosting presets used for targeting ensembles.
  static LearnerSpec stumps_shallow() { return stumps(150, 0.1, 1, 5.0); }
  static LearnerSpec stumps_medium() { return stumps(100, 0.1, 2, 5.0); }
  static LearnerSpec stumps_deep() { return stumps(300, 0.1, 3, 5.0); }

  void validate() const {
    if (family == LearnerFamily::BoostedStumps) {
      if (rounds < 0) throw std::invalid_argument("boosting rounds must be >= 0");
      if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
      if (max_depth < 1 || max_depth > 3) throw std::invalid_argument("max depth must lie in {1,2,3}");
      if (!(min_leaf_weight > 0.0)) throw std::invalid_argument("min leaf weight must be positive");
    }
  }
  std::string name() const {
    switch (family) {
      case LearnerFamily::LogisticMainTerms: return "logistic";
      case LearnerFamily::LogisticInterceptOnly: return "intercept_only";
      case LearnerFamily::Empty: return "empty";
      case LearnerFamily::BoostedStumps:
        return "stumps_r" + std::to_string(rounds) + "_d" + std::to_string(max_depth);
    }
    return "?";
  }
};

namespace detail {

struct TreeNode {
  int feature = -1;      // -1 => leaf
  double threshold = 0.0;
  int left = -1, right = -1;
  double value = 0.0;
};

struct Tree {
  std::vector<TreeNode> nodes;
  double eval(const Eigen::Ref<const Eigen::RowVectorXd>& row) const {
    int k = 0;
    while (nodes[static_cast<std::size_t>(k)].feature >= 0) {
      const auto& nd = nodes[static_cast<std::size_t>(k)];
      k = (row[nd.feature] <= nd.threshold) ? nd.left : nd.right;
    }
    return nodes[static_cast<std::size_t>(k)].value;
  }
};

}  // namespace detail

// A fitted regression. Predictions decompose as response(offset + link(x))
// for cross-entropy fits and base + link(x) for squared-error fits, which is
// what the targeting updates need: link() is the additive logit-scale term.
class FittedLearner {
 public:
  LearnerSpec spec;
  LossKind loss = LossKind::CrossEntropy;
  // logistic payload: beta_[0] is the intercept, beta_[j+1] pairs with kept_cols_[j]
  VectorXd beta;
  std::vector<int> kept_cols;
  bool stabilized = false;
  int iterations = 0;
  double score_sup_norm = 0.0;
  // boosting payload
  double base_score = 0.0;  // squared-error base; 0 for logit boosting (offset carries the start)
  std::vector<detail::Tree> trees;

  bool is_empty() const { return spec.family == LearnerFamily::Empty; }

  // Additive contribution on the fit's natural scale (logit or raw).
  double link_row(const Eigen::Ref<const Eigen::RowVectorXd>& row) const {
    switch (spec.family) {
      case LearnerFamily::Empty:
        return 0.0;
      case LearnerFamily::LogisticInterceptOnly:
        return beta[0];
      case LearnerFamily::LogisticMainTerms: {
        double eta = beta[0];
        for (std::size_t j = 0; j < kept_cols.size(); ++j) eta += beta[static_cast<int>(j) + 1] * row[kept_cols[j]];
        return eta;
      }
      case LearnerFamily::BoostedStumps: {
        double f = base_score;
        for (const auto& tr : trees) f += spec.learning_rate * tr.eval(row);
        return f;
      }
    }
    return 0.0;
  }

  ArrayXd link(const MatrixXd& X) const {
    ArrayXd out(X.rows());
    for (Eigen::Index i = 0; i < X.rows(); ++i) out[i] = link_row(X.row(i));
    return out;
  }

  // Response-scale prediction. Cross-entropy fits return probabilities in (0,1);
  // squared-error fits return raw reals.
  ArrayXd predict(const MatrixXd& X, const ArrayXd* offset = nullptr) const {
    ArrayXd eta = link(X);
    if (offset) {
      if (offset->size() != eta.size()) throw std::invalid_argument("offset length mismatch");
      eta += *offset;
    }
    if (loss == LossKind::SquaredError) return eta;
    return eta.unaryExpr([](double e) { return expit(e); });
  }
};

namespace detail {

inline std::vector<int> nonconstant_columns(const MatrixXd& X, const ArrayXd& w) {
  std::vector<int> keep;
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    bool seen = false, varies = false;
    double first = 0.0;
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      if (w[i] <= 0.0) continue;
      if (!seen) {
        first = X(i, j);
        seen = true;
      } else if (X(i, j) != first) {
        varies = true;
        break;
      }
    }
    if (varies) keep.push_back(static_cast<int>(j));
  }
  return keep;
}

}  // namespace detail

// Weighted logistic regression with fixed offset via IRLS (Newton). Responses
// may be fractional in [0,1] (quasi-binomial). Constant columns among the
// weighted rows are dropped; near-singular information matrices get a 1e-8
// ridge and the fit is flagged `stabilized`.
inline FittedLearner fit_logistic(const MatrixXd& X, const ArrayXd& y, const ArrayXd& w,
                                  const ArrayXd* offset = nullptr, bool intercept_only = false,
                                  int max_iter = 100) {
  const Eigen::Index n = y.size();
  if (X.rows() != n || w.size() != n) throw std::invalid_argument("fit_logistic: shape mismatch");
  if ((w <= 0.0).all()) throw std::invalid_argument("fit_logistic: all weights zero");
  for (Eigen::Index i = 0; i < n; ++i) {
    if (w[i] < 0.0) throw std::invalid_argument("fit_logistic: negative weight");
    if (w[i] > 0.0 && !(y[i] >= 0.0 && y[i] <= 1.0))
      throw std::invalid_argument("fit_logistic: response outside [0,1]");
  }

  FittedLearner fl;
  fl.spec = intercept_only ? LearnerSpec::intercept_only() : LearnerSpec::logistic();
  fl.loss = LossKind::CrossEntropy;
  fl.kept_cols = intercept_only ? std::vector<int>{} : detail::nonconstant_columns(X, w);
  const int p = 1 + static_cast<int>(fl.kept_cols.size());

  MatrixXd Xk(n, p);
  Xk.col(0).setOnes();
  for (int j = 0; j < p - 1; ++j) Xk.col(j + 1) = X.col(fl.kept_cols[static_cast<std::size_t>(j)]);

  VectorXd beta = VectorXd::Zero(p);
  auto eta_of = [&](const VectorXd& b) -> ArrayXd {
    ArrayXd eta = (Xk * b).array();
    if (offset) eta += *offset;
    return eta;
  };
  auto deviance_of = [&](const ArrayXd& eta) {
    double dev = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
      if (w[i] > 0.0) dev += 2.0 * w[i] * cross_entropy(y[i], eta[i]);
    return dev;
  };

  ArrayXd eta = eta_of(beta);
  double dev = deviance_of(eta);
  int it = 0;
  for (; it < max_iter; ++it) {
    ArrayXd p_hat = eta.unaryExpr([](double e) { return expit(e); });
    ArrayXd resid = w * (y - p_hat);
    VectorXd score = Xk.transpose() * resid.matrix();
    const double sup = score.lpNorm<Eigen::Infinity>();
    fl.score_sup_norm = sup;

    ArrayXd ww = w * p_hat * (1.0 - p_hat);
    MatrixXd info = Xk.transpose() * ww.matrix().asDiagonal() * Xk;

    Eigen::SelfAdjointEigenSolver<MatrixXd> es(info);
    const double emax = es.eigenvalues().maxCoeff();
    const double emin = es.eigenvalues().minCoeff();
    if (!(emax > 0.0) || emin <= 0.0 || emax / std::max(emin, 1e-300) > 1e12) {
      info.diagonal().array() += 1e-8;
      fl.stabilized = true;
    }

    VectorXd step = info.ldlt().solve(score);
    double lambda = 1.0;
    VectorXd beta_new;
    ArrayXd eta_new;
    double dev_new = std::numeric_limits<double>::infinity();
    for (int h = 0; h < 40; ++h) {
      beta_new = beta + lambda * step;
      eta_new = eta_of(beta_new);
      dev_new = deviance_of(eta_new);
      if (dev_new <= dev + 1e-12) break;
      lambda *= 0.5;
    }
    const double change = dev - dev_new;
    beta = beta_new;
    eta = eta_new;
    dev = dev_new;
    if (std::fabs(change) < 1e-10 && sup <= 1e-10) break;
  }
  {
    ArrayXd p_hat = eta.unaryExpr([](double e) { return expit(e); });
    fl.score_sup_norm = (Xk.transpose() * (w * (y - p_hat)).matrix()).lpNorm<Eigen::Infinity>();
  }
  fl.iterations = it;
  fl.beta = beta;
  return fl;
}

namespace detail {

// Exact greedy split search on (gradient, hessian) sums. Rows are presorted
// once per feature for the whole fit; node scans walk the global order and
// filter by membership, so no per-node sorting happens.
struct BoostWork {
  const MatrixXd& X;
  const ArrayXd& grad;  // per-row gradient numerator  (w * residual)
  const ArrayXd& hess;  // per-row hessian             (w, or w*p*(1-p))
  double min_leaf_hess;
  const std::vector<std::vector<int>>& order;  // per feature, rows sorted by value
  std::vector<char>& in_node;                  // scratch membership mask
};

inline void build_tree_node(BoostWork& bw, Tree& tree, int node_id, const std::vector<int>& rows, int depth) {
  double G = 0.0, H = 0.0;
  for (int i : rows) {
    G += bw.grad[i];
    H += bw.hess[i];
  }
  auto make_leaf = [&]() {
    tree.nodes[static_cast<std::size_t>(node_id)].feature = -1;
    tree.nodes[static_cast<std::size_t>(node_id)].value = (H > 1e-12) ? G / H : 0.0;
  };
  if (depth == 0 || H < 2.0 * bw.min_leaf_hess || rows.size() < 2) {
    make_leaf();
    return;
  }
  const double parent_obj = (H > 1e-12) ? G * G / H : 0.0;
  double best_gain = 1e-12;
  int best_feature = -1;
  double best_thresh = 0.0;
  for (int i : rows) bw.in_node[static_cast<std::size_t>(i)] = 1;
  for (std::size_t j = 0; j < bw.order.size(); ++j) {
    double GL = 0.0, HL = 0.0;
    int prev = -1;
    for (int i : bw.order[j]) {
      if (!bw.in_node[static_cast<std::size_t>(i)]) continue;
      if (prev >= 0 && bw.X(prev, static_cast<Eigen::Index>(j)) != bw.X(i, static_cast<Eigen::Index>(j))) {
        const double HR = H - HL, GR = G - GL;
        if (HL >= bw.min_leaf_hess && HR >= bw.min_leaf_hess) {
          const double gain = GL * GL / std::max(HL, 1e-12) + GR * GR / std::max(HR, 1e-12) - parent_obj;
          if (gain > best_gain) {
            best_gain = gain;
            best_feature = static_cast<int>(j);
            best_thresh =
                0.5 * (bw.X(prev, static_cast<Eigen::Index>(j)) + bw.X(i, static_cast<Eigen::Index>(j)));
          }
        }
      }
      GL += bw.grad[i];
      HL += bw.hess[i];
      prev = i;
    }
  }
  for (int i : rows) bw.in_node[static_cast<std::size_t>(i)] = 0;
  if (best_feature < 0) {
    make_leaf();
    return;
  }
  std::vector<int> left, right;
  for (int i : rows)
    (bw.X(i, best_feature) <= best_thresh ? left : right).push_back(i);
  const int l = static_cast<int>(tree.nodes.size());
  const int r = l + 1;
  tree.nodes.emplace_back();
  tree.nodes.emplace_back();
  tree.nodes[static_cast<std::size_t>(node_id)].feature = best_feature;
  tree.nodes[static_cast<std::size_t>(node_id)].threshold = best_thresh;
  tree.nodes[static_cast<std::size_t>(node_id)].left = l;
  tree.nodes[static_cast<std::size_t>(node_id)].right = r;
  build_tree_node(bw, tree, l, left, depth - 1);
  build_tree_node(bw, tree, r, right, depth - 1);
}

inline Tree build_tree(BoostWork& bw, const std::vector<int>& rows, int depth) {
  Tree tree;
  tree.nodes.emplace_back();
  build_tree_node(bw, tree, 0, rows, depth);
  return tree;
}

inline std::vector<std::vector<int>> presort_features(const MatrixXd& X, const std::vector<int>& rows) {
  std::vector<std::vector<int>> order(static_cast<std::size_t>(X.cols()), rows);
  for (Eigen::Index j = 0; j < X.cols(); ++j)
    std::sort(order[static_cast<std::size_t>(j)].begin(), order[static_cast<std::size_t>(j)].end(),
              [&](int a, int b) {
                const double xa = X(a, j), xb = X(b, j);
                return xa < xb || (xa == xb && a < b);
              });
  return order;
}

}  // namespace detail

// Stagewise least-squares tree boosting. Round-0 prediction is the weighted
// mean of y; responses are unbounded by design and predictions may leave [0,1].
inline FittedLearner fit_boosted_stumps(const LearnerSpec& spec, const MatrixXd& X, const ArrayXd& y,
                                        const ArrayXd& w) {
  spec.validate();
  const Eigen::Index n = y.size();
  if (X.rows() != n || w.size() != n) throw std::invalid_argument("fit_boosted_stumps: shape mismatch");
  const double wsum = w.sum();
  if (!(wsum > 0.0)) throw std::invalid_argument("fit_boosted_stumps: all weights zero");

  FittedLearner fl;
  fl.spec = spec;
  fl.loss = LossKind::SquaredError;
  fl.base_score = (w * y).sum() / wsum;

  std::vector<int> rows;
  rows.reserve(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i)
    if (w[i] > 0.0) rows.push_back(static_cast<int>(i));
  const auto order = detail::presort_features(X, rows);
  std::vector<char> in_node(static_cast<std::size_t>(n), 0);

  ArrayXd pred = ArrayXd::Constant(n, fl.base_score);
  for (int r = 0; r < spec.rounds; ++r) {
    ArrayXd grad = w * (y - pred);
    detail::BoostWork bw{X, grad, w, spec.min_leaf_weight, order, in_node};
    detail::Tree tree = detail::build_tree(bw, rows, spec.max_depth);
    bool nonzero = false;
    for (const auto& nd : tree.nodes)
      if (nd.feature < 0 && nd.value != 0.0) nonzero = true;
    if (!nonzero) break;  // residuals exhausted
    for (Eigen::Index i = 0; i < n; ++i) pred[i] += spec.learning_rate * tree.eval(X.row(i));
    fl.trees.push_back(std::move(tree));
  }
  return fl;
}

// Gradient boosting on the logit scale with cross-entropy loss and a fixed
// offset; used for function-valued fluctuations. Each round fits a tree to the
// Newton gradient/hessian pair and adds learning_rate * tree to the logit.
inline FittedLearner fit_boosted_logit(const LearnerSpec& spec, const MatrixXd& X, const ArrayXd& y,
                                       const ArrayXd& w, const ArrayXd* offset = nullptr) {
  spec.validate();
  const Eigen::Index n = y.size();
  if (X.rows() != n || w.size() != n) throw std::invalid_argument("fit_boosted_logit: shape mismatch");
  if (!(w.sum() > 0.0)) throw std::invalid_argument("fit_boosted_logit: all weights zero");

  FittedLearner fl;
  fl.spec = spec;
  fl.loss = LossKind::CrossEntropy;
  fl.base_score = 0.0;

  std::vector<int> rows;
  for (Eigen::Index i = 0; i < n; ++i)
    if (w[i] > 0.0) rows.push_back(static_cast<int>(i));
  const auto order = detail::presort_features(X, rows);
  std::vector<char> in_node(static_cast<std::size_t>(n), 0);

  ArrayXd f = ArrayXd::Zero(n);
  for (int r = 0; r < spec.rounds; ++r) {
    ArrayXd eta = offset ? (f + *offset) : f;
    ArrayXd p = eta.unaryExpr([](double e) { return expit(e); });
    ArrayXd grad = w * (y - p);
    ArrayXd hess = w * p * (1.0 - p);
    detail::BoostWork bw{X, grad, hess, spec.min_leaf_weight, order, in_node};
    detail::Tree tree = detail::build_tree(bw, rows, spec.max_depth);
    bool nonzero = false;
    for (const auto& nd : tree.nodes)
      if (nd.feature < 0 && nd.value != 0.0) nonzero = true;
    if (!nonzero) break;
    for (Eigen::Index i = 0; i < n; ++i) f[i] += spec.learning_rate * tree.eval(X.row(i));
    fl.trees.push_back(std::move(tree));
  }
  return fl;
}

inline FittedLearner fit_empty() {
  FittedLearner fl;
  fl.spec = LearnerSpec::empty();
  fl.loss = LossKind::CrossEntropy;
  return fl;
}

// Dispatch on family; `loss` decides the boosting objective. Logistic families
// only support cross-entropy.
inline FittedLearner fit_learner(const LearnerSpec& spec, const MatrixXd& X, const ArrayXd& y,
                                 const ArrayXd& w, const ArrayXd* offset, LossKind loss) {
  switch (spec.family) {
    case LearnerFamily::Empty:
      return fit_empty();
    case LearnerFamily::LogisticInterceptOnly:
      if (loss != LossKind::CrossEntropy) throw std::invalid_argument("intercept-only learner is cross-entropy only");
      return fit_logistic(X, y, w, offset, /*intercept_only=*/true);
    case LearnerFamily::LogisticMainTerms:
      if (loss != LossKind::CrossEntropy) throw std::invalid_argument("logistic learner is cross-entropy only");
      return fit_logistic(X, y, w, offset, /*intercept_only=*/false);
    case LearnerFamily::BoostedStumps:
      if (loss == LossKind::SquaredError) {
        if (offset) throw std::invalid_argument("squared-error boosting takes no offset");
        return fit_boosted_stumps(spec, X, y, w);
      }
      return fit_boosted_logit(spec, X, y, w, offset);
  }
  throw std::logic_error("unknown learner family");
}

}  // namespace sdr
