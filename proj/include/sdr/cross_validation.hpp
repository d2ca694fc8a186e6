#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdr/learners.hpp"
#include "sdr/math.hpp"
#include "sdr/rng.hpp"

namespace sdr {

// V-fold partition drawn independently of the data values. Folds are mutually
// exclusive, exhaustive, and their sizes differ by at most one.
struct CvPartition {
  int V = 5;
  std::vector<int> fold;  // per-unit fold index in 0..V-1

  static CvPartition make(int n, int V, std::uint64_t seed) {
    if (V < 2) throw std::invalid_argument("fold count >= 2 required");
    if (n < V) throw std::invalid_argument("fewer units than folds");
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    RngStream rng(mix_seed(seed, 0x5d0fULL));
    deterministic_shuffle(order, rng);
    CvPartition p;
    p.V = V;
    p.fold.assign(static_cast<std::size_t>(n), 0);
    for (int k = 0; k < n; ++k) p.fold[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] = k % V;
    return p;
  }
};

struct CvFitData {
  MatrixXd X;
  ArrayXd y;
  ArrayXd w;
  const ArrayXd* offset = nullptr;  // logit offset for cross-entropy fits
  LossKind loss = LossKind::CrossEntropy;
};

inline double pointwise_loss(LossKind kind, double y, double pred, double w) {
  if (w <= 0.0) return 0.0;
  if (kind == LossKind::SquaredError) return w * (y - pred) * (y - pred);
  const double p = clip_prob(pred);
  return -w * (y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
}

struct CvSelection {
  int selected = 0;
  std::vector<double> risks;                          // per candidate, summed validation loss
  std::vector<std::vector<FittedLearner>> fold_fits;  // [candidate][fold]
  std::vector<std::string> failures;
};

namespace detail {

inline ArrayXd mask_to(const ArrayXd& w, const std::vector<int>& fold, int v, bool training) {
  ArrayXd out = w;
  for (Eigen::Index i = 0; i < w.size(); ++i)
    if ((fold[static_cast<std::size_t>(i)] == v) == training) out[i] = 0.0;
  return out;
}

}  // namespace detail

// Cross-validation selector: argmin_m Σ_i loss(Z_i; θ̂^{v_i,m}) with fits
// trained excluding fold v_i. Ties break to the lowest candidate index; a
// candidate failing to fit on some fold is assigned +inf risk.
inline CvSelection cv_select(const std::vector<LearnerSpec>& candidates, const CvFitData& data,
                             const CvPartition& part) {
  if (candidates.empty()) throw std::invalid_argument("cv_select: no candidates");
  const int n = static_cast<int>(data.y.size());
  if (static_cast<int>(part.fold.size()) != n) throw std::invalid_argument("cv_select: partition size mismatch");

  CvSelection sel;
  sel.risks.assign(candidates.size(), 0.0);
  sel.fold_fits.assign(candidates.size(), {});
  for (std::size_t m = 0; m < candidates.size(); ++m) {
    bool failed = false;
    std::vector<FittedLearner> fits;
    std::vector<ArrayXd> val_pred(static_cast<std::size_t>(part.V));
    for (int v = 0; v < part.V && !failed; ++v) {
      ArrayXd wtrain = detail::mask_to(data.w, part.fold, v, true);
      try {
        FittedLearner fl = fit_learner(candidates[m], data.X, data.y, wtrain, data.offset, data.loss);
        val_pred[static_cast<std::size_t>(v)] = fl.predict(data.X, data.offset);
        fits.push_back(std::move(fl));
      } catch (const std::exception& e) {
        sel.failures.push_back("candidate " + std::to_string(m) + " fold " + std::to_string(v) + ": " + e.what());
        failed = true;
      }
    }
    if (failed) {
      sel.risks[m] = std::numeric_limits<double>::infinity();
      continue;
    }
    double risk = 0.0;
    for (int i = 0; i < n; ++i) {
      const int v = part.fold[static_cast<std::size_t>(i)];
      risk += pointwise_loss(data.loss, data.y[i], val_pred[static_cast<std::size_t>(v)][i], data.w[i]);
    }
    sel.risks[m] = risk;
    sel.fold_fits[m] = std::move(fits);
  }
  sel.selected = 0;
  for (std::size_t m = 1; m < candidates.size(); ++m)
    if (sel.risks[m] < sel.risks[static_cast<std::size_t>(sel.selected)]) sel.selected = static_cast<int>(m);
  return sel;
}

struct ConvexEnsemble {
  VectorXd weights;  // on the simplex over candidates
  double risk = 0.0;
  CvSelection selection;  // underlying per-candidate fold fits and risks
};

namespace detail {

// Compositions of `resolution` into M nonnegative parts, leading part largest
// first so that vertex m appears before vertex m+1 (tie-break matches cv_select).
inline void enumerate_simplex(int M, int resolution, std::vector<std::vector<int>>& out) {
  std::vector<int> cur(static_cast<std::size_t>(M), 0);
  std::function<void(int, int)> rec = [&](int pos, int left) {
    if (pos == M - 1) {
      cur[static_cast<std::size_t>(pos)] = left;
      out.push_back(cur);
      return;
    }
    for (int k = left; k >= 0; --k) {
      cur[static_cast<std::size_t>(pos)] = k;
      rec(pos + 1, left - k);
    }
  };
  rec(0, resolution);
}

}  // namespace detail

// Super-learner step of Appendix C approximated on an eps-net of the simplex.
// The net contains all vertices, so the ensemble is never worse than the
// discrete selector in CV risk.
inline ConvexEnsemble fit_convex_ensemble(const std::vector<LearnerSpec>& candidates, const CvFitData& data,
                                          const CvPartition& part, int grid_resolution) {
  if (candidates.size() < 2) throw std::invalid_argument("convex ensemble needs M >= 2 candidates");
  if (grid_resolution < 1) throw std::invalid_argument("grid resolution must be >= 1");
  const int n = static_cast<int>(data.y.size());
  const int M = static_cast<int>(candidates.size());

  ConvexEnsemble ens;
  ens.selection = cv_select(candidates, data, part);
  // Per-unit validation prediction of each candidate (fold-assigned fit).
  MatrixXd P(n, M);
  for (int m = 0; m < M; ++m) {
    if (std::isinf(ens.selection.risks[static_cast<std::size_t>(m)]))
      throw std::runtime_error("convex ensemble: candidate " + std::to_string(m) + " failed to fit");
    for (int v = 0; v < part.V; ++v) {
      const auto& fl = ens.selection.fold_fits[static_cast<std::size_t>(m)][static_cast<std::size_t>(v)];
      ArrayXd pred = fl.predict(data.X, data.offset);
      for (int i = 0; i < n; ++i)
        if (part.fold[static_cast<std::size_t>(i)] == v) P(i, m) = pred[i];
    }
  }

  std::vector<std::vector<int>> grid;
  detail::enumerate_simplex(M, grid_resolution, grid);
  double best = std::numeric_limits<double>::infinity();
  std::vector<int> best_comp;
  for (const auto& comp : grid) {
    VectorXd alpha(M);
    for (int m = 0; m < M; ++m) alpha[m] = static_cast<double>(comp[static_cast<std::size_t>(m)]) / grid_resolution;
    double risk = 0.0;
    for (int i = 0; i < n; ++i) {
      const double pred = P.row(i) * alpha;
      risk += pointwise_loss(data.loss, data.y[i], pred, data.w[i]);
    }
    if (risk < best) {
      best = risk;
      best_comp = comp;
    }
  }
  ens.risk = best;
  ens.weights.resize(M);
  for (int m = 0; m < M; ++m)
    ens.weights[m] = static_cast<double>(best_comp[static_cast<std::size_t>(m)]) / grid_resolution;
  return ens;
}

}  // namespace sdr
