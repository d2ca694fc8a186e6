#pragma once

#include <algorithm>
#include <cmath>

namespace sdr {

// expit(x) = 1/(1+exp(-x)), evaluated without overflow on either tail.
inline double expit(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

// softplus(x) = log(1+exp(x)); -softplus(-x) = log expit(x) exactly.
inline double softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

inline double log_expit(double x) { return -softplus(-x); }

constexpr double kProbClip = 1e-6;  // applied before any logit transform

inline double clip_prob(double p) { return std::clamp(p, kProbClip, 1.0 - kProbClip); }

inline double clipped_logit(double p) { return logit(clip_prob(p)); }

// Weighted cross-entropy term; y may be any value in [0,1].
inline double cross_entropy(double y, double eta) {
  return -(y * log_expit(eta) + (1.0 - y) * log_expit(-eta));
}

}  // namespace sdr
