#pragma once

#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

#include "sdr/dataset.hpp"
#include "sdr/rng.hpp"

namespace sdr {

// ÎF_i = Σ_{t=0}^K (∏_{s=1}^t A_s/π̂_s)(Q̂_{t+1,i} − Q̂_{t,i}) with the t = 0
// conventions (empty product = 1, Q̂_0 constant). For score-solving estimators
// every t-term has empirical mean ~0, so |mean| stays at solver precision.
struct InfluenceCurve {
  ArrayXd values;
  double mean = 0.0;
  double sd = 0.0;  // n-1 divisor

  static InfluenceCurve from_values(ArrayXd v) {
    InfluenceCurve ic;
    ic.mean = v.mean();
    const auto n = static_cast<double>(v.size());
    ic.sd = (v.size() < 2) ? 0.0 : std::sqrt((v - ic.mean).square().sum() / (n - 1.0));
    ic.values = std::move(v);
    return ic;
  }
};

// cum_weight[t] must hold ∏_{s=1}^t A_s/π̂_s per unit (index 0 = all ones).
// q_values[t] holds Q̂_t(H̄_{t,i}) for t = 1..K; q0 is the scalar estimate.
inline InfluenceCurve influence_curve(const LongitudinalDataset& ds, double q0,
                                      const std::vector<ArrayXd>& q_values,
                                      const std::vector<ArrayXd>& cum_weight) {
  if (static_cast<int>(q_values.size()) != ds.K) throw std::invalid_argument("influence_curve: q_values size");
  if (static_cast<int>(cum_weight.size()) != ds.K + 1) throw std::invalid_argument("influence_curve: cum_weight size");
  ArrayXd inf = ArrayXd::Zero(ds.n);
  for (int t = 0; t <= ds.K; ++t) {
    const ArrayXd& next = (t == ds.K) ? ds.outcome : q_values[static_cast<std::size_t>(t)];
    if (t == 0)
      inf += next - q0;
    else
      inf += cum_weight[static_cast<std::size_t>(t)] * (next - q_values[static_cast<std::size_t>(t) - 1]);
  }
  return InfluenceCurve::from_values(std::move(inf));
}

inline std::pair<double, double> wald_ci(double estimate, const InfluenceCurve& ic, double level = 0.95) {
  if (!(level > 0.0 && level < 1.0)) throw std::invalid_argument("wald_ci: level outside (0,1)");
  if (ic.values.size() < 2) throw std::invalid_argument("wald_ci: need n >= 2");
  const double z = normal_quantile(0.5 * (1.0 + level));
  const double se = ic.sd / std::sqrt(static_cast<double>(ic.values.size()));
  return {estimate - z * se, estimate + z * se};
}

}  // namespace sdr
