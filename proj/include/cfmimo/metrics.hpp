#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "cfmimo/common.hpp"

namespace cfmimo {

struct RateReport {
  RVec per_user_sinr;
  RVec per_user_rate;
  double sum_rate = 0.0;
};

// G(u, j) = h_u^H (effective precoder column j); the SINR uses the signal
// term |G(u,u)|^2 against the coherent interference sum over j != u plus
// noise. Transmit symbols are unit-power and never instantiated.
inline RVec sinr_from_gains(const CMat& G, double sigma2) {
  const int nu = static_cast<int>(G.rows());
  RVec out(nu);
  for (int u = 0; u < nu; ++u) {
    cx interf(0.0, 0.0);
    for (int j = 0; j < static_cast<int>(G.cols()); ++j)
      if (j != u) interf += G(u, j);
    out(u) = abs2(G(u, u)) / (abs2(interf) + sigma2);
  }
  return out;
}

inline double interference_power(const CMat& G, int u) {
  cx interf(0.0, 0.0);
  for (int j = 0; j < static_cast<int>(G.cols()); ++j)
    if (j != u) interf += G(u, j);
  return abs2(interf);
}

inline double sum_rate(const RVec& sinr) {
  double acc = 0.0;
  for (Eigen::Index u = 0; u < sinr.size(); ++u)
    acc += std::log2(1.0 + sinr(u));
  return acc;
}

inline RateReport make_rate_report(const CMat& G, double sigma2) {
  RateReport r;
  r.per_user_sinr = sinr_from_gains(G, sigma2);
  r.per_user_rate = r.per_user_sinr.unaryExpr(
      [](double s) { return std::log2(1.0 + s); });
  r.sum_rate = r.per_user_rate.sum();
  return r;
}

struct CdfPoint {
  double rate;
  double level;
};

inline std::vector<CdfPoint> rate_cdf(const std::vector<RateReport>& reports) {
  std::vector<double> rates;
  for (const auto& r : reports)
    for (Eigen::Index u = 0; u < r.per_user_rate.size(); ++u)
      rates.push_back(r.per_user_rate(u));
  std::sort(rates.begin(), rates.end());
  std::vector<CdfPoint> cdf;
  cdf.reserve(rates.size());
  const double n = static_cast<double>(rates.size());
  for (std::size_t i = 0; i < rates.size(); ++i)
    cdf.push_back({rates[i], (i + 1) / n});
  return cdf;
}

}  // namespace cfmimo
