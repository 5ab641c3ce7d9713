#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

namespace transrad {

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(sigmoid(x)) without overflow.
inline double log_sigmoid(double x) {
  return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

inline std::vector<double> softmax(std::span<const double> x) {
  std::vector<double> p(x.size());
  if (x.empty()) return p;
  const double m = *std::max_element(x.begin(), x.end());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (p[i] = std::exp(x[i] - m));
  for (double& v : p) v /= s;
  return p;
}

}  // namespace transrad
