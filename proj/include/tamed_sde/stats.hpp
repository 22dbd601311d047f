#pragma once

#include "tamed_sde/errors.hpp"

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace tamed_sde {

/// Two-sided 95% normal quantile used for every reported confidence interval.
inline constexpr double kZ95 = 1.959963984540054;

/// Pairwise (tree) summation in index order. The result depends only on the
/// values and their order, never on how they were produced.
inline double pairwise_sum(std::span<const double> values) {
  const std::size_t n = values.size();
  if (n <= 8) {
    double acc = 0.0;
    for (double v : values) acc += v;
    return acc;
  }
  const std::size_t half = n / 2;
  return pairwise_sum(values.first(half)) + pairwise_sum(values.subspan(half));
}

struct MeanCi {
  double mean = 0.0;
  double ci_half_width = 0.0;  // 95%
  double std_dev = 0.0;
  std::size_t count = 0;
};

inline MeanCi summarize(std::span<const double> values) {
  MeanCi out;
  out.count = values.size();
  if (values.empty()) return out;
  out.mean = pairwise_sum(values) / double(values.size());
  if (values.size() < 2) return out;
  std::vector<double> sq(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double d = values[i] - out.mean;
    sq[i] = d * d;
  }
  const double var = pairwise_sum(sq) / double(values.size() - 1);
  out.std_dev = std::sqrt(var);
  out.ci_half_width = kZ95 * out.std_dev / std::sqrt(double(values.size()));
  return out;
}

/// Summary over the entries whose mask is true (e.g. non-diverged paths).
inline MeanCi summarize_masked(std::span<const double> values, std::span<const char> keep) {
  std::vector<double> kept;
  kept.reserve(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (keep[i]) kept.push_back(values[i]);
  }
  return summarize(kept);
}

struct LineFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r_squared = 0.0;
};

/// Ordinary least squares y = intercept + slope * x over at least two points.
inline LineFit ols_fit(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw ArgumentError("ols_fit: need at least two (x, y) pairs of equal length");
  }
  const double n = double(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0) throw ArgumentError("ols_fit: x values are all equal");
  LineFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  fit.r_squared = syy == 0.0 ? 1.0 : (sxy * sxy) / (sxx * syy);
  return fit;
}

/// OLS on (log x, log y); all values must be positive.
inline LineFit loglog_fit(std::span<const double> x, std::span<const double> y) {
  std::vector<double> lx(x.size()), ly(y.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0) || !(i < y.size() && y[i] > 0.0)) {
      throw ArgumentError("loglog_fit: values must be positive");
    }
    lx[i] = std::log(x[i]);
    ly[i] = std::log(y[i]);
  }
  return ols_fit(lx, ly);
}

}  // namespace tamed_sde
