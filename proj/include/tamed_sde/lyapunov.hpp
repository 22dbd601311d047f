#pragma once

#include "tamed_sde/errors.hpp"
#include "tamed_sde/linalg.hpp"
#include "tamed_sde/model.hpp"
#include "tamed_sde/parallel.hpp"
#include "tamed_sde/random.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

namespace tamed_sde {

/// Candidate V0 for (d_t + L) V0 + (p*-1)/2 |sigma^T grad V0|^2 / V0 <= alpha V0 + beta,
/// with constant alpha and beta.
struct LyapunovCertificate {
  FieldPtr V0;
  double alpha = 0.0;
  double beta = 0.0;
  double p_star = 1.0;
  DomainBox domain;
};

/// State-dependent Lipschitz bound G(t, x) >= 0.
struct LipschitzEnvelope {
  std::function<double(double, const Vec&)> G;
  std::string formula;
};

/// U >= 0, Ubar and rho for L U + 1/2 |sigma^T grad U|^2 + Ubar <= rho U.
struct ExpIntegrabilityData {
  FieldPtr U;
  std::function<double(const Vec&)> Ubar;
  double rho = 0.0;
};

// ---------------------------------------------------------------------------
// Generator

/// b . grad phi + 1/2 (sigma sigma^T) : D^2 phi, in the jet's scaling.
inline double generator_scaled(const SdeModel& model, const FieldJet& jet, double t,
                               const Vec& x) {
  const int n = model.dim();
  Vec b(n);
  Mat sigma(n, n);
  model.drift(t, x, b);
  model.diffusion(t, x, sigma);
  const Mat a = 0.5 * sigma * sigma.transpose();
  return b.dot(jet.grad) + (a.cwiseProduct(jet.hess)).sum();
}

/// L phi at (t, x). Time derivatives are not included.
inline double generator_apply(const SdeModel& model, const ScalarField& phi, double t,
                              const Vec& x) {
  const FieldJet jet = phi.jet(t, x);
  return generator_scaled(model, jet, t, x) * std::exp(jet.log_scale);
}

/// (d_t + L) phi / phi, evaluated without forming phi itself.
inline double generator_ratio(const SdeModel& model, const ScalarField& phi, double t,
                              const Vec& x) {
  const FieldJet jet = phi.jet(t, x);
  return (jet.dt + generator_scaled(model, jet, t, x)) / jet.value;
}

namespace detail {

/// Certificate residual divided by V0 (scale-free).
inline double certificate_ratio(const SdeModel& model, const LyapunovCertificate& cert,
                                const FieldJet& jet, double t, const Vec& x) {
  if (!(jet.value > 0.0)) {
    throw CertificateDomainError("certificate: V0 <= 0 at x=(" + format_point(x) + ")");
  }
  const int n = model.dim();
  Mat sigma(n, n);
  model.diffusion(t, x, sigma);
  const double lv = jet.dt + generator_scaled(model, jet, t, x);
  const double carre = (sigma.transpose() * jet.grad).squaredNorm();
  const double v_scale = jet.value;
  const double beta_term =
      cert.beta == 0.0 ? 0.0 : cert.beta * std::exp(-jet.log_scale) / v_scale;
  return lv / v_scale + 0.5 * (cert.p_star - 1.0) * carre / (v_scale * v_scale) - cert.alpha -
         beta_term;
}

}  // namespace detail

/// (d_t + L) V0 + (p*-1)/2 |sigma^T grad V0|^2 / V0 - alpha V0 - beta.
/// The certificate holds at (t, x) iff the result is <= 0.
inline double certificate_residual(const SdeModel& model, const LyapunovCertificate& cert,
                                   double t, const Vec& x) {
  const FieldJet jet = cert.V0->jet(t, x);
  return detail::certificate_ratio(model, cert, jet, t, x) * jet.unscaled_value();
}

/// certificate_residual / V0.
inline double certificate_relative_residual(const SdeModel& model,
                                            const LyapunovCertificate& cert, double t,
                                            const Vec& x) {
  return detail::certificate_ratio(model, cert, cert.V0->jet(t, x), t, x);
}

// ---------------------------------------------------------------------------
// Box scans

struct BoxScan {
  std::size_t points = 0;
  double max_value = -std::numeric_limits<double>::infinity();
  Vec argmax;
  std::size_t non_finite = 0;
  std::vector<double> values;  // by point index
};

/// Evaluates fn at `count` pseudo-random points of the box (stream purpose
/// kSampling). Point i is the same for every count, so a larger scan contains
/// every point of a smaller one.
template <typename Fn>
BoxScan scan_box(const DomainBox& box, std::size_t count, std::uint64_t seed, int threads,
                 Fn&& fn, std::uint64_t stream = 0) {
  BoxScan scan;
  scan.points = count;
  scan.values.resize(count);
  const CounterStream sampler({seed, stream, StreamPurpose::kSampling});
  const int n = box.dim();
  parallel_for_blocks(count, threads, 1024, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      scan.values[i] = fn(box.from_unit(unit_cube_point(sampler, i, n)));
    }
  });
  for (std::size_t i = 0; i < count; ++i) {
    const double v = scan.values[i];
    if (!std::isfinite(v)) {
      ++scan.non_finite;
      continue;
    }
    if (v > scan.max_value) {
      scan.max_value = v;
      scan.argmax = box.from_unit(unit_cube_point(sampler, i, n));
    }
  }
  return scan;
}

/// Row of the certification report CSV.
struct CheckReport {
  std::string check;
  std::string model;
  std::size_t points = 0;
  std::size_t violations = 0;
  double max_residual = -std::numeric_limits<double>::infinity();
  Vec worst_point;

  bool passed() const { return violations == 0; }
};

inline void write_check_header(std::ostream& os) {
  os << "check,model,points,violations,max_residual,worst_point\n";
}

inline void write_check_row(std::ostream& os, const CheckReport& r) {
  os << std::setprecision(17) << r.check << ',' << r.model << ',' << r.points << ','
     << r.violations << ',' << r.max_residual << ',' << format_point(r.worst_point) << '\n';
}

/// Samples the certificate domain; a point violates when residual / V0 exceeds
/// `slack`. max_residual reports the largest residual / V0.
inline CheckReport certificate_check(const SdeModel& model, const LyapunovCertificate& cert,
                                     std::size_t points, std::uint64_t seed, double t = 0.0,
                                     double slack = 1e-9, int threads = 0) {
  auto scan = scan_box(cert.domain, points, seed, threads, [&](const Vec& x) {
    const FieldJet jet = cert.V0->jet(t, x);
    if (!(jet.value > 0.0)) return std::numeric_limits<double>::quiet_NaN();
    return detail::certificate_ratio(model, cert, jet, t, x);
  });
  CheckReport report{"certificate", model.name(), points};
  for (double v : scan.values) {
    if (!std::isfinite(v) || v > slack) ++report.violations;
  }
  report.max_residual = scan.max_value;
  report.worst_point = scan.argmax;
  return report;
}

// ---------------------------------------------------------------------------
// Lipschitz envelopes

enum class LipschitzMode {
  kPairs,      // |b(x)-b(y)| <= (G(x)+G(y))|x-y| and ||s(x)-s(y)||^2 <= (G(x)+G(y))|x-y|^2
  kPointwise,  // sum_i |d_i b| + ||d_i sigma||^2 <= G
};

struct LipschitzViolation {
  Vec x;
  Vec y;  // empty in pointwise mode
  double margin = 0.0;  // lhs - rhs (> 0)
};

struct LipschitzReport {
  CheckReport summary;
  std::vector<LipschitzViolation> violations;  // at most `keep` entries
};

/// Left-hand side minus right-hand side of the pair inequalities (max of the
/// drift and diffusion conditions). Frobenius norm for sigma.
inline double lipschitz_pair_margin(const SdeModel& model, const LipschitzEnvelope& env, double t,
                                    const Vec& x, const Vec& y) {
  const int n = model.dim();
  Vec bx(n), by(n);
  Mat sx(n, n), sy(n, n);
  model.drift(t, x, bx);
  model.drift(t, y, by);
  model.diffusion(t, x, sx);
  model.diffusion(t, y, sy);
  const double dist = (x - y).norm();
  const double g = env.G(t, x) + env.G(t, y);
  const double drift_margin = (bx - by).norm() - g * dist;
  const double diff_margin = (sx - sy).squaredNorm() - g * dist * dist;
  return std::max(drift_margin, diff_margin);
}

inline double lipschitz_pointwise_margin(const SdeModel& model, const LipschitzEnvelope& env,
                                         double t, const Vec& x) {
  const int n = model.dim();
  Mat jb(n, n);
  Tensor3 js(n, n, n);
  model.drift_jacobian(t, x, jb);
  model.diffusion_jacobian(t, x, js);
  double lhs = 0.0;
  for (int i = 0; i < n; ++i) lhs += jb.col(i).norm() + js[i].squaredNorm();
  return lhs - env.G(t, x);
}

inline LipschitzReport lipschitz_check(const SdeModel& model, const LipschitzEnvelope& env,
                                       LipschitzMode mode, const DomainBox& box,
                                       std::size_t samples, std::uint64_t seed, double t = 0.0,
                                       std::size_t keep = 100, int threads = 0) {
  const CounterStream sampler({seed, 1, StreamPurpose::kSampling});
  const int n = box.dim();
  auto point = [&](std::uint64_t i) { return box.from_unit(unit_cube_point(sampler, i, n)); };

  std::vector<double> margins(samples);
  parallel_for_blocks(samples, threads, 1024, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      margins[i] = mode == LipschitzMode::kPairs
                       ? lipschitz_pair_margin(model, env, t, point(2 * i), point(2 * i + 1))
                       : lipschitz_pointwise_margin(model, env, t, point(i));
    }
  });

  LipschitzReport report;
  report.summary.check = mode == LipschitzMode::kPairs ? "lipschitz_pairs" : "lipschitz_pointwise";
  report.summary.model = model.name();
  report.summary.points = samples;
  for (std::size_t i = 0; i < samples; ++i) {
    const double m = margins[i];
    const Vec x = mode == LipschitzMode::kPairs ? point(2 * i) : point(i);
    if (m > report.summary.max_residual || report.summary.worst_point.size() == 0) {
      report.summary.max_residual = std::max(m, report.summary.max_residual);
      report.summary.worst_point = x;
    }
    if (m > 0.0 || !std::isfinite(m)) {
      ++report.summary.violations;
      if (report.violations.size() < keep) {
        LipschitzViolation v{x, mode == LipschitzMode::kPairs ? point(2 * i + 1) : Vec(), m};
        report.violations.push_back(std::move(v));
      }
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Small-o profile of G against log V

struct SmallORow {
  double radius = 0.0;
  double max_ratio = 0.0;
  std::size_t skipped = 0;  // points with V <= 1
};

/// Uniform directions on the sphere |x| = R (normalised Gaussian vectors).
inline Vec sphere_point(const CounterStream& stream, std::uint64_t index, int dim, double radius) {
  Vec g(dim);
  for (int i = 0; i < dim; ++i) g(i) = stream.normal(index * dim + i);
  return radius * g / g.norm();
}

/// Per radius, the max of G / log V over `samples_per_sphere` points.
inline std::vector<SmallORow> small_o_profile(const LipschitzEnvelope& env, const ScalarField& V,
                                              const std::vector<double>& radii,
                                              std::size_t samples_per_sphere,
                                              std::uint64_t seed, double t = 0.0) {
  std::vector<SmallORow> rows;
  const int n = V.dim();
  for (std::size_t r = 0; r < radii.size(); ++r) {
    const CounterStream stream({seed, r, StreamPurpose::kSampling});
    SmallORow row{radii[r], 0.0, 0};
    bool any = false;
    for (std::size_t i = 0; i < samples_per_sphere; ++i) {
      const Vec x = sphere_point(stream, i, n, radii[r]);
      const double log_v = V.log_value(t, x);
      if (!(log_v > 0.0)) {
        ++row.skipped;
        continue;
      }
      const double ratio = env.G(t, x) / log_v;
      row.max_ratio = any ? std::max(row.max_ratio, ratio) : ratio;
      any = true;
    }
    rows.push_back(row);
  }
  return rows;
}

/// Sampled M(m) = max over the box of G - m log V0: the pointwise sufficient
/// form G <= m log V0 + M(m) of the time-integrated envelope condition.
inline std::vector<std::pair<double, double>> envelope_offsets(const LipschitzEnvelope& env,
                                                               const ScalarField& V,
                                                               const DomainBox& box,
                                                               const std::vector<double>& m_values,
                                                               std::size_t samples,
                                                               std::uint64_t seed, double t = 0.0) {
  std::vector<std::pair<double, double>> out;
  for (double m : m_values) {
    const auto scan = scan_box(box, samples, seed, 0, [&](const Vec& x) {
      return env.G(t, x) - m * V.log_value(t, x);
    }, 2);
    out.emplace_back(m, scan.max_value);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Exponential integrability

/// L U + 1/2 |sigma^T grad U|^2 + Ubar - rho U at x.
inline double exp_integrability_residual(const SdeModel& model, const ExpIntegrabilityData& data,
                                         const Vec& x, double t = 0.0) {
  const FieldJet jet = data.U->jet(t, x);
  const double scale = std::exp(jet.log_scale);
  const int n = model.dim();
  Mat sigma(n, n);
  model.diffusion(t, x, sigma);
  const double lu = generator_scaled(model, jet, t, x) * scale;
  const double carre = (sigma.transpose() * jet.grad).squaredNorm() * scale * scale;
  return lu + 0.5 * carre + data.Ubar(x) - data.rho * jet.value * scale;
}

/// Passes iff the max residual over `points` is <= 1e-9.
inline CheckReport exp_integrability_check(const SdeModel& model, const ExpIntegrabilityData& data,
                                           const std::vector<Vec>& points, double t = 0.0) {
  CheckReport report{"exp_integrability", model.name(), points.size()};
  for (const auto& x : points) {
    const double r = exp_integrability_residual(model, data, x, t);
    if (r > report.max_residual || report.worst_point.size() == 0) {
      report.max_residual = std::max(r, report.max_residual);
      report.worst_point = x;
    }
    if (!(r <= 1e-9)) ++report.violations;
  }
  return report;
}

inline std::vector<Vec> sample_box(const DomainBox& box, std::size_t count, std::uint64_t seed,
                                   std::uint64_t stream = 3) {
  const CounterStream sampler({seed, stream, StreamPurpose::kSampling});
  std::vector<Vec> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(box.from_unit(unit_cube_point(sampler, i, box.dim())));
  }
  return out;
}

}  // namespace tamed_sde
