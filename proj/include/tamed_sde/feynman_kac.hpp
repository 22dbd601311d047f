#pragma once

#include "tamed_sde/errors.hpp"
#include "tamed_sde/integrators.hpp"
#include "tamed_sde/linalg.hpp"
#include "tamed_sde/model.hpp"
#include "tamed_sde/parallel.hpp"
#include "tamed_sde/random.hpp"
#include "tamed_sde/stats.hpp"
#include "tamed_sde/variational.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

namespace tamed_sde {

struct FkOptions {
  double delta = 1e-3;
  std::size_t paths = 10000;
  std::uint64_t seed = 0;
  Scheme scheme = Scheme::kTamed;
  double q_prime = 3.0;
  int threads = 0;
};

struct FkEstimate {
  double mean = 0.0;
  double ci_half_width = 0.0;
  std::size_t n_paths = 0;
  std::size_t diverged_count = 0;
  /// More than 0.1% of paths diverged.
  bool flagged = false;
};

/// Per-path values of the functional source + g(X_T) exp(-discount), started
/// at time s from x and run to T. Diverged paths have keep = 0.
struct FkSamples {
  std::vector<double> values;
  std::vector<char> keep;
};

inline FkSamples fk_samples(const SdeModel& model, const ObservableTriple& obs, double s,
                            const Vec& x, double T, const FkOptions& opt) {
  if (x.size() != model.dim()) throw ArgumentError("fk_estimate: x dimension mismatch");
  if (!(T >= s)) throw ArgumentError("fk_estimate: need T >= s");
  if (opt.paths == 0) throw ArgumentError("fk_estimate: need at least one path");
  TamedSchemeConfig cfg;
  cfg.delta = opt.delta;
  cfg.q_prime = opt.q_prime;
  if (opt.scheme == Scheme::kTamed) cfg.validate();
  const TimeGrid grid = make_grid(T - s, opt.delta);
  const int n = model.dim();

  FkSamples out;
  out.values.resize(opt.paths);
  out.keep.resize(opt.paths);
  parallel_for_blocks(opt.paths, opt.threads, 64, [&](std::size_t begin, std::size_t end) {
    IncrementPath inc;
    for (std::size_t p = begin; p < end; ++p) {
      path_increments({opt.seed, p, StreamPurpose::kIncrement}, grid, n, inc);
      PathState st;
      st.t = s;
      st.x = x;
      integrate_path(opt.scheme, model, cfg, &obs, grid, inc, st);
      out.values[p] = st.functional(obs);
      out.keep[p] = !st.diverged && std::isfinite(out.values[p]);
    }
  });
  return out;
}

inline FkEstimate summarize_fk(const FkSamples& samples) {
  FkEstimate est;
  const auto s = summarize_masked(samples.values, samples.keep);
  est.mean = s.mean;
  est.ci_half_width = s.ci_half_width;
  est.n_paths = samples.values.size();
  est.diverged_count = est.n_paths - s.count;
  est.flagged = double(est.diverged_count) > 1e-3 * double(est.n_paths);
  return est;
}

/// u(s, T - s, x) by Monte Carlo.
inline FkEstimate fk_estimate(const SdeModel& model, const ObservableTriple& obs, double s,
                              const Vec& x, double T, const FkOptions& opt) {
  return summarize_fk(fk_samples(model, obs, s, x, T, opt));
}

struct FkGradient {
  std::vector<MeanCi> components;
  std::size_t diverged_count = 0;

  Vec mean() const {
    Vec v(static_cast<int>(components.size()));
    for (std::size_t i = 0; i < components.size(); ++i) v(int(i)) = components[i].mean;
    return v;
  }
};

/// Per-path gradient of the Euler-Maruyama functional in x. Differentiates
/// through the grid: J from the joint (x, J) system, and
///   grad D += grad c . J dt,
///   grad S += (grad f . J - f grad D) exp(-D) dt,
///   grad F  = grad S + (grad g . J - g grad D) exp(-D).
/// Gradients are row vectors stored as Vec.
inline std::vector<Vec> fk_gradient_samples(const SdeModel& model, const ObservableTriple& obs,
                                            double s, const Vec& x, double T, const FkOptions& opt,
                                            std::vector<char>& keep) {
  if (!obs.has_gradients()) throw ConfigurationError("fk_gradient: observable gradients missing");
  if (x.size() != model.dim()) throw ArgumentError("fk_gradient: x dimension mismatch");
  if (!(T >= s)) throw ArgumentError("fk_gradient: need T >= s");
  const TimeGrid grid = make_grid(T - s, opt.delta);
  const int n = model.dim();
  std::vector<Vec> grads(opt.paths);
  keep.assign(opt.paths, 0);

  parallel_for_blocks(opt.paths, opt.threads, 32, [&](std::size_t begin, std::size_t end) {
    IncrementPath inc;
    VariationWorkspace ws;
    for (std::size_t p = begin; p < end; ++p) {
      path_increments({opt.seed, p, StreamPurpose::kIncrement}, grid, n, inc);
      VariationalState st = VariationalState::start(x, 1, s);
      double disc = 0.0;
      Vec g_disc = Vec::Zero(n), g_source = Vec::Zero(n);
      for (int k = 0; k < grid.steps(); ++k) {
        const double dt = grid.dt(k);
        const double w = std::exp(-disc);
        const double f = obs.f(st.t, st.x);
        const Vec gf = st.J.transpose() * obs.grad_f(st.t, st.x);
        const Vec gc = st.J.transpose() * obs.grad_c(st.t, st.x);
        g_source += (gf - f * g_disc) * w * dt;
        disc += obs.c(st.t, st.x) * dt;
        g_disc += gc * dt;
        variation_step(st, inc.row(k), model, dt, ws);
        if (st.diverged) break;
      }
      if (st.diverged) {
        grads[p] = Vec::Zero(n);
        continue;
      }
      const double w = std::exp(-disc);
      const Vec gg = st.J.transpose() * obs.grad_g(st.x);
      grads[p] = g_source + (gg - obs.g(st.x) * g_disc) * w;
      keep[p] = grads[p].allFinite();
    }
  });
  return grads;
}

inline FkGradient fk_gradient(const SdeModel& model, const ObservableTriple& obs, double s,
                              const Vec& x, double T, const FkOptions& opt) {
  std::vector<char> keep;
  const auto grads = fk_gradient_samples(model, obs, s, x, T, opt, keep);
  FkGradient out;
  const int n = model.dim();
  std::vector<double> comp(grads.size());
  for (int i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < grads.size(); ++p) comp[p] = grads[p](i);
    out.components.push_back(summarize_masked(comp, keep));
  }
  for (char k : keep) out.diverged_count += k ? 0 : 1;
  return out;
}

/// Central finite differences of fk_estimate in each coordinate, with common
/// random numbers (same seed and path indexing at x + h e_i and x - h e_i).
/// The CI comes from the per-path differences.
inline std::vector<MeanCi> fk_gradient_fd(const SdeModel& model, const ObservableTriple& obs,
                                          double s, const Vec& x, double T, const FkOptions& opt,
                                          double h) {
  if (!(h > 0.0)) throw ArgumentError("fk_gradient_fd: h must be > 0");
  std::vector<MeanCi> out;
  for (int i = 0; i < model.dim(); ++i) {
    Vec xp = x, xm = x;
    xp(i) += h;
    xm(i) -= h;
    const auto up = fk_samples(model, obs, s, xp, T, opt);
    const auto dn = fk_samples(model, obs, s, xm, T, opt);
    std::vector<double> diff(opt.paths);
    std::vector<char> keep(opt.paths);
    for (std::size_t p = 0; p < opt.paths; ++p) {
      diff[p] = (up.values[p] - dn.values[p]) / (2.0 * h);
      keep[p] = up.keep[p] && dn.keep[p];
    }
    out.push_back(summarize_masked(diff, keep));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Kolmogorov residual

struct StencilPoint {
  double t = 0.0;
  Vec x;
  double weight = 0.0;
};

/// Weights of the central-difference operator
///   d_t v + a : D^2 v + b . grad v - c v
/// at (t, x), with a = sigma sigma^T / 2. Points: centre, +-h e_i, the four
/// diagonal corners of every coordinate pair and +-h_t in time.
inline std::vector<StencilPoint> kolmogorov_stencil(const SdeModel& model,
                                                    const ObservableTriple& obs, double t,
                                                    const Vec& x, double hx, double ht) {
  if (!(hx > 0.0 && ht > 0.0)) throw ArgumentError("pde_residual: stencil steps must be > 0");
  const int n = model.dim();
  Vec b(n);
  Mat sigma(n, n);
  model.drift(t, x, b);
  model.diffusion(t, x, sigma);
  const Mat a = 0.5 * sigma * sigma.transpose();
  const double c = obs.c ? obs.c(t, x) : 0.0;

  std::vector<StencilPoint> pts;
  double centre = -c;
  for (int i = 0; i < n; ++i) {
    Vec xp = x, xm = x;
    xp(i) += hx;
    xm(i) -= hx;
    const double second = a(i, i) / (hx * hx);
    const double first = b(i) / (2.0 * hx);
    pts.push_back({t, xp, second + first});
    pts.push_back({t, xm, second - first});
    centre -= 2.0 * second;
  }
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      // a_ij + a_ji times the mixed difference (v++ - v+- - v-+ + v--) / (4 h^2).
      const double w = 2.0 * a(i, j) / (4.0 * hx * hx);
      for (int si : {1, -1}) {
        for (int sj : {1, -1}) {
          Vec y = x;
          y(i) += si * hx;
          y(j) += sj * hx;
          pts.push_back({t, y, w * si * sj});
        }
      }
    }
  }
  pts.push_back({t + ht, x, 1.0 / (2.0 * ht)});
  pts.push_back({t - ht, x, -1.0 / (2.0 * ht)});
  pts.insert(pts.begin(), {t, x, centre});
  return pts;
}

struct PdeResidual {
  double residual = 0.0;
  double ci_half_width = 0.0;
  std::size_t stencil_points = 0;
  std::vector<std::string> warnings;
};

/// Residual of the Kolmogorov equation for a given v (no Monte Carlo).
inline PdeResidual pde_residual_analytic(const SdeModel& model, const ObservableTriple& obs,
                                         const std::function<double(double, const Vec&)>& v,
                                         double t, const Vec& x, double hx, double ht) {
  const auto pts = kolmogorov_stencil(model, obs, t, x, hx, ht);
  PdeResidual out;
  out.stencil_points = pts.size();
  double acc = obs.f ? obs.f(t, x) : 0.0;
  for (const auto& p : pts) acc += p.weight * v(p.t, p.x);
  out.residual = acc;
  return out;
}

/// Residual of the Kolmogorov equation for v(t, x) = u(t, T - t, x) estimated
/// by Monte Carlo on the stencil. Every stencil point reuses the same seed and
/// path indices, so the residual is a per-path linear combination and its CI
/// accounts for the correlation between stencil points.
inline PdeResidual pde_residual(const SdeModel& model, const ObservableTriple& obs, double t,
                                const Vec& x, double T, double hx, double ht,
                                const FkOptions& opt) {
  const auto pts = kolmogorov_stencil(model, obs, t, x, hx, ht);
  PdeResidual out;
  out.stencil_points = pts.size();
  const DomainBox box = model.domain();
  std::vector<double> combo(opt.paths, obs.f ? obs.f(t, x) : 0.0);
  std::vector<char> keep(opt.paths, 1);
  for (const auto& p : pts) {
    if (!box.contains(p.x)) {
      out.warnings.push_back("stencil point (" + format_point(p.x) + ") outside the domain box");
    }
    if (p.t > T) throw ArgumentError("pde_residual: stencil time exceeds T");
    const auto s = fk_samples(model, obs, p.t, p.x, T, opt);
    for (std::size_t i = 0; i < opt.paths; ++i) {
      combo[i] += p.weight * s.values[i];
      keep[i] = keep[i] && s.keep[i];
    }
  }
  const auto summary = summarize_masked(combo, keep);
  out.residual = summary.mean;
  out.ci_half_width = summary.ci_half_width;
  return out;
}

// ---------------------------------------------------------------------------
// CSV: quantity,t,x_0..,mean,ci,delta,N,seed

struct FkRow {
  std::string quantity;
  double t = 0.0;
  Vec x;
  double mean = 0.0;
  double ci = 0.0;
};

inline void write_fk_csv(std::ostream& os, const std::vector<FkRow>& rows, int dim, double delta,
                         std::size_t paths, std::uint64_t seed) {
  os << "quantity,t";
  for (int i = 0; i < dim; ++i) os << ",x_" << i;
  os << ",mean,ci,delta,N,seed\n" << std::setprecision(17);
  for (const auto& r : rows) {
    os << r.quantity << ',' << r.t;
    for (int i = 0; i < dim; ++i) os << ',' << r.x(i);
    os << ',' << r.mean << ',' << r.ci << ',' << delta << ',' << paths << ',' << seed << '\n';
  }
}

}  // namespace tamed_sde
