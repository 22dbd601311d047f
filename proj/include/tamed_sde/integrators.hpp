#pragma once

#include "tamed_sde/errors.hpp"
#include "tamed_sde/linalg.hpp"
#include "tamed_sde/model.hpp"
#include "tamed_sde/parallel.hpp"
#include "tamed_sde/random.hpp"
#include "tamed_sde/stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace tamed_sde {

/// Paths whose state norm exceeds this (or turns non-finite) are flagged as
/// diverged and frozen.
inline constexpr double kDivergenceRadius = 1e12;

enum class Scheme { kTamed, kEulerMaruyama };

inline const char* scheme_name(Scheme s) { return s == Scheme::kTamed ? "tamed" : "em"; }

/// Stopping radius exp(|log delta|^{1/2}) of the stopped increment-tamed scheme.
inline double stopping_threshold(double delta) {
  if (!(delta > 0.0 && delta < 1.0)) {
    throw ArgumentError("stopping_threshold: delta must lie in (0, 1)");
  }
  return std::exp(std::sqrt(-std::log(delta)));
}

struct TamedSchemeConfig {
  double delta = 0.01;
  double q_prime = 3.0;
  /// Replaces exp(|log delta|^{1/2}) when set.
  std::optional<double> threshold_override;

  double threshold() const {
    return threshold_override ? *threshold_override : stopping_threshold(delta);
  }

  /// Throws on invalid values; returns non-fatal warnings.
  std::vector<std::string> validate() const {
    if (!(delta > 0.0 && delta < 1.0)) {
      throw ArgumentError("TamedSchemeConfig: delta must lie in (0, 1)");
    }
    if (!(q_prime >= 1.0)) throw ArgumentError("TamedSchemeConfig: q_prime must be >= 1");
    if (threshold_override && !(*threshold_override > 0.0)) {
      throw ArgumentError("TamedSchemeConfig: threshold override must be > 0");
    }
    std::vector<std::string> warnings;
    if (q_prime < 3.0) {
      warnings.emplace_back("q_prime < 3: order-one weak convergence is not expected");
    }
    return warnings;
  }
};

/// State of the appended system (X, X^{(n+1)}, X^{(n+2)}):
/// discount_acc integrates c, source_acc integrates f exp(-discount_acc).
struct PathState {
  double t = 0.0;
  Vec x;
  double discount_acc = 0.0;
  double source_acc = 0.0;
  bool diverged = false;

  /// source + g(x) exp(-discount): the Feynman-Kac functional of this path.
  double functional(const ObservableTriple& obs) const {
    return source_acc + obs.g(x) * std::exp(-discount_acc);
  }
};

// ---------------------------------------------------------------------------
// Taming map f(z) = z / (1 + |z|^q') and its derivatives

/// r^q', with the common q' = 3 done by multiplication.
inline double taming_power(double r, double q_prime) {
  return q_prime == 3.0 ? r * r * r : std::pow(r, q_prime);
}

inline Vec taming_map(const Vec& z, double q_prime) {
  return z / (1.0 + taming_power(z.norm(), q_prime));
}

/// Coefficients of the second derivative of the taming map:
///   d_i d_j f_m = psi (delta_mi z_j + delta_mj z_i + delta_ij z_m) + chi z_i z_j z_m
/// with s = |z|^q',
///   psi = -q' |z|^{q'-2} / (1+s)^2
///   chi = -q'(q'-2) |z|^{q'-4} / (1+s)^2 + 2 q'^2 |z|^{2q'-4} / (1+s)^3.
/// Both vanish at z = 0 together with their contractions (q' >= 3).
struct TamingCurvature {
  double psi = 0.0;
  double chi = 0.0;
};

inline TamingCurvature taming_curvature(double r, double q_prime) {
  if (r == 0.0) return {};
  const double s = std::pow(r, q_prime);
  const double one_s = 1.0 + s;
  TamingCurvature k;
  k.psi = -q_prime * std::pow(r, q_prime - 2.0) / (one_s * one_s);
  k.chi = -q_prime * (q_prime - 2.0) * std::pow(r, q_prime - 4.0) / (one_s * one_s) +
          2.0 * q_prime * q_prime * std::pow(r, 2.0 * q_prime - 4.0) / (one_s * one_s * one_s);
  return k;
}

/// (A : D^2) f(z) for symmetric A, i.e. component m = sum_ij A_ij d_i d_j f_m
///   = 2 psi (A z)_m + z_m (psi tr A + chi z^T A z).
inline Vec taming_hessian_contract(const Vec& z, const Mat& a, double q_prime) {
  const auto k = taming_curvature(z.norm(), q_prime);
  if (k.psi == 0.0 && k.chi == 0.0) return Vec::Zero(z.size());
  const Vec az = a * z;
  return 2.0 * k.psi * az + z * (k.psi * a.trace() + k.chi * z.dot(az));
}

/// D^2 f(z)[u, u], the same contraction with A = u u^T.
inline Vec taming_hessian_quadratic(const Vec& z, const Vec& u, double q_prime) {
  const auto k = taming_curvature(z.norm(), q_prime);
  if (k.psi == 0.0 && k.chi == 0.0) return Vec::Zero(z.size());
  const double zu = z.dot(u);
  return 2.0 * k.psi * zu * u + z * (k.psi * u.squaredNorm() + k.chi * zu * zu);
}

struct ItoCorrection {
  Vec b_star;
  Mat sigma_star;
};

/// Drift and diffusion corrections in the Ito form of f(Z_t), where
/// dZ = b(y) dt + sigma(y) dW with frozen y:
///   b*(y,z) = -b (s/(1+s)) - q' z (z.b) |z|^{q'-2}/(1+s)^2 + 1/2 (sigma sigma^T : D^2) f(z)
///   sigma*(y,z) = -sigma (s/(1+s)) - q' z (z^T sigma) |z|^{q'-2}/(1+s)^2
/// with s = |z|^q'.
inline ItoCorrection ito_correction_terms(const Vec& y, const Vec& z, const SdeModel& model,
                                          double q_prime, double t = 0.0) {
  const int n = model.dim();
  Vec b(n);
  Mat sigma(n, n);
  model.drift(t, y, b);
  model.diffusion(t, y, sigma);

  const double r = z.norm();
  const double s = std::pow(r, q_prime);
  const double damp = s / (1.0 + s);
  const double radial = r == 0.0 ? 0.0 : q_prime * std::pow(r, q_prime - 2.0) / ((1.0 + s) * (1.0 + s));

  ItoCorrection out;
  out.b_star = -b * damp - radial * z.dot(b) * z +
               0.5 * taming_hessian_contract(z, sigma * sigma.transpose(), q_prime);
  out.sigma_star = -sigma * damp - radial * z * (z.transpose() * sigma);
  return out;
}

// ---------------------------------------------------------------------------
// One-step maps

namespace detail {

inline void accumulate_observables(PathState& state, double dt, const ObservableTriple* obs) {
  if (obs == nullptr) return;
  const double discount_before = state.discount_acc;
  state.discount_acc += obs->c(state.t, state.x) * dt;
  state.source_acc += obs->f(state.t, state.x) * std::exp(-discount_before) * dt;
}

inline void check_divergence(PathState& state) {
  if (!state.x.allFinite() || state.x.norm() > kDivergenceRadius) state.diverged = true;
}

}  // namespace detail

/// Advances `state` in place by dt with Brownian increment dW (variance dt).
/// Accumulators use the left-endpoint rule.
inline void advance(Scheme scheme, PathState& state, std::span<const double> dw, double dt,
                    const SdeModel& model, const TamedSchemeConfig& cfg, double threshold,
                    const ObservableTriple* obs = nullptr) {
  if (state.diverged) return;
  const int n = model.dim();
  detail::accumulate_observables(state, dt, obs);

  const Eigen::Map<const Eigen::VectorXd> dw_vec(dw.data(), n);
  if (scheme == Scheme::kTamed) {
    if (state.x.norm() <= threshold) {
      Vec b(n);
      Mat sigma(n, n);
      model.drift(state.t, state.x, b);
      model.diffusion(state.t, state.x, sigma);
      Vec z = b * dt + sigma * dw_vec;
      state.x += z / (1.0 + taming_power(z.norm(), cfg.q_prime));
    }
  } else {
    Vec b(n);
    Mat sigma(n, n);
    model.drift(state.t, state.x, b);
    model.diffusion(state.t, state.x, sigma);
    state.x += b * dt + sigma * dw_vec;
  }
  state.t += dt;
  detail::check_divergence(state);
}

inline PathState tamed_step(PathState state, const Vec& dw, const SdeModel& model,
                            const TamedSchemeConfig& cfg, const ObservableTriple* obs = nullptr) {
  advance(Scheme::kTamed, state, {dw.data(), std::size_t(dw.size())}, cfg.delta, model, cfg,
          cfg.threshold(), obs);
  return state;
}

inline PathState em_step(PathState state, const Vec& dw, const SdeModel& model, double delta,
                         const ObservableTriple* obs = nullptr) {
  TamedSchemeConfig cfg;
  cfg.delta = delta;
  advance(Scheme::kEulerMaruyama, state, {dw.data(), std::size_t(dw.size())}, delta, model, cfg,
          std::numeric_limits<double>::infinity(), obs);
  return state;
}

// ---------------------------------------------------------------------------
// Time grids and per-path increments

/// Uniform grid of `full_steps` steps of size delta, plus a final partial step
/// of size last_dt when the horizon is not a multiple of delta.
struct TimeGrid {
  double delta = 0.0;
  int full_steps = 0;
  double last_dt = 0.0;

  int steps() const { return full_steps + (last_dt > 0.0 ? 1 : 0); }
  double dt(int k) const { return k < full_steps ? delta : last_dt; }
};

inline TimeGrid make_grid(double horizon, double delta) {
  if (!(delta > 0.0)) throw ArgumentError("time grid: delta must be > 0");
  if (!(horizon >= 0.0)) throw ArgumentError("time grid: horizon must be >= 0");
  TimeGrid grid;
  grid.delta = delta;
  const double ratio = horizon / delta;
  const double rounded = std::round(ratio);
  if (std::abs(ratio - rounded) <= 1e-9 * std::max(1.0, ratio)) {
    grid.full_steps = static_cast<int>(rounded);
  } else {
    grid.full_steps = static_cast<int>(std::floor(ratio));
    grid.last_dt = horizon - grid.full_steps * delta;
  }
  return grid;
}

/// Increments for one path on `grid`; row k has variance grid.dt(k).
inline void path_increments(const SeedSpec& seed, const TimeGrid& grid, int dim,
                            IncrementPath& out) {
  out.resize(grid.steps(), dim);
  if (grid.steps() == 0) return;
  CounterStream(seed).fill_normals(0, out.data());
  for (int k = 0; k < grid.steps(); ++k) {
    const double scale = std::sqrt(grid.dt(k));
    for (double& v : out.row(k)) v *= scale;
  }
}

/// Integrates one path over pre-generated increments. observer(k, state) is
/// called after every step k (1-based count of completed steps).
template <typename Observer>
void integrate_path(Scheme scheme, const SdeModel& model, const TamedSchemeConfig& cfg,
                    const ObservableTriple* obs, const TimeGrid& grid,
                    const IncrementPath& increments, PathState& state, Observer&& observer) {
  const double threshold =
      scheme == Scheme::kTamed ? cfg.threshold() : std::numeric_limits<double>::infinity();
  for (int k = 0; k < grid.steps(); ++k) {
    advance(scheme, state, increments.row(k), grid.dt(k), model, cfg, threshold, obs);
    observer(k + 1, state);
  }
}

inline void integrate_path(Scheme scheme, const SdeModel& model, const TamedSchemeConfig& cfg,
                           const ObservableTriple* obs, const TimeGrid& grid,
                           const IncrementPath& increments, PathState& state) {
  integrate_path(scheme, model, cfg, obs, grid, increments, state, [](int, const PathState&) {});
}

// ---------------------------------------------------------------------------
// Ensembles

struct EnsembleOptions {
  Scheme scheme = Scheme::kTamed;
  Vec x0;
  double t0 = 0.0;
  double T = 1.0;
  TamedSchemeConfig cfg;
  const ObservableTriple* observables = nullptr;
  std::size_t paths = 1000;
  std::uint64_t seed = 0;
  int threads = 0;
  /// Record full trajectories of the first `dump_paths` paths.
  std::size_t dump_paths = 0;
};

struct TrajectoryRow {
  std::size_t path = 0;
  PathState state;
};

struct EnsembleResult {
  std::vector<PathState> terminal;
  std::size_t diverged_count = 0;
  std::vector<TrajectoryRow> trajectories;

  /// Mean and CI of a terminal statistic over non-diverged paths.
  template <typename Fn>
  MeanCi summarize_terminal(Fn&& stat) const {
    std::vector<double> values;
    values.reserve(terminal.size());
    for (const auto& s : terminal) {
      if (!s.diverged) values.push_back(stat(s));
    }
    return summarize(values);
  }
};

inline EnsembleResult simulate_ensemble(const SdeModel& model, const EnsembleOptions& opt) {
  if (opt.x0.size() != model.dim()) throw ArgumentError("simulate_ensemble: x0 dimension mismatch");
  if (opt.paths == 0) throw ArgumentError("simulate_ensemble: need at least one path");
  if (opt.scheme == Scheme::kTamed) opt.cfg.validate();
  if (!(opt.cfg.delta > 0.0)) throw ArgumentError("simulate_ensemble: delta must be > 0");
  if (!(opt.T >= opt.t0)) throw ArgumentError("simulate_ensemble: T must be >= t0");

  const TimeGrid grid = make_grid(opt.T - opt.t0, opt.cfg.delta);
  const int n = model.dim();
  EnsembleResult result;
  result.terminal.resize(opt.paths);
  std::vector<std::vector<TrajectoryRow>> dumps(std::min(opt.dump_paths, opt.paths));

  parallel_for_blocks(opt.paths, opt.threads, 64, [&](std::size_t begin, std::size_t end) {
    IncrementPath inc;
    for (std::size_t p = begin; p < end; ++p) {
      path_increments({opt.seed, p, StreamPurpose::kIncrement}, grid, n, inc);
      PathState state;
      state.t = opt.t0;
      state.x = opt.x0;
      if (p < dumps.size()) {
        auto& rows = dumps[p];
        rows.push_back({p, state});
        integrate_path(opt.scheme, model, opt.cfg, opt.observables, grid, inc, state,
                       [&](int, const PathState& s) { rows.push_back({p, s}); });
      } else {
        integrate_path(opt.scheme, model, opt.cfg, opt.observables, grid, inc, state);
      }
      result.terminal[p] = std::move(state);
    }
  });

  for (const auto& s : result.terminal) result.diverged_count += s.diverged ? 1 : 0;
  for (auto& rows : dumps) {
    result.trajectories.insert(result.trajectories.end(), rows.begin(), rows.end());
  }
  return result;
}

/// CSV: path,t,x_0..x_{n-1},discount_acc,source_acc
inline void write_trajectory_csv(std::ostream& os, const std::vector<TrajectoryRow>& rows, int dim) {
  os << "path,t";
  for (int i = 0; i < dim; ++i) os << ",x_" << i;
  os << ",discount_acc,source_acc\n";
  os << std::setprecision(17);
  for (const auto& row : rows) {
    os << row.path << ',' << row.state.t;
    for (int i = 0; i < dim; ++i) os << ',' << row.state.x(i);
    os << ',' << row.state.discount_acc << ',' << row.state.source_acc << '\n';
  }
}

// ---------------------------------------------------------------------------
// Ito-form verifier for the tamed increment

enum class ItoQuadrature {
  /// Left-point Euler sums of the Ito integrals. Pathwise error O(dt^{1/2}).
  kEuler,
  /// Adds the iterated-integral term 1/2 (D^2 f[u,u] - (sigma sigma^T : D^2) f dt),
  /// u = sigma(y) dW. The noise is commutative here, so this is pathwise O(dt).
  kMilstein,
};

struct ItoCheckOptions {
  double window = 0.1;
  double micro_dt = 1e-3;
  double q_prime = 3.0;
  std::uint64_t seed = 0;
  std::size_t paths = 64;
  ItoQuadrature quadrature = ItoQuadrature::kMilstein;
  int threads = 0;
};

struct ItoCheckResult {
  /// (t, |f(Z_t) - I_t|) along path 0.
  std::vector<std::pair<double, double>> curve;
  /// Mean over paths of sup_t |f(Z_t) - I_t|.
  double max_discrepancy = 0.0;
  double ci_half_width = 0.0;
};

namespace detail {

/// sup_t |f(Z_t) - I_t| along one path of increments on `grid`.
inline double ito_path_gap(const SdeModel& model, const Vec& y, const Vec& b, const Mat& sigma,
                           const Mat& a, const IncrementPath& inc, const TimeGrid& grid,
                           const ItoCheckOptions& opt,
                           std::vector<std::pair<double, double>>* curve) {
  const int n = model.dim();
  Vec z = Vec::Zero(n);
  Vec integral = Vec::Zero(n);
  double sup = 0.0;
  double t = 0.0;
  if (curve) curve->emplace_back(0.0, 0.0);
  for (int k = 0; k < grid.steps(); ++k) {
    const double dt = grid.dt(k);
    const Eigen::Map<const Eigen::VectorXd> dw(inc.row(k).data(), n);
    const auto corr = ito_correction_terms(y, z, model, opt.q_prime);
    const Vec u = sigma * dw;
    integral += (b + corr.b_star) * dt + (sigma + corr.sigma_star) * dw;
    if (opt.quadrature == ItoQuadrature::kMilstein) {
      integral += 0.5 * (taming_hessian_quadratic(z, u, opt.q_prime) -
                         taming_hessian_contract(z, a, opt.q_prime) * dt);
    }
    z += b * dt + u;
    t += dt;
    const double gap = (taming_map(z, opt.q_prime) - integral).norm();
    sup = std::max(sup, gap);
    if (curve) curve->emplace_back(t, gap);
  }
  return sup;
}

}  // namespace detail

/// verify_ito_form for several micro steps driven by one Brownian path per
/// path index: increments are drawn at the smallest step and summed for the
/// coarser ones, so the discrepancies are comparable across steps.
inline std::vector<ItoCheckResult> ito_discrepancy_curve(const SdeModel& model, const Vec& y,
                                                         const std::vector<double>& micro_dts,
                                                         const ItoCheckOptions& opt) {
  if (micro_dts.empty()) throw ArgumentError("verify_ito_form: empty micro_dt list");
  for (double dt : micro_dts) {
    if (!(dt > 0.0)) throw ArgumentError("verify_ito_form: window and micro_dt must be > 0");
  }
  if (!(opt.window > 0.0)) throw ArgumentError("verify_ito_form: window and micro_dt must be > 0");
  if (opt.paths == 0) throw ArgumentError("verify_ito_form: need at least one path");
  if (y.size() != model.dim()) throw ArgumentError("verify_ito_form: y dimension mismatch");
  const int n = model.dim();
  const double finest = *std::min_element(micro_dts.begin(), micro_dts.end());
  const TimeGrid fine_grid = make_grid(opt.window, finest);
  std::vector<int> ratios;
  std::vector<TimeGrid> grids;
  for (double dt : micro_dts) {
    const double r = dt / finest;
    const double rounded = std::round(r);
    if (std::abs(r - rounded) > 1e-9 * r) {
      throw ArgumentError("verify_ito_form: micro steps must be integer multiples of the smallest");
    }
    ratios.push_back(static_cast<int>(rounded));
    const TimeGrid g = make_grid(opt.window, dt);
    if (g.last_dt > 0.0 || fine_grid.last_dt > 0.0) {
      throw ArgumentError("verify_ito_form: window must be a multiple of every micro step");
    }
    grids.push_back(g);
  }

  Vec b(n);
  Mat sigma(n, n);
  model.drift(0.0, y, b);
  model.diffusion(0.0, y, sigma);
  const Mat a = sigma * sigma.transpose();

  const std::size_t nd = micro_dts.size();
  std::vector<double> sups(opt.paths * nd);
  std::vector<ItoCheckResult> results(nd);
  parallel_for_blocks(opt.paths, opt.threads, 4, [&](std::size_t begin, std::size_t end) {
    IncrementPath fine, coarse;
    for (std::size_t p = begin; p < end; ++p) {
      path_increments({opt.seed, p, StreamPurpose::kIncrement}, fine_grid, n, fine);
      for (std::size_t j = 0; j < nd; ++j) {
        aggregate_increments(fine, ratios[j], coarse);
        sups[p * nd + j] = detail::ito_path_gap(model, y, b, sigma, a, coarse, grids[j], opt,
                                                p == 0 ? &results[j].curve : nullptr);
      }
    }
  });
  std::vector<double> col(opt.paths);
  for (std::size_t j = 0; j < nd; ++j) {
    for (std::size_t p = 0; p < opt.paths; ++p) col[p] = sups[p * nd + j];
    const auto s = summarize(col);
    results[j].max_discrepancy = s.mean;
    results[j].ci_half_width = s.ci_half_width;
  }
  return results;
}

/// Simulates Z_t = b(y) t + sigma(y) W_t on micro-steps and, with the same
/// increments, integrates f(Z) in its Ito form using b* and sigma*. Reports how
/// far the integral form drifts from f(Z_t).
inline ItoCheckResult verify_ito_form(const SdeModel& model, const Vec& y,
                                      const ItoCheckOptions& opt) {
  return ito_discrepancy_curve(model, y, {opt.micro_dt}, opt).front();
}

}  // namespace tamed_sde
