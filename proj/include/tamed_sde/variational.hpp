#pragma once

#include "tamed_sde/errors.hpp"
#include "tamed_sde/integrators.hpp"
#include "tamed_sde/linalg.hpp"
#include "tamed_sde/model.hpp"
#include "tamed_sde/parallel.hpp"
#include "tamed_sde/random.hpp"
#include "tamed_sde/stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

namespace tamed_sde {

/// Joint state of the flow and its derivatives in the initial condition.
/// J column i = dX/dx_i. H[m](i, j) = d^2 X_m / dx_i dx_j.
struct VariationalState {
  double t = 0.0;
  Vec x;
  Mat J;
  Tensor3 H;
  int order = 1;
  bool diverged = false;

  static VariationalState start(const Vec& x0, int order, double t0 = 0.0) {
    if (order < 1 || order > 2) throw ArgumentError("VariationalState: order must be 1 or 2");
    const int n = static_cast<int>(x0.size());
    VariationalState s;
    s.t = t0;
    s.x = x0;
    s.J = Mat::Identity(n, n);
    s.order = order;
    if (order == 2) {
      s.H.resize(n, n, n);
      s.H.set_zero();
    }
    return s;
  }

  /// Second variation in directions (u, v): sum_ij u_i v_j H[.](i, j).
  Vec second(const Vec& u, const Vec& v) const {
    const int n = static_cast<int>(x.size());
    Vec out(n);
    for (int m = 0; m < n; ++m) out(m) = u.dot(H[m] * v);
    return out;
  }
};

/// Scratch buffers for variation_step; keeps the step allocation-free.
struct VariationWorkspace {
  Vec b;
  Mat sigma, jb, step_jac;
  Tensor3 sjac, bhess;
  Tensor4 shess;
};

/// One Euler-Maruyama step of (x, J[, H]) with increment dw over dt.
inline void variation_step(VariationalState& s, std::span<const double> dw, const SdeModel& model,
                           double dt, VariationWorkspace& ws) {
  if (s.diverged) return;
  const int n = model.dim();
  if (s.order == 2 && model.smoothness() < 2) {
    throw ConfigurationError(model.name() + ": second variation needs coefficient Hessians");
  }
  const Eigen::Map<const Eigen::VectorXd> dw_vec(dw.data(), n);
  model.drift(s.t, s.x, ws.b);
  model.diffusion(s.t, s.x, ws.sigma);
  model.drift_jacobian(s.t, s.x, ws.jb);
  model.diffusion_jacobian(s.t, s.x, ws.sjac);

  // Jacobian of the one-step map x -> x + b dt + sigma dW.
  ws.step_jac = Mat::Identity(n, n) + ws.jb * dt;
  for (int k = 0; k < n; ++k) ws.step_jac.col(k) += ws.sjac[k] * dw_vec;

  if (s.order == 2) {
    model.drift_hessian(s.t, s.x, ws.bhess);
    model.diffusion_hessian(s.t, s.x, ws.shess);
    Tensor3 next(n, n, n);
    // (D^2 map)[J_i, J_j] plus the step Jacobian applied to H_ij.
    for (int i = 0; i < n; ++i) {
      for (int j = i; j < n; ++j) {
        Vec hij(n);
        for (int m = 0; m < n; ++m) hij(m) = s.H[m](i, j);
        Vec v = ws.step_jac * hij;
        const Vec ji = s.J.col(i), jj = s.J.col(j);
        for (int m = 0; m < n; ++m) v(m) += ji.dot(ws.bhess[m] * jj) * dt;
        for (int k = 0; k < n; ++k) {
          for (int l = 0; l < n; ++l) {
            const double w = ji(k) * jj(l);
            if (w != 0.0) v += w * (ws.shess(k, l) * dw_vec);
          }
        }
        for (int m = 0; m < n; ++m) {
          next[m](i, j) = v(m);
          next[m](j, i) = v(m);
        }
      }
    }
    s.H = next;
  }
  s.J = ws.step_jac * s.J;
  s.x += ws.b * dt + ws.sigma * dw_vec;
  s.t += dt;
  if (!s.x.allFinite() || s.x.norm() > kDivergenceRadius || !s.J.allFinite()) s.diverged = true;
}

inline VariationalState variation_step(VariationalState s, const Vec& dw, const SdeModel& model,
                                       double dt) {
  VariationWorkspace ws;
  variation_step(s, {dw.data(), std::size_t(dw.size())}, model, dt, ws);
  return s;
}

/// Integrates the joint system over `increments`; observer(k, state) after each step.
template <typename Observer>
void integrate_variational(const SdeModel& model, VariationalState& s, const TimeGrid& grid,
                           const IncrementPath& increments, Observer&& observer) {
  VariationWorkspace ws;
  for (int k = 0; k < grid.steps(); ++k) {
    variation_step(s, increments.row(k), model, grid.dt(k), ws);
    observer(k + 1, s);
  }
}

// ---------------------------------------------------------------------------
// Monte-Carlo probes

struct ProbeRow {
  double parameter = 0.0;  // r for difference quotients, gap for the Hoelder probe
  MeanCi estimate;
  std::size_t diverged = 0;
};

struct ProbeOptions {
  double T = 1.0;
  double delta = 1e-3;
  std::size_t paths = 10000;
  std::uint64_t seed = 0;
  int threads = 0;
};

/// Per r: E sup_t |(X^{x + r kappa} - X^x) / r - J kappa| on the grid, with all
/// three processes driven by the same increments.
inline std::vector<ProbeRow> difference_quotient_error(const SdeModel& model, const Vec& x,
                                                       const Vec& kappa,
                                                       const std::vector<double>& r_list,
                                                       const ProbeOptions& opt) {
  if (x.size() != model.dim() || kappa.size() != model.dim()) {
    throw ArgumentError("difference_quotient_error: dimension mismatch");
  }
  if (r_list.empty()) throw ArgumentError("difference_quotient_error: empty r list");
  for (double r : r_list) {
    if (!(r > 0.0)) throw ArgumentError("difference_quotient_error: r must be > 0");
  }
  const int n = model.dim();
  const std::size_t nr = r_list.size();
  const TimeGrid grid = make_grid(opt.T, opt.delta);
  std::vector<double> sups(opt.paths * nr);
  std::vector<char> ok(opt.paths * nr);

  parallel_for_blocks(opt.paths, opt.threads, 16, [&](std::size_t begin, std::size_t end) {
    IncrementPath inc;
    VariationWorkspace ws;
    const TamedSchemeConfig cfg;
    const double inf = std::numeric_limits<double>::infinity();
    for (std::size_t p = begin; p < end; ++p) {
      path_increments({opt.seed, p, StreamPurpose::kIncrement}, grid, n, inc);
      VariationalState base = VariationalState::start(x, 1);
      std::vector<PathState> pert(nr);
      for (std::size_t j = 0; j < nr; ++j) pert[j].x = x + r_list[j] * kappa;
      std::vector<double> sup(nr, 0.0);
      for (int k = 0; k < grid.steps(); ++k) {
        variation_step(base, inc.row(k), model, grid.dt(k), ws);
        const Vec jk = base.J * kappa;
        for (std::size_t j = 0; j < nr; ++j) {
          advance(Scheme::kEulerMaruyama, pert[j], inc.row(k), grid.dt(k), model, cfg, inf);
          const double gap = ((pert[j].x - base.x) / r_list[j] - jk).norm();
          sup[j] = std::max(sup[j], gap);
        }
      }
      for (std::size_t j = 0; j < nr; ++j) {
        sups[p * nr + j] = sup[j];
        ok[p * nr + j] = !(base.diverged || pert[j].diverged) && std::isfinite(sup[j]);
      }
    }
  });

  std::vector<ProbeRow> rows;
  for (std::size_t j = 0; j < nr; ++j) {
    std::vector<double> v;
    ProbeRow row{r_list[j]};
    for (std::size_t p = 0; p < opt.paths; ++p) {
      if (ok[p * nr + j]) {
        v.push_back(sups[p * nr + j]);
      } else {
        ++row.diverged;
      }
    }
    row.estimate = summarize(v);
    rows.push_back(row);
  }
  return rows;
}

struct SupMomentResult {
  MeanCi estimate;
  /// Share of the estimate contributed by the largest 1% of path values.
  double tail_share = 0.0;
  std::size_t diverged = 0;
  /// More than 0.1% of paths diverged.
  bool unreliable = false;
};

/// E sup_t |d^(kappa) X_t|^k on the grid. `directions` holds zero (the state
/// itself), one (first variation) or two (second variation) unit vectors.
inline SupMomentResult sup_moment(const SdeModel& model, const Vec& x,
                                  const std::vector<Vec>& directions, double k,
                                  const ProbeOptions& opt) {
  if (!(k > 0.0)) throw ArgumentError("sup_moment: k must be > 0");
  if (directions.size() > 2) throw ArgumentError("sup_moment: at most two directions");
  const int n = model.dim();
  for (const auto& d : directions) {
    if (d.size() != n) throw ArgumentError("sup_moment: direction dimension mismatch");
  }
  const int order = directions.size() == 2 ? 2 : 1;
  const TimeGrid grid = make_grid(opt.T, opt.delta);
  std::vector<double> values(opt.paths);
  std::vector<char> ok(opt.paths);

  auto measure = [&](const VariationalState& s) {
    if (directions.empty()) return s.x.norm();
    if (directions.size() == 1) return (s.J * directions[0]).norm();
    return s.second(directions[0], directions[1]).norm();
  };

  parallel_for_blocks(opt.paths, opt.threads, 16, [&](std::size_t begin, std::size_t end) {
    IncrementPath inc;
    for (std::size_t p = begin; p < end; ++p) {
      path_increments({opt.seed, p, StreamPurpose::kIncrement}, grid, n, inc);
      VariationalState s = VariationalState::start(x, order);
      double sup = measure(s);
      integrate_variational(model, s, grid, inc, [&](int, const VariationalState& st) {
        if (!st.diverged) sup = std::max(sup, measure(st));
      });
      values[p] = std::pow(sup, k);
      ok[p] = !s.diverged && std::isfinite(values[p]);
    }
  });

  SupMomentResult result;
  std::vector<double> kept;
  for (std::size_t p = 0; p < opt.paths; ++p) {
    if (ok[p]) {
      kept.push_back(values[p]);
    } else {
      ++result.diverged;
    }
  }
  result.estimate = summarize(kept);
  result.unreliable = double(result.diverged) > 1e-3 * double(opt.paths);
  if (!kept.empty()) {
    std::vector<double> sorted = kept;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t top = std::max<std::size_t>(1, sorted.size() / 100);
    const double total = pairwise_sum(sorted);
    const double tail = pairwise_sum(std::span<const double>(sorted).last(top));
    result.tail_share = total > 0.0 ? tail / total : 0.0;
  }
  return result;
}

struct HolderProbe {
  std::vector<ProbeRow> rows;
  LineFit fit;
};

/// E sup_{u in [s, s+g]} |D X_u - D X_s|^k for each gap g, and the log-log
/// slope in g. D is the identity (order 0), J (order 1) or H (order 2),
/// measured in the Frobenius norm. Gaps must be multiples of delta.
inline HolderProbe holder_in_time_probe(const SdeModel& model, const Vec& x, int order, double k,
                                        double s, const std::vector<double>& gaps,
                                        const ProbeOptions& opt) {
  if (order < 0 || order > 2) throw ArgumentError("holder_in_time_probe: order must be 0, 1 or 2");
  if (gaps.size() < 2) throw ArgumentError("holder_in_time_probe: need at least two gaps");
  if (!(k > 0.0) || !(s >= 0.0)) throw ArgumentError("holder_in_time_probe: need k > 0, s >= 0");
  const int n = model.dim();
  const int s_steps = make_grid(s, opt.delta).full_steps;
  if (std::abs(s_steps * opt.delta - s) > 1e-9 * std::max(1.0, s)) {
    throw ArgumentError("holder_in_time_probe: s must be a multiple of delta");
  }
  std::vector<int> gap_steps;
  for (double g : gaps) {
    const TimeGrid gg = make_grid(g, opt.delta);
    if (!(g > 0.0) || gg.last_dt > 0.0 || gg.full_steps < 1) {
      throw ArgumentError("holder_in_time_probe: gaps must be positive multiples of delta");
    }
    gap_steps.push_back(gg.full_steps);
  }
  const int max_gap = *std::max_element(gap_steps.begin(), gap_steps.end());
  TimeGrid grid;
  grid.delta = opt.delta;
  grid.full_steps = s_steps + max_gap;

  const std::size_t ng = gaps.size();
  std::vector<double> values(opt.paths * ng);
  std::vector<char> ok(opt.paths);

  auto flat = [&](const VariationalState& st) {
    std::vector<double> out;
    if (order == 0) {
      out.assign(st.x.data(), st.x.data() + n);
    } else if (order == 1) {
      out.assign(st.J.data(), st.J.data() + n * n);
    } else {
      for (int m = 0; m < n; ++m) out.insert(out.end(), st.H[m].data(), st.H[m].data() + n * n);
    }
    return out;
  };

  parallel_for_blocks(opt.paths, opt.threads, 16, [&](std::size_t begin, std::size_t end) {
    IncrementPath inc;
    for (std::size_t p = begin; p < end; ++p) {
      path_increments({opt.seed, p, StreamPurpose::kIncrement}, grid, n, inc);
      VariationalState st = VariationalState::start(x, order == 2 ? 2 : 1);
      std::vector<double> anchor = flat(st);
      double running = 0.0;
      std::vector<double> sup_at(max_gap + 1, 0.0);
      integrate_variational(model, st, grid, inc, [&](int step, const VariationalState& cur) {
        if (step == s_steps) {
          anchor = flat(cur);
        } else if (step > s_steps) {
          const auto now = flat(cur);
          double d2 = 0.0;
          for (std::size_t i = 0; i < now.size(); ++i) d2 += (now[i] - anchor[i]) * (now[i] - anchor[i]);
          running = std::max(running, std::sqrt(d2));
          sup_at[step - s_steps] = running;
        }
      });
      ok[p] = !st.diverged;
      for (std::size_t j = 0; j < ng; ++j) values[p * ng + j] = std::pow(sup_at[gap_steps[j]], k);
    }
  });

  HolderProbe probe;
  std::vector<double> xs, ys;
  for (std::size_t j = 0; j < ng; ++j) {
    ProbeRow row{gaps[j]};
    std::vector<double> v;
    for (std::size_t p = 0; p < opt.paths; ++p) {
      if (ok[p]) {
        v.push_back(values[p * ng + j]);
      } else {
        ++row.diverged;
      }
    }
    row.estimate = summarize(v);
    if (row.estimate.mean > 0.0) {
      xs.push_back(gaps[j]);
      ys.push_back(row.estimate.mean);
    }
    probe.rows.push_back(row);
  }
  if (xs.size() >= 2) probe.fit = loglog_fit(xs, ys);
  return probe;
}

}  // namespace tamed_sde
