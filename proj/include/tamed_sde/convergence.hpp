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
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace tamed_sde {

enum class ErrorMode { kWeak, kStrong };

inline const char* mode_name(ErrorMode m) { return m == ErrorMode::kWeak ? "weak" : "strong"; }

enum class Reference {
  /// Tamed path on the fine grid delta_ref driven by the same Brownian path.
  kCoupled,
  /// Tamed path on the fine grid driven by independent increments.
  kIndependent,
  /// Known value of E h(X_T) (weak mode only).
  kAnalyticMean,
  /// Exact solution as a function of (x0, T, W_T).
  kExactPath,
};

struct ConvergenceRow {
  double delta = 0.0;
  double error = 0.0;
  double ci_half_width = 0.0;
  std::size_t diverged = 0;
};

struct SlopeFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r_squared = 0.0;
  std::size_t rows_used = 0;
  std::vector<std::string> warnings;
};

/// OLS of log error on log delta. Rows with error <= 0 are dropped with a
/// warning; at least two usable rows are required.
inline SlopeFit fit_slope(const std::vector<ConvergenceRow>& rows) {
  SlopeFit fit;
  std::vector<double> d, e;
  for (const auto& r : rows) {
    if (!(r.error > 0.0) || !(r.delta > 0.0)) {
      std::ostringstream os;
      os << "row delta=" << r.delta << " dropped: non-positive error " << r.error;
      fit.warnings.push_back(os.str());
      continue;
    }
    d.push_back(r.delta);
    e.push_back(r.error);
  }
  if (d.size() < 2) throw ArgumentError("fit_slope: need at least two rows with positive error");
  const LineFit lf = loglog_fit(d, e);
  fit.slope = lf.slope;
  fit.intercept = lf.intercept;
  fit.r_squared = lf.r_squared;
  fit.rows_used = d.size();
  return fit;
}

struct ConvergenceReport {
  std::vector<ConvergenceRow> rows;
  SlopeFit fit;
  bool noise_dominated = false;
  std::string scheme;
  std::string mode;
  std::string model;
  std::string observable;
  std::size_t paths = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> warnings;
};

struct CurveOptions {
  Scheme scheme = Scheme::kTamed;
  ErrorMode mode = ErrorMode::kWeak;
  /// Test function for weak mode.
  std::function<double(const Vec&)> h;
  std::string h_name = "h";
  Vec x0;
  double T = 1.0;
  std::vector<double> deltas;
  Reference reference = Reference::kCoupled;
  /// Fine grid for coupled references; 0 means min(deltas) / 16.
  double delta_ref = 0.0;
  std::optional<double> analytic_mean;
  std::function<Vec(const Vec&, double, const Vec&)> exact_solution;
  double q_prime = 3.0;
  std::size_t paths = 10000;
  std::uint64_t seed = 0;
  int threads = 0;
};

namespace detail {

inline int exact_ratio(double coarse, double fine, const char* what) {
  const double r = coarse / fine;
  const double rounded = std::round(r);
  if (rounded < 1.0 || std::abs(r - rounded) > 1e-9 * r) {
    throw ArgumentError(std::string("error_curve: ") + what + " is not an integer multiple");
  }
  return static_cast<int>(rounded);
}

inline void finish_report(ConvergenceReport& report) {
  if (report.rows.size() >= 2) {
    bool any_positive = false;
    for (const auto& r : report.rows) any_positive = any_positive || r.error > 0.0;
    if (any_positive) {
      try {
        report.fit = fit_slope(report.rows);
        for (const auto& w : report.fit.warnings) report.warnings.push_back(w);
      } catch (const ArgumentError& e) {
        report.warnings.emplace_back(e.what());
      }
    }
  }
  if (!report.rows.empty()) {
    const auto& smallest = *std::min_element(
        report.rows.begin(), report.rows.end(),
        [](const ConvergenceRow& a, const ConvergenceRow& b) { return a.delta < b.delta; });
    report.noise_dominated = smallest.ci_half_width > smallest.error;
  }
}

}  // namespace detail

/// Weak or strong error of `scheme` at each delta against the chosen reference.
/// Every path p uses the fine increments of stream (seed, p); coarse grids
/// aggregate them, so all deltas see the same Brownian path.
inline ConvergenceReport error_curve(const SdeModel& model, const CurveOptions& opt) {
  if (opt.deltas.empty()) throw ArgumentError("error_curve: empty delta list");
  if (opt.x0.size() != model.dim()) throw ArgumentError("error_curve: x0 dimension mismatch");
  if (opt.paths < 2) throw ArgumentError("error_curve: need at least two paths");
  if (opt.mode == ErrorMode::kWeak && !opt.h) throw ArgumentError("error_curve: weak mode needs h");
  for (std::size_t i = 1; i < opt.deltas.size(); ++i) {
    if (!(opt.deltas[i] < opt.deltas[i - 1])) {
      throw ArgumentError("error_curve: deltas must be strictly decreasing");
    }
  }
  if (opt.reference == Reference::kAnalyticMean &&
      (opt.mode != ErrorMode::kWeak || !opt.analytic_mean)) {
    throw ArgumentError("error_curve: analytic-mean reference needs weak mode and a value");
  }
  if (opt.reference == Reference::kExactPath && !opt.exact_solution) {
    throw ArgumentError("error_curve: exact-path reference needs an exact solution");
  }
  if (opt.reference == Reference::kIndependent && opt.mode != ErrorMode::kWeak) {
    throw ArgumentError("error_curve: an independent reference only makes sense in weak mode");
  }

  const double min_delta = opt.deltas.back();
  const double delta_ref = opt.delta_ref > 0.0 ? opt.delta_ref : min_delta / 16.0;
  ConvergenceReport report;
  report.scheme = scheme_name(opt.scheme);
  report.mode = mode_name(opt.mode);
  report.model = model.name();
  report.observable = opt.mode == ErrorMode::kWeak ? opt.h_name : "|x|";
  report.paths = opt.paths;
  report.seed = opt.seed;
  const bool fine_ref = opt.reference == Reference::kCoupled || opt.reference == Reference::kIndependent;
  if (fine_ref && delta_ref > min_delta / 8.0 * (1.0 + 1e-12)) {
    report.warnings.emplace_back("delta_ref is coarser than min(deltas)/8");
  }

  const int n = model.dim();
  const TimeGrid fine_grid = make_grid(opt.T, delta_ref);
  if (fine_grid.last_dt > 0.0) throw ArgumentError("error_curve: T must be a multiple of delta_ref");
  std::vector<int> ratios;
  for (double d : opt.deltas) ratios.push_back(detail::exact_ratio(d, delta_ref, "delta / delta_ref"));
  for (std::size_t j = 0; j < ratios.size(); ++j) {
    if (fine_grid.full_steps % ratios[j] != 0) {
      throw ArgumentError("error_curve: T must be a multiple of every delta");
    }
  }

  const std::size_t nd = opt.deltas.size();
  // Per path and delta: the scheme statistic and the paired difference.
  std::vector<double> stat(opt.paths * nd), ref_stat(opt.paths);
  std::vector<char> ok(opt.paths * nd), ref_ok(opt.paths);

  TamedSchemeConfig ref_cfg;
  ref_cfg.delta = delta_ref < 1.0 ? delta_ref : 0.5;
  ref_cfg.q_prime = opt.q_prime;

  parallel_for_blocks(opt.paths, opt.threads, 16, [&](std::size_t begin, std::size_t end) {
    IncrementPath fine, coarse, aux;
    for (std::size_t p = begin; p < end; ++p) {
      path_increments({opt.seed, p, StreamPurpose::kIncrement}, fine_grid, n, fine);

      Vec ref_x;
      bool ref_good = true;
      if (fine_ref) {
        const IncrementPath* drive = &fine;
        if (opt.reference == Reference::kIndependent) {
          path_increments({opt.seed, p, StreamPurpose::kAuxiliary}, fine_grid, n, aux);
          drive = &aux;
        }
        PathState ref;
        ref.x = opt.x0;
        integrate_path(Scheme::kTamed, model, ref_cfg, nullptr, fine_grid, *drive, ref);
        ref_x = ref.x;
        ref_good = !ref.diverged;
      } else if (opt.reference == Reference::kExactPath) {
        Vec w = Vec::Zero(n);
        for (int k = 0; k < fine.steps(); ++k) {
          for (int i = 0; i < n; ++i) w(i) += fine.row(k)[i];
        }
        ref_x = opt.exact_solution(opt.x0, opt.T, w);
      }
      if (opt.mode == ErrorMode::kWeak && ref_x.size() > 0) ref_stat[p] = opt.h(ref_x);
      ref_ok[p] = ref_good;

      for (std::size_t j = 0; j < nd; ++j) {
        aggregate_increments(fine, ratios[j], coarse);
        TimeGrid grid;
        grid.delta = opt.deltas[j];
        grid.full_steps = coarse.steps();
        TamedSchemeConfig cfg;
        cfg.delta = opt.deltas[j];
        cfg.q_prime = opt.q_prime;
        PathState st;
        st.x = opt.x0;
        integrate_path(opt.scheme, model, cfg, nullptr, grid, coarse, st);
        const std::size_t idx = p * nd + j;
        ok[idx] = !st.diverged && ref_good;
        if (opt.mode == ErrorMode::kStrong) {
          stat[idx] = (st.x - ref_x).norm();
        } else if (opt.reference == Reference::kCoupled || opt.reference == Reference::kExactPath) {
          stat[idx] = opt.h(st.x) - ref_stat[p];
        } else {
          stat[idx] = opt.h(st.x);
        }
      }
    }
  });

  MeanCi independent_ref;
  if (opt.reference == Reference::kIndependent) independent_ref = summarize_masked(ref_stat, ref_ok);

  for (std::size_t j = 0; j < nd; ++j) {
    std::vector<double> v(opt.paths);
    std::vector<char> keep(opt.paths);
    for (std::size_t p = 0; p < opt.paths; ++p) {
      v[p] = stat[p * nd + j];
      keep[p] = ok[p * nd + j];
    }
    const MeanCi s = summarize_masked(v, keep);
    ConvergenceRow row{opt.deltas[j]};
    row.diverged = opt.paths - s.count;
    if (opt.mode == ErrorMode::kStrong) {
      row.error = s.mean;
      row.ci_half_width = s.ci_half_width;
    } else if (opt.reference == Reference::kAnalyticMean) {
      row.error = std::abs(s.mean - *opt.analytic_mean);
      row.ci_half_width = s.ci_half_width;
    } else if (opt.reference == Reference::kIndependent) {
      row.error = std::abs(s.mean - independent_ref.mean);
      row.ci_half_width = std::hypot(s.ci_half_width, independent_ref.ci_half_width);
    } else {
      row.error = std::abs(s.mean);
      row.ci_half_width = s.ci_half_width;
    }
    report.rows.push_back(row);
  }
  detail::finish_report(report);
  return report;
}

/// |x0| |(1 - theta delta)^{T/delta} - exp(-theta T)|: the exact weak error of
/// Euler-Maruyama for the OU mean, including a final partial step.
inline double ou_em_weak_error(double theta, double x0, double T, double delta) {
  const TimeGrid grid = make_grid(T, delta);
  double factor = std::pow(1.0 - theta * delta, grid.full_steps);
  if (grid.last_dt > 0.0) factor *= 1.0 - theta * grid.last_dt;
  return std::abs(x0) * std::abs(factor - std::exp(-theta * T));
}

/// Closed-form report for the OU mean under Euler-Maruyama (no Monte Carlo).
inline ConvergenceReport ou_closed_form_curve(double theta, double x0, double T,
                                              const std::vector<double>& deltas) {
  ConvergenceReport report;
  report.scheme = "em";
  report.mode = "weak";
  report.model = "ou";
  report.observable = "x";
  for (double d : deltas) report.rows.push_back({d, ou_em_weak_error(theta, x0, T, d), 0.0});
  detail::finish_report(report);
  return report;
}

// ---------------------------------------------------------------------------
// Divergence and exponential-moment probes

struct DivergenceReport {
  double fraction = 0.0;
  std::size_t blown = 0;
  std::size_t paths = 0;
  /// histogram[k] = paths whose first passage happened at step k + 1.
  std::vector<std::size_t> histogram;
};

struct DivergenceOptions {
  Scheme scheme = Scheme::kEulerMaruyama;
  double delta = 0.5;
  int steps = 20;
  double blow_threshold = 1e10;
  double q_prime = 3.0;
  std::size_t paths = 1000;
  std::uint64_t seed = 0;
  int threads = 0;
};

/// Fraction of paths with |x| > blow_threshold (or non-finite) within `steps` steps.
inline DivergenceReport divergence_probe(const SdeModel& model, const Vec& x0,
                                         const DivergenceOptions& opt) {
  if (opt.steps < 1) throw ArgumentError("divergence_probe: steps must be >= 1");
  if (!(opt.blow_threshold > 0.0)) throw ArgumentError("divergence_probe: threshold must be > 0");
  if (x0.size() != model.dim()) throw ArgumentError("divergence_probe: x0 dimension mismatch");
  TamedSchemeConfig cfg;
  cfg.delta = opt.delta;
  cfg.q_prime = opt.q_prime;
  if (opt.scheme == Scheme::kTamed) cfg.validate();
  TimeGrid grid;
  grid.delta = opt.delta;
  grid.full_steps = opt.steps;
  const int n = model.dim();

  std::vector<int> first(opt.paths, 0);
  parallel_for_blocks(opt.paths, opt.threads, 64, [&](std::size_t begin, std::size_t end) {
    IncrementPath inc;
    for (std::size_t p = begin; p < end; ++p) {
      path_increments({opt.seed, p, StreamPurpose::kIncrement}, grid, n, inc);
      PathState st;
      st.x = x0;
      integrate_path(opt.scheme, model, cfg, nullptr, grid, inc, st, [&](int k, const PathState& s) {
        if (first[p] == 0 && (s.diverged || !(s.x.norm() <= opt.blow_threshold))) first[p] = k;
      });
    }
  });

  DivergenceReport report;
  report.paths = opt.paths;
  report.histogram.assign(opt.steps, 0);
  for (int k : first) {
    if (k > 0) {
      ++report.blown;
      ++report.histogram[k - 1];
    }
  }
  report.fraction = double(report.blown) / double(opt.paths);
  return report;
}

struct MomentRow {
  double delta = 0.0;
  MeanCi moment;
  std::size_t diverged = 0;
};

struct MomentProbe {
  double initial = 0.0;
  std::vector<MomentRow> rows;
};

/// E exp(eps U(Y_T)) for each delta, and exp(eps U(x0)).
inline MomentProbe exponential_moment_probe(const SdeModel& model, Scheme scheme,
                                            const std::function<double(const Vec&)>& U, double eps,
                                            const Vec& x0, double T,
                                            const std::vector<double>& deltas, std::size_t paths,
                                            std::uint64_t seed, int threads = 0,
                                            double q_prime = 3.0) {
  MomentProbe probe;
  probe.initial = std::exp(eps * U(x0));
  for (double d : deltas) {
    EnsembleOptions eo;
    eo.scheme = scheme;
    eo.x0 = x0;
    eo.T = T;
    eo.cfg.delta = d;
    eo.cfg.q_prime = q_prime;
    eo.paths = paths;
    eo.seed = seed;
    eo.threads = threads;
    const auto ens = simulate_ensemble(model, eo);
    MomentRow row{d};
    row.moment = ens.summarize_terminal([&](const PathState& s) { return std::exp(eps * U(s.x)); });
    row.diverged = ens.diverged_count;
    probe.rows.push_back(row);
  }
  return probe;
}

// ---------------------------------------------------------------------------
// Output

inline void write_convergence_csv(std::ostream& os, const ConvergenceReport& r) {
  os << "delta,error,ci,scheme,mode,model,h,N,seed\n" << std::setprecision(17);
  for (const auto& row : r.rows) {
    os << row.delta << ',' << row.error << ',' << row.ci_half_width << ',' << r.scheme << ','
       << r.mode << ',' << r.model << ',' << r.observable << ',' << r.paths << ',' << r.seed
       << '\n';
  }
}

/// Log-log plot of the rows with the fitted line.
inline void write_convergence_svg(std::ostream& os, const ConvergenceReport& r) {
  const double w = 480, h = 360, m = 50;
  std::vector<double> lx, ly;
  for (const auto& row : r.rows) {
    if (row.error > 0.0) {
      lx.push_back(std::log10(row.delta));
      ly.push_back(std::log10(row.error));
    }
  }
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (lx.size() >= 1) {
    auto [xmin, xmax] = std::minmax_element(lx.begin(), lx.end());
    auto [ymin, ymax] = std::minmax_element(ly.begin(), ly.end());
    const double x0 = *xmin - 0.1, x1 = *xmax + 0.1, y0 = *ymin - 0.1, y1 = *ymax + 0.1;
    auto px = [&](double v) { return m + (v - x0) / (x1 - x0) * (w - 2 * m); };
    auto py = [&](double v) { return h - m - (v - y0) / (y1 - y0) * (h - 2 * m); };
    os << "<line x1=\"" << m << "\" y1=\"" << h - m << "\" x2=\"" << w - m << "\" y2=\"" << h - m
       << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << m << "\" y1=\"" << m << "\" x2=\"" << m << "\" y2=\"" << h - m
       << "\" stroke=\"black\"/>\n";
    for (std::size_t i = 0; i < lx.size(); ++i) {
      os << "<circle cx=\"" << px(lx[i]) << "\" cy=\"" << py(ly[i]) << "\" r=\"4\" fill=\"steelblue\"/>\n";
    }
    if (r.fit.rows_used >= 2) {
      const double a = r.fit.intercept / std::log(10.0), s = r.fit.slope;
      const double ya = a + s * *xmin;
      const double yb = a + s * *xmax;
      os << "<line x1=\"" << px(*xmin) << "\" y1=\"" << py(ya) << "\" x2=\"" << px(*xmax)
         << "\" y2=\"" << py(yb) << "\" stroke=\"firebrick\"/>\n";
    }
    os << "<text x=\"" << m << "\" y=\"" << m / 2 << "\" font-family=\"sans-serif\" font-size=\"14\">"
       << r.model << " " << r.scheme << " " << r.mode << " slope " << std::setprecision(4)
       << r.fit.slope << "</text>\n";
  }
  os << "</svg>\n";
}

}  // namespace tamed_sde
