#pragma once

#include "tamed_sde/tamed_sde.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

namespace tamed_sde::cli {

inline constexpr int kExitPass = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitCheckFailed = 2;

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names = {"simulate",    "converge",  "lyapunov", "fk",
                                                 "variational", "ito-check", "diverge"};
  return names;
}

struct ExperimentConfig {
  std::string command;
  std::string model = "ou";
  std::vector<std::string> params;
  std::string scheme = "tamed";
  double delta = 0.01;
  std::string deltas = "2^-3..2^-8";
  double q_prime = 3.0;
  double T = 1.0;
  std::string x0;
  std::size_t N = 10000;
  std::uint64_t seed = 0;
  int threads = 0;
  std::string out = ".";
  bool plot = false;
  bool deterministic = false;

  // simulate
  std::size_t dump = 10;
  // converge
  std::string mode = "weak";
  std::string observable = "sumsq";
  std::string ref = "coupled";
  double delta_ref = 0.0;
  // lyapunov
  std::string check = "certificate";
  std::string box;
  std::size_t points = 100000;
  std::string radii = "40,80,160,320";
  // fk
  std::string quantity;
  double t = 0.0;
  double source = 0.0;
  double discount = 0.0;
  double hx = 0.05;
  double ht = 0.02;
  double fd_h = 1e-3;
  // variational
  int order = 1;
  double k = 2.0;
  std::string r_list = "1e-2,5e-3,2.5e-3,1e-4";
  std::string gaps = "2^-4..2^-9";
  std::string kappa;
  // ito-check
  std::string y;
  double window = 0.1;
  std::string micro_dts = "1e-3,5e-4,2.5e-4";
  std::size_t ito_paths = 64;
  // diverge
  int steps = 20;
  double blow = 1e10;
};

// ---------------------------------------------------------------------------
// Value parsers

inline double parse_number(const std::string& s) {
  const auto caret = s.find('^');
  try {
    if (caret != std::string::npos) {
      return std::pow(std::stod(s.substr(0, caret)), std::stod(s.substr(caret + 1)));
    }
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ArgumentError("not a number: '" + s + "'");
  }
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

/// "2^-3..2^-8" (powers of two between the exponents), "a,b,c" or a single value.
inline std::vector<double> parse_delta_list(const std::string& s) {
  const auto dots = s.find("..");
  if (dots != std::string::npos && s.find('^') != std::string::npos) {
    const std::string lo = s.substr(0, dots), hi = s.substr(dots + 2);
    const auto c1 = lo.find('^'), c2 = hi.find('^');
    if (c1 == std::string::npos || c2 == std::string::npos) {
      throw ArgumentError("delta range must look like 2^-3..2^-8");
    }
    const double base = parse_number(lo.substr(0, c1));
    if (base != parse_number(hi.substr(0, c2))) throw ArgumentError("delta range: bases differ");
    const int e1 = static_cast<int>(parse_number(lo.substr(c1 + 1)));
    const int e2 = static_cast<int>(parse_number(hi.substr(c2 + 1)));
    std::vector<double> out;
    const int step = e2 >= e1 ? 1 : -1;
    for (int e = e1;; e += step) {
      out.push_back(std::pow(base, e));
      if (e == e2) break;
    }
    return out;
  }
  std::vector<double> out;
  for (const auto& item : split(s, ',')) out.push_back(parse_number(item));
  if (out.empty()) throw ArgumentError("empty list: '" + s + "'");
  return out;
}

inline Vec parse_vector(const std::string& s, int dim) {
  const auto items = split(s, ',');
  if (items.size() == 1 && dim > 1) return Vec::Constant(dim, parse_number(items[0]));
  if (static_cast<int>(items.size()) != dim) {
    throw ArgumentError("expected " + std::to_string(dim) + " comma-separated values, got '" + s + "'");
  }
  Vec v(dim);
  for (int i = 0; i < dim; ++i) v(i) = parse_number(items[i]);
  return v;
}

/// "lo..hi" applied to every coordinate.
inline DomainBox parse_box(const std::string& s, int dim) {
  const auto dots = s.find("..");
  if (dots == std::string::npos) throw ArgumentError("box must look like lo..hi, got '" + s + "'");
  return DomainBox::cube(dim, parse_number(s.substr(0, dots)), parse_number(s.substr(dots + 2)));
}

inline ModelParams parse_params(const std::vector<std::string>& items) {
  ModelParams out;
  for (const auto& item : items) {
    for (const auto& kv : split(item, ',')) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos || eq == 0) {
        throw ArgumentError("model parameter must be key=value, got '" + kv + "'");
      }
      out[kv.substr(0, eq)] = kv.substr(eq + 1);
    }
  }
  return out;
}

inline Scheme parse_scheme(const std::string& s) {
  if (s == "tamed") return Scheme::kTamed;
  if (s == "em") return Scheme::kEulerMaruyama;
  throw ArgumentError("unknown scheme '" + s + "' (expected tamed or em)");
}

/// Named test functions: x (first coordinate), sumsq (|x|^2), one.
inline ObservableTriple make_observable(const std::string& name, double source = 0.0,
                                        double discount = 0.0) {
  ObservableTriple obs;
  if (name == "x") {
    obs = ObservableTriple::terminal([](const Vec& x) { return x(0); },
                                     [](const Vec& x) -> Vec {
                                       Vec g = Vec::Zero(x.size());
                                       g(0) = 1.0;
                                       return g;
                                     });
  } else if (name == "sumsq") {
    obs = ObservableTriple::terminal([](const Vec& x) { return x.squaredNorm(); },
                                     [](const Vec& x) -> Vec { return 2.0 * x; });
  } else if (name == "one") {
    obs = ObservableTriple::terminal([](const Vec&) { return 1.0; },
                                     [](const Vec& x) -> Vec { return Vec::Zero(x.size()); });
  } else {
    std::string msg = "unknown observable '" + name + "'";
    const auto s = suggest(name, {"x", "sumsq", "one"});
    if (!s.empty()) msg += " (did you mean '" + s.front() + "'?)";
    throw ArgumentError(msg + "; available: x sumsq one");
  }
  if (discount < 0.0) throw ArgumentError("discount rate must be >= 0");
  obs.f = [source](double, const Vec&) { return source; };
  obs.c = [discount](double, const Vec&) { return discount; };
  obs.growth_note = "polynomial";
  return obs;
}

// ---------------------------------------------------------------------------
// Output helpers

class Reporter {
 public:
  Reporter(const ExperimentConfig& cfg, std::ostream& out) : cfg_(cfg), out_(out) {}

  std::ofstream open(const std::string& file) const {
    std::filesystem::create_directories(cfg_.out);
    const auto path = std::filesystem::path(cfg_.out) / file;
    std::ofstream os(path);
    if (!os) throw ArgumentError("cannot write " + path.string());
    if (!cfg_.deterministic) {
      const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
      os << "# generated " << std::put_time(std::gmtime(&now), "%Y-%m-%dT%H:%M:%SZ") << '\n';
    }
    return os;
  }

  std::ostream& log() const { return out_; }

 private:
  const ExperimentConfig& cfg_;
  std::ostream& out_;
};

/// quantity,parameter,value,ci,model,delta,N,seed
struct ReportRow {
  std::string quantity;
  double parameter = 0.0;
  double value = 0.0;
  double ci = 0.0;
};

inline void write_report_csv(std::ostream& os, const std::vector<ReportRow>& rows,
                             const std::string& model, double delta, std::size_t N,
                             std::uint64_t seed) {
  os << "quantity,parameter,value,ci,model,delta,N,seed\n" << std::setprecision(17);
  for (const auto& r : rows) {
    os << r.quantity << ',' << r.parameter << ',' << r.value << ',' << r.ci << ',' << model << ','
       << delta << ',' << N << ',' << seed << '\n';
  }
}

// ---------------------------------------------------------------------------
// Commands

namespace detail {

inline Vec initial_state(const ExperimentConfig& cfg, int dim) {
  return cfg.x0.empty() ? Vec::Ones(dim) : parse_vector(cfg.x0, dim);
}

inline int run_simulate(const ExperimentConfig& cfg, const ModelBundle& b, const Reporter& rep) {
  EnsembleOptions opt;
  opt.scheme = parse_scheme(cfg.scheme);
  opt.x0 = initial_state(cfg, b.model->dim());
  opt.T = cfg.T;
  opt.cfg.delta = cfg.delta;
  opt.cfg.q_prime = cfg.q_prime;
  opt.paths = cfg.N;
  opt.seed = cfg.seed;
  opt.threads = cfg.threads;
  opt.dump_paths = std::min(cfg.dump, cfg.N);
  if (opt.scheme == Scheme::kTamed) {
    for (const auto& w : opt.cfg.validate()) rep.log() << "warning: " << w << '\n';
  }
  const auto result = simulate_ensemble(*b.model, opt);
  auto os = rep.open("trajectory.csv");
  write_trajectory_csv(os, result.trajectories, b.model->dim());
  rep.log() << std::setprecision(10) << "paths " << cfg.N << " diverged " << result.diverged_count
            << '\n';
  for (int i = 0; i < b.model->dim(); ++i) {
    const auto s = result.summarize_terminal([i](const PathState& st) { return st.x(i); });
    rep.log() << "mean x_" << i << " = " << s.mean << " +- " << s.ci_half_width << '\n';
  }
  return kExitPass;
}

inline int run_converge(const ExperimentConfig& cfg, const ModelBundle& b, const Reporter& rep) {
  const auto deltas = parse_delta_list(cfg.deltas);
  const int n = b.model->dim();
  const Vec x0 = initial_state(cfg, n);
  ConvergenceReport report;
  if (cfg.ref == "closed-form") {
    const auto* ou = dynamic_cast<const OuModel*>(b.model.get());
    if (ou == nullptr || n != 1 || cfg.scheme != "em" || cfg.mode != "weak" || cfg.observable != "x") {
      throw ArgumentError("--ref closed-form needs --model ou (dim 1), --scheme em, --mode weak, --h x");
    }
    report = ou_closed_form_curve(ou->theta(), x0(0), cfg.T, deltas);
  } else {
    CurveOptions opt;
    opt.scheme = parse_scheme(cfg.scheme);
    if (cfg.mode == "weak") {
      opt.mode = ErrorMode::kWeak;
    } else if (cfg.mode == "strong") {
      opt.mode = ErrorMode::kStrong;
    } else {
      throw ArgumentError("--mode must be weak or strong");
    }
    const auto obs = make_observable(cfg.observable);
    opt.h = obs.g;
    opt.h_name = cfg.observable;
    opt.x0 = x0;
    opt.T = cfg.T;
    opt.deltas = deltas;
    opt.delta_ref = cfg.delta_ref;
    opt.q_prime = cfg.q_prime;
    opt.paths = cfg.N;
    opt.seed = cfg.seed;
    opt.threads = cfg.threads;
    if (cfg.ref == "coupled") {
      opt.reference = Reference::kCoupled;
    } else if (cfg.ref == "independent") {
      opt.reference = Reference::kIndependent;
    } else if (cfg.ref == "exact") {
      if (!b.exact_solution) throw ArgumentError("--ref exact: model has no exact solution");
      opt.reference = Reference::kExactPath;
      opt.exact_solution = b.exact_solution;
    } else if (cfg.ref == "analytic") {
      if (!b.analytic_mean || cfg.observable != "x") {
        throw ArgumentError("--ref analytic needs a model with a known mean and --h x");
      }
      opt.reference = Reference::kAnalyticMean;
      opt.analytic_mean = b.analytic_mean(x0, cfg.T)(0);
    } else {
      throw ArgumentError("--ref must be coupled, independent, exact, analytic or closed-form");
    }
    report = error_curve(*b.model, opt);
  }
  report.paths = cfg.ref == "closed-form" ? 0 : cfg.N;
  report.seed = cfg.seed;
  {
    auto os = rep.open("convergence.csv");
    write_convergence_csv(os, report);
  }
  if (cfg.plot) {
    std::filesystem::create_directories(cfg.out);
    std::ofstream svg(std::filesystem::path(cfg.out) / "convergence.svg");
    write_convergence_svg(svg, report);
  }
  for (const auto& w : report.warnings) rep.log() << "warning: " << w << '\n';
  rep.log() << std::setprecision(6) << "slope " << report.fit.slope << " intercept "
            << report.fit.intercept << " r2 " << report.fit.r_squared
            << (report.noise_dominated ? " noise-dominated" : "") << '\n';
  return report.noise_dominated ? kExitCheckFailed : kExitPass;
}

inline int run_lyapunov(const ExperimentConfig& cfg, const ModelBundle& b, const Reporter& rep) {
  const SdeModel& m = *b.model;
  const DomainBox box = cfg.box.empty() ? m.domain() : parse_box(cfg.box, m.dim());
  std::vector<CheckReport> reports;
  if (cfg.check == "certificate") {
    LyapunovCertificate cert = b.require_certificate();
    cert.domain = box;
    reports.push_back(certificate_check(m, cert, cfg.points, cfg.seed, 0.0, 1e-9, cfg.threads));
  } else if (cfg.check == "ratio") {
    const auto& cert = b.require_certificate();
    const auto scan = scan_box(box, cfg.points, cfg.seed, cfg.threads, [&](const Vec& x) {
      const FieldJet jet = cert.V0->jet(0.0, x);
      if (!(jet.value > 0.0)) return std::numeric_limits<double>::quiet_NaN();
      return generator_ratio(m, *cert.V0, 0.0, x);
    });
    CheckReport r{"generator_ratio", m.name(), cfg.points, scan.non_finite, scan.max_value,
                  scan.argmax};
    reports.push_back(r);
  } else if (cfg.check == "lipschitz-pairs" || cfg.check == "lipschitz-pointwise") {
    const auto mode = cfg.check == "lipschitz-pairs" ? LipschitzMode::kPairs : LipschitzMode::kPointwise;
    reports.push_back(
        lipschitz_check(m, b.require_envelope(), mode, box, cfg.points, cfg.seed, 0.0, 0, cfg.threads)
            .summary);
  } else if (cfg.check == "small-o") {
    const auto& cert = b.require_certificate();
    std::vector<double> radii;
    for (const auto& r : split(cfg.radii, ',')) radii.push_back(parse_number(r));
    const auto rows = small_o_profile(b.require_envelope(), *cert.V0, radii, 2048, cfg.seed);
    std::size_t increases = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      CheckReport r{"small_o_r" + std::to_string(static_cast<int>(rows[i].radius)), m.name(), 2048,
                    rows[i].skipped, rows[i].max_ratio, Vec()};
      if (i > 0 && !(rows[i].max_ratio < rows[i - 1].max_ratio)) ++increases;
      reports.push_back(r);
    }
    reports.back().violations += increases;
  } else if (cfg.check == "envelope") {
    const auto& cert = b.require_certificate();
    const auto rows = envelope_offsets(b.require_envelope(), *cert.V0, box, {1.0, 0.1, 0.01},
                                       cfg.points, cfg.seed);
    for (const auto& [mm, M] : rows) {
      std::ostringstream name;
      name << "envelope_m" << mm;
      reports.push_back({name.str(), m.name(), cfg.points, std::isfinite(M) ? 0u : 1u, M, Vec()});
    }
  } else if (cfg.check == "exp-integrability") {
    reports.push_back(exp_integrability_check(m, b.require_exp_data(),
                                              sample_box(box, cfg.points, cfg.seed)));
  } else {
    std::string msg = "unknown check '" + cfg.check + "'";
    const std::vector<std::string> names = {"certificate", "ratio", "lipschitz-pairs",
                                            "lipschitz-pointwise", "small-o", "envelope",
                                            "exp-integrability"};
    const auto s = suggest(cfg.check, names);
    if (!s.empty()) msg += " (did you mean '" + s.front() + "'?)";
    throw ArgumentError(msg);
  }
  auto os = rep.open("certification.csv");
  write_check_header(os);
  bool pass = true;
  for (const auto& r : reports) {
    write_check_row(os, r);
    pass = pass && r.passed();
    rep.log() << std::setprecision(10) << r.check << ": points " << r.points << " violations "
              << r.violations << " max " << r.max_residual << '\n';
  }
  return pass ? kExitPass : kExitCheckFailed;
}

inline int run_fk(const ExperimentConfig& cfg, const ModelBundle& b, const Reporter& rep) {
  const SdeModel& m = *b.model;
  const int n = m.dim();
  const Vec x = initial_state(cfg, n);
  const auto obs = make_observable(cfg.observable, cfg.source, cfg.discount);
  FkOptions opt;
  opt.delta = cfg.delta;
  opt.paths = cfg.N;
  opt.seed = cfg.seed;
  opt.scheme = parse_scheme(cfg.scheme);
  opt.q_prime = cfg.q_prime;
  opt.threads = cfg.threads;
  const std::string quantity = cfg.quantity.empty() ? "estimate" : cfg.quantity;
  std::vector<FkRow> rows;
  int status = kExitPass;
  if (quantity == "estimate") {
    const auto est = fk_estimate(m, obs, cfg.t, x, cfg.T, opt);
    rows.push_back({"u", cfg.t, x, est.mean, est.ci_half_width});
    rep.log() << std::setprecision(10) << "u = " << est.mean << " +- " << est.ci_half_width
              << " diverged " << est.diverged_count << '\n';
    if (est.flagged) status = kExitCheckFailed;
  } else if (quantity == "gradient") {
    opt.scheme = Scheme::kEulerMaruyama;
    const auto g = fk_gradient(m, obs, cfg.t, x, cfg.T, opt);
    const auto fd = fk_gradient_fd(m, obs, cfg.t, x, cfg.T, opt, cfg.fd_h);
    for (int i = 0; i < n; ++i) {
      const auto& gi = g.components[i];
      rows.push_back({"grad_" + std::to_string(i), cfg.t, x, gi.mean, gi.ci_half_width});
      rows.push_back({"fd_grad_" + std::to_string(i), cfg.t, x, fd[i].mean, fd[i].ci_half_width});
      const double allowed = 3.0 * std::hypot(gi.ci_half_width, fd[i].ci_half_width);
      const double gap = std::abs(gi.mean - fd[i].mean);
      rep.log() << std::setprecision(10) << "d_" << i << " u = " << gi.mean << " +- "
                << gi.ci_half_width << " (fd " << fd[i].mean << ")\n";
      if (gap > std::max(allowed, 1e-6 * std::max(1.0, std::abs(fd[i].mean)))) status = kExitCheckFailed;
    }
  } else if (quantity == "residual") {
    const auto r = pde_residual(m, obs, cfg.t, x, cfg.T, cfg.hx, cfg.ht, opt);
    rows.push_back({"residual", cfg.t, x, r.residual, r.ci_half_width});
    for (const auto& w : r.warnings) rep.log() << "warning: " << w << '\n';
    rep.log() << std::setprecision(10) << "residual = " << r.residual << " +- " << r.ci_half_width
              << '\n';
    if (std::abs(r.residual) > 3.0 * r.ci_half_width) status = kExitCheckFailed;
  } else {
    throw ArgumentError("--quantity for fk must be estimate, gradient or residual");
  }
  auto os = rep.open("fk.csv");
  write_fk_csv(os, rows, n, cfg.delta, cfg.N, cfg.seed);
  return status;
}

inline int run_variational(const ExperimentConfig& cfg, const ModelBundle& b, const Reporter& rep) {
  const SdeModel& m = *b.model;
  const int n = m.dim();
  const Vec x = initial_state(cfg, n);
  ProbeOptions opt;
  opt.T = cfg.T;
  opt.delta = cfg.delta;
  opt.paths = cfg.N;
  opt.seed = cfg.seed;
  opt.threads = cfg.threads;
  Vec kappa = cfg.kappa.empty() ? Vec(Vec::Unit(n, 0)) : parse_vector(cfg.kappa, n);
  if (kappa.norm() == 0.0) throw ArgumentError("--kappa must be non-zero");
  kappa /= kappa.norm();
  const std::string quantity = cfg.quantity.empty() ? "diffquot" : cfg.quantity;
  std::vector<ReportRow> rows;
  int status = kExitPass;
  if (quantity == "diffquot") {
    std::vector<double> rs;
    for (const auto& r : split(cfg.r_list, ',')) rs.push_back(parse_number(r));
    for (const auto& row : difference_quotient_error(m, x, kappa, rs, opt)) {
      rows.push_back({"diffquot", row.parameter, row.estimate.mean, row.estimate.ci_half_width});
    }
  } else if (quantity == "sup-moment") {
    std::vector<Vec> dirs;
    if (cfg.order >= 1) dirs.push_back(kappa);
    if (cfg.order == 2) dirs.push_back(kappa);
    const auto r = sup_moment(m, x, dirs, cfg.k, opt);
    rows.push_back({"sup_moment", cfg.k, r.estimate.mean, r.estimate.ci_half_width});
    rows.push_back({"tail_share", cfg.k, r.tail_share, 0.0});
    rows.push_back({"diverged", cfg.k, double(r.diverged), 0.0});
    if (r.unreliable) status = kExitCheckFailed;
  } else if (quantity == "holder") {
    const auto probe = holder_in_time_probe(m, x, cfg.order, cfg.k, 0.0,
                                            parse_delta_list(cfg.gaps), opt);
    for (const auto& row : probe.rows) {
      rows.push_back({"holder", row.parameter, row.estimate.mean, row.estimate.ci_half_width});
    }
    rows.push_back({"holder_slope", cfg.k, probe.fit.slope, 0.0});
    if (probe.fit.slope < cfg.k / 2.0 - 0.2) status = kExitCheckFailed;
  } else {
    throw ArgumentError("--quantity for variational must be diffquot, sup-moment or holder");
  }
  for (const auto& r : rows) {
    rep.log() << std::setprecision(10) << r.quantity << ' ' << r.parameter << ' ' << r.value
              << " +- " << r.ci << '\n';
  }
  auto os = rep.open("variational.csv");
  write_report_csv(os, rows, m.name(), cfg.delta, cfg.N, cfg.seed);
  return status;
}

inline int run_ito_check(const ExperimentConfig& cfg, const ModelBundle& b, const Reporter& rep) {
  const SdeModel& m = *b.model;
  const Vec y = cfg.y.empty() ? Vec(Vec::Ones(m.dim())) : parse_vector(cfg.y, m.dim());
  const auto dts = parse_delta_list(cfg.micro_dts);
  std::vector<ReportRow> rows;
  std::vector<double> xs, ys;
  ItoCheckOptions opt;
  opt.window = cfg.window;
  opt.q_prime = cfg.q_prime;
  opt.seed = cfg.seed;
  opt.paths = cfg.ito_paths;
  opt.threads = cfg.threads;
  const auto curve = ito_discrepancy_curve(m, y, dts, opt);
  for (std::size_t j = 0; j < dts.size(); ++j) {
    const auto& r = curve[j];
    rows.push_back({"discrepancy", dts[j], r.max_discrepancy, r.ci_half_width});
    if (r.max_discrepancy > 0.0) {
      xs.push_back(dts[j]);
      ys.push_back(r.max_discrepancy);
    }
  }
  int status = kExitPass;
  if (xs.size() >= 2) {
    const auto fit = loglog_fit(xs, ys);
    rows.push_back({"slope", 0.0, fit.slope, 0.0});
    rep.log() << std::setprecision(6) << "slope " << fit.slope << '\n';
    if (fit.slope < 0.9) status = kExitCheckFailed;
  }
  for (const auto& r : rows) {
    rep.log() << std::setprecision(10) << r.quantity << ' ' << r.parameter << ' ' << r.value << '\n';
  }
  auto os = rep.open("ito.csv");
  write_report_csv(os, rows, m.name(), cfg.window, cfg.ito_paths, cfg.seed);
  return status;
}

inline int run_diverge(const ExperimentConfig& cfg, const ModelBundle& b, const Reporter& rep) {
  const SdeModel& m = *b.model;
  DivergenceOptions opt;
  opt.scheme = parse_scheme(cfg.scheme);
  opt.delta = cfg.delta;
  opt.steps = cfg.steps;
  opt.blow_threshold = cfg.blow;
  opt.q_prime = cfg.q_prime;
  opt.paths = cfg.N;
  opt.seed = cfg.seed;
  opt.threads = cfg.threads;
  const Vec x0 = cfg.x0.empty() ? Vec(Vec::Constant(m.dim(), 3.0)) : parse_vector(cfg.x0, m.dim());
  const auto r = divergence_probe(m, x0, opt);
  std::vector<ReportRow> rows{{"fraction", cfg.blow, r.fraction, 0.0}};
  for (std::size_t k = 0; k < r.histogram.size(); ++k) {
    if (r.histogram[k] > 0) rows.push_back({"first_passage", double(k + 1), double(r.histogram[k]), 0.0});
  }
  rep.log() << std::setprecision(10) << "fraction " << r.fraction << " (" << r.blown << " of "
            << r.paths << ")\n";
  auto os = rep.open("diverge.csv");
  write_report_csv(os, rows, m.name(), cfg.delta, cfg.N, cfg.seed);
  return kExitPass;
}

inline void add_common(CLI::App* sub, ExperimentConfig& cfg) {
  sub->add_option("--model", cfg.model, "Gallery model name");
  sub->add_option("--param", cfg.params, "Model parameter key=value (repeatable)");
  sub->add_option("--scheme", cfg.scheme, "tamed or em");
  sub->add_option_function<std::string>(
      "--delta", [&cfg](const std::string& v) { cfg.delta = parse_number(v); }, "Step size");
  sub->add_option("--deltas", cfg.deltas, "Step sizes: 2^-3..2^-8 or a comma list");
  sub->add_option("--qprime", cfg.q_prime, "Taming exponent q'");
  sub->add_option("--T", cfg.T, "Time horizon");
  sub->add_option("--x0", cfg.x0, "Initial state, comma separated");
  sub->add_option("--N", cfg.N, "Number of paths");
  sub->add_option("--seed", cfg.seed, "Master seed");
  sub->add_option("--threads", cfg.threads, "Worker threads (0: TAMED_SDE_THREADS or hardware)");
  sub->add_option("--out", cfg.out, "Output directory");
  sub->add_flag("--plot", cfg.plot, "Write an SVG plot where available");
  sub->add_flag("--deterministic", cfg.deterministic, "Omit the timestamp header line");
}

}  // namespace detail

/// Parses argv-style arguments (without the program name). Returns the
/// config, or an exit code when parsing ended the run (help or error).
inline std::variant<ExperimentConfig, int> parse_args(const std::vector<std::string>& args,
                                                      std::ostream& out, std::ostream& err) {
  ExperimentConfig cfg;
  CLI::App app{"Tamed Euler-Maruyama simulation and verification toolkit", "tamed_sde_cli"};
  app.set_help_flag("--help", "Print this help message and exit");
  app.set_config("--config", "", "INI config file with one [command] section per command");
  app.require_subcommand(1);
  app.fallthrough();

  auto* simulate = app.add_subcommand("simulate", "Simulate an ensemble and dump trajectories");
  auto* converge = app.add_subcommand("converge", "Weak or strong error curve and fitted slope");
  auto* lyapunov = app.add_subcommand("lyapunov", "Certificate, envelope and integrability checks");
  auto* fk = app.add_subcommand("fk", "Feynman-Kac estimates, gradients and Kolmogorov residuals");
  auto* variational = app.add_subcommand("variational", "Derivative-process probes");
  auto* ito = app.add_subcommand("ito-check", "Ito-form check of the tamed increment");
  auto* diverge = app.add_subcommand("diverge", "Blow-up fraction of a scheme");
  for (auto* sub : {simulate, converge, lyapunov, fk, variational, ito, diverge}) {
    detail::add_common(sub, cfg);
  }
  simulate->add_option("--dump", cfg.dump, "Trajectories to write");
  converge->add_option("--mode", cfg.mode, "weak or strong");
  converge->add_option("--h", cfg.observable, "Test function: x, sumsq, one");
  converge->add_option("--ref", cfg.ref, "coupled, independent, exact, analytic, closed-form");
  converge->add_option_function<std::string>(
      "--delta-ref", [&cfg](const std::string& v) { cfg.delta_ref = parse_number(v); },
      "Reference step (default min delta / 16)");
  lyapunov->add_option("--check", cfg.check,
                       "certificate, ratio, lipschitz-pairs, lipschitz-pointwise, small-o, "
                       "envelope, exp-integrability");
  lyapunov->add_option("--box", cfg.box, "Sampling box lo..hi");
  lyapunov->add_option("--points", cfg.points, "Sample points (pairs in lipschitz-pairs mode)");
  lyapunov->add_option("--radii", cfg.radii, "Sphere radii for small-o");
  fk->add_option("--quantity", cfg.quantity, "estimate, gradient or residual");
  fk->add_option("--g", cfg.observable, "Terminal payoff: x, sumsq, one");
  fk->add_option("--t", cfg.t, "Start time");
  fk->add_option("--source", cfg.source, "Constant source f");
  fk->add_option("--discount", cfg.discount, "Constant discount rate c");
  fk->add_option("--hx", cfg.hx, "Spatial stencil step");
  fk->add_option("--ht", cfg.ht, "Temporal stencil step");
  fk->add_option("--fd-h", cfg.fd_h, "Finite-difference step for gradient checks");
  variational->add_option("--quantity", cfg.quantity, "diffquot, sup-moment or holder");
  variational->add_option("--order", cfg.order, "Derivative order (0, 1, 2)");
  variational->add_option("--k", cfg.k, "Moment exponent");
  variational->add_option("--r", cfg.r_list, "Difference-quotient radii, comma list");
  variational->add_option("--gaps", cfg.gaps, "Hoelder gaps: 2^-4..2^-9 or a comma list");
  variational->add_option("--kappa", cfg.kappa, "Direction, comma separated");
  ito->add_option("--y", cfg.y, "Frozen point y");
  ito->add_option("--window", cfg.window, "Time window");
  ito->add_option("--micro-dts", cfg.micro_dts, "Micro step sizes, comma list");
  ito->add_option("--paths", cfg.ito_paths, "Paths averaged per micro step");
  diverge->add_option("--steps", cfg.steps, "Number of steps");
  diverge->add_option("--blow", cfg.blow, "Blow-up threshold on |x|");

  // Unknown command names get a suggestion before CLI11 sees them.
  if (!args.empty() && !args[0].empty() && args[0][0] != '-') {
    const auto& names = command_names();
    if (std::find(names.begin(), names.end(), args[0]) == names.end()) {
      err << "error: unknown command '" << args[0] << "'";
      const auto s = suggest(args[0], names);
      if (!s.empty()) err << " (did you mean '" << s.front() << "'?)";
      err << "\n";
      return kExitUsage;
    }
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitPass : kExitUsage;
  }
  for (auto* sub : app.get_subcommands()) cfg.command = sub->get_name();
  return cfg;
}

/// Runs one command. Usage and configuration problems return 1, failed checks 2.
inline int run(const ExperimentConfig& cfg, std::ostream& out, std::ostream& err) {
  try {
    const ModelBundle bundle = make_model(cfg.model, parse_params(cfg.params));
    const Reporter rep(cfg, out);
    if (cfg.command == "simulate") return detail::run_simulate(cfg, bundle, rep);
    if (cfg.command == "converge") return detail::run_converge(cfg, bundle, rep);
    if (cfg.command == "lyapunov") return detail::run_lyapunov(cfg, bundle, rep);
    if (cfg.command == "fk") return detail::run_fk(cfg, bundle, rep);
    if (cfg.command == "variational") return detail::run_variational(cfg, bundle, rep);
    if (cfg.command == "ito-check") return detail::run_ito_check(cfg, bundle, rep);
    if (cfg.command == "diverge") return detail::run_diverge(cfg, bundle, rep);
    err << "error: unknown command '" << cfg.command << "'\n";
    return kExitUsage;
  } catch (const ArgumentError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigurationError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const UnsupportedError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const CertificateDomainError& e) {
    err << "check failed: " << e.what() << '\n';
    return kExitCheckFailed;
  } catch (const NonFiniteError& e) {
    err << "check failed: " << e.what() << '\n';
    return kExitCheckFailed;
  }
}

inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  auto parsed = parse_args(args, out, err);
  if (std::holds_alternative<int>(parsed)) return std::get<int>(parsed);
  return run(std::get<ExperimentConfig>(parsed), out, err);
}

}  // namespace tamed_sde::cli
