#pragma once

#include "tamed_sde/errors.hpp"
#include "tamed_sde/linalg.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace tamed_sde {

/// Axis-aligned box used by every sampling-based check.
class DomainBox {
 public:
  DomainBox() = default;
  DomainBox(Vec lower, Vec upper) : lower_(std::move(lower)), upper_(std::move(upper)) {
    if (lower_.size() != upper_.size() || lower_.size() == 0) {
      throw ArgumentError("DomainBox: bounds must be non-empty and of equal dimension");
    }
    for (int i = 0; i < lower_.size(); ++i) {
      if (!(lower_(i) < upper_(i))) {
        throw ArgumentError("DomainBox: lower bound must be < upper bound in every coordinate");
      }
    }
  }

  static DomainBox cube(int dim, double lo, double hi) {
    return DomainBox(Vec::Constant(dim, lo), Vec::Constant(dim, hi));
  }

  int dim() const { return static_cast<int>(lower_.size()); }
  const Vec& lower() const { return lower_; }
  const Vec& upper() const { return upper_; }

  bool contains(const Vec& x) const {
    for (int i = 0; i < dim(); ++i) {
      if (x(i) < lower_(i) || x(i) > upper_(i)) return false;
    }
    return true;
  }

  /// Maps a point of the unit cube onto the box.
  Vec from_unit(const Vec& u) const {
    return lower_ + (upper_ - lower_).cwiseProduct(u);
  }

 private:
  Vec lower_;
  Vec upper_;
};

/// Deterministic SDE dX = b(t,X) dt + sigma(t,X) dW with an n-dimensional
/// Brownian motion. Derivatives are supplied in closed form; use
/// validate_derivatives() to cross-check them against finite differences.
///
/// Implementations must be pure: the integrators call them concurrently.
class SdeModel {
 public:
  virtual ~SdeModel() = default;

  virtual std::string name() const = 0;
  virtual int dim() const = 0;
  /// Highest order of coefficient derivatives available (1 or 2).
  virtual int smoothness() const { return 2; }
  virtual bool time_homogeneous() const { return true; }
  virtual DomainBox domain() const { return DomainBox::cube(dim(), -5.0, 5.0); }

  virtual void drift(double t, const Vec& x, Vec& out) const = 0;
  virtual void diffusion(double t, const Vec& x, Mat& out) const = 0;
  /// out(i, k) = d b_i / d x_k
  virtual void drift_jacobian(double t, const Vec& x, Mat& out) const = 0;
  /// out[k] = d sigma / d x_k
  virtual void diffusion_jacobian(double t, const Vec& x, Tensor3& out) const = 0;
  /// out[i](k, l) = d^2 b_i / d x_k d x_l
  virtual void drift_hessian(double, const Vec&, Tensor3&) const {
    throw ConfigurationError(name() + ": drift Hessian not available");
  }
  /// out(k, l) = d^2 sigma / d x_k d x_l
  virtual void diffusion_hessian(double, const Vec&, Tensor4&) const {
    throw ConfigurationError(name() + ": diffusion Hessian not available");
  }

  // Convenience wrappers for callers off the hot path.
  Vec drift_at(double t, const Vec& x) const {
    Vec out(dim());
    drift(t, x, out);
    return out;
  }
  Mat diffusion_at(double t, const Vec& x) const {
    Mat out(dim(), dim());
    diffusion(t, x, out);
    return out;
  }
  Mat drift_jacobian_at(double t, const Vec& x) const {
    Mat out(dim(), dim());
    drift_jacobian(t, x, out);
    return out;
  }
};

using ModelPtr = std::shared_ptr<const SdeModel>;

/// Model assembled from callables. Handy for ad-hoc and fault-injection models;
/// the gallery models derive from SdeModel directly.
class LambdaModel final : public SdeModel {
 public:
  using VecFn = std::function<void(double, const Vec&, Vec&)>;
  using MatFn = std::function<void(double, const Vec&, Mat&)>;
  using T3Fn = std::function<void(double, const Vec&, Tensor3&)>;
  using T4Fn = std::function<void(double, const Vec&, Tensor4&)>;

  struct Callbacks {
    VecFn drift;
    MatFn diffusion;
    MatFn drift_jacobian;
    T3Fn diffusion_jacobian;
    T3Fn drift_hessian;      // optional
    T4Fn diffusion_hessian;  // optional
  };

  LambdaModel(std::string name, int dim, Callbacks cb, bool time_homogeneous = true)
      : name_(std::move(name)), dim_(dim), cb_(std::move(cb)), homogeneous_(time_homogeneous) {
    if (dim_ < 1 || dim_ > kMaxDim) throw ArgumentError("LambdaModel: dimension out of range");
    if (!cb_.drift || !cb_.diffusion || !cb_.drift_jacobian || !cb_.diffusion_jacobian) {
      throw ArgumentError("LambdaModel: drift, diffusion and their Jacobians are required");
    }
  }

  std::string name() const override { return name_; }
  int dim() const override { return dim_; }
  int smoothness() const override { return cb_.drift_hessian && cb_.diffusion_hessian ? 2 : 1; }
  bool time_homogeneous() const override { return homogeneous_; }

  void drift(double t, const Vec& x, Vec& out) const override { cb_.drift(t, x, out); }
  void diffusion(double t, const Vec& x, Mat& out) const override { cb_.diffusion(t, x, out); }
  void drift_jacobian(double t, const Vec& x, Mat& out) const override {
    cb_.drift_jacobian(t, x, out);
  }
  void diffusion_jacobian(double t, const Vec& x, Tensor3& out) const override {
    cb_.diffusion_jacobian(t, x, out);
  }
  void drift_hessian(double t, const Vec& x, Tensor3& out) const override {
    if (!cb_.drift_hessian) SdeModel::drift_hessian(t, x, out);
    cb_.drift_hessian(t, x, out);
  }
  void diffusion_hessian(double t, const Vec& x, Tensor4& out) const override {
    if (!cb_.diffusion_hessian) SdeModel::diffusion_hessian(t, x, out);
    cb_.diffusion_hessian(t, x, out);
  }

 private:
  std::string name_;
  int dim_;
  Callbacks cb_;
  bool homogeneous_;
};

/// Source f, discount rate c >= 0 and terminal payoff g of a Feynman-Kac
/// functional, with gradients for pathwise differentiation.
struct ObservableTriple {
  std::function<double(double, const Vec&)> f;
  std::function<double(double, const Vec&)> c;
  std::function<double(const Vec&)> g;
  std::function<Vec(double, const Vec&)> grad_f;
  std::function<Vec(double, const Vec&)> grad_c;
  std::function<Vec(const Vec&)> grad_g;
  std::string growth_note;

  bool has_gradients() const { return grad_f && grad_c && grad_g; }

  /// g only; f = c = 0.
  static ObservableTriple terminal(std::function<double(const Vec&)> g,
                                   std::function<Vec(const Vec&)> grad_g = {}) {
    ObservableTriple obs;
    obs.f = [](double, const Vec&) { return 0.0; };
    obs.c = [](double, const Vec&) { return 0.0; };
    obs.g = std::move(g);
    obs.grad_f = [](double, const Vec& x) -> Vec { return Vec::Zero(x.size()); };
    obs.grad_c = obs.grad_f;
    obs.grad_g = std::move(grad_g);
    return obs;
  }
};

/// Value, time derivative, gradient and Hessian of a scalar field, all scaled
/// by exp(-log_scale). Exponential Lyapunov functions overflow quickly; keeping
/// the scale separate lets ratios such as LV/V be formed without ever
/// materialising V.
struct FieldJet {
  double log_scale = 0.0;
  double value = 0.0;
  double dt = 0.0;
  Vec grad;
  Mat hess;

  double log_value() const { return log_scale + std::log(value); }
  double unscaled_value() const { return value * std::exp(log_scale); }
};

/// Scalar field phi(t, x) with first and second spatial derivatives.
class ScalarField {
 public:
  virtual ~ScalarField() = default;
  virtual int dim() const = 0;
  virtual FieldJet jet(double t, const Vec& x) const = 0;
  virtual double value(double t, const Vec& x) const { return jet(t, x).unscaled_value(); }
  /// log phi; only meaningful where phi > 0.
  virtual double log_value(double t, const Vec& x) const { return jet(t, x).log_value(); }
};

using FieldPtr = std::shared_ptr<const ScalarField>;

/// Scalar field from a callable returning an unscaled jet.
class LambdaField final : public ScalarField {
 public:
  using JetFn = std::function<FieldJet(double, const Vec&)>;
  LambdaField(int dim, JetFn fn) : dim_(dim), fn_(std::move(fn)) {}
  int dim() const override { return dim_; }
  FieldJet jet(double t, const Vec& x) const override { return fn_(t, x); }

 private:
  int dim_;
  JetFn fn_;
};

// ---------------------------------------------------------------------------
// Derivative validation

struct DerivativeCheck {
  std::string callback;
  double max_rel_error = 0.0;
  double worst_t = 0.0;
  Vec worst_x;
};

struct ValidationReport {
  std::vector<DerivativeCheck> checks;

  double max_error() const {
    double m = 0.0;
    for (const auto& c : checks) m = std::max(m, c.max_rel_error);
    return m;
  }
  bool passed(double tolerance = 1e-5) const { return max_error() <= tolerance; }
  const DerivativeCheck* find(const std::string& callback) const {
    for (const auto& c : checks) {
      if (c.callback == callback) return &c;
    }
    return nullptr;
  }
};

struct SamplePoint {
  double t = 0.0;
  Vec x;
};

namespace detail {

inline void require_finite(bool finite, const char* callback, double t, const Vec& x) {
  if (!finite) {
    throw NonFiniteError(std::string("non-finite output from ") + callback + " at t=" +
                         std::to_string(t) + ", x=(" + format_point(x) + ")");
  }
}

inline void record(DerivativeCheck& check, double analytic, double numeric, double t,
                   const Vec& x) {
  const double err = std::abs(analytic - numeric) / (1.0 + std::abs(analytic));
  if (err > check.max_rel_error || check.worst_x.size() == 0) {
    check.max_rel_error = std::max(err, check.max_rel_error);
    check.worst_t = t;
    check.worst_x = x;
  }
}

}  // namespace detail

/// Compares every derivative callback with central differences of the callback
/// one order below, at each point. The step in coordinate k is
/// h * (1 + |x_k|). Error metric: |analytic - fd| / (1 + |analytic|).
inline ValidationReport validate_derivatives(const SdeModel& model,
                                             const std::vector<SamplePoint>& points,
                                             double h = 1e-5) {
  if (!(h > 0.0)) throw ArgumentError("validate_derivatives: h must be > 0");
  const int n = model.dim();
  const bool second = model.smoothness() >= 2;

  DerivativeCheck jb{"drift_jacobian"}, js{"diffusion_jacobian"};
  DerivativeCheck hb{"drift_hessian"}, hs{"diffusion_hessian"};

  Vec b(n), bp(n), bm(n);
  Mat s(n, n), sp(n, n), sm(n, n), jac(n, n), jp(n, n), jm(n, n);
  Tensor3 sjac(n, n, n), sjp(n, n, n), sjm(n, n, n), bhess(n, n, n);
  Tensor4 shess(n, n, n);

  for (const auto& pt : points) {
    if (pt.x.size() != n) throw ArgumentError("validate_derivatives: point dimension mismatch");
    const double t = pt.t;
    model.drift(t, pt.x, b);
    detail::require_finite(all_finite(b), "drift", t, pt.x);
    model.diffusion(t, pt.x, s);
    detail::require_finite(all_finite(s), "diffusion", t, pt.x);
    model.drift_jacobian(t, pt.x, jac);
    detail::require_finite(all_finite(jac), "drift_jacobian", t, pt.x);
    model.diffusion_jacobian(t, pt.x, sjac);
    for (int k = 0; k < n; ++k) {
      detail::require_finite(all_finite(sjac[k]), "diffusion_jacobian", t, pt.x);
    }
    if (second) {
      model.drift_hessian(t, pt.x, bhess);
      model.diffusion_hessian(t, pt.x, shess);
      for (int k = 0; k < n; ++k) {
        detail::require_finite(all_finite(bhess[k]), "drift_hessian", t, pt.x);
        for (int l = 0; l < n; ++l) {
          detail::require_finite(all_finite(shess(k, l)), "diffusion_hessian", t, pt.x);
        }
      }
    }

    for (int k = 0; k < n; ++k) {
      const double step = h * (1.0 + std::abs(pt.x(k)));
      Vec xp = pt.x, xm = pt.x;
      xp(k) += step;
      xm(k) -= step;
      const double width = xp(k) - xm(k);

      model.drift(t, xp, bp);
      model.drift(t, xm, bm);
      detail::require_finite(all_finite(bp) && all_finite(bm), "drift", t, pt.x);
      for (int i = 0; i < n; ++i) {
        detail::record(jb, jac(i, k), (bp(i) - bm(i)) / width, t, pt.x);
      }

      model.diffusion(t, xp, sp);
      model.diffusion(t, xm, sm);
      detail::require_finite(all_finite(sp) && all_finite(sm), "diffusion", t, pt.x);
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
          detail::record(js, sjac[k](i, j), (sp(i, j) - sm(i, j)) / width, t, pt.x);
        }
      }

      if (!second) continue;
      model.drift_jacobian(t, xp, jp);
      model.drift_jacobian(t, xm, jm);
      for (int i = 0; i < n; ++i) {
        for (int l = 0; l < n; ++l) {
          // d/dx_k of (d b_i / d x_l)
          detail::record(hb, bhess[i](l, k), (jp(i, l) - jm(i, l)) / width, t, pt.x);
        }
      }
      model.diffusion_jacobian(t, xp, sjp);
      model.diffusion_jacobian(t, xm, sjm);
      for (int l = 0; l < n; ++l) {
        for (int i = 0; i < n; ++i) {
          for (int j = 0; j < n; ++j) {
            detail::record(hs, shess(l, k)(i, j), (sjp[l](i, j) - sjm[l](i, j)) / width, t,
                           pt.x);
          }
        }
      }
    }
  }

  ValidationReport report;
  report.checks = {jb, js};
  if (second) {
    report.checks.push_back(hb);
    report.checks.push_back(hs);
  }
  return report;
}

}  // namespace tamed_sde
