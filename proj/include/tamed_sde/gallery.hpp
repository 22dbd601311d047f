#pragma once

#include "tamed_sde/errors.hpp"
#include "tamed_sde/linalg.hpp"
#include "tamed_sde/lyapunov.hpp"
#include "tamed_sde/model.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace tamed_sde {

// ---------------------------------------------------------------------------
// Linear baselines

class OuModel final : public SdeModel {
 public:
  OuModel(double theta = 1.0, double sigma = 1.0, int dim = 1)
      : theta_(theta), sigma_(sigma), dim_(dim) {
    if (dim < 1 || dim > kMaxDim) throw ArgumentError("ou: dim out of range");
  }
  std::string name() const override { return "ou"; }
  int dim() const override { return dim_; }
  double theta() const { return theta_; }
  double sigma() const { return sigma_; }

  void drift(double, const Vec& x, Vec& out) const override { out = -theta_ * x; }
  void diffusion(double, const Vec&, Mat& out) const override {
    out = sigma_ * Mat::Identity(dim_, dim_);
  }
  void drift_jacobian(double, const Vec&, Mat& out) const override {
    out = -theta_ * Mat::Identity(dim_, dim_);
  }
  void diffusion_jacobian(double, const Vec&, Tensor3& out) const override {
    out.resize(dim_, dim_, dim_);
    out.set_zero();
  }
  void drift_hessian(double, const Vec&, Tensor3& out) const override {
    out.resize(dim_, dim_, dim_);
    out.set_zero();
  }
  void diffusion_hessian(double, const Vec&, Tensor4& out) const override {
    out.resize(dim_, dim_, dim_);
    out.set_zero();
  }

 private:
  double theta_, sigma_;
  int dim_;
};

/// Geometric Brownian motion with diagonal noise: dX_i = mu X_i dt + s X_i dW_i.
class GbmModel final : public SdeModel {
 public:
  GbmModel(double mu = 0.1, double sigma = 0.2, int dim = 1) : mu_(mu), sigma_(sigma), dim_(dim) {
    if (dim < 1 || dim > kMaxDim) throw ArgumentError("gbm: dim out of range");
  }
  std::string name() const override { return "gbm"; }
  int dim() const override { return dim_; }
  double mu() const { return mu_; }
  double sigma() const { return sigma_; }

  void drift(double, const Vec& x, Vec& out) const override { out = mu_ * x; }
  void diffusion(double, const Vec& x, Mat& out) const override {
    out = (sigma_ * x).asDiagonal();
  }
  void drift_jacobian(double, const Vec&, Mat& out) const override {
    out = mu_ * Mat::Identity(dim_, dim_);
  }
  void diffusion_jacobian(double, const Vec&, Tensor3& out) const override {
    out.resize(dim_, dim_, dim_);
    out.set_zero();
    for (int k = 0; k < dim_; ++k) out[k](k, k) = sigma_;
  }
  void drift_hessian(double, const Vec&, Tensor3& out) const override {
    out.resize(dim_, dim_, dim_);
    out.set_zero();
  }
  void diffusion_hessian(double, const Vec&, Tensor4& out) const override {
    out.resize(dim_, dim_, dim_);
    out.set_zero();
  }

  /// Exact solution driven by the Brownian value w at time t.
  Vec exact(const Vec& x0, double t, const Vec& w) const {
    Vec out(dim_);
    for (int i = 0; i < dim_; ++i) {
      out(i) = x0(i) * std::exp((mu_ - 0.5 * sigma_ * sigma_) * t + sigma_ * w(i));
    }
    return out;
  }

 private:
  double mu_, sigma_;
  int dim_;
};

// ---------------------------------------------------------------------------
// Stochastic Duffing-van der Pol oscillator
//   dX1 = X2 dt
//   dX2 = (a1 X1 - a2 X2 - a3 X2 X1^2 - X1^3) dt + b1 X1 dW1 + b3 dW2

class DvdpModel final : public SdeModel {
 public:
  DvdpModel(double a1 = 1.0, double a2 = 1.0, double a3 = 1.0, double b1 = 0.5, double b3 = 0.5)
      : a1_(a1), a2_(a2), a3_(a3), b1_(b1), b3_(b3) {}

  std::string name() const override { return "dvdp"; }
  int dim() const override { return 2; }
  double alpha1() const { return a1_; }
  double alpha2() const { return a2_; }
  double alpha3() const { return a3_; }
  double beta1() const { return b1_; }
  double beta3() const { return b3_; }

  void drift(double, const Vec& x, Vec& out) const override {
    const double x1 = x(0), x2 = x(1);
    out.resize(2);
    out(0) = x2;
    out(1) = a1_ * x1 - a2_ * x2 - a3_ * x2 * x1 * x1 - x1 * x1 * x1;
  }
  void diffusion(double, const Vec& x, Mat& out) const override {
    out.setZero(2, 2);
    out(1, 0) = b1_ * x(0);
    out(1, 1) = b3_;
  }
  void drift_jacobian(double, const Vec& x, Mat& out) const override {
    const double x1 = x(0), x2 = x(1);
    out.resize(2, 2);
    out(0, 0) = 0.0;
    out(0, 1) = 1.0;
    out(1, 0) = a1_ - 2.0 * a3_ * x1 * x2 - 3.0 * x1 * x1;
    out(1, 1) = -a2_ - a3_ * x1 * x1;
  }
  void diffusion_jacobian(double, const Vec&, Tensor3& out) const override {
    out.resize(2, 2, 2);
    out.set_zero();
    out[0](1, 0) = b1_;
  }
  void drift_hessian(double, const Vec& x, Tensor3& out) const override {
    const double x1 = x(0), x2 = x(1);
    out.resize(2, 2, 2);
    out.set_zero();
    out[1](0, 0) = -2.0 * a3_ * x2 - 6.0 * x1;
    out[1](0, 1) = -2.0 * a3_ * x1;
    out[1](1, 0) = -2.0 * a3_ * x1;
  }
  void diffusion_hessian(double, const Vec&, Tensor4& out) const override {
    out.resize(2, 2, 2);
    out.set_zero();
  }

 private:
  double a1_, a2_, a3_, b1_, b3_;
};

struct DvdpConstants {
  double a = 0.0;
  double b = 0.0;
  double c = 0.0;
  double gamma_max = 0.0;
  double gamma = 0.0;
  /// Squared plateau radius of the cutoff: eta(y) = 1 for y^2 <= plateau_sq.
  double plateau_sq = 0.0;
};

namespace detail {

inline double ratio_or_inf(double num, double den) {
  return den == 0.0 ? std::numeric_limits<double>::infinity() : num / den;
}

}  // namespace detail

/// gamma defaults to gamma_max when not given.
inline DvdpConstants dvdp_constants(double a1, double a2, double a3, double b1, double b3,
                                    std::optional<double> gamma = std::nullopt) {
  (void)a1;
  if (!(a3 > 0.0)) {
    throw UnsupportedError("dvdp_constants: the certificate requires alpha3 > 0 (got " +
                           std::to_string(a3) + ")");
  }
  DvdpConstants k;
  k.a = std::min(1.0, 1.0 / a3);
  k.b = a3 < 1.0 ? 2.0 - a3 : 1.5;
  k.c = 6.0 * std::abs(a2);
  k.gamma_max = std::min({detail::ratio_or_inf(a3, 4.0 * b1 * b1),
                          detail::ratio_or_inf(1.0, b1 * b1),
                          detail::ratio_or_inf(std::abs(a2), 8.0 * b3 * b3)});
  k.gamma = gamma.value_or(k.gamma_max);
  if (!std::isfinite(k.gamma) || k.gamma < 0.0) {
    throw UnsupportedError("dvdp_constants: gamma must be finite and >= 0 (beta1 = beta3 = 0 "
                           "leaves gamma_max unbounded; pass gamma explicitly)");
  }
  if (k.gamma > k.gamma_max) throw ArgumentError("dvdp_constants: gamma exceeds gamma_max");
  const double den = 2.0 * a3 * k.b - 2.0 * b1 * b1 * k.gamma * k.b * k.b;
  if (!(den > 0.0)) throw UnsupportedError("dvdp_constants: plateau denominator is not positive");
  k.plateau_sq = (1.0 + std::abs(k.a - 2.0 * a2 * k.b + 2.0 * b3 * b3 * k.gamma * k.b * k.b)) / den;
  return k;
}

/// C-infinity step from 0 (s <= 0) to 1 (s >= 1) built from exp(-1/s), with
/// its first two derivatives.
struct SmoothStep {
  double value = 0.0;
  double d1 = 0.0;
  double d2 = 0.0;
};

inline SmoothStep smooth_step(double s) {
  if (s <= 0.0) return {0.0, 0.0, 0.0};
  if (s >= 1.0) return {1.0, 0.0, 0.0};
  auto psi = [](double u) {
    struct {
      double v, d1, d2;
    } r{0.0, 0.0, 0.0};
    if (u <= 0.0) return r;
    const double e = std::exp(-1.0 / u);
    r.v = e;
    r.d1 = e / (u * u);
    r.d2 = e * (1.0 / (u * u * u * u) - 2.0 / (u * u * u));
    return r;
  };
  const auto A = psi(s);
  const auto Bp = psi(1.0 - s);
  const double B = Bp.v, dB = -Bp.d1, ddB = Bp.d2;
  const double S = A.v + B;
  const double dS = A.d1 + dB;
  const double N = A.d1 * B - A.v * dB;
  const double dN = A.d2 * B - A.v * ddB;
  SmoothStep out;
  out.value = A.v / S;
  out.d1 = N / (S * S);
  out.d2 = (dN * S - 2.0 * N * dS) / (S * S * S);
  return out;
}

/// V = (1 - eta(x1)) exp(g (x1^4 + a x1 x2 + b x2^2)) + exp(g (-c x1 x2 + x2^2 / 2)),
/// eta(y) = 1 - smooth_step(|y| - r0), r0 = sqrt(plateau_sq).
class DvdpLyapunovField final : public ScalarField {
 public:
  explicit DvdpLyapunovField(const DvdpConstants& k) : k_(k), r0_(std::sqrt(k.plateau_sq)) {}

  int dim() const override { return 2; }
  double plateau_radius() const { return r0_; }

  /// 1 - eta(y) and its derivatives in y.
  SmoothStep cutoff_complement(double y) const {
    SmoothStep s = smooth_step(std::abs(y) - r0_);
    if (y < 0.0) s.d1 = -s.d1;
    return s;
  }

  FieldJet jet(double, const Vec& x) const override {
    const double x1 = x(0), x2 = x(1), g = k_.gamma;
    const double e1 = x1 * x1 * x1 * x1 + k_.a * x1 * x2 + k_.b * x2 * x2;
    const double e2 = -k_.c * x1 * x2 + 0.5 * x2 * x2;
    const SmoothStep m = cutoff_complement(x1);

    FieldJet jet;
    jet.log_scale = m.value > 0.0 ? std::max(g * e1, g * e2) : g * e2;
    const double w1 = m.value > 0.0 || m.d1 != 0.0 || m.d2 != 0.0
                          ? std::exp(g * e1 - jet.log_scale)
                          : 0.0;
    const double w2 = std::exp(g * e2 - jet.log_scale);

    Vec grad1(2), grad2(2);
    grad1 << 4.0 * x1 * x1 * x1 + k_.a * x2, k_.a * x1 + 2.0 * k_.b * x2;
    grad2 << -k_.c * x2, -k_.c * x1 + x2;
    Mat hess1(2, 2), hess2(2, 2);
    hess1 << 12.0 * x1 * x1, k_.a, k_.a, 2.0 * k_.b;
    hess2 << 0.0, -k_.c, -k_.c, 1.0;
    Vec e_1 = Vec::Zero(2);
    e_1(0) = 1.0;

    jet.value = m.value * w1 + w2;
    jet.grad = w1 * (m.d1 * e_1 + m.value * g * grad1) + w2 * g * grad2;
    const Mat outer1 = e_1 * grad1.transpose();
    jet.hess = w1 * (m.d2 * e_1 * e_1.transpose() + m.d1 * g * (outer1 + outer1.transpose()) +
                     m.value * (g * hess1 + g * g * grad1 * grad1.transpose())) +
               w2 * (g * hess2 + g * g * grad2 * grad2.transpose());
    return jet;
  }

 private:
  DvdpConstants k_;
  double r0_;
};

/// G(x) = (3 + 2 sum |a_i| + b1^2)(1 + |x1|^3 + |x2|^{3/2}).
inline LipschitzEnvelope dvdp_envelope(const DvdpModel& m) {
  const double k = 3.0 + 2.0 * (std::abs(m.alpha1()) + std::abs(m.alpha2()) + std::abs(m.alpha3())) +
                   m.beta1() * m.beta1();
  LipschitzEnvelope env;
  env.G = [k](double, const Vec& x) {
    return k * (1.0 + std::pow(std::abs(x(0)), 3.0) + std::pow(std::abs(x(1)), 1.5));
  };
  env.formula = "(3+2*sum|alpha_i|+beta1^2)(1+|x1|^3+|x2|^1.5)";
  return env;
}

/// Polynomial envelope (x1^4 + 2 x2^2 + 1)^k evaluated at a state.
inline double dvdp_polynomial_envelope(const Vec& x, double k) {
  return std::pow(std::pow(x(0), 4) + 2.0 * x(1) * x(1) + 1.0, k);
}

// ---------------------------------------------------------------------------
// Langevin dynamics with variable friction, state (q, p) in R^{2n}:
//   dq = p dt
//   dp = (-grad U(q) + div_p Gamma - Gamma p) dt + sqrt(2 Gamma) dW
// with Gamma = phi(p) I.

enum class FrictionProfile { kConstant, kVariable };
enum class Potential { kQuadratic, kQuartic };

/// phi(p) and derivatives up to third order.
struct FrictionJet {
  double phi = 1.0;
  Vec d1;
  Mat d2;
  Tensor3 d3;  // d3[i](j, k)
};

inline FrictionJet friction_jet(FrictionProfile profile, const Vec& p) {
  const int n = static_cast<int>(p.size());
  FrictionJet f;
  f.d1 = Vec::Zero(n);
  f.d2 = Mat::Zero(n, n);
  f.d3.resize(n, n, n);
  f.d3.set_zero();
  if (profile == FrictionProfile::kConstant) return f;
  const double w = 1.0 + p.squaredNorm();
  f.phi = 1.0 + 1.0 / w;
  f.d1 = -2.0 * p / (w * w);
  f.d2 = -2.0 / (w * w) * Mat::Identity(n, n) + 8.0 / (w * w * w) * p * p.transpose();
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      for (int k = 0; k < n; ++k) {
        double v = -48.0 * p(i) * p(j) * p(k) / (w * w * w * w);
        if (i == j) v += 8.0 * p(k) / (w * w * w);
        if (i == k) v += 8.0 * p(j) / (w * w * w);
        if (j == k) v += 8.0 * p(i) / (w * w * w);
        f.d3[i](j, k) = v;
      }
    }
  }
  return f;
}

inline double potential_value(Potential u, const Vec& q) {
  const double r2 = q.squaredNorm();
  return u == Potential::kQuadratic ? 0.5 * r2 : 0.5 * r2 + 0.25 * r2 * r2;
}

inline Vec potential_gradient(Potential u, const Vec& q) {
  return u == Potential::kQuadratic ? Vec(q) : Vec((1.0 + q.squaredNorm()) * q);
}

inline Mat potential_hessian(Potential u, const Vec& q) {
  const int n = static_cast<int>(q.size());
  if (u == Potential::kQuadratic) return Mat::Identity(n, n);
  return (1.0 + q.squaredNorm()) * Mat::Identity(n, n) + 2.0 * q * q.transpose();
}

class LangevinModel final : public SdeModel {
 public:
  LangevinModel(int n = 2, FrictionProfile friction = FrictionProfile::kVariable,
                Potential potential = Potential::kQuadratic)
      : n_(n), friction_(friction), potential_(potential) {
    if (n < 1 || 2 * n > kMaxDim) throw ArgumentError("langevin_vf: n out of range");
  }

  std::string name() const override { return "langevin_vf"; }
  int dim() const override { return 2 * n_; }
  int half_dim() const { return n_; }
  FrictionProfile friction() const { return friction_; }
  Potential potential() const { return potential_; }
  /// sup of the operator norm of Gamma.
  double sup_gamma() const { return friction_ == FrictionProfile::kConstant ? 1.0 : 2.0; }

  void drift(double, const Vec& x, Vec& out) const override {
    const Vec q = x.head(n_), p = x.tail(n_);
    const FrictionJet f = friction_jet(friction_, p);
    out.resize(2 * n_);
    out.head(n_) = p;
    out.tail(n_) = -potential_gradient(potential_, q) + f.d1 - f.phi * p;
  }
  void diffusion(double, const Vec& x, Mat& out) const override {
    const FrictionJet f = friction_jet(friction_, x.tail(n_));
    out.setZero(2 * n_, 2 * n_);
    out.bottomRightCorner(n_, n_) = std::sqrt(2.0 * f.phi) * Mat::Identity(n_, n_);
  }
  void drift_jacobian(double, const Vec& x, Mat& out) const override {
    const Vec q = x.head(n_), p = x.tail(n_);
    const FrictionJet f = friction_jet(friction_, p);
    out.setZero(2 * n_, 2 * n_);
    out.topRightCorner(n_, n_) = Mat::Identity(n_, n_);
    out.bottomLeftCorner(n_, n_) = -potential_hessian(potential_, q);
    out.bottomRightCorner(n_, n_) =
        f.d2 - p * f.d1.transpose() - f.phi * Mat::Identity(n_, n_);
  }
  void diffusion_jacobian(double, const Vec& x, Tensor3& out) const override {
    const FrictionJet f = friction_jet(friction_, x.tail(n_));
    const double s = std::sqrt(2.0 * f.phi);
    out.resize(2 * n_, 2 * n_, 2 * n_);
    out.set_zero();
    for (int k = 0; k < n_; ++k) {
      out[n_ + k].bottomRightCorner(n_, n_) = (f.d1(k) / s) * Mat::Identity(n_, n_);
    }
  }
  void drift_hessian(double, const Vec& x, Tensor3& out) const override {
    const Vec q = x.head(n_), p = x.tail(n_);
    const FrictionJet f = friction_jet(friction_, p);
    out.resize(2 * n_, 2 * n_, 2 * n_);
    out.set_zero();
    for (int i = 0; i < n_; ++i) {
      Mat& h = out[n_ + i];
      if (potential_ == Potential::kQuartic) {
        for (int k = 0; k < n_; ++k) {
          for (int l = 0; l < n_; ++l) {
            double v = 0.0;
            if (i == k) v += q(l);
            if (i == l) v += q(k);
            if (k == l) v += q(i);
            h(k, l) = -2.0 * v;
          }
        }
      }
      for (int k = 0; k < n_; ++k) {
        for (int l = 0; l < n_; ++l) {
          double v = f.d3[i](k, l) - p(i) * f.d2(k, l);
          if (i == k) v -= f.d1(l);
          if (i == l) v -= f.d1(k);
          h(n_ + k, n_ + l) = v;
        }
      }
    }
  }
  void diffusion_hessian(double, const Vec& x, Tensor4& out) const override {
    const FrictionJet f = friction_jet(friction_, x.tail(n_));
    const double s = std::sqrt(2.0 * f.phi);
    out.resize(2 * n_, 2 * n_, 2 * n_);
    out.set_zero();
    for (int k = 0; k < n_; ++k) {
      for (int l = 0; l < n_; ++l) {
        const double v = f.d2(k, l) / s - f.d1(k) * f.d1(l) / (s * s * s);
        out(n_ + k, n_ + l).bottomRightCorner(n_, n_) = v * Mat::Identity(n_, n_);
      }
    }
  }

 private:
  int n_;
  FrictionProfile friction_;
  Potential potential_;
};

struct LangevinConstants {
  double k_tilde = 1.0;
  double m_tilde = 1.0;
  double sup_gamma = 1.0;
  double a = 0.0;
  double b = 0.0;
  double gamma_star = 0.0;
  double gamma = 0.0;
};

inline LangevinConstants langevin_constants(double k_tilde, double m_tilde, double sup_gamma,
                                            std::optional<double> gamma = std::nullopt) {
  if (!(k_tilde > 0.0 && m_tilde > 0.0 && sup_gamma > 0.0)) {
    throw ArgumentError("langevin_constants: k_tilde, m_tilde and sup|Gamma| must be > 0");
  }
  LangevinConstants k{k_tilde, m_tilde, sup_gamma};
  k.b = std::min({1.0 / (k_tilde * sup_gamma), m_tilde, std::sqrt(k_tilde)});
  k.a = 0.25 * std::min(k.b / k_tilde, m_tilde);
  k.gamma_star =
      0.125 * std::min(1.0 / (k_tilde * k.b * sup_gamma), m_tilde / (4.0 * sup_gamma));
  k.gamma = gamma.value_or(k.gamma_star);
  if (!(k.gamma > 0.0 && k.gamma <= k.gamma_star)) {
    throw ArgumentError("langevin_constants: gamma must lie in (0, gamma*]");
  }
  return k;
}

/// Constants for a gallery Langevin model: k_tilde = m_tilde = 1 for both
/// potentials and friction profiles.
inline LangevinConstants langevin_constants(const LangevinModel& m) {
  return langevin_constants(1.0, 1.0, m.sup_gamma());
}

/// E(q, p) = U(q) + a|q|^2 + b q.p + |p|^2; V = exp(gamma E).
class LangevinLyapunovField final : public ScalarField {
 public:
  LangevinLyapunovField(int n, Potential u, const LangevinConstants& k, double exponent_scale = 1.0)
      : n_(n), u_(u), k_(k), scale_(exponent_scale) {}

  int dim() const override { return 2 * n_; }

  double exponent(const Vec& x) const {
    const Vec q = x.head(n_), p = x.tail(n_);
    return potential_value(u_, q) + k_.a * q.squaredNorm() + k_.b * q.dot(p) + p.squaredNorm();
  }

  FieldJet jet(double, const Vec& x) const override {
    const Vec q = x.head(n_), p = x.tail(n_);
    const double g = k_.gamma * scale_;
    Vec ge(2 * n_);
    ge.head(n_) = potential_gradient(u_, q) + 2.0 * k_.a * q + k_.b * p;
    ge.tail(n_) = k_.b * q + 2.0 * p;
    Mat he = Mat::Zero(2 * n_, 2 * n_);
    he.topLeftCorner(n_, n_) = potential_hessian(u_, q) + 2.0 * k_.a * Mat::Identity(n_, n_);
    he.topRightCorner(n_, n_) = k_.b * Mat::Identity(n_, n_);
    he.bottomLeftCorner(n_, n_) = k_.b * Mat::Identity(n_, n_);
    he.bottomRightCorner(n_, n_) = 2.0 * Mat::Identity(n_, n_);
    FieldJet jet;
    jet.log_scale = g * exponent(x);
    jet.value = 1.0;
    jet.grad = g * ge;
    jet.hess = g * he + g * g * ge * ge.transpose();
    return jet;
  }

 private:
  int n_;
  Potential u_;
  LangevinConstants k_;
  double scale_;
};

/// gamma E as a field (unscaled), used as the U of the exponential
/// integrability condition.
class LangevinExponentField final : public ScalarField {
 public:
  LangevinExponentField(int n, Potential u, const LangevinConstants& k) : field_(n, u, k), k_(k) {}
  int dim() const override { return field_.dim(); }
  FieldJet jet(double t, const Vec& x) const override {
    const FieldJet v = field_.jet(t, x);
    FieldJet out;
    out.value = v.log_scale;
    out.grad = v.grad;
    out.hess = v.hess - v.grad * v.grad.transpose();
    return out;
  }

 private:
  LangevinLyapunovField field_;
  LangevinConstants k_;
};

/// LV/(gamma V) + b/(16 k) |q|^2 + m/16 |p|^2 at x; bounded above by a
/// constant when the quadratic-decay structure holds.
inline double langevin_decay_quantity(const LangevinModel& model, const LangevinConstants& k,
                                      const Vec& x) {
  const LangevinLyapunovField V(model.half_dim(), model.potential(), k);
  const int n = model.half_dim();
  return generator_ratio(model, V, 0.0, x) / k.gamma +
         k.b / (16.0 * k.k_tilde) * x.head(n).squaredNorm() +
         k.m_tilde / 16.0 * x.tail(n).squaredNorm();
}

// ---------------------------------------------------------------------------
// Models without certificates

/// Lorenz system with additive noise s dW.
class LorenzModel final : public SdeModel {
 public:
  LorenzModel(double sigma = 10.0, double rho = 28.0, double beta = 8.0 / 3.0, double noise = 1.0)
      : s_(sigma), r_(rho), b_(beta), noise_(noise) {}
  std::string name() const override { return "lorenz"; }
  int dim() const override { return 3; }
  DomainBox domain() const override { return DomainBox::cube(3, -30.0, 30.0); }

  void drift(double, const Vec& x, Vec& out) const override {
    out.resize(3);
    out(0) = s_ * (x(1) - x(0));
    out(1) = x(0) * (r_ - x(2)) - x(1);
    out(2) = x(0) * x(1) - b_ * x(2);
  }
  void diffusion(double, const Vec&, Mat& out) const override {
    out = noise_ * Mat::Identity(3, 3);
  }
  void drift_jacobian(double, const Vec& x, Mat& out) const override {
    out.resize(3, 3);
    out << -s_, s_, 0.0, r_ - x(2), -1.0, -x(0), x(1), x(0), -b_;
  }
  void diffusion_jacobian(double, const Vec&, Tensor3& out) const override {
    out.resize(3, 3, 3);
    out.set_zero();
  }
  void drift_hessian(double, const Vec&, Tensor3& out) const override {
    out.resize(3, 3, 3);
    out.set_zero();
    out[1](0, 2) = out[1](2, 0) = -1.0;
    out[2](0, 1) = out[2](1, 0) = 1.0;
  }
  void diffusion_hessian(double, const Vec&, Tensor4& out) const override {
    out.resize(3, 3, 3);
    out.set_zero();
  }

 private:
  double s_, r_, b_, noise_;
};

/// dX_i = (X_i - X_i^3) dt + s dW_i.
class GinzburgLandauModel final : public SdeModel {
 public:
  explicit GinzburgLandauModel(int dim = 2, double noise = 1.0) : dim_(dim), noise_(noise) {
    if (dim < 1 || dim > kMaxDim) throw ArgumentError("ginzburg_landau: dim out of range");
  }
  std::string name() const override { return "ginzburg_landau"; }
  int dim() const override { return dim_; }

  void drift(double, const Vec& x, Vec& out) const override {
    out = x - x.cwiseProduct(x).cwiseProduct(x);
  }
  void diffusion(double, const Vec&, Mat& out) const override {
    out = noise_ * Mat::Identity(dim_, dim_);
  }
  void drift_jacobian(double, const Vec& x, Mat& out) const override {
    out.setZero(dim_, dim_);
    for (int i = 0; i < dim_; ++i) out(i, i) = 1.0 - 3.0 * x(i) * x(i);
  }
  void diffusion_jacobian(double, const Vec&, Tensor3& out) const override {
    out.resize(dim_, dim_, dim_);
    out.set_zero();
  }
  void drift_hessian(double, const Vec& x, Tensor3& out) const override {
    out.resize(dim_, dim_, dim_);
    out.set_zero();
    for (int i = 0; i < dim_; ++i) out[i](i, i) = -6.0 * x(i);
  }
  void diffusion_hessian(double, const Vec&, Tensor4& out) const override {
    out.resize(dim_, dim_, dim_);
    out.set_zero();
  }

 private:
  int dim_;
  double noise_;
};

/// Scalar dX = -X^3 dt + s dW; the classic example where Euler-Maruyama blows up.
class CubicModel final : public SdeModel {
 public:
  explicit CubicModel(double noise = 0.0) : noise_(noise) {}
  std::string name() const override { return "cubic"; }
  int dim() const override { return 1; }

  void drift(double, const Vec& x, Vec& out) const override {
    out.resize(1);
    out(0) = -x(0) * x(0) * x(0);
  }
  void diffusion(double, const Vec&, Mat& out) const override { out = Mat::Constant(1, 1, noise_); }
  void drift_jacobian(double, const Vec& x, Mat& out) const override {
    out = Mat::Constant(1, 1, -3.0 * x(0) * x(0));
  }
  void diffusion_jacobian(double, const Vec&, Tensor3& out) const override {
    out.resize(1, 1, 1);
    out.set_zero();
  }
  void drift_hessian(double, const Vec& x, Tensor3& out) const override {
    out.resize(1, 1, 1);
    out[0](0, 0) = -6.0 * x(0);
  }
  void diffusion_hessian(double, const Vec&, Tensor4& out) const override {
    out.resize(1, 1, 1);
    out.set_zero();
  }

 private:
  double noise_;
};

// ---------------------------------------------------------------------------
// Construction by name

using ModelParams = std::map<std::string, std::string>;

struct ModelBundle {
  ModelPtr model;
  std::optional<LyapunovCertificate> certificate;
  std::optional<LipschitzEnvelope> envelope;
  std::optional<ExpIntegrabilityData> exp_data;
  /// Why there is no certificate, when there is none.
  std::string certificate_status = "ok";
  /// E X_t from x0, when known in closed form.
  std::function<Vec(const Vec&, double)> analytic_mean;
  /// X_t as a function of (x0, t, W_t), when the solution is explicit.
  std::function<Vec(const Vec&, double, const Vec&)> exact_solution;

  const LyapunovCertificate& require_certificate() const {
    if (!certificate) throw UnsupportedError(model->name() + ": " + certificate_status);
    return *certificate;
  }
  const LipschitzEnvelope& require_envelope() const {
    if (!envelope) throw UnsupportedError(model->name() + ": no Lipschitz envelope available");
    return *envelope;
  }
  const ExpIntegrabilityData& require_exp_data() const {
    if (!exp_data) {
      throw UnsupportedError(model->name() + ": no exponential-integrability data available");
    }
    return *exp_data;
  }
};

inline const std::vector<std::string>& model_names() {
  static const std::vector<std::string> names = {"ou",     "gbm",    "dvdp",
                                                 "langevin_vf", "lorenz", "ginzburg_landau",
                                                 "cubic"};
  return names;
}

inline std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// Candidates within edit distance 3, closest first.
inline std::vector<std::string> suggest(const std::string& name,
                                        const std::vector<std::string>& candidates) {
  std::vector<std::pair<std::size_t, std::string>> scored;
  for (const auto& c : candidates) {
    const auto d = edit_distance(name, c);
    if (d <= 3 || c.rfind(name, 0) == 0) scored.emplace_back(d, c);
  }
  std::sort(scored.begin(), scored.end());
  std::vector<std::string> out;
  for (auto& s : scored) out.push_back(s.second);
  return out;
}

namespace detail {

class ParamReader {
 public:
  ParamReader(std::string model, const ModelParams& params) : model_(std::move(model)), params_(params) {}

  double number(const std::string& key, double fallback) {
    used_.push_back(key);
    const auto it = params_.find(key);
    if (it == params_.end()) return fallback;
    try {
      std::size_t pos = 0;
      const double v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw ArgumentError(model_ + ": parameter " + key + " is not a number: '" + it->second + "'");
    }
  }

  int integer(const std::string& key, int fallback) {
    const double v = number(key, fallback);
    if (v != std::floor(v)) throw ArgumentError(model_ + ": parameter " + key + " must be an integer");
    return static_cast<int>(v);
  }

  std::string choice(const std::string& key, const std::string& fallback,
                     const std::vector<std::string>& allowed) {
    used_.push_back(key);
    const auto it = params_.find(key);
    const std::string v = it == params_.end() ? fallback : it->second;
    if (std::find(allowed.begin(), allowed.end(), v) == allowed.end()) {
      std::string msg = model_ + ": parameter " + key + " must be one of";
      for (const auto& a : allowed) msg += " " + a;
      throw ArgumentError(msg);
    }
    return v;
  }

  void finish() const {
    for (const auto& [key, value] : params_) {
      if (std::find(used_.begin(), used_.end(), key) == used_.end()) {
        std::string msg = model_ + ": unknown parameter '" + key + "'";
        const auto s = suggest(key, used_);
        if (!s.empty()) msg += " (did you mean '" + s.front() + "'?)";
        msg += "; known:";
        for (const auto& u : used_) msg += " " + u;
        throw ArgumentError(msg);
      }
    }
  }

 private:
  std::string model_;
  const ModelParams& params_;
  std::vector<std::string> used_;
};

/// Compass search for a local maximum of fn inside the box, starting at x.
template <typename Fn>
double local_box_max(const DomainBox& box, Vec x, Fn&& fn) {
  double best = fn(x);
  double step = 0.01 * (box.upper() - box.lower()).maxCoeff();
  const double tol = 1e-7 * (box.upper() - box.lower()).maxCoeff();
  for (int iter = 0; iter < 2000 && step > tol; ++iter) {
    bool improved = false;
    for (int i = 0; i < x.size(); ++i) {
      for (double sgn : {1.0, -1.0}) {
        Vec y = x;
        y(i) = std::clamp(y(i) + sgn * step, box.lower()(i), box.upper()(i));
        const double v = fn(y);
        if (v > best) {
          best = v;
          x = y;
          improved = true;
        }
      }
    }
    if (!improved) step *= 0.5;
  }
  return best;
}

/// alpha = 1.1 * max(0, M), M the max of (d_t + L)V / V over the domain box:
/// sampled, then refined by local search from the best samples, since the
/// cutoff in V produces narrow ridges that sampling alone under-resolves.
inline double calibrate_alpha(const SdeModel& model, const ScalarField& V, const DomainBox& box,
                              std::size_t points) {
  const auto ratio = [&](const Vec& x) { return generator_ratio(model, V, 0.0, x); };
  const std::uint64_t seed = 0x5eedULL, stream = 7;
  const auto scan = scan_box(box, points, seed, 0, ratio, stream);
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < scan.values.size(); ++i) {
    if (std::isfinite(scan.values[i])) order.push_back(i);
  }
  const std::size_t starts = std::min<std::size_t>(32, order.size());
  std::partial_sort(order.begin(), order.begin() + starts, order.end(),
                    [&](std::size_t a, std::size_t b) { return scan.values[a] > scan.values[b]; });
  const CounterStream sampler({seed, stream, StreamPurpose::kSampling});
  double best = scan.max_value;
  for (std::size_t j = 0; j < starts; ++j) {
    const Vec x = box.from_unit(unit_cube_point(sampler, order[j], box.dim()));
    best = std::max(best, local_box_max(box, x, ratio));
  }
  return 1.1 * std::max(0.0, best);
}

}  // namespace detail

/// Builds a gallery model with whatever certificate, envelope and
/// exponential-integrability data are known for it.
inline ModelBundle make_model(const std::string& name, const ModelParams& params = {}) {
  ModelBundle bundle;
  detail::ParamReader p(name, params);

  if (name == "ou") {
    const double theta = p.number("theta", 1.0), sigma = p.number("sigma", 1.0);
    const int dim = p.integer("dim", 1);
    p.finish();
    auto m = std::make_shared<OuModel>(theta, sigma, dim);
    bundle.model = m;
    bundle.analytic_mean = [theta](const Vec& x0, double t) -> Vec { return std::exp(-theta * t) * x0; };
    bundle.envelope = LipschitzEnvelope{
        [theta, dim](double, const Vec&) { return std::abs(theta) * dim; }, "|theta| * dim"};
    if (theta > 0.0) {
      // V = exp(g |x|^2) with g = theta / (4 s^2): L V / V = g s^2 n - (2 g theta - 2 g^2 s^2)|x|^2.
      const double g = sigma != 0.0 ? theta / (4.0 * sigma * sigma) : 0.25;
      auto field = std::make_shared<LambdaField>(dim, [g, dim](double, const Vec& x) {
        FieldJet jet;
        jet.log_scale = g * x.squaredNorm();
        jet.value = 1.0;
        jet.grad = 2.0 * g * x;
        jet.hess = 2.0 * g * Mat::Identity(dim, dim) + 4.0 * g * g * x * x.transpose();
        return jet;
      });
      bundle.certificate = LyapunovCertificate{field, g * sigma * sigma * dim, 0.0, 1.0, m->domain()};
      auto u = std::make_shared<LambdaField>(dim, [g, dim](double, const Vec& x) {
        FieldJet jet;
        jet.value = g * x.squaredNorm();
        jet.grad = 2.0 * g * x;
        jet.hess = 2.0 * g * Mat::Identity(dim, dim);
        return jet;
      });
      const double ubar = -g * sigma * sigma * dim;
      bundle.exp_data = ExpIntegrabilityData{u, [ubar](const Vec&) { return ubar; }, 0.0};
    } else {
      bundle.certificate_status = "no certificate for theta <= 0";
    }
  } else if (name == "gbm") {
    const double mu = p.number("mu", 0.1), sigma = p.number("sigma", 0.2);
    const int dim = p.integer("dim", 1);
    p.finish();
    auto m = std::make_shared<GbmModel>(mu, sigma, dim);
    bundle.model = m;
    bundle.certificate_status = "no certificate";
    bundle.analytic_mean = [mu](const Vec& x0, double t) -> Vec { return std::exp(mu * t) * x0; };
    bundle.exact_solution = [m](const Vec& x0, double t, const Vec& w) { return m->exact(x0, t, w); };
    const double lip = std::abs(mu) + sigma * sigma;
    bundle.envelope = LipschitzEnvelope{[lip, dim](double, const Vec&) { return lip * dim; },
                                        "(|mu| + sigma^2) * dim"};
  } else if (name == "dvdp") {
    const double a1 = p.number("alpha1", 1.0), a2 = p.number("alpha2", 1.0),
                 a3 = p.number("alpha3", 1.0), b1 = p.number("beta1", 0.5),
                 b3 = p.number("beta3", 0.5);
    const double gamma = p.number("gamma", -1.0);
    p.finish();
    auto m = std::make_shared<DvdpModel>(a1, a2, a3, b1, b3);
    bundle.model = m;
    bundle.envelope = dvdp_envelope(*m);
    if (a3 > 0.0) {
      const auto k = dvdp_constants(a1, a2, a3, b1, b3,
                                    gamma >= 0.0 ? std::optional<double>(gamma) : std::nullopt);
      auto field = std::make_shared<DvdpLyapunovField>(k);
      const double alpha = detail::calibrate_alpha(*m, *field, m->domain(), 100000);
      bundle.certificate = LyapunovCertificate{field, alpha, 0.0, 1.0, m->domain()};
    } else {
      bundle.certificate_status = "certificate requires alpha3 > 0";
    }
  } else if (name == "langevin_vf") {
    const int n = p.integer("n", 2);
    const auto friction = p.choice("friction", "variable", {"variable", "constant"});
    const auto potential = p.choice("potential", "quadratic", {"quadratic", "quartic"});
    p.finish();
    auto m = std::make_shared<LangevinModel>(
        n, friction == "variable" ? FrictionProfile::kVariable : FrictionProfile::kConstant,
        potential == "quadratic" ? Potential::kQuadratic : Potential::kQuartic);
    bundle.model = m;
    const auto k = langevin_constants(*m);
    auto field = std::make_shared<LangevinLyapunovField>(n, m->potential(), k);
    const double alpha = detail::calibrate_alpha(*m, *field, m->domain(), 100000);
    bundle.certificate = LyapunovCertificate{field, alpha, 0.0, 1.0, m->domain()};
    if (m->friction() == FrictionProfile::kConstant) {
      // With Gamma = I, L V / V <= 2 gamma Tr(Gamma) everywhere.
      auto u = std::make_shared<LangevinExponentField>(n, m->potential(), k);
      const double ubar = -2.0 * k.gamma * n;
      bundle.exp_data = ExpIntegrabilityData{u, [ubar](const Vec&) { return ubar; }, 0.0};
    }
  } else if (name == "lorenz") {
    const double s = p.number("sigma", 10.0), r = p.number("rho", 28.0),
                 b = p.number("beta", 8.0 / 3.0), noise = p.number("noise", 1.0);
    p.finish();
    bundle.model = std::make_shared<LorenzModel>(s, r, b, noise);
    bundle.certificate_status = "no certificate";
  } else if (name == "ginzburg_landau") {
    const int dim = p.integer("dim", 2);
    const double noise = p.number("noise", 1.0);
    p.finish();
    bundle.model = std::make_shared<GinzburgLandauModel>(dim, noise);
    bundle.certificate_status = "no certificate";
  } else if (name == "cubic") {
    const double noise = p.number("sigma", 0.0);
    p.finish();
    bundle.model = std::make_shared<CubicModel>(noise);
    bundle.certificate_status = "no certificate";
  } else {
    std::string msg = "unknown model '" + name + "'";
    const auto s = suggest(name, model_names());
    if (!s.empty()) msg += " (did you mean '" + s.front() + "'?)";
    msg += "; available:";
    for (const auto& n : model_names()) msg += " " + n;
    throw ArgumentError(msg);
  }
  return bundle;
}

}  // namespace tamed_sde
