#include <catch_amalgamated.hpp>

#include "tamed_sde/feynman_kac.hpp"
#include "tamed_sde/gallery.hpp"

#include <cmath>
#include <sstream>

using namespace tamed_sde;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

ObservableTriple constants(double f, double c, double g) {
  auto obs = ObservableTriple::terminal([g](const Vec&) { return g; },
                                        [](const Vec& x) -> Vec { return Vec::Zero(x.size()); });
  obs.f = [f](double, const Vec&) { return f; };
  obs.c = [c](double, const Vec&) { return c; };
  return obs;
}

ObservableTriple identity_payoff() {
  return ObservableTriple::terminal([](const Vec& x) { return x(0); },
                                    [](const Vec& x) -> Vec {
                                      Vec g = Vec::Zero(x.size());
                                      g(0) = 1.0;
                                      return g;
                                    });
}

ObservableTriple sumsq_payoff() {
  return ObservableTriple::terminal([](const Vec& x) { return x.squaredNorm(); },
                                    [](const Vec& x) -> Vec { return 2.0 * x; });
}

}  // namespace

TEST_CASE("constant discount") {
  FkOptions opt;
  opt.paths = 50;
  const auto est = fk_estimate(OuModel(), constants(0, 1, 1), 0.0, make_vec({0.3}), 1.0, opt);
  CHECK_THAT(est.mean, WithinAbs(std::exp(-1.0), 1e-12));
  CHECK(est.ci_half_width < 1e-12);
}

TEST_CASE("constant source") {
  FkOptions opt;
  opt.paths = 50;
  const auto est = fk_estimate(OuModel(), constants(1, 0, 0), 0.5, make_vec({0.3}), 2.5, opt);
  CHECK_THAT(est.mean, WithinAbs(2.0, 1e-12));
}

TEST_CASE("OU mean by Monte Carlo") {
  FkOptions opt;
  opt.paths = 100000;
  opt.seed = 12;
  const auto est = fk_estimate(OuModel(), identity_payoff(), 0.0, make_vec({1.0}), 1.0, opt);
  CHECK(std::abs(est.mean - std::exp(-1.0)) < 3.0 * est.ci_half_width);
  CHECK(est.diverged_count == 0);
  CHECK_FALSE(est.flagged);
}

TEST_CASE("pathwise gradients") {
  FkOptions opt;
  opt.paths = 200;
  opt.scheme = Scheme::kEulerMaruyama;
  SECTION("OU gradient is the deterministic Jacobian") {
    const auto g = fk_gradient(OuModel(), identity_payoff(), 0.0, make_vec({1.0}), 1.0, opt);
    CHECK_THAT(g.components[0].mean, WithinRel(std::pow(1.0 - 1e-3, 1000), 1e-10));
    CHECK_THAT(g.components[0].mean, WithinAbs(std::exp(-1.0), 2e-4));
    const auto fd = fk_gradient_fd(OuModel(), identity_payoff(), 0.0, make_vec({1.0}), 1.0, opt, 1e-3);
    CHECK_THAT(fd[0].mean, WithinAbs(g.components[0].mean, 1e-6));
  }
  SECTION("constant payoff with constant discount has zero gradient") {
    const auto g = fk_gradient(DvdpModel(), constants(0, 0.5, 2.0), 0.0, make_vec({1.0, 1.0}), 1.0, opt);
    CHECK(g.mean().norm() == 0.0);
  }
  SECTION("DvdP pathwise gradient agrees with CRN differences") {
    opt.paths = 2000;
    opt.delta = 1e-2;
    const Vec x = make_vec({1.0, 1.0});
    const auto g = fk_gradient(DvdpModel(), sumsq_payoff(), 0.0, x, 1.0, opt);
    const auto fd = fk_gradient_fd(DvdpModel(), sumsq_payoff(), 0.0, x, 1.0, opt, 1e-4);
    for (int i = 0; i < 2; ++i) {
      CHECK_THAT(g.components[i].mean, WithinRel(fd[i].mean, 1e-3));
    }
  }
  SECTION("source and discount gradients agree with CRN differences") {
    opt.paths = 500;
    opt.delta = 1e-2;
    auto obs = sumsq_payoff();
    obs.f = [](double, const Vec& x) { return std::sin(x(0)); };
    obs.grad_f = [](double, const Vec& x) -> Vec { return make_vec({std::cos(x(0)), 0.0}); };
    obs.c = [](double, const Vec& x) { return 0.1 * x(1) * x(1); };
    obs.grad_c = [](double, const Vec& x) -> Vec { return make_vec({0.0, 0.2 * x(1)}); };
    const Vec x = make_vec({0.5, -0.5});
    const auto g = fk_gradient(DvdpModel(), obs, 0.0, x, 1.0, opt);
    const auto fd = fk_gradient_fd(DvdpModel(), obs, 0.0, x, 1.0, opt, 1e-5);
    for (int i = 0; i < 2; ++i) {
      CHECK_THAT(g.components[i].mean, WithinAbs(fd[i].mean, 1e-5 * (1 + std::abs(fd[i].mean))));
    }
  }
  SECTION("missing gradients") {
    auto obs = ObservableTriple::terminal([](const Vec&) { return 1.0; });
    CHECK_THROWS_AS(fk_gradient(OuModel(), obs, 0.0, make_vec({1.0}), 1.0, opt), ConfigurationError);
  }
}

TEST_CASE("Kolmogorov stencil") {
  const DvdpModel m;
  const auto pts = kolmogorov_stencil(m, sumsq_payoff(), 0.5, make_vec({1.0, 1.0}), 0.05, 0.02);
  CHECK(pts.size() == 11);
  double total = 0.0;
  for (const auto& p : pts) total += p.weight;
  CHECK_THAT(total, WithinAbs(0.0, 1e-9));
  CHECK_THROWS_AS(kolmogorov_stencil(m, sumsq_payoff(), 0.5, make_vec({1.0, 1.0}), 0.0, 0.02),
                  ArgumentError);
}

TEST_CASE("analytic residuals") {
  SECTION("OU with v = x exp(-(T - t))") {
    const auto v = [](double t, const Vec& x) { return x(0) * std::exp(-(1.0 - t)); };
    for (double x : {-1.0, 0.5, 2.0}) {
      const auto r = pde_residual_analytic(OuModel(), identity_payoff(), v, 0.5, make_vec({x}), 0.05,
                                           1e-3);
      CHECK(std::abs(r.residual) < 1e-6);
    }
  }
  SECTION("constant v") {
    const auto r = pde_residual_analytic(DvdpModel(), constants(0, 0, 3), [](double, const Vec&) { return 3.0; },
                                         0.2, make_vec({1.0, -1.0}), 0.05, 0.02);
    CHECK_THAT(r.residual, WithinAbs(0.0, 1e-10));
  }
  SECTION("quadratic v under OU in two dimensions") {
    // v = |x|^2 e^{-2(T-t)} + (1 - e^{-2(T-t)}) solves v_t + Lv = 0 for b = -x, sigma = I.
    const OuModel ou(1.0, 1.0, 2);
    const auto v = [](double t, const Vec& x) {
      const double e = std::exp(-2.0 * (1.0 - t));
      return x.squaredNorm() * e + 2.0 * 0.5 * (1.0 - e);
    };
    const auto r = pde_residual_analytic(ou, sumsq_payoff(), v, 0.3, make_vec({0.4, -0.7}), 0.05, 1e-3);
    CHECK(std::abs(r.residual) < 1e-5);
  }
}

TEST_CASE("Monte Carlo residual is consistent with zero for OU") {
  FkOptions opt;
  opt.paths = 20000;
  opt.delta = 1e-2;
  opt.seed = 4;
  const auto r = pde_residual(OuModel(), identity_payoff(), 0.5, make_vec({1.0}), 1.0, 0.05, 0.02, opt);
  CHECK(r.stencil_points == 5);
  CHECK(std::abs(r.residual) <= 3.0 * r.ci_half_width + 1e-12);
  CHECK(r.warnings.empty());
}

TEST_CASE("residual warns outside the domain box") {
  FkOptions opt;
  opt.paths = 10;
  opt.delta = 0.1;
  const auto r = pde_residual(OuModel(), identity_payoff(), 0.5, make_vec({4.99}), 1.0, 0.05, 0.1, opt);
  CHECK_FALSE(r.warnings.empty());
  CHECK_THROWS_AS(pde_residual(OuModel(), identity_payoff(), 0.95, make_vec({0.0}), 1.0, 0.05, 0.1, opt),
                  ArgumentError);
}

TEST_CASE("fk csv") {
  std::ostringstream os;
  write_fk_csv(os, {{"u", 0.0, make_vec({1.0, 2.0}), 0.5, 0.01}}, 2, 0.001, 100, 7);
  CHECK(os.str() == "quantity,t,x_0,x_1,mean,ci,delta,N,seed\nu,0,1,2,0.5,0.01,0.001,100,7\n");
}
