#include <catch_amalgamated.hpp>

#include "tamed_sde/gallery.hpp"
#include "tamed_sde/variational.hpp"

#include <cmath>

using namespace tamed_sde;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

LambdaModel affine_model(double drift_scale, double noise, bool hessians) {
  LambdaModel::Callbacks cb;
  cb.drift = [drift_scale](double, const Vec& x, Vec& out) {
    out = Vec::Constant(x.size(), drift_scale);
  };
  cb.diffusion = [noise](double, const Vec& x, Mat& out) {
    out = noise * Mat::Identity(x.size(), x.size());
  };
  cb.drift_jacobian = [](double, const Vec& x, Mat& out) { out = Mat::Zero(x.size(), x.size()); };
  cb.diffusion_jacobian = [](double, const Vec& x, Tensor3& out) {
    const int n = static_cast<int>(x.size());
    out.resize(n, n, n);
    out.set_zero();
  };
  if (hessians) {
    cb.drift_hessian = cb.diffusion_jacobian;
    cb.diffusion_hessian = [](double, const Vec& x, Tensor4& out) {
      const int n = static_cast<int>(x.size());
      out.resize(n, n, n);
      out.set_zero();
    };
  }
  return LambdaModel("affine", 2, cb);
}

/// Deterministic linear decay dx = -x dt.
LambdaModel decay_model() {
  LambdaModel::Callbacks cb;
  cb.drift = [](double, const Vec& x, Vec& out) { out = -x; };
  cb.diffusion = [](double, const Vec& x, Mat& out) { out = Mat::Zero(x.size(), x.size()); };
  cb.drift_jacobian = [](double, const Vec& x, Mat& out) {
    out = -Mat::Identity(x.size(), x.size());
  };
  cb.diffusion_jacobian = [](double, const Vec& x, Tensor3& out) {
    const int n = static_cast<int>(x.size());
    out.resize(n, n, n);
    out.set_zero();
  };
  return LambdaModel("decay", 1, cb);
}

VariationalState run(const SdeModel& m, VariationalState s, const IncrementPath& inc, double dt,
                     int first, int last) {
  VariationWorkspace ws;
  for (int k = first; k < last; ++k) variation_step(s, inc.row(k), m, dt, ws);
  return s;
}

}  // namespace

TEST_CASE("OU Jacobian decays deterministically") {
  const OuModel ou(1.0, 1.0, 2);
  const double dt = 1e-4;
  const auto inc = gaussian_increments({1}, 10000, dt, 2);
  const auto s = run(ou, VariationalState::start(make_vec({0.4, -1.0}), 1), inc, dt, 0, 10000);
  CHECK_THAT(s.J(0, 0), WithinAbs(std::exp(-1.0), 1e-4));
  CHECK_THAT(s.J(1, 1), WithinAbs(std::exp(-1.0), 1e-4));
  CHECK(s.J(0, 1) == 0.0);
}

TEST_CASE("GBM Jacobian equals X / x0 pathwise") {
  const GbmModel gbm(0.1, 0.2);
  const double dt = 1e-3;
  for (std::uint64_t p = 0; p < 20; ++p) {
    const auto inc = gaussian_increments({4, p}, 1000, dt, 1);
    const double x0 = 1.7;
    const auto s = run(gbm, VariationalState::start(make_vec({x0}), 1), inc, dt, 0, 1000);
    CHECK_THAT(s.J(0, 0), WithinRel(s.x(0) / x0, 1e-10));
  }
}

TEST_CASE("constant coefficients give J = I and H = 0") {
  const auto m = affine_model(0.3, 0.8, true);
  const auto inc = gaussian_increments({2}, 50, 0.01, 2);
  const auto s = run(m, VariationalState::start(make_vec({1.0, 2.0}), 2), inc, 0.01, 0, 50);
  CHECK(s.J == Mat::Identity(2, 2));
  CHECK(s.second(make_vec({1.0, 0.0}), make_vec({0.0, 1.0})).norm() == 0.0);
}

TEST_CASE("second variation needs Hessians") {
  const auto m = affine_model(0.0, 1.0, false);
  auto s = VariationalState::start(make_vec({0.0, 0.0}), 2);
  CHECK_THROWS_AS(variation_step(s, make_vec({0.1, 0.1}), m, 0.01), ConfigurationError);
  CHECK_THROWS_AS(VariationalState::start(make_vec({0.0}), 3), ArgumentError);
}

TEST_CASE("Jacobians compose along the flow") {
  const DvdpModel m;
  const double dt = 1.0 / 256;
  for (std::uint64_t p = 0; p < 10; ++p) {
    const auto inc = gaussian_increments({6, p}, 256, dt, 2);
    const Vec x0 = make_vec({1.0, 1.0});
    const auto full = run(m, VariationalState::start(x0, 1), inc, dt, 0, 256);
    const auto first = run(m, VariationalState::start(x0, 1), inc, dt, 0, 128);
    const auto second = run(m, VariationalState::start(first.x, 1), inc, dt, 128, 256);
    REQUIRE_FALSE(full.diverged);
    CHECK((full.J - second.J * first.J).norm() < 1e-10 * (1.0 + full.J.norm()));
    CHECK((full.x - second.x).norm() < 1e-12 * (1.0 + full.x.norm()));
  }
}

TEST_CASE("J and H match finite differences of the discrete flow") {
  const DvdpModel m;
  const double dt = 1.0 / 128, h = 1e-5;
  const auto inc = gaussian_increments({8, 3}, 128, dt, 2);
  const Vec x0 = make_vec({0.8, -0.5});
  const auto base = run(m, VariationalState::start(x0, 2), inc, dt, 0, 128);
  for (int j = 0; j < 2; ++j) {
    Vec e = Vec::Zero(2);
    e(j) = h;
    const auto plus = run(m, VariationalState::start(x0 + e, 1), inc, dt, 0, 128);
    const auto minus = run(m, VariationalState::start(x0 - e, 1), inc, dt, 0, 128);
    const Vec fd_x = (plus.x - minus.x) / (2 * h);
    CHECK((base.J.col(j) - fd_x).norm() < 1e-6 * (1 + fd_x.norm()));
    const Mat fd_j = (plus.J - minus.J) / (2 * h);
    for (int mm = 0; mm < 2; ++mm) {
      for (int i = 0; i < 2; ++i) {
        CHECK_THAT(base.H[mm](i, j), WithinAbs(fd_j(mm, i), 1e-5 * (1 + std::abs(fd_j(mm, i)))));
      }
    }
  }
}

TEST_CASE("difference quotients") {
  ProbeOptions opt;
  opt.delta = 1.0 / 128;
  opt.paths = 1000;
  opt.seed = 2;
  SECTION("exact for linear SDEs") {
    for (const auto& row :
         difference_quotient_error(OuModel(), make_vec({1.0}), make_vec({1.0}), {1e-2, 1e-3}, opt)) {
      CHECK(row.estimate.mean < 1e-10);
    }
  }
  SECTION("DvdP error decreases with r") {
    const auto rows = difference_quotient_error(DvdpModel(), make_vec({1.0, 1.0}),
                                                make_vec({1.0, 0.0}), {1e-2, 1e-3, 1e-4}, opt);
    CHECK(rows[1].estimate.mean < rows[0].estimate.mean);
    CHECK(rows[2].estimate.mean < rows[1].estimate.mean);
    CHECK(rows[2].estimate.mean < 1e-2);
  }
  SECTION("CI shrinks like one over root N") {
    const Vec x = make_vec({1.0, 1.0}), k = make_vec({0.0, 1.0});
    opt.paths = 1000;
    const double a = difference_quotient_error(DvdpModel(), x, k, {1e-2}, opt)[0].estimate.ci_half_width;
    opt.paths = 10000;
    const double b = difference_quotient_error(DvdpModel(), x, k, {1e-2}, opt)[0].estimate.ci_half_width;
    CHECK_THAT(a / b, WithinRel(std::sqrt(10.0), 0.3));
  }
  SECTION("argument errors") {
    CHECK_THROWS_AS(difference_quotient_error(OuModel(), make_vec({1.0}), make_vec({1.0}), {}, opt),
                    ArgumentError);
    CHECK_THROWS_AS(
        difference_quotient_error(OuModel(), make_vec({1.0}), make_vec({1.0}), {-1.0}, opt),
        ArgumentError);
  }
}

TEST_CASE("sup moments") {
  ProbeOptions opt;
  opt.delta = 1.0 / 128;
  opt.paths = 500;
  const Vec e1 = make_vec({1.0});
  SECTION("OU first variation peaks at time zero") {
    const auto r = sup_moment(OuModel(), make_vec({1.0}), {e1}, 3.0, opt);
    CHECK(r.estimate.mean == 1.0);
    CHECK(r.diverged == 0);
  }
  SECTION("OU second variation vanishes") {
    CHECK(sup_moment(OuModel(), make_vec({1.0}), {e1, e1}, 2.0, opt).estimate.mean == 0.0);
  }
  SECTION("DvdP estimate is stable under 4N") {
    const Vec x = make_vec({1.0, 1.0}), d = make_vec({1.0, 0.0});
    opt.delta = 1e-2;
    opt.paths = 2500;
    const auto a = sup_moment(DvdpModel(), x, {d}, 2.0, opt);
    opt.paths = 10000;
    opt.seed = 1;
    const auto b = sup_moment(DvdpModel(), x, {d}, 2.0, opt);
    CHECK(std::isfinite(a.estimate.mean));
    CHECK(std::abs(a.estimate.mean - b.estimate.mean) <
          3.0 * std::hypot(a.estimate.ci_half_width, b.estimate.ci_half_width));
    CHECK(b.tail_share > 0.0);
    CHECK(b.tail_share < 1.0);
  }
  SECTION("argument errors") {
    CHECK_THROWS_AS(sup_moment(OuModel(), make_vec({1.0}), {e1}, 0.0, opt), ArgumentError);
    CHECK_THROWS_AS(sup_moment(OuModel(), make_vec({1.0}), {e1, e1, e1}, 1.0, opt), ArgumentError);
  }
}

TEST_CASE("Hoelder-in-time probe") {
  ProbeOptions opt;
  opt.delta = 1.0 / 4096;
  opt.paths = 2000;
  const std::vector<double> gaps{1.0 / 16, 1.0 / 32, 1.0 / 64, 1.0 / 128};
  SECTION("deterministic flow has slope k") {
    const auto p = holder_in_time_probe(decay_model(), make_vec({1.0}), 0, 2.0, 0.0, gaps, opt);
    CHECK_THAT(p.fit.slope, WithinAbs(2.0, 0.1));
  }
  SECTION("OU has slope about k / 2") {
    const auto p = holder_in_time_probe(OuModel(), make_vec({1.0}), 0, 2.0, 0.0, gaps, opt);
    CHECK_THAT(p.fit.slope, WithinAbs(1.0, 0.15));
  }
  SECTION("Brownian scaling") {
    const auto m = affine_model(0.0, 1.0, true);
    const auto p = holder_in_time_probe(m, make_vec({0.0, 0.0}), 0, 2.0, 0.0,
                                        {1.0 / 16, 1.0 / 64}, opt);
    CHECK_THAT(p.rows[0].estimate.mean / p.rows[1].estimate.mean, WithinRel(4.0, 0.15));
  }
  SECTION("argument errors") {
    CHECK_THROWS_AS(holder_in_time_probe(OuModel(), make_vec({1.0}), 3, 2.0, 0.0, gaps, opt),
                    ArgumentError);
    CHECK_THROWS_AS(holder_in_time_probe(OuModel(), make_vec({1.0}), 0, 2.0, 0.0, {1e-5, 1.0 / 16}, opt),
                    ArgumentError);
  }
}
