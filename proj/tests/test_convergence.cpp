#include <catch_amalgamated.hpp>

#include "tamed_sde/convergence.hpp"
#include "tamed_sde/gallery.hpp"

#include <cmath>
#include <sstream>

using namespace tamed_sde;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

std::vector<double> powers_of_two(int from, int to) {
  std::vector<double> out;
  for (int e = from; e >= to; --e) out.push_back(std::ldexp(1.0, e));
  return out;
}

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

}  // namespace

TEST_CASE("fit_slope") {
  SECTION("exact line") {
    const auto f = fit_slope({{1, 1}, {0.5, 0.5}, {0.25, 0.25}});
    CHECK_THAT(f.slope, WithinAbs(1.0, 1e-14));
    CHECK_THAT(f.r_squared, WithinAbs(1.0, 1e-14));
  }
  SECTION("two points") {
    CHECK_THAT(fit_slope({{1, 1}, {0.25, 0.5}}).slope, WithinAbs(0.5, 1e-14));
  }
  SECTION("errors proportional to delta") {
    std::vector<ConvergenceRow> rows;
    for (double d : powers_of_two(-1, -8)) rows.push_back({d, 3.7 * d});
    CHECK_THAT(fit_slope(rows).slope, WithinAbs(1.0, 1e-12));
  }
  SECTION("non-positive rows are dropped with a warning") {
    const auto f = fit_slope({{1, 1}, {0.5, 0.0}, {0.25, 0.25}});
    CHECK(f.rows_used == 2);
    REQUIRE(f.warnings.size() == 1);
    CHECK_THAT(f.warnings[0], ContainsSubstring("dropped"));
    CHECK_THROWS_AS(fit_slope({{1, 1}, {0.5, 0.0}}), ArgumentError);
  }
}

TEST_CASE("closed-form OU weak error") {
  CHECK_THAT(ou_em_weak_error(1.0, 1.0, 1.0, 0.1), WithinAbs(0.019201, 1e-6));
  const auto r = ou_closed_form_curve(1.0, 1.0, 1.0, powers_of_two(-2, -9));
  CHECK_THAT(r.fit.slope, WithinAbs(1.0, 0.05));
  CHECK_FALSE(r.noise_dominated);
}

TEST_CASE("Monte Carlo OU mean matches the closed form") {
  CurveOptions opt;
  opt.scheme = Scheme::kEulerMaruyama;
  opt.h = [](const Vec& x) { return x(0); };
  opt.x0 = make_vec({1.0});
  opt.deltas = {0.25, 0.125};
  opt.reference = Reference::kAnalyticMean;
  opt.analytic_mean = std::exp(-1.0);
  opt.paths = 20000;
  const auto r = error_curve(OuModel(), opt);
  for (const auto& row : r.rows) {
    CHECK(std::abs(row.error - ou_em_weak_error(1, 1, 1, row.delta)) < 3.0 * row.ci_half_width);
  }
}

TEST_CASE("deterministic model: strong and weak errors coincide") {
  CurveOptions opt;
  opt.scheme = Scheme::kEulerMaruyama;
  opt.h = [](const Vec& x) { return x(0); };
  opt.x0 = make_vec({1.0});
  opt.deltas = powers_of_two(-2, -5);
  opt.paths = 4;
  const auto weak = error_curve(decay_model(), opt);
  opt.mode = ErrorMode::kStrong;
  const auto strong = error_curve(decay_model(), opt);
  for (std::size_t j = 0; j < weak.rows.size(); ++j) {
    CHECK_THAT(weak.rows[j].error, WithinRel(strong.rows[j].error, 1e-12));
  }
  CHECK_THAT(weak.fit.slope, WithinAbs(1.0, 0.1));
}

TEST_CASE("GBM strong order one half against the exact solution") {
  const auto b = make_model("gbm");
  CurveOptions opt;
  opt.scheme = Scheme::kEulerMaruyama;
  opt.mode = ErrorMode::kStrong;
  opt.x0 = make_vec({1.0});
  opt.deltas = powers_of_two(-4, -9);
  opt.reference = Reference::kExactPath;
  opt.exact_solution = b.exact_solution;
  opt.paths = 2000;
  const auto r = error_curve(*b.model, opt);
  CHECK_THAT(r.fit.slope, WithinAbs(0.5, 0.1));
}

TEST_CASE("tamed weak error curve is thread-independent") {
  CurveOptions opt;
  opt.h = [](const Vec& x) { return x.squaredNorm(); };
  opt.x0 = make_vec({1.0, 1.0});
  opt.deltas = powers_of_two(-3, -5);
  opt.paths = 300;
  opt.seed = 7;
  opt.threads = 1;
  const auto a = error_curve(DvdpModel(), opt);
  opt.threads = 6;
  const auto b = error_curve(DvdpModel(), opt);
  std::ostringstream ca, cb;
  write_convergence_csv(ca, a);
  write_convergence_csv(cb, b);
  CHECK(ca.str() == cb.str());
}

TEST_CASE("independent reference widens the CI") {
  CurveOptions opt;
  opt.h = [](const Vec& x) { return x(0); };
  opt.x0 = make_vec({1.0});
  opt.deltas = {0.25, 0.125};
  opt.paths = 2000;
  const auto coupled = error_curve(OuModel(), opt);
  opt.reference = Reference::kIndependent;
  const auto indep = error_curve(OuModel(), opt);
  CHECK(indep.rows[0].ci_half_width > coupled.rows[0].ci_half_width);
}

TEST_CASE("noise-dominated curves are flagged") {
  CurveOptions opt;
  opt.h = [](const Vec& x) { return x(0); };
  opt.x0 = make_vec({0.0});
  opt.deltas = {0.25, 0.125};
  opt.reference = Reference::kIndependent;
  opt.paths = 100;
  CHECK(error_curve(OuModel(), opt).noise_dominated);
}

TEST_CASE("error_curve argument errors") {
  CurveOptions opt;
  opt.h = [](const Vec& x) { return x(0); };
  opt.x0 = make_vec({1.0});
  opt.paths = 10;
  opt.deltas = {};
  CHECK_THROWS_AS(error_curve(OuModel(), opt), ArgumentError);
  opt.deltas = {0.125, 0.25};
  CHECK_THROWS_AS(error_curve(OuModel(), opt), ArgumentError);
  opt.deltas = {0.3, 0.1};
  CHECK_THROWS_AS(error_curve(OuModel(), opt), ArgumentError);
  opt.deltas = {0.25};
  opt.reference = Reference::kExactPath;
  CHECK_THROWS_AS(error_curve(OuModel(), opt), ArgumentError);
  opt.reference = Reference::kAnalyticMean;
  CHECK_THROWS_AS(error_curve(OuModel(), opt), ArgumentError);
}

TEST_CASE("divergence probe") {
  DivergenceOptions opt;
  opt.paths = 1000;
  SECTION("EM blows up on the cubic drift within five steps") {
    const auto r = divergence_probe(CubicModel(), make_vec({3.0}), opt);
    CHECK(r.fraction == 1.0);
    std::size_t early = 0;
    for (int k = 0; k < 5; ++k) early += r.histogram[k];
    CHECK(early == 1000);
  }
  SECTION("the tamed scheme does not") {
    opt.scheme = Scheme::kTamed;
    CHECK(divergence_probe(CubicModel(), make_vec({3.0}), opt).fraction == 0.0);
  }
  SECTION("EM on OU is contractive") {
    opt.delta = 0.1;
    CHECK(divergence_probe(OuModel(), make_vec({3.0}), opt).fraction == 0.0);
  }
  SECTION("errors") {
    opt.steps = 0;
    CHECK_THROWS_AS(divergence_probe(CubicModel(), make_vec({3.0}), opt), ArgumentError);
  }
}

TEST_CASE("exponential moments under the tamed scheme") {
  const auto k = dvdp_constants(1, 1, 1, 0.5, 0.5);
  const auto U = [g = k.gamma_max](const Vec& x) { return g * (std::pow(x(0), 4) + x(1) * x(1)); };
  const auto probe = exponential_moment_probe(DvdpModel(), Scheme::kTamed, U, 0.01, make_vec({1.0, 1.0}),
                                              1.0, {0.125, 0.0625}, 2000, 3);
  CHECK_THAT(probe.initial, WithinRel(std::exp(0.01), 1e-14));
  for (const auto& row : probe.rows) {
    CHECK(row.moment.mean < 10.0 * probe.initial);
    CHECK(row.diverged == 0);
  }
}

TEST_CASE("convergence csv and svg") {
  const auto r = ou_closed_form_curve(1.0, 1.0, 1.0, {0.5, 0.25});
  std::ostringstream csv, svg;
  write_convergence_csv(csv, r);
  CHECK_THAT(csv.str(), ContainsSubstring("delta,error,ci,scheme,mode,model,h,N,seed\n0.5,"));
  write_convergence_svg(svg, r);
  CHECK_THAT(svg.str(), ContainsSubstring("<svg"));
}
