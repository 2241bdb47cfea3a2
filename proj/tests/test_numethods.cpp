#include "oscilloprobe/numethods.hpp"
#include "oscilloprobe/rng.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>
#include <vector>

using namespace oscilloprobe;
using std::numbers::pi;

namespace {

double max_diff(const Mat2& a, const Mat2& b) { return (a - b).max_abs(); }

OscParams random_params(Rng& rng, Regime regime) {
  OscParams p;
  p.omega0 = rng.uniform(0.3, 4.0);
  p.dt = rng.uniform(0.0, 1.0);
  p.x0 = rng.uniform(-1, 1);
  p.v0 = rng.uniform(-1, 1);
  switch (regime) {
    case Regime::undamped: break;
    case Regime::underdamped: p.gamma = rng.uniform(0.0, p.omega0); break;
    case Regime::critical: p.gamma = p.omega0; break;
    case Regime::overdamped: p.gamma = rng.uniform(p.omega0, 3.0 * p.omega0); break;
  }
  return p;
}

constexpr Regime kRegimes[] = {Regime::undamped, Regime::underdamped, Regime::critical,
                               Regime::overdamped};

}  // namespace

TEST_CASE("system matrix") {
  CHECK(system_matrix(1, 0) == Mat2{0, 1, -1, 0});
  CHECK(system_matrix(2, 0.5) == Mat2{0, 1, -4, -1});
  CHECK_THROWS_AS(system_matrix(0, 0), UsageError);

  Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    const double omega0 = rng.uniform(0.1, 4), gamma = rng.uniform(0, 6);
    const auto [l1, l2] = oracle::eigenvalues(system_matrix(omega0, gamma));
    const std::complex<double> disc = std::sqrt(std::complex<double>(gamma * gamma - omega0 * omega0));
    const std::complex<double> e1 = -gamma + disc, e2 = -gamma - disc;
    const bool direct = std::abs(l1 - e1) < 1e-9 && std::abs(l2 - e2) < 1e-9;
    const bool swapped = std::abs(l1 - e2) < 1e-9 && std::abs(l2 - e1) < 1e-9;
    CHECK((direct || swapped));
  }
}

TEST_CASE("mat_exp trivial cases") {
  CHECK(mat_exp(system_matrix(1.7, 0.3), 0.0) == Mat2::identity());
  const Mat2 quarter = mat_exp(system_matrix(1, 0), pi / 2);
  CHECK(max_diff(quarter, Mat2{0, 1, -1, 0}) < 1e-15);
  CHECK_THROWS_AS(mat_exp(Mat2{1, 0, 0, 1}, 0.1), UsageError);
  CHECK_THROWS_AS(mat_exp(system_matrix(1, 0), -0.1), UsageError);
}

TEST_CASE("mat_exp matches the truncated series oracle") {
  const Mat2 a = system_matrix(2, 0.3);
  CHECK(max_diff(mat_exp(a, 0.2), oracle::series_exp(a, 0.2)) < 1e-10);

  Rng rng(2);
  for (auto regime : kRegimes) {
    for (int i = 0; i < 100; ++i) {
      const OscParams p = random_params(rng, regime);
      const Mat2 am = system_matrix(p.omega0, p.gamma);
      // Keep ||A dt|| moderate so 30 series terms are converged.
      const double dt = std::min(p.dt, 2.0 / std::max(1.0, am.max_abs()));
      INFO(to_string(regime) << " omega0=" << p.omega0 << " gamma=" << p.gamma << " dt=" << dt);
      CHECK(max_diff(mat_exp(am, dt), oracle::series_exp(am, dt, 40)) < 1e-10);
    }
  }
  // Right at the numerical edge of critical damping.
  for (double rel : {1e-12, 1e-9, 1e-7, 1e-6, 1e-5}) {
    for (double sign : {-1.0, 1.0}) {
      const Mat2 am = system_matrix(1.5, 1.5 * (1 + sign * rel));
      CHECK(max_diff(mat_exp(am, 0.4), oracle::series_exp(am, 0.4, 40)) < 1e-10);
    }
  }
}

TEST_CASE("mat_exp: Liouville determinant and semigroup properties") {
  Rng rng(3);
  for (auto regime : kRegimes) {
    for (int i = 0; i < 100; ++i) {
      const OscParams p = random_params(rng, regime);
      const Mat2 a = system_matrix(p.omega0, p.gamma);
      const double t1 = rng.uniform(0, 1), t2 = rng.uniform(0, 1);
      const Mat2 e1 = mat_exp(a, t1);
      const double expected_det = std::exp(-2 * p.gamma * t1);
      // The determinant is a difference of products of entries, so its
      // attainable accuracy is relative to the squared entry scale.
      const double scale = std::max(expected_det, e1.max_abs() * e1.max_abs());
      CHECK(std::abs(e1.det() - expected_det) <= 1e-9 * scale);
      CHECK(max_diff(e1 * mat_exp(a, t2), mat_exp(a, t1 + t2)) < 1e-9);
    }
  }
}

TEST_CASE("one matrix-exponential step equals the closed form") {
  Rng rng(4);
  for (auto regime : kRegimes) {
    for (int i = 0; i < 100; ++i) {
      const OscParams p = random_params(rng, regime);
      const State stepped = mat_exp(system_matrix(p.omega0, p.gamma), p.dt) * State{p.x0, p.v0};
      const State exact = closed_form_state(p, 1);
      CHECK(std::abs(stepped.x - exact.x) < 1e-10);
      CHECK(std::abs(stepped.v - exact.v) < 1e-10);
    }
  }
}

TEST_CASE("taylor stepper") {
  const Mat2 a = system_matrix(1.3, 0.2);
  CHECK(taylor_stepper(a, 0.4, 0) == Mat2::identity());
  CHECK(max_diff(taylor_stepper(a, 0.4, 1), Mat2::identity() + 0.4 * a) < 1e-16);
  CHECK_THROWS_AS(taylor_stepper(a, 0.1, 9), UsageError);
  CHECK_THROWS_AS(taylor_stepper(a, 0.1, -1), UsageError);
}

TEST_CASE("taylor stepper converges to mat_exp and obeys the remainder bound") {
  Rng rng(5);
  for (auto regime : kRegimes) {
    for (int i = 0; i < 100; ++i) {
      const OscParams p = random_params(rng, regime);
      const Mat2 a = system_matrix(p.omega0, p.gamma);
      // Induced infinity norm of A dt.
      const double norm_inf = std::max(std::abs(a.a00) + std::abs(a.a01), std::abs(a.a10) + std::abs(a.a11));
      const double dt = std::min(p.dt, 3.0 / norm_inf);
      const double n = norm_inf * dt;
      const Mat2 exact = mat_exp(a, dt);
      for (int k = 0; k <= 8; ++k) {
        double bound = std::exp(n);
        for (int j = 1; j <= k + 1; ++j) bound *= n / j;
        // max-entry norm <= infinity norm <= bound
        CHECK(max_diff(taylor_stepper(a, dt, k), exact) <= bound * (1 + 1e-9) + 1e-15);
      }
      CHECK(max_diff(oracle::series_exp(a, dt, 30), exact) < 1e-10);
    }
  }
}

TEST_CASE("Adams-Bashforth coefficients and steps") {
  CHECK(adams_bashforth_coefficients(2) == std::vector<double>{1.5, -0.5});
  for (int s = 1; s <= 5; ++s) {
    double sum = 0;
    for (double b : adams_bashforth_coefficients(s)) sum += b;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-14));
  }
  CHECK_THROWS_AS(adams_bashforth_coefficients(0), UsageError);
  CHECK_THROWS_AS(adams_bashforth_coefficients(6), UsageError);

  // Order 1 is Euler.
  const Mat2 a = system_matrix(2.0, 0.1);
  auto st = make_stepper(1, {0.5, -0.3});
  const State next = ab_step(st, a, 0.05);
  const State euler = taylor_stepper(a, 0.05, 1) * State{0.5, -0.3};
  CHECK(next.x == doctest::Approx(euler.x).epsilon(1e-15));
  CHECK(next.v == doctest::Approx(euler.v).epsilon(1e-15));

  StepperState empty;
  empty.order = 2;
  CHECK_THROWS_AS(ab_step(empty, a, 0.1), UsageError);
}

TEST_CASE("AB2 local truncation error is third order on u' = lambda u") {
  // Scalar test equation embedded as a decoupled 2x2 system: with exact history
  // u_{n-1} = e^{-lambda h}, u_n = 1, the AB2 step differs from e^{lambda h} by
  // (5/12) lambda^3 h^3 + O(h^4).
  const double lambda = -0.8;
  std::vector<double> hs, errs;
  for (int i = 3; i <= 8; ++i) {
    const double h = std::ldexp(1.0, -i);
    const double un = 1.0, unm1 = std::exp(-lambda * h);
    const double next = un + h * (1.5 * lambda * un - 0.5 * lambda * unm1);
    const double err = std::abs(next - std::exp(lambda * h));
    hs.push_back(h);
    errs.push_back(err);
    CHECK(err / (h * h * h) == doctest::Approx(5.0 / 12.0 * std::abs(lambda * lambda * lambda)).epsilon(0.2));
  }
  CHECK(oracle::loglog_slope(hs, errs) == doctest::Approx(3.0).epsilon(0.05));
}

TEST_CASE("global convergence orders of the steppers") {
  const OscParams base{1.0, 0.0, 0.0, 1.0, 0.0};
  const double horizon = 2.0;
  auto global_error = [&](const std::string& method, double dt) {
    OscParams p = base;
    p.dt = dt;
    const auto steps = static_cast<std::size_t>(std::llround(horizon / dt));
    const auto path = run_stepper(method, p, steps);
    const State exact = closed_form_state(p, static_cast<std::int64_t>(steps));
    return std::hypot(path.back().x - exact.x, path.back().v - exact.v);
  };
  for (const auto& [method, order] : std::vector<std::pair<std::string, double>>{
           {"ab1", 1}, {"ab2", 2}, {"ab3", 3}, {"ab4", 4}, {"ab5", 5},
           {"taylor:1", 1}, {"taylor:2", 2}, {"taylor:3", 3}, {"taylor:4", 4}}) {
    std::vector<double> dts, errs;
    // Higher orders hit round-off at the finest steps; stop at 2^-7 there.
    const int finest = order >= 4 ? 7 : 9;
    for (int i = 3; i <= finest; ++i) {
      dts.push_back(std::ldexp(1.0, -i));
      errs.push_back(global_error(method, dts.back()));
    }
    INFO(method);
    CHECK(std::abs(oracle::loglog_slope(dts, errs) - order) <= 0.3);
  }
  // Exact stepping reproduces the closed form up to round-off.
  CHECK(global_error("exp", 0.1) < 1e-12);
}

TEST_CASE("lower-order bootstrap limits AB3 to second order") {
  const OscParams base{1.0, 0.0, 0.0, 1.0, 0.0};
  std::vector<double> dts, errs;
  for (int i = 3; i <= 9; ++i) {
    const double dt = std::ldexp(1.0, -i);
    const Mat2 a = system_matrix(base.omega0, 0.0);
    auto st = make_stepper(3, {base.x0, base.v0}, Bootstrap::lower_order);
    const auto steps = static_cast<std::int64_t>(std::llround(2.0 / dt));
    State u{};
    for (std::int64_t k = 0; k < steps; ++k) u = ab_step(st, a, dt);
    OscParams p = base;
    p.dt = dt;
    const State exact = closed_form_state(p, steps);
    dts.push_back(dt);
    errs.push_back(std::hypot(u.x - exact.x, u.v - exact.v));
  }
  CHECK(oracle::loglog_slope(dts, errs) < 2.5);
}

TEST_CASE("intermediates: undamped target sets") {
  const OscParams p{1.7, 0.0, 0.3, 0.2, 0.1};
  const double w2 = p.omega0 * p.omega0;

  const auto lm = intermediates(Method::linear_multistep, p);
  REQUIRE(lm.targets.size() == 2);
  CHECK(lm.targets[0].name == "lm.m01");
  CHECK(lm.targets[0].value == doctest::Approx(p.dt));
  CHECK(lm.targets[1].name == "lm.m10");
  CHECK(lm.targets[1].value == doctest::Approx(-w2 * p.dt));

  // A^2 = -omega0^2 I, so (A dt)^3 = -omega0^2 dt^3 A.
  const auto t3 = intermediates(Method::taylor, p, 3);
  REQUIRE(t3.targets.size() == 2);
  CHECK(t3.targets[0].name == "taylor3.m01");
  CHECK(t3.targets[0].value == doctest::Approx(-w2 * std::pow(p.dt, 3)).epsilon(1e-13));
  CHECK(t3.targets[1].name == "taylor3.m10");
  CHECK(t3.targets[1].value == doctest::Approx(w2 * w2 * std::pow(p.dt, 3)).epsilon(1e-13));
  // Symbolic cube checked against a plain product of three matrices.
  const Mat2 a = system_matrix(p.omega0, 0.0);
  const Mat2 cube = (p.dt * a) * (p.dt * a) * (p.dt * a);
  CHECK(max_diff(cube, t3.matrix) < 1e-15);

  const auto ex = intermediates(Method::matrix_exponential, p);
  REQUIRE(ex.targets.size() == 3);
  const double th = p.omega0 * p.dt;
  CHECK(ex.targets[0].value == doctest::Approx(std::cos(th)));
  CHECK(ex.targets[1].value == doctest::Approx(std::sin(th) / p.omega0));
  CHECK(ex.targets[2].value == doctest::Approx(-p.omega0 * std::sin(th)));

  const auto t2 = intermediates(Method::taylor, p, 2);
  CHECK(t2.targets.size() == 1);
  CHECK(t2.constant_mask == std::array<bool, 4>{false, true, true, false});
}

TEST_CASE("intermediates: damped target counts") {
  const OscParams p{1.7, 0.4, 0.3, 0.2, 0.1};
  CHECK(intermediates(Method::linear_multistep, p).targets.size() == 3);
  CHECK(intermediates(Method::taylor, p).targets.size() == 4);
  CHECK(intermediates(Method::matrix_exponential, p).targets.size() == 4);
  CHECK(intermediates(Method::linear_multistep, p).constant_mask ==
        std::array<bool, 4>{true, false, false, false});

  // The structural rules agree with a numerical check over many series: an
  // entry is constant iff its spread across draws is zero.
  Rng rng(9);
  for (Method m : {Method::linear_multistep, Method::taylor, Method::matrix_exponential}) {
    for (bool damped : {false, true}) {
      std::array<double, 4> lo{1e300, 1e300, 1e300, 1e300}, hi{-1e300, -1e300, -1e300, -1e300};
      IntermediateSet last;
      for (int i = 0; i < 20; ++i) {
        OscParams q{rng.uniform(0.5, 3), damped ? rng.uniform(0.1, 0.4) : 0.0, rng.uniform(0.05, 1), 0, 0};
        last = intermediates(m, q, 3);
        const double v[4] = {last.matrix.a00, last.matrix.a01, last.matrix.a10, last.matrix.a11};
        for (int e = 0; e < 4; ++e) {
          lo[e] = std::min(lo[e], v[e]);
          hi[e] = std::max(hi[e], v[e]);
        }
      }
      for (int e = 0; e < 4; ++e) CHECK(last.constant_mask[e] == (hi[e] == lo[e]));
    }
  }
}

TEST_CASE("run_stepper") {
  const OscParams p{1.1, 0.2, 0.1, 0.4, -0.2};
  const auto path = run_stepper("exp", p, 20);
  REQUIRE(path.size() == 21);
  for (std::size_t k = 0; k < path.size(); ++k) {
    const State exact = closed_form_state(p, static_cast<std::int64_t>(k));
    CHECK(std::abs(path[k].x - exact.x) < 1e-12);
  }
  CHECK(run_stepper("euler", p, 3).size() == 4);
  CHECK_THROWS_AS(run_stepper("rk45", p, 3), UsageError);
}
