#include "oscilloprobe/numethods.hpp"

#include <cmath>
#include <string>

namespace oscilloprobe {

namespace {

// sin(w t) / w, series for small w t so that w -> 0 is well defined.
double sin_over(double w, double t) {
  const double th = w * t;
  if (std::abs(th) < 1e-4) {
    const double th2 = th * th;
    return t * (1.0 - th2 / 6.0 * (1.0 - th2 / 20.0));
  }
  return std::sin(th) / w;
}

}  // namespace

double Mat2::operator()(int r, int c) const {
  if (r == 0) return c == 0 ? a00 : a01;
  return c == 0 ? a10 : a11;
}

double Mat2::max_abs() const {
  return std::max({std::abs(a00), std::abs(a01), std::abs(a10), std::abs(a11)});
}

bool Mat2::finite() const {
  return std::isfinite(a00) && std::isfinite(a01) && std::isfinite(a10) && std::isfinite(a11);
}

Mat2 system_matrix(double omega0, double gamma) {
  if (!(omega0 > 0.0)) throw UsageError("system_matrix: omega0 must be positive");
  return {0.0, 1.0, -omega0 * omega0, -2.0 * gamma};
}

Mat2 mat_exp(const Mat2& a, double dt) {
  if (a.a00 != 0.0 || a.a01 != 1.0 || !(a.a10 < 0.0) || a.a11 > 0.0 || !a.finite()) {
    throw UsageError("mat_exp: expects a matrix from system_matrix");
  }
  if (dt < 0.0) throw UsageError("mat_exp: negative dt");
  if (dt == 0.0) return Mat2::identity();

  const double omega0_sq = -a.a10;
  const double omega0 = std::sqrt(omega0_sq);
  const double gamma = -0.5 * a.a11;
  OscParams p;
  p.omega0 = omega0;
  p.gamma = gamma;

  // e^{A t} = e^{-gamma t} [[C + gamma S, S], [-omega0^2 S, C - gamma S]] with
  // (C, S) = (cos, sin/w), (1, t) or (cosh, sinh/w) by regime.
  double c = 0.0;  // e^{-gamma t} C
  double s = 0.0;  // e^{-gamma t} S
  switch (p.regime()) {
    case Regime::undamped: {
      const double th = omega0 * dt;
      const double cs = std::cos(th);
      const double sn = std::sin(th);
      return {cs, sn / omega0, -omega0 * sn, cs};
    }
    case Regime::underdamped: {
      const double w2 = (omega0 - gamma) * (omega0 + gamma);
      const double w = std::sqrt(w2);
      const double decay = std::exp(-gamma * dt);
      c = decay * std::cos(w * dt);
      s = decay * sin_over(w, dt);
      break;
    }
    case Regime::critical: {
      // Series in the signed w^2 covers the tolerance band around gamma = omega0.
      const double u = (omega0 - gamma) * (omega0 + gamma) * dt * dt;
      const double decay = std::exp(-gamma * dt);
      c = decay * (1.0 - u / 2.0 * (1.0 - u / 12.0));
      s = decay * dt * (1.0 - u / 6.0 * (1.0 - u / 20.0));
      break;
    }
    case Regime::overdamped: {
      const double w2 = (gamma - omega0) * (gamma + omega0);
      const double w = std::sqrt(w2);
      const double e_slow = std::exp(-omega0_sq / (gamma + w) * dt);
      const double e_fast = std::exp(-(gamma + w) * dt);
      c = 0.5 * (e_slow + e_fast);
      s = -e_slow * std::expm1(-2.0 * w * dt) / (2.0 * w);
      break;
    }
  }
  return {c + gamma * s, s, -omega0_sq * s, c - gamma * s};
}

Mat2 taylor_stepper(const Mat2& a, double dt, int order) {
  if (order < 0 || order > 8) throw UsageError("taylor_stepper: order must be in [0, 8]");
  const Mat2 adt = dt * a;
  Mat2 term = Mat2::identity();
  Mat2 sum = term;
  for (int j = 1; j <= order; ++j) {
    term = (1.0 / j) * (term * adt);
    sum = sum + term;
  }
  return sum;
}

Mat2 scaled_power(const Mat2& a, double dt, int power) {
  if (power < 0) throw UsageError("scaled_power: negative power");
  const Mat2 adt = dt * a;
  Mat2 out = Mat2::identity();
  for (int j = 0; j < power; ++j) out = out * adt;
  return out;
}

std::vector<double> adams_bashforth_coefficients(int order) {
  switch (order) {
    case 1: return {1.0};
    case 2: return {3.0 / 2.0, -1.0 / 2.0};
    case 3: return {23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0};
    case 4: return {55.0 / 24.0, -59.0 / 24.0, 37.0 / 24.0, -9.0 / 24.0};
    case 5:
      return {1901.0 / 720.0, -2774.0 / 720.0, 2616.0 / 720.0, -1274.0 / 720.0, 251.0 / 720.0};
    default: throw UsageError("Adams-Bashforth order must be in [1, 5]");
  }
}

StepperState make_stepper(int order, State initial, Bootstrap bootstrap) {
  adams_bashforth_coefficients(order);  // validates
  StepperState st;
  st.order = order;
  st.bootstrap = bootstrap;
  st.history.push_front(initial);
  return st;
}

State ab_step(StepperState& st, const Mat2& a, double dt) {
  if (st.history.empty()) throw UsageError("ab_step: stepper history is empty");
  const int available = static_cast<int>(st.history.size());

  State next;
  if (available < st.order && st.bootstrap == Bootstrap::taylor) {
    next = taylor_stepper(a, dt, st.order) * st.history.front();
  } else {
    const int order = std::min(available, st.order);
    const auto beta = adams_bashforth_coefficients(order);
    State incr{0.0, 0.0};
    for (int j = 0; j < order; ++j) {
      const State f = a * st.history[static_cast<std::size_t>(j)];
      incr.x += beta[static_cast<std::size_t>(j)] * f.x;
      incr.v += beta[static_cast<std::size_t>(j)] * f.v;
    }
    const State& u = st.history.front();
    next = {u.x + dt * incr.x, u.v + dt * incr.v};
  }
  st.history.push_front(next);
  while (static_cast<int>(st.history.size()) > st.order) st.history.pop_back();
  return next;
}

std::string_view to_string(Method m) {
  switch (m) {
    case Method::linear_multistep: return "linear-multistep";
    case Method::taylor: return "taylor";
    case Method::matrix_exponential: return "matrix-exponential";
  }
  return "?";
}

std::string_view method_tag(Method m) {
  switch (m) {
    case Method::linear_multistep: return "lm";
    case Method::taylor: return "taylor";
    case Method::matrix_exponential: return "exp";
  }
  return "?";
}

Method parse_method(std::string_view s) {
  if (s == "lm" || s == "linear-multistep") return Method::linear_multistep;
  if (s == "taylor" || s == "rk") return Method::taylor;
  if (s == "exp" || s == "matrix-exponential") return Method::matrix_exponential;
  throw UsageError("unknown method '" + std::string(s) + "'");
}

std::string target_prefix(Method method, int taylor_power) {
  if (method == Method::taylor) return "taylor" + std::to_string(taylor_power);
  return std::string(method_tag(method));
}

IntermediateSet intermediates(Method method, const OscParams& params, int taylor_power) {
  params.validate();
  const Mat2 a = system_matrix(params.omega0, params.gamma);
  IntermediateSet out;
  out.method = method;
  const bool undamped = params.gamma == 0.0;

  // Which entries survive, by structure of A: with gamma = 0, A^2 = -omega0^2 I,
  // so odd powers are off-diagonal and even powers are a multiple of I.
  std::array<bool, 4> keep{};
  switch (method) {
    case Method::linear_multistep:
      out.power = 1;
      out.matrix = params.dt * a;
      keep = {false, true, true, !undamped};
      break;
    case Method::taylor: {
      if (taylor_power < 1 || taylor_power > 8) {
        throw UsageError("intermediates: Taylor power must be in [1, 8]");
      }
      out.power = taylor_power;
      out.matrix = scaled_power(a, params.dt, taylor_power);
      if (taylor_power == 1) {
        keep = {false, true, true, !undamped};
      } else if (undamped) {
        const bool odd = taylor_power % 2 == 1;
        keep = {!odd, odd, odd, false};
      } else {
        keep = {true, true, true, true};
      }
      break;
    }
    case Method::matrix_exponential:
      out.power = 1;
      out.matrix = mat_exp(a, params.dt);
      keep = {true, true, true, !undamped};
      break;
  }

  // Constant entries are the structural zeros: m00 of A dt and the vanishing
  // half of an undamped power. Undamped duplicates (m11 == m00) are dropped
  // from the targets but are not constant.
  if (method == Method::linear_multistep || (method == Method::taylor && taylor_power == 1)) {
    out.constant_mask = {true, false, false, undamped};
  } else if (method == Method::taylor && undamped) {
    const bool odd = taylor_power % 2 == 1;
    out.constant_mask = {odd, !odd, !odd, odd};
  } else {
    out.constant_mask = {false, false, false, false};
  }

  const std::string prefix = target_prefix(method, out.power);
  static constexpr const char* kEntry[4] = {"m00", "m01", "m10", "m11"};
  const double values[4] = {out.matrix.a00, out.matrix.a01, out.matrix.a10, out.matrix.a11};
  for (int e = 0; e < 4; ++e) {
    if (keep[static_cast<std::size_t>(e)]) {
      out.targets.push_back({prefix + "." + kEntry[e], values[e]});
    }
  }
  return out;
}

std::vector<State> run_stepper(std::string_view method, const OscParams& params, std::size_t steps) {
  params.validate();
  const Mat2 a = system_matrix(params.omega0, params.gamma);
  std::vector<State> out;
  out.reserve(steps + 1);
  out.push_back({params.x0, params.v0});

  Mat2 one_step;
  int ab_order = 0;
  if (method == "exp") {
    one_step = mat_exp(a, params.dt);
  } else if (method == "euler") {
    one_step = taylor_stepper(a, params.dt, 1);
  } else if (method.rfind("taylor:", 0) == 0) {
    one_step = taylor_stepper(a, params.dt, std::stoi(std::string(method.substr(7))));
  } else if (method.rfind("ab", 0) == 0) {
    ab_order = std::stoi(std::string(method.substr(2)));
  } else {
    throw UsageError("unknown stepper '" + std::string(method) + "'");
  }

  if (ab_order > 0) {
    auto st = make_stepper(ab_order, out.front());
    for (std::size_t k = 0; k < steps; ++k) out.push_back(ab_step(st, a, params.dt));
  } else {
    for (std::size_t k = 0; k < steps; ++k) out.push_back(one_step * out.back());
  }
  return out;
}

}  // namespace oscilloprobe
