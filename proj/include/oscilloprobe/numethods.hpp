#pragma once

#include "oscilloprobe/dynamics.hpp"

#include <array>
#include <deque>
#include <string>
#include <string_view>
#include <vector>

namespace oscilloprobe {

struct Mat2 {
  double a00 = 0.0, a01 = 0.0, a10 = 0.0, a11 = 0.0;

  static Mat2 identity() { return {1.0, 0.0, 0.0, 1.0}; }
  double operator()(int r, int c) const;
  double det() const { return a00 * a11 - a01 * a10; }
  double trace() const { return a00 + a11; }
  double max_abs() const;
  bool finite() const;

  friend Mat2 operator+(const Mat2& a, const Mat2& b) {
    return {a.a00 + b.a00, a.a01 + b.a01, a.a10 + b.a10, a.a11 + b.a11};
  }
  friend Mat2 operator-(const Mat2& a, const Mat2& b) {
    return {a.a00 - b.a00, a.a01 - b.a01, a.a10 - b.a10, a.a11 - b.a11};
  }
  friend Mat2 operator*(double s, const Mat2& a) {
    return {s * a.a00, s * a.a01, s * a.a10, s * a.a11};
  }
  friend Mat2 operator*(const Mat2& a, const Mat2& b) {
    return {a.a00 * b.a00 + a.a01 * b.a10, a.a00 * b.a01 + a.a01 * b.a11,
            a.a10 * b.a00 + a.a11 * b.a10, a.a10 * b.a01 + a.a11 * b.a11};
  }
  friend State operator*(const Mat2& a, const State& u) {
    return {a.a00 * u.x + a.a01 * u.v, a.a10 * u.x + a.a11 * u.v};
  }
  friend bool operator==(const Mat2&, const Mat2&) = default;
};

// [[0, 1], [-omega0^2, -2 gamma]]
Mat2 system_matrix(double omega0, double gamma);

// e^{A dt} in closed form for A = system_matrix(omega0, gamma).
Mat2 mat_exp(const Mat2& a, double dt);

// sum_{j=0..order} (A dt)^j / j!, order in [0, 8].
Mat2 taylor_stepper(const Mat2& a, double dt, int order);

// (A dt)^power by repeated multiplication.
Mat2 scaled_power(const Mat2& a, double dt, int power);

// Explicit Adams-Bashforth coefficients beta_0..beta_{s-1} for order s in [1, 5];
// beta_0 multiplies the newest derivative.
std::vector<double> adams_bashforth_coefficients(int order);

// How the first s-1 steps of an order-s multistep run are produced.
enum class Bootstrap {
  taylor,       // one-step Taylor method of the same order
  lower_order,  // Adams-Bashforth of orders 1..s-1
};

struct StepperState {
  int order = 1;
  Bootstrap bootstrap = Bootstrap::taylor;
  std::deque<State> history;  // newest at the front, at most `order` entries
};

StepperState make_stepper(int order, State initial, Bootstrap bootstrap = Bootstrap::taylor);

// Advance one step and push the result onto the history. Throws UsageError if
// the history is empty.
State ab_step(StepperState& state, const Mat2& a, double dt);

enum class Method { linear_multistep, taylor, matrix_exponential };

std::string_view to_string(Method m);
std::string_view method_tag(Method m);  // "lm", "taylor", "exp"
Method parse_method(std::string_view s);

inline constexpr int kDefaultTaylorPower = 3;

struct NamedTarget {
  std::string name;
  double value = 0.0;
};

// Non-constant, non-duplicate entries of the intermediate a method needs:
// A dt (linear multistep), (A dt)^j (Taylor), e^{A dt} (matrix exponential).
struct IntermediateSet {
  Method method = Method::matrix_exponential;
  int power = 1;  // j for Taylor; 1 otherwise
  Mat2 matrix;
  std::vector<NamedTarget> targets;
  // Entries (row-major) that do not vary across series in this regime.
  std::array<bool, 4> constant_mask{};
};

IntermediateSet intermediates(Method method, const OscParams& params,
                              int taylor_power = kDefaultTaylorPower);

// Prefix used in target names: "lm", "taylor3", "exp".
std::string target_prefix(Method method, int taylor_power = kDefaultTaylorPower);

// A trajectory produced by a fixed stepping rule, for comparison against the
// closed form. `method` is one of "euler", "ab<s>", "taylor:<k>", "exp".
std::vector<State> run_stepper(std::string_view method, const OscParams& params, std::size_t steps);

}  // namespace oscilloprobe
