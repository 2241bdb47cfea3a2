#pragma once

// Reference computations used only by tests. None of these call into the
// library code paths they are used to check.

#include "oscilloprobe/dynamics.hpp"
#include "oscilloprobe/numethods.hpp"

#include <cmath>
#include <complex>
#include <utility>

namespace oracle {

// Classic fixed-step RK4 on x'' + 2 gamma x' + omega0^2 x = 0 from (x0, v0)
// over [0, t] with n equal substeps.
inline std::pair<double, double> rk4(double omega0, double gamma, double x0, double v0, double t,
                                     long n) {
  const double h = t / static_cast<double>(n);
  double x = x0, v = v0;
  auto acc = [&](double xx, double vv) { return -2.0 * gamma * vv - omega0 * omega0 * xx; };
  for (long i = 0; i < n; ++i) {
    const double k1x = v, k1v = acc(x, v);
    const double k2x = v + 0.5 * h * k1v, k2v = acc(x + 0.5 * h * k1x, v + 0.5 * h * k1v);
    const double k3x = v + 0.5 * h * k2v, k3v = acc(x + 0.5 * h * k2x, v + 0.5 * h * k2v);
    const double k4x = v + h * k3v, k4v = acc(x + h * k3x, v + h * k3v);
    x += h / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x);
    v += h / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v);
  }
  return {x, v};
}

// Truncated power series sum_{j<=terms} M^j / j! on plain arrays.
inline oscilloprobe::Mat2 series_exp(const oscilloprobe::Mat2& a, double dt, int terms = 30) {
  double m[2][2] = {{a.a00 * dt, a.a01 * dt}, {a.a10 * dt, a.a11 * dt}};
  double term[2][2] = {{1, 0}, {0, 1}};
  double sum[2][2] = {{1, 0}, {0, 1}};
  for (int j = 1; j <= terms; ++j) {
    double next[2][2];
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 2; ++c)
        next[r][c] = (term[r][0] * m[0][c] + term[r][1] * m[1][c]) / j;
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 2; ++c) {
        term[r][c] = next[r][c];
        sum[r][c] += next[r][c];
      }
  }
  return {sum[0][0], sum[0][1], sum[1][0], sum[1][1]};
}

// Roots of the characteristic polynomial lambda^2 - tr lambda + det.
inline std::pair<std::complex<double>, std::complex<double>> eigenvalues(const oscilloprobe::Mat2& a) {
  const double tr = a.a00 + a.a11;
  const double det = a.a00 * a.a11 - a.a01 * a.a10;
  const std::complex<double> disc = std::sqrt(std::complex<double>(tr * tr / 4.0 - det, 0.0));
  return {tr / 2.0 + disc, tr / 2.0 - disc};
}

// Least-squares slope of log(err) against log(dt).
template <class Xs, class Ys>
double loglog_slope(const Xs& dts, const Ys& errs) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = static_cast<double>(dts.size());
  for (std::size_t i = 0; i < dts.size(); ++i) {
    const double lx = std::log(dts[i]), ly = std::log(errs[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace oracle
