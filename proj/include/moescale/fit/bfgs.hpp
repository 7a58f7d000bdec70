#pragma once

// Dense BFGS with backtracking Armijo line search, sized for the small
// parameter vectors used here (<= 9 free coordinates). The callback
// evaluates f and writes its gradient.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <vector>

namespace moescale::opt {

struct MinimizeOptions {
  int max_iterations = 2000;
  double gradient_tolerance = 1e-8;
};

struct MinimizeResult {
  std::vector<double> x;
  double f = std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool converged = false;  // first-order stationarity reached
};

using ObjectiveFn = std::function<double(const std::vector<double>&, std::vector<double>&)>;

namespace detail {

inline double inf_norm(const std::vector<double>& v) {
  double m = 0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

}  // namespace detail

inline MinimizeResult minimize_bfgs(const ObjectiveFn& fg, std::vector<double> x0,
                                    const MinimizeOptions& opt = {}) {
  const std::size_t n = x0.size();
  MinimizeResult out;
  out.x = std::move(x0);

  std::vector<double> g(n), g_new(n), p(n), x_new(n), s(n), y(n), hy(n);
  double f = fg(out.x, g);
  if (!std::isfinite(f)) return out;  // hopeless start; caller picks another

  // Inverse Hessian approximation, row-major.
  std::vector<double> h(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) h[i * n + i] = 1.0;
  bool h_is_identity = true;

  const double c1 = 1e-4;

  for (int it = 0; it < opt.max_iterations; ++it) {
    out.iterations = it;
    if (detail::inf_norm(g) <= opt.gradient_tolerance) {
      out.f = f;
      out.converged = true;
      return out;
    }

    // p = -H g
    for (std::size_t i = 0; i < n; ++i) {
      double sum = 0;
      for (std::size_t j = 0; j < n; ++j) sum += h[i * n + j] * g[j];
      p[i] = -sum;
    }
    double gtp = 0;
    for (std::size_t i = 0; i < n; ++i) gtp += g[i] * p[i];
    if (!(gtp < 0)) {  // not a descent direction: reset to steepest descent
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) h[i * n + j] = (i == j) ? 1.0 : 0.0;
        p[i] = -g[i];
      }
      h_is_identity = true;
      gtp = 0;
      for (std::size_t i = 0; i < n; ++i) gtp += g[i] * p[i];
      if (!(gtp < 0)) {  // gradient is zero/non-finite
        out.f = f;
        out.converged = detail::inf_norm(g) <= opt.gradient_tolerance;
        return out;
      }
    }

    double alpha = 1.0;
    double f_new = f;
    bool accepted = false;
    for (int ls = 0; ls < 80; ++ls) {
      for (std::size_t i = 0; i < n; ++i) x_new[i] = out.x[i] + alpha * p[i];
      f_new = fg(x_new, g_new);
      if (std::isfinite(f_new) && f_new <= f + c1 * alpha * gtp) {
        accepted = true;
        break;
      }
      alpha *= 0.5;
      if (alpha < 1e-20) break;
    }
    if (!accepted) {  // flat to machine precision along p
      out.f = f;
      out.converged = detail::inf_norm(g) <= opt.gradient_tolerance;
      return out;
    }

    double ys = 0, yy = 0;
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = x_new[i] - out.x[i];
      y[i] = g_new[i] - g[i];
      ys += y[i] * s[i];
      yy += y[i] * y[i];
    }

    if (ys > 1e-18 * std::max(yy, 1.0)) {
      if (h_is_identity && yy > 0) {
        // Scale the initial approximation to the local curvature before the
        // first update; cures badly scaled coordinate units.
        const double scale = ys / yy;
        for (std::size_t i = 0; i < n; ++i) h[i * n + i] = scale;
        h_is_identity = false;
      }
      // H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T
      const double rho = 1.0 / ys;
      double shy = 0;
      for (std::size_t i = 0; i < n; ++i) {
        double sum = 0;
        for (std::size_t j = 0; j < n; ++j) sum += h[i * n + j] * y[j];
        hy[i] = sum;
        shy += y[i] * sum;
      }
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          h[i * n + j] += rho * rho * shy * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]) +
                          rho * s[i] * s[j];
        }
      }
    }
    // else: skip the update; curvature information is unusable

    out.x.swap(x_new);
    f = f_new;
    g.swap(g_new);
  }

  out.f = f;
  out.converged = detail::inf_norm(g) <= opt.gradient_tolerance;
  return out;
}

}  // namespace moescale::opt
