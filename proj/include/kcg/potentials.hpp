// Closed-form benchmark potentials and hand-derived analytic gradients.
// Three systems: a 1D double well, a 2D landscape with one enthalpic and one
// entropic channel, and a 3D triple well built from four Gaussians plus a
// quartic confinement.
#pragma once
#include <array>
#include <cmath>
#include <span>
#include <string>

#include "kcg/error.hpp"
#include "kcg/grid.hpp"

namespace kcg {

enum class PotentialKind { DoubleWell1D, EnthalpicEntropic2D, TripleWell3D };

inline int potential_dim(PotentialKind kind) {
  switch (kind) {
    case PotentialKind::DoubleWell1D: return 1;
    case PotentialKind::EnthalpicEntropic2D: return 2;
    case PotentialKind::TripleWell3D: return 3;
  }
  return 0;
}

inline Box default_box(PotentialKind kind) {
  switch (kind) {
    case PotentialKind::DoubleWell1D: return box1d(-2.0, 2.0);
    case PotentialKind::EnthalpicEntropic2D: return box2d(-1.5, 1.5, -1.5, 1.5);
    case PotentialKind::TripleWell3D: return box3d(-1.5, 1.5, -1.5, 1.5, -1.5, 1.5);
  }
  return Box{};
}

struct PotentialSpec {
  PotentialKind kind = PotentialKind::DoubleWell1D;
  double beta = 1.0;
  double sigma = 1.4142135623730950488;  // sqrt(2), so that beta = 2/sigma^2 = 1
  Box box;

  // beta and sigma are coupled through beta = 2/sigma^2; construct from either
  static PotentialSpec from_sigma(PotentialKind kind, double sigma) {
    require(sigma > 0, "potential.sigma", "sigma must be positive");
    return PotentialSpec{kind, 2.0 / (sigma * sigma), sigma, default_box(kind)};
  }
  static PotentialSpec from_beta(PotentialKind kind, double beta) {
    require(beta > 0, "potential.beta", "beta must be positive");
    return PotentialSpec{kind, beta, std::sqrt(2.0 / beta), default_box(kind)};
  }

  int dim() const { return potential_dim(kind); }
};

namespace detail {

inline void check_dim(const PotentialSpec& spec, std::span<const double> x) {
  require(static_cast<int>(x.size()) == spec.dim(), "potential.dim",
          "state has dimension " + std::to_string(x.size()) + ", potential expects " +
              std::to_string(spec.dim()));
}

// 2D potential: two basins at x = +-1 joined by a low enthalpic saddle near
// y = -1 and an entropic channel along large y; written with a shifted
// log-sum-exp so the well terms never overflow.
inline double v2(double x, double y) {
  double yp = y + 1.0;
  double G = -4.0 * x * x - 0.8 * std::pow(yp, 8);
  double A = -(x + 1.0) * (x + 1.0) - 0.1 * std::pow(yp, 4);
  double B = -(x - 1.0) * (x - 1.0) - 0.1 * std::pow(yp, 4);
  double m = A > B ? A : B;
  double lse = m + std::log(std::exp(A - m) + std::exp(B - m));
  return 0.2 * (std::pow(x, 12) + std::pow(y, 12) + 20.0 * std::exp(G) - 20.0 * lse);
}

inline void grad_v2(double x, double y, double* g) {
  double yp = y + 1.0;
  double G = -4.0 * x * x - 0.8 * std::pow(yp, 8);
  double A = -(x + 1.0) * (x + 1.0) - 0.1 * std::pow(yp, 4);
  double B = -(x - 1.0) * (x - 1.0) - 0.1 * std::pow(yp, 4);
  double m = A > B ? A : B;
  double ea = std::exp(A - m), eb = std::exp(B - m);
  double wa = ea / (ea + eb), wb = eb / (ea + eb);
  double eg = std::exp(G);
  double dlse_dx = wa * (-2.0 * (x + 1.0)) + wb * (-2.0 * (x - 1.0));
  double dlse_dy = -0.4 * std::pow(yp, 3);  // shared by both well terms
  g[0] = 0.2 * (12.0 * std::pow(x, 11) + 20.0 * eg * (-8.0 * x) - 20.0 * dlse_dx);
  g[1] = 0.2 * (12.0 * std::pow(y, 11) + 20.0 * eg * (-6.4 * std::pow(yp, 7)) -
                20.0 * dlse_dy);
}

// 3D triple well: four Gaussian terms (two with cross terms) plus quartic
// confinement, exactly as printed in the source model.
struct gauss3 {
  double c;      // prefactor
  double e;      // exponent value
  double dx, dy, dz;  // exponent partials
};

inline std::array<gauss3, 4> v3_terms(double x, double y, double z) {
  std::array<gauss3, 4> t;
  double x4 = x - 0.4, z6 = z - 0.6;
  t[0] = {-15.0, -6.5 * x4 * x4 - 11.0 * x4 * y - 5.5 * y * y - 6.5 * z6 * z6,
          -13.0 * x4 - 11.0 * y, -11.0 * x4 - 11.0 * y, -13.0 * z6};
  double x2 = x - 0.2, y8 = y + 0.8, z4 = z + 0.4;
  t[1] = {-10.0, -1.5 * x2 * x2 - 15.0 * y8 * y8 - 5.0 * z4 * z4 + 4.0 * x2 * z4,
          -3.0 * x2 + 4.0 * z4, -30.0 * y8, -10.0 * z4 + 4.0 * x2};
  double x1 = x + 1.0, y5 = y - 0.5, z66 = z + 0.6;
  t[2] = {-12.0, -3.0 * x1 * x1 - y5 * y5 - 16.5 * z66 * z66,
          -6.0 * x1, -2.0 * y5, -33.0 * z66};
  double x5 = x + 0.5, y6 = y - 0.6, z1 = z - 0.1;
  t[3] = {12.0, -x5 * x5 - y6 * y6 - 10.0 * z1 * z1,
          -2.0 * x5, -2.0 * y6, -20.0 * z1};
  return t;
}

inline double v3(double x, double y, double z) {
  double v = 0.8 * (std::pow(x, 4) + std::pow(y, 4) + std::pow(z, 4));
  for (const auto& t : v3_terms(x, y, z)) v += t.c * std::exp(t.e);
  return v;
}

inline void grad_v3(double x, double y, double z, double* g) {
  g[0] = 3.2 * x * x * x;
  g[1] = 3.2 * y * y * y;
  g[2] = 3.2 * z * z * z;
  for (const auto& t : v3_terms(x, y, z)) {
    double w = t.c * std::exp(t.e);
    g[0] += w * t.dx;
    g[1] += w * t.dy;
    g[2] += w * t.dz;
  }
}

}  // namespace detail

inline double eval_potential(const PotentialSpec& spec, std::span<const double> x) {
  detail::check_dim(spec, x);
  switch (spec.kind) {
    case PotentialKind::DoubleWell1D: {
      double s = x[0] * x[0] - 1.0;
      return s * s;
    }
    case PotentialKind::EnthalpicEntropic2D:
      return detail::v2(x[0], x[1]);
    case PotentialKind::TripleWell3D:
      return detail::v3(x[0], x[1], x[2]);
  }
  return 0.0;
}

inline void grad_potential(const PotentialSpec& spec, std::span<const double> x,
                           std::span<double> g) {
  detail::check_dim(spec, x);
  switch (spec.kind) {
    case PotentialKind::DoubleWell1D:
      g[0] = 4.0 * x[0] * (x[0] * x[0] - 1.0);
      return;
    case PotentialKind::EnthalpicEntropic2D:
      detail::grad_v2(x[0], x[1], g.data());
      return;
    case PotentialKind::TripleWell3D:
      detail::grad_v3(x[0], x[1], x[2], g.data());
      return;
  }
}

inline double stationary_density_unnormalized(const PotentialSpec& spec,
                                              std::span<const double> x) {
  return std::exp(-spec.beta * eval_potential(spec, x));
}

}  // namespace kcg
