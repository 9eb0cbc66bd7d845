// Effective dynamics on the reduced simplex: latent binning of chi, projected
// drift and diffusion, measure-route effective potential, latent generators and
// the 1d anchor-curve model.
#pragma once
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "kcg/error.hpp"
#include "kcg/grid.hpp"
#include "kcg/membership.hpp"
#include "kcg/sde.hpp"
#include "kcg/sqra.hpp"

namespace kcg {

// Binning of the first m chi components onto a regular grid over [0,1]^m.
// Raw latent cell ids are axis-0 major: b0 for m = 1, b0 * bins + b1 for m = 2.
struct LatentGrid {
  int m = 0;
  int bins = 0;
  double h = 0.0;
  int n_full = 0;
  // per raw cell: (full cell, mu weight) of every member
  std::vector<std::vector<std::pair<int, double>>> members;
  Eigen::VectorXd mu_raw;  // total member weight per raw cell (dropped cells included)
  Eigen::MatrixXd zbar;    // mu-weighted mean latent coords per raw cell, NaN when empty
  std::vector<int> kept;   // retained raw cells, ascending
  std::vector<int> pos;    // raw cell -> index into kept, -1 when dropped

  int n_raw() const { return static_cast<int>(members.size()); }
  int n_kept() const { return static_cast<int>(kept.size()); }

  int axis_bin(int raw, int axis) const {
    return m == 1 ? raw : (axis == 0 ? raw / bins : raw % bins);
  }
  double center(int raw, int axis) const { return (axis_bin(raw, axis) + 0.5) * h; }
  int axis_stride(int axis) const { return (m == 2 && axis == 0) ? bins : 1; }

  // raw id of the axis neighbor, or -1 outside the [0,1]^m box
  int neighbor(int raw, int axis, int direction) const {
    int b = axis_bin(raw, axis) + direction;
    if (b < 0 || b >= bins) return -1;
    return raw + direction * axis_stride(axis);
  }
};

namespace detail {

// clip a chi row onto [0,1] and renormalize it to sum 1
inline void clip_row(const Eigen::MatrixXd& values, int row, std::span<double> out) {
  double s = 0.0;
  for (int c = 0; c < values.cols(); ++c) {
    out[c] = std::clamp(values(row, c), 0.0, 1.0);
    s += out[c];
  }
  require(s > 0.0, "effective.chi", "chi row " + std::to_string(row) + " clips to zero");
  for (int c = 0; c < values.cols(); ++c) out[c] /= s;
}

}  // namespace detail

inline LatentGrid build_latent_grid(const ChiTable& chi, const Eigen::VectorXd& mu, int bins) {
  require(chi.m == 1 || chi.m == 2, "effective.dim",
          "latent dimension must be 1 or 2, got " + std::to_string(chi.m));
  require(bins >= 2, "effective.bins", "need at least 2 bins per latent axis");
  require(chi.values.rows() == mu.size(), "effective.size",
          "chi table and stationary vector disagree on cell count");

  LatentGrid g;
  g.m = chi.m;
  g.bins = bins;
  g.h = 1.0 / bins;
  g.n_full = static_cast<int>(mu.size());
  int n_raw = g.m == 1 ? bins : bins * bins;
  g.members.resize(n_raw);
  g.mu_raw = Eigen::VectorXd::Zero(n_raw);
  Eigen::MatrixXd zacc = Eigen::MatrixXd::Zero(n_raw, g.m);

  std::array<double, 4> row{};
  for (int i = 0; i < g.n_full; ++i) {
    detail::clip_row(chi.values, i, std::span<double>(row.data(), chi.m + 1));
    int raw = 0;
    for (int l = 0; l < g.m; ++l) {
      int b = std::clamp(static_cast<int>(row[l] / g.h), 0, bins - 1);
      raw = raw * bins + b;
    }
    g.members[raw].emplace_back(i, mu[i]);
    g.mu_raw[raw] += mu[i];
    for (int l = 0; l < g.m; ++l) zacc(raw, l) += mu[i] * row[l];
  }
  double total = mu.sum();
  require(g.mu_raw.sum() >= 0.999 * total, "effective.partition",
          "latent binning lost more than 0.1% of the stationary mass");

  g.zbar = Eigen::MatrixXd::Constant(n_raw, g.m, std::numeric_limits<double>::quiet_NaN());
  for (int r = 0; r < n_raw; ++r)
    if (g.mu_raw[r] > 0.0) g.zbar.row(r) = zacc.row(r) / g.mu_raw[r];

  double thr = 1e-12 * g.mu_raw.maxCoeff();
  std::vector<char> above(n_raw, 0);
  for (int r = 0; r < n_raw; ++r) above[r] = g.mu_raw[r] >= thr ? 1 : 0;

  if (g.m == 1) {
    for (int r = 0; r < n_raw; ++r)
      if (above[r]) g.kept.push_back(r);
  } else {
    // keep the mass-dominant connected component of the above-threshold set
    std::vector<int> comp(n_raw, -1);
    std::vector<std::vector<int>> comps;
    for (int start = 0; start < n_raw; ++start) {
      if (!above[start] || comp[start] >= 0) continue;
      int id = static_cast<int>(comps.size());
      comps.emplace_back();
      std::vector<int> queue{start};
      comp[start] = id;
      for (std::size_t head = 0; head < queue.size(); ++head) {
        int u = queue[head];
        comps[id].push_back(u);
        for (int axis = 0; axis < 2; ++axis)
          for (int dir : {-1, +1}) {
            int v = g.neighbor(u, axis, dir);
            if (v >= 0 && above[v] && comp[v] < 0) {
              comp[v] = id;
              queue.push_back(v);
            }
          }
      }
    }
    std::size_t best = 0;
    double best_mass = -1.0;
    std::vector<double> masses(comps.size(), 0.0);
    for (std::size_t c = 0; c < comps.size(); ++c) {
      for (int u : comps[c]) masses[c] += g.mu_raw[u];
      if (masses[c] > best_mass) {
        best_mass = masses[c];
        best = c;
      }
    }
    double dropped = 0.0;
    for (std::size_t c = 0; c < comps.size(); ++c)
      if (c != best) dropped += masses[c];
    if (dropped > 1e-6 * best_mass) {
      std::string msg = "latent support splits into " + std::to_string(comps.size()) +
                        " components; retaining the dominant one would drop mass " +
                        std::to_string(dropped);
      fail("effective.partition", msg);
    }
    g.kept = comps.empty() ? std::vector<int>{} : comps[best];
    std::sort(g.kept.begin(), g.kept.end());
  }
  require(!g.kept.empty(), "effective.partition", "no latent cell carries mass");

  g.pos.assign(n_raw, -1);
  for (int k = 0; k < g.n_kept(); ++k) g.pos[g.kept[k]] = k;
  return g;
}

// mu-weighted average of a full-space observable per raw latent cell; empty
// cells give NaN. Optional extra per-cell weights multiply the mu weights.
inline Eigen::VectorXd project(const LatentGrid& latent, std::span<const double> f,
                               std::span<const double> weight = {}) {
  require(static_cast<int>(f.size()) == latent.n_full, "effective.size",
          "observable length does not match the full grid");
  require(weight.empty() || weight.size() == f.size(), "effective.size",
          "weight length does not match the full grid");
  Eigen::VectorXd out =
      Eigen::VectorXd::Constant(latent.n_raw(), std::numeric_limits<double>::quiet_NaN());
  for (int r = 0; r < latent.n_raw(); ++r) {
    double num = 0.0, den = 0.0;
    for (const auto& [cell, mu] : latent.members[r]) {
      double w = weight.empty() ? mu : mu * weight[cell];
      num += w * f[cell];
      den += w;
    }
    if (den > 0.0) out[r] = num / den;
  }
  return out;
}

namespace detail {

// np.gradient semantics: central differences inside, one-sided at box faces
inline double gradient_on_grid(const RegularGrid& grid, const Eigen::Ref<const Eigen::VectorXd>& f,
                               int cell, int axis) {
  auto c = grid.coords(cell);
  double h = grid.h[axis];
  if (c[axis] > 0 && c[axis] + 1 < grid.bins[axis]) {
    auto cm = c, cp = c;
    cm[axis] -= 1;
    cp[axis] += 1;
    return (f[grid.index(cp)] - f[grid.index(cm)]) / (2.0 * h);
  }
  if (c[axis] == 0) {
    auto cp = c;
    cp[axis] += 1;
    return (f[grid.index(cp)] - f[cell]) / h;
  }
  auto cm = c;
  cm[axis] -= 1;
  return (f[cell] - f[grid.index(cm)]) / h;
}

}  // namespace detail

// Projected generator drift and diffusion per retained latent cell. The chi
// gradients are taken on the full grid as given (no clipping).
struct EffectiveField {
  Eigen::MatrixXd drift;      // n_kept x m
  Eigen::MatrixXd diffusion;  // n_kept x (m*m), row-major per cell
};

inline EffectiveField effective_drift_diffusion(const ChiTable& chi, const SparseGenerator& gen,
                                                const RegularGrid& grid, const LatentGrid& latent,
                                                double sigma) {
  int m = chi.m;
  require(grid.n_cells == latent.n_full && gen.n() == latent.n_full &&
              chi.values.rows() == latent.n_full,
          "effective.size", "chi, generator, grid and latent grid disagree on cell count");
  require(sigma > 0.0, "effective.params", "sigma must be positive");

  Eigen::MatrixXd lchi = gen.L * chi.values.leftCols(m);
  Eigen::MatrixXd grads(latent.n_full, m * grid.dim);
  for (int l = 0; l < m; ++l)
    for (int cell = 0; cell < latent.n_full; ++cell)
      for (int a = 0; a < grid.dim; ++a)
        grads(cell, l * grid.dim + a) =
            detail::gradient_on_grid(grid, chi.values.col(l), cell, a);

  double half_s2 = 0.5 * sigma * sigma;
  EffectiveField out;
  out.drift = Eigen::MatrixXd::Zero(latent.n_kept(), m);
  out.diffusion = Eigen::MatrixXd::Zero(latent.n_kept(), m * m);
  std::vector<int> bad;
  for (int k = 0; k < latent.n_kept(); ++k) {
    int raw = latent.kept[k];
    double wsum = 0.0;
    for (const auto& [cell, mu] : latent.members[raw]) {
      wsum += mu;
      for (int l = 0; l < m; ++l) out.drift(k, l) += mu * lchi(cell, l);
      for (int l = 0; l < m; ++l)
        for (int l2 = 0; l2 < m; ++l2) {
          double dot = 0.0;
          for (int a = 0; a < grid.dim; ++a)
            dot += grads(cell, l * grid.dim + a) * grads(cell, l2 * grid.dim + a);
          out.diffusion(k, l * m + l2) += mu * half_s2 * dot;
        }
    }
    out.drift.row(k) /= wsum;
    out.diffusion.row(k) /= wsum;
    double mineig;
    if (m == 1) {
      mineig = out.diffusion(k, 0);
    } else {
      double a = out.diffusion(k, 0), b = out.diffusion(k, 1), d = out.diffusion(k, 3);
      mineig = 0.5 * (a + d) - std::sqrt(0.25 * (a - d) * (a - d) + b * b);
    }
    if (!(mineig > 0.0)) bad.push_back(raw);
  }
  if (!bad.empty()) {
    std::string msg = "projected diffusion is not positive definite on latent cells";
    for (std::size_t i = 0; i < bad.size() && i < 8; ++i) msg += " " + std::to_string(bad[i]);
    if (bad.size() > 8) msg += " (+" + std::to_string(bad.size() - 8) + " more)";
    fail("effective.diffusion", msg);
  }
  return out;
}

// Split the full (m+1)-state rate matrix into the reduced-coordinate drift
// pair: dz = (b + Q' z) dt with Q' = Q_upper - b 1^T.
inline std::pair<Eigen::VectorXd, Eigen::MatrixXd> reduce_rate_matrix(const Eigen::MatrixXd& q) {
  require(q.rows() == q.cols() && q.rows() >= 2, "effective.reduce",
          "rate matrix must be square with at least two states");
  int m = static_cast<int>(q.rows()) - 1;
  Eigen::VectorXd b = q.topRightCorner(m, 1);
  Eigen::MatrixXd qred = q.topLeftCorner(m, m) - b * Eigen::RowVectorXd::Ones(m);
  return {b, qred};
}

namespace detail {

// linear interpolation on an ascending node grid, clamped at the ends
inline double interp1(std::span<const double> xs, std::span<const double> ys, double x) {
  std::size_t n = xs.size();
  if (x <= xs[0]) return ys[0];
  if (x >= xs[n - 1]) return ys[n - 1];
  auto it = std::upper_bound(xs.begin(), xs.end(), x);
  std::size_t j = static_cast<std::size_t>(it - xs.begin());
  double t = (x - xs[j - 1]) / (xs[j] - xs[j - 1]);
  return ys[j - 1] + t * (ys[j] - ys[j - 1]);
}

inline Eigen::VectorXd cumtrapz(std::span<const double> xs, std::span<const double> ys) {
  Eigen::VectorXd out(xs.size());
  out[0] = 0.0;
  for (std::size_t i = 1; i < xs.size(); ++i)
    out[i] = out[i - 1] + 0.5 * (ys[i] + ys[i - 1]) * (xs[i] - xs[i - 1]);
  return out;
}

inline std::span<const double> as_span(const Eigen::VectorXd& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}

}  // namespace detail

// Effective potential on a 1d node grid from drift dz = (a + lambda z) dt and
// squared noise sigma2 per node: V = log(sigma2/2) - phi with phi the
// trapezoidal integral of 2(a + lambda z)/sigma2 anchored at z_star; min -> 0.
inline Eigen::VectorXd effective_potential_1d(double a, double lambda,
                                              std::span<const double> z,
                                              std::span<const double> sigma2, double z_star) {
  require(z.size() == sigma2.size() && z.size() >= 2, "effective.size",
          "need matching node and sigma2 arrays with at least two nodes");
  for (std::size_t i = 1; i < z.size(); ++i)
    require(z[i] > z[i - 1], "effective.anchor", "node grid must be strictly increasing");
  for (std::size_t i = 0; i < sigma2.size(); ++i)
    require(sigma2[i] > 0.0, "effective.sigma",
            "zero-diffusion node at z = " + std::to_string(z[i]));
  require(z_star >= z.front() && z_star <= z.back(), "effective.anchor",
          "anchor z* lies outside the node grid");

  Eigen::VectorXd integ(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) integ[i] = 2.0 * (a + lambda * z[i]) / sigma2[i];
  Eigen::VectorXd phi = detail::cumtrapz(z, detail::as_span(integ));
  double phi_star = detail::interp1(z, detail::as_span(phi), z_star);
  Eigen::VectorXd v(z.size());
  for (std::size_t i = 0; i < z.size(); ++i)
    v[i] = std::log(0.5 * sigma2[i]) - (phi[i] - phi_star);
  v.array() -= v.minCoeff();
  return v;
}

// Latent generator over the model cells: neighbor rates use the geometric mean
// of the axis diffusion entries and the square-root weight ratio.
inline SparseGenerator effective_generator(int m, int bins, const std::vector<int>& cells,
                                           const Eigen::VectorXd& weights,
                                           const Eigen::MatrixXd& diffusion) {
  int nk = static_cast<int>(cells.size());
  require(nk >= 2, "effective.size", "need at least two latent cells");
  require(weights.size() == nk && diffusion.rows() == nk && diffusion.cols() == m * m,
          "effective.size", "weights and diffusion must match the model cells");
  for (int k = 0; k < nk; ++k) {
    require(weights[k] > 0.0, "effective.weights",
            "nonpositive weight on latent cell " + std::to_string(cells[k]));
    for (int a = 0; a < m; ++a)
      require(diffusion(k, a * m + a) > 0.0, "effective.diffusion",
              "nonpositive axis diffusion on latent cell " + std::to_string(cells[k]));
  }

  int n_raw = 1;
  for (int l = 0; l < m; ++l) n_raw *= bins;
  std::vector<int> pos(n_raw, -1);
  for (int k = 0; k < nk; ++k) pos[cells[k]] = k;

  double h = 1.0 / bins;
  LatentGrid geom;  // only used for neighbor arithmetic
  geom.m = m;
  geom.bins = bins;
  std::vector<Eigen::Triplet<double>> trip;
  Eigen::VectorXd diag = Eigen::VectorXd::Zero(nk);
  for (int k = 0; k < nk; ++k) {
    for (int a = 0; a < m; ++a) {
      int vraw = geom.neighbor(cells[k], a, +1);
      if (vraw < 0 || pos[vraw] < 0) continue;
      int k2 = pos[vraw];
      double dg = std::sqrt(diffusion(k, a * m + a) * diffusion(k2, a * m + a));
      double rij = dg / (h * h) * std::sqrt(weights[k2] / weights[k]);
      double rji = dg / (h * h) * std::sqrt(weights[k] / weights[k2]);
      trip.emplace_back(k, k2, rij);
      trip.emplace_back(k2, k, rji);
      diag[k] -= rij;
      diag[k2] -= rji;
    }
  }
  for (int k = 0; k < nk; ++k) trip.emplace_back(k, k, diag[k]);

  SparseGenerator gen;
  gen.L.resize(nk, nk);
  gen.L.setFromTriplets(trip.begin(), trip.end());
  gen.L.makeCompressed();
  gen.mu = weights / weights.sum();
  double scale = 0.0;
  for (int k = 0; k < nk; ++k) {
    double d = 0.0;
    for (int a = 0; a < m; ++a) d += diffusion(k, a * m + a);
    scale += gen.mu[k] * d / m;
  }
  gen.flux_scale = scale;
  return gen;
}

// Reduced effective model: drift pair (b, Q), latent binning, stationary
// weights with their potential, per-cell diffusion and the latent generator.
// For m = 1 the anchor-curve fields hold the fine-grid reconstruction.
struct EffectiveModel {
  int m = 0;
  Eigen::VectorXd b;
  Eigen::MatrixXd q;
  LatentGrid latent;
  std::vector<int> cells;     // raw latent ids of the model cells
  Eigen::VectorXd mu_tilde;   // sums to 1; mu_tilde = exp(-v_chi) h^m / z_chi exactly
  Eigen::VectorXd v_chi;      // min 0
  Eigen::MatrixXd diffusion;  // n_model x (m*m)
  double z_chi = 0.0;
  SparseGenerator gen;
  // m == 1 fine curves over zf in [0,1]: diffusion, potential, Boltzmann
  // weight and its cumulative integral with partition value cem[last]
  Eigen::VectorXd zf, df, vf, emv, cem;

  int n_model() const { return static_cast<int>(cells.size()); }
  int model_pos(int raw) const {
    for (std::size_t k = 0; k < cells.size(); ++k)
      if (cells[k] == raw) return static_cast<int>(k);
    return -1;
  }
};

namespace detail {

// anchor-curve reconstruction of the latent coefficients for m = 1
inline void build_effective_curves(EffectiveModel& model, const ChiTable& chi,
                                   const SparseGenerator& gen, const RegularGrid& grid,
                                   double sigma, int bins, int fine_nodes) {
  int n = gen.n();
  Eigen::VectorXd z(n);
  std::array<double, 4> row{};
  for (int i = 0; i < n; ++i) {
    clip_row(chi.values, i, std::span<double>(row.data(), chi.m + 1));
    z[i] = row[0];
  }
  double half_s2 = 0.5 * sigma * sigma;
  Eigen::VectorXd dcell(n);
  for (int i = 0; i < n; ++i) {
    double g2 = 0.0;
    for (int a = 0; a < grid.dim; ++a) {
      double g = gradient_on_grid(grid, z, i, a);
      g2 += g * g;
    }
    dcell[i] = half_s2 * g2;
  }

  // anchors sorted by z, merged within one twentieth of a latent bin
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return z[a] < z[b]; });
  double dz_merge = (1.0 / bins) / 20.0;
  std::vector<double> zi, di;
  int k0 = 0;
  for (int k = 1; k <= n; ++k) {
    if (k < n && z[order[k]] - z[order[k0]] <= dz_merge) continue;
    double w = 0.0, zsum = 0.0, dsum = 0.0;
    for (int t = k0; t < k; ++t) {
      int c = order[t];
      w += gen.mu[c];
      zsum += gen.mu[c] * z[c];
      dsum += gen.mu[c] * dcell[c];
    }
    zi.push_back(zsum / w);
    di.push_back(dsum / w);
    k0 = k;
  }
  std::vector<double> logd(zi.size());
  for (std::size_t t = 0; t < zi.size(); ++t) {
    require(di[t] > 0.0, "effective.sigma",
            "zero-diffusion anchor at z = " + std::to_string(zi[t]));
    logd[t] = std::log(di[t]);
  }

  int nf = fine_nodes;
  double step = 1.0 / (nf - 1);
  Eigen::VectorXd zf(nf), df(nf);
  for (int i = 0; i < nf; ++i) zf[i] = i * step;
  zf[nf - 1] = 1.0;
  for (int i = 0; i < nf; ++i) df[i] = std::exp(interp1(zi, logd, zf[i]));

  Eigen::VectorXd s2f = 2.0 * df;
  Eigen::VectorXd vf = effective_potential_1d(model.b[0], model.q(0, 0), as_span(zf),
                                              as_span(s2f), 0.0);
  Eigen::VectorXd emv = (-vf.array()).exp();
  Eigen::VectorXd cem = cumtrapz(as_span(zf), as_span(emv));
  model.zf = zf;
  model.df = df;
  model.vf = vf;
  model.emv = emv;
  model.cem = cem;

  // latent chain: bin masses from the Boltzmann curve, Boltzmann-averaged
  // diffusion per bin
  double hz = 1.0 / bins;
  Eigen::VectorXd mass(bins), dk(bins);
  for (int k = 0; k < bins; ++k) {
    mass[k] = interp1(as_span(zf), as_span(cem), (k + 1) * hz) -
              interp1(as_span(zf), as_span(cem), k * hz);
    require(mass[k] > 0.0, "effective.mass", "empty latent bin " + std::to_string(k));
    int lo = nf, hi = -1;
    for (int i = 0; i < nf; ++i)
      if (zf[i] >= k * hz && zf[i] <= (k + 1) * hz) {
        lo = std::min(lo, i);
        hi = std::max(hi, i);
      }
    double num = 0.0, den = 0.0;
    for (int i = lo; i < hi; ++i) {
      double dx = zf[i + 1] - zf[i];
      num += 0.5 * (emv[i + 1] * df[i + 1] + emv[i] * df[i]) * dx;
      den += 0.5 * (emv[i + 1] + emv[i]) * dx;
    }
    dk[k] = num / den;
  }

  model.cells.resize(bins);
  for (int k = 0; k < bins; ++k) model.cells[k] = k;
  model.mu_tilde = mass / mass.sum();
  model.diffusion = dk;
  model.gen = effective_generator(1, bins, model.cells, mass, dk);
}

}  // namespace detail

inline EffectiveModel build_effective(const ChiTable& chi, const SparseGenerator& gen,
                                      const RegularGrid& grid, double sigma, int bins = 0,
                                      int fine_nodes = 8001) {
  require(chi.m == 1 || chi.m == 2, "effective.dim",
          "effective model needs m = 1 or m = 2, got " + std::to_string(chi.m));
  if (bins <= 0) bins = chi.m == 1 ? 50 : 40;

  EffectiveModel model;
  model.m = chi.m;
  Eigen::MatrixXd qfull = chi_rate_matrix(gen, chi);
  std::tie(model.b, model.q) = reduce_rate_matrix(qfull);
  model.latent = build_latent_grid(chi, gen.mu, bins);

  if (chi.m == 1) {
    require(fine_nodes >= 2 * bins, "effective.bins", "fine grid too coarse for the bin count");
    detail::build_effective_curves(model, chi, gen, grid, sigma, bins, fine_nodes);
  } else {
    EffectiveField field = effective_drift_diffusion(chi, gen, grid, model.latent, sigma);
    model.cells = model.latent.kept;
    Eigen::VectorXd w(model.n_model());
    for (int k = 0; k < model.n_model(); ++k) w[k] = model.latent.mu_raw[model.cells[k]];
    model.mu_tilde = w / w.sum();
    model.diffusion = field.diffusion;
    model.gen = effective_generator(2, bins, model.cells, w, field.diffusion);
  }

  double hm = std::pow(model.latent.h, model.m);
  model.v_chi = (-(model.mu_tilde.array() / hm).log()).matrix();
  model.v_chi.array() -= model.v_chi.minCoeff();
  model.z_chi = ((-model.v_chi.array()).exp() * hm).sum();
  return model;
}

// Masked finite differences of v_chi over the model cells: central where both
// axis neighbors are model cells, one-sided where one is, zero where neither.
inline Eigen::MatrixXd measure_route_psi(const EffectiveModel& model) {
  int n_raw = model.latent.m == 1 ? model.latent.bins : model.latent.bins * model.latent.bins;
  std::vector<int> pos(n_raw, -1);
  for (int k = 0; k < model.n_model(); ++k) pos[model.cells[k]] = k;
  double h = model.latent.h;

  Eigen::MatrixXd psi(model.n_model(), model.m);
  for (int k = 0; k < model.n_model(); ++k) {
    int raw = model.cells[k];
    for (int a = 0; a < model.m; ++a) {
      int vm = model.latent.neighbor(raw, a, -1);
      int vp = model.latent.neighbor(raw, a, +1);
      int km = vm >= 0 ? pos[vm] : -1;
      int kp = vp >= 0 ? pos[vp] : -1;
      if (km >= 0 && kp >= 0)
        psi(k, a) = (model.v_chi[kp] - model.v_chi[km]) / (2.0 * h);
      else if (kp >= 0)
        psi(k, a) = (model.v_chi[kp] - model.v_chi[k]) / h;
      else if (km >= 0)
        psi(k, a) = (model.v_chi[k] - model.v_chi[km]) / h;
      else
        psi(k, a) = 0.0;
    }
  }
  return psi;
}

struct CurlReport {
  double max_abs = 0.0;  // largest |d0 psi1 - d1 psi0| over interior model cells
  int cells = 0;         // number of interior cells entering the maximum
  double fit_rms = 0.0;  // residual of the manufactured fit (baseline only)
};

// Central-difference antisymmetry of the psi Jacobian over model cells whose
// four axis neighbors are all model cells.
inline CurlReport curl_check(const EffectiveModel& model, const Eigen::MatrixXd& psi) {
  require(model.m == 2, "effective.curl", "curl check needs a two-dimensional latent space");
  require(psi.rows() == model.n_model() && psi.cols() == 2, "effective.size",
          "psi field does not match the model cells");
  int n_raw = model.latent.bins * model.latent.bins;
  std::vector<int> pos(n_raw, -1);
  for (int k = 0; k < model.n_model(); ++k) pos[model.cells[k]] = k;
  double h = model.latent.h;

  CurlReport report;
  for (int k = 0; k < model.n_model(); ++k) {
    int raw = model.cells[k];
    int m0 = model.latent.neighbor(raw, 0, -1), p0 = model.latent.neighbor(raw, 0, +1);
    int m1 = model.latent.neighbor(raw, 1, -1), p1 = model.latent.neighbor(raw, 1, +1);
    if (m0 < 0 || p0 < 0 || m1 < 0 || p1 < 0) continue;
    if (pos[m0] < 0 || pos[p0] < 0 || pos[m1] < 0 || pos[p1] < 0) continue;
    double d = (psi(pos[p0], 1) - psi(pos[m0], 1)) / (2.0 * h) -
               (psi(pos[p1], 0) - psi(pos[m1], 0)) / (2.0 * h);
    report.max_abs = std::max(report.max_abs, std::abs(d));
    report.cells += 1;
  }
  return report;
}

// Quadrature-error baseline for the curl check: least-squares cosine-series
// fit of v_chi on the model cells, analytic gradient, same curl stencil.
inline CurlReport curl_baseline_cosine(const EffectiveModel& model, int degree = 12) {
  require(model.m == 2, "effective.curl", "curl baseline needs a two-dimensional latent space");
  require(degree >= 1, "effective.curl", "cosine degree must be at least 1");
  int nb = model.latent.bins, p1 = degree + 1;
  double h = model.latent.h;
  const double pi = 3.14159265358979323846;

  Eigen::MatrixXd b0(nb, p1), db0(nb, p1);
  for (int i = 0; i < nb; ++i) {
    double zc = (i + 0.5) * h;
    for (int k = 0; k < p1; ++k) {
      b0(i, k) = std::cos(zc * k * pi);
      db0(i, k) = -pi * k * std::sin(zc * k * pi);
    }
  }
  Eigen::MatrixXd a(model.n_model(), p1 * p1);
  for (int k = 0; k < model.n_model(); ++k) {
    int i = model.latent.axis_bin(model.cells[k], 0);
    int j = model.latent.axis_bin(model.cells[k], 1);
    for (int r = 0; r < p1; ++r)
      for (int c = 0; c < p1; ++c) a(k, r * p1 + c) = b0(i, r) * b0(j, c);
  }
  Eigen::VectorXd coef =
      a.bdcSvd(Eigen::ComputeThinU | Eigen::ComputeThinV).solve(model.v_chi);
  Eigen::MatrixXd cf = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                                Eigen::RowMajor>>(coef.data(), p1, p1);

  Eigen::MatrixXd psi(model.n_model(), 2);
  for (int k = 0; k < model.n_model(); ++k) {
    int i = model.latent.axis_bin(model.cells[k], 0);
    int j = model.latent.axis_bin(model.cells[k], 1);
    psi(k, 0) = (db0.row(i) * cf * b0.row(j).transpose()).value();
    psi(k, 1) = (b0.row(i) * cf * db0.row(j).transpose()).value();
  }
  CurlReport report = curl_check(model, psi);
  report.fit_rms = std::sqrt((a * coef - model.v_chi).squaredNorm() / model.n_model());
  return report;
}

// Path integral of psi over the model cells: rectangular axis-ordered paths
// from the cell nearest the simplex barycenter, trapezoidal edge rule, and a
// breadth-first fill for cells the rectangular paths cannot reach.
inline Eigen::VectorXd effective_potential_md(const EffectiveModel& model,
                                              const Eigen::MatrixXd& psi,
                                              std::array<int, 2> axis_order = {0, 1}) {
  require(model.m == 2, "effective.dim", "path-integral potential needs m = 2");
  require(psi.rows() == model.n_model() && psi.cols() == 2, "effective.size",
          "psi field does not match the model cells");
  require((axis_order[0] == 0 && axis_order[1] == 1) ||
              (axis_order[0] == 1 && axis_order[1] == 0),
          "effective.dim", "axis order must be a permutation of {0,1}");
  int nb = model.latent.bins;
  int n_raw = nb * nb;
  std::vector<int> pos(n_raw, -1);
  for (int k = 0; k < model.n_model(); ++k) pos[model.cells[k]] = k;
  double h = model.latent.h;

  int anchor = 0;
  double best = std::numeric_limits<double>::max();
  for (int k = 0; k < model.n_model(); ++k) {
    double d0 = model.latent.center(model.cells[k], 0) - 1.0 / 3.0;
    double d1 = model.latent.center(model.cells[k], 1) - 1.0 / 3.0;
    if (d0 * d0 + d1 * d1 < best) {
      best = d0 * d0 + d1 * d1;
      anchor = k;
    }
  }

  Eigen::VectorXd v =
      Eigen::VectorXd::Constant(model.n_model(), std::numeric_limits<double>::quiet_NaN());
  v[anchor] = 0.0;
  auto edge = [&](int ku, int kv, int axis, int dir) {
    return 0.5 * (psi(ku, axis) + psi(kv, axis)) * dir * h;
  };

  // rectangular paths in the requested axis order
  std::array<int, 2> ac{model.latent.axis_bin(model.cells[anchor], 0),
                        model.latent.axis_bin(model.cells[anchor], 1)};
  for (int k = 0; k < model.n_model(); ++k) {
    if (k == anchor) continue;
    std::array<int, 2> tc{model.latent.axis_bin(model.cells[k], 0),
                          model.latent.axis_bin(model.cells[k], 1)};
    double acc = 0.0;
    bool ok = true;
    std::array<int, 2> cur = ac;
    int ku = anchor;
    for (int step = 0; step < 2 && ok; ++step) {
      int axis = axis_order[step];
      int dir = tc[axis] > cur[axis] ? +1 : -1;
      while (cur[axis] != tc[axis]) {
        std::array<int, 2> nxt = cur;
        nxt[axis] += dir;
        int kv = pos[nxt[0] * nb + nxt[1]];
        if (kv < 0) {
          ok = false;
          break;
        }
        acc += edge(ku, kv, axis, dir);
        cur = nxt;
        ku = kv;
      }
    }
    if (ok) v[k] = acc;
  }

  // breadth-first fill from the assigned cells, deterministic order
  std::vector<int> queue;
  for (int k = 0; k < model.n_model(); ++k)
    if (std::isfinite(v[k])) queue.push_back(k);
  for (std::size_t head = 0; head < queue.size(); ++head) {
    int ku = queue[head];
    for (int axis = 0; axis < 2; ++axis)
      for (int dir : {-1, +1}) {
        int vraw = model.latent.neighbor(model.cells[ku], axis, dir);
        int kv = vraw >= 0 ? pos[vraw] : -1;
        if (kv < 0 || std::isfinite(v[kv])) continue;
        v[kv] = v[ku] + edge(ku, kv, axis, dir);
        queue.push_back(kv);
      }
  }
  std::vector<int> unreached;
  for (int k = 0; k < model.n_model(); ++k)
    if (!std::isfinite(v[k])) unreached.push_back(model.cells[k]);
  if (!unreached.empty()) {
    std::string msg = std::to_string(unreached.size()) +
                      " model cells unreachable from the anchor; first ids:";
    for (std::size_t i = 0; i < unreached.size() && i < 8; ++i)
      msg += " " + std::to_string(unreached[i]);
    fail("effective.connectivity", msg);
  }
  v.array() -= v.minCoeff();
  return v;
}

// Short-burst estimates of the latent drift and diffusion at given start
// points: drift = mean(dz)/s, diffusion = cov(dz)/(2s) with s = substeps * dt.
// Validation companion to the projected coefficients, not used to build models.
struct BurstCoefficients {
  Eigen::MatrixXd drift;      // n_points x m
  Eigen::MatrixXd diffusion;  // n_points x (m*m)
};

template <class ChiF>
BurstCoefficients burst_coefficients(ChiF&& chi, int m, const PotentialSpec& spec,
                                     const Eigen::MatrixXd& starts, double dt, int substeps,
                                     int replicas, std::uint64_t seed) {
  require(m >= 1 && m <= 2, "effective.burst", "latent dimension must be 1 or 2");
  require(dt > 0.0 && substeps >= 1 && replicas >= 2, "effective.burst",
          "need dt > 0, substeps >= 1 and at least two replicas");
  require(starts.cols() == spec.dim(), "effective.burst",
          "start points do not match the potential dimension");

  int np = static_cast<int>(starts.rows());
  double s = substeps * dt;
  BurstCoefficients out;
  out.drift = Eigen::MatrixXd::Zero(np, m);
  out.diffusion = Eigen::MatrixXd::Zero(np, m * m);

  std::vector<double> x0(spec.dim()), z0(m), z1(m);
  for (int i = 0; i < np; ++i) {
    for (int a = 0; a < spec.dim(); ++a) x0[a] = starts(i, a);
    chi(std::span<const double>(x0.data(), x0.size()), std::span<double>(z0.data(), m));
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(m);
    Eigen::MatrixXd second = Eigen::MatrixXd::Zero(m, m);
    for (int k = 0; k < replicas; ++k) {
      auto stream = rng_stream::keyed(seed, i, k);
      auto xs = simulate_path(spec, std::span<const double>(x0.data(), x0.size()), s, dt, stream);
      chi(std::span<const double>(xs.data(), spec.dim()), std::span<double>(z1.data(), m));
      Eigen::VectorXd d(m);
      for (int l = 0; l < m; ++l) d[l] = z1[l] - z0[l];
      mean += d;
      second += d * d.transpose();
    }
    mean /= replicas;
    second /= replicas;
    Eigen::MatrixXd cov = second - mean * mean.transpose();
    out.drift.row(i) = mean.transpose() / s;
    for (int l = 0; l < m; ++l)
      for (int l2 = 0; l2 < m; ++l2) out.diffusion(i, l * m + l2) = cov(l, l2) / (2.0 * s);
  }
  return out;
}

}  // namespace kcg
