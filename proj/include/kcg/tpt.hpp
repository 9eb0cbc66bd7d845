// Transition-path theory for full and effective dynamics: committors, mean
// first passage times, reactive density and flux, Dirichlet-form and
// dividing-surface rates, and full-vs-effective rate sweeps.
#pragma once
#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include "kcg/effective.hpp"
#include "kcg/error.hpp"
#include "kcg/grid.hpp"
#include "kcg/membership.hpp"
#include "kcg/sqra.hpp"

namespace kcg {

// A or B set, either as explicit full-space cells, as a latent-space region,
// or as a latent region pulled back through chi onto the full grid.
struct RegionSpec {
  enum class Kind { FullSpaceSet, LatentInterval, LatentBall, Preimage };
  Kind kind = Kind::FullSpaceSet;
  Kind shape = Kind::LatentInterval;  // for Preimage: the latent shape pulled back
  std::vector<int> cells;             // FullSpaceSet
  int axis = 0;                       // LatentInterval component
  double lo = 0.0, hi = 1.0;          // LatentInterval bounds (inclusive)
  std::array<double, 2> center{};     // LatentBall
  double radius = 0.0;

  static RegionSpec full_cells(std::vector<int> cells) {
    RegionSpec r;
    r.kind = Kind::FullSpaceSet;
    r.cells = std::move(cells);
    return r;
  }
  static RegionSpec latent_interval(double lo, double hi, int axis = 0) {
    RegionSpec r;
    r.kind = Kind::LatentInterval;
    r.axis = axis;
    r.lo = lo;
    r.hi = hi;
    return r;
  }
  static RegionSpec latent_ball(double c0, double c1, double radius) {
    RegionSpec r;
    r.kind = Kind::LatentBall;
    r.center = {c0, c1};
    r.radius = radius;
    return r;
  }
  static RegionSpec preimage(const RegionSpec& latent) {
    require(latent.kind == Kind::LatentInterval || latent.kind == Kind::LatentBall,
            "tpt.region", "preimage needs a latent interval or ball");
    RegionSpec r = latent;
    r.kind = Kind::Preimage;
    r.shape = latent.kind;
    return r;
  }
};

// membership mask over the full grid; latent regions are pulled back through
// the raw chi components
inline std::vector<char> resolve_region_full(const RegionSpec& region, const ChiTable& chi) {
  int n = static_cast<int>(chi.values.rows());
  std::vector<char> mask(n, 0);
  if (region.kind == RegionSpec::Kind::FullSpaceSet) {
    for (int c : region.cells) {
      require(c >= 0 && c < n, "tpt.region", "cell index " + std::to_string(c) + " out of range");
      mask[c] = 1;
    }
    return mask;
  }
  RegionSpec::Kind shape =
      region.kind == RegionSpec::Kind::Preimage ? region.shape : region.kind;
  if (shape == RegionSpec::Kind::LatentInterval) {
    require(region.axis >= 0 && region.axis < chi.m, "tpt.region",
            "interval axis out of range");
    for (int i = 0; i < n; ++i) {
      double z = chi.values(i, region.axis);
      mask[i] = (z >= region.lo && z <= region.hi) ? 1 : 0;
    }
    return mask;
  }
  require(chi.m >= 2, "tpt.region", "latent ball needs at least two chi components");
  double r2 = region.radius * region.radius;
  for (int i = 0; i < n; ++i) {
    double d0 = chi.values(i, 0) - region.center[0];
    double d1 = chi.values(i, 1) - region.center[1];
    mask[i] = (d0 * d0 + d1 * d1 <= r2) ? 1 : 0;
  }
  return mask;
}

// membership mask over the model cells, evaluated at bin centers
inline std::vector<char> resolve_region_latent(const RegionSpec& region,
                                               const EffectiveModel& model) {
  require(region.kind == RegionSpec::Kind::LatentInterval ||
              region.kind == RegionSpec::Kind::LatentBall,
          "tpt.region", "latent masks need a latent interval or ball");
  std::vector<char> mask(model.n_model(), 0);
  if (region.kind == RegionSpec::Kind::LatentInterval) {
    require(region.axis >= 0 && region.axis < model.m, "tpt.region",
            "interval axis out of range");
    for (int k = 0; k < model.n_model(); ++k) {
      double z = model.latent.center(model.cells[k], region.axis);
      mask[k] = (z >= region.lo && z <= region.hi) ? 1 : 0;
    }
    return mask;
  }
  require(model.m == 2, "tpt.region", "latent ball needs m = 2");
  double r2 = region.radius * region.radius;
  for (int k = 0; k < model.n_model(); ++k) {
    double d0 = model.latent.center(model.cells[k], 0) - region.center[0];
    double d1 = model.latent.center(model.cells[k], 1) - region.center[1];
    mask[k] = (d0 * d0 + d1 * d1 <= r2) ? 1 : 0;
  }
  return mask;
}

struct TptResult {
  Eigen::VectorXd committor;
  Eigen::VectorXd mfpt;
  Eigen::VectorXd reactive_density;  // mu q (1 - q)
  Eigen::MatrixXd flux;              // per cell, d (full) or m (latent) components
  double rate = 0.0;                 // Dirichlet-form rate
  double mu_a = 0.0;
};

namespace detail {

inline int count_mask(const std::vector<char>& mask) {
  int c = 0;
  for (char v : mask) c += v ? 1 : 0;
  return c;
}

// cells not reachable from the seed set along the generator's adjacency
inline std::vector<int> unreachable_cells(const SparseGenerator& gen,
                                          const std::vector<char>& seed) {
  int n = gen.n();
  std::vector<char> seen(seed.begin(), seed.end());
  std::vector<int> queue;
  for (int i = 0; i < n; ++i)
    if (seed[i]) queue.push_back(i);
  for (std::size_t head = 0; head < queue.size(); ++head) {
    int u = queue[head];
    for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(gen.L, u); it; ++it) {
      int v = static_cast<int>(it.col());
      if (v != u && !seen[v]) {
        seen[v] = 1;
        queue.push_back(v);
      }
    }
  }
  std::vector<int> missing;
  for (int i = 0; i < n; ++i)
    if (!seen[i]) missing.push_back(i);
  return missing;
}

[[noreturn]] inline void fail_stranded(const std::vector<int>& stranded) {
  std::string msg = std::to_string(stranded.size()) +
                    " cells are not connected to the boundary set; first ids:";
  for (std::size_t i = 0; i < stranded.size() && i < 8; ++i)
    msg += " " + std::to_string(stranded[i]);
  fail("tpt.disconnected", msg);
}

// Solve the mu-symmetrized boundary value problem (-mu L)_ff x = rhs on the
// free cells: direct factorization up to 3e4 unknowns, Jacobi-preconditioned
// conjugate gradients beyond.
inline Eigen::VectorXd solve_free(const SparseGenerator& gen, const std::vector<int>& free_cells,
                                  const Eigen::VectorXd& rhs) {
  int nf = static_cast<int>(free_cells.size());
  std::vector<int> fpos(gen.n(), -1);
  for (int k = 0; k < nf; ++k) fpos[free_cells[k]] = k;

  std::vector<Eigen::Triplet<double>> trip;
  for (int k = 0; k < nf; ++k) {
    int i = free_cells[k];
    for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(gen.L, i); it; ++it) {
      int j = fpos[static_cast<int>(it.col())];
      if (j >= 0) trip.emplace_back(k, j, -gen.mu[i] * it.value());
    }
  }
  Eigen::SparseMatrix<double> a(nf, nf);
  a.setFromTriplets(trip.begin(), trip.end());
  Eigen::SparseMatrix<double> at = a.transpose();
  Eigen::SparseMatrix<double> sym = 0.5 * (a + at);
  sym.makeCompressed();

  if (nf <= 30000) {
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(sym);
    require(solver.info() == Eigen::Success, "tpt.solve",
            "sparse factorization of the boundary value problem failed");
    Eigen::VectorXd x = solver.solve(rhs);
    require(solver.info() == Eigen::Success, "tpt.solve", "sparse solve failed");
    return x;
  }

  Eigen::VectorXd minv = sym.diagonal().cwiseInverse();
  Eigen::VectorXd x = Eigen::VectorXd::Zero(nf);
  Eigen::VectorXd r = rhs;
  Eigen::VectorXd z = minv.cwiseProduct(r);
  Eigen::VectorXd p = z;
  double rz = r.dot(z);
  double target = 1e-10 * rhs.norm();
  for (int it = 0; it < 20000; ++it) {
    Eigen::VectorXd ap = sym * p;
    double alpha = rz / p.dot(ap);
    x += alpha * p;
    r -= alpha * ap;
    if (r.norm() <= target) return x;
    z = minv.cwiseProduct(r);
    double rz2 = r.dot(z);
    p = z + (rz2 / rz) * p;
    rz = rz2;
  }
  fail("tpt.solve", "conjugate gradients did not reach the residual target");
}

}  // namespace detail

// mean first passage time to B: L m = -1 outside B, m = 0 on B
inline Eigen::VectorXd mfpt(const SparseGenerator& gen, const std::vector<char>& b_mask) {
  int n = gen.n();
  require(static_cast<int>(b_mask.size()) == n, "tpt.size", "mask does not match the generator");
  require(detail::count_mask(b_mask) > 0, "tpt.region", "target set is empty");

  auto stranded = detail::unreachable_cells(gen, b_mask);
  if (!stranded.empty()) detail::fail_stranded(stranded);

  std::vector<int> free_cells;
  for (int i = 0; i < n; ++i)
    if (!b_mask[i]) free_cells.push_back(i);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(n);
  if (free_cells.empty()) return out;

  // L_ff m = -1  ->  (-mu L)_ff m = mu_f
  Eigen::VectorXd rhs(free_cells.size());
  for (std::size_t k = 0; k < free_cells.size(); ++k) rhs[k] = gen.mu[free_cells[k]];
  Eigen::VectorXd mf = detail::solve_free(gen, free_cells, rhs);
  for (std::size_t k = 0; k < free_cells.size(); ++k) out[free_cells[k]] = mf[k];
  return out;
}

// committor to B before A: L q = 0 on the free cells, q = 0 on A, q = 1 on B
inline Eigen::VectorXd committor(const SparseGenerator& gen, const std::vector<char>& a_mask,
                                 const std::vector<char>& b_mask) {
  int n = gen.n();
  require(static_cast<int>(a_mask.size()) == n && static_cast<int>(b_mask.size()) == n,
          "tpt.size", "masks do not match the generator");
  require(detail::count_mask(a_mask) > 0 && detail::count_mask(b_mask) > 0, "tpt.region",
          "A and B must both be nonempty");
  std::vector<char> boundary(n, 0);
  for (int i = 0; i < n; ++i) {
    require(!(a_mask[i] && b_mask[i]), "tpt.region",
            "A and B overlap at cell " + std::to_string(i));
    boundary[i] = (a_mask[i] || b_mask[i]) ? 1 : 0;
  }
  auto stranded = detail::unreachable_cells(gen, boundary);
  if (!stranded.empty()) detail::fail_stranded(stranded);

  std::vector<int> free_cells;
  for (int i = 0; i < n; ++i)
    if (!boundary[i]) free_cells.push_back(i);
  Eigen::VectorXd q = Eigen::VectorXd::Zero(n);
  for (int i = 0; i < n; ++i) q[i] = b_mask[i] ? 1.0 : 0.0;
  if (free_cells.empty()) return q;

  // L_ff q_f = -L_fB 1  ->  (-mu L)_ff q_f = mu_f (L_fB 1)
  Eigen::VectorXd rhs(free_cells.size());
  for (std::size_t k = 0; k < free_cells.size(); ++k) {
    int i = free_cells[k];
    double acc = 0.0;
    for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(gen.L, i); it; ++it)
      if (b_mask[it.col()]) acc += it.value();
    rhs[k] = gen.mu[i] * acc;
  }
  Eigen::VectorXd qf = detail::solve_free(gen, free_cells, rhs);
  for (std::size_t k = 0; k < free_cells.size(); ++k) q[free_cells[k]] = qf[k];
  return q;
}

// reactive density mu q (1-q), flux (sigma^2/2) mu grad q and the
// Dirichlet-form rate over the transition region (A and B cells excluded)
inline TptResult reactive_quantities(const SparseGenerator& gen, const RegularGrid& grid,
                                     const Eigen::VectorXd& q, const std::vector<char>& a_mask,
                                     const std::vector<char>& b_mask, double sigma) {
  int n = gen.n();
  require(q.size() == n && grid.n_cells == n, "tpt.size",
          "committor and grid must match the generator");
  require(sigma > 0.0, "tpt.size", "sigma must be positive");

  TptResult out;
  out.committor = q;
  out.reactive_density = gen.mu.array() * q.array() * (1.0 - q.array());
  out.flux = Eigen::MatrixXd::Zero(n, grid.dim);
  double half_s2 = 0.5 * sigma * sigma;
  for (int i = 0; i < n; ++i) out.mu_a += a_mask[i] ? gen.mu[i] : 0.0;
  require(out.mu_a > 0.0, "tpt.region", "A carries no stationary mass");

  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    double g2 = 0.0;
    for (int a = 0; a < grid.dim; ++a) {
      double g = detail::gradient_on_grid(grid, q, i, a);
      out.flux(i, a) = half_s2 * gen.mu[i] * g;
      g2 += g * g;
    }
    if (!a_mask[i] && !b_mask[i]) acc += gen.mu[i] * g2;
  }
  out.rate = half_s2 * acc / out.mu_a;
  return out;
}

// dividing-surface rate: flux through the q = level cut
inline double cut_rate(const SparseGenerator& gen, const Eigen::VectorXd& q,
                       const std::vector<char>& a_mask, double level = 0.5) {
  require(q.size() == gen.n(), "tpt.size", "committor does not match the generator");
  double mu_a = 0.0;
  for (int i = 0; i < gen.n(); ++i) mu_a += a_mask[i] ? gen.mu[i] : 0.0;
  require(mu_a > 0.0, "tpt.region", "A carries no stationary mass");
  double acc = 0.0;
  for (int i = 0; i < gen.n(); ++i) {
    if (!(q[i] < level)) continue;
    for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(gen.L, i); it; ++it) {
      int j = static_cast<int>(it.col());
      if (j != i && q[j] >= level) acc += gen.mu[i] * it.value() * (q[j] - q[i]);
    }
  }
  return acc / mu_a;
}

// closed-form effective kinetics for m = 1 on the fine anchor-curve grid
struct EffectiveKinetics1d {
  Eigen::VectorXd q_bins;  // at bin centers
  Eigen::VectorXd m_bins;
  Eigen::VectorXd q_fine;  // on the model's fine z grid
  Eigen::VectorXd m_fine;
  double rate = 0.0;
  double mu_a = 0.0;
  double z_q = 0.0;  // committor normalization integral
};

inline EffectiveKinetics1d effective_kinetics_1d(const EffectiveModel& model, double z_a,
                                                 double z_b) {
  require(model.m == 1, "tpt.dim", "closed-form kinetics needs m = 1");
  require(model.zf.size() > 0, "tpt.dim", "model carries no fine anchor curves");
  require(z_a >= 0.0 && z_a < z_b && z_b <= 1.0, "tpt.region",
          "need 0 <= z_A < z_B <= 1");

  auto zf = detail::as_span(model.zf);
  int nf = static_cast<int>(model.zf.size());
  Eigen::VectorXd g(nf);
  for (int i = 0; i < nf; ++i) g[i] = std::exp(model.vf[i]) / model.df[i];
  Eigen::VectorXd cg = detail::cumtrapz(zf, detail::as_span(g));
  double cg_a = detail::interp1(zf, detail::as_span(cg), z_a);
  double cg_b = detail::interp1(zf, detail::as_span(cg), z_b);
  double z_q = cg_b - cg_a;

  EffectiveKinetics1d out;
  out.z_q = z_q;
  out.q_fine.resize(nf);
  for (int i = 0; i < nf; ++i) {
    double v = std::clamp((cg[i] - cg_a) / z_q, 0.0, 1.0);
    if (model.zf[i] <= z_a) v = 0.0;
    if (model.zf[i] >= z_b) v = 1.0;
    out.q_fine[i] = v;
  }

  Eigen::VectorXd gy(nf);
  for (int i = 0; i < nf; ++i) gy[i] = g[i] * model.cem[i];
  Eigen::VectorXd cgy = detail::cumtrapz(zf, detail::as_span(gy));
  double cgy_b = detail::interp1(zf, detail::as_span(cgy), z_b);
  out.m_fine.resize(nf);
  for (int i = 0; i < nf; ++i)
    out.m_fine[i] = model.zf[i] >= z_b ? 0.0 : cgy_b - cgy[i];

  int nb = model.latent.bins;
  out.q_bins.resize(nb);
  out.m_bins.resize(nb);
  for (int k = 0; k < nb; ++k) {
    double zc = (k + 0.5) * model.latent.h;
    out.q_bins[k] = detail::interp1(zf, detail::as_span(out.q_fine), zc);
    out.m_bins[k] = detail::interp1(zf, detail::as_span(out.m_fine), zc);
  }

  double zc_total = model.cem[nf - 1];
  out.mu_a = detail::interp1(zf, detail::as_span(model.cem), z_a) / zc_total;
  out.rate = 1.0 / (z_q * zc_total * out.mu_a);
  return out;
}

// latent boundary value problems with the per-cell diffusion tensor: masked
// finite-difference gradients, Dirichlet-form rate over free model cells
inline TptResult effective_kinetics_md(const EffectiveModel& model,
                                       const std::vector<char>& a_mask,
                                       const std::vector<char>& b_mask) {
  int nk = model.n_model();
  require(static_cast<int>(a_mask.size()) == nk && static_cast<int>(b_mask.size()) == nk,
          "tpt.size", "masks do not match the model cells");

  TptResult out;
  out.committor = committor(model.gen, a_mask, b_mask);
  out.mfpt = mfpt(model.gen, b_mask);
  out.reactive_density =
      model.gen.mu.array() * out.committor.array() * (1.0 - out.committor.array());
  for (int k = 0; k < nk; ++k) out.mu_a += a_mask[k] ? model.gen.mu[k] : 0.0;
  require(out.mu_a > 0.0, "tpt.region", "A carries no stationary mass");

  // masked gradient of the committor over the model cells
  int n_raw = model.latent.m == 1 ? model.latent.bins : model.latent.bins * model.latent.bins;
  std::vector<int> pos(n_raw, -1);
  for (int k = 0; k < nk; ++k) pos[model.cells[k]] = k;
  double h = model.latent.h;
  int m = model.m;
  Eigen::MatrixXd gq(nk, m);
  for (int k = 0; k < nk; ++k) {
    int raw = model.cells[k];
    for (int a = 0; a < m; ++a) {
      int vm = model.latent.neighbor(raw, a, -1);
      int vp = model.latent.neighbor(raw, a, +1);
      int km = vm >= 0 ? pos[vm] : -1;
      int kp = vp >= 0 ? pos[vp] : -1;
      if (km >= 0 && kp >= 0)
        gq(k, a) = (out.committor[kp] - out.committor[km]) / (2.0 * h);
      else if (kp >= 0)
        gq(k, a) = (out.committor[kp] - out.committor[k]) / h;
      else if (km >= 0)
        gq(k, a) = (out.committor[k] - out.committor[km]) / h;
      else
        gq(k, a) = 0.0;
    }
  }

  out.flux = Eigen::MatrixXd::Zero(nk, m);
  double acc = 0.0;
  Eigen::MatrixXd d(m, m);
  for (int k = 0; k < nk; ++k) {
    for (int a = 0; a < m; ++a)
      for (int b = 0; b < m; ++b) d(a, b) = model.diffusion(k, a * m + b);
    Eigen::VectorXd gv = gq.row(k).transpose();
    out.flux.row(k) = (model.gen.mu[k] * (d * gv)).transpose();
    if (!a_mask[k] && !b_mask[k]) acc += model.gen.mu[k] * gv.dot(d * gv);
  }
  out.rate = acc / out.mu_a;
  return out;
}

struct RateSweepRow {
  double r_a = 0.0;
  double k_full = 0.0;
  double k_effective = 0.0;
  double rel_dev = 0.0;
  bool flagged = false;  // empty or overlapping sets; rates not comparable
};

// full-vs-effective transition rates over a grid of A radii/thresholds with a
// fixed B region. Entries run independently; results come in input order.
inline std::vector<RateSweepRow> rate_sweep(const SparseGenerator& gen, const RegularGrid& grid,
                                            const ChiTable& chi, const EffectiveModel& model,
                                            std::span<const double> r_values,
                                            const RegionSpec& b_region, double sigma,
                                            int jobs = 1) {
  require(gen.n() == grid.n_cells && chi.values.rows() == gen.n(), "tpt.size",
          "generator, grid and chi table disagree");
  require(model.m != 1 || b_region.kind == RegionSpec::Kind::LatentInterval, "tpt.region",
          "one-dimensional sweeps need an interval B region");
  std::vector<char> b_full = resolve_region_full(b_region, chi);
  std::vector<char> b_lat = resolve_region_latent(b_region, model);

  std::vector<RateSweepRow> rows(r_values.size());
  auto run_entry = [&](std::size_t t) {
    RateSweepRow& row = rows[t];
    row.r_a = r_values[t];
    RegionSpec a_latent =
        model.m == 1
            ? RegionSpec::latent_interval(-std::numeric_limits<double>::infinity(), row.r_a)
            : RegionSpec::latent_ball(0.0, 1.0, row.r_a);
    std::vector<char> a_full = resolve_region_full(RegionSpec::preimage(a_latent), chi);
    std::vector<char> a_lat = resolve_region_latent(a_latent, model);
    bool empty_a = detail::count_mask(a_full) == 0 || detail::count_mask(a_lat) == 0;
    bool overlap = false;
    for (std::size_t i = 0; i < a_full.size(); ++i) overlap |= (a_full[i] && b_full[i]) != 0;
    for (std::size_t i = 0; i < a_lat.size(); ++i) overlap |= (a_lat[i] && b_lat[i]) != 0;
    if (empty_a || overlap) {
      row.flagged = true;
      row.k_full = row.k_effective = row.rel_dev =
          std::numeric_limits<double>::quiet_NaN();
      return;
    }
    Eigen::VectorXd q = committor(gen, a_full, b_full);
    row.k_full = reactive_quantities(gen, grid, q, a_full, b_full, sigma).rate;
    if (model.m == 1) {
      row.k_effective = effective_kinetics_1d(model, row.r_a, b_region.lo).rate;
    } else {
      row.k_effective = effective_kinetics_md(model, a_lat, b_lat).rate;
    }
    row.rel_dev = std::abs(row.k_effective - row.k_full) / row.k_full;
  };

  if (jobs <= 1 || rows.size() <= 1) {
    for (std::size_t t = 0; t < rows.size(); ++t) run_entry(t);
  } else {
    std::size_t workers = std::min<std::size_t>(jobs, rows.size());
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t t = w; t < rows.size(); t += workers) run_entry(t);
      });
    for (auto& th : pool) th.join();
  }
  return rows;
}

}  // namespace kcg
