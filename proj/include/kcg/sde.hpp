// Euler-Maruyama integration of the overdamped Langevin equation and burst
// ensembles: N start points, M endpoint replicas each, forming the training
// tensors for the network route. Replica (i,k) draws from an rng stream keyed
// by (seed, i, k), so results never depend on execution order.
#pragma once
#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kcg/error.hpp"
#include "kcg/grid.hpp"
#include "kcg/potentials.hpp"
#include "kcg/rng.hpp"

namespace kcg {

struct BurstPlan {
  int n_start = 0;
  int n_replicas = 0;
  double lag = 0.0;
  double dt = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    require(n_start >= 1 && n_replicas >= 1, "sde.plan",
            "burst plan needs n_start >= 1 and n_replicas >= 1");
    require(dt > 0 && lag > 0, "sde.plan", "burst plan needs dt > 0 and lag > 0");
    steps();
  }
  int steps() const {
    double ratio = lag / dt;
    long long rounded = std::llround(ratio);
    require(rounded >= 1 && std::abs(ratio - static_cast<double>(rounded)) <=
                                1e-12 * ratio,
            "sde.plan", "lag " + std::to_string(lag) + " is not an integer multiple of dt " +
                            std::to_string(dt));
    return static_cast<int>(rounded);
  }
};

struct BurstData {
  int dim = 0;
  Eigen::MatrixXd starts;  // n_start x dim
  Eigen::MatrixXd ends;    // (n_start * n_replicas) x dim, row i*M + k
  std::vector<std::pair<int, int>> box_violations;  // (i, k) outside inflated box

  int n_start() const { return static_cast<int>(starts.rows()); }
  int n_replicas() const {
    return n_start() ? static_cast<int>(ends.rows()) / n_start() : 0;
  }
};

inline std::array<double, 3> simulate_path(const PotentialSpec& spec,
                                           std::span<const double> x0, double t_total,
                                           double dt, rng_stream& stream) {
  detail::check_dim(spec, x0);
  require(dt > 0 && t_total >= 0, "sde.steps", "need dt > 0 and t_total >= 0");
  long long steps = 0;
  if (t_total > 0) {
    double ratio = t_total / dt;
    steps = std::llround(ratio);
    require(std::abs(ratio - static_cast<double>(steps)) <= 1e-12 * ratio, "sde.steps",
            "t_total is not an integer multiple of dt");
  }

  const int d = spec.dim();
  const double noise = spec.sigma * std::sqrt(dt);
  std::array<double, 3> x{0, 0, 0};
  std::array<double, 3> g{0, 0, 0};
  for (int a = 0; a < d; ++a) x[a] = x0[a];
  for (long long s = 0; s < steps; ++s) {
    grad_potential(spec, std::span<const double>(x.data(), d),
                   std::span<double>(g.data(), d));
    bool ok = true;
    for (int a = 0; a < d; ++a) {
      x[a] += -g[a] * dt + noise * stream.normal();
      ok = ok && std::isfinite(x[a]);
    }
    require(ok, "sde.blowup",
            "integration produced a non-finite state at step " + std::to_string(s + 1));
  }
  return x;
}

struct StartsMode {
  enum class Kind { UniformBox, GridCenters, Provided };
  Kind kind = Kind::UniformBox;
  const RegularGrid* grid = nullptr;
  Eigen::MatrixXd points;

  static StartsMode uniform_box() { return {}; }
  static StartsMode grid_centers(const RegularGrid& g) {
    StartsMode m;
    m.kind = Kind::GridCenters;
    m.grid = &g;
    return m;
  }
  static StartsMode provided(Eigen::MatrixXd pts) {
    StartsMode m;
    m.kind = Kind::Provided;
    m.points = std::move(pts);
    return m;
  }
};

inline BurstData generate_bursts(const PotentialSpec& spec, const BurstPlan& plan,
                                 const StartsMode& starts_mode) {
  plan.validate();
  const int d = spec.dim();
  const int n = plan.n_start;
  const int m = plan.n_replicas;

  BurstData data;
  data.dim = d;
  data.starts.resize(n, d);
  switch (starts_mode.kind) {
    case StartsMode::Kind::UniformBox:
      for (int i = 0; i < n; ++i) {
        // key one past the last replica index, disjoint from every (i, k<m)
        rng_stream stream = rng_stream::keyed(plan.seed, i, m);
        for (int a = 0; a < d; ++a)
          data.starts(i, a) =
              spec.box.lo[a] + stream.uniform() * (spec.box.hi[a] - spec.box.lo[a]);
      }
      break;
    case StartsMode::Kind::GridCenters: {
      require(starts_mode.grid != nullptr, "sde.starts", "grid_centers mode needs a grid");
      const RegularGrid& grid = *starts_mode.grid;
      require(grid.n_cells == n, "sde.starts",
              "grid has " + std::to_string(grid.n_cells) + " centers, plan expects " +
                  std::to_string(n) + " starts");
      for (int i = 0; i < n; ++i) {
        auto c = grid.center(i);
        for (int a = 0; a < d; ++a) data.starts(i, a) = c[a];
      }
      break;
    }
    case StartsMode::Kind::Provided:
      require(static_cast<int>(starts_mode.points.rows()) == n &&
                  static_cast<int>(starts_mode.points.cols()) == d,
              "sde.starts", "provided starts must be " + std::to_string(n) + " x " +
                                std::to_string(d));
      data.starts = starts_mode.points;
      break;
  }

  std::array<double, 3> lo{0, 0, 0}, hi{0, 0, 0};
  for (int a = 0; a < d; ++a) {
    double mid = 0.5 * (spec.box.lo[a] + spec.box.hi[a]);
    double half = 0.6 * (spec.box.hi[a] - spec.box.lo[a]);  // box inflated by 20%
    lo[a] = mid - half;
    hi[a] = mid + half;
  }

  data.ends.resize(static_cast<Eigen::Index>(n) * m, d);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < m; ++k) {
      rng_stream stream = rng_stream::keyed(plan.seed, i, k);
      std::array<double, 3> y;
      try {
        Eigen::VectorXd x0 = data.starts.row(i).transpose();
        y = simulate_path(spec, std::span<const double>(x0.data(), d), plan.lag,
                          plan.dt, stream);
      } catch (const error& e) {
        throw error(e.code(), "burst i=" + std::to_string(i) + " k=" +
                                  std::to_string(k) + ": " + e.message());
      }
      bool inside = true;
      for (int a = 0; a < d; ++a) {
        data.ends(static_cast<Eigen::Index>(i) * m + k, a) = y[a];
        inside = inside && y[a] >= lo[a] && y[a] <= hi[a];
      }
      if (!inside) data.box_violations.emplace_back(i, k);
    }
  }
  return data;
}

}  // namespace kcg
