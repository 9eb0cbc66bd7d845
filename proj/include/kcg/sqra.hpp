// Square-Root Approximation of the overdamped generator on a regular grid:
// a sparse rate matrix L with L_ij = (sigma^2/2)/h_a^2 * sqrt(mu_j/mu_i) for
// face neighbors, zero row sums, and detailed balance w.r.t. mu ~ exp(-beta V).
#pragma once
#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "kcg/error.hpp"
#include "kcg/grid.hpp"

namespace kcg {

struct SparseGenerator {
  Eigen::SparseMatrix<double, Eigen::RowMajor> L;
  Eigen::VectorXd mu;        // stationary weights, normalized to sum 1
  double flux_scale = 1.0;   // the sigma^2/2 prefactor used in the rates

  int n() const { return static_cast<int>(L.rows()); }
};

inline SparseGenerator sqra_generator(const RegularGrid& grid,
                                      std::span<const double> potential_values,
                                      double beta, double sigma) {
  require(static_cast<int>(potential_values.size()) == grid.n_cells, "sqra.size",
          "potential table has " + std::to_string(potential_values.size()) +
              " entries for " + std::to_string(grid.n_cells) + " cells");
  require(beta > 0 && sigma > 0, "sqra.params", "beta and sigma must be positive");

  double v_min = potential_values[0];
  for (double v : potential_values) {
    require(std::isfinite(v), "sqra.potential", "non-finite potential value");
    v_min = std::min(v_min, v);
  }

  const int n = grid.n_cells;
  const double flux = 0.5 * sigma * sigma;

  // shifted log-weights keep exp(-beta V) in range regardless of the offset
  Eigen::VectorXd mu(n);
  for (int i = 0; i < n; ++i) mu[i] = std::exp(-beta * (potential_values[i] - v_min));
  mu /= mu.sum();

  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(static_cast<size_t>(n) * (2 * grid.dim + 1));
  for (int i = 0; i < n; ++i) {
    double diag = 0.0;
    grid.for_each_neighbor(i, [&](int j, int axis, int) {
      double rate = flux / (grid.h[axis] * grid.h[axis]) *
                    std::exp(-0.5 * beta * (potential_values[j] - potential_values[i]));
      trips.emplace_back(i, j, rate);
      diag -= rate;
    });
    trips.emplace_back(i, i, diag);
  }

  SparseGenerator gen;
  gen.L.resize(n, n);
  gen.L.setFromTriplets(trips.begin(), trips.end());
  gen.L.makeCompressed();
  gen.mu = std::move(mu);
  gen.flux_scale = flux;
  return gen;
}

inline Eigen::VectorXd apply_generator(const SparseGenerator& gen,
                                       const Eigen::VectorXd& f) {
  require(f.size() == gen.L.rows(), "sqra.apply",
          "vector has length " + std::to_string(f.size()) + ", generator has " +
              std::to_string(gen.L.rows()) + " cells");
  return gen.L * f;
}

// Largest relative violation of mu_i L_ij = mu_j L_ji over stored entry pairs.
inline double detailed_balance_violation(const SparseGenerator& gen) {
  double worst = 0.0;
  for (int i = 0; i < gen.L.outerSize(); ++i) {
    for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(gen.L, i); it;
         ++it) {
      int j = static_cast<int>(it.col());
      if (j <= i) continue;
      double fwd = gen.mu[i] * it.value();
      double bwd = gen.mu[j] * gen.L.coeff(j, i);
      double scale = std::max(std::abs(fwd), std::abs(bwd));
      if (scale > 0) worst = std::max(worst, std::abs(fwd - bwd) / scale);
    }
  }
  return worst;
}

}  // namespace kcg
