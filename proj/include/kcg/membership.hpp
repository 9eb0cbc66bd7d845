// Membership functions chi from dominant eigenvectors via the Inner Simplex
// Algorithm: pick m+1 extremal rows of the eigenvector table, map them to the
// unit-simplex vertices with a linear transform, and read chi off every row.
#pragma once
#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "kcg/error.hpp"
#include "kcg/spectral.hpp"
#include "kcg/sqra.hpp"

namespace kcg {

struct SimplexTransform {
  Eigen::MatrixXd S;              // (m+1) x (m+1), sends selected points to e_1..e_{m+1}
  std::vector<int> vertex_indices;
  std::vector<int> permutation;   // output column j reads transformed column permutation[j]
  double condition = 0.0;

  Eigen::MatrixXd transform(const Eigen::MatrixXd& points) const {
    Eigen::MatrixXd raw = points * S.transpose();
    Eigen::MatrixXd out(raw.rows(), raw.cols());
    for (int j = 0; j < raw.cols(); ++j) out.col(j) = raw.col(permutation[j]);
    return out;
  }
};

struct ChiTable {
  Eigen::MatrixXd values;  // n_cells x (m+1), rows sum to 1
  int m = 0;
};

inline SimplexTransform inner_simplex(const Eigen::MatrixXd& points) {
  const int n = static_cast<int>(points.rows());
  const int mc = static_cast<int>(points.cols());
  require(n >= mc, "membership.points",
          "need at least " + std::to_string(mc) + " points, got " + std::to_string(n));

  SimplexTransform st;
  st.vertex_indices.reserve(mc);
  Eigen::MatrixXd basis(mc, mc);  // orthonormal columns spanning chosen vertices
  double scale = 0.0;
  for (int i = 0; i < n; ++i) scale = std::max(scale, points.row(i).norm());

  for (int v = 0; v < mc; ++v) {
    int best = -1;
    double best_dist = -1.0;
    for (int i = 0; i < n; ++i) {
      Eigen::VectorXd r = points.row(i).transpose();
      if (v > 0) r -= basis.leftCols(v) * (basis.leftCols(v).transpose() * r);
      double d = r.norm();
      if (d > best_dist) {
        best_dist = d;
        best = i;
      }
    }
    require(best_dist > 1e-12 * scale, "membership.degenerate",
            "points are rank deficient: vertex " + std::to_string(v + 1) +
                " (best candidate index " + std::to_string(best) +
                ") adds no new direction");
    st.vertex_indices.push_back(best);
    Eigen::VectorXd r = points.row(best).transpose();
    if (v > 0) r -= basis.leftCols(v) * (basis.leftCols(v).transpose() * r);
    basis.col(v) = r / r.norm();
  }

  Eigen::MatrixXd vertices(mc, mc);  // selected points as columns
  for (int v = 0; v < mc; ++v) vertices.col(v) = points.row(st.vertex_indices[v]).transpose();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(vertices, Eigen::ComputeFullU | Eigen::ComputeFullV);
  double smin = svd.singularValues()[mc - 1];
  st.condition = smin > 0 ? svd.singularValues()[0] / smin
                          : std::numeric_limits<double>::infinity();
  require(st.condition <= 1e12, "membership.degenerate",
          "selected vertex matrix is singular (condition " +
              std::to_string(st.condition) + ")");
  st.S = vertices.inverse();
  st.permutation.resize(mc);
  std::iota(st.permutation.begin(), st.permutation.end(), 0);
  return st;
}

// chi columns ordered so that column j peaks over the j-th-lowest potential
// minimum (ties broken by cell index); pass an empty span to keep ISA order.
inline ChiTable pcca_chi(const SpectralResult& spec, int m,
                         std::span<const double> potential_values = {}) {
  require(spec.k >= m + 1, "membership.pcca",
          "pcca_chi with m=" + std::to_string(m) + " needs " + std::to_string(m + 1) +
              " eigenpairs, spectral result holds " + std::to_string(spec.k));
  if (spec.k >= m + 2) {
    double lo = std::abs(spec.eigenvalues[m]), hi = std::abs(spec.eigenvalues[m + 1]);
    if (lo > 0 && hi / lo < 2.0)
      std::cerr << "kcg: warning: weak spectral gap for m=" << m << " (|lambda_"
                << m + 1 << "|/|lambda_" << m << "| = " << hi / lo << " < 2)\n";
  }

  Eigen::MatrixXd phi = spec.eigenvectors.leftCols(m + 1);
  SimplexTransform st = inner_simplex(phi);
  Eigen::MatrixXd raw = phi * st.S.transpose();
  const int n = static_cast<int>(raw.rows());

  if (!potential_values.empty()) {
    require(static_cast<int>(potential_values.size()) == n, "membership.pcca",
            "potential table length does not match eigenvector rows");
    // hard-assign each cell to its argmax column, then rank columns by the
    // lowest potential reached inside their basin
    std::vector<double> basin_min(m + 1, std::numeric_limits<double>::infinity());
    std::vector<int> basin_cell(m + 1, n);
    for (int i = 0; i < n; ++i) {
      int j = 0;
      raw.row(i).maxCoeff(&j);
      if (potential_values[i] < basin_min[j]) {
        basin_min[j] = potential_values[i];
        basin_cell[j] = i;
      }
    }
    std::vector<int> order(m + 1);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (basin_min[a] != basin_min[b]) return basin_min[a] < basin_min[b];
      return basin_cell[a] < basin_cell[b];
    });
    st.permutation = order;
    Eigen::MatrixXd permuted(n, m + 1);
    for (int j = 0; j <= m; ++j) permuted.col(j) = raw.col(order[j]);
    raw = std::move(permuted);
  }

  for (int i = 0; i < n; ++i) raw.row(i) /= raw.row(i).sum();
  return ChiTable{std::move(raw), m};
}

// Least-squares projection of the generator onto span(chi) in the mu-weighted
// inner product: solve (chi^T W chi) Q^T = chi^T W (L chi).
inline Eigen::MatrixXd chi_rate_matrix(const SparseGenerator& gen, const ChiTable& chi) {
  require(chi.values.rows() == gen.L.rows(), "membership.rate",
          "chi table has " + std::to_string(chi.values.rows()) + " rows, generator " +
              std::to_string(gen.L.rows()) + " cells");
  const Eigen::MatrixXd& x = chi.values;
  Eigen::MatrixXd wx = gen.mu.asDiagonal() * x;
  Eigen::MatrixXd gram = x.transpose() * wx;
  Eigen::MatrixXd rhs = wx.transpose() * (gen.L * x);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(gram);
  double smin = svd.singularValues()[gram.rows() - 1];
  require(smin > 0 && svd.singularValues()[0] / smin <= 1e12, "membership.rank",
          "chi Gram matrix is rank deficient; chi columns are linearly dependent");
  return gram.ldlt().solve(rhs).transpose();
}

}  // namespace kcg
