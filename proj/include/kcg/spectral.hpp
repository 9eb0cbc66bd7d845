// Dominant spectrum of a reversible sparse generator. Detailed balance makes
// S = D_sqrt(mu) L D_sqrt(mu)^-1 symmetric; we solve the symmetric problem
// (dense below 5000 cells, thick-restart Lanczos above) and back-transform.
#pragma once
#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>
#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "kcg/error.hpp"
#include "kcg/rng.hpp"
#include "kcg/sqra.hpp"

namespace kcg {

struct SpectralResult {
  Eigen::VectorXd eigenvalues;   // descending, eigenvalues[0] = 0 up to solver noise
  Eigen::MatrixXd eigenvectors;  // n x k, columns mu-orthonormal
  int k = 0;
  Eigen::VectorXd residuals;     // per pair, ||L phi - lambda phi||_inf
};

namespace detail {

using SpMat = Eigen::SparseMatrix<double, Eigen::RowMajor>;

inline SpMat symmetrized_generator(const SparseGenerator& gen) {
  const int n = gen.n();
  Eigen::VectorXd sq = gen.mu.array().sqrt();
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(gen.L.nonZeros());
  double max_abs = 0.0;
  for (int i = 0; i < n; ++i) {
    for (SpMat::InnerIterator it(gen.L, i); it; ++it) {
      double v = it.value() * sq[i] / sq[it.col()];
      trips.emplace_back(i, static_cast<int>(it.col()), v);
      max_abs = std::max(max_abs, std::abs(v));
    }
  }
  SpMat s(n, n);
  s.setFromTriplets(trips.begin(), trips.end());
  SpMat st = SpMat(s.transpose());
  double asym = 0.0;
  for (int i = 0; i < n; ++i) {
    SpMat::InnerIterator a(s, i), b(st, i);
    for (; a && b; ++a, ++b) asym = std::max(asym, std::abs(a.value() - b.value()));
  }
  require(asym <= 1e-8 * max_abs, "spectral.reversibility",
          "generator is not reversible: symmetrization defect " + std::to_string(asym));
  return 0.5 * (s + st);
}

// Lanczos noise amplified by 1/sqrt(mu) wrecks eigenvector components in
// high-potential cells; re-solving the strongly diagonally dominant Dirichlet
// block (L_FF - lambda) phi_F = -L_FS phi_S there restores local residuals.
inline void refine_junk_cells(const SparseGenerator& gen, double lambda,
                              Eigen::VectorXd& phi) {
  const int n = gen.n();
  const double floor = 1e-8 * gen.mu.maxCoeff();
  std::vector<int> pos(n, -1);
  std::vector<int> cells;
  for (int i = 0; i < n; ++i)
    if (gen.mu[i] < floor) {
      pos[i] = static_cast<int>(cells.size());
      cells.push_back(i);
    }
  if (cells.empty()) return;

  const int nf = static_cast<int>(cells.size());
  std::vector<Eigen::Triplet<double>> trips;
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(nf);
  for (int r = 0; r < nf; ++r) {
    int i = cells[r];
    for (SpMat::InnerIterator it(gen.L, i); it; ++it) {
      int j = static_cast<int>(it.col());
      if (pos[j] >= 0) {
        double v = it.value() - (i == j ? lambda : 0.0);
        trips.emplace_back(r, pos[j], v);
      } else {
        rhs[r] -= it.value() * phi[j];
      }
    }
  }
  Eigen::SparseMatrix<double> block(nf, nf);
  block.setFromTriplets(trips.begin(), trips.end());
  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu(block);
  require(lu.info() == Eigen::Success, "spectral.refine",
          "Dirichlet block factorization failed during eigenvector refinement");
  Eigen::VectorXd x = lu.solve(rhs);
  for (int r = 0; r < nf; ++r) phi[cells[r]] = x[r];
}

// Deterministic sign: mu-weighted first moment over cell index positive,
// falling back to the first extremal component when the moment vanishes.
inline void fix_sign(const Eigen::VectorXd& mu, Eigen::VectorXd& phi) {
  double moment = 0.0, scale = 0.0;
  for (int i = 0; i < phi.size(); ++i) {
    moment += mu[i] * phi[i] * (i + 1);
    scale += mu[i] * std::abs(phi[i]) * (i + 1);
  }
  if (std::abs(moment) > 1e-10 * scale) {
    if (moment < 0) phi = -phi;
    return;
  }
  double peak = phi.cwiseAbs().maxCoeff();
  for (int i = 0; i < phi.size(); ++i) {
    if (std::abs(phi[i]) >= 0.5 * peak) {
      if (phi[i] < 0) phi = -phi;
      return;
    }
  }
}

// Thick-restart Lanczos on S with full reorthogonalization and a dense
// projection matrix. Keeping every projection coefficient (not just the
// tridiagonal) makes the restart seam exact without special cases.
inline void lanczos_topk(const SpMat& s, int k, Eigen::VectorXd& theta,
                         Eigen::MatrixXd& u) {
  const int n = static_cast<int>(s.rows());
  const int ncv = std::min(n, std::max(2 * k + 20, 160));
  const int keep = std::min(ncv - 10, std::max(2 * k, 30));
  double snorm = 0.0;
  for (int i = 0; i < n; ++i) {
    double row = 0.0;
    for (SpMat::InnerIterator it(s, i); it; ++it) row += std::abs(it.value());
    snorm = std::max(snorm, row);
  }
  const double tol = 1e-13 * snorm;

  Eigen::MatrixXd v(n, ncv);
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(ncv, ncv);
  rng_stream rng(0x9d2c5680u);
  for (int i = 0; i < n; ++i) v(i, 0) = rng.normal();
  v.col(0).normalize();

  int j = 0;
  Eigen::VectorXd w(n), proj;
  for (int restart = 0; restart < 500; ++restart) {
    for (; j < ncv; ++j) {
      w.noalias() = s * v.col(j);
      auto basis = v.leftCols(j + 1);
      proj = basis.transpose() * w;
      w.noalias() -= basis * proj;
      Eigen::VectorXd proj2 = basis.transpose() * w;
      w.noalias() -= basis * proj2;
      proj += proj2;
      h.col(j).head(j + 1) = proj;
      h.row(j).head(j + 1) = proj.transpose();
      double beta = w.norm();
      if (j + 1 < ncv) {
        if (beta > 1e-14 * snorm) {
          v.col(j + 1) = w / beta;
        } else {
          // invariant subspace hit; continue with a fresh orthogonalized vector
          for (int i = 0; i < n; ++i) w[i] = rng.normal();
          w.noalias() -= basis * (basis.transpose() * w);
          v.col(j + 1) = w / w.norm();
        }
      }
    }

    double beta_last = w.norm();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(h);
    require(es.info() == Eigen::Success, "spectral.convergence",
            "projected eigenproblem failed");
    // Eigen sorts ascending; we want the algebraically largest block
    Eigen::VectorXd vals = es.eigenvalues();
    Eigen::MatrixXd vecs = es.eigenvectors();

    bool done = true;
    for (int i = 0; i < k; ++i) {
      double est = beta_last * std::abs(vecs(ncv - 1, ncv - 1 - i));
      if (est > tol) done = false;
    }
    if (done || beta_last <= 1e-14 * snorm) {
      theta.resize(k);
      u.resize(n, k);
      for (int i = 0; i < k; ++i) {
        theta[i] = vals[ncv - 1 - i];
        u.col(i).noalias() = v * vecs.col(ncv - 1 - i);
      }
      return;
    }

    Eigen::MatrixXd compressed(n, keep);
    for (int i = 0; i < keep; ++i)
      compressed.col(i).noalias() = v * vecs.col(ncv - 1 - i);
    v.leftCols(keep) = compressed;
    v.col(keep) = w / beta_last;
    h.setZero();
    for (int i = 0; i < keep; ++i) h(i, i) = vals[ncv - 1 - i];
    j = keep;
  }
  fail("spectral.convergence",
       "Lanczos did not converge within 500 restarts (tol " + std::to_string(tol) + ")");
}

}  // namespace detail

inline SpectralResult dominant_eigs(const SparseGenerator& gen, int k) {
  const int n = gen.n();
  require(k >= 1 && k <= n, "spectral.k",
          "requested " + std::to_string(k) + " eigenpairs of a " + std::to_string(n) +
              "-cell generator");
  detail::SpMat s = detail::symmetrized_generator(gen);

  Eigen::VectorXd theta;
  Eigen::MatrixXd u;
  if (n <= 5000) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es{Eigen::MatrixXd(s)};
    require(es.info() == Eigen::Success, "spectral.convergence",
            "dense eigensolver failed");
    theta.resize(k);
    u.resize(n, k);
    for (int i = 0; i < k; ++i) {
      theta[i] = es.eigenvalues()[n - 1 - i];
      u.col(i) = es.eigenvectors().col(n - 1 - i);
    }
  } else {
    detail::lanczos_topk(s, k, theta, u);
  }

  SpectralResult out;
  out.k = k;
  out.eigenvalues = theta;
  out.eigenvectors.resize(n, k);
  out.residuals.resize(k);
  Eigen::VectorXd inv_sq = gen.mu.array().sqrt().inverse();
  for (int i = 0; i < k; ++i) {
    Eigen::VectorXd phi = u.col(i).cwiseProduct(inv_sq);
    detail::refine_junk_cells(gen, theta[i], phi);
    phi /= std::sqrt(phi.cwiseAbs2().dot(gen.mu));
    detail::fix_sign(gen.mu, phi);
    out.residuals[i] = (gen.L * phi - theta[i] * phi).cwiseAbs().maxCoeff();
    out.eigenvectors.col(i) = phi;
  }
  return out;
}

inline Eigen::VectorXd koopman_eigenvalues(const Eigen::VectorXd& lambdas, double tau) {
  require(tau > 0, "spectral.tau", "lag time must be positive");
  return (tau * lambdas.array()).exp();
}

struct SpectraComparison {
  struct Row {
    double lambda_full = 0.0;
    double lambda_effective = 0.0;
    double gap = 0.0;  // lambda_full - lambda_effective
    bool violation = false;
  };
  std::vector<Row> rows;
  bool any_violation = false;
};

// Flags indices where the effective eigenvalue exceeds the full one, which
// would contradict the ordering Lambda_i >= Lambda-tilde_i.
inline SpectraComparison compare_spectra(const SpectralResult& full,
                                         const SpectralResult& effective, int k) {
  require(full.k >= k && effective.k >= k, "spectral.compare",
          "both spectra must hold at least " + std::to_string(k) + " eigenvalues");
  const double tol = 1e-6;
  SpectraComparison cmp;
  cmp.rows.resize(k);
  for (int i = 0; i < k; ++i) {
    auto& row = cmp.rows[i];
    row.lambda_full = full.eigenvalues[i];
    row.lambda_effective = effective.eigenvalues[i];
    row.gap = row.lambda_full - row.lambda_effective;
    row.violation = row.lambda_effective > row.lambda_full + tol;
    cmp.any_violation = cmp.any_violation || row.violation;
  }
  return cmp;
}

}  // namespace kcg
