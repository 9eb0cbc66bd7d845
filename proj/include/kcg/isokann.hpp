// The ISOKANN training loop: a power iteration on chi interleaving Monte-Carlo
// Koopman evaluation, the inner simplex rescale, vertex-permutation alignment,
// and stochastic gradient refinement of a single reused network.
#pragma once
#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kcg/error.hpp"
#include "kcg/grid.hpp"
#include "kcg/membership.hpp"
#include "kcg/mlp.hpp"
#include "kcg/rng.hpp"
#include "kcg/sde.hpp"

namespace kcg {

struct TrainConfig {
  int outer_iterations = 300;
  int epochs_per_iteration = 1;
  int minibatch = 128;
  enum class Optimizer { Adam, NesterovMomentum };
  Optimizer optimizer = Optimizer::Adam;
  double learning_rate = 1e-3;
  double tikhonov = 1e-4;
  std::uint64_t seed = 0;
  double validation_fraction = 0.1;
  std::vector<int> hidden = {32, 32};
  Activation activation = Activation::Sigmoid;
  double lag = 1.0;  // physical lag of the bursts, used for the final rate matrix

  void validate() const {
    require(outer_iterations >= 1, "isokann.config", "outer_iterations must be >= 1");
    require(epochs_per_iteration >= 1 && minibatch >= 1, "isokann.config",
            "epochs_per_iteration and minibatch must be >= 1");
    require(learning_rate > 0 && tikhonov > 0, "isokann.config",
            "learning_rate and tikhonov must be positive");
    require(validation_fraction >= 0 && validation_fraction < 1, "isokann.config",
            "validation_fraction must lie in [0, 1)");
    require(lag > 0, "isokann.config", "lag must be positive");
  }
};

struct TrainReport {
  std::vector<double> loss;             // empirical loss per outer iteration
  std::vector<double> validation_loss;  // empty when no points are held out
  std::vector<double> s_condition;
  std::vector<std::vector<int>> permutations;
  Eigen::MatrixXd s_final;  // permutation-aligned transform of the last iteration
  Eigen::MatrixXd q_hat;
};

inline Eigen::MatrixXd koopman_mc(const Mlp& net, const BurstData& bursts) {
  require(bursts.dim == net.input_dim(), "isokann.dim",
          "bursts have dimension " + std::to_string(bursts.dim) + ", network expects " +
              std::to_string(net.input_dim()));
  const int n = bursts.n_start(), m = bursts.n_replicas(), d = bursts.dim;
  Eigen::MatrixXd k(n, net.output_dim());
  double buf[3];
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(net.output_dim());
    for (int r = 0; r < m; ++r) {
      for (int a = 0; a < d; ++a)
        buf[a] = bursts.ends(static_cast<Eigen::Index>(i) * m + r, a);
      acc += mlp_forward(net, std::span<const double>(buf, d));
    }
    k.row(i) = acc.transpose() / m;
  }
  return k;
}

inline Eigen::MatrixXd koopman_mc(const ChiTable& chi, const RegularGrid& grid,
                                  const BurstData& bursts) {
  require(chi.values.rows() == grid.n_cells, "isokann.dim",
          "chi table does not cover the grid");
  require(bursts.dim == grid.dim, "isokann.dim",
          "bursts have dimension " + std::to_string(bursts.dim) + ", grid has " +
              std::to_string(grid.dim));
  const int n = bursts.n_start(), m = bursts.n_replicas(), d = bursts.dim;
  Eigen::MatrixXd k(n, chi.values.cols());
  double buf[3];
  for (int i = 0; i < n; ++i) {
    Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(chi.values.cols());
    for (int r = 0; r < m; ++r) {
      for (int a = 0; a < d; ++a)
        buf[a] = bursts.ends(static_cast<Eigen::Index>(i) * m + r, a);
      acc += chi.values.row(grid.cell_of(std::span<const double>(buf, d)));
    }
    k.row(i) = acc / m;
  }
  return k;
}

namespace detail {

inline Eigen::MatrixXd eval_rows(const Mlp& net, const Eigen::MatrixXd& points,
                                 const std::vector<int>& rows) {
  Eigen::MatrixXd out(rows.size(), net.output_dim());
  double buf[3];
  const int d = static_cast<int>(points.cols());
  for (size_t i = 0; i < rows.size(); ++i) {
    for (int a = 0; a < d; ++a) buf[a] = points(rows[i], a);
    out.row(i) = mlp_forward(net, std::span<const double>(buf, d)).transpose();
  }
  return out;
}

// Vertex order out of ISA is arbitrary; align target columns to the previous
// iterate by brute-force search over permutations of the covariance diagonal.
inline std::vector<int> align_permutation(const Eigen::MatrixXd& targets,
                                          const Eigen::MatrixXd& chi_prev) {
  const int mc = static_cast<int>(targets.cols());
  Eigen::RowVectorXd t_mean = targets.colwise().mean();
  Eigen::RowVectorXd c_mean = chi_prev.colwise().mean();
  Eigen::MatrixXd cov = (targets.rowwise() - t_mean).transpose() *
                        (chi_prev.rowwise() - c_mean) / targets.rows();
  std::vector<int> perm(mc), best(mc);
  std::iota(perm.begin(), perm.end(), 0);
  best = perm;
  double best_score = -std::numeric_limits<double>::infinity();
  do {
    double score = 0.0;
    for (int j = 0; j < mc; ++j) score += cov(perm[j], j);
    if (score > best_score) {
      best_score = score;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

}  // namespace detail

inline Eigen::MatrixXd extract_rate_matrix(const Eigen::MatrixXd& s_final, double tau) {
  require(s_final.rows() == s_final.cols() && s_final.rows() >= 1, "isokann.extract",
          "transform must be square");
  require(tau > 0, "isokann.extract", "lag must be positive");
  Eigen::FullPivLU<Eigen::MatrixXd> lu(s_final);
  require(lu.isInvertible(), "isokann.extract", "final transform is singular");
  Eigen::MatrixXd k = lu.inverse();

  Eigen::EigenSolver<Eigen::MatrixXd> es(k);
  require(es.info() == Eigen::Success, "isokann.extract", "eigendecomposition failed");
  Eigen::VectorXcd ev = es.eigenvalues();
  std::string shown;
  bool embeddable = true;
  for (int i = 0; i < ev.size(); ++i) {
    bool ok = std::abs(ev[i].imag()) <= 1e-10 * (1.0 + std::abs(ev[i].real())) &&
              ev[i].real() > 0;
    embeddable = embeddable && ok;
    shown += (i ? ", " : "") + std::to_string(ev[i].real()) + "+" +
             std::to_string(ev[i].imag()) + "i";
  }
  require(embeddable, "isokann.embed",
          "matrix logarithm undefined: eigenvalues of inverse transform are " + shown);

  Eigen::VectorXcd logs(ev.size());
  for (int i = 0; i < ev.size(); ++i) logs[i] = std::log(ev[i].real()) / tau;
  Eigen::MatrixXcd q = es.eigenvectors() * logs.asDiagonal() *
                       es.eigenvectors().inverse();
  return q.real();
}

inline double gradient_identity_check(const Mlp& net, std::span<const double> x,
                                      const Eigen::MatrixXd& ys,
                                      const Eigen::MatrixXd& s) {
  const int m = static_cast<int>(ys.rows());
  require(m >= 1, "isokann.identity", "need at least one replica");
  require(static_cast<int>(ys.cols()) == net.input_dim() &&
              s.rows() == net.output_dim() && s.cols() == net.output_dim(),
          "isokann.identity", "replica or transform shape mismatch");

  std::vector<Eigen::VectorXd> targets;
  Eigen::VectorXd mean_target = Eigen::VectorXd::Zero(net.output_dim());
  double buf[3];
  for (int k = 0; k < m; ++k) {
    for (int a = 0; a < net.input_dim(); ++a) buf[a] = ys(k, a);
    targets.push_back(s * mlp_forward(net, std::span<const double>(buf, net.input_dim())));
    mean_target += targets.back();
  }
  mean_target /= m;

  MlpTape tape;
  Eigen::VectorXd cx = mlp_forward(net, x, &tape);
  MlpGrad g1 = MlpGrad::zeros_like(net);
  mlp_backward(net, tape, 2.0 * (cx - mean_target), g1);
  MlpGrad g2 = MlpGrad::zeros_like(net);
  for (int k = 0; k < m; ++k)
    mlp_backward(net, tape, (2.0 / m) * (cx - targets[k]), g2);
  return g1.max_abs_diff(g2);
}

inline std::pair<Mlp, TrainReport> train(const BurstData& bursts, const TrainConfig& cfg,
                                         int m) {
  cfg.validate();
  const int n_total = bursts.n_start();
  const int n_rep = bursts.n_replicas();
  const int d = bursts.dim;
  const int out = m + 1;
  require(n_total >= out, "isokann.train",
          "training needs at least m+1 = " + std::to_string(out) + " start points");

  std::vector<int> order(n_total);
  std::iota(order.begin(), order.end(), 0);
  rng_stream split_rng = rng_stream::keyed(cfg.seed, 1, 0);
  for (int i = n_total - 1; i > 0; --i)
    std::swap(order[i], order[static_cast<int>(split_rng.next_u64() % (i + 1))]);
  int n_val = static_cast<int>(std::llround(cfg.validation_fraction * n_total));
  n_val = std::min(n_val, n_total - out);
  const int n_train = n_total - n_val;
  std::vector<int> train_idx(order.begin(), order.begin() + n_train);
  std::vector<int> val_idx(order.begin() + n_train, order.end());

  std::vector<int> sizes{d};
  sizes.insert(sizes.end(), cfg.hidden.begin(), cfg.hidden.end());
  sizes.push_back(out);

  auto koopman_rows = [&](const Mlp& net, const std::vector<int>& rows) {
    Eigen::MatrixXd k(rows.size(), out);
    double buf[3];
    for (size_t i = 0; i < rows.size(); ++i) {
      Eigen::VectorXd acc = Eigen::VectorXd::Zero(out);
      for (int r = 0; r < n_rep; ++r) {
        for (int a = 0; a < d; ++a)
          buf[a] = bursts.ends(static_cast<Eigen::Index>(rows[i]) * n_rep + r, a);
        acc += mlp_forward(net, std::span<const double>(buf, d));
      }
      k.row(i) = acc.transpose() / n_rep;
    }
    return k;
  };

  Mlp net = Mlp::init(sizes, cfg.activation, cfg.seed);
  AdamState adam = AdamState::init(net);
  NesterovState nesterov = NesterovState::init(net);
  TrainReport report;
  Eigen::MatrixXd s_aligned;
  bool retried = false;

  for (int iter = 0; iter < cfg.outer_iterations; ++iter) {
    Eigen::MatrixXd k_train = koopman_rows(net, train_idx);

    SimplexTransform st;
    try {
      st = inner_simplex(k_train);
    } catch (const error& e) {
      if (!retried) {
        // collapsed early iterate; restart once from reshuffled weights
        retried = true;
        net = Mlp::init(sizes, cfg.activation, cfg.seed + 1);
        adam = AdamState::init(net);
        nesterov = NesterovState::init(net);
        report = TrainReport{};
        iter = -1;
        continue;
      }
      throw error(e.code(), "iteration " + std::to_string(iter) + ": " + e.message());
    }

    Eigen::MatrixXd chi_train = detail::eval_rows(net, bursts.starts, train_idx);
    Eigen::MatrixXd t_train = k_train * st.S.transpose();
    std::vector<int> perm = detail::align_permutation(t_train, chi_train);
    Eigen::MatrixXd t_perm(t_train.rows(), out);
    for (int j = 0; j < out; ++j) t_perm.col(j) = t_train.col(perm[j]);

    s_aligned.resize(out, out);
    for (int j = 0; j < out; ++j) s_aligned.row(j) = st.S.row(perm[j]);

    double loss = (chi_train - t_perm).rowwise().squaredNorm().mean();
    require(std::isfinite(loss), "isokann.nan",
            "loss diverged at iteration " + std::to_string(iter));
    report.loss.push_back(loss);
    report.s_condition.push_back(st.condition);
    report.permutations.push_back(perm);

    if (n_val > 0) {
      Eigen::MatrixXd k_val = koopman_rows(net, val_idx);
      Eigen::MatrixXd chi_val = detail::eval_rows(net, bursts.starts, val_idx);
      Eigen::MatrixXd t_val = k_val * s_aligned.transpose();
      report.validation_loss.push_back(
          (chi_val - t_val).rowwise().squaredNorm().mean());
    }

    rng_stream batch_rng = rng_stream::keyed(cfg.seed, 2, iter);
    std::vector<int> sample(n_train);
    std::iota(sample.begin(), sample.end(), 0);
    MlpTape tape;
    for (int epoch = 0; epoch < cfg.epochs_per_iteration; ++epoch) {
      for (int i = n_train - 1; i > 0; --i)
        std::swap(sample[i], sample[static_cast<int>(batch_rng.next_u64() % (i + 1))]);
      for (int lo = 0; lo < n_train; lo += cfg.minibatch) {
        int hi = std::min(lo + cfg.minibatch, n_train);
        MlpGrad grad = MlpGrad::zeros_like(net);
        double buf[3];
        for (int s = lo; s < hi; ++s) {
          int row = train_idx[sample[s]];
          for (int a = 0; a < d; ++a) buf[a] = bursts.starts(row, a);
          Eigen::VectorXd y = mlp_forward(net, std::span<const double>(buf, d), &tape);
          mlp_backward(net, tape,
                       (2.0 / (hi - lo)) * (y - t_perm.row(sample[s]).transpose()),
                       grad);
        }
        for (int l = 0; l < net.layers(); ++l) {
          grad.w[l] += cfg.tikhonov * net.weights[l];
          grad.b[l] += cfg.tikhonov * net.biases[l];
        }
        if (cfg.optimizer == TrainConfig::Optimizer::Adam)
          adam.step(net, grad, cfg.learning_rate);
        else
          nesterov.step(net, grad, cfg.learning_rate);
      }
    }
  }

  report.s_final = s_aligned;
  report.q_hat = extract_rate_matrix(report.s_final, cfg.lag);
  return {std::move(net), std::move(report)};
}

}  // namespace kcg
