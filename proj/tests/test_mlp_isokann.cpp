#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cmath>
#include <vector>

#include "kcg/grid.hpp"
#include "kcg/isokann.hpp"
#include "kcg/membership.hpp"
#include "kcg/mlp.hpp"
#include "kcg/potentials.hpp"
#include "kcg/rng.hpp"
#include "kcg/sde.hpp"

using namespace kcg;

namespace {

double loss_at(const Mlp& net, std::span<const double> x, const Eigen::VectorXd& target) {
  Eigen::VectorXd c = mlp_forward(net, x);
  return (c - target).squaredNorm();
}

}  // namespace

TEST_CASE("network initialization is deterministic and bounded") {
  Mlp a = Mlp::init({2, 8, 8, 3}, Activation::Sigmoid, 99);
  Mlp b = Mlp::init({2, 8, 8, 3}, Activation::Sigmoid, 99);
  Mlp c = Mlp::init({2, 8, 8, 3}, Activation::Sigmoid, 100);
  REQUIRE(a.layers() == 3);
  REQUIRE(a.input_dim() == 2);
  REQUIRE(a.output_dim() == 3);
  bool differs = false;
  for (int l = 0; l < a.layers(); ++l) {
    REQUIRE((a.weights[l] - b.weights[l]).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE(a.biases[l].cwiseAbs().maxCoeff() == 0.0);
    double bound = std::sqrt(6.0 / (a.sizes[l] + a.sizes[l + 1]));
    REQUIRE(a.weights[l].cwiseAbs().maxCoeff() <= bound);
    differs = differs || (a.weights[l] - c.weights[l]).cwiseAbs().maxCoeff() > 0;
  }
  REQUIRE(differs);
  REQUIRE_THROWS_AS(Mlp::init({3}, Activation::Sigmoid, 1), error);
  REQUIRE_THROWS_AS(Mlp::init({3, 0, 2}, Activation::Sigmoid, 1), error);
}

TEST_CASE("forward pass applies the affine maps and hidden activations") {
  Mlp net;
  net.sizes = {1, 2, 1};
  net.activation = Activation::Sigmoid;
  Eigen::MatrixXd w0(2, 1);
  w0 << 1.0, -2.0;
  Eigen::MatrixXd w1(1, 2);
  w1 << 3.0, 1.0;
  net.weights = {w0, w1};
  net.biases = {Eigen::VectorXd::Zero(2), Eigen::VectorXd::Constant(1, 0.25)};

  std::array<double, 1> x{0.5};
  double h0 = 1.0 / (1.0 + std::exp(-0.5));
  double h1 = 1.0 / (1.0 + std::exp(1.0));
  double expect = 3.0 * h0 + h1 + 0.25;  // output layer stays linear
  REQUIRE(mlp_forward(net, x)[0] == Catch::Approx(expect).epsilon(1e-15));

  net.activation = Activation::ReLU;
  double expect_relu = 3.0 * 0.5 + 0.0 + 0.25;
  REQUIRE(mlp_forward(net, x)[0] == Catch::Approx(expect_relu).epsilon(1e-15));

  std::array<double, 2> wrong{0.0, 0.0};
  REQUIRE_THROWS_AS(mlp_forward(net, wrong), error);
}

TEST_CASE("analytic gradients match finite differences") {
  for (Activation act : {Activation::Sigmoid, Activation::ReLU}) {
    Mlp net = Mlp::init({2, 4, 4, 2}, act, 7);
    std::array<double, 2> x{0.31, -0.44};
    Eigen::VectorXd target(2);
    target << 0.2, 0.7;

    MlpTape tape;
    Eigen::VectorXd c = mlp_forward(net, x, &tape);
    MlpGrad g = MlpGrad::zeros_like(net);
    mlp_backward(net, tape, 2.0 * (c - target), g);

    const double h = 1e-6;
    for (int l = 0; l < net.layers(); ++l) {
      for (int r = 0; r < net.weights[l].rows(); ++r) {
        for (int cc = 0; cc < net.weights[l].cols(); ++cc) {
          Mlp pert = net;
          pert.weights[l](r, cc) += h;
          double up = loss_at(pert, x, target);
          pert.weights[l](r, cc) -= 2 * h;
          double dn = loss_at(pert, x, target);
          double fd = (up - dn) / (2 * h);
          REQUIRE(g.w[l](r, cc) == Catch::Approx(fd).margin(1e-4 * (1.0 + std::abs(fd))));
        }
        Mlp pert = net;
        pert.biases[l][r] += h;
        double up = loss_at(pert, x, target);
        pert.biases[l][r] -= 2 * h;
        double dn = loss_at(pert, x, target);
        double fd = (up - dn) / (2 * h);
        REQUIRE(g.b[l][r] == Catch::Approx(fd).margin(1e-4 * (1.0 + std::abs(fd))));
      }
    }
  }
}

TEST_CASE("per-replica and mean-target losses share their gradient") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Mlp net = Mlp::init({1, 8, 8, 2}, Activation::Sigmoid, seed);
    rng_stream rng(seed * 31 + 5);
    std::array<double, 1> x{2.0 * rng.uniform() - 1.0};
    Eigen::MatrixXd ys(16, 1);
    for (int k = 0; k < 16; ++k) ys(k, 0) = 2.0 * rng.uniform() - 1.0;
    Eigen::MatrixXd s = Eigen::MatrixXd::Identity(2, 2);
    s(0, 1) = 0.3 * rng.uniform();
    s(1, 0) = -0.2 * rng.uniform();
    REQUIRE(gradient_identity_check(net, x, ys, s) < 1e-10);
  }
}

TEST_CASE("monte carlo koopman averages network outputs over replicas") {
  Mlp net = Mlp::init({1, 4, 2}, Activation::Sigmoid, 11);
  BurstData data;
  data.dim = 1;
  data.starts.resize(2, 1);
  data.starts << -0.5, 0.5;
  data.ends.resize(6, 1);
  data.ends << -0.4, -0.6, -0.8, 0.3, 0.5, 0.9;

  Eigen::MatrixXd k = koopman_mc(net, data);
  REQUIRE(k.rows() == 2);
  REQUIRE(k.cols() == 2);
  for (int i = 0; i < 2; ++i) {
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(2);
    for (int r = 0; r < 3; ++r) {
      std::array<double, 1> y{data.ends(i * 3 + r, 0)};
      acc += mlp_forward(net, y);
    }
    acc /= 3.0;
    REQUIRE((k.row(i).transpose() - acc).cwiseAbs().maxCoeff() <= 1e-15);
  }
}

TEST_CASE("monte carlo koopman with a membership lookup table") {
  std::array<int, 1> bins{4};
  RegularGrid grid = build_grid(box1d(-2, 2), bins);
  ChiTable chi;
  chi.m = 1;
  chi.values.resize(4, 2);
  chi.values << 1.0, 0.0, 0.8, 0.2, 0.3, 0.7, 0.0, 1.0;

  BurstData data;
  data.dim = 1;
  data.starts.resize(2, 1);
  data.starts << -1.0, 1.0;
  data.ends.resize(4, 1);
  data.ends << -1.5, 0.5, 1.5, -0.5;  // cells 0, 2, 3, 1

  Eigen::MatrixXd k = koopman_mc(chi, grid, data);
  REQUIRE(k(0, 0) == Catch::Approx(0.5 * (1.0 + 0.3)).epsilon(1e-15));
  REQUIRE(k(0, 1) == Catch::Approx(0.5 * (0.0 + 0.7)).epsilon(1e-15));
  REQUIRE(k(1, 0) == Catch::Approx(0.5 * (0.0 + 0.8)).epsilon(1e-15));
  REQUIRE(k(1, 1) == Catch::Approx(0.5 * (1.0 + 0.2)).epsilon(1e-15));
}

TEST_CASE("rate matrix extraction inverts the exact exponential") {
  Eigen::MatrixXd q(2, 2);
  q << -0.3, 0.3, 0.1, -0.1;
  double tau = 0.5;

  Eigen::EigenSolver<Eigen::MatrixXd> es(q);
  Eigen::MatrixXcd expq = es.eigenvectors() *
                          (tau * es.eigenvalues().array()).exp().matrix().asDiagonal() *
                          es.eigenvectors().inverse();
  Eigen::MatrixXd k_tau = expq.real();
  Eigen::MatrixXd s = k_tau.inverse();

  Eigen::MatrixXd q_hat = extract_rate_matrix(s, tau);
  REQUIRE((q_hat - q).cwiseAbs().maxCoeff() < 1e-12);

  Eigen::MatrixXd neg = Eigen::MatrixXd::Identity(2, 2);
  neg(1, 1) = -2.0;  // inverse has a negative eigenvalue, no real logarithm
  REQUIRE_THROWS_AS(extract_rate_matrix(neg, tau), error);
  REQUIRE_THROWS_AS(extract_rate_matrix(Eigen::MatrixXd::Zero(2, 2), tau), error);
  REQUIRE_THROWS_AS(extract_rate_matrix(s, 0.0), error);
}

TEST_CASE("column alignment recovers a permutation") {
  Eigen::MatrixXd base(40, 2);
  for (int i = 0; i < 40; ++i) {
    base(i, 0) = i / 39.0;
    base(i, 1) = 1.0 - i / 39.0;
  }
  std::vector<int> id = detail::align_permutation(base, base);
  REQUIRE(id == std::vector<int>{0, 1});

  Eigen::MatrixXd swapped(40, 2);
  swapped.col(0) = base.col(1);
  swapped.col(1) = base.col(0);
  std::vector<int> perm = detail::align_permutation(swapped, base);
  REQUIRE(perm == std::vector<int>{1, 0});
}

TEST_CASE("training on double-well bursts converges and is reproducible") {
  PotentialSpec spec = PotentialSpec::from_sigma(PotentialKind::DoubleWell1D, std::sqrt(2.0));
  BurstPlan plan{200, 8, 1.0, 1e-2, 3};
  BurstData data = generate_bursts(spec, plan, StartsMode::uniform_box());

  TrainConfig cfg;
  cfg.outer_iterations = 40;
  cfg.minibatch = 64;
  cfg.learning_rate = 3e-3;
  cfg.hidden = {16, 16};
  cfg.seed = 3;
  cfg.lag = plan.lag;

  auto [net, report] = train(data, cfg, 1);
  REQUIRE(static_cast<int>(report.loss.size()) == cfg.outer_iterations);
  REQUIRE(report.validation_loss.size() == report.loss.size());
  REQUIRE(report.loss.back() < 0.5 * report.loss.front());
  REQUIRE(report.s_final.rows() == 2);
  REQUIRE(report.q_hat.allFinite());

  // memberships separate the wells after a short training run
  std::array<double, 1> left{-1.0}, right{1.0};
  Eigen::VectorXd cl = mlp_forward(net, left);
  Eigen::VectorXd cr = mlp_forward(net, right);
  REQUIRE(std::abs(cl[0] - cr[0]) > 0.5);

  auto [net2, report2] = train(data, cfg, 1);
  REQUIRE(report2.loss == report.loss);
  for (int l = 0; l < net.layers(); ++l)
    REQUIRE((net.weights[l] - net2.weights[l]).cwiseAbs().maxCoeff() == 0.0);
}
