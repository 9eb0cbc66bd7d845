// Minimal fully connected network with analytic backprop and two optimizers.
// Hidden layers use sigmoid or ReLU, the output layer is identity; nets here
// are tiny (2-4 hidden layers), so a dependency-free implementation suffices.
#pragma once
#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kcg/error.hpp"
#include "kcg/rng.hpp"

namespace kcg {

enum class Activation { Sigmoid, ReLU };

struct Mlp {
  std::vector<int> sizes;  // [d, h_1, ..., m+1]
  std::vector<Eigen::MatrixXd> weights;  // layer l: sizes[l+1] x sizes[l]
  std::vector<Eigen::VectorXd> biases;
  Activation activation = Activation::Sigmoid;

  int input_dim() const { return sizes.front(); }
  int output_dim() const { return sizes.back(); }
  int layers() const { return static_cast<int>(weights.size()); }

  static Mlp init(std::vector<int> sizes, Activation act, std::uint64_t seed) {
    require(sizes.size() >= 2, "mlp.sizes", "network needs input and output layers");
    for (int s : sizes) require(s >= 1, "mlp.sizes", "layer sizes must be positive");
    Mlp net;
    net.sizes = std::move(sizes);
    net.activation = act;
    rng_stream rng(seed);
    for (size_t l = 0; l + 1 < net.sizes.size(); ++l) {
      int in = net.sizes[l], out = net.sizes[l + 1];
      double bound = std::sqrt(6.0 / (in + out));
      Eigen::MatrixXd w(out, in);
      for (int r = 0; r < out; ++r)
        for (int c = 0; c < in; ++c) w(r, c) = bound * (2.0 * rng.uniform() - 1.0);
      net.weights.push_back(std::move(w));
      net.biases.push_back(Eigen::VectorXd::Zero(out));
    }
    return net;
  }
};

// Parameter-shaped container, used for gradients and optimizer state.
struct MlpGrad {
  std::vector<Eigen::MatrixXd> w;
  std::vector<Eigen::VectorXd> b;

  static MlpGrad zeros_like(const Mlp& net) {
    MlpGrad g;
    for (int l = 0; l < net.layers(); ++l) {
      g.w.push_back(Eigen::MatrixXd::Zero(net.weights[l].rows(), net.weights[l].cols()));
      g.b.push_back(Eigen::VectorXd::Zero(net.biases[l].size()));
    }
    return g;
  }
  void scale(double s) {
    for (auto& m : w) m *= s;
    for (auto& v : b) v *= s;
  }
  double max_abs_diff(const MlpGrad& other) const {
    double worst = 0.0;
    for (size_t l = 0; l < w.size(); ++l) {
      worst = std::max(worst, (w[l] - other.w[l]).cwiseAbs().maxCoeff());
      worst = std::max(worst, (b[l] - other.b[l]).cwiseAbs().maxCoeff());
    }
    return worst;
  }
};

// Per-sample forward activations kept for the backward pass.
struct MlpTape {
  std::vector<Eigen::VectorXd> post;  // post[0] = input, post[l+1] = layer l output
};

inline Eigen::VectorXd mlp_forward(const Mlp& net, std::span<const double> x,
                                   MlpTape* tape = nullptr) {
  require(static_cast<int>(x.size()) == net.input_dim(), "mlp.input",
          "input has length " + std::to_string(x.size()) + ", network expects " +
              std::to_string(net.input_dim()));
  Eigen::VectorXd a = Eigen::Map<const Eigen::VectorXd>(x.data(), x.size());
  if (tape) {
    tape->post.clear();
    tape->post.push_back(a);
  }
  for (int l = 0; l < net.layers(); ++l) {
    a = net.weights[l] * a + net.biases[l];
    if (l + 1 < net.layers()) {
      if (net.activation == Activation::Sigmoid)
        a = a.unaryExpr([](double z) { return 1.0 / (1.0 + std::exp(-z)); });
      else
        a = a.cwiseMax(0.0);
    }
    if (tape) tape->post.push_back(a);
  }
  require(a.allFinite(), "mlp.nan", "forward pass produced a non-finite output");
  return a;
}

// Accumulates d loss / d theta into grad, given d loss / d output.
inline void mlp_backward(const Mlp& net, const MlpTape& tape,
                         const Eigen::VectorXd& dloss_dout, MlpGrad& grad) {
  Eigen::VectorXd delta = dloss_dout;
  for (int l = net.layers() - 1; l >= 0; --l) {
    if (l + 1 < net.layers()) {
      const Eigen::VectorXd& out = tape.post[l + 1];
      if (net.activation == Activation::Sigmoid)
        delta.array() *= out.array() * (1.0 - out.array());
      else
        delta.array() *= (out.array() > 0.0).cast<double>();
    }
    grad.w[l].noalias() += delta * tape.post[l].transpose();
    grad.b[l] += delta;
    if (l > 0) delta = net.weights[l].transpose() * delta;
  }
}

struct AdamState {
  MlpGrad m, v;
  long long t = 0;

  static AdamState init(const Mlp& net) {
    return {MlpGrad::zeros_like(net), MlpGrad::zeros_like(net), 0};
  }
  void step(Mlp& net, const MlpGrad& grad, double lr) {
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++t;
    double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
    double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    for (int l = 0; l < net.layers(); ++l) {
      m.w[l] = b1 * m.w[l] + (1 - b1) * grad.w[l];
      v.w[l] = b2 * v.w[l] + (1 - b2) * grad.w[l].cwiseAbs2();
      net.weights[l].array() -=
          lr * (m.w[l] / c1).array() / ((v.w[l] / c2).array().sqrt() + eps);
      m.b[l] = b1 * m.b[l] + (1 - b1) * grad.b[l];
      v.b[l] = b2 * v.b[l] + (1 - b2) * grad.b[l].cwiseAbs2();
      net.biases[l].array() -=
          lr * (m.b[l] / c1).array() / ((v.b[l] / c2).array().sqrt() + eps);
    }
  }
};

struct NesterovState {
  MlpGrad velocity;

  static NesterovState init(const Mlp& net) { return {MlpGrad::zeros_like(net)}; }
  void step(Mlp& net, const MlpGrad& grad, double lr) {
    const double momentum = 0.9;
    for (int l = 0; l < net.layers(); ++l) {
      velocity.w[l] = momentum * velocity.w[l] + grad.w[l];
      net.weights[l] -= lr * (grad.w[l] + momentum * velocity.w[l]);
      velocity.b[l] = momentum * velocity.b[l] + grad.b[l];
      net.biases[l] -= lr * (grad.b[l] + momentum * velocity.b[l]);
    }
  }
};

}  // namespace kcg
