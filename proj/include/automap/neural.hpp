/*
 * Copyright 2026 The AutoMap Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

// A small reverse-mode kernel: sequential networks over row matrices with
// hand-written backward passes. Rows are batch items for dense layers and
// time steps for the recurrent layer. Everything runs in double precision.

#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <memory>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "automap/common.hpp"
#include "automap/numerics.hpp"

namespace automap::nn {

/// A trainable tensor with its gradient and RMSprop state.
struct Param {
  Matrix value;
  Matrix grad;
  Matrix sq;  // running mean of squared gradients

  Param() = default;
  explicit Param(Matrix v) : value(std::move(v)), grad(value.rows(), value.cols()), sq(value.rows(), value.cols()) {}

  void zero_grad() { grad = Matrix(value.rows(), value.cols()); }
};

class Layer {
 public:
  virtual ~Layer() = default;
  virtual std::string kind() const = 0;
  virtual Matrix forward(const Matrix& x, bool train) = 0;
  /// Accumulates parameter gradients and returns the gradient w.r.t. the input.
  virtual Matrix backward(const Matrix& dy) = 0;
  virtual std::vector<Param*> params() { return {}; }
  virtual std::unique_ptr<Layer> clone() const = 0;
  /// Layer arguments after the kind on the checkpoint header line.
  virtual std::string args() const { return {}; }

 protected:
  void expect_forward() const { require(has_input_, kind(), ": backward called without a forward pass"); }
  Matrix input_;
  bool has_input_ = false;
};

namespace detail {

inline Matrix glorot(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-a, a);
  Matrix m(fan_in, fan_out);
  for (double& v : m.data()) v = u(rng);
  return m;
}

inline void add_bias(Matrix& y, const Matrix& b) {
  for (std::size_t i = 0; i < y.rows(); ++i)
    for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) += b(0, j);
}

}  // namespace detail

/// y = x·W + b
class Dense : public Layer {
 public:
  Dense(std::size_t in, std::size_t out, Rng& rng) : w_(detail::glorot(in, out, rng)), b_(Matrix(1, out)) {}
  Dense(Matrix w, Matrix b) : w_(std::move(w)), b_(std::move(b)) {
    require(b_.value.rows() == 1 && b_.value.cols() == w_.value.cols(), "dense: bias shape mismatch");
  }

  std::string kind() const override { return "dense"; }
  std::size_t in() const { return w_.value.rows(); }
  std::size_t out() const { return w_.value.cols(); }
  Param& weight() { return w_; }
  Param& bias() { return b_; }

  Matrix forward(const Matrix& x, bool) override {
    require(x.cols() == in(), "dense: input has ", x.cols(), " columns, expected ", in());
    input_ = x;
    has_input_ = true;
    Matrix y = matmul(x, w_.value);
    detail::add_bias(y, b_.value);
    return y;
  }

  Matrix backward(const Matrix& dy) override {
    expect_forward();
    require(dy.rows() == input_.rows() && dy.cols() == out(), "dense: gradient shape mismatch");
    w_.grad += matmul_tn(input_, dy);
    for (std::size_t i = 0; i < dy.rows(); ++i)
      for (std::size_t j = 0; j < dy.cols(); ++j) b_.grad(0, j) += dy(i, j);
    return matmul_nt(dy, w_.value);
  }

  std::vector<Param*> params() override { return {&w_, &b_}; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Dense>(*this); }
  std::string args() const override { return std::to_string(in()) + " " + std::to_string(out()); }

 private:
  Param w_, b_;
};

class Relu : public Layer {
 public:
  std::string kind() const override { return "relu"; }
  Matrix forward(const Matrix& x, bool) override {
    input_ = x;
    has_input_ = true;
    Matrix y = x;
    for (double& v : y.data()) v = v > 0.0 ? v : 0.0;
    return y;
  }
  Matrix backward(const Matrix& dy) override {
    expect_forward();
    Matrix dx = dy;
    for (std::size_t k = 0; k < dx.data().size(); ++k)
      if (input_.data()[k] <= 0.0) dx.data()[k] = 0.0;
    return dx;
  }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Relu>(*this); }
};

class LeakyRelu : public Layer {
 public:
  explicit LeakyRelu(double slope = 0.2) : slope_(slope) {}
  std::string kind() const override { return "leaky_relu"; }
  double slope() const { return slope_; }
  Matrix forward(const Matrix& x, bool) override {
    input_ = x;
    has_input_ = true;
    Matrix y = x;
    for (double& v : y.data()) v = v > 0.0 ? v : slope_ * v;
    return y;
  }
  Matrix backward(const Matrix& dy) override {
    expect_forward();
    Matrix dx = dy;
    for (std::size_t k = 0; k < dx.data().size(); ++k)
      if (input_.data()[k] <= 0.0) dx.data()[k] *= slope_;
    return dx;
  }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<LeakyRelu>(*this); }
  std::string args() const override {
    std::ostringstream os;
    os << std::setprecision(17) << slope_;
    return os.str();
  }

 private:
  double slope_;
};

/// Inverted dropout: kept units are scaled by 1/(1-rate) at train time, so the
/// eval-mode forward is the identity. With reuse_mask set, the mask drawn on the
/// first train-mode call is kept (used for finite-difference checks).
class Dropout : public Layer {
 public:
  Dropout(double rate, std::uint64_t seed) : rate_(rate), rng_(seed) {
    require(rate >= 0.0 && rate < 1.0, "dropout rate must lie in [0,1), got ", rate);
  }
  std::string kind() const override { return "dropout"; }
  double rate() const { return rate_; }
  void set_reuse_mask(bool on) {
    reuse_ = on;
    if (!on) mask_ = Matrix();
  }

  Matrix forward(const Matrix& x, bool train) override {
    input_ = x;
    has_input_ = true;
    train_ = train;
    if (!train || rate_ == 0.0) return x;
    const bool fresh = !reuse_ || mask_.rows() != x.rows() || mask_.cols() != x.cols();
    if (fresh) {
      mask_ = Matrix(x.rows(), x.cols());
      std::bernoulli_distribution keep(1.0 - rate_);
      for (double& m : mask_.data()) m = keep(rng_) ? 1.0 / (1.0 - rate_) : 0.0;
    }
    Matrix y = x;
    for (std::size_t k = 0; k < y.data().size(); ++k) y.data()[k] *= mask_.data()[k];
    return y;
  }

  Matrix backward(const Matrix& dy) override {
    expect_forward();
    if (!train_ || rate_ == 0.0) return dy;
    Matrix dx = dy;
    for (std::size_t k = 0; k < dx.data().size(); ++k) dx.data()[k] *= mask_.data()[k];
    return dx;
  }

  std::unique_ptr<Layer> clone() const override { return std::make_unique<Dropout>(*this); }
  std::string args() const override {
    std::ostringstream os;
    os << std::setprecision(17) << rate_;
    return os.str();
  }

 private:
  double rate_;
  Rng rng_;
  bool reuse_ = false;
  bool train_ = false;
  Matrix mask_;
};

/// Elman cell over the rows of the input: h_t = tanh(x_t·Wx + h_{t-1}·Wh + b),
/// h_0 = 0. Emits every hidden state.
class Recurrent : public Layer {
 public:
  Recurrent(std::size_t in, std::size_t hidden, Rng& rng)
      : wx_(detail::glorot(in, hidden, rng)), wh_(detail::glorot(hidden, hidden, rng)), b_(Matrix(1, hidden)) {}
  Recurrent(Matrix wx, Matrix wh, Matrix b) : wx_(std::move(wx)), wh_(std::move(wh)), b_(std::move(b)) {
    require(wh_.value.rows() == wh_.value.cols() && wh_.value.rows() == wx_.value.cols(),
            "recurrent: weight shapes mismatch");
    require(b_.value.rows() == 1 && b_.value.cols() == wx_.value.cols(), "recurrent: bias shape mismatch");
  }

  std::string kind() const override { return "recurrent"; }
  std::size_t in() const { return wx_.value.rows(); }
  std::size_t hidden() const { return wx_.value.cols(); }
  Param& input_weight() { return wx_; }
  Param& state_weight() { return wh_; }
  Param& bias() { return b_; }

  Matrix forward(const Matrix& x, bool) override {
    require(x.cols() == in(), "recurrent: input has ", x.cols(), " columns, expected ", in());
    input_ = x;
    has_input_ = true;
    const std::size_t h = hidden();
    states_ = Matrix(x.rows(), h);
    std::vector<double> prev(h, 0.0);
    for (std::size_t t = 0; t < x.rows(); ++t) {
      for (std::size_t j = 0; j < h; ++j) {
        double a = b_.value(0, j);
        for (std::size_t k = 0; k < x.cols(); ++k) a += x(t, k) * wx_.value(k, j);
        for (std::size_t k = 0; k < h; ++k) a += prev[k] * wh_.value(k, j);
        states_(t, j) = std::tanh(a);
      }
      for (std::size_t j = 0; j < h; ++j) prev[j] = states_(t, j);
    }
    return states_;
  }

  Matrix backward(const Matrix& dy) override {
    expect_forward();
    require(dy.rows() == states_.rows() && dy.cols() == hidden(), "recurrent: gradient shape mismatch");
    const std::size_t h = hidden(), T = states_.rows();
    Matrix dx(T, in());
    std::vector<double> carry(h, 0.0), da(h);
    for (std::size_t r = T; r-- > 0;) {
      for (std::size_t j = 0; j < h; ++j) {
        const double s = states_(r, j);
        da[j] = (dy(r, j) + carry[j]) * (1.0 - s * s);
      }
      for (std::size_t j = 0; j < h; ++j) {
        b_.grad(0, j) += da[j];
        for (std::size_t k = 0; k < in(); ++k) wx_.grad(k, j) += input_(r, k) * da[j];
        if (r > 0)
          for (std::size_t k = 0; k < h; ++k) wh_.grad(k, j) += states_(r - 1, k) * da[j];
      }
      for (std::size_t k = 0; k < in(); ++k) {
        double v = 0.0;
        for (std::size_t j = 0; j < h; ++j) v += wx_.value(k, j) * da[j];
        dx(r, k) = v;
      }
      for (std::size_t k = 0; k < h; ++k) {
        double v = 0.0;
        for (std::size_t j = 0; j < h; ++j) v += wh_.value(k, j) * da[j];
        carry[k] = v;
      }
    }
    return dx;
  }

  std::vector<Param*> params() override { return {&wx_, &wh_, &b_}; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Recurrent>(*this); }
  std::string args() const override { return std::to_string(in()) + " " + std::to_string(hidden()); }

 private:
  Param wx_, wh_, b_;
  Matrix states_;
};

/// Sums all rows into one.
class SumPool : public Layer {
 public:
  std::string kind() const override { return "sum_pool"; }
  Matrix forward(const Matrix& x, bool) override {
    input_ = x;
    has_input_ = true;
    Matrix y(1, x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) y(0, j) += x(i, j);
    return y;
  }
  Matrix backward(const Matrix& dy) override {
    expect_forward();
    require(dy.rows() == 1 && dy.cols() == input_.cols(), "sum_pool: gradient shape mismatch");
    Matrix dx(input_.rows(), input_.cols());
    for (std::size_t i = 0; i < dx.rows(); ++i)
      for (std::size_t j = 0; j < dx.cols(); ++j) dx(i, j) = dy(0, j);
    return dx;
  }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<SumPool>(*this); }
};

/// Keeps only the last row (final recurrent state).
class LastStep : public Layer {
 public:
  std::string kind() const override { return "last_step"; }
  Matrix forward(const Matrix& x, bool) override {
    require(x.rows() >= 1, "last_step: empty sequence");
    input_ = x;
    has_input_ = true;
    Matrix y(1, x.cols());
    for (std::size_t j = 0; j < x.cols(); ++j) y(0, j) = x(x.rows() - 1, j);
    return y;
  }
  Matrix backward(const Matrix& dy) override {
    expect_forward();
    Matrix dx(input_.rows(), input_.cols());
    for (std::size_t j = 0; j < dx.cols(); ++j) dx(dx.rows() - 1, j) = dy(0, j);
    return dx;
  }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<LastStep>(*this); }
};

class Network {
 public:
  Network() = default;
  Network(const Network& o) { *this = o; }
  Network& operator=(const Network& o) {
    if (this == &o) return *this;
    layers_.clear();
    for (const auto& l : o.layers_) layers_.push_back(l->clone());
    return *this;
  }
  Network(Network&&) = default;
  Network& operator=(Network&&) = default;

  template <typename L, typename... Args>
  L& add(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    layers_.push_back(std::move(layer));
    return ref;
  }
  void push(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }

  std::size_t size() const { return layers_.size(); }
  Layer& layer(std::size_t i) { return *layers_.at(i); }
  const Layer& layer(std::size_t i) const { return *layers_.at(i); }

  Matrix forward(const Matrix& x, bool train) {
    Matrix y = x;
    for (auto& l : layers_) y = l->forward(y, train);
    return y;
  }

  Matrix backward(const Matrix& dy) {
    Matrix g = dy;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    return g;
  }

  std::vector<Param*> params() {
    std::vector<Param*> out;
    for (auto& l : layers_)
      for (auto* p : l->params()) out.push_back(p);
    return out;
  }

  void zero_grad() {
    for (auto* p : params()) p->zero_grad();
  }

  /// Parameter values only, for best-checkpoint bookkeeping.
  std::vector<Matrix> snapshot() {
    std::vector<Matrix> out;
    for (auto* p : params()) out.push_back(p->value);
    return out;
  }
  void restore(const std::vector<Matrix>& values) {
    auto ps = params();
    require(ps.size() == values.size(), "snapshot does not match the network");
    for (std::size_t i = 0; i < ps.size(); ++i) {
      require(ps[i]->value.rows() == values[i].rows() && ps[i]->value.cols() == values[i].cols(),
              "snapshot tensor ", i, " has the wrong shape");
      ps[i]->value = values[i];
    }
  }

  void set_dropout_reuse(bool on) {
    for (auto& l : layers_)
      if (auto* d = dynamic_cast<Dropout*>(l.get())) d->set_reuse_mask(on);
  }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

// ---------------------------------------------------------------------------
// Optimizer

struct OptimizerConfig {
  double learning_rate = 1e-4;
  double decay = 0.99;
  double epsilon = 1e-8;
  std::size_t batch_size = 8;

  void validate() const {
    require(learning_rate > 0.0, "learning rate must be positive");
    require(decay > 0.0 && decay < 1.0, "RMSprop decay must lie in (0,1)");
    require(epsilon > 0.0, "epsilon must be positive");
    require(batch_size >= 1, "batch size must be >= 1");
  }
};

/// v ← decay·v + (1−decay)·g²;  p ← p − lr·g/(√v + ε)
inline void rmsprop_step(Param& p, const OptimizerConfig& cfg) {
  require(p.grad.all_finite(), "non-finite gradient in RMSprop step");
  auto& v = p.sq.data();
  auto& g = p.grad.data();
  auto& x = p.value.data();
  for (std::size_t k = 0; k < x.size(); ++k) {
    v[k] = cfg.decay * v[k] + (1.0 - cfg.decay) * g[k] * g[k];
    x[k] -= cfg.learning_rate * g[k] / (std::sqrt(v[k]) + cfg.epsilon);
  }
}

inline void rmsprop_step(const std::vector<Param*>& params, const OptimizerConfig& cfg) {
  for (auto* p : params) require(p->grad.all_finite(), "non-finite gradient in RMSprop step");
  for (auto* p : params) rmsprop_step(*p, cfg);
}

// ---------------------------------------------------------------------------
// Losses

struct LossResult {
  double loss = 0.0;
  Matrix grad;  // d loss / d input
};

/// Mean softmax cross-entropy over rows.
inline LossResult softmax_cross_entropy(const Matrix& logits, const std::vector<int>& labels) {
  require(logits.rows() == labels.size(), "cross-entropy: ", logits.rows(), " logit rows but ",
          labels.size(), " labels");
  require(logits.rows() > 0, "cross-entropy of an empty batch");
  const std::size_t c = logits.cols();
  LossResult out{0.0, Matrix(logits.rows(), c)};
  const double n = static_cast<double>(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    require(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < c, "label ", labels[i],
            " outside the class range [0,", c, ")");
    double mx = logits(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(logits(i, j) - mx);
    const double log_z = mx + std::log(z);
    out.loss += (log_z - logits(i, static_cast<std::size_t>(labels[i]))) / n;
    for (std::size_t j = 0; j < c; ++j) {
      const double p = std::exp(logits(i, j) - log_z);
      out.grad(i, j) = (p - (static_cast<int>(j) == labels[i] ? 1.0 : 0.0)) / n;
    }
  }
  return out;
}

inline Matrix softmax(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    double mx = logits(i, 0);
    for (std::size_t j = 1; j < logits.cols(); ++j) mx = std::max(mx, logits(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < logits.cols(); ++j) z += (p(i, j) = std::exp(logits(i, j) - mx));
    for (std::size_t j = 0; j < logits.cols(); ++j) p(i, j) /= z;
  }
  return p;
}

inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   network <layer count>
//   layer <kind> [args]
//   <matrix blocks of the layer's parameters>

inline void write_network(std::ostream& os, Network& net) {
  os << "network " << net.size() << '\n';
  for (std::size_t i = 0; i < net.size(); ++i) {
    Layer& l = net.layer(i);
    os << "layer " << l.kind();
    const auto a = l.args();
    if (!a.empty()) os << ' ' << a;
    os << '\n';
    for (auto* p : l.params()) write_matrix(os, p->value);
  }
}

inline Network read_network(std::istream& is, std::uint64_t dropout_seed = 0) {
  std::string word;
  std::size_t n = 0;
  require(static_cast<bool>(is >> word >> n) && word == "network", "checkpoint: expected 'network <count>'");
  Network net;
  for (std::size_t i = 0; i < n; ++i) {
    std::string kind;
    require(static_cast<bool>(is >> word >> kind) && word == "layer", "checkpoint: expected layer header ", i);
    if (kind == "dense") {
      std::size_t in = 0, out = 0;
      require(static_cast<bool>(is >> in >> out), "checkpoint: dense layer needs 'in out'");
      Matrix w = read_matrix(is), b = read_matrix(is);
      require(w.rows() == in && w.cols() == out, "checkpoint: dense weight shape mismatch");
      net.add<Dense>(std::move(w), std::move(b));
    } else if (kind == "recurrent") {
      std::size_t in = 0, h = 0;
      require(static_cast<bool>(is >> in >> h), "checkpoint: recurrent layer needs 'in hidden'");
      Matrix wx = read_matrix(is), wh = read_matrix(is), b = read_matrix(is);
      require(wx.rows() == in && wx.cols() == h, "checkpoint: recurrent weight shape mismatch");
      net.add<Recurrent>(std::move(wx), std::move(wh), std::move(b));
    } else if (kind == "leaky_relu") {
      double s = 0.0;
      require(static_cast<bool>(is >> s), "checkpoint: leaky_relu needs a slope");
      net.add<LeakyRelu>(s);
    } else if (kind == "dropout") {
      double r = 0.0;
      require(static_cast<bool>(is >> r), "checkpoint: dropout needs a rate");
      net.add<Dropout>(r, stream_seed(dropout_seed, "dropout." + std::to_string(i)));
    } else if (kind == "relu") {
      net.add<Relu>();
    } else if (kind == "sum_pool") {
      net.add<SumPool>();
    } else if (kind == "last_step") {
      net.add<LastStep>();
    } else {
      fail("checkpoint: unknown layer kind '", kind, "'");
    }
  }
  return net;
}

inline void save_network(Network& net, const std::string& path) {
  std::ofstream os(path);
  require(static_cast<bool>(os), "cannot open ", path, " for writing");
  write_network(os, net);
}

inline Network load_network(const std::string& path, std::uint64_t dropout_seed = 0) {
  std::ifstream is(path);
  require(static_cast<bool>(is), "cannot open ", path);
  return read_network(is, dropout_seed);
}

}  // namespace automap::nn
