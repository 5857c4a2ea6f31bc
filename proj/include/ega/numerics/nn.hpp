#pragma once

// Parameterized building blocks over the tape: linear maps, the Dice activation
// with running statistics, layer normalization and sigmoid-output MLPs.

#include <cmath>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ega/numerics/autodiff.hpp"
#include "ega/numerics/params.hpp"

namespace ega {

using Rng = std::mt19937_64;

struct DiceState {
  std::vector<double> mean;
  std::vector<double> var;
  std::vector<double> alpha;
  double eps = 1e-8;
  double momentum = 0.99;

  static DiceState fresh(std::size_t channels) {
    return DiceState{std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0),
                     std::vector<double>(channels, 0.0)};
  }
  std::size_t channels() const noexcept { return mean.size(); }
};

// Per-channel batch mean and (biased) variance of `x`.
inline void column_moments(const Matrix& x, std::vector<double>& mean, std::vector<double>& var) {
  const std::size_t c = x.cols();
  mean.assign(c, 0.0);
  var.assign(c, 0.0);
  if (x.rows() == 0) return;
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < c; ++j) mean[j] += x(i, j);
  for (double& m : mean) m /= static_cast<double>(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < c; ++j) var[j] += (x(i, j) - mean[j]) * (x(i, j) - mean[j]);
  for (double& v : var) v /= static_cast<double>(x.rows());
}

inline void update_running(std::span<double> running, std::span<const double> batch,
                           double momentum) {
  for (std::size_t j = 0; j < running.size(); ++j)
    running[j] = momentum * running[j] + (1.0 - momentum) * batch[j];
}

// Output uses the running statistics held in `state`; in training mode the batch
// statistics of `x` are folded into them afterwards.
inline Matrix dice(const Matrix& x, DiceState& state, bool training) {
  if (x.cols() != state.channels() || state.var.size() != state.channels() ||
      state.alpha.size() != state.channels())
    throw ShapeError("dice: input " + x.shape_str() + " vs " + std::to_string(state.channels()) +
                     " channels");
  Tape t;
  Var xv = t.constant(x);
  Var a = t.constant(Matrix::row_vector(state.alpha));
  Matrix out = t.value(ad::dice(xv, a, state.mean, state.var, state.eps));
  if (training && x.rows() > 0) {
    std::vector<double> bm, bv;
    column_moments(x, bm, bv);
    update_running(state.mean, bm, state.momentum);
    update_running(state.var, bv, state.momentum);
  }
  return out;
}

class Linear {
 public:
  Linear() = default;
  Linear(std::string prefix, std::size_t in, std::size_t out)
      : prefix_(std::move(prefix)), in_(in), out_(out) {}

  void init(ParamStore& store, Rng& rng, bool zero_weights = false) const {
    store.add(w(), zero_weights ? Matrix(in_, out_) : uniform_init(in_, out_, in_, rng));
    store.add(b(), Matrix(1, out_));
  }
  Var forward(Tape& t, ParamStore& store, Var x) const {
    return ad::linear(x, t.param(store, w()), t.param(store, b()));
  }
  std::string w() const { return prefix_ + ".w"; }
  std::string b() const { return prefix_ + ".b"; }
  std::size_t in() const noexcept { return in_; }
  std::size_t out() const noexcept { return out_; }

 private:
  std::string prefix_;
  std::size_t in_ = 0;
  std::size_t out_ = 0;
};

class DiceUnit {
 public:
  static constexpr double kEps = 1e-2;  // post-attention channels can be near constant across a set
  static constexpr double kMomentum = 0.99;

  DiceUnit() = default;
  DiceUnit(std::string prefix, std::size_t channels)
      : prefix_(std::move(prefix)), channels_(channels) {}

  void init(ParamStore& store) const {
    store.add(prefix_ + ".alpha", Matrix(1, channels_));
    store.add(prefix_ + ".mean", Matrix(1, channels_), TensorKind::buffer);
    store.add(prefix_ + ".var", Matrix(1, channels_, 1.0), TensorKind::buffer);
  }

  Var forward(Tape& t, ParamStore& store, Var x, bool training) const {
    return forward_range(t, store, x, 0, training);
  }

  // Applies channels [begin, begin + x.cols) of this unit to `x`.
  Var forward_range(Tape& t, ParamStore& store, Var x, std::size_t begin, bool training) const {
    const std::size_t c = t.value(x).cols();
    if (begin + c > channels_)
      throw ShapeError("DiceUnit " + prefix_ + ": channel range out of bounds");
    std::span<double> mean(store.value(prefix_ + ".mean").data().data() + begin, c);
    std::span<double> var(store.value(prefix_ + ".var").data().data() + begin, c);
    Var alpha = t.param(store, prefix_ + ".alpha");
    if (c != channels_) alpha = ad::slice_cols(alpha, begin, c);
    Var y = ad::dice(x, alpha, mean, var, kEps);
    if (training && t.value(x).rows() > 0) {
      std::vector<double> bm, bv;
      column_moments(t.value(x), bm, bv);
      update_running(mean, bm, kMomentum);
      update_running(var, bv, kMomentum);
    }
    return y;
  }

  std::size_t channels() const noexcept { return channels_; }

 private:
  std::string prefix_;
  std::size_t channels_ = 0;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(std::string prefix, std::size_t channels)
      : prefix_(std::move(prefix)), channels_(channels) {}

  void init(ParamStore& store) const {
    store.add(prefix_ + ".g", Matrix(1, channels_, 1.0));
    store.add(prefix_ + ".b", Matrix(1, channels_));
  }
  Var forward(Tape& t, ParamStore& store, Var x) const {
    return ad::layer_norm(x, t.param(store, prefix_ + ".g"), t.param(store, prefix_ + ".b"));
  }

 private:
  std::string prefix_;
  std::size_t channels_ = 0;
};

// Linear -> Dice hidden layers, sigmoid on a single output column.
class Mlp {
 public:
  Mlp() = default;
  Mlp(const std::string& prefix, std::vector<std::size_t> widths) : widths_(std::move(widths)) {
    if (widths_.size() < 2) throw std::invalid_argument("Mlp: needs at least in/out widths");
    for (std::size_t i = 0; i + 1 < widths_.size(); ++i) {
      layers_.emplace_back(prefix + ".l" + std::to_string(i), widths_[i], widths_[i + 1]);
      if (i + 2 < widths_.size()) acts_.emplace_back(prefix + ".act" + std::to_string(i), widths_[i + 1]);
    }
  }

  // The final layer starts at zero so fresh heads output exactly 0.5.
  void init(ParamStore& store, Rng& rng) const {
    for (std::size_t i = 0; i < layers_.size(); ++i)
      layers_[i].init(store, rng, i + 1 == layers_.size());
    for (const auto& a : acts_) a.init(store);
  }

  Var logits(Tape& t, ParamStore& store, Var x, bool training) const {
    Var h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      h = layers_[i].forward(t, store, h);
      if (i < acts_.size()) h = acts_[i].forward(t, store, h, training);
    }
    return h;
  }
  Var forward(Tape& t, ParamStore& store, Var x, bool training) const {
    return ad::sigmoid(logits(t, store, x, training));
  }

  const Linear& final_layer() const { return layers_.back(); }
  std::size_t in() const { return widths_.front(); }

 private:
  std::vector<std::size_t> widths_;
  std::vector<Linear> layers_;
  std::vector<DiceUnit> acts_;
};

// Builds a loss on a fresh tape and back-propagates it into the gradient slots
// of `store` (which are zeroed first). Returns the loss value.
template <class BuildLoss>
double gradient_of(BuildLoss&& build_loss, ParamStore& store) {
  store.zero_grad();
  Tape t;
  Var loss = build_loss(t);
  t.backward(loss);
  return t.scalar(loss);
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  // Applies one update to the named tensors from their gradient slots. Naming a
  // frozen tensor or a buffer is rejected before anything is written.
  void step(ParamStore& store, const std::vector<std::string>& names) {
    for (const auto& n : names) {
      const Tensor& t = store.at(n);
      if (!t.trainable())
        throw FrozenParameterError("Adam: refusing to update non-trainable tensor '" + n + "'");
    }
    ++steps_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    for (const auto& n : names) {
      store.update(n, [&](Tensor& t) {
        auto [it, fresh] = moments_.try_emplace(n);
        if (fresh) {
          it->second.m = Matrix(t.value.rows(), t.value.cols());
          it->second.v = Matrix(t.value.rows(), t.value.cols());
        }
        auto& m = it->second.m.data();
        auto& v = it->second.v.data();
        auto& w = t.value.data();
        const auto& g = t.grad.data();
        for (std::size_t i = 0; i < w.size(); ++i) {
          m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
          v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
          w[i] -= cfg_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
        }
      });
    }
  }

  // Trainable tensors under `prefix`.
  static std::vector<std::string> trainable(const ParamStore& store, std::string_view prefix = {}) {
    std::vector<std::string> out;
    for (const auto& n : store.names(prefix))
      if (store.at(n).trainable()) out.push_back(n);
    return out;
  }

  const AdamConfig& config() const noexcept { return cfg_; }
  std::size_t steps() const noexcept { return steps_; }

 private:
  struct Moments {
    Matrix m, v;
  };
  AdamConfig cfg_;
  std::size_t steps_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace ega
