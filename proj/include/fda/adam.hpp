#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "fda/parameters.hpp"

namespace fda {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Decoupled (AdamW-style) decay, applied as p -= lr * wd * p.
  double weight_decay = 0.0;
};

template <typename Scalar>
class AdamState {
 public:
  using Array = typename Tensor<Scalar>::Array;

  explicit AdamState(AdamOptions options = {}) : options_(options) {}

  const AdamOptions& options() const { return options_; }
  double learning_rate() const { return options_.lr; }
  void set_learning_rate(double lr) { options_.lr = lr; }
  long step() const { return step_; }

  /// Multiplies the learning rate by `factor` once every `period` epochs.
  /// `epoch` is zero-based; call at the start of each epoch.
  void apply_step_decay(int epoch, int period, double factor) {
    if (epoch > 0 && period > 0 && epoch % period == 0) options_.lr *= factor;
  }

  /// One Adam update of `params` in place. `grads[i]` pairs with `params.value(i)`.
  void update(ParameterSet<Scalar>& params, const std::vector<Tensor<Scalar>>& grads) {
    if (grads.size() != params.size()) throw DimensionError("adam: gradient count does not match parameters");
    if (m_.empty()) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        m_.push_back(Array::Zero(params.value(i).size()));
        v_.push_back(Array::Zero(params.value(i).size()));
      }
    }
    if (m_.size() != params.size()) throw StateError("adam: parameter set changed between steps");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (grads[i].shape() != params.value(i).shape() || m_[i].size() != params.value(i).size()) {
        throw DimensionError("adam: gradient shape mismatch for '" + params.names()[i] + "'");
      }
      if (!grads[i].data().allFinite()) throw NumericError("adam: non-finite gradient for '" + params.names()[i] + "'");
    }
    ++step_;
    const double b1 = options_.beta1, b2 = options_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    const auto lr = static_cast<Scalar>(options_.lr);
    const auto decay = static_cast<Scalar>(options_.lr * options_.weight_decay);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Array& m = m_[i];
      Array& v = v_[i];
      const Array& g = grads[i].data();
      m = Scalar(b1) * m + Scalar(1 - b1) * g;
      v = Scalar(b2) * v + Scalar(1 - b2) * g.square();
      Array& p = params.value(i).data();
      if (decay != Scalar(0)) p -= decay * p;
      p -= lr * (m / Scalar(c1)) / ((v / Scalar(c2)).sqrt() + Scalar(options_.eps));
    }
  }

 private:
  AdamOptions options_;
  long step_ = 0;
  std::vector<Array> m_;
  std::vector<Array> v_;
};

template <typename Scalar>
void adam_step(ParameterSet<Scalar>& params, const std::vector<Tensor<Scalar>>& grads, AdamState<Scalar>& state) {
  state.update(params, grads);
}

}  // namespace fda
