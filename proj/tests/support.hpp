#pragma once

// Shared helpers for the test binaries: random tensors and a central-difference
// gradient checker.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "fda/ops.hpp"
#include "fda/parameters.hpp"

namespace fda::test {

using TensorD = Tensor<double>;

inline TensorD random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  TensorD t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (Index i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

/// Uniform values whose magnitude is at least `gap`, so kinks at 0 stay out of
/// finite-difference reach.
inline TensorD random_away_from_zero(Shape shape, std::mt19937_64& rng, double gap = 1e-3) {
  TensorD t = random_tensor(std::move(shape), rng);
  for (Index i = 0; i < t.size(); ++i) {
    if (std::abs(t[i]) < gap) t[i] = t[i] < 0 ? -gap - 0.1 : gap + 0.1;
  }
  return t;
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Relative error with a floor on the denominator so near-zero gradients are
/// compared absolutely.
inline double relative_error(double analytic, double numeric, double floor = 1e-3) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

using LossFn = std::function<TensorD(const std::vector<TensorD>&)>;

/// Compares tape gradients of `loss(inputs)` with central differences. When
/// `max_coords` is positive, that many coordinates per input are sampled.
inline GradCheck gradcheck(const LossFn& loss, std::vector<TensorD> inputs, double eps = 1e-5,
                           std::size_t max_coords = 0, std::uint64_t seed = 0) {
  Tape<double> tape;
  std::vector<TensorD> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
  const TensorD out = loss(leaves);
  tape.backward(out);
  std::vector<TensorD> analytic;
  for (const auto& l : leaves) analytic.push_back(tape.grad(l));

  GradCheck r;
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    std::vector<Index> coords(static_cast<std::size_t>(inputs[k].size()));
    for (Index i = 0; i < inputs[k].size(); ++i) coords[static_cast<std::size_t>(i)] = i;
    if (max_coords > 0 && coords.size() > max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords);
    }
    for (Index i : coords) {
      std::vector<TensorD> plus = inputs, minus = inputs;
      plus[k][i] += eps;
      minus[k][i] -= eps;
      const double numeric = (loss(plus).item() - loss(minus).item()) / (2 * eps);
      r.max_rel_error = std::max(r.max_rel_error, relative_error(analytic[k][i], numeric));
      ++r.checked;
    }
  }
  return r;
}

/// sum(out * weights) for fixed random weights: a scalar probe of the full Jacobian.
inline TensorD probe(const TensorD& out, const TensorD& weights) { return sum(mul(out, weights)); }

}  // namespace fda::test
