#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "fda/bev.hpp"
#include "fda/ops.hpp"
#include "fda/parameters.hpp"
#include "fda/scene.hpp"

namespace fda {

// ---------------------------------------------------------------------------
// Fusion
// ---------------------------------------------------------------------------

namespace detail {

inline void check_fusion_inputs(const Shape& ego, const Shape& other) {
  if (ego.size() != 3 || other != ego) {
    throw DimensionError("attention_fuse: map shape " + to_string(other) + " does not match ego " + to_string(ego));
  }
}

/// Softmax weights over agents at one location; agent 0 is the query.
template <typename Scalar>
void location_weights(const std::vector<const Scalar*>& maps, Index c, Index hw, Index p, double scale,
                      std::vector<double>& w) {
  const std::size_t a_count = maps.size();
  w.assign(a_count, 0.0);
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < a_count; ++a) {
    double s = 0.0;
    for (Index ch = 0; ch < c; ++ch) s += static_cast<double>(maps[a][ch * hw + p]) * maps[0][ch * hw + p];
    w[a] = s * scale;
    best = std::max(best, w[a]);
  }
  double z = 0.0;
  for (auto& v : w) z += (v = std::exp(v - best));
  for (auto& v : w) v /= z;
}

}  // namespace detail

/// Per-location attention weights [N+1, H, W]; row 0 is the ego.
template <typename Scalar>
Tensor<Scalar> attention_weights(const FeatureMap<Scalar>& ego, const std::vector<FeatureMap<Scalar>>& cavs) {
  const Index c = ego.channels(), h = ego.height(), wd = ego.width(), hw = h * wd;
  std::vector<const Scalar*> maps{ego.tensor.data().data()};
  for (const auto& f : cavs) {
    detail::check_fusion_inputs(ego.tensor.shape(), f.tensor.shape());
    maps.push_back(f.tensor.data().data());
  }
  Tensor<Scalar> out({static_cast<Index>(maps.size()), h, wd});
  std::vector<double> w;
  for (Index p = 0; p < hw; ++p) {
    detail::location_weights(maps, c, hw, p, 1.0 / std::sqrt(double(c)), w);
    for (std::size_t a = 0; a < maps.size(); ++a) out[static_cast<Index>(a) * hw + p] = static_cast<Scalar>(w[a]);
  }
  return out;
}

/// Ego-query scaled dot-product attention over agents at each BEV location.
template <typename Scalar>
FeatureMap<Scalar> attention_fuse(const FeatureMap<Scalar>& ego, const std::vector<FeatureMap<Scalar>>& cavs) {
  if (ego.tensor.rank() != 3) throw DimensionError("attention_fuse: ego map must be [C,H,W]");
  if (cavs.empty()) return ego;
  const Index c = ego.channels(), hw = ego.height() * ego.width();
  const double scale = 1.0 / std::sqrt(static_cast<double>(c));
  std::vector<const Tensor<Scalar>*> inputs{&ego.tensor};
  for (const auto& f : cavs) {
    detail::check_fusion_inputs(ego.tensor.shape(), f.tensor.shape());
    inputs.push_back(&f.tensor);
  }
  std::vector<const Scalar*> maps;
  for (const auto* t : inputs) maps.push_back(t->data().data());
  const std::size_t agents = maps.size();

  Tensor<Scalar> out(ego.tensor.shape());
  std::vector<double> weights(agents * hw);
  std::vector<double> w;
  for (Index p = 0; p < hw; ++p) {
    detail::location_weights(maps, c, hw, p, scale, w);
    for (std::size_t a = 0; a < agents; ++a) weights[a * hw + p] = w[a];
    for (Index ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      for (std::size_t a = 0; a < agents; ++a) acc += w[a] * maps[a][ch * hw + p];
      out[ch * hw + p] = static_cast<Scalar>(acc);
    }
  }

  Tape<Scalar>* tape = nullptr;
  std::vector<int> nodes;
  for (const auto* t : inputs) {
    if (t->tape()) {
      if (tape && tape != t->tape()) throw StateError("attention_fuse: inputs on different tapes");
      tape = t->tape();
    }
    nodes.push_back(t->node());
  }
  if (!tape) return {out, ego.grid, "fused"};

  std::vector<typename Tensor<Scalar>::Array> values;
  for (const auto* t : inputs) values.push_back(t->data());
  Tensor<Scalar> rec = tape->record(std::move(out), nodes, [=](const auto& g, Tape<Scalar>& t) {
    std::vector<typename Tensor<Scalar>::Array> grads(agents, Tensor<Scalar>::Array::Zero(c * hw));
    std::vector<double> dw(agents), ds(agents);
    for (Index p = 0; p < hw; ++p) {
      double dot = 0.0;
      for (std::size_t a = 0; a < agents; ++a) {
        const double wa = weights[a * hw + p];
        double gv = 0.0;
        for (Index ch = 0; ch < c; ++ch) {
          const Index k = ch * hw + p;
          gv += static_cast<double>(g[k]) * values[a][k];
          grads[a][k] += static_cast<Scalar>(wa * g[k]);
        }
        dw[a] = gv;
        dot += wa * gv;
      }
      for (std::size_t a = 0; a < agents; ++a) ds[a] = weights[a * hw + p] * (dw[a] - dot) * scale;
      for (std::size_t a = 0; a < agents; ++a) {
        for (Index ch = 0; ch < c; ++ch) {
          const Index k = ch * hw + p;
          grads[a][k] += static_cast<Scalar>(ds[a] * values[0][k]);
          grads[0][k] += static_cast<Scalar>(ds[a] * values[a][k]);
        }
      }
    }
    for (std::size_t a = 0; a < agents; ++a) t.accumulate(nodes[a], grads[a]);
  });
  return {rec, ego.grid, "fused"};
}

// ---------------------------------------------------------------------------
// Detection head and targets
// ---------------------------------------------------------------------------

inline constexpr int kRegressionChannels = 6;  // dx, dy, log w, log l, sin yaw, cos yaw

template <typename Scalar>
struct HeadOutput {
  Tensor<Scalar> objectness;  // [1,H,W] logits
  Tensor<Scalar> regression;  // [6,H,W]
};

/// Two shared 3×3 conv+relu layers followed by 1×1 objectness and regression heads.
/// The objectness bias starts at the focal-loss prior logit for p = 0.01.
template <typename Scalar>
ParameterSet<Scalar> make_head_params(Index channels, std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, hash_name("head")));
  ParameterSet<Scalar> p;
  add_conv(p, "conv1", channels, channels, 3, rng);
  add_conv(p, "conv2", channels, channels, 3, rng);
  add_conv(p, "cls", channels, 1, 1, rng);
  add_conv(p, "reg", channels, kRegressionChannels, 1, rng);
  p.at("cls.w").data() *= Scalar(0.1);
  p.at("reg.w").data() *= Scalar(0.1);
  p.at("cls.b")[0] = static_cast<Scalar>(-std::log(99.0));
  return p;
}

template <typename Scalar>
HeadOutput<Scalar> detect_head(const FeatureMap<Scalar>& fused, const ParameterSet<Scalar>& params) {
  using detail::conv_layer;
  const Index c = fused.channels(), h = fused.height(), w = fused.width();
  Tensor<Scalar> x = reshape(fused.tensor, {1, c, h, w});
  x = relu(conv_layer(x, params, "conv1", 1));
  x = relu(conv_layer(x, params, "conv2", 1));
  Tensor<Scalar> cls = conv_layer(x, params, "cls", 1);
  Tensor<Scalar> reg = conv_layer(x, params, "reg", 1);
  return {reshape(cls, {1, h, w}), reshape(reg, {kRegressionChannels, h, w})};
}

/// Yaw folded into (-pi/2, pi/2]; a rectangle is invariant under a half turn.
inline double canonical_yaw(double yaw) {
  double a = normalize_angle(yaw);
  if (a > std::numbers::pi / 2) a -= std::numbers::pi;
  if (a <= -std::numbers::pi / 2) a += std::numbers::pi;
  return a;
}

template <typename Scalar>
struct DetectionTargets {
  Tensor<Scalar> cls;       // [1,H,W]
  Tensor<Scalar> reg;       // [6,H,W]
  Tensor<Scalar> reg_mask;  // [6,H,W], 1 on every channel of a positive cell
  std::size_t positives = 0;
  std::size_t skipped = 0;  // boxes whose centre falls outside the grid
};

/// Centre-cell assignment at feature resolution. When two centres share a
/// cell the one nearer the cell centre wins.
template <typename Scalar>
DetectionTargets<Scalar> encode_targets(const std::vector<BevBox>& gt, const GridSpec& grid) {
  const Index h = grid.feature_h(), w = grid.feature_w(), hw = h * w;
  const double fx = grid.feature_cell_x(), fy = grid.feature_cell_y();
  DetectionTargets<Scalar> t{Tensor<Scalar>({1, h, w}), Tensor<Scalar>({kRegressionChannels, h, w}),
                             Tensor<Scalar>({kRegressionChannels, h, w})};
  std::vector<double> best(static_cast<std::size_t>(hw), std::numeric_limits<double>::infinity());
  for (const BevBox& b : gt) {
    if (!grid.contains(b.cx, b.cy)) {
      ++t.skipped;
      continue;
    }
    const Index j = std::min<Index>(static_cast<Index>(std::floor((b.cx - grid.x_min) / fx)), w - 1);
    const Index i = std::min<Index>(static_cast<Index>(std::floor((b.cy - grid.y_min) / fy)), h - 1);
    const double ox = (b.cx - (grid.x_min + (j + 0.5) * fx)) / fx;
    const double oy = (b.cy - (grid.y_min + (i + 0.5) * fy)) / fy;
    const double dist = std::hypot(ox * fx, oy * fy);
    const Index p = i * w + j;
    if (dist >= best[p]) continue;
    best[p] = dist;
    const double yaw = canonical_yaw(b.yaw);
    const double v[kRegressionChannels] = {ox, oy, std::log(b.w), std::log(b.l), std::sin(yaw), std::cos(yaw)};
    t.cls[p] = Scalar(1);
    for (int k = 0; k < kRegressionChannels; ++k) {
      t.reg[k * hw + p] = static_cast<Scalar>(v[k]);
      t.reg_mask[k * hw + p] = Scalar(1);
    }
  }
  for (Index p = 0; p < hw; ++p) t.positives += t.cls[p] > 0 ? 1 : 0;
  return t;
}

/// Boxes for every cell whose objectness probability reaches `score_threshold`.
template <typename Scalar>
std::vector<BevBox> decode_boxes(const HeadOutput<Scalar>& head, const GridSpec& grid, double score_threshold) {
  const Index h = head.objectness.dim(1), w = head.objectness.dim(2), hw = h * w;
  const double fx = (grid.x_max - grid.x_min) / static_cast<double>(w);
  const double fy = (grid.y_max - grid.y_min) / static_cast<double>(h);
  std::vector<BevBox> out;
  for (Index i = 0; i < h; ++i) {
    for (Index j = 0; j < w; ++j) {
      const Index p = i * w + j;
      const double prob = 1.0 / (1.0 + std::exp(-static_cast<double>(head.objectness[p])));
      if (prob < score_threshold) continue;
      auto r = [&](int k) { return static_cast<double>(head.regression[k * hw + p]); };
      BevBox b;
      b.cx = grid.x_min + (j + 0.5 + r(0)) * fx;
      b.cy = grid.y_min + (i + 0.5 + r(1)) * fy;
      b.w = std::exp(std::clamp(r(2), -5.0, 5.0));
      b.l = std::exp(std::clamp(r(3), -5.0, 5.0));
      b.yaw = std::atan2(r(4), r(5));
      b.score = prob;
      out.push_back(b);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Huber (beta = 1) averaged over elements where mask != 0; zero for an empty mask.
template <typename Scalar>
Tensor<Scalar> smooth_l1(const Tensor<Scalar>& pred, const Tensor<Scalar>& target, const Tensor<Scalar>& mask) {
  detail::require_same_shape(pred.shape(), target.shape(), "smooth_l1");
  detail::require_same_shape(pred.shape(), mask.shape(), "smooth_l1 mask");
  const Index n = pred.size();
  double count = 0.0, total = 0.0;
  typename Tensor<Scalar>::Array d = pred.data() - target.data();
  for (Index i = 0; i < n; ++i) {
    if (mask[i] == Scalar(0)) continue;
    const double a = std::abs(static_cast<double>(d[i]));
    total += a < 1.0 ? 0.5 * a * a : a - 0.5;
    count += 1.0;
  }
  Tensor<Scalar> out = Tensor<Scalar>::scalar(static_cast<Scalar>(count > 0 ? total / count : 0.0));
  auto* tape = detail::common_tape({&pred, &target});
  if (!tape) return out;
  const int np = pred.node(), nt = target.node();
  auto mv = mask.data();
  return tape->record(std::move(out), {np, nt}, [=](const auto& g, Tape<Scalar>& t) {
    typename Tensor<Scalar>::Array gd = Tensor<Scalar>::Array::Zero(n);
    if (count > 0) {
      const double s = static_cast<double>(g[0]) / count;
      for (Index i = 0; i < n; ++i) {
        if (mv[i] == Scalar(0)) continue;
        const double di = static_cast<double>(d[i]);
        gd[i] = static_cast<Scalar>(s * std::clamp(di, -1.0, 1.0));
      }
    }
    t.accumulate(np, gd);
    if (nt >= 0) t.accumulate(nt, -gd);
  });
}

namespace detail {

inline double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }
inline double stable_sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace detail

/// Binary focal loss on sigmoid(logits), averaged over all cells. Positives are
/// weighted by alpha and negatives by 1 - alpha.
template <typename Scalar>
Tensor<Scalar> focal_loss(const Tensor<Scalar>& logits, const Tensor<Scalar>& target, double alpha = 0.25,
                          double gamma = 2.0) {
  detail::require_same_shape(logits.shape(), target.shape(), "focal_loss");
  const Index n = logits.size();
  if (n == 0) throw DimensionError("focal_loss: empty input");
  typename Tensor<Scalar>::Array dz(n);
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const bool pos = target[i] > Scalar(0.5);
    const double sign = pos ? 1.0 : -1.0;
    const double z = sign * static_cast<double>(logits[i]);
    const double at = pos ? alpha : 1.0 - alpha;
    const double pt = detail::stable_sigmoid(z);
    const double nll = detail::softplus(-z);  // -log p_t
    const double mod = std::pow(1.0 - pt, gamma);
    total += at * mod * nll;
    dz[i] = static_cast<Scalar>(-sign * at * mod * (gamma * pt * nll + (1.0 - pt)));
  }
  Tensor<Scalar> out = Tensor<Scalar>::scalar(static_cast<Scalar>(total / static_cast<double>(n)));
  if (auto* tape = logits.tape()) {
    const int nl = logits.node();
    return tape->record(std::move(out), {nl}, [=](const auto& g, Tape<Scalar>& t) {
      t.accumulate(nl, dz * (g[0] / static_cast<Scalar>(n)));
    });
  }
  return out;
}

struct LossWeights {
  double lambda = 1.0;
  double omega = 1.0;

  void validate() const {
    if (!(lambda >= 0 && lambda <= 1) || !(omega >= 0 && omega <= 1)) {
      throw ArgumentError("loss coefficients must lie in [0,1]");
    }
  }
};

/// lambda * det + omega * mmd.
template <typename Scalar>
Tensor<Scalar> total_loss(const Tensor<Scalar>& det, const Tensor<Scalar>& mmd, double lambda, double omega) {
  LossWeights{lambda, omega}.validate();
  return add(mul_scalar(det, static_cast<Scalar>(lambda)), mul_scalar(mmd, static_cast<Scalar>(omega)));
}

struct FocalOptions {
  double alpha = 0.25;
  double gamma = 2.0;
};

/// focal(objectness) + smooth_l1(regression) against encoded targets.
template <typename Scalar>
Tensor<Scalar> detection_loss(const HeadOutput<Scalar>& head, const DetectionTargets<Scalar>& t, FocalOptions focal = {}) {
  return add(focal_loss(head.objectness, t.cls, focal.alpha, focal.gamma), smooth_l1(head.regression, t.reg, t.reg_mask));
}

}  // namespace fda
