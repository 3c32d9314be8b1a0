#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "fda/bev.hpp"
#include "fda/ops.hpp"
#include "fda/parameters.hpp"

namespace fda {

// ---------------------------------------------------------------------------
// Learnable feature compensation: U-Net style encoder/decoder producing a
// residual map that is added to the incoming CAV feature.
// ---------------------------------------------------------------------------

/// enc1 5×5 C→2C, enc2 5×5 2C→4C, bottleneck 5×5 4C→4C, dec2 5×5 8C→2C,
/// dec1 5×5 4C→C, out 1×1 C→C. The output projection starts at exactly zero.
template <typename Scalar>
ParameterSet<Scalar> make_lfcm_params(Index channels, std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, hash_name("lfcm")));
  const Index c = channels;
  ParameterSet<Scalar> p;
  add_conv(p, "enc1", c, 2 * c, 5, rng);
  add_conv(p, "enc2", 2 * c, 4 * c, 5, rng);
  add_conv(p, "bottleneck", 4 * c, 4 * c, 5, rng);
  add_conv(p, "dec2", 8 * c, 2 * c, 5, rng);
  add_conv(p, "dec1", 4 * c, c, 5, rng);
  add_conv(p, "out", c, c, 1, rng, /*zero=*/true);
  return p;
}

template <typename Scalar>
struct LfcmOutput {
  FeatureMap<Scalar> compensation;  // M_c
  FeatureMap<Scalar> compensated;   // f_cav + M_c
};

/// Intermediate activations, exposed for shape inspection.
template <typename Scalar>
struct LfcmTrace {
  Shape enc1, pool1, enc2, pool2, bottleneck, dec2, dec1, out;
};

template <typename Scalar>
LfcmOutput<Scalar> lfcm_forward(const FeatureMap<Scalar>& f_cav, const ParameterSet<Scalar>& params,
                                LfcmTrace<Scalar>* trace = nullptr) {
  const Index c = f_cav.channels(), h = f_cav.height(), w = f_cav.width();
  if (h % 4 || w % 4) throw DimensionError("lfcm: feature extent " + to_string(f_cav.tensor.shape()) + " not divisible by 4");
  using detail::conv_layer;
  Tensor<Scalar> x = reshape(f_cav.tensor, {1, c, h, w});
  Tensor<Scalar> e1 = relu(conv_layer(x, params, "enc1", 1));
  Tensor<Scalar> p1 = maxpool2(e1);
  Tensor<Scalar> e2 = relu(conv_layer(p1, params, "enc2", 1));
  Tensor<Scalar> p2 = maxpool2(e2);
  Tensor<Scalar> b = relu(conv_layer(p2, params, "bottleneck", 1));
  Tensor<Scalar> d2 = relu(conv_layer(concat_channels(upsample_nearest2(b), e2), params, "dec2", 1));
  Tensor<Scalar> d1 = relu(conv_layer(concat_channels(upsample_nearest2(d2), e1), params, "dec1", 1));
  Tensor<Scalar> m = conv_layer(d1, params, "out", 1);
  if (trace) *trace = {e1.shape(), p1.shape(), e2.shape(), p2.shape(), b.shape(), d2.shape(), d1.shape(), m.shape()};
  if (m.shape() != x.shape()) throw DimensionError("lfcm: compensation map shape " + to_string(m.shape()));
  Tensor<Scalar> mc = reshape(m, {c, h, w});
  Tensor<Scalar> fhat = add(f_cav.tensor, mc);
  return {{mc, f_cav.grid, f_cav.source}, {fhat, f_cav.grid, f_cav.source}};
}

// ---------------------------------------------------------------------------
// Distribution consistency: RBF-kernel MMD between ego and CAV feature sets.
// ---------------------------------------------------------------------------

struct MmdConfig {
  enum class Bandwidth { median, fixed };
  Bandwidth bandwidth = Bandwidth::median;
  double sigma = 1.0;
  Index samples = 256;
  std::uint64_t seed = 0;
  /// Let the MMD gradient reach the ego side (needed when no CAV-side path is trainable).
  bool ego_gradient = false;
  /// Average per-CAV MMD instead of pooling all CAVs into one set.
  bool per_cav = false;

  void validate() const {
    if (samples < 2) throw ArgumentError("mmd: sample count must be at least 2");
    if (bandwidth == Bandwidth::fixed && !(sigma > 0)) throw ArgumentError("mmd: fixed sigma must be positive");
  }
};

/// Rows are C-dimensional feature vectors, shape [M, C].
template <typename Scalar>
struct FeatureVectorSet {
  Tensor<Scalar> vectors;

  Index count() const { return vectors.dim(0); }
  Index dim() const { return vectors.dim(1); }
};

/// Flat spatial positions drawn for a map with `locations` cells. Without
/// replacement when count <= locations, otherwise with replacement.
inline std::vector<Index> sample_positions(Index locations, Index count, std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, 0x5A3B1E));
  std::vector<Index> out;
  if (count <= locations) {
    std::vector<Index> perm(static_cast<std::size_t>(locations));
    std::iota(perm.begin(), perm.end(), Index{0});
    for (Index i = 0; i < count; ++i) {
      const Index j = i + static_cast<Index>(rng() % static_cast<std::uint64_t>(locations - i));
      std::swap(perm[i], perm[j]);
    }
    out.assign(perm.begin(), perm.begin() + count);
  } else {
    for (Index i = 0; i < count; ++i) out.push_back(static_cast<Index>(rng() % static_cast<std::uint64_t>(locations)));
  }
  return out;
}

template <typename Scalar>
FeatureVectorSet<Scalar> sample_feature_vectors(const FeatureMap<Scalar>& f, const MmdConfig& cfg) {
  cfg.validate();
  if (f.tensor.rank() != 3 || f.tensor.size() == 0) throw ArgumentError("sample_feature_vectors: empty feature map");
  return {select_locations(f.tensor, sample_positions(f.height() * f.width(), cfg.samples, cfg.seed))};
}

namespace detail {

/// Squared Euclidean distances between the rows of `z`, via the Gram matrix.
inline RowMatrix<double> pairwise_sq_distances(const RowMatrix<double>& z) {
  const Eigen::VectorXd norms = z.rowwise().squaredNorm();
  RowMatrix<double> d(z.rows(), z.rows());
  d.noalias() = z * z.transpose();
  for (Index i = 0; i < d.rows(); ++i) {
    double* row = d.data() + i * d.cols();
    for (Index j = 0; j < d.cols(); ++j) row[j] = std::max(norms[i] + norms[j] - 2.0 * row[j], 0.0);
  }
  return d;
}

/// Median distance over the strictly upper triangle of the squared distances
/// `d`; 0 when there are fewer than two points.
inline double median_distance(const RowMatrix<double>& d) {
  const Index t = d.rows();
  std::vector<double> v;
  v.reserve(static_cast<std::size_t>(t * (t - 1) / 2));
  for (Index i = 0; i < t; ++i) {
    for (Index j = i + 1; j < t; ++j) v.push_back(d(i, j));
  }
  if (v.empty()) return 0.0;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<long>(mid), v.end());
  const double upper = std::sqrt(v[mid]);
  if (v.size() % 2) return upper;
  return 0.5 * (upper + std::sqrt(*std::max_element(v.begin(), v.begin() + static_cast<long>(mid))));
}

template <typename Scalar>
bool lexicographically_less(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.size() != b.size()) return a.size() < b.size();
  return std::lexicographical_compare(a.data().data(), a.data().data() + a.size(), b.data().data(),
                                      b.data().data() + b.size());
}

template <typename Scalar>
RowMatrix<double> as_matrix(const Tensor<Scalar>& t) {
  return Eigen::Map<const RowMatrix<Scalar>>(t.data().data(), t.dim(0), t.dim(1)).template cast<double>();
}

/// Rows of `a` followed by rows of `b`.
inline RowMatrix<double> stack(const RowMatrix<double>& a, const RowMatrix<double>& b) {
  RowMatrix<double> z(a.rows() + b.rows(), a.cols());
  z.topRows(a.rows()) = a;
  z.bottomRows(b.rows()) = b;
  return z;
}

inline double bandwidth_from(const RowMatrix<double>& d, const MmdConfig& cfg) {
  if (cfg.bandwidth == MmdConfig::Bandwidth::fixed) return cfg.sigma;
  const double med = median_distance(d);
  if (!(med > 1e-12)) {
    std::cerr << "warning: mmd median bandwidth is degenerate; falling back to sigma = 1\n";
    return 1.0;
  }
  return med;
}

}  // namespace detail

/// Bandwidth used by `mmd2` for the pooled set x ∪ y.
template <typename Scalar>
double mmd_bandwidth(const Tensor<Scalar>& x, const Tensor<Scalar>& y, const MmdConfig& cfg) {
  if (cfg.bandwidth == MmdConfig::Bandwidth::fixed) return cfg.sigma;
  const bool swap = detail::lexicographically_less(y, x);
  const RowMatrix<double> z = swap ? detail::stack(detail::as_matrix(y), detail::as_matrix(x))
                                   : detail::stack(detail::as_matrix(x), detail::as_matrix(y));
  return detail::bandwidth_from(detail::pairwise_sq_distances(z), cfg);
}

/// Biased (V-statistic) MMD² with an RBF kernel. The bandwidth is treated as a
/// constant for differentiation.
template <typename Scalar>
Tensor<Scalar> mmd2(const FeatureVectorSet<Scalar>& xs, const FeatureVectorSet<Scalar>& ys, const MmdConfig& cfg) {
  const Tensor<Scalar>& x = xs.vectors;
  const Tensor<Scalar>& y = ys.vectors;
  if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(1)) {
    throw DimensionError("mmd2: vector dimension mismatch " + to_string(x.shape()) + " vs " + to_string(y.shape()));
  }
  if (x.dim(0) == 0 || y.dim(0) == 0) throw ArgumentError("mmd2: empty feature set");
  const Index n = x.dim(0), m = y.dim(0);
  const RowMatrix<double> X = detail::as_matrix(x);
  const RowMatrix<double> Y = detail::as_matrix(y);

  // Everything is computed on a canonically ordered stack, so mmd2(x,y) and
  // mmd2(y,x) agree bitwise.
  const bool swap = detail::lexicographically_less(y, x);
  const Index na = swap ? m : n, nb = swap ? n : m;
  auto k = std::make_shared<RowMatrix<double>>(
      detail::pairwise_sq_distances(swap ? detail::stack(Y, X) : detail::stack(X, Y)));
  const double sigma = detail::bandwidth_from(*k, cfg);
  k->array() = (k->array() * (-1.0 / (2.0 * sigma * sigma))).exp();
  const double value = (k->topLeftCorner(na, na).mean() + k->bottomRightCorner(nb, nb).mean()) -
                       2.0 * k->topRightCorner(na, nb).mean();
  Tensor<Scalar> out = Tensor<Scalar>::scalar(static_cast<Scalar>(value));

  auto* tape = detail::common_tape({&x, &y});
  if (!tape) return out;
  const int nx = x.node(), ny = y.node();
  return tape->record(std::move(out), {nx, ny}, [=](const auto& g, Tape<Scalar>& t) {
    const double s2 = sigma * sigma;
    const double up = static_cast<double>(g[0]);
    const RowMatrix<double>& kk = *k;
    // Σ_j k_ij (a_i - b_j) for a kernel block given as an expression.
    auto pull = [](const auto& blk, const RowMatrix<double>& a, const RowMatrix<double>& b) {
      RowMatrix<double> r = a.array().colwise() * blk.rowwise().sum().array();
      r.noalias() -= blk * b;
      return r;
    };
    // Blocks of the canonical stack seen from x's and y's side.
    const auto top = kk.topLeftCorner(na, na);
    const auto bottom = kk.bottomRightCorner(nb, nb);
    const auto cross = kk.topRightCorner(na, nb);
    if (nx >= 0) {
      RowMatrix<double> gx = swap ? RowMatrix<double>(-2.0 / (double(n) * n * s2) * pull(bottom, X, X) +
                                                      2.0 / (double(n) * m * s2) * pull(cross.transpose(), X, Y))
                                  : RowMatrix<double>(-2.0 / (double(n) * n * s2) * pull(top, X, X) +
                                                      2.0 / (double(n) * m * s2) * pull(cross, X, Y));
      gx *= up;
      t.accumulate(nx, Eigen::Map<const Eigen::ArrayXd>(gx.data(), gx.size()).cast<Scalar>().eval());
    }
    if (ny >= 0) {
      RowMatrix<double> gy = swap ? RowMatrix<double>(-2.0 / (double(m) * m * s2) * pull(top, Y, Y) +
                                                      2.0 / (double(n) * m * s2) * pull(cross, Y, X))
                                  : RowMatrix<double>(-2.0 / (double(m) * m * s2) * pull(bottom, Y, Y) +
                                                      2.0 / (double(n) * m * s2) * pull(cross.transpose(), Y, X));
      gy *= up;
      t.accumulate(ny, Eigen::Map<const Eigen::ArrayXd>(gy.data(), gy.size()).cast<Scalar>().eval());
    }
  });
}

/// Pools sampled vectors of a list of maps into one set.
template <typename Scalar>
FeatureVectorSet<Scalar> pool_samples(const std::vector<FeatureMap<Scalar>>& maps, const MmdConfig& cfg,
                                      std::uint64_t stream, bool detach) {
  std::vector<Tensor<Scalar>> parts;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    MmdConfig c = cfg;
    c.seed = mix_seed(cfg.seed, stream * 1000003u + i);
    Tensor<Scalar> v = sample_feature_vectors(maps[i], c).vectors;
    parts.push_back(detach ? v.detached() : v);
  }
  return {concat(parts, 0)};
}

/// MMD² between the pooled ego feature vectors and the pooled compensated CAV
/// feature vectors. Ego vectors are detached unless `cfg.ego_gradient`.
template <typename Scalar>
Tensor<Scalar> dscm_loss(const std::vector<FeatureMap<Scalar>>& ego_maps,
                         const std::vector<FeatureMap<Scalar>>& cav_hat_maps, const MmdConfig& cfg) {
  if (ego_maps.empty() || cav_hat_maps.empty()) throw ArgumentError("dscm_loss: empty map list");
  const Index c = ego_maps.front().channels();
  for (const auto* list : {&ego_maps, &cav_hat_maps}) {
    for (const auto& f : *list) {
      if (f.channels() != c) throw DimensionError("dscm_loss: channel mismatch");
    }
  }
  FeatureVectorSet<Scalar> ego = pool_samples(ego_maps, cfg, 0, !cfg.ego_gradient);
  if (!cfg.per_cav) return mmd2(ego, pool_samples(cav_hat_maps, cfg, 1, false), cfg);
  std::vector<Tensor<Scalar>> terms;
  for (std::size_t i = 0; i < cav_hat_maps.size(); ++i) {
    MmdConfig ci = cfg;
    ci.seed = mix_seed(cfg.seed, 77 + i);
    terms.push_back(mmd2(ego, pool_samples<Scalar>({cav_hat_maps[i]}, ci, 1, false), cfg));
  }
  Tensor<Scalar> total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  return mul_scalar(total, Scalar(1) / static_cast<Scalar>(terms.size()));
}

}  // namespace fda
