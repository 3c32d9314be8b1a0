#pragma once

#include <cmath>
#include <random>
#include <string>

#include "fda/ops.hpp"
#include "fda/parameters.hpp"
#include "fda/scene.hpp"

namespace fda {

struct GridSpec {
  double x_min = -40.0;
  double x_max = 40.0;
  double y_min = -12.0;
  double y_max = 12.0;
  Index nx = 128;
  Index ny = 96;

  bool operator==(const GridSpec&) const = default;

  void validate() const {
    if (!(x_max > x_min) || !(y_max > y_min)) throw ArgumentError("grid: empty extent");
    if (nx <= 0 || ny <= 0 || nx % 4 || ny % 4) throw ArgumentError("grid: nx, ny must be positive multiples of 4");
  }
  double cell_x() const { return (x_max - x_min) / static_cast<double>(nx); }
  double cell_y() const { return (y_max - y_min) / static_cast<double>(ny); }
  /// Feature-map resolution after the encoder's two stride-2 stages.
  Index feature_w() const { return nx / 4; }
  Index feature_h() const { return ny / 4; }
  double feature_cell_x() const { return cell_x() * 4; }
  double feature_cell_y() const { return cell_y() * 4; }
  bool contains(double x, double y) const { return x >= x_min && x < x_max && y >= y_min && y < y_max; }
};

/// Intermediate BEV feature, tensor laid out [C,H,W].
template <typename Scalar>
struct FeatureMap {
  Tensor<Scalar> tensor;
  GridSpec grid;
  std::string source;

  Index channels() const { return tensor.dim(0); }
  Index height() const { return tensor.dim(1); }
  Index width() const { return tensor.dim(2); }
};

/// Per-cell pillar statistics [log(1+count), mean z, max z, mean intensity] as [4, ny, nx].
template <typename Scalar>
Tensor<Scalar> pillarize(const PointCloud& cloud, const GridSpec& grid) {
  grid.validate();
  const Index cells = grid.nx * grid.ny;
  std::vector<double> count(cells, 0.0), zsum(cells, 0.0), zmax(cells, 0.0), isum(cells, 0.0);
  const double cx = grid.cell_x(), cy = grid.cell_y();
  for (const Point& p : cloud.points) {
    if (!grid.contains(p.x, p.y)) continue;
    const auto ix = std::min<Index>(static_cast<Index>(std::floor((p.x - grid.x_min) / cx)), grid.nx - 1);
    const auto iy = std::min<Index>(static_cast<Index>(std::floor((p.y - grid.y_min) / cy)), grid.ny - 1);
    const Index c = iy * grid.nx + ix;
    zmax[c] = count[c] == 0 ? p.z : std::max<double>(zmax[c], p.z);
    count[c] += 1;
    zsum[c] += p.z;
    isum[c] += p.intensity;
  }
  Tensor<Scalar> out({4, grid.ny, grid.nx});
  for (Index c = 0; c < cells; ++c) {
    if (count[c] == 0) continue;
    out[c] = static_cast<Scalar>(std::log1p(count[c]));
    out[cells + c] = static_cast<Scalar>(zsum[c] / count[c]);
    out[2 * cells + c] = static_cast<Scalar>(zmax[c]);
    out[3 * cells + c] = static_cast<Scalar>(isum[c] / count[c]);
  }
  return out;
}

struct EncoderShape {
  Index hidden = 32;
  Index channels = 32;
};

/// Seeded encoder weights: conv1 5×5/2 (4→hidden), conv2 3×3, conv3 5×5/2 (hidden→C), conv4 3×3.
template <typename Scalar>
ParameterSet<Scalar> make_encoder_params(std::uint64_t seed, EncoderShape shape = {}) {
  std::mt19937_64 rng(mix_seed(seed, hash_name("encoder")));
  ParameterSet<Scalar> p;
  add_conv(p, "conv1", 4, shape.hidden, 5, rng);
  add_conv(p, "conv2", shape.hidden, shape.hidden, 3, rng);
  add_conv(p, "conv3", shape.hidden, shape.channels, 5, rng);
  add_conv(p, "conv4", shape.channels, shape.channels, 3, rng);
  return p;
}

namespace detail {

/// conv2d against `<layer>.w` / `<layer>.b`, re-raising shape errors with the layer name.
template <typename Scalar>
Tensor<Scalar> conv_layer(const Tensor<Scalar>& x, const ParameterSet<Scalar>& p, const std::string& layer, int stride) {
  const auto& w = p[layer + ".w"];
  try {
    return conv2d(x, w, p[layer + ".b"], stride, static_cast<int>((w.dim(2) - 1) / 2));
  } catch (const DimensionError& e) {
    throw DimensionError("layer " + layer + ": " + e.what());
  }
}

}  // namespace detail

/// Pillar tensor [4, ny, nx] to feature map [C, ny/4, nx/4].
template <typename Scalar>
FeatureMap<Scalar> encode(const Tensor<Scalar>& pillars, const ParameterSet<Scalar>& params, const GridSpec& grid,
                          std::string source = "agent") {
  if (pillars.rank() != 3 || pillars.dim(0) != 4) {
    throw DimensionError("layer conv1: expected pillar tensor [4,H,W], got " + to_string(pillars.shape()));
  }
  Tensor<Scalar> x = reshape(pillars, {1, 4, pillars.dim(1), pillars.dim(2)});
  x = relu(detail::conv_layer(x, params, "conv1", 2));
  x = relu(detail::conv_layer(x, params, "conv2", 1));
  x = relu(detail::conv_layer(x, params, "conv3", 2));
  x = relu(detail::conv_layer(x, params, "conv4", 1));
  return {reshape(x, {x.dim(1), x.dim(2), x.dim(3)}), grid, std::move(source)};
}

}  // namespace fda
