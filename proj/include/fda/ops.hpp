#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <string>
#include <vector>

#include "fda/tensor.hpp"

// Differentiable operator set. Every op computes its value eagerly and, when
// any input is tracked, records a backward closure on the shared tape.
// Broadcasting is limited to bias vectors and scalars.

namespace fda {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

inline void require_rank(const Shape& s, int rank, const char* op) {
  if (static_cast<int>(s.size()) != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + to_string(s));
  }
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  Tensor<Scalar> out(a.shape(), a.data() + b.data());
  if (auto* tape = detail::common_tape({&a, &b})) {
    int na = a.node(), nb = b.node();
    return tape->record(std::move(out), {na, nb}, [na, nb](const auto& g, Tape<Scalar>& t) {
      t.accumulate(na, g);
      t.accumulate(nb, g);
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<Scalar> out(a.shape(), a.data() - b.data());
  if (auto* tape = detail::common_tape({&a, &b})) {
    int na = a.node(), nb = b.node();
    return tape->record(std::move(out), {na, nb}, [na, nb](const auto& g, Tape<Scalar>& t) {
      t.accumulate(na, g);
      t.accumulate(nb, -g);
    });
  }
  return out;
}

/// Elementwise product.
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<Scalar> out(a.shape(), a.data() * b.data());
  if (auto* tape = detail::common_tape({&a, &b})) {
    int na = a.node(), nb = b.node();
    auto av = a.data(), bv = b.data();
    return tape->record(std::move(out), {na, nb}, [na, nb, av, bv](const auto& g, Tape<Scalar>& t) {
      if (na >= 0) t.accumulate(na, g * bv);
      if (nb >= 0) t.accumulate(nb, g * av);
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> mul_scalar(const Tensor<Scalar>& x, Scalar s) {
  Tensor<Scalar> out(x.shape(), x.data() * s);
  if (auto* tape = x.tape()) {
    int nx = x.node();
    return tape->record(std::move(out), {nx}, [nx, s](const auto& g, Tape<Scalar>& t) { t.accumulate(nx, g * s); });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> add_scalar(const Tensor<Scalar>& x, Scalar s) {
  Tensor<Scalar> out(x.shape(), x.data() + s);
  if (auto* tape = x.tape()) {
    int nx = x.node();
    return tape->record(std::move(out), {nx}, [nx](const auto& g, Tape<Scalar>& t) { t.accumulate(nx, g); });
  }
  return out;
}

/// max(x, 0); the subgradient at 0 is 0.
template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  Tensor<Scalar> out(x.shape(), x.data().max(Scalar(0)));
  if (auto* tape = x.tape()) {
    int nx = x.node();
    auto mask = (x.data() > Scalar(0)).template cast<Scalar>().eval();
    return tape->record(std::move(out), {nx}, [nx, mask](const auto& g, Tape<Scalar>& t) { t.accumulate(nx, g * mask); });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  typename Tensor<Scalar>::Array y = (Scalar(1) + (-x.data()).exp()).inverse();
  Tensor<Scalar> out(x.shape(), y);
  if (auto* tape = x.tape()) {
    int nx = x.node();
    return tape->record(std::move(out), {nx},
                        [nx, y](const auto& g, Tape<Scalar>& t) { t.accumulate(nx, g * y * (Scalar(1) - y)); });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  Tensor<Scalar> out = Tensor<Scalar>::scalar(x.data().sum());
  if (auto* tape = x.tape()) {
    int nx = x.node();
    Index n = x.size();
    return tape->record(std::move(out), {nx}, [nx, n](const auto& g, Tape<Scalar>& t) {
      t.accumulate(nx, Tensor<Scalar>::Array::Constant(n, g[0]));
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  if (x.size() == 0) throw DimensionError("mean: empty tensor");
  return mul_scalar(sum(x), Scalar(1) / static_cast<Scalar>(x.size()));
}

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
  if (numel(shape) != x.size()) throw DimensionError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  Tensor<Scalar> out(std::move(shape), x.data());
  if (auto* tape = x.tape()) {
    int nx = x.node();
    return tape->record(std::move(out), {nx}, [nx](const auto& g, Tape<Scalar>& t) { t.accumulate(nx, g); });
  }
  return out;
}

/// Concatenation along `axis`; all other extents must agree.
template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  if (axis < 0 || axis >= static_cast<int>(ref.size())) throw DimensionError("concat: axis out of range");
  Index outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= ref[i];
  for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];

  Shape out_shape = ref;
  out_shape[axis] = 0;
  std::vector<Index> extents;
  Tape<Scalar>* tape = nullptr;
  std::vector<int> nodes;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != ref.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (static_cast<int>(i) != axis && s[i] != ref[i]) {
        throw DimensionError("concat: extent mismatch " + to_string(s) + " vs " + to_string(ref));
      }
    }
    out_shape[axis] += s[axis];
    extents.push_back(s[axis] * inner);
    if (p.tape()) {
      if (tape && tape != p.tape()) throw StateError("concat: inputs are recorded on different tapes");
      tape = p.tape();
    }
    nodes.push_back(p.node());
  }
  const Index row = out_shape[axis] * inner;
  Tensor<Scalar> out(out_shape);
  Index offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (Index o = 0; o < outer; ++o) {
      out.data().segment(o * row + offset, extents[k]) = parts[k].data().segment(o * extents[k], extents[k]);
    }
    offset += extents[k];
  }
  if (!tape) return out;
  return tape->record(std::move(out), nodes, [nodes, extents, outer, row](const auto& g, Tape<Scalar>& t) {
    Index off = 0;
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      if (nodes[k] >= 0) {
        typename Tensor<Scalar>::Array gk(outer * extents[k]);
        for (Index o = 0; o < outer; ++o) gk.segment(o * extents[k], extents[k]) = g.segment(o * row + off, extents[k]);
        t.accumulate(nodes[k], gk);
      }
      off += extents[k];
    }
  });
}

/// Concatenates [B,C,H,W] (or [C,H,W]) maps along the channel axis.
template <typename Scalar>
Tensor<Scalar> concat_channels(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() != 3 && a.rank() != 4) throw DimensionError("concat_channels: expected rank 3 or 4");
  return concat<Scalar>({a, b}, a.rank() == 4 ? 1 : 0);
}

/// Elements [begin, end) along `axis`.
template <typename Scalar>
Tensor<Scalar> slice(const Tensor<Scalar>& x, int axis, Index begin, Index end) {
  const Shape& s = x.shape();
  if (axis < 0 || axis >= x.rank() || begin < 0 || end > s[axis] || begin >= end) {
    throw DimensionError("slice: invalid range on " + to_string(s));
  }
  Index outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= s[i];
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  const Index row = s[axis] * inner, len = (end - begin) * inner, off = begin * inner;
  Tensor<Scalar> out(out_shape);
  for (Index o = 0; o < outer; ++o) out.data().segment(o * len, len) = x.data().segment(o * row + off, len);
  if (auto* tape = x.tape()) {
    int nx = x.node();
    Index total = x.size();
    return tape->record(std::move(out), {nx}, [=](const auto& g, Tape<Scalar>& t) {
      typename Tensor<Scalar>::Array gx = Tensor<Scalar>::Array::Zero(total);
      for (Index o = 0; o < outer; ++o) gx.segment(o * row + off, len) = g.segment(o * len, len);
      t.accumulate(nx, gx);
    });
  }
  return out;
}

/// y = x W^T + b for x [N,in], W [out,in], b [out].
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& b) {
  detail::require_rank(x.shape(), 2, "linear");
  detail::require_rank(w.shape(), 2, "linear");
  const Index n = x.dim(0), in = x.dim(1), out_f = w.dim(0);
  if (w.dim(1) != in) throw DimensionError("linear: input features " + std::to_string(in) + " vs weight " + to_string(w.shape()));
  if (b.shape() != Shape{out_f}) throw DimensionError("linear: bias shape " + to_string(b.shape()));
  using Mat = RowMatrix<Scalar>;
  Eigen::Map<const Mat> X(x.data().data(), n, in);
  Eigen::Map<const Mat> W(w.data().data(), out_f, in);
  Tensor<Scalar> out({n, out_f});
  Eigen::Map<Mat> Y(out.data().data(), n, out_f);
  Y.noalias() = X * W.transpose();
  Y.rowwise() += b.data().matrix().transpose();
  if (auto* tape = detail::common_tape({&x, &w, &b})) {
    int nx = x.node(), nw = w.node(), nb = b.node();
    auto xv = x.data(), wv = w.data();
    return tape->record(std::move(out), {nx, nw, nb}, [=](const auto& g, Tape<Scalar>& t) {
      Eigen::Map<const Mat> G(g.data(), n, out_f);
      if (nx >= 0) {
        typename Tensor<Scalar>::Array gx(n * in);
        Eigen::Map<Mat>(gx.data(), n, in).noalias() = G * Eigen::Map<const Mat>(wv.data(), out_f, in);
        t.accumulate(nx, gx);
      }
      if (nw >= 0) {
        typename Tensor<Scalar>::Array gw(out_f * in);
        Eigen::Map<Mat>(gw.data(), out_f, in).noalias() = G.transpose() * Eigen::Map<const Mat>(xv.data(), n, in);
        t.accumulate(nw, gw);
      }
      if (nb >= 0) t.accumulate(nb, G.colwise().sum().transpose().array().eval());
    });
  }
  return out;
}

/// Softmax along axis 0 (the agent axis) independently at every trailing position.
template <typename Scalar>
Tensor<Scalar> softmax_over_agents(const Tensor<Scalar>& x) {
  if (x.rank() < 1 || x.dim(0) < 1) throw DimensionError("softmax_over_agents: empty agent axis");
  const Index agents = x.dim(0), rest = x.size() / agents;
  using Mat = RowMatrix<Scalar>;
  Eigen::Map<const Mat> X(x.data().data(), agents, rest);
  Tensor<Scalar> out(x.shape());
  Eigen::Map<Mat> Y(out.data().data(), agents, rest);
  Y = (X.rowwise() - X.colwise().maxCoeff()).array().exp().matrix();
  Y.array().rowwise() /= Y.colwise().sum().array();
  if (auto* tape = x.tape()) {
    int nx = x.node();
    auto yv = out.data();
    return tape->record(std::move(out), {nx}, [=](const auto& g, Tape<Scalar>& t) {
      Eigen::Map<const Mat> G(g.data(), agents, rest);
      Eigen::Map<const Mat> Yc(yv.data(), agents, rest);
      typename Tensor<Scalar>::Array gx(agents * rest);
      Eigen::Map<Mat> GX(gx.data(), agents, rest);
      auto dot = (G.array() * Yc.array()).colwise().sum().eval();
      GX = (Yc.array() * (G.array().rowwise() - dot)).matrix();
      t.accumulate(nx, gx);
    });
  }
  return out;
}

namespace detail {

/// Unfolds image `x` [C,H,W] into columns [C*k*k, Ho*Wo].
template <typename Scalar>
void im2col(const Scalar* x, Index c_in, Index h, Index w, Index k, Index stride, Index pad, Index ho, Index wo,
            Scalar* col) {
  for (Index c = 0; c < c_in; ++c) {
    for (Index ki = 0; ki < k; ++ki) {
      for (Index kj = 0; kj < k; ++kj) {
        Scalar* dst = col + ((c * k + ki) * k + kj) * ho * wo;
        for (Index oh = 0; oh < ho; ++oh) {
          const Index ih = oh * stride - pad + ki;
          Scalar* row = dst + oh * wo;
          if (ih < 0 || ih >= h) {
            std::fill(row, row + wo, Scalar(0));
            continue;
          }
          const Scalar* src = x + (c * h + ih) * w;
          for (Index ow = 0; ow < wo; ++ow) {
            const Index iw = ow * stride - pad + kj;
            row[ow] = (iw >= 0 && iw < w) ? src[iw] : Scalar(0);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im(const Scalar* col, Index c_in, Index h, Index w, Index k, Index stride, Index pad, Index ho, Index wo,
            Scalar* x) {
  for (Index c = 0; c < c_in; ++c) {
    for (Index ki = 0; ki < k; ++ki) {
      for (Index kj = 0; kj < k; ++kj) {
        const Scalar* src = col + ((c * k + ki) * k + kj) * ho * wo;
        for (Index oh = 0; oh < ho; ++oh) {
          const Index ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= h) continue;
          Scalar* dst = x + (c * h + ih) * w;
          const Scalar* row = src + oh * wo;
          for (Index ow = 0; ow < wo; ++ow) {
            const Index iw = ow * stride - pad + kj;
            if (iw >= 0 && iw < w) dst[iw] += row[ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation: input [B,Cin,H,W], weight [Cout,Cin,k,k], bias [Cout].
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias,
                      int stride, int pad) {
  detail::require_rank(input.shape(), 4, "conv2d input");
  detail::require_rank(weight.shape(), 4, "conv2d weight");
  if (stride <= 0) throw ArgumentError("conv2d: stride must be positive, got " + std::to_string(stride));
  if (pad < 0) throw ArgumentError("conv2d: negative padding");
  const Index batch = input.dim(0), c_in = input.dim(1), h = input.dim(2), w = input.dim(3);
  const Index c_out = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != c_in) {
    throw DimensionError("conv2d: input has " + std::to_string(c_in) + " channels, weight expects " +
                         std::to_string(weight.dim(1)));
  }
  if (weight.dim(3) != k) throw DimensionError("conv2d: non-square kernel");
  if (bias.shape() != Shape{c_out}) throw DimensionError("conv2d: bias shape " + to_string(bias.shape()));
  const Index ho = (h + 2 * pad - k) / stride + 1, wo = (w + 2 * pad - k) / stride + 1;
  if (h + 2 * pad < k || w + 2 * pad < k) throw DimensionError("conv2d: kernel larger than padded input");

  using Mat = RowMatrix<Scalar>;
  const Index rows = c_in * k * k, pix = ho * wo;
  Eigen::Map<const Mat> W(weight.data().data(), c_out, rows);
  Tensor<Scalar> out({batch, c_out, ho, wo});
  Mat col(rows, pix);
  for (Index b = 0; b < batch; ++b) {
    detail::im2col(input.data().data() + b * c_in * h * w, c_in, h, w, k, stride, pad, ho, wo, col.data());
    Eigen::Map<Mat> Y(out.data().data() + b * c_out * pix, c_out, pix);
    Y.noalias() = W * col;
    Y.colwise() += bias.data().matrix();
  }
  detail::check_finite(out, "conv2d");

  if (auto* tape = detail::common_tape({&input, &weight, &bias})) {
    int ni = input.node(), nw = weight.node(), nb = bias.node();
    auto xv = input.data(), wv = weight.data();
    return tape->record(std::move(out), {ni, nw, nb}, [=](const auto& g, Tape<Scalar>& t) {
      Eigen::Map<const Mat> Wc(wv.data(), c_out, rows);
      Mat colb(rows, pix);
      Mat dcol(rows, pix);
      typename Tensor<Scalar>::Array gx, gw, gb;
      if (ni >= 0) gx = Tensor<Scalar>::Array::Zero(batch * c_in * h * w);
      if (nw >= 0) gw = Tensor<Scalar>::Array::Zero(c_out * rows);
      if (nb >= 0) gb = Tensor<Scalar>::Array::Zero(c_out);
      for (Index b = 0; b < batch; ++b) {
        Eigen::Map<const Mat> G(g.data() + b * c_out * pix, c_out, pix);
        if (nw >= 0) {
          detail::im2col(xv.data() + b * c_in * h * w, c_in, h, w, k, stride, pad, ho, wo, colb.data());
          Eigen::Map<Mat>(gw.data(), c_out, rows).noalias() += G * colb.transpose();
        }
        if (nb >= 0) gb += G.rowwise().sum().array();
        if (ni >= 0) {
          dcol.noalias() = Wc.transpose() * G;
          detail::col2im(dcol.data(), c_in, h, w, k, stride, pad, ho, wo, gx.data() + b * c_in * h * w);
        }
      }
      if (ni >= 0) t.accumulate(ni, gx);
      if (nw >= 0) t.accumulate(nw, gw);
      if (nb >= 0) t.accumulate(nb, gb);
    });
  }
  return out;
}

/// 2×2 max pooling with stride 2; ties route the gradient to the first
/// element of the window in row-major order.
template <typename Scalar>
Tensor<Scalar> maxpool2(const Tensor<Scalar>& input) {
  detail::require_rank(input.shape(), 4, "maxpool2");
  const Index planes = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h % 2 || w % 2) throw DimensionError("maxpool2: odd spatial extent " + to_string(input.shape()));
  const Index ho = h / 2, wo = w / 2;
  Tensor<Scalar> out({input.dim(0), input.dim(1), ho, wo});
  std::vector<Index> arg(out.size());
  const Scalar* x = input.data().data();
  for (Index p = 0; p < planes; ++p) {
    for (Index i = 0; i < ho; ++i) {
      for (Index j = 0; j < wo; ++j) {
        const Index base = p * h * w + 2 * i * w + 2 * j;
        const Index cand[4] = {base, base + 1, base + w, base + w + 1};
        Index best = cand[0];
        for (int c = 1; c < 4; ++c) {
          if (x[cand[c]] > x[best]) best = cand[c];
        }
        const Index o = (p * ho + i) * wo + j;
        out[o] = x[best];
        arg[o] = best;
      }
    }
  }
  if (auto* tape = input.tape()) {
    int ni = input.node();
    Index total = input.size();
    return tape->record(std::move(out), {ni}, [ni, total, arg = std::move(arg)](const auto& g, Tape<Scalar>& t) {
      typename Tensor<Scalar>::Array gx = Tensor<Scalar>::Array::Zero(total);
      for (std::size_t o = 0; o < arg.size(); ++o) gx[arg[o]] += g[static_cast<Index>(o)];
      t.accumulate(ni, gx);
    });
  }
  return out;
}

/// Nearest-neighbour 2× upsampling; each input element fills a 2×2 block.
template <typename Scalar>
Tensor<Scalar> upsample_nearest2(const Tensor<Scalar>& input) {
  detail::require_rank(input.shape(), 4, "upsample_nearest2");
  const Index planes = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  const Index ho = 2 * h, wo = 2 * w;
  Tensor<Scalar> out({input.dim(0), input.dim(1), ho, wo});
  for (Index p = 0; p < planes; ++p) {
    for (Index i = 0; i < ho; ++i) {
      for (Index j = 0; j < wo; ++j) out[(p * ho + i) * wo + j] = input[(p * h + i / 2) * w + j / 2];
    }
  }
  if (auto* tape = input.tape()) {
    int ni = input.node();
    return tape->record(std::move(out), {ni}, [=](const auto& g, Tape<Scalar>& t) {
      typename Tensor<Scalar>::Array gx = Tensor<Scalar>::Array::Zero(planes * h * w);
      for (Index p = 0; p < planes; ++p) {
        for (Index i = 0; i < ho; ++i) {
          for (Index j = 0; j < wo; ++j) gx[(p * h + i / 2) * w + j / 2] += g[(p * ho + i) * wo + j];
        }
      }
      t.accumulate(ni, gx);
    });
  }
  return out;
}

/// Gathers channel vectors at flat spatial positions of a [C,H,W] map into [M,C].
template <typename Scalar>
Tensor<Scalar> select_locations(const Tensor<Scalar>& map, const std::vector<Index>& positions) {
  detail::require_rank(map.shape(), 3, "select_locations");
  const Index c = map.dim(0), hw = map.dim(1) * map.dim(2);
  const Index m = static_cast<Index>(positions.size());
  Tensor<Scalar> out({m, c});
  for (Index i = 0; i < m; ++i) {
    const Index p = positions[i];
    if (p < 0 || p >= hw) throw ArgumentError("select_locations: position out of range");
    for (Index ch = 0; ch < c; ++ch) out[i * c + ch] = map[ch * hw + p];
  }
  if (auto* tape = map.tape()) {
    int nm = map.node();
    return tape->record(std::move(out), {nm}, [=](const auto& g, Tape<Scalar>& t) {
      typename Tensor<Scalar>::Array gx = Tensor<Scalar>::Array::Zero(c * hw);
      for (Index i = 0; i < m; ++i) {
        for (Index ch = 0; ch < c; ++ch) gx[ch * hw + positions[i]] += g[i * c + ch];
      }
      t.accumulate(nm, gx);
    });
  }
  return out;
}

}  // namespace fda
