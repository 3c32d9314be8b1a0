#include <doctest.h>

#include <random>

#include "fda/detect.hpp"
#include "fda/geometry.hpp"
#include "support.hpp"

using namespace fda;
using fda::test::gradcheck;
using fda::test::probe;
using fda::test::random_tensor;
using TensorD = Tensor<double>;

namespace {

FeatureMap<double> map_of(TensorD t) { return {std::move(t), GridSpec{}, "test"}; }

}  // namespace

TEST_CASE("fusion without CAVs returns the ego map") {
  std::mt19937_64 rng(1);
  const auto ego = map_of(random_tensor({4, 3, 5}, rng));
  CHECK((attention_fuse<double>(ego, {}).tensor.data() == ego.tensor.data()).all());
}

TEST_CASE("fusion of identical maps is the map itself") {
  std::mt19937_64 rng(2);
  const auto ego = map_of(random_tensor({4, 3, 5}, rng));
  const auto fused = attention_fuse<double>(ego, {ego, ego});
  CHECK((fused.tensor.data() - ego.tensor.data()).abs().maxCoeff() < 1e-12);
  const auto w = attention_weights<double>(ego, {ego, ego});
  CHECK((w.data() - 1.0 / 3.0).abs().maxCoeff() < 1e-12);
}

TEST_CASE("attention weights form a distribution at every location") {
  std::mt19937_64 rng(3);
  const auto ego = map_of(random_tensor({6, 4, 4}, rng, -3, 3));
  const auto c1 = map_of(random_tensor({6, 4, 4}, rng, -3, 3)), c2 = map_of(random_tensor({6, 4, 4}, rng, -3, 3));
  const auto w = attention_weights<double>(ego, {c1, c2});
  CHECK(w.shape() == Shape{3, 4, 4});
  for (Index p = 0; p < 16; ++p) {
    CHECK(w[p] + w[16 + p] + w[32 + p] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(w[p] > 0);
  }
  // Each fused value lies in the convex hull of the agents' values.
  const auto f = attention_fuse<double>(ego, {c1, c2});
  for (Index k = 0; k < f.tensor.size(); ++k) {
    const double lo = std::min({ego.tensor[k], c1.tensor[k], c2.tensor[k]});
    const double hi = std::max({ego.tensor[k], c1.tensor[k], c2.tensor[k]});
    CHECK(f.tensor[k] >= lo - 1e-12);
    CHECK(f.tensor[k] <= hi + 1e-12);
  }
}

TEST_CASE("fusion shape mismatch raises") {
  CHECK_THROWS_AS(attention_fuse<double>(map_of(TensorD({4, 3, 5})), {map_of(TensorD({4, 3, 4}))}), DimensionError);
}

TEST_CASE("fusion gradient") {
  std::mt19937_64 rng(4);
  const auto e = random_tensor({3, 2, 3}, rng), a = random_tensor({3, 2, 3}, rng), r = random_tensor({3, 2, 3}, rng);
  const auto res = gradcheck(
      [&](const std::vector<TensorD>& in) {
        return probe(attention_fuse<double>(map_of(in[0]), {map_of(in[1])}).tensor, r);
      },
      {e, a});
  CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("head shapes and prior") {
  const auto params = make_head_params<double>(8, 3);
  const auto out = detect_head(map_of(TensorD({8, 6, 10})), params);
  CHECK(out.objectness.shape() == Shape{1, 6, 10});
  CHECK(out.regression.shape() == Shape{6, 6, 10});
  for (Index p = 0; p < 60; ++p) CHECK(1.0 / (1.0 + std::exp(-out.objectness[p])) == doctest::Approx(0.01));
}

TEST_CASE("canonical yaw") {
  const double pi = std::numbers::pi;
  CHECK(canonical_yaw(pi) == doctest::Approx(0.0));
  CHECK(canonical_yaw(pi / 2) == doctest::Approx(pi / 2));
  CHECK(canonical_yaw(-pi / 2) == doctest::Approx(pi / 2));
  CHECK(canonical_yaw(3.0) == doctest::Approx(3.0 - pi));
}

TEST_CASE("target encoding") {
  const GridSpec g;
  const double fx = g.feature_cell_x(), fy = g.feature_cell_y();
  SUBCASE("box at a cell centre") {
    const BevBox b{g.x_min + 10.5 * fx, g.y_min + 3.5 * fy, 1.8, 4.5, 0.2, std::nullopt};
    const auto t = encode_targets<double>({b}, g);
    const Index w = g.feature_w(), hw = w * g.feature_h(), p = 3 * w + 10;
    CHECK(t.positives == 1);
    CHECK(t.cls[p] == 1.0);
    CHECK(t.cls.data().sum() == 1.0);
    CHECK(std::abs(t.reg[p]) < 1e-12);
    CHECK(std::abs(t.reg[hw + p]) < 1e-12);
    CHECK(t.reg[2 * hw + p] == doctest::Approx(std::log(1.8)));
    CHECK(t.reg[3 * hw + p] == doctest::Approx(std::log(4.5)));
    CHECK(t.reg[4 * hw + p] == doctest::Approx(std::sin(0.2)));
    CHECK(t.reg[5 * hw + p] == doctest::Approx(std::cos(0.2)));
    CHECK(t.reg_mask.data().sum() == 6.0);
  }
  SUBCASE("shared cell keeps the nearer centre") {
    const BevBox far{g.x_min + 10.9 * fx, g.y_min + 3.5 * fy, 2, 4, 0, std::nullopt};
    const BevBox near{g.x_min + 10.6 * fx, g.y_min + 3.5 * fy, 1, 3, 0, std::nullopt};
    for (const auto& order : {std::vector<BevBox>{far, near}, std::vector<BevBox>{near, far}}) {
      const auto t = encode_targets<double>(order, g);
      const Index hw = g.feature_w() * g.feature_h(), p = 3 * g.feature_w() + 10;
      CHECK(t.positives == 1);
      CHECK(t.reg[2 * hw + p] == doctest::Approx(std::log(1.0)));
    }
  }
  SUBCASE("centres outside the grid are skipped") {
    const auto t = encode_targets<double>({{g.x_max + 5, 0, 2, 4, 0, std::nullopt}}, g);
    CHECK(t.positives == 0);
    CHECK(t.skipped == 1);
  }
}

TEST_CASE("decoding inverts encoding") {
  const GridSpec g;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> ux(-38, 38), uy(-10, 10), uyaw(-1.5, 1.5);
  std::vector<BevBox> gt;
  for (int i = 0; i < 6; ++i) gt.push_back({ux(rng), uy(rng), 1.9, 4.4, uyaw(rng), std::nullopt});
  const auto t = encode_targets<double>(gt, g);
  HeadOutput<double> head{TensorD(t.cls.shape()), t.reg};
  for (Index p = 0; p < t.cls.size(); ++p) head.objectness[p] = t.cls[p] > 0 ? 10.0 : -10.0;
  const auto boxes = decode_boxes(head, g, 0.5);
  REQUIRE(boxes.size() == t.positives);
  for (const BevBox& b : boxes) {
    double best = 0;
    for (const BevBox& q : gt) best = std::max(best, rotated_iou(b, q));
    CHECK(best > 0.999);
  }
}

TEST_CASE("decode thresholds") {
  const GridSpec g;
  HeadOutput<double> head{TensorD({1, 4, 5}), TensorD({6, 4, 5})};
  CHECK(decode_boxes(head, g, 0.0).size() == 20);
  head.objectness.data().setConstant(-1e9);
  CHECK(decode_boxes(head, g, 1e-6).empty());
}

TEST_CASE("focal loss reduces to cross-entropy") {
  std::mt19937_64 rng(6);
  const auto z = random_tensor({1, 3, 4}, rng, -4, 4);
  const TensorD ones = TensorD({1, 3, 4}, Tensor<double>::Array::Ones(12));
  double bce = 0;
  for (Index i = 0; i < 12; ++i) bce += std::log1p(std::exp(-z[i]));
  CHECK(focal_loss(z, ones, 1.0, 0.0).item() == doctest::Approx(bce / 12).epsilon(1e-12));
  // Negatives carry weight 1 - alpha.
  CHECK(focal_loss(z, TensorD({1, 3, 4}), 1.0, 2.0).item() == 0.0);
  // Extreme logits stay finite.
  const TensorD big({2}, {1e4, -1e4});
  CHECK(std::isfinite(focal_loss(big, TensorD({2}, {0.0, 1.0})).item()));
}

TEST_CASE("focal down-weights easy examples") {
  const TensorD pos({1}, {1.0});
  const double easy = focal_loss(TensorD({1}, {4.0}), pos, 0.25, 2.0).item();
  const double hard = focal_loss(TensorD({1}, {-1.0}), pos, 0.25, 2.0).item();
  CHECK(easy < hard);
  CHECK(easy < 0.25 * std::log1p(std::exp(-4.0)));
}

TEST_CASE("smooth L1") {
  const TensorD pred({4}, {0.5, 3.0, -2.0, 7.0}), target({4}, {0.0, 0.0, 0.0, 0.0});
  const TensorD mask({4}, {1, 1, 1, 0});
  CHECK(smooth_l1(pred, target, mask).item() == doctest::Approx((0.125 + 2.5 + 1.5) / 3));
  CHECK(smooth_l1(pred, target, TensorD({4})).item() == 0.0);
  CHECK_THROWS_AS(smooth_l1(pred, TensorD({3}), mask), DimensionError);
}

TEST_CASE("total loss weights") {
  const TensorD det = TensorD::scalar(2.0), mmd = TensorD::scalar(0.5);
  CHECK(total_loss(det, mmd, 1.0, 1.0).item() == 2.5);
  CHECK(total_loss(det, mmd, 0.5, 0.0).item() == 1.0);
  CHECK_THROWS_AS(total_loss(det, mmd, 1.5, 1.0), ArgumentError);
  CHECK_THROWS_AS(total_loss(det, mmd, 1.0, -0.1), ArgumentError);
}
