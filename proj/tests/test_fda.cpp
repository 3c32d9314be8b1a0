#include <doctest.h>

#include <random>
#include <set>

#include "fda/fda.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace fda;
using fda::test::random_tensor;
using TensorD = Tensor<double>;

namespace {

FeatureMap<double> random_map(Index c, Index h, Index w, std::mt19937_64& rng, double lo = 0.0, double hi = 2.0) {
  return {random_tensor({c, h, w}, rng, lo, hi), GridSpec{}, "test"};
}

std::vector<std::vector<double>> rows_of(const TensorD& t) {
  std::vector<std::vector<double>> out(static_cast<std::size_t>(t.dim(0)));
  for (Index i = 0; i < t.dim(0); ++i)
    for (Index j = 0; j < t.dim(1); ++j) out[static_cast<std::size_t>(i)].push_back(t[i * t.dim(1) + j]);
  return out;
}

FeatureVectorSet<double> set_of(TensorD t) { return {std::move(t)}; }

}  // namespace

TEST_CASE("fresh LFCM is the identity") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    const auto f = random_map(4, 8, 12, rng, -3.0, 3.0);
    const auto params = make_lfcm_params<double>(4, static_cast<std::uint64_t>(trial));
    const auto out = lfcm_forward(f, params);
    CHECK((out.compensated.tensor.data() == f.tensor.data()).all());
    CHECK(out.compensation.tensor.data().isZero(0.0));
  }
  const TensorD src = random_tensor({3, 4, 4}, rng);
  const FeatureMap<float> ff{Tensor<float>(src.shape(), src.data().cast<float>()), GridSpec{}, "f"};
  CHECK((lfcm_forward(ff, make_lfcm_params<float>(3, 0)).compensated.tensor.data() == ff.tensor.data()).all());
}

TEST_CASE("LFCM output is input plus compensation") {
  std::mt19937_64 rng(2);
  const auto f = random_map(3, 8, 8, rng);
  auto params = make_lfcm_params<double>(3, 5);
  params.at("out.w") = random_tensor({3, 3, 1, 1}, rng);
  params.at("out.b") = random_tensor({3}, rng);
  const auto out = lfcm_forward(f, params);
  CHECK_FALSE(out.compensation.tensor.data().isZero());
  CHECK(((out.compensated.tensor.data() - (f.tensor.data() + out.compensation.tensor.data())).abs() < 1e-15).all());
}

TEST_CASE("LFCM stage shapes") {
  std::mt19937_64 rng(3);
  const auto f = random_map(2, 8, 12, rng);
  LfcmTrace<double> tr;
  lfcm_forward(f, make_lfcm_params<double>(2, 0), &tr);
  CHECK(tr.enc1 == Shape{1, 4, 8, 12});
  CHECK(tr.pool1 == Shape{1, 4, 4, 6});
  CHECK(tr.enc2 == Shape{1, 8, 4, 6});
  CHECK(tr.pool2 == Shape{1, 8, 2, 3});
  CHECK(tr.bottleneck == Shape{1, 8, 2, 3});
  CHECK(tr.dec2 == Shape{1, 4, 4, 6});
  CHECK(tr.dec1 == Shape{1, 2, 8, 12});
  CHECK(tr.out == Shape{1, 2, 8, 12});
  CHECK_THROWS_AS(lfcm_forward(random_map(2, 6, 8, rng), make_lfcm_params<double>(2, 0)), DimensionError);
}

TEST_CASE("sample_positions") {
  const auto a = sample_positions(100, 40, 9);
  CHECK(a == sample_positions(100, 40, 9));
  CHECK(a != sample_positions(100, 40, 10));
  CHECK(std::set<Index>(a.begin(), a.end()).size() == 40);
  const auto all = sample_positions(10, 10, 1);
  CHECK(std::set<Index>(all.begin(), all.end()).size() == 10);
  const auto over = sample_positions(5, 30, 1);
  CHECK(over.size() == 30);
  for (Index p : over) CHECK((p >= 0 && p < 5));
}

TEST_CASE("sample_feature_vectors gathers channel vectors") {
  std::mt19937_64 rng(4);
  const auto f = random_map(3, 4, 4, rng);
  MmdConfig cfg;
  cfg.samples = 5;
  cfg.seed = 12;
  const auto s = sample_feature_vectors(f, cfg);
  CHECK(s.vectors.shape() == Shape{5, 3});
  const auto pos = sample_positions(16, 5, 12);
  for (Index i = 0; i < 5; ++i)
    for (Index c = 0; c < 3; ++c) CHECK(s.vectors[i * 3 + c] == f.tensor[c * 16 + pos[static_cast<std::size_t>(i)]]);
  cfg.samples = 1;
  CHECK_THROWS_AS(sample_feature_vectors(f, cfg), ArgumentError);
}

TEST_CASE("mmd2 properties") {
  std::mt19937_64 rng(5);
  MmdConfig cfg;
  for (int trial = 0; trial < 40; ++trial) {
    const Index n = 3 + trial % 7, m = 2 + trial % 5, d = 1 + trial % 4;
    const auto x = random_tensor({n, d}, rng), y = random_tensor({m, d}, rng, -0.5, 1.5);
    const double v = mmd2(set_of(x), set_of(y), cfg).item();
    CHECK(v >= -1e-12);
    CHECK(v == mmd2(set_of(y), set_of(x), cfg).item());
    const double sigma = mmd_bandwidth(x, y, cfg);
    CHECK(v == doctest::Approx(oracle::mmd2(rows_of(x), rows_of(y), sigma)).epsilon(1e-9));
    CHECK(std::abs(mmd2(set_of(x), set_of(x), cfg).item()) <= 1e-12);
  }
}

TEST_CASE("mmd2 of two singletons is 2 - 2k") {
  MmdConfig cfg;
  cfg.bandwidth = MmdConfig::Bandwidth::fixed;
  cfg.sigma = 0.7;
  const TensorD x({1, 2}, {0.0, 0.0}), y({1, 2}, {1.0, 1.0});
  const double expected = 2.0 - 2.0 * std::exp(-2.0 / (2 * 0.49));
  CHECK(mmd2(set_of(x), set_of(y), cfg).item() == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("mmd2 validates inputs") {
  MmdConfig cfg;
  CHECK_THROWS_AS(mmd2(set_of(TensorD({2, 3})), set_of(TensorD({2, 4})), cfg), DimensionError);
  CHECK_THROWS_AS(mmd2(set_of(TensorD({0, 3})), set_of(TensorD({2, 3})), cfg), ArgumentError);
  cfg.bandwidth = MmdConfig::Bandwidth::fixed;
  cfg.sigma = 0;
  CHECK_THROWS_AS(cfg.validate(), ArgumentError);
}

TEST_CASE("median bandwidth falls back to one on degenerate sets") {
  MmdConfig cfg;
  const TensorD same({3, 2}, {1, 1, 1, 1, 1, 1});
  CHECK(mmd_bandwidth(same, same, cfg) == 1.0);
}

TEST_CASE("dscm_loss detaches the ego side by default") {
  std::mt19937_64 rng(6);
  Tape<double> tape;
  const auto e = random_map(4, 4, 4, rng), c = random_map(4, 4, 4, rng, 1.0, 3.0);
  FeatureMap<double> ego{tape.leaf(e.tensor), e.grid, "ego"}, cav{tape.leaf(c.tensor), c.grid, "cav"};
  MmdConfig cfg;
  cfg.samples = 8;
  const auto loss = dscm_loss<double>({ego}, {cav}, cfg);
  CHECK(loss.item() > 0);
  tape.backward(loss);
  CHECK(tape.grad(ego.tensor).data().isZero(0.0));
  CHECK_FALSE(tape.grad(cav.tensor).data().isZero());
}

TEST_CASE("dscm_loss with ego gradient enabled reaches the ego map") {
  std::mt19937_64 rng(7);
  Tape<double> tape;
  const auto e = random_map(4, 4, 4, rng), c = random_map(4, 4, 4, rng, 1.0, 3.0);
  FeatureMap<double> ego{tape.leaf(e.tensor), e.grid, "ego"}, cav{tape.leaf(c.tensor), c.grid, "cav"};
  MmdConfig cfg;
  cfg.samples = 8;
  cfg.ego_gradient = true;
  tape.backward(dscm_loss<double>({ego}, {cav}, cfg));
  CHECK_FALSE(tape.grad(ego.tensor).data().isZero());
}

TEST_CASE("dscm_loss per-CAV mode and validation") {
  std::mt19937_64 rng(8);
  const auto e = random_map(3, 4, 4, rng), c1 = random_map(3, 4, 4, rng), c2 = random_map(3, 4, 4, rng, 1, 2);
  MmdConfig cfg;
  cfg.samples = 6;
  cfg.per_cav = true;
  CHECK(dscm_loss<double>({e}, {c1, c2}, cfg).item() > 0);
  CHECK_THROWS_AS(dscm_loss<double>({e}, {}, cfg), ArgumentError);
  CHECK_THROWS_AS(dscm_loss<double>({e}, {random_map(2, 4, 4, rng)}, cfg), DimensionError);
}

TEST_CASE("a small step against the MMD gradient reduces it") {
  std::mt19937_64 rng(9);
  MmdConfig cfg;
  int decreased = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_tensor({16, 4}, rng), y = random_tensor({16, 4}, rng, 0.0, 2.0);
    Tape<double> tape;
    const auto yl = tape.leaf(y);
    const auto loss = mmd2(set_of(x), set_of(yl), cfg);
    tape.backward(loss);
    TensorD stepped = y;
    stepped.data() -= 1e-4 * tape.grad(yl).data();
    decreased += mmd2(set_of(x), set_of(stepped), cfg).item() < loss.item();
  }
  CHECK(decreased == 20);
}
