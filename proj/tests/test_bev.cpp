#include <doctest.h>

#include <algorithm>
#include <random>

#include "fda/bev.hpp"

using namespace fda;

namespace {

PointCloud cloud_of(std::vector<Point> pts) {
  PointCloud c;
  c.points = std::move(pts);
  return c;
}

Index cell_index(const GridSpec& g, double x, double y) {
  const auto ix = static_cast<Index>(std::floor((x - g.x_min) / g.cell_x()));
  const auto iy = static_cast<Index>(std::floor((y - g.y_min) / g.cell_y()));
  return iy * g.nx + ix;
}

}  // namespace

TEST_CASE("grid validation") {
  GridSpec g;
  CHECK_NOTHROW(g.validate());
  g.nx = 30;
  CHECK_THROWS_AS(g.validate(), ArgumentError);
  g = GridSpec{};
  g.x_max = g.x_min;
  CHECK_THROWS_AS(g.validate(), ArgumentError);
}

TEST_CASE("pillar statistics of a single cell") {
  const GridSpec g;
  const double x = 0.3, y = 0.2;
  const Index cells = g.nx * g.ny, c = cell_index(g, x, y);
  SUBCASE("one point") {
    const auto t = pillarize<double>(cloud_of({{float(x), float(y), 1.f, 0.5f}}), g);
    CHECK(t[c] == doctest::Approx(std::log(2.0)));
    CHECK(t[cells + c] == doctest::Approx(1.0));
    CHECK(t[2 * cells + c] == doctest::Approx(1.0));
    CHECK(t[3 * cells + c] == doctest::Approx(0.5));
    CHECK(t.data().abs().sum() == doctest::Approx(std::log(2.0) + 2.5));
  }
  SUBCASE("two points") {
    const auto t = pillarize<double>(cloud_of({{float(x), float(y), 1.f, 0.2f}, {float(x), float(y), 3.f, 0.4f}}), g);
    CHECK(t[c] == doctest::Approx(std::log(3.0)));
    CHECK(t[cells + c] == doctest::Approx(2.0));
    CHECK(t[2 * cells + c] == doctest::Approx(3.0));
    CHECK(t[3 * cells + c] == doctest::Approx(0.3));
  }
  SUBCASE("points outside the grid are dropped") {
    const auto t = pillarize<double>(cloud_of({{100.f, 0.f, 1.f, 1.f}, {0.f, -50.f, 1.f, 1.f}}), g);
    CHECK(t.data().isZero());
  }
}

TEST_CASE("pillarize ignores point order") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> ux(-40, 40), uy(-12, 12), uz(0, 2), ui(0, 1);
  std::vector<Point> pts;
  for (int i = 0; i < 400; ++i) pts.push_back({ux(rng), uy(rng), uz(rng), ui(rng)});
  const GridSpec g;
  const auto a = pillarize<double>(cloud_of(pts), g);
  std::shuffle(pts.begin(), pts.end(), rng);
  const auto b = pillarize<double>(cloud_of(pts), g);
  // Summation order changes the rounding of the means only.
  CHECK((a.data() - b.data()).abs().maxCoeff() < 1e-12);
}

TEST_CASE("translation by one cell shifts the pillar tensor by one column") {
  const GridSpec g;
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> cx(5, 120), cy(5, 90);
  std::uniform_real_distribution<float> uz(0, 2), ui(0, 1);
  std::vector<Point> pts, moved;
  for (int i = 0; i < 100; ++i) {
    const double x = g.x_min + (cx(rng) + 0.5) * g.cell_x(), y = g.y_min + (cy(rng) + 0.5) * g.cell_y();
    const Point p{float(x), float(y), uz(rng), ui(rng)};
    pts.push_back(p);
    moved.push_back({float(x + g.cell_x()), p.y, p.z, p.intensity});
  }
  const auto a = pillarize<double>(cloud_of(pts), g), b = pillarize<double>(cloud_of(moved), g);
  for (Index ch = 0; ch < 4; ++ch)
    for (Index i = 0; i < g.ny; ++i)
      for (Index j = 0; j + 1 < g.nx; ++j) {
        const Index base = ch * g.ny * g.nx + i * g.nx;
        CHECK(b[base + j + 1] == a[base + j]);
      }
}

TEST_CASE("encoder output shape and seeding") {
  const GridSpec g;
  const auto params = make_encoder_params<float>(1);
  CHECK(params.size() == 8);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<float> ux(-40, 40), uy(-12, 12), u(0, 1);
  std::vector<Point> pts;
  for (int i = 0; i < 300; ++i) pts.push_back({ux(rng), uy(rng), u(rng), u(rng)});
  const auto pillars = pillarize<float>(cloud_of(pts), g);
  const auto f = encode(pillars, params, g);
  CHECK(f.tensor.shape() == Shape{32, 24, 32});
  CHECK(f.grid == g);
  CHECK(f.tensor.data().minCoeff() >= 0.f);
  const auto same = encode(pillars, make_encoder_params<float>(1), g);
  CHECK((f.tensor.data() == same.tensor.data()).all());
  const auto other = encode(pillars, make_encoder_params<float>(2), g);
  CHECK_FALSE((f.tensor.data() == other.tensor.data()).all());

  EncoderShape small{8, 16};
  const auto fs = encode(pillars, make_encoder_params<float>(1, small), g);
  CHECK(fs.tensor.shape() == Shape{16, 24, 32});
}

TEST_CASE("empty input with zero biases encodes to zero") {
  const GridSpec g;
  const auto f = encode(Tensor<double>({4, g.ny, g.nx}), make_encoder_params<double>(9), g);
  CHECK(f.tensor.data().isZero());
}

TEST_CASE("encoder shape errors name the layer") {
  const GridSpec g;
  auto params = make_encoder_params<double>(1);
  try {
    encode(Tensor<double>({3, 8, 8}), params, g);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("conv1") != std::string::npos);
  }
  params.at("conv3.w") = Tensor<double>({32, 16, 5, 5});
  try {
    encode(Tensor<double>({4, 16, 16}), params, g);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("conv3") != std::string::npos);
  }
}
