#include <doctest.h>

#include <filesystem>
#include <random>
#include <regex>

#include "fda/io.hpp"
#include "support.hpp"

using namespace fda;
namespace fs = std::filesystem;

namespace {

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

std::size_t count_of(const std::string& text, const std::string& needle) {
  std::size_t n = 0;
  for (std::size_t p = text.find(needle); p != std::string::npos; p = text.find(needle, p + 1)) ++n;
  return n;
}

Checkpoint sample_checkpoint() {
  std::mt19937_64 rng(1);
  ParameterSet<double> p;
  p.add("a.w", fda::test::random_tensor({2, 3, 1, 1}, rng));
  p.add("a.b", fda::test::random_tensor({2}, rng));
  Checkpoint c = Checkpoint::from(p, "m.");
  c.entries.push_back({"f", {3}, std::vector<float>{1.5f, -2.f, 0.25f}});
  c.entries.push_back({"scalar", {}, std::vector<double>{42.0}});
  return c;
}

}  // namespace

TEST_CASE("checkpoint round trip") {
  const Checkpoint c = sample_checkpoint();
  const auto bytes = encode_checkpoint(c);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "FDAC");
  const Checkpoint back = decode_checkpoint(bytes);
  CHECK(back == c);
  CHECK(encode_checkpoint(back) == bytes);
  CHECK(back.entries[2].dtype() == DType::f32);
  const auto params = back.to<double>("m.");
  CHECK(params.size() == 2);
  CHECK(params["a.b"].shape() == Shape{2});
}

TEST_CASE("checkpoint corruption is reported with an offset") {
  const auto bytes = encode_checkpoint(sample_checkpoint());
  SUBCASE("truncation at every length") {
    for (std::size_t n = 0; n < bytes.size(); ++n) {
      const std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + static_cast<long>(n));
      CHECK_THROWS_AS(decode_checkpoint(cut), FormatError);
    }
    const std::string msg = error_of([&] { decode_checkpoint({bytes.begin(), bytes.begin() + 10}); });
    CHECK(msg.find("offset") != std::string::npos);
  }
  SUBCASE("bad magic") {
    auto bad = bytes;
    bad[0] = 'X';
    const std::string msg = error_of([&] { decode_checkpoint(bad); });
    CHECK(msg.find("magic") != std::string::npos);
    CHECK(msg.find("offset 0") != std::string::npos);
  }
  SUBCASE("bad version") {
    auto bad = bytes;
    bad[4] = 99;
    CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
  }
  SUBCASE("trailing bytes") {
    auto bad = bytes;
    bad.push_back(0);
    CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
  }
}

TEST_CASE("dataset round trip is bitwise") {
  const Dataset d = generate_split(domain_b_preset(), Split::val, 100, 5);
  CHECK(d.frames.size() == 100);
  CHECK(d.domain == "domain_b");
  const auto bytes = encode_dataset(d);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "FDAD");
  const Dataset back = decode_dataset(bytes);
  CHECK(back == d);
  CHECK(encode_dataset(back) == bytes);
  for (std::size_t n : {std::size_t{0}, std::size_t{3}, bytes.size() / 2, bytes.size() - 1}) {
    CHECK_THROWS_AS(decode_dataset({bytes.begin(), bytes.begin() + static_cast<long>(n)}), FormatError);
  }
}

TEST_CASE("dataset files") {
  const fs::path dir = fs::temp_directory_path() / "fda_test_io";
  fs::remove_all(dir);
  const Dataset d = generate_split(domain_a_preset(), Split::test, 4, 1);
  write_dataset(dir / "x.fdad", d);
  CHECK(read_dataset(dir / "x.fdad") == d);
  CHECK_THROWS_AS(read_dataset(dir / "missing.fdad"), FileError);
  fs::remove_all(dir);
}

TEST_CASE("split names and frame seeds") {
  CHECK(parse_split("train") == Split::train);
  CHECK(to_string(Split::val) == "val");
  CHECK_THROWS_AS(parse_split("dev"), ArgumentError);
  CHECK(frame_seed(7, Split::train, 0) != frame_seed(7, Split::val, 0));
  CHECK(frame_seed(7, Split::test, 3) == frame_seed(7, Split::test, 3));
  const Dataset a = generate_split(domain_a_preset(), Split::train, 3, 7);
  CHECK(a.frames[1].seed == frame_seed(7, Split::train, 1));
  CHECK(a.frames[1] == generate_scene(domain_a_preset(), frame_seed(7, Split::train, 1)));
}

TEST_CASE("config parsing") {
  const ConfigFile c = parse_config("# comment\n a = 1 \n\nb.c=hello # trailing\n");
  CHECK(c.values.at("a") == "1");
  CHECK(c.values.at("b.c") == "hello");
  CHECK(c.lines.at("b.c") == 4);
  auto msg = [](const std::string& text) { return error_of([&] { parse_config(text); }); };
  CHECK(msg("a = 1\nnonsense\n").find("line 2") != std::string::npos);
  CHECK(msg("a = 1\na = 2\n").find("line 2") != std::string::npos);
  CHECK(msg("= 3\n").find("line 1") != std::string::npos);
  CHECK(msg("a =\n").find("line 1") != std::string::npos);
  CHECK(msg("a b = 1\n").find("line 1") != std::string::npos);
  CHECK_THROWS_AS(parse_config("x\n"), ConfigError);
}

TEST_CASE("feature heatmap PGM") {
  FeatureMap<float> f{Tensor<float>({2, 2, 3}, {0, 1, 2, 3, 4, 5, 7, 7, 7, 7, 7, 7}), GridSpec{}, "t"};
  const auto pgm = feature_heatmap_pgm(f, Index{0});
  const std::string header = "P5\n3 2\n255\n";
  REQUIRE(pgm.size() == header.size() + 6);
  CHECK(std::string(pgm.begin(), pgm.begin() + static_cast<long>(header.size())) == header);
  CHECK(pgm[header.size()] == 0);
  CHECK(pgm[header.size() + 5] == 255);
  CHECK(pgm[header.size() + 1] == 51);
  const auto flat = feature_heatmap_pgm(f, Index{1});
  for (std::size_t i = header.size(); i < flat.size(); ++i) CHECK(flat[i] == 128);
  CHECK(feature_heatmap_pgm(f, std::nullopt).size() == pgm.size());
  CHECK_THROWS_AS(feature_heatmap_pgm(f, Index{2}), ArgumentError);
}

TEST_CASE("scene SVG") {
  const Scene s = generate_scene(domain_a_preset(), 3);
  const std::string svg = render_scene_svg(s, nullptr);
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(count_of(svg, "class=\"gt\"") == s.gt_boxes.size());
  CHECK(count_of(svg, "class=\"pred\"") == 0);
  CHECK(count_of(svg, "class=\"ego\"") == 1);
  CHECK(count_of(svg, "class=\"cloud\"") == s.agent_count());
  std::size_t points = 0;
  for (const auto& c : s.observations) points += c.size();
  CHECK(count_of(svg, "<circle") == points);
  CHECK(svg == render_scene_svg(s, nullptr));
  const std::vector<BevBox> preds{{1, 2, 2, 4, 0, 0.9}, {8, -2, 2, 4, 0.3, 0.4}};
  CHECK(count_of(render_scene_svg(s, &preds), "class=\"pred\"") == 2);
}
