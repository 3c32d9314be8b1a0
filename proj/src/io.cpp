#include "fda/io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "fda/geometry.hpp"
#include "fda/parallel.hpp"

namespace fda {

namespace {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(const std::string& s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void str16(const std::string& s) {
    if (s.size() > 0xFFFF) throw ArgumentError("string too long for u16 length prefix");
    u16(static_cast<std::uint16_t>(s.size()));
    raw(s);
  }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& b, const char* what) : buf_(b), what_(what) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s(buf_.begin() + static_cast<long>(pos_), buf_.begin() + static_cast<long>(pos_ + n));
    pos_ += n;
    return s;
  }
  std::string str16() { return raw(u16()); }
  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == buf_.size(); }

  [[noreturn]] void fail(const std::string& msg, std::size_t at) const {
    throw FormatError(std::string(what_) + ": " + msg + " at byte offset " + std::to_string(at));
  }

  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) fail("truncated data (need " + std::to_string(n) + " bytes)", pos_);
  }

 private:
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  const std::vector<std::uint8_t>& buf_;
  const char* what_;
  std::size_t pos_ = 0;
};

void expect_header(ByteReader& r, const char* magic, std::uint32_t version) {
  const std::size_t at = r.offset();
  if (r.raw(4) != magic) r.fail(std::string("bad magic, expected '") + magic + "'", at);
  const std::size_t vat = r.offset();
  const std::uint32_t v = r.u32();
  if (v != version) r.fail("unsupported format version " + std::to_string(v), vat);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

}  // namespace

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FileError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FileError("write to '" + path.string() + "' failed");
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

// --- checkpoints ------------------------------------------------------------

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  ByteWriter w;
  w.raw("FDAC");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(c.entries.size()));
  for (const auto& e : c.entries) {
    if (numel(e.shape) != static_cast<Index>(std::visit([](const auto& v) { return v.size(); }, e.values))) {
      throw ArgumentError("checkpoint entry '" + e.name + "': shape does not match value count");
    }
    w.str16(e.name);
    w.u8(static_cast<std::uint8_t>(e.dtype()));
    w.u8(static_cast<std::uint8_t>(e.shape.size()));
    for (Index d : e.shape) w.u32(static_cast<std::uint32_t>(d));
    if (const auto* f = std::get_if<std::vector<float>>(&e.values)) {
      for (float v : *f) w.f32(v);
    } else {
      for (double v : std::get<std::vector<double>>(e.values)) w.f64(v);
    }
  }
  return w.take();
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes, "checkpoint");
  expect_header(r, "FDAC", kCheckpointVersion);
  const std::uint32_t count = r.u32();
  Checkpoint c;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = r.str16();
    const std::size_t tag_at = r.offset();
    const std::uint8_t tag = r.u8();
    const std::uint8_t rank = r.u8();
    for (int k = 0; k < rank; ++k) e.shape.push_back(static_cast<Index>(r.u32()));
    const auto n = static_cast<std::size_t>(numel(e.shape));
    if (tag == static_cast<std::uint8_t>(DType::f32)) {
      r.need(4 * n);
      std::vector<float> v(n);
      for (auto& x : v) x = r.f32();
      e.values = std::move(v);
    } else if (tag == static_cast<std::uint8_t>(DType::f64)) {
      r.need(8 * n);
      std::vector<double> v(n);
      for (auto& x : v) x = r.f64();
      e.values = std::move(v);
    } else {
      r.fail("unknown dtype tag " + std::to_string(tag), tag_at);
    }
    c.entries.push_back(std::move(e));
  }
  if (!r.at_end()) r.fail("trailing bytes", r.offset());
  return c;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& c) { write_file(path, encode_checkpoint(c)); }
Checkpoint read_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

// --- datasets ---------------------------------------------------------------

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ArgumentError("unknown split '" + s + "' (expected train, val or test)");
}

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

std::vector<std::uint8_t> encode_dataset(const Dataset& d) {
  ByteWriter w;
  w.raw("FDAD");
  w.u32(kDatasetVersion);
  w.str16(d.domain);
  w.u8(static_cast<std::uint8_t>(d.split));
  w.u32(static_cast<std::uint32_t>(d.frames.size()));
  auto pose = [&](const Pose& p) {
    w.f64(p.x);
    w.f64(p.y);
    w.f64(p.yaw);
  };
  for (const Scene& s : d.frames) {
    if (s.observations.size() != s.agent_count()) throw ArgumentError("dataset: observation count != agent count");
    if (s.agent_count() > 255) throw ArgumentError("dataset: more than 255 agents");
    if (s.gt_boxes.size() > 0xFFFF) throw ArgumentError("dataset: more than 65535 boxes");
    w.u64(s.seed);
    pose(s.ego_pose);
    w.u8(static_cast<std::uint8_t>(s.agent_count()));
    for (std::size_t a = 0; a < s.agent_count(); ++a) {
      pose(s.agent_pose(a));
      const auto& pts = s.observations[a].points;
      w.u32(static_cast<std::uint32_t>(pts.size()));
      for (const Point& p : pts) {
        w.f32(p.x);
        w.f32(p.y);
        w.f32(p.z);
        w.f32(p.intensity);
      }
    }
    w.u16(static_cast<std::uint16_t>(s.gt_boxes.size()));
    for (const BevBox& b : s.gt_boxes) {
      for (double v : {b.cx, b.cy, b.w, b.l, b.yaw}) w.f32(static_cast<float>(v));
    }
  }
  return w.take();
}

Dataset decode_dataset(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes, "dataset");
  expect_header(r, "FDAD", kDatasetVersion);
  Dataset d;
  d.domain = r.str16();
  const std::size_t split_at = r.offset();
  const std::uint8_t split = r.u8();
  if (split > 2) r.fail("invalid split tag " + std::to_string(split), split_at);
  d.split = static_cast<Split>(split);
  const std::uint32_t frames = r.u32();
  auto pose = [&] {
    Pose p;
    p.x = r.f64();
    p.y = r.f64();
    p.yaw = r.f64();
    return p;
  };
  for (std::uint32_t f = 0; f < frames; ++f) {
    Scene s;
    s.seed = r.u64();
    s.ego_pose = pose();
    const std::size_t agents_at = r.offset();
    const std::uint8_t agents = r.u8();
    if (agents == 0) r.fail("frame without agents", agents_at);
    for (std::uint8_t a = 0; a < agents; ++a) {
      const std::size_t pose_at = r.offset();
      Pose p = pose();
      if (a == 0) {
        if (!(p == s.ego_pose)) r.fail("agent 0 pose differs from ego pose", pose_at);
      } else {
        s.cav_poses.push_back(p);
      }
      const std::uint32_t n = r.u32();
      r.need(16 * static_cast<std::size_t>(n));
      PointCloud cloud;
      cloud.points.resize(n);
      for (Point& pt : cloud.points) {
        pt.x = r.f32();
        pt.y = r.f32();
        pt.z = r.f32();
        pt.intensity = r.f32();
      }
      s.observations.push_back(std::move(cloud));
    }
    const std::uint16_t boxes = r.u16();
    r.need(20 * static_cast<std::size_t>(boxes));
    for (std::uint16_t b = 0; b < boxes; ++b) {
      BevBox box;
      box.cx = r.f32();
      box.cy = r.f32();
      box.w = r.f32();
      box.l = r.f32();
      box.yaw = r.f32();
      s.gt_boxes.push_back(box);
    }
    d.frames.push_back(std::move(s));
  }
  if (!r.at_end()) r.fail("trailing bytes", r.offset());
  return d;
}

void write_dataset(const std::filesystem::path& path, const Dataset& d) { write_file(path, encode_dataset(d)); }
Dataset read_dataset(const std::filesystem::path& path) { return decode_dataset(read_file(path)); }

std::uint64_t frame_seed(std::uint64_t base_seed, Split split, std::size_t index) {
  constexpr std::uint64_t kSplitStride = 1'000'000;
  if (index >= kSplitStride) throw ArgumentError("frame index exceeds the per-split seed range");
  return base_seed + static_cast<std::uint64_t>(split) * kSplitStride + index;
}

Dataset generate_split(const DomainSpec& domain, Split split, std::size_t count, std::uint64_t base_seed) {
  domain.validate();
  Dataset d{domain.name, split, std::vector<Scene>(count)};
  parallel_for(count, [&](std::size_t i) { d.frames[i] = generate_scene(domain, frame_seed(base_seed, split, i)); });
  return d;
}

DatasetFiles build_dataset(const DomainSpec& domain, std::size_t n_train, std::size_t n_val, std::size_t n_test,
                           std::uint64_t base_seed, const std::filesystem::path& dir) {
  if (n_train == 0 || n_val == 0 || n_test == 0) throw ArgumentError("build_dataset: split sizes must be positive");
  DatasetFiles files{dir / (domain.name + "_train.fdad"), dir / (domain.name + "_val.fdad"),
                     dir / (domain.name + "_test.fdad")};
  write_dataset(files.train, generate_split(domain, Split::train, n_train, base_seed));
  write_dataset(files.val, generate_split(domain, Split::val, n_val, base_seed));
  write_dataset(files.test, generate_split(domain, Split::test, n_test, base_seed));
  return files;
}

// --- config -----------------------------------------------------------------

ConfigFile parse_config(const std::string& text) {
  ConfigFile cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    if (value.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty value for '" + key + "'");
    const bool valid = std::all_of(key.begin(), key.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.'; });
    if (!valid) throw ConfigError("config line " + std::to_string(lineno) + ": invalid key '" + key + "'");
    if (cfg.values.count(key)) {
      throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "' (first on line " +
                        std::to_string(cfg.lines[key]) + ")");
    }
    cfg.values[key] = value;
    cfg.lines[key] = lineno;
  }
  return cfg;
}

ConfigFile read_config(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return parse_config(std::string(bytes.begin(), bytes.end()));
}

// --- images -----------------------------------------------------------------

std::vector<std::uint8_t> feature_heatmap_pgm(const FeatureMap<float>& f, std::optional<Index> channel) {
  const Index c = f.channels(), h = f.height(), w = f.width(), hw = h * w;
  if (channel && (*channel < 0 || *channel >= c)) {
    throw ArgumentError("heatmap: channel " + std::to_string(*channel) + " out of range [0," + std::to_string(c) + ")");
  }
  std::vector<double> v(static_cast<std::size_t>(hw));
  for (Index p = 0; p < hw; ++p) {
    if (channel) {
      v[p] = f.tensor[*channel * hw + p];
    } else {
      double s = 0.0;
      for (Index k = 0; k < c; ++k) s += double(f.tensor[k * hw + p]) * f.tensor[k * hw + p];
      v[p] = std::sqrt(s);
    }
  }
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double min = *lo, range = *hi - *lo;
  std::string header = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (double x : v) {
    out.push_back(range > 0 ? static_cast<std::uint8_t>(std::lround(255.0 * (x - min) / range)) : 128);
  }
  return out;
}

void dump_feature_heatmap(const FeatureMap<float>& f, std::optional<Index> channel, const std::filesystem::path& path) {
  write_file(path, feature_heatmap_pgm(f, channel));
}

std::string render_scene_svg(const Scene& scene, const std::vector<BevBox>* predictions, double road_width) {
  constexpr double kScale = 8.0, kHalfX = 60.0, kHalfY = 20.0;
  std::ostringstream svg;
  auto px = [&](double x) { return fmt((x + kHalfX) * kScale); };
  auto py = [&](double y) { return fmt((kHalfY - y) * kScale); };  // y up
  auto polygon = [&](const BevBox& b, const char* cls, const char* stroke) {
    svg << "<polygon class=\"" << cls << "\" fill=\"none\" stroke=\"" << stroke << "\" stroke-width=\"2\" points=\"";
    const auto corners = box_corners(b);
    for (std::size_t i = 0; i < corners.size(); ++i) svg << (i ? " " : "") << px(corners[i].x()) << "," << py(corners[i].y());
    svg << "\"/>\n";
  };
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(2 * kHalfX * kScale) << "\" height=\""
      << fmt(2 * kHalfY * kScale) << "\">\n";
  svg << "<rect x=\"0\" y=\"0\" width=\"100%\" height=\"100%\" fill=\"#101010\"/>\n";

  // Road strip of the world frame, seen from the ego.
  const Pose to_ego = inverse(scene.ego_pose);
  svg << "<polygon class=\"road\" fill=\"#303030\" points=\"";
  const double corners[4][2] = {{-kRoadHalfLength, -road_width / 2}, {kRoadHalfLength, -road_width / 2},
                                {kRoadHalfLength, road_width / 2}, {-kRoadHalfLength, road_width / 2}};
  for (int i = 0; i < 4; ++i) {
    double x, y;
    transform_point(to_ego, corners[i][0], corners[i][1], x, y);
    svg << (i ? " " : "") << px(x) << "," << py(y);
  }
  svg << "\"/>\n";

  for (std::size_t a = 0; a < scene.observations.size(); ++a) {
    const PointCloud cloud = project_to_ego(scene.observations[a], scene.agent_pose(a), scene.ego_pose);
    const char* color = a == 0 ? "#ff9f1c" : "#e0e0e0";
    svg << "<g class=\"cloud\" fill=\"" << color << "\">\n";
    for (const Point& p : cloud.points) svg << "<circle cx=\"" << px(p.x) << "\" cy=\"" << py(p.y) << "\" r=\"1.2\"/>\n";
    svg << "</g>\n";
  }
  for (const BevBox& b : scene.gt_boxes) polygon(to_frame(b, scene.ego_pose), "gt", "#2ecc40");
  if (predictions) {
    for (const BevBox& b : *predictions) polygon(b, "pred", "#ff4136");
  }
  polygon(to_frame(ego_box(scene.ego_pose), scene.ego_pose), "ego", "#ff9f1c");
  svg << "</svg>\n";
  return svg.str();
}

void render_scene_svg(const Scene& scene, const std::vector<BevBox>* predictions, const std::filesystem::path& path) {
  write_text(path, render_scene_svg(scene, predictions));
}

}  // namespace fda
