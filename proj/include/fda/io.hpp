#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "fda/bev.hpp"
#include "fda/parameters.hpp"
#include "fda/scene.hpp"

namespace fda {

/// Corrupt or truncated file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// The file system refused a read or write.
class FileError : public Error {
 public:
  using Error::Error;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text(const std::filesystem::path& path, const std::string& text);

// --- checkpoints ("FDAC") -------------------------------------------------

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::variant<std::vector<float>, std::vector<double>> values;

  bool operator==(const CheckpointEntry&) const = default;
  DType dtype() const { return values.index() == 0 ? DType::f32 : DType::f64; }
};

struct Checkpoint {
  std::vector<CheckpointEntry> entries;

  bool operator==(const Checkpoint&) const = default;

  template <typename Scalar>
  static Checkpoint from(const ParameterSet<Scalar>& params, const std::string& prefix = "") {
    Checkpoint c;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& t = params.value(i);
      std::vector<Scalar> v(t.data().data(), t.data().data() + t.size());
      c.entries.push_back({prefix + params.names()[i], t.shape(), std::move(v)});
    }
    return c;
  }

  /// Entries whose names start with `prefix`, converted to `Scalar`.
  template <typename Scalar>
  ParameterSet<Scalar> to(const std::string& prefix = "") const {
    ParameterSet<Scalar> p;
    for (const auto& e : entries) {
      if (e.name.rfind(prefix, 0) != 0) continue;
      Tensor<Scalar> t(e.shape);
      std::visit(
          [&](const auto& v) {
            for (std::size_t i = 0; i < v.size(); ++i) t[static_cast<Index>(i)] = static_cast<Scalar>(v[i]);
          },
          e.values);
      p.add(e.name.substr(prefix.size()), std::move(t));
    }
    return p;
  }
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& c);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// --- datasets ("FDAD") ----------------------------------------------------

enum class Split : std::uint8_t { train = 0, val = 1, test = 2 };

Split parse_split(const std::string& s);
std::string to_string(Split s);

inline constexpr std::uint32_t kDatasetVersion = 1;

struct Dataset {
  std::string domain;
  Split split = Split::train;
  std::vector<Scene> frames;

  bool operator==(const Dataset&) const = default;
};

std::vector<std::uint8_t> encode_dataset(const Dataset& d);
Dataset decode_dataset(const std::vector<std::uint8_t>& bytes);
void write_dataset(const std::filesystem::path& path, const Dataset& d);
Dataset read_dataset(const std::filesystem::path& path);

/// Frame seed for index `i` of a split; splits occupy disjoint seed ranges.
std::uint64_t frame_seed(std::uint64_t base_seed, Split split, std::size_t index);

/// Generates the frames of one split.
Dataset generate_split(const DomainSpec& domain, Split split, std::size_t count, std::uint64_t base_seed);

struct DatasetFiles {
  std::filesystem::path train, val, test;
};

/// Generates and writes `<dir>/<domain>_{train,val,test}.fdad`.
DatasetFiles build_dataset(const DomainSpec& domain, std::size_t n_train, std::size_t n_val, std::size_t n_test,
                           std::uint64_t base_seed, const std::filesystem::path& dir);

// --- config files ---------------------------------------------------------

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Flat `key = value` file; `#` starts a comment. Errors carry the line number.
struct ConfigFile {
  std::map<std::string, std::string> values;
  std::map<std::string, int> lines;
};

ConfigFile parse_config(const std::string& text);
ConfigFile read_config(const std::filesystem::path& path);

// --- images ---------------------------------------------------------------

/// `channel` selects a feature channel; std::nullopt renders the per-location L2 norm.
/// Returns a binary PGM (P5), min–max normalised; a constant image maps to 128.
std::vector<std::uint8_t> feature_heatmap_pgm(const FeatureMap<float>& f, std::optional<Index> channel);
void dump_feature_heatmap(const FeatureMap<float>& f, std::optional<Index> channel, const std::filesystem::path& path);

/// Top-down SVG of a scene in the ego frame: road, agent clouds, ground truth
/// (class "gt"), predictions (class "pred") and the ego footprint (class "ego").
std::string render_scene_svg(const Scene& scene, const std::vector<BevBox>* predictions, double road_width = 14.0);
void render_scene_svg(const Scene& scene, const std::vector<BevBox>* predictions, const std::filesystem::path& path);

}  // namespace fda
