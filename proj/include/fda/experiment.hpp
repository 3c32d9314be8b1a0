#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fda/adam.hpp"
#include "fda/bev.hpp"
#include "fda/detect.hpp"
#include "fda/eval.hpp"
#include "fda/fda.hpp"
#include "fda/io.hpp"
#include "fda/scene.hpp"

namespace fda {

class TrainingError : public Error {
 public:
  using Error::Error;
};

/// A scenario needed the output of an earlier phase that is not available.
class DependencyError : public Error {
 public:
  using Error::Error;
};

enum class Scenario { no_dist, dist, dist_finetune, dist_fda, ablate_lfcm, ablate_dscm };

inline constexpr std::array<Scenario, 6> kAllScenarios = {Scenario::no_dist,  Scenario::dist,
                                                          Scenario::dist_finetune, Scenario::dist_fda,
                                                          Scenario::ablate_lfcm, Scenario::ablate_dscm};

Scenario parse_scenario(const std::string& s);
std::string to_string(Scenario s);

struct ExperimentConfig {
  DomainSpec domain_a = domain_a_preset();
  DomainSpec domain_b = domain_b_preset();
  /// "a": ego domain A with B-trained CAV encoders. "b" swaps the roles.
  std::string ego_domain = "a";
  GridSpec grid;
  EncoderShape encoder;
  MmdConfig mmd;
  AdamOptions adam;
  int decay_period = 10;
  double decay_factor = 0.1;
  int pretrain_epochs = 15;
  int coop_epochs = 10;
  int batch_size = 4;
  double lambda = 1.0;
  double omega = 1.0;
  FocalOptions focal;
  double score_threshold = 0.25;
  double nms_threshold = 0.15;
  std::size_t n_train = 300;
  std::size_t n_val = 60;
  std::size_t n_test = 200;
  /// Cap on pooled vectors per side when reporting feature statistics.
  Index stats_max_vectors = 2048;
  Scenario scenario = Scenario::dist_fda;
  std::uint64_t seed = 1;
  std::uint64_t data_seed = 7;
  std::filesystem::path work_dir = "fda_work";

  void validate() const;
  const DomainSpec& ego_spec() const { return ego_domain == "a" ? domain_a : domain_b; }
  const DomainSpec& cav_spec() const { return ego_domain == "a" ? domain_b : domain_a; }
  /// Base seed of a domain's dataset; distinct domains never share scene seeds.
  std::uint64_t dataset_seed(const DomainSpec& domain) const;
};

/// Builds a config from parsed `key = value` pairs. Unknown keys and bad values
/// raise ConfigError with the offending line. Relative work_dir values resolve
/// against `base_dir`.
ExperimentConfig experiment_config_from(const ConfigFile& file, const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

struct FeatureStatistics {
  double ego_mean = 0.0;
  double ego_variance = 0.0;
  double cav_mean = 0.0;
  double cav_variance = 0.0;
  /// Pooled ego vs (compensated) CAV MMD², median-heuristic bandwidth.
  double mmd2 = 0.0;
  std::size_t ego_vectors = 0;
  std::size_t cav_vectors = 0;

  bool operator==(const FeatureStatistics&) const = default;
};

struct MetricsReport {
  Scenario scenario = Scenario::no_dist;
  std::uint64_t seed = 0;
  double ap50 = 0.0;
  double ap70 = 0.0;
  /// AP of the phase's starting model, before any update.
  double initial_ap50 = 0.0;
  double initial_ap70 = 0.0;
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  FeatureStatistics stats_before;
  FeatureStatistics stats_after;
  /// Not part of the serialized report, which must be reproducible.
  double wall_seconds = 0.0;

  bool operator==(const MetricsReport& o) const;
};

/// JSON document with every field except wall_seconds.
std::string metrics_json(const MetricsReport& r);
MetricsReport parse_metrics_json(const std::string& text);
void write_metrics(const std::filesystem::path& path, const MetricsReport& r);
/// Plain-text comparison of scenario reports, one row per scenario.
std::string comparison_table(const std::vector<MetricsReport>& reports);

// --- models -----------------------------------------------------------------

struct SingleAgentModel {
  std::string domain;
  ParameterSet<float> encoder;
  ParameterSet<float> head;
  std::vector<double> train_loss;
  std::vector<double> val_loss;
};

/// Cooperative model. `lfcm` is empty when the module is absent.
struct CoopModel {
  ParameterSet<float> ego_encoder;
  ParameterSet<float> cav_encoder;
  ParameterSet<float> head;
  ParameterSet<float> lfcm;

  bool has_lfcm() const { return lfcm.size() > 0; }
};

/// Checkpoint entries are `<domain>.encoder.*` and `<domain>.head.*`.
Checkpoint to_checkpoint(const SingleAgentModel& m);
SingleAgentModel single_agent_from_checkpoint(const Checkpoint& c);
Checkpoint to_checkpoint(const CoopModel& m);
CoopModel coop_from_checkpoint(const Checkpoint& c);

/// Ego-frame ground truth whose centres fall inside the grid.
std::vector<BevBox> ego_ground_truth(const Scene& scene, const GridSpec& grid);

/// Trains an encoder and a throwaway single-agent head on the ego observations
/// of `train` frames. Throws TrainingError naming the epoch on divergence.
SingleAgentModel train_single_agent_model(const Dataset& train, const Dataset* val, const ExperimentConfig& cfg);
Checkpoint train_single_agent(const Dataset& train, const ExperimentConfig& cfg);

struct Detections {
  std::vector<FrameBoxes> predictions;
  std::vector<FrameBoxes> ground_truth;
};

Detections detect_single_agent(const SingleAgentModel& m, const Dataset& frames, const ExperimentConfig& cfg);
Detections detect_coop(const CoopModel& m, const Dataset& frames, const ExperimentConfig& cfg);
/// Fused feature map of one frame (for visual inspection).
FeatureMap<float> fused_features(const CoopModel& m, const Scene& frame, const ExperimentConfig& cfg);
/// Ego and (compensated) CAV maps of one frame, CAV clouds projected to the ego frame.
std::vector<FeatureMap<float>> agent_features(const CoopModel& m, const Scene& frame, const ExperimentConfig& cfg);

struct ApPair {
  double ap50 = 0.0;
  double ap70 = 0.0;
};
ApPair average_precisions(const Detections& d);

FeatureStatistics feature_statistics(const CoopModel& m, const Dataset& frames, const ExperimentConfig& cfg);

struct ScenarioResult {
  MetricsReport report;
  CoopModel model;
};

/// Inputs a scenario may depend on. Pretrained encoders are required by every
/// scenario; `no_dist_head` by every scenario except no_dist.
struct ScenarioInputs {
  const SingleAgentModel* ego_pretrained = nullptr;
  const SingleAgentModel* cav_pretrained = nullptr;
  const CoopModel* no_dist = nullptr;
  const Dataset* train = nullptr;
  const Dataset* val = nullptr;
  const Dataset* test = nullptr;
};

ScenarioResult run_scenario(Scenario scenario, const ExperimentConfig& cfg, const ScenarioInputs& inputs);

/// Resolves datasets, pretrained encoders and upstream phases, caching each on
/// disk under cfg.work_dir when persistence is enabled.
class Pipeline {
 public:
  using Logger = std::function<void(const std::string&)>;

  explicit Pipeline(ExperimentConfig cfg, bool persist = true, Logger log = {});

  const ExperimentConfig& config() const { return cfg_; }
  const Dataset& dataset(const DomainSpec& domain, Split split);
  const SingleAgentModel& pretrained(const DomainSpec& domain);
  /// Loads a pretrained checkpoint or throws DependencyError naming the phase.
  const SingleAgentModel& require_pretrained(const DomainSpec& domain);
  const ScenarioResult& scenario(Scenario s);

  std::filesystem::path dataset_path(const DomainSpec& domain, Split split) const;
  std::filesystem::path pretrained_path(const DomainSpec& domain) const;
  std::filesystem::path scenario_checkpoint_path(Scenario s) const;
  std::filesystem::path metrics_path(Scenario s) const;

  /// When set, scenarios only load pretrained encoders from disk and never train them.
  void set_require_pretrained(bool v) { require_pretrained_ = v; }

 private:
  void log(const std::string& msg) const;

  ExperimentConfig cfg_;
  bool persist_;
  bool require_pretrained_ = false;
  Logger log_;
  std::map<std::string, Dataset> datasets_;
  std::map<std::string, SingleAgentModel> pretrained_;
  std::map<Scenario, ScenarioResult> scenarios_;
};

}  // namespace fda
