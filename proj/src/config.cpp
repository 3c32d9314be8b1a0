#include <charconv>
#include <cstdio>
#include <functional>
#include <sstream>

#include <json.hpp>

#include "fda/experiment.hpp"

namespace fda {

namespace {

using Setter = std::function<void(ExperimentConfig&, const std::string&)>;

[[noreturn]] void bad_value(const std::string& value, const char* expected) {
  throw ArgumentError("invalid value '" + value + "' (expected " + expected + ")");
}

long long parse_int(const std::string& v) {
  long long out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(v, "an integer");
  return out;
}

std::uint64_t parse_u64(const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(v, "a non-negative integer");
  return out;
}

double parse_double(const std::string& v) {
  double out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(out)) bad_value(v, "a finite number");
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(v, "true or false");
}

int positive_int(const std::string& v) {
  const long long x = parse_int(v);
  if (x <= 0 || x > 1'000'000'000) bad_value(v, "a positive integer");
  return static_cast<int>(x);
}

double unit_interval(const std::string& v) {
  const double x = parse_double(v);
  if (x < 0 || x > 1) bad_value(v, "a number in [0,1]");
  return x;
}

void add_domain_keys(std::map<std::string, Setter>& keys, const std::string& prefix,
                     DomainSpec ExperimentConfig::*member) {
  auto on = [&](const std::string& key, std::function<void(DomainSpec&, const std::string&)> f) {
    keys[prefix + "." + key] = [member, f](ExperimentConfig& c, const std::string& v) { f(c.*member, v); };
  };
  on("name", [](DomainSpec& d, const std::string& v) { d.name = v; });
  on("cav_min", [](DomainSpec& d, const std::string& v) { d.cav_min = static_cast<int>(parse_int(v)); });
  on("cav_max", [](DomainSpec& d, const std::string& v) { d.cav_max = static_cast<int>(parse_int(v)); });
  on("infrastructure", [](DomainSpec& d, const std::string& v) { d.includes_infrastructure = parse_bool(v); });
  on("vehicle_density", [](DomainSpec& d, const std::string& v) { d.vehicle_density = parse_double(v); });
  on("road_width", [](DomainSpec& d, const std::string& v) { d.road_width = parse_double(v); });
  on("ray_count", [](DomainSpec& d, const std::string& v) { d.ray_count = positive_int(v); });
  on("range_noise_sigma", [](DomainSpec& d, const std::string& v) { d.range_noise_sigma = parse_double(v); });
  on("dropout_prob", [](DomainSpec& d, const std::string& v) { d.dropout_prob = unit_interval(v); });
  on("max_range", [](DomainSpec& d, const std::string& v) { d.max_range = parse_double(v); });
}

const std::map<std::string, Setter>& config_keys() {
  static const std::map<std::string, Setter> keys = [] {
    std::map<std::string, Setter> k;
    add_domain_keys(k, "domain_a", &ExperimentConfig::domain_a);
    add_domain_keys(k, "domain_b", &ExperimentConfig::domain_b);
    k["ego_domain"] = [](ExperimentConfig& c, const std::string& v) {
      if (v != "a" && v != "b") bad_value(v, "a or b");
      c.ego_domain = v;
    };
    k["grid.x_min"] = [](ExperimentConfig& c, const std::string& v) { c.grid.x_min = parse_double(v); };
    k["grid.x_max"] = [](ExperimentConfig& c, const std::string& v) { c.grid.x_max = parse_double(v); };
    k["grid.y_min"] = [](ExperimentConfig& c, const std::string& v) { c.grid.y_min = parse_double(v); };
    k["grid.y_max"] = [](ExperimentConfig& c, const std::string& v) { c.grid.y_max = parse_double(v); };
    k["grid.nx"] = [](ExperimentConfig& c, const std::string& v) { c.grid.nx = positive_int(v); };
    k["grid.ny"] = [](ExperimentConfig& c, const std::string& v) { c.grid.ny = positive_int(v); };
    k["encoder.hidden"] = [](ExperimentConfig& c, const std::string& v) { c.encoder.hidden = positive_int(v); };
    k["encoder.channels"] = [](ExperimentConfig& c, const std::string& v) { c.encoder.channels = positive_int(v); };
    k["mmd.bandwidth"] = [](ExperimentConfig& c, const std::string& v) {
      if (v == "median") {
        c.mmd.bandwidth = MmdConfig::Bandwidth::median;
      } else if (v == "fixed") {
        c.mmd.bandwidth = MmdConfig::Bandwidth::fixed;
      } else {
        bad_value(v, "median or fixed");
      }
    };
    k["mmd.sigma"] = [](ExperimentConfig& c, const std::string& v) { c.mmd.sigma = parse_double(v); };
    k["mmd.samples"] = [](ExperimentConfig& c, const std::string& v) { c.mmd.samples = positive_int(v); };
    k["mmd.seed"] = [](ExperimentConfig& c, const std::string& v) { c.mmd.seed = parse_u64(v); };
    k["mmd.ego_gradient"] = [](ExperimentConfig& c, const std::string& v) { c.mmd.ego_gradient = parse_bool(v); };
    k["mmd.per_cav"] = [](ExperimentConfig& c, const std::string& v) { c.mmd.per_cav = parse_bool(v); };
    k["optim.lr"] = [](ExperimentConfig& c, const std::string& v) { c.adam.lr = parse_double(v); };
    k["optim.beta1"] = [](ExperimentConfig& c, const std::string& v) { c.adam.beta1 = unit_interval(v); };
    k["optim.beta2"] = [](ExperimentConfig& c, const std::string& v) { c.adam.beta2 = unit_interval(v); };
    k["optim.eps"] = [](ExperimentConfig& c, const std::string& v) { c.adam.eps = parse_double(v); };
    k["optim.weight_decay"] = [](ExperimentConfig& c, const std::string& v) { c.adam.weight_decay = parse_double(v); };
    k["optim.decay_period"] = [](ExperimentConfig& c, const std::string& v) { c.decay_period = positive_int(v); };
    k["optim.decay_factor"] = [](ExperimentConfig& c, const std::string& v) { c.decay_factor = parse_double(v); };
    k["train.pretrain_epochs"] = [](ExperimentConfig& c, const std::string& v) { c.pretrain_epochs = positive_int(v); };
    k["train.coop_epochs"] = [](ExperimentConfig& c, const std::string& v) { c.coop_epochs = positive_int(v); };
    k["train.batch_size"] = [](ExperimentConfig& c, const std::string& v) { c.batch_size = positive_int(v); };
    k["loss.lambda"] = [](ExperimentConfig& c, const std::string& v) { c.lambda = unit_interval(v); };
    k["loss.omega"] = [](ExperimentConfig& c, const std::string& v) { c.omega = unit_interval(v); };
    k["loss.focal_alpha"] = [](ExperimentConfig& c, const std::string& v) { c.focal.alpha = unit_interval(v); };
    k["loss.focal_gamma"] = [](ExperimentConfig& c, const std::string& v) { c.focal.gamma = parse_double(v); };
    k["eval.score_threshold"] = [](ExperimentConfig& c, const std::string& v) { c.score_threshold = unit_interval(v); };
    k["eval.nms_threshold"] = [](ExperimentConfig& c, const std::string& v) { c.nms_threshold = unit_interval(v); };
    k["data.n_train"] = [](ExperimentConfig& c, const std::string& v) { c.n_train = positive_int(v); };
    k["data.n_val"] = [](ExperimentConfig& c, const std::string& v) { c.n_val = positive_int(v); };
    k["data.n_test"] = [](ExperimentConfig& c, const std::string& v) { c.n_test = positive_int(v); };
    k["data.seed"] = [](ExperimentConfig& c, const std::string& v) { c.data_seed = parse_u64(v); };
    k["stats.max_vectors"] = [](ExperimentConfig& c, const std::string& v) { c.stats_max_vectors = positive_int(v); };
    k["scenario"] = [](ExperimentConfig& c, const std::string& v) { c.scenario = parse_scenario(v); };
    k["seed"] = [](ExperimentConfig& c, const std::string& v) { c.seed = parse_u64(v); };
    k["work_dir"] = [](ExperimentConfig& c, const std::string& v) { c.work_dir = v; };
    return k;
  }();
  return keys;
}

}  // namespace

ExperimentConfig experiment_config_from(const ConfigFile& file, const std::filesystem::path& base_dir) {
  ExperimentConfig cfg;
  const auto& keys = config_keys();
  for (const auto& [key, value] : file.values) {
    const auto line = file.lines.count(key) ? file.lines.at(key) : 0;
    const std::string where = "config line " + std::to_string(line) + ": ";
    const auto it = keys.find(key);
    if (it == keys.end()) throw ConfigError(where + "unknown key '" + key + "'");
    try {
      it->second(cfg, value);
    } catch (const ArgumentError& e) {
      throw ConfigError(where + "key '" + key + "': " + e.what());
    }
  }
  if (cfg.work_dir.is_relative() && !base_dir.empty()) cfg.work_dir = base_dir / cfg.work_dir;
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return cfg;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  return experiment_config_from(read_config(path), path.parent_path());
}

// --- metrics ----------------------------------------------------------------

namespace {

using nlohmann::json;

json stats_json(const FeatureStatistics& s) {
  return {{"ego_mean", s.ego_mean},       {"ego_variance", s.ego_variance}, {"cav_mean", s.cav_mean},
          {"cav_variance", s.cav_variance}, {"mmd2", s.mmd2},              {"ego_vectors", s.ego_vectors},
          {"cav_vectors", s.cav_vectors}};
}

FeatureStatistics stats_from(const json& j) {
  FeatureStatistics s;
  s.ego_mean = j.at("ego_mean").get<double>();
  s.ego_variance = j.at("ego_variance").get<double>();
  s.cav_mean = j.at("cav_mean").get<double>();
  s.cav_variance = j.at("cav_variance").get<double>();
  s.mmd2 = j.at("mmd2").get<double>();
  s.ego_vectors = j.at("ego_vectors").get<std::size_t>();
  s.cav_vectors = j.at("cav_vectors").get<std::size_t>();
  return s;
}

}  // namespace

bool MetricsReport::operator==(const MetricsReport& o) const {
  return scenario == o.scenario && seed == o.seed && ap50 == o.ap50 && ap70 == o.ap70 &&
         initial_ap50 == o.initial_ap50 && initial_ap70 == o.initial_ap70 && train_loss == o.train_loss &&
         val_loss == o.val_loss && stats_before == o.stats_before && stats_after == o.stats_after;
}

std::string metrics_json(const MetricsReport& r) {
  json j;
  j["scenario"] = to_string(r.scenario);
  j["seed"] = r.seed;
  j["ap50"] = r.ap50;
  j["ap70"] = r.ap70;
  j["initial_ap50"] = r.initial_ap50;
  j["initial_ap70"] = r.initial_ap70;
  j["train_loss"] = r.train_loss;
  j["val_loss"] = r.val_loss;
  j["features_before"] = stats_json(r.stats_before);
  j["features_after"] = stats_json(r.stats_after);
  return j.dump(2) + "\n";
}

MetricsReport parse_metrics_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    MetricsReport r;
    r.scenario = parse_scenario(j.at("scenario").get<std::string>());
    r.seed = j.at("seed").get<std::uint64_t>();
    r.ap50 = j.at("ap50").get<double>();
    r.ap70 = j.at("ap70").get<double>();
    r.initial_ap50 = j.at("initial_ap50").get<double>();
    r.initial_ap70 = j.at("initial_ap70").get<double>();
    r.train_loss = j.at("train_loss").get<std::vector<double>>();
    r.val_loss = j.at("val_loss").get<std::vector<double>>();
    r.stats_before = stats_from(j.at("features_before"));
    r.stats_after = stats_from(j.at("features_after"));
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("metrics: ") + e.what());
  }
}

void write_metrics(const std::filesystem::path& path, const MetricsReport& r) {
  write_text(path, metrics_json(r));
  // Timing lives beside the report so the report itself stays reproducible.
  auto timing = path;
  timing.replace_extension(".timing.json");
  write_text(timing, json{{"scenario", to_string(r.scenario)}, {"wall_seconds", r.wall_seconds}}.dump(2) + "\n");
}

std::string comparison_table(const std::vector<MetricsReport>& reports) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof line, "%-15s %6s %8s %8s %12s %12s\n", "scenario", "seed", "AP@0.5", "AP@0.7",
                "MMD2 before", "MMD2 after");
  out << line;
  for (const auto& r : reports) {
    std::snprintf(line, sizeof line, "%-15s %6llu %8.2f %8.2f %12.5f %12.5f\n", to_string(r.scenario).c_str(),
                  static_cast<unsigned long long>(r.seed), 100.0 * r.ap50, 100.0 * r.ap70, r.stats_before.mmd2,
                  r.stats_after.mmd2);
    out << line;
  }
  return out.str();
}

}  // namespace fda
