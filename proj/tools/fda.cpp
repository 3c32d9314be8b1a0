// Command-line driver: dataset generation, training phases, evaluation and dumps.

#include <cstdio>
#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "fda/experiment.hpp"
#include "fda/io.hpp"

namespace {

using namespace fda;

struct UsageError : Error {
  using Error::Error;
};

const DomainSpec& pick_domain(const ExperimentConfig& cfg, const std::string& which) {
  if (which == "a" || which == cfg.domain_a.name) return cfg.domain_a;
  if (which == "b" || which == cfg.domain_b.name) return cfg.domain_b;
  throw UsageError("unknown domain '" + which + "' (expected a, b, " + cfg.domain_a.name + " or " +
                   cfg.domain_b.name + ")");
}

Pipeline::Logger logger(bool quiet) {
  if (quiet) return {};
  return [](const std::string& msg) { std::cerr << "[fda] " << msg << "\n"; };
}

std::size_t frame_at(const Dataset& d, long index) {
  if (index < 0 || static_cast<std::size_t>(index) >= d.frames.size()) {
    throw UsageError("frame index " + std::to_string(index) + " out of range [0," + std::to_string(d.frames.size()) +
                     ")");
  }
  return static_cast<std::size_t>(index);
}

bool is_coop(const Checkpoint& c) {
  for (const auto& e : c.entries) {
    if (e.name.rfind("ego_encoder.", 0) == 0) return true;
  }
  return false;
}

void print_ap(const std::string& label, const ApPair& ap) {
  std::printf("%s AP@0.5 %.4f AP@0.7 %.4f\n", label.c_str(), ap.ap50, ap.ap70);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cooperative BEV detection with feature distribution alignment"};
  app.require_subcommand(1);
  bool quiet = false;
  int threads = 0;
  app.add_flag("-q,--quiet", quiet, "Suppress progress messages");
  app.add_option("--threads", threads, "Worker threads (overrides FDA_THREADS)")->check(CLI::PositiveNumber);

  std::string config, domain, split, scenario, checkpoint, dataset, out;
  long index = 0;
  std::optional<long> channel;

  auto* gen = app.add_subcommand("gen-data", "Generate one dataset split");
  gen->add_option("config", config)->required();
  gen->add_option("domain", domain)->required();
  gen->add_option("split", split)->required();

  auto* pretrain = app.add_subcommand("pretrain", "Train a single-agent encoder for a domain");
  pretrain->add_option("config", config)->required();
  pretrain->add_option("domain", domain)->required();

  auto* run = app.add_subcommand("run", "Run one scenario and write its metrics");
  run->add_option("config", config)->required();
  run->add_option("scenario", scenario)->required();
  run->add_option("-o,--out", out, "Metrics path (default under the work directory)");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a split of the ego domain");
  eval->add_option("config", config)->required();
  eval->add_option("checkpoint", checkpoint)->required();
  eval->add_option("split", split)->required();

  auto* ablate = app.add_subcommand("ablate", "Run all scenarios and write a comparison table");
  ablate->add_option("config", config)->required();

  auto* dump = app.add_subcommand("dump-features", "Write feature heatmaps of one test frame");
  dump->add_option("config", config)->required();
  dump->add_option("checkpoint", checkpoint)->required();
  dump->add_option("frame-index", index)->required();
  dump->add_option("-c,--channel", channel, "Channel to render (default: per-location L2 norm)");
  dump->add_option("-o,--out", out, "Output directory");

  auto* render = app.add_subcommand("render-scene", "Render one dataset frame as SVG");
  render->add_option("dataset", dataset)->required();
  render->add_option("frame-index", index)->required();
  render->add_option("-o,--out", out, "Output path (default scene_<index>.svg)");
  render->add_option("--config", config, "Config for overlaying predictions");
  render->add_option("--checkpoint", checkpoint, "Cooperative checkpoint for overlaying predictions");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  if (threads > 0) setenv("FDA_THREADS", std::to_string(threads).c_str(), 1);

  try {
    if (*gen) {
      const ExperimentConfig cfg = load_experiment_config(config);
      const DomainSpec& d = pick_domain(cfg, domain);
      Pipeline p(cfg, true, logger(quiet));
      const Split s = parse_split(split);
      const Dataset& ds = p.dataset(d, s);
      std::printf("%s: %zu frames\n", p.dataset_path(d, s).string().c_str(), ds.frames.size());
    } else if (*pretrain) {
      const ExperimentConfig cfg = load_experiment_config(config);
      const DomainSpec& d = pick_domain(cfg, domain);
      Pipeline p(cfg, true, logger(quiet));
      const SingleAgentModel& m = p.pretrained(d);
      for (std::size_t e = 0; e < m.train_loss.size(); ++e) std::printf("epoch %zu loss %.6f\n", e, m.train_loss[e]);
      print_ap(d.name + " single-agent test", average_precisions(detect_single_agent(m, p.dataset(d, Split::test), cfg)));
      std::printf("checkpoint %s\n", p.pretrained_path(d).string().c_str());
    } else if (*run) {
      const ExperimentConfig cfg = load_experiment_config(config);
      const Scenario s = parse_scenario(scenario);
      Pipeline p(cfg, true, logger(quiet));
      p.set_require_pretrained(true);
      const MetricsReport& r = p.scenario(s).report;
      if (!out.empty()) write_metrics(out, r);
      print_ap(to_string(s), {r.ap50, r.ap70});
      std::printf("metrics %s\n", (out.empty() ? p.metrics_path(s) : std::filesystem::path(out)).string().c_str());
    } else if (*eval) {
      const ExperimentConfig cfg = load_experiment_config(config);
      const Checkpoint c = read_checkpoint(checkpoint);
      Pipeline p(cfg, true, logger(quiet));
      const Split s = parse_split(split);
      if (is_coop(c)) {
        print_ap("coop " + split, average_precisions(detect_coop(coop_from_checkpoint(c), p.dataset(cfg.ego_spec(), s), cfg)));
      } else {
        const SingleAgentModel m = single_agent_from_checkpoint(c);
        const DomainSpec& d = pick_domain(cfg, m.domain);
        print_ap(m.domain + " single-agent " + split, average_precisions(detect_single_agent(m, p.dataset(d, s), cfg)));
      }
    } else if (*ablate) {
      const ExperimentConfig cfg = load_experiment_config(config);
      Pipeline p(cfg, true, logger(quiet));
      std::vector<MetricsReport> reports;
      for (Scenario s : kAllScenarios) reports.push_back(p.scenario(s).report);
      const std::string table = comparison_table(reports);
      const auto path = p.metrics_path(Scenario::no_dist).parent_path() / "comparison.txt";
      write_text(path, table);
      std::fputs(table.c_str(), stdout);
      std::printf("table %s\n", path.string().c_str());
    } else if (*dump) {
      const ExperimentConfig cfg = load_experiment_config(config);
      const Checkpoint c = read_checkpoint(checkpoint);
      if (!is_coop(c)) throw UsageError("dump-features needs a cooperative checkpoint");
      const CoopModel m = coop_from_checkpoint(c);
      Pipeline p(cfg, true, logger(quiet));
      const Dataset& test = p.dataset(cfg.ego_spec(), Split::test);
      const Scene& frame = test.frames[frame_at(test, index)];
      const std::filesystem::path dir =
          out.empty() ? cfg.work_dir / "features" /
                            (std::filesystem::path(checkpoint).stem().string() + "_" + std::to_string(index))
                      : std::filesystem::path(out);
      const std::optional<Index> ch = channel ? std::optional<Index>(*channel) : std::nullopt;
      const auto maps = agent_features(m, frame, cfg);
      for (std::size_t a = 0; a < maps.size(); ++a) {
        dump_feature_heatmap(maps[a], ch, dir / (a == 0 ? std::string("ego.pgm") : "cav" + std::to_string(a) + ".pgm"));
      }
      dump_feature_heatmap(fused_features(m, frame, cfg), ch, dir / "fused.pgm");
      std::printf("wrote %zu heatmaps to %s\n", maps.size() + 1, dir.string().c_str());
    } else if (*render) {
      const Dataset d = read_dataset(dataset);
      const Scene& frame = d.frames[frame_at(d, index)];
      std::vector<BevBox> predictions;
      const bool overlay = !checkpoint.empty();
      if (overlay) {
        if (config.empty()) throw UsageError("--checkpoint requires --config");
        const ExperimentConfig cfg = load_experiment_config(config);
        const Checkpoint c = read_checkpoint(checkpoint);
        if (!is_coop(c)) throw UsageError("render-scene overlays need a cooperative checkpoint");
        Dataset one{d.domain, d.split, {frame}};
        predictions = detect_coop(coop_from_checkpoint(c), one, cfg).predictions.front();
      }
      const std::filesystem::path path = out.empty() ? "scene_" + std::to_string(index) + ".svg" : out;
      render_scene_svg(frame, overlay ? &predictions : nullptr, path);
      std::printf("wrote %s\n", path.string().c_str());
    }
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const ArgumentError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
