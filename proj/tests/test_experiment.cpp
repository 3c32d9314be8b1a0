#include <doctest.h>

#include <filesystem>

#include "fda/experiment.hpp"

using namespace fda;
namespace fs = std::filesystem;

namespace {

/// A ladder small enough to run every scenario in seconds.
ExperimentConfig micro_config() {
  ExperimentConfig cfg;
  cfg.grid = GridSpec{-16.0, 16.0, -8.0, 8.0, 32, 16};
  cfg.encoder = {8, 8};
  cfg.mmd.samples = 16;
  cfg.pretrain_epochs = 2;
  cfg.coop_epochs = 2;
  cfg.batch_size = 2;
  cfg.n_train = 6;
  cfg.n_val = 2;
  cfg.n_test = 4;
  cfg.stats_max_vectors = 128;
  cfg.score_threshold = 0.01;
  for (DomainSpec* d : {&cfg.domain_a, &cfg.domain_b}) d->ray_count = 180;
  return cfg;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fda_test_experiment_" + name);
  fs::remove_all(p);
  return p;
}

std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("scenario names") {
  for (Scenario s : kAllScenarios) CHECK(parse_scenario(to_string(s)) == s);
  CHECK(to_string(Scenario::dist_fda) == "dist_fda");
  CHECK_THROWS_AS(parse_scenario("fda"), ArgumentError);
}

TEST_CASE("config from key-value pairs") {
  const auto cfg = experiment_config_from(parse_config("seed = 3\nloss.omega = 0.5\ndomain_b.ray_count = 90\n"
                                                       "mmd.bandwidth = fixed\nmmd.sigma = 2\nscenario = ablate_dscm\n"
                                                       "work_dir = out\n"),
                                          "/base");
  CHECK(cfg.seed == 3);
  CHECK(cfg.omega == 0.5);
  CHECK(cfg.domain_b.ray_count == 90);
  CHECK(cfg.mmd.bandwidth == MmdConfig::Bandwidth::fixed);
  CHECK(cfg.mmd.sigma == 2.0);
  CHECK(cfg.scenario == Scenario::ablate_dscm);
  CHECK(cfg.work_dir == fs::path("/base/out"));
  CHECK(cfg.n_train == 300);

  auto error = [](const std::string& text) { return message_of([&] { experiment_config_from(parse_config(text)); }); };
  CHECK(error("seed = 1\nbogus.key = 2\n").find("line 2") != std::string::npos);
  CHECK(error("seed = x\n").find("line 1") != std::string::npos);
  CHECK(error("train.batch_size = 2.5\n").find("line 1") != std::string::npos);
  CHECK_THROWS_AS(experiment_config_from(parse_config("data.n_train = 0\n")), ConfigError);
  CHECK_THROWS_AS(experiment_config_from(parse_config("loss.lambda = 2\n")), ConfigError);
  CHECK_THROWS_AS(experiment_config_from(parse_config("ego_domain = c\n")), ConfigError);
}

TEST_CASE("shipped presets parse") {
  const fs::path dir = FDA_PRESET_DIR;
  const ExperimentConfig a = load_experiment_config(dir / "default.cfg");
  const ExperimentConfig b = load_experiment_config(dir / "reverse.cfg");
  CHECK(a.ego_domain == "a");
  CHECK(b.ego_domain == "b");
  CHECK(a.ego_spec().name == b.cav_spec().name);
  CHECK(a.n_train == 300);
  CHECK(a.n_test == 200);
  CHECK(a.work_dir == dir / "fda_work");
}

TEST_CASE("domains use distinct dataset seeds") {
  const ExperimentConfig cfg;
  CHECK(cfg.dataset_seed(cfg.domain_a) != cfg.dataset_seed(cfg.domain_b));
  ExperimentConfig swapped;
  swapped.ego_domain = "b";
  CHECK(swapped.ego_spec().name == "domain_b");
  CHECK(swapped.cav_spec().name == "domain_a");
}

TEST_CASE("metrics JSON round trip excludes wall time") {
  MetricsReport r;
  r.scenario = Scenario::ablate_lfcm;
  r.seed = 4;
  r.ap50 = 0.123456789012345;
  r.ap70 = 1.0 / 3.0;
  r.train_loss = {0.5, 0.25};
  r.stats_after.mmd2 = 1e-7;
  r.stats_after.cav_vectors = 9;
  r.wall_seconds = 12.5;
  const std::string text = metrics_json(r);
  CHECK(text.find("wall") == std::string::npos);
  const MetricsReport back = parse_metrics_json(text);
  CHECK(back == r);
  CHECK(back.wall_seconds == 0.0);
  CHECK(metrics_json(back) == text);
  CHECK_THROWS(parse_metrics_json("{\"scenario\": 1}"));
}

TEST_CASE("comparison table lists every report") {
  MetricsReport a, b;
  a.scenario = Scenario::dist;
  b.scenario = Scenario::dist_fda;
  const std::string t = comparison_table({a, b});
  CHECK(t.find("dist_fda") != std::string::npos);
  CHECK(t.find("AP@0.5") != std::string::npos);
}

TEST_CASE("checkpoint conversions") {
  const auto cfg = micro_config();
  SingleAgentModel m{"domain_a", make_encoder_params<float>(1, cfg.encoder), make_head_params<float>(8, 1), {}, {}};
  const SingleAgentModel back = single_agent_from_checkpoint(to_checkpoint(m));
  CHECK(back.domain == "domain_a");
  CHECK(back.encoder == m.encoder);
  CHECK(back.head == m.head);
  CoopModel c{m.encoder, make_encoder_params<float>(2, cfg.encoder), m.head, make_lfcm_params<float>(8, 3)};
  const CoopModel cb = coop_from_checkpoint(to_checkpoint(c));
  CHECK(cb.ego_encoder == c.ego_encoder);
  CHECK(cb.cav_encoder == c.cav_encoder);
  CHECK(cb.lfcm == c.lfcm);
  CHECK(cb.has_lfcm());
  c.lfcm = {};
  CHECK_FALSE(coop_from_checkpoint(to_checkpoint(c)).has_lfcm());
}

TEST_CASE("single-agent training is deterministic and reduces loss") {
  const auto cfg = micro_config();
  const Dataset train = generate_split(cfg.domain_a, Split::train, cfg.n_train, 7);
  const SingleAgentModel a = train_single_agent_model(train, nullptr, cfg);
  const SingleAgentModel b = train_single_agent_model(train, nullptr, cfg);
  CHECK(a.encoder == b.encoder);
  CHECK(a.train_loss == b.train_loss);
  REQUIRE(a.train_loss.size() == 2);
  CHECK(a.train_loss.back() < a.train_loss.front());
}

TEST_CASE("scenario ladder invariants") {
  const auto cfg = micro_config();
  Pipeline p(cfg, false);
  const auto& no_dist = p.scenario(Scenario::no_dist);
  const auto& dist = p.scenario(Scenario::dist);
  const auto& finetune = p.scenario(Scenario::dist_finetune);
  const auto& fda_run = p.scenario(Scenario::dist_fda);
  const auto& lfcm_only = p.scenario(Scenario::ablate_lfcm);
  const auto& dscm_only = p.scenario(Scenario::ablate_dscm);
  const auto& cav_pre = p.pretrained(cfg.cav_spec());
  const auto& ego_pre = p.pretrained(cfg.ego_spec());

  SUBCASE("no_dist shares the ego encoder") {
    CHECK(no_dist.model.cav_encoder == ego_pre.encoder);
    CHECK(no_dist.model.ego_encoder == ego_pre.encoder);
    CHECK_FALSE(no_dist.model.has_lfcm());
  }
  SUBCASE("CAV encoders stay frozen") {
    for (const auto* r : {&dist, &finetune, &fda_run, &lfcm_only, &dscm_only}) {
      CHECK(r->model.cav_encoder == cav_pre.encoder);
    }
  }
  SUBCASE("dist only evaluates") {
    CHECK(dist.model.head == no_dist.model.head);
    CHECK(dist.report.train_loss.empty());
    CHECK(dist.report.ap50 == dist.report.initial_ap50);
  }
  SUBCASE("FDA starts where fine-tuning starts") {
    CHECK(fda_run.report.initial_ap50 == finetune.report.initial_ap50);
    CHECK(fda_run.report.initial_ap70 == finetune.report.initial_ap70);
    CHECK(fda_run.report.initial_ap50 == dist.report.ap50);
    CHECK(fda_run.report.stats_before == dist.report.stats_after);
  }
  SUBCASE("training phases record one loss per epoch") {
    for (const auto* r : {&no_dist, &finetune, &fda_run, &lfcm_only, &dscm_only}) {
      CHECK(r->report.train_loss.size() == static_cast<std::size_t>(cfg.coop_epochs));
    }
    CHECK(fda_run.model.has_lfcm());
    CHECK(lfcm_only.model.has_lfcm());
    CHECK_FALSE(dscm_only.model.has_lfcm());
  }
  SUBCASE("statistics are populated") {
    CHECK(dist.report.stats_after.mmd2 > 0);
    CHECK(dist.report.stats_after.ego_vectors > 0);
    CHECK(dist.report.stats_after.ego_vectors <= static_cast<std::size_t>(cfg.stats_max_vectors));
  }
}

TEST_CASE("omega = 0 reproduces the LFCM-only ablation") {
  auto cfg = micro_config();
  Pipeline p(cfg, false);
  const MetricsReport lfcm_only = p.scenario(Scenario::ablate_lfcm).report;
  cfg.omega = 0.0;
  Pipeline q(cfg, false);
  MetricsReport fda_run = q.scenario(Scenario::dist_fda).report;
  fda_run.scenario = Scenario::ablate_lfcm;
  CHECK(fda_run == lfcm_only);
}

TEST_CASE("two runs produce identical reports") {
  const auto cfg = micro_config();
  Pipeline p(cfg, false), q(cfg, false);
  for (Scenario s : {Scenario::dist_fda, Scenario::ablate_dscm}) {
    const auto& a = p.scenario(s);
    const auto& b = q.scenario(s);
    CHECK(a.report == b.report);
    CHECK(metrics_json(a.report) == metrics_json(b.report));
    CHECK(a.model.lfcm == b.model.lfcm);
    CHECK(a.model.ego_encoder == b.model.ego_encoder);
  }
}

TEST_CASE("identical models see identical feature statistics on both sides") {
  const auto cfg = micro_config();
  const Dataset frames = generate_split(cfg.domain_a, Split::test, 3, 7);
  const auto enc = make_encoder_params<float>(5, cfg.encoder);
  const CoopModel m{enc, enc, make_head_params<float>(8, 5), {}};
  const auto s = feature_statistics(m, frames, cfg);
  CHECK(s.ego_vectors > 0);
  CHECK(s.cav_vectors > 0);
  CHECK(s.mmd2 >= 0);
  const CoopModel other{enc, make_encoder_params<float>(6, cfg.encoder), m.head, {}};
  CHECK(feature_statistics(other, frames, cfg).mmd2 > s.mmd2);
}

TEST_CASE("persisted pipeline writes and reuses artifacts") {
  auto cfg = micro_config();
  cfg.work_dir = scratch("persist");
  MetricsReport first;
  {
    Pipeline p(cfg, true);
    first = p.scenario(Scenario::dist).report;
    CHECK(fs::exists(p.dataset_path(cfg.domain_a, Split::train)));
    CHECK(fs::exists(p.pretrained_path(cfg.domain_b)));
    CHECK(fs::exists(p.scenario_checkpoint_path(Scenario::no_dist)));
    CHECK(fs::exists(p.metrics_path(Scenario::dist)));
    CHECK(parse_metrics_json(std::string(
              [&] {
                const auto bytes = read_file(p.metrics_path(Scenario::dist));
                return std::string(bytes.begin(), bytes.end());
              }())) == first);
  }
  {
    Pipeline p(cfg, true);
    p.set_require_pretrained(true);
    CHECK(p.scenario(Scenario::dist).report == first);
  }
  fs::remove_all(cfg.work_dir);
}

TEST_CASE("missing pretrained encoders raise a dependency error") {
  auto cfg = micro_config();
  cfg.work_dir = scratch("missing");
  Pipeline p(cfg, true);
  p.set_require_pretrained(true);
  const std::string msg = message_of([&] { p.scenario(Scenario::no_dist); });
  CHECK(msg.find("pretrain") != std::string::npos);
  CHECK_THROWS_AS(p.require_pretrained(cfg.domain_a), DependencyError);
  fs::remove_all(cfg.work_dir);
}

TEST_CASE("run_scenario checks its inputs") {
  const auto cfg = micro_config();
  CHECK_THROWS_AS(run_scenario(Scenario::dist, cfg, {}), DependencyError);
}
