#include "fda/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <numeric>
#include <random>

#include "fda/eval.hpp"
#include "fda/geometry.hpp"
#include "fda/parallel.hpp"

namespace fda {

Scenario parse_scenario(const std::string& s) {
  for (Scenario sc : kAllScenarios) {
    if (to_string(sc) == s) return sc;
  }
  throw ArgumentError("unknown scenario '" + s +
                      "' (expected no_dist, dist, dist_finetune, dist_fda, ablate_lfcm or ablate_dscm)");
}

std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::no_dist: return "no_dist";
    case Scenario::dist: return "dist";
    case Scenario::dist_finetune: return "dist_finetune";
    case Scenario::dist_fda: return "dist_fda";
    case Scenario::ablate_lfcm: return "ablate_lfcm";
    case Scenario::ablate_dscm: return "ablate_dscm";
  }
  return "?";
}

void ExperimentConfig::validate() const {
  domain_a.validate();
  domain_b.validate();
  if (domain_a.name == domain_b.name) throw ArgumentError("domains need distinct names");
  if (ego_domain != "a" && ego_domain != "b") throw ArgumentError("ego_domain must be 'a' or 'b'");
  grid.validate();
  if (encoder.hidden <= 0 || encoder.channels <= 0) throw ArgumentError("encoder widths must be positive");
  mmd.validate();
  if (!(adam.lr > 0)) throw ArgumentError("learning rate must be positive");
  if (decay_period <= 0 || !(decay_factor > 0)) throw ArgumentError("decay period and factor must be positive");
  if (pretrain_epochs <= 0 || coop_epochs <= 0) throw ArgumentError("epochs must be positive");
  if (batch_size <= 0) throw ArgumentError("batch size must be positive");
  LossWeights{lambda, omega}.validate();
  if (!(score_threshold >= 0 && score_threshold <= 1)) throw ArgumentError("score threshold must lie in [0,1]");
  if (!(nms_threshold >= 0 && nms_threshold <= 1)) throw ArgumentError("nms threshold must lie in [0,1]");
  if (n_train == 0 || n_val == 0 || n_test == 0) throw ArgumentError("dataset sizes must be positive");
  if (stats_max_vectors < 2) throw ArgumentError("stats max vectors must be at least 2");
}

std::uint64_t ExperimentConfig::dataset_seed(const DomainSpec& domain) const {
  return mix_seed(data_seed, hash_name(domain.name));
}

// --- checkpoints ------------------------------------------------------------

namespace {

void append(Checkpoint& dst, const Checkpoint& src) {
  dst.entries.insert(dst.entries.end(), src.entries.begin(), src.entries.end());
}

std::string domain_of(const Checkpoint& c) {
  for (const auto& e : c.entries) {
    const auto pos = e.name.find(".encoder.");
    if (pos != std::string::npos) return e.name.substr(0, pos);
  }
  throw FormatError("checkpoint has no encoder entries");
}

}  // namespace

Checkpoint to_checkpoint(const SingleAgentModel& m) {
  Checkpoint c = Checkpoint::from(m.encoder, m.domain + ".encoder.");
  append(c, Checkpoint::from(m.head, m.domain + ".head."));
  return c;
}

SingleAgentModel single_agent_from_checkpoint(const Checkpoint& c) {
  SingleAgentModel m;
  m.domain = domain_of(c);
  m.encoder = c.to<float>(m.domain + ".encoder.");
  m.head = c.to<float>(m.domain + ".head.");
  return m;
}

Checkpoint to_checkpoint(const CoopModel& m) {
  Checkpoint c = Checkpoint::from(m.ego_encoder, "ego_encoder.");
  append(c, Checkpoint::from(m.cav_encoder, "cav_encoder."));
  append(c, Checkpoint::from(m.head, "head."));
  append(c, Checkpoint::from(m.lfcm, "lfcm."));
  return c;
}

CoopModel coop_from_checkpoint(const Checkpoint& c) {
  CoopModel m{c.to<float>("ego_encoder."), c.to<float>("cav_encoder."), c.to<float>("head."), c.to<float>("lfcm.")};
  if (m.ego_encoder.size() == 0 || m.head.size() == 0) throw FormatError("checkpoint is not a cooperative model");
  return m;
}

// --- shared helpers ---------------------------------------------------------

std::vector<BevBox> ego_ground_truth(const Scene& scene, const GridSpec& grid) {
  std::vector<BevBox> out;
  for (const BevBox& b : scene.gt_boxes) {
    BevBox local = to_frame(b, scene.ego_pose);
    if (grid.contains(local.cx, local.cy)) out.push_back(local);
  }
  return out;
}

namespace {

using Params = ParameterSet<float>;
using Map = FeatureMap<float>;

std::vector<Tensor<float>> gradients(const Tape<float>& tape, const Params& tracked) {
  std::vector<Tensor<float>> g;
  g.reserve(tracked.size());
  for (std::size_t i = 0; i < tracked.size(); ++i) g.push_back(tape.grad(tracked.value(i)));
  return g;
}

std::vector<std::size_t> shuffled(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  return order;
}

Map ego_feature(const Scene& s, const Params& encoder, const GridSpec& grid) {
  return encode(pillarize<float>(s.observations.at(0), grid), encoder, grid, "ego");
}

std::vector<Map> cav_features(const Scene& s, const Params& encoder, const GridSpec& grid) {
  std::vector<Map> out;
  for (std::size_t a = 1; a < s.agent_count(); ++a) {
    const PointCloud cloud = project_to_ego(s.observations.at(a), s.agent_pose(a), s.ego_pose);
    out.push_back(encode(pillarize<float>(cloud, grid), encoder, grid, "cav" + std::to_string(a)));
  }
  return out;
}

std::vector<Map> compensate(const std::vector<Map>& cavs, const Params& lfcm) {
  if (lfcm.size() == 0) return cavs;
  std::vector<Map> out;
  for (const Map& f : cavs) out.push_back(lfcm_forward(f, lfcm).compensated);
  return out;
}

std::vector<DetectionTargets<float>> all_targets(const Dataset& d, const GridSpec& grid) {
  std::vector<DetectionTargets<float>> t(d.frames.size());
  parallel_for(t.size(), [&](std::size_t i) { t[i] = encode_targets<float>(ego_ground_truth(d.frames[i], grid), grid); });
  return t;
}

FrameBoxes postprocess(const HeadOutput<float>& head, const ExperimentConfig& cfg) {
  return nms(decode_boxes(head, cfg.grid, cfg.score_threshold), cfg.nms_threshold);
}

void check_finite(double loss, const std::string& phase, int epoch) {
  if (!std::isfinite(loss)) {
    throw TrainingError(phase + ": loss diverged (non-finite) in epoch " + std::to_string(epoch));
  }
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

// --- single agent -----------------------------------------------------------

SingleAgentModel train_single_agent_model(const Dataset& train, const Dataset* val, const ExperimentConfig& cfg) {
  cfg.validate();
  if (train.frames.empty()) throw ArgumentError("train_single_agent: empty training split");
  const std::uint64_t s = mix_seed(cfg.seed, hash_name("pretrain." + train.domain));
  SingleAgentModel m{train.domain, make_encoder_params<float>(mix_seed(s, 1), cfg.encoder),
                     make_head_params<float>(cfg.encoder.channels, mix_seed(s, 2)), {}, {}};
  const auto targets = all_targets(train, cfg.grid);
  AdamState<float> enc_opt(cfg.adam), head_opt(cfg.adam);
  std::mt19937_64 rng(mix_seed(s, 3));
  const std::string phase = "pretrain " + train.domain;

  for (int epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
    enc_opt.apply_step_decay(epoch, cfg.decay_period, cfg.decay_factor);
    head_opt.apply_step_decay(epoch, cfg.decay_period, cfg.decay_factor);
    const auto order = shuffled(train.frames.size(), rng);
    double epoch_loss = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(cfg.batch_size));
      Tape<float> tape;
      const Params enc = m.encoder.track(tape);
      const Params head = m.head.track(tape);
      std::optional<Tensor<float>> sum;
      for (std::size_t k = b0; k < b1; ++k) {
        const std::size_t i = order[k];
        const Map f = ego_feature(train.frames[i], enc, cfg.grid);
        Tensor<float> l = detection_loss(detect_head(f, head), targets[i], cfg.focal);
        sum = sum ? add(*sum, l) : l;
      }
      const Tensor<float> loss = mul_scalar(*sum, 1.0f / static_cast<float>(b1 - b0));
      check_finite(loss.item(), phase, epoch);
      epoch_loss += static_cast<double>(loss.item()) * static_cast<double>(b1 - b0);
      tape.backward(loss);
      enc_opt.update(m.encoder, gradients(tape, enc));
      head_opt.update(m.head, gradients(tape, head));
    }
    m.train_loss.push_back(epoch_loss / static_cast<double>(order.size()));
    if (val && !val->frames.empty()) {
      const auto vt = all_targets(*val, cfg.grid);
      std::vector<double> losses(val->frames.size());
      parallel_for(losses.size(), [&](std::size_t i) {
        const Map f = ego_feature(val->frames[i], m.encoder, cfg.grid);
        losses[i] = detection_loss(detect_head(f, m.head), vt[i], cfg.focal).item();
      });
      m.val_loss.push_back(mean_of(losses));
    }
  }
  return m;
}

Checkpoint train_single_agent(const Dataset& train, const ExperimentConfig& cfg) {
  return to_checkpoint(train_single_agent_model(train, nullptr, cfg));
}

Detections detect_single_agent(const SingleAgentModel& m, const Dataset& frames, const ExperimentConfig& cfg) {
  Detections d{std::vector<FrameBoxes>(frames.frames.size()), std::vector<FrameBoxes>(frames.frames.size())};
  parallel_for(frames.frames.size(), [&](std::size_t i) {
    const Scene& s = frames.frames[i];
    d.predictions[i] = postprocess(detect_head(ego_feature(s, m.encoder, cfg.grid), m.head), cfg);
    d.ground_truth[i] = ego_ground_truth(s, cfg.grid);
  });
  return d;
}

// --- cooperative ------------------------------------------------------------

std::vector<Map> agent_features(const CoopModel& m, const Scene& frame, const ExperimentConfig& cfg) {
  std::vector<Map> out{ego_feature(frame, m.ego_encoder, cfg.grid)};
  for (Map& f : compensate(cav_features(frame, m.cav_encoder, cfg.grid), m.lfcm)) out.push_back(std::move(f));
  return out;
}

FeatureMap<float> fused_features(const CoopModel& m, const Scene& frame, const ExperimentConfig& cfg) {
  std::vector<Map> maps = agent_features(m, frame, cfg);
  const Map ego = maps.front();
  maps.erase(maps.begin());
  return attention_fuse(ego, maps);
}

Detections detect_coop(const CoopModel& m, const Dataset& frames, const ExperimentConfig& cfg) {
  Detections d{std::vector<FrameBoxes>(frames.frames.size()), std::vector<FrameBoxes>(frames.frames.size())};
  parallel_for(frames.frames.size(), [&](std::size_t i) {
    const Scene& s = frames.frames[i];
    d.predictions[i] = postprocess(detect_head(fused_features(m, s, cfg), m.head), cfg);
    d.ground_truth[i] = ego_ground_truth(s, cfg.grid);
  });
  return d;
}

ApPair average_precisions(const Detections& d) {
  return {evaluate_ap(d.predictions, d.ground_truth, 0.5), evaluate_ap(d.predictions, d.ground_truth, 0.7)};
}

FeatureStatistics feature_statistics(const CoopModel& m, const Dataset& frames, const ExperimentConfig& cfg) {
  const std::size_t n = frames.frames.size();
  const Index c = cfg.encoder.channels;
  struct PerFrame {
    std::vector<float> ego, cav;  // sampled vectors, row-major
    double ego_sum = 0, ego_sq = 0, cav_sum = 0, cav_sq = 0;
    double ego_count = 0, cav_count = 0;
  };
  std::vector<PerFrame> per(n);
  const std::uint64_t seed = mix_seed(cfg.seed, hash_name("feature_statistics"));
  parallel_for(n, [&](std::size_t i) {
    const std::vector<Map> maps = agent_features(m, frames.frames[i], cfg);
    const Index hw = maps.front().height() * maps.front().width();
    // All agents of a frame share one location sample.
    const auto pos = sample_positions(hw, cfg.mmd.samples, mix_seed(seed, i));
    PerFrame& pf = per[i];
    for (std::size_t a = 0; a < maps.size(); ++a) {
      const auto& t = maps[a].tensor;
      auto& rows = a == 0 ? pf.ego : pf.cav;
      for (Index p : pos) {
        for (Index k = 0; k < c; ++k) rows.push_back(t[k * hw + p]);
      }
      const auto values = t.data().template cast<double>();
      (a == 0 ? pf.ego_sum : pf.cav_sum) += values.sum();
      (a == 0 ? pf.ego_sq : pf.cav_sq) += values.square().sum();
      (a == 0 ? pf.ego_count : pf.cav_count) += static_cast<double>(t.size());
    }
  });

  FeatureStatistics st;
  std::vector<float> ego, cav;
  double es = 0, eq = 0, en = 0, cs = 0, cq = 0, cn = 0;
  for (const PerFrame& pf : per) {
    ego.insert(ego.end(), pf.ego.begin(), pf.ego.end());
    cav.insert(cav.end(), pf.cav.begin(), pf.cav.end());
    es += pf.ego_sum, eq += pf.ego_sq, en += pf.ego_count;
    cs += pf.cav_sum, cq += pf.cav_sq, cn += pf.cav_count;
  }
  if (en > 0) {
    st.ego_mean = es / en;
    st.ego_variance = std::max(0.0, eq / en - st.ego_mean * st.ego_mean);
  }
  if (cn > 0) {
    st.cav_mean = cs / cn;
    st.cav_variance = std::max(0.0, cq / cn - st.cav_mean * st.cav_mean);
  }
  auto pool = [&](const std::vector<float>& rows, std::uint64_t stream) {
    const Index total = static_cast<Index>(rows.size()) / c;
    std::vector<Index> pick(static_cast<std::size_t>(total));
    std::iota(pick.begin(), pick.end(), Index{0});
    if (total > cfg.stats_max_vectors) {
      pick = sample_positions(total, cfg.stats_max_vectors, mix_seed(seed, stream));
      std::sort(pick.begin(), pick.end());
    }
    Tensor<double> t({static_cast<Index>(pick.size()), c});
    for (std::size_t r = 0; r < pick.size(); ++r) {
      for (Index k = 0; k < c; ++k) t[static_cast<Index>(r) * c + k] = rows[static_cast<std::size_t>(pick[r] * c + k)];
    }
    return FeatureVectorSet<double>{t};
  };
  const auto xs = pool(ego, 0x1000);
  st.ego_vectors = static_cast<std::size_t>(xs.vectors.dim(0));
  if (cav.empty() || ego.empty()) return st;
  const auto ys = pool(cav, 0x2000);
  st.cav_vectors = static_cast<std::size_t>(ys.vectors.dim(0));
  MmdConfig mc = cfg.mmd;
  mc.seed = seed;
  st.mmd2 = std::max(0.0, mmd2(xs, ys, mc).item());
  return st;
}

namespace {

struct PhasePlan {
  std::string name;
  bool train_ego = false;
  bool train_lfcm = false;
  double omega = 0.0;
  bool mmd_ego_gradient = false;
};

/// One cooperative training phase. CAV encoders are always frozen; their
/// features are computed once.
void train_coop(CoopModel& m, const PhasePlan& plan, const Dataset& train, const Dataset* val,
                const ExperimentConfig& cfg, MetricsReport& report) {
  const std::size_t n = train.frames.size();
  const auto targets = all_targets(train, cfg.grid);
  std::vector<std::vector<Map>> cav_cache(n);
  std::vector<std::optional<Map>> ego_cache(n);
  parallel_for(n, [&](std::size_t i) {
    cav_cache[i] = cav_features(train.frames[i], m.cav_encoder, cfg.grid);
    if (!plan.train_ego) ego_cache[i] = ego_feature(train.frames[i], m.ego_encoder, cfg.grid);
  });

  AdamState<float> ego_opt(cfg.adam), head_opt(cfg.adam), lfcm_opt(cfg.adam);
  // Every cooperative phase shares one batch order for a given seed.
  std::mt19937_64 rng(mix_seed(cfg.seed, hash_name("coop.order")));
  const bool use_mmd = plan.omega > 0.0;
  long step = 0;

  for (int epoch = 0; epoch < cfg.coop_epochs; ++epoch) {
    for (auto* opt : {&ego_opt, &head_opt, &lfcm_opt}) opt->apply_step_decay(epoch, cfg.decay_period, cfg.decay_factor);
    const auto order = shuffled(n, rng);
    double epoch_loss = 0.0;
    for (std::size_t b0 = 0; b0 < n; b0 += static_cast<std::size_t>(cfg.batch_size), ++step) {
      const std::size_t b1 = std::min(n, b0 + static_cast<std::size_t>(cfg.batch_size));
      Tape<float> tape;
      const Params ego_p = plan.train_ego ? m.ego_encoder.track(tape) : m.ego_encoder;
      const Params head_p = m.head.track(tape);
      const Params lfcm_p = plan.train_lfcm ? m.lfcm.track(tape) : m.lfcm;
      std::optional<Tensor<float>> det_sum;
      std::vector<Map> ego_maps, cav_maps;
      for (std::size_t k = b0; k < b1; ++k) {
        const std::size_t i = order[k];
        const Map ego = plan.train_ego ? ego_feature(train.frames[i], ego_p, cfg.grid) : *ego_cache[i];
        const std::vector<Map> cavs = compensate(cav_cache[i], lfcm_p);
        const Tensor<float> l = detection_loss(detect_head(attention_fuse(ego, cavs), head_p), targets[i], cfg.focal);
        det_sum = det_sum ? add(*det_sum, l) : l;
        if (use_mmd) {
          ego_maps.push_back(ego);
          cav_maps.insert(cav_maps.end(), cavs.begin(), cavs.end());
        }
      }
      Tensor<float> loss = mul_scalar(*det_sum, static_cast<float>(cfg.lambda) / static_cast<float>(b1 - b0));
      if (use_mmd && !cav_maps.empty()) {
        MmdConfig mc = cfg.mmd;
        mc.seed = mix_seed(mix_seed(cfg.seed, cfg.mmd.seed), static_cast<std::uint64_t>(step));
        mc.ego_gradient = plan.mmd_ego_gradient;
        loss = add(loss, mul_scalar(dscm_loss(ego_maps, cav_maps, mc), static_cast<float>(plan.omega)));
      }
      check_finite(loss.item(), plan.name, epoch);
      epoch_loss += static_cast<double>(loss.item()) * static_cast<double>(b1 - b0);
      tape.backward(loss);
      if (plan.train_ego) ego_opt.update(m.ego_encoder, gradients(tape, ego_p));
      head_opt.update(m.head, gradients(tape, head_p));
      if (plan.train_lfcm) lfcm_opt.update(m.lfcm, gradients(tape, lfcm_p));
    }
    report.train_loss.push_back(epoch_loss / static_cast<double>(n));
    if (val && !val->frames.empty()) {
      const auto vt = all_targets(*val, cfg.grid);
      std::vector<double> losses(val->frames.size());
      parallel_for(losses.size(), [&](std::size_t i) {
        const Map fused = fused_features(m, val->frames[i], cfg);
        losses[i] = cfg.lambda * detection_loss(detect_head(fused, m.head), vt[i], cfg.focal).item();
      });
      report.val_loss.push_back(mean_of(losses));
    }
  }
}

}  // namespace

ScenarioResult run_scenario(Scenario scenario, const ExperimentConfig& cfg, const ScenarioInputs& in) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  const std::string name = to_string(scenario);
  if (!in.ego_pretrained) {
    throw DependencyError("scenario " + name + " requires the pretrain phase for " + cfg.ego_spec().name);
  }
  if (scenario != Scenario::no_dist) {
    if (!in.cav_pretrained) {
      throw DependencyError("scenario " + name + " requires the pretrain phase for " + cfg.cav_spec().name);
    }
    if (!in.no_dist) throw DependencyError("scenario " + name + " requires phase no_dist");
  }
  if (!in.train || !in.test) throw DependencyError("scenario " + name + " requires the train and test splits");

  ScenarioResult r;
  r.report.scenario = scenario;
  r.report.seed = cfg.seed;
  CoopModel& m = r.model;
  m.ego_encoder = in.ego_pretrained->encoder;
  if (scenario == Scenario::no_dist) {
    m.cav_encoder = in.ego_pretrained->encoder;
    m.head = make_head_params<float>(cfg.encoder.channels, mix_seed(cfg.seed, hash_name("coop.head")));
  } else {
    m.cav_encoder = in.cav_pretrained->encoder;
    m.head = in.no_dist->head;
  }
  const bool with_lfcm = scenario == Scenario::dist_fda || scenario == Scenario::ablate_lfcm;
  if (with_lfcm) m.lfcm = make_lfcm_params<float>(cfg.encoder.channels, mix_seed(cfg.seed, hash_name("lfcm")));

  const ApPair initial = average_precisions(detect_coop(m, *in.test, cfg));
  r.report.initial_ap50 = initial.ap50;
  r.report.initial_ap70 = initial.ap70;
  r.report.stats_before = feature_statistics(m, *in.test, cfg);

  std::optional<PhasePlan> plan;
  switch (scenario) {
    case Scenario::no_dist: plan = PhasePlan{name}; break;
    case Scenario::dist: break;
    case Scenario::dist_finetune: plan = PhasePlan{name, true}; break;
    case Scenario::dist_fda: plan = PhasePlan{name, true, true, cfg.omega}; break;
    case Scenario::ablate_lfcm: plan = PhasePlan{name, true, true, 0.0}; break;
    case Scenario::ablate_dscm: plan = PhasePlan{name, true, false, cfg.omega, true}; break;
  }
  if (plan) {
    const Params cav_before = m.cav_encoder;
    train_coop(m, *plan, *in.train, in.val, cfg, r.report);
    if (!(m.cav_encoder == cav_before)) throw StateError("scenario " + name + ": CAV encoder changed during training");
    const ApPair final_ap = average_precisions(detect_coop(m, *in.test, cfg));
    r.report.ap50 = final_ap.ap50;
    r.report.ap70 = final_ap.ap70;
    r.report.stats_after = feature_statistics(m, *in.test, cfg);
  } else {
    r.report.ap50 = initial.ap50;
    r.report.ap70 = initial.ap70;
    r.report.stats_after = r.report.stats_before;
  }
  r.report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

// --- pipeline ---------------------------------------------------------------

Pipeline::Pipeline(ExperimentConfig cfg, bool persist, Logger log)
    : cfg_(std::move(cfg)), persist_(persist), log_(std::move(log)) {
  cfg_.validate();
}

void Pipeline::log(const std::string& msg) const {
  if (log_) log_(msg);
}

std::filesystem::path Pipeline::dataset_path(const DomainSpec& domain, Split split) const {
  return cfg_.work_dir / "data" / (domain.name + "_" + to_string(split) + ".fdad");
}

std::filesystem::path Pipeline::pretrained_path(const DomainSpec& domain) const {
  return cfg_.work_dir / "pretrain" / (domain.name + "_seed" + std::to_string(cfg_.seed) + ".fdac");
}

std::filesystem::path Pipeline::scenario_checkpoint_path(Scenario s) const {
  return cfg_.work_dir / ("seed" + std::to_string(cfg_.seed)) / (to_string(s) + ".fdac");
}

std::filesystem::path Pipeline::metrics_path(Scenario s) const {
  return cfg_.work_dir / ("seed" + std::to_string(cfg_.seed)) / (to_string(s) + ".json");
}

const Dataset& Pipeline::dataset(const DomainSpec& domain, Split split) {
  const std::string key = domain.name + "/" + to_string(split);
  if (auto it = datasets_.find(key); it != datasets_.end()) return it->second;
  const std::size_t count = split == Split::train ? cfg_.n_train : split == Split::val ? cfg_.n_val : cfg_.n_test;
  const auto path = dataset_path(domain, split);
  const std::uint64_t base = cfg_.dataset_seed(domain);
  if (persist_ && std::filesystem::exists(path)) {
    Dataset d = read_dataset(path);
    if (d.domain == domain.name && d.split == split && d.frames.size() == count &&
        d.frames.front().seed == frame_seed(base, split, 0)) {
      return datasets_[key] = std::move(d);
    }
    log("dataset " + path.string() + " does not match the config; regenerating");
  }
  log("generating " + key + " (" + std::to_string(count) + " frames)");
  Dataset d = generate_split(domain, split, count, base);
  if (persist_) write_dataset(path, d);
  return datasets_[key] = std::move(d);
}

const SingleAgentModel& Pipeline::require_pretrained(const DomainSpec& domain) {
  if (auto it = pretrained_.find(domain.name); it != pretrained_.end()) return it->second;
  const auto path = pretrained_path(domain);
  if (!std::filesystem::exists(path)) {
    throw DependencyError("missing pretrain checkpoint for " + domain.name + " (" + path.string() + ")");
  }
  SingleAgentModel m = single_agent_from_checkpoint(read_checkpoint(path));
  if (m.domain != domain.name) throw DependencyError("checkpoint " + path.string() + " belongs to " + m.domain);
  return pretrained_[domain.name] = std::move(m);
}

const SingleAgentModel& Pipeline::pretrained(const DomainSpec& domain) {
  if (auto it = pretrained_.find(domain.name); it != pretrained_.end()) return it->second;
  if (require_pretrained_ || (persist_ && std::filesystem::exists(pretrained_path(domain)))) {
    return require_pretrained(domain);
  }
  log("pretraining " + domain.name);
  SingleAgentModel m = train_single_agent_model(dataset(domain, Split::train), &dataset(domain, Split::val), cfg_);
  if (persist_) write_checkpoint(pretrained_path(domain), to_checkpoint(m));
  return pretrained_[domain.name] = std::move(m);
}

const ScenarioResult& Pipeline::scenario(Scenario s) {
  if (auto it = scenarios_.find(s); it != scenarios_.end()) return it->second;
  const DomainSpec& ego = cfg_.ego_spec();
  ScenarioInputs in;
  in.ego_pretrained = &pretrained(ego);
  if (s != Scenario::no_dist) {
    in.cav_pretrained = &pretrained(cfg_.cav_spec());
    in.no_dist = &scenario(Scenario::no_dist).model;
  }
  in.train = &dataset(ego, Split::train);
  in.val = &dataset(ego, Split::val);
  in.test = &dataset(ego, Split::test);
  log("running scenario " + to_string(s) + " (seed " + std::to_string(cfg_.seed) + ")");
  ScenarioResult r = run_scenario(s, cfg_, in);
  log(to_string(s) + ": AP@0.5 " + std::to_string(r.report.ap50) + ", AP@0.7 " + std::to_string(r.report.ap70) +
      ", " + std::to_string(r.report.wall_seconds) + " s");
  if (persist_) {
    write_checkpoint(scenario_checkpoint_path(s), to_checkpoint(r.model));
    write_metrics(metrics_path(s), r.report);
  }
  return scenarios_[s] = std::move(r);
}

}  // namespace fda
