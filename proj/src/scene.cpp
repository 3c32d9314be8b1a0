#include "fda/scene.hpp"

#include <algorithm>
#include <bit>
#include <limits>
#include <numbers>
#include <random>

#include "fda/parameters.hpp"

namespace fda {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kEgoLength = 4.5;
constexpr double kEgoWidth = 2.0;
constexpr double kVehicleHeight = 1.5;
constexpr double kMinGap = 1.0;
constexpr int kPlacementRetries = 200;

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

struct Lane {
  double y;
  double heading;
};

std::vector<Lane> lanes_of(const DomainSpec& d) {
  const int n = std::max(1, static_cast<int>(std::lround(d.road_width / kLaneWidth)));
  const double width = d.road_width / n;
  std::vector<Lane> lanes;
  for (int i = 0; i < n; ++i) {
    const double y = -d.road_width / 2 + (i + 0.5) * width;
    lanes.push_back({y, y < 0 ? 0.0 : kPi});
  }
  return lanes;
}

struct Placed {
  int lane;
  double x;
  double l;
};

bool collides(const std::vector<Placed>& placed, int lane, double x, double l) {
  return std::any_of(placed.begin(), placed.end(), [&](const Placed& p) {
    return p.lane == lane && std::abs(p.x - x) < 0.5 * (p.l + l) + kMinGap;
  });
}

bool contains(const BevBox& b, double x, double y) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double dx = x - b.cx, dy = y - b.cy;
  const double u = c * dx + s * dy, v = -s * dx + c * dy;
  return std::abs(u) <= 0.5 * b.l && std::abs(v) <= 0.5 * b.w;
}

std::uint64_t pose_key(const Pose& p) {
  std::uint64_t k = std::bit_cast<std::uint64_t>(p.x);
  k = mix_seed(k, std::bit_cast<std::uint64_t>(p.y));
  return mix_seed(k, std::bit_cast<std::uint64_t>(p.yaw));
}

}  // namespace

double normalize_angle(double a) {
  a = std::remainder(a, 2 * kPi);
  if (a <= -kPi) a += 2 * kPi;
  return a;
}

Pose compose(const Pose& a, const Pose& b) {
  const double c = std::cos(a.yaw), s = std::sin(a.yaw);
  return {a.x + c * b.x - s * b.y, a.y + s * b.x + c * b.y, normalize_angle(a.yaw + b.yaw)};
}

Pose inverse(const Pose& p) {
  const double c = std::cos(p.yaw), s = std::sin(p.yaw);
  return {-(c * p.x + s * p.y), -(-s * p.x + c * p.y), normalize_angle(-p.yaw)};
}

void transform_point(const Pose& p, double x, double y, double& ox, double& oy) {
  const double c = std::cos(p.yaw), s = std::sin(p.yaw);
  ox = p.x + c * x - s * y;
  oy = p.y + s * x + c * y;
}

BevBox to_frame(const BevBox& box, const Pose& frame) {
  BevBox out = box;
  transform_point(inverse(frame), box.cx, box.cy, out.cx, out.cy);
  out.yaw = normalize_angle(box.yaw - frame.yaw);
  return out;
}

void DomainSpec::validate() const {
  auto fail = [&](const std::string& what) { throw ArgumentError("domain '" + name + "': " + what); };
  if (cav_min < 0 || cav_min > cav_max) fail("cav_count_range must satisfy 0 <= min <= max");
  if (cav_max > 200) fail("cav_count_range max exceeds 200");
  if (!(vehicle_density >= 0)) fail("vehicle_density must be non-negative");
  if (!(road_width > 0)) fail("road_width must be positive");
  if (ray_count <= 0) fail("ray_count must be positive");
  if (!(range_noise_sigma >= 0)) fail("range_noise_sigma must be non-negative");
  if (!(dropout_prob >= 0 && dropout_prob <= 1)) fail("dropout_prob must lie in [0,1]");
  if (!(max_range > 0)) fail("max_range must be positive");
}

DomainSpec domain_a_preset() {
  DomainSpec d;
  d.name = "domain_a";
  d.cav_min = 1;
  d.cav_max = 4;
  d.includes_infrastructure = false;
  d.vehicle_density = 6.0;
  d.ray_count = 720;
  d.range_noise_sigma = 0.02;
  d.dropout_prob = 0.05;
  return d;
}

DomainSpec domain_b_preset() {
  DomainSpec d;
  d.name = "domain_b";
  d.cav_min = 2;
  d.cav_max = 6;
  d.includes_infrastructure = true;
  d.vehicle_density = 10.0;
  d.ray_count = 360;
  d.range_noise_sigma = 0.06;
  d.dropout_prob = 0.15;
  return d;
}

BevBox ego_box(const Pose& ego) { return BevBox{ego.x, ego.y, kEgoWidth, kEgoLength, ego.yaw, std::nullopt}; }

Scene generate_scene(const DomainSpec& domain, std::uint64_t seed) {
  domain.validate();
  std::mt19937_64 rng(mix_seed(seed, 0x5CE7E));
  const auto lanes = lanes_of(domain);
  std::uniform_int_distribution<int> lane_dist(0, static_cast<int>(lanes.size()) - 1);
  std::normal_distribution<double> heading_jitter(0.0, 0.03);
  std::uniform_real_distribution<double> length_dist(4.2, 4.9), width_dist(1.8, 2.1);

  Scene scene;
  scene.seed = seed;
  std::vector<Placed> placed;

  const int ego_lane = lane_dist(rng);
  const double ego_x = std::uniform_real_distribution<double>(-5.0, 5.0)(rng);
  scene.ego_pose = {ego_x, lanes[ego_lane].y, normalize_angle(lanes[ego_lane].heading + heading_jitter(rng))};
  placed.push_back({ego_lane, ego_x, kEgoLength});

  auto place = [&](double x_lo, double x_hi) -> BevBox {
    std::uniform_real_distribution<double> x_dist(x_lo, x_hi);
    for (int attempt = 0; attempt < kPlacementRetries; ++attempt) {
      const int lane = lane_dist(rng);
      const double x = to_f32(x_dist(rng));
      const double l = to_f32(length_dist(rng));
      const double w = to_f32(width_dist(rng));
      const double yaw = to_f32(normalize_angle(lanes[lane].heading + heading_jitter(rng)));
      if (collides(placed, lane, x, l)) continue;
      placed.push_back({lane, x, l});
      return BevBox{x, to_f32(lanes[lane].y), w, l, yaw, std::nullopt};
    }
    throw GenerationError("scene generation failed: no free slot after " + std::to_string(kPlacementRetries) +
                          " retries (seed " + std::to_string(seed) + ")");
  };

  const int cav_count = std::uniform_int_distribution<int>(domain.cav_min, domain.cav_max)(rng);
  const double expected = domain.vehicle_density * (2 * kRoadHalfLength) / 100.0;
  const int others = expected > 0 ? std::poisson_distribution<int>(expected)(rng) : 0;

  for (int i = 0; i < cav_count; ++i) {
    BevBox b = place(ego_x - 35.0, ego_x + 35.0);
    scene.cav_poses.push_back({b.cx, b.cy, b.yaw});
    scene.gt_boxes.push_back(b);
  }
  for (int i = 0; i < others; ++i) scene.gt_boxes.push_back(place(-kRoadHalfLength + 3, kRoadHalfLength - 3));

  if (domain.includes_infrastructure) {
    const double side = std::uniform_int_distribution<int>(0, 1)(rng) ? 1.0 : -1.0;
    const double x = std::uniform_real_distribution<double>(ego_x - 30.0, ego_x + 30.0)(rng);
    const double yaw = std::uniform_real_distribution<double>(-kPi, kPi)(rng);
    scene.cav_poses.push_back({x, side * (domain.road_width / 2 + 2.0), normalize_angle(yaw)});
  }

  for (std::size_t a = 0; a < scene.agent_count(); ++a) {
    scene.observations.push_back(render_pointcloud(scene, scene.agent_pose(a), domain));
  }
  return scene;
}

std::optional<double> ray_box_hit(double ox, double oy, double dx, double dy, const BevBox& box) {
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  const double px = ox - box.cx, py = oy - box.cy;
  const double o[2] = {c * px + s * py, -s * px + c * py};
  const double d[2] = {c * dx + s * dy, -s * dx + c * dy};
  const double half[2] = {0.5 * box.l, 0.5 * box.w};
  double t_enter = -std::numeric_limits<double>::infinity();
  double t_exit = std::numeric_limits<double>::infinity();
  for (int k = 0; k < 2; ++k) {
    if (std::abs(d[k]) < 1e-15) {
      if (std::abs(o[k]) > half[k]) return std::nullopt;
      continue;
    }
    double t0 = (-half[k] - o[k]) / d[k];
    double t1 = (half[k] - o[k]) / d[k];
    if (t0 > t1) std::swap(t0, t1);
    t_enter = std::max(t_enter, t0);
    t_exit = std::min(t_exit, t1);
  }
  if (t_enter > t_exit || t_enter < 0) return std::nullopt;
  return t_enter;
}

PointCloud render_pointcloud(const Scene& scene, const Pose& agent_pose, const DomainSpec& domain) {
  std::vector<BevBox> occluders;
  for (const BevBox& b : scene.gt_boxes) {
    if (!contains(b, agent_pose.x, agent_pose.y)) occluders.push_back(b);
  }
  if (BevBox e = ego_box(scene.ego_pose); !contains(e, agent_pose.x, agent_pose.y)) occluders.push_back(e);

  std::mt19937_64 rng(mix_seed(scene.seed, pose_key(agent_pose)));
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const Pose to_local = inverse(agent_pose);

  PointCloud cloud;
  for (int r = 0; r < domain.ray_count; ++r) {
    // Draw a fixed number of variates per ray so the stream does not depend on hits.
    const double n = noise(rng), drop = unit(rng), zu = unit(rng), iu = unit(rng);
    const double angle = agent_pose.yaw + 2 * kPi * r / domain.ray_count;
    const double dx = std::cos(angle), dy = std::sin(angle);
    std::optional<double> best;
    for (const BevBox& b : occluders) {
      auto t = ray_box_hit(agent_pose.x, agent_pose.y, dx, dy, b);
      if (t && (!best || *t < *best)) best = t;
    }
    if (!best || *best > domain.max_range) continue;
    if (drop < domain.dropout_prob) continue;
    const double range = *best + domain.range_noise_sigma * n;
    double lx, ly;
    transform_point(to_local, agent_pose.x + range * dx, agent_pose.y + range * dy, lx, ly);
    const double intensity = std::clamp(0.9 * std::exp(-range / 40.0) + 0.1 * iu, 0.0, 1.0);
    cloud.points.push_back({static_cast<float>(lx), static_cast<float>(ly), static_cast<float>(zu * kVehicleHeight),
                            static_cast<float>(intensity)});
  }
  return cloud;
}

PointCloud project_to_ego(const PointCloud& cloud, const Pose& cav_pose, const Pose& ego_pose) {
  if (cav_pose == ego_pose) return cloud;
  const Pose t = compose(inverse(ego_pose), cav_pose);
  PointCloud out;
  out.points.reserve(cloud.size());
  for (const Point& p : cloud.points) {
    double x, y;
    transform_point(t, p.x, p.y, x, y);
    out.points.push_back({static_cast<float>(x), static_cast<float>(y), p.z, p.intensity});
  }
  return out;
}

}  // namespace fda
