#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fda/tensor.hpp"

namespace fda {

class GenerationError : public Error {
 public:
  using Error::Error;
};

/// Wraps an angle into (-pi, pi].
double normalize_angle(double a);

/// Planar rigid pose of an agent in world coordinates.
struct Pose {
  double x = 0.0;
  double y = 0.0;
  double yaw = 0.0;

  bool operator==(const Pose&) const = default;
};

/// a ∘ b: b expressed in a's frame, mapped into a's parent frame.
Pose compose(const Pose& a, const Pose& b);
Pose inverse(const Pose& p);
/// Maps a point from the pose's local frame into its parent frame.
void transform_point(const Pose& p, double x, double y, double& ox, double& oy);

/// Rotated BEV rectangle. `l` extends along the heading, `w` across it.
struct BevBox {
  double cx = 0.0;
  double cy = 0.0;
  double w = 1.0;
  double l = 1.0;
  double yaw = 0.0;
  std::optional<double> score;

  bool operator==(const BevBox&) const = default;
  double area() const { return w * l; }
};

/// Box re-expressed in the frame of `frame` (given in the box's current frame).
BevBox to_frame(const BevBox& box, const Pose& frame);

struct Point {
  float x = 0.f;
  float y = 0.f;
  float z = 0.f;
  float intensity = 0.f;

  bool operator==(const Point&) const = default;
};

struct PointCloud {
  std::vector<Point> points;

  bool operator==(const PointCloud&) const = default;
  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

struct DomainSpec {
  std::string name = "domain";
  int cav_min = 1;
  int cav_max = 4;
  bool includes_infrastructure = false;
  /// Non-agent vehicles per 100 m of road, summed over lanes.
  double vehicle_density = 6.0;
  double road_width = 14.0;
  int ray_count = 720;
  double range_noise_sigma = 0.02;
  double dropout_prob = 0.05;
  double max_range = 60.0;

  void validate() const;
};

DomainSpec domain_a_preset();
DomainSpec domain_b_preset();

/// Frame of a multi-agent scene. Agent 0 is the ego; agents 1.. are the CAVs
/// (including a roadside unit when the domain has infrastructure).
struct Scene {
  std::uint64_t seed = 0;
  Pose ego_pose;
  std::vector<Pose> cav_poses;
  /// World-frame boxes of every vehicle except the ego.
  std::vector<BevBox> gt_boxes;
  /// One cloud per agent, each in that agent's own frame.
  std::vector<PointCloud> observations;

  bool operator==(const Scene&) const = default;

  std::size_t agent_count() const { return 1 + cav_poses.size(); }
  const Pose& agent_pose(std::size_t i) const { return i == 0 ? ego_pose : cav_poses.at(i - 1); }
};

/// Ego vehicle footprint; the ego is an occluder but not a ground-truth target.
BevBox ego_box(const Pose& ego);

constexpr double kRoadHalfLength = 60.0;
constexpr double kLaneWidth = 3.5;

Scene generate_scene(const DomainSpec& domain, std::uint64_t seed);

/// Ray-cast LiDAR sweep from `agent_pose`; points are returned in the agent frame.
/// Boxes containing the sensor origin are the sensor's own vehicle and are skipped.
PointCloud render_pointcloud(const Scene& scene, const Pose& agent_pose, const DomainSpec& domain);

/// Re-expresses a cloud captured at `cav_pose` in the frame of `ego_pose`.
PointCloud project_to_ego(const PointCloud& cloud, const Pose& cav_pose, const Pose& ego_pose);

/// Distance along a unit ray to the first crossing of the box boundary, or
/// nullopt when the ray misses (or starts inside the box).
std::optional<double> ray_box_hit(double ox, double oy, double dx, double dy, const BevBox& box);

}  // namespace fda
