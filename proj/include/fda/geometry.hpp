#pragma once

#include <array>
#include <vector>

#include <Eigen/Core>

#include "fda/scene.hpp"

namespace fda {

using Vec2 = Eigen::Vector2d;
using Polygon = std::vector<Vec2>;

/// Corners in counter-clockwise order.
std::array<Vec2, 4> box_corners(const BevBox& b);

/// Shoelace area (absolute value).
double polygon_area(const Polygon& poly);

/// Sutherland–Hodgman clip of `subject` against the convex, counter-clockwise `clip`.
Polygon clip_convex(const Polygon& subject, const Polygon& clip);

/// Rotated-rectangle intersection-over-union in [0,1].
double rotated_iou(const BevBox& a, const BevBox& b);

/// Greedy non-maximum suppression in descending score order. Boxes whose IoU
/// with an already kept box exceeds `iou_threshold` are dropped. Ties in score
/// keep input order.
std::vector<BevBox> nms(const std::vector<BevBox>& boxes, double iou_threshold);

}  // namespace fda
