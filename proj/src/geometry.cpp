#include "fda/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fda {

std::array<Vec2, 4> box_corners(const BevBox& b) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const Vec2 along(c * 0.5 * b.l, s * 0.5 * b.l);
  const Vec2 across(-s * 0.5 * b.w, c * 0.5 * b.w);
  const Vec2 center(b.cx, b.cy);
  return {center - along - across, center + along - across, center + along + across, center - along + across};
}

double polygon_area(const Polygon& poly) {
  const std::size_t n = poly.size();
  if (n < 3) return 0.0;
  double twice = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2& p = poly[i];
    const Vec2& q = poly[(i + 1) % n];
    twice += p.x() * q.y() - q.x() * p.y();
  }
  return 0.5 * std::abs(twice);
}

namespace {

double cross(const Vec2& a, const Vec2& b) { return a.x() * b.y() - a.y() * b.x(); }

}  // namespace

Polygon clip_convex(const Polygon& subject, const Polygon& clip) {
  Polygon out = subject;
  const std::size_t m = clip.size();
  for (std::size_t e = 0; e < m && !out.empty(); ++e) {
    const Vec2& a = clip[e];
    const Vec2 edge = clip[(e + 1) % m] - a;
    // Inside = left of the directed edge (counter-clockwise clip polygon).
    auto side = [&](const Vec2& p) { return cross(edge, p - a); };
    Polygon in = std::move(out);
    out.clear();
    for (std::size_t i = 0; i < in.size(); ++i) {
      const Vec2& cur = in[i];
      const Vec2& prev = in[(i + in.size() - 1) % in.size()];
      const double sc = side(cur), sp = side(prev);
      if (sc >= 0) {
        if (sp < 0) out.push_back(prev + (cur - prev) * (sp / (sp - sc)));
        out.push_back(cur);
      } else if (sp >= 0) {
        out.push_back(prev + (cur - prev) * (sp / (sp - sc)));
      }
    }
  }
  return out;
}

double rotated_iou(const BevBox& a, const BevBox& b) {
  const double area_a = a.area(), area_b = b.area();
  if (!(area_a > 0) || !(area_b > 0)) throw ArgumentError("rotated_iou: boxes must have positive extent");
  // Bounding-circle rejection.
  const double ra = 0.5 * std::hypot(a.w, a.l), rb = 0.5 * std::hypot(b.w, b.l);
  if (std::hypot(a.cx - b.cx, a.cy - b.cy) > ra + rb) return 0.0;
  const auto ca = box_corners(a);
  const auto cb = box_corners(b);
  const double inter = polygon_area(clip_convex(Polygon(ca.begin(), ca.end()), Polygon(cb.begin(), cb.end())));
  if (inter <= 1e-12 * std::min(area_a, area_b)) return 0.0;
  const double iou = inter / (area_a + area_b - inter);
  return std::clamp(iou, 0.0, 1.0);
}

std::vector<BevBox> nms(const std::vector<BevBox>& boxes, double iou_threshold) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    return boxes[i].score.value_or(0.0) > boxes[j].score.value_or(0.0);
  });
  std::vector<BevBox> kept;
  for (std::size_t idx : order) {
    const BevBox& cand = boxes[idx];
    const bool suppressed =
        std::any_of(kept.begin(), kept.end(), [&](const BevBox& k) { return rotated_iou(k, cand) > iou_threshold; });
    if (!suppressed) kept.push_back(cand);
  }
  return kept;
}

}  // namespace fda
