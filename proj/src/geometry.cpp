#include "itrack/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace itrack {

namespace {

constexpr double kEdgeEps = 1e-12;

double half_tan(double fov_deg) { return std::tan(deg2rad(0.5 * fov_deg)); }

}  // namespace

double deg2rad(double deg) { return deg * std::numbers::pi / 180.0; }
double rad2deg(double rad) { return rad * 180.0 / std::numbers::pi; }

void CameraModel::validate() const {
  if (!(fov_h > 0.0 && fov_h < 180.0) || !(fov_v > 0.0 && fov_v < 180.0)) {
    throw std::invalid_argument("camera fov must lie in (0, 180)");
  }
  if (!(cam_height > 0.0 && target_height > 0.0 && target_width > 0.0) ||
      resolution <= 0) {
    throw std::invalid_argument("camera lengths and resolution must be positive");
  }
}

std::size_t MaskImage::count() const {
  return static_cast<std::size_t>(std::count(pixels.begin(), pixels.end(), 1));
}

bool is_valid(const BBox& b) {
  if (!std::isfinite(b.cx) || !std::isfinite(b.cy) || !std::isfinite(b.w) ||
      !std::isfinite(b.h)) {
    return false;
  }
  if (b.w <= 0.0 || b.h <= 0.0) return false;
  return b.right() > 0.0 && b.left() < 1.0 && b.bottom() > 0.0 && b.top() < 1.0;
}

BBox clamp_to_unit(const BBox& b) {
  const double l = std::clamp(b.left(), 0.0, 1.0);
  const double r = std::clamp(b.right(), 0.0, 1.0);
  const double t = std::clamp(b.top(), 0.0, 1.0);
  const double bo = std::clamp(b.bottom(), 0.0, 1.0);
  if (r <= l || bo <= t) {
    throw std::invalid_argument("box does not intersect the unit square");
  }
  return BBox::from_edges(l, t, r, bo);
}

bool touches_border(const BBox& b, double eps) {
  return b.left() <= eps || b.top() <= eps || b.right() >= 1.0 - eps ||
         b.bottom() >= 1.0 - eps;
}

double iou(const BBox& a, const BBox& b) {
  const double iw = std::min(a.right(), b.right()) - std::max(a.left(), b.left());
  const double ih = std::min(a.bottom(), b.bottom()) - std::max(a.top(), b.top());
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

std::optional<BBox> project(const RelativeState& rel, const CameraModel& cam) {
  if (std::abs(rel.theta) > 0.5 * cam.fov_h || rel.rho <= 0.0) {
    return std::nullopt;
  }
  const double th = half_tan(cam.fov_h);
  const double tv = half_tan(cam.fov_v);
  BBox raw;
  raw.cx = 0.5 + 0.5 * std::tan(deg2rad(rel.theta)) / th;
  raw.w = cam.target_width / (2.0 * rel.rho * th);
  raw.h = cam.target_height / (2.0 * rel.rho * tv);
  raw.cy = 0.5 + 0.5 * (cam.cam_height - 0.5 * cam.target_height) / (rel.rho * tv);
  if (!is_valid(raw)) return std::nullopt;
  return clamp_to_unit(raw);
}

RelativeState unproject(const BBox& b, const CameraModel& cam) {
  if (!is_valid(b) || b.h < 1e-9) {
    throw AmbiguousDepthError("degenerate box has no depth");
  }
  if (b.top() <= kEdgeEps || b.bottom() >= 1.0 - kEdgeEps) {
    throw AmbiguousDepthError("vertically clamped box has ambiguous depth");
  }
  const double th = half_tan(cam.fov_h);
  const double tv = half_tan(cam.fov_v);
  RelativeState rel;
  rel.rho = cam.target_height / (2.0 * b.h * tv);

  const bool left_cut = b.left() <= kEdgeEps;
  const bool right_cut = b.right() >= 1.0 - kEdgeEps;
  double cx = b.cx;
  if (left_cut && right_cut) {
    throw AmbiguousDepthError("box clamped on both horizontal edges");
  }
  if (left_cut || right_cut) {
    const double full_w = cam.target_width / (2.0 * rel.rho * th);
    cx = left_cut ? b.right() - 0.5 * full_w : b.left() + 0.5 * full_w;
  }
  rel.theta = rad2deg(std::atan((2.0 * cx - 1.0) * th));
  return rel;
}

MaskImage render_mask(const BBox& b, const CameraModel& cam) {
  const int res = cam.resolution;
  MaskImage m(res);
  // A pixel is foreground when its center lies in [left, right) x [top, bottom).
  auto first = [res](double lo) {
    return std::max(0, static_cast<int>(std::ceil(lo * res - 0.5)));
  };
  auto last = [res](double hi) {
    return std::min(res - 1, static_cast<int>(std::ceil(hi * res - 0.5)) - 1);
  };
  const int c0 = first(b.left()), c1 = last(b.right());
  const int r0 = first(b.top()), r1 = last(b.bottom());
  for (int r = r0; r <= r1; ++r) {
    for (int c = c0; c <= c1; ++c) m.at(r, c) = 1;
  }
  return m;
}

std::optional<BBox> extract_bbox(const MaskImage& m) {
  const int res = m.resolution;
  int r0 = res, r1 = -1, c0 = res, c1 = -1;
  for (int r = 0; r < res; ++r) {
    for (int c = 0; c < res; ++c) {
      if (m.at(r, c)) {
        r0 = std::min(r0, r);
        r1 = std::max(r1, r);
        c0 = std::min(c0, c);
        c1 = std::max(c1, c);
      }
    }
  }
  if (r1 < 0) return std::nullopt;
  const double s = 1.0 / res;
  return BBox::from_edges(c0 * s, r0 * s, (c1 + 1) * s, (r1 + 1) * s);
}

GoalDelta difference(const BBox& goal, const BBox& current) {
  return {goal.cx - current.cx, goal.cy - current.cy, goal.w - current.w,
          goal.h - current.h};
}

nlohmann::json to_json(const BBox& b) { return {b.cx, b.cy, b.w, b.h}; }

BBox bbox_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) {
    throw std::invalid_argument("bbox must be an array [cx, cy, w, h]");
  }
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(),
          j[3].get<double>()};
}

std::string format_fixed(const BBox& b) {
  return fmt::format("[{:.6f}, {:.6f}, {:.6f}, {:.6f}]", b.cx, b.cy, b.w, b.h);
}

void to_json(nlohmann::json& j, const CameraModel& cam) {
  j = {{"fov_h", cam.fov_h},
       {"fov_v", cam.fov_v},
       {"cam_height", cam.cam_height},
       {"target_height", cam.target_height},
       {"target_width", cam.target_width},
       {"resolution", cam.resolution}};
}

void from_json(const nlohmann::json& j, CameraModel& cam) {
  CameraModel d;
  cam.fov_h = j.value("fov_h", d.fov_h);
  cam.fov_v = j.value("fov_v", d.fov_v);
  cam.cam_height = j.value("cam_height", d.cam_height);
  cam.target_height = j.value("target_height", d.target_height);
  cam.target_width = j.value("target_width", d.target_width);
  cam.resolution = j.value("resolution", d.resolution);
  cam.validate();
}

}  // namespace itrack
