#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace itrack {

// Normalized image-plane box. y grows downward.
struct BBox {
  double cx = 0.5;
  double cy = 0.5;
  double w = 0.0;
  double h = 0.0;

  double left() const { return cx - 0.5 * w; }
  double right() const { return cx + 0.5 * w; }
  double top() const { return cy - 0.5 * h; }
  double bottom() const { return cy + 0.5 * h; }
  double area() const { return w * h; }

  std::array<double, 4> as_array() const { return {cx, cy, w, h}; }
  static BBox from_edges(double l, double t, double r, double b) {
    return {0.5 * (l + r), 0.5 * (t + b), r - l, b - t};
  }

  friend bool operator==(const BBox&, const BBox&) = default;
};

struct GoalDelta {
  double dcx = 0.0;
  double dcy = 0.0;
  double dw = 0.0;
  double dh = 0.0;

  friend bool operator==(const GoalDelta&, const GoalDelta&) = default;
};

// Tracker-to-target geometry: rho in cm, theta in degrees, positive to the
// tracker's right.
struct RelativeState {
  double rho = 0.0;
  double theta = 0.0;

  friend bool operator==(const RelativeState&, const RelativeState&) = default;
};

struct CameraModel {
  double fov_h = 90.0;          // deg
  double fov_v = 90.0;          // deg
  double cam_height = 100.0;    // cm
  double target_height = 180.0; // cm
  double target_width = 60.0;   // cm
  int resolution = 84;          // mask pixels per side

  void validate() const;
};

class AmbiguousDepthError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Square binary grid, row-major, 1 = target pixel.
struct MaskImage {
  int resolution = 0;
  std::vector<std::uint8_t> pixels;

  explicit MaskImage(int res = 0)
      : resolution(res), pixels(static_cast<std::size_t>(res) * res, 0) {}
  std::uint8_t at(int row, int col) const {
    return pixels[static_cast<std::size_t>(row) * resolution + col];
  }
  std::uint8_t& at(int row, int col) {
    return pixels[static_cast<std::size_t>(row) * resolution + col];
  }
  std::size_t count() const;
};

double deg2rad(double deg);
double rad2deg(double rad);

bool is_valid(const BBox& b);
// Intersection of the box with the unit square. Throws if empty.
BBox clamp_to_unit(const BBox& b);
bool touches_border(const BBox& b, double eps = 1e-12);

double iou(const BBox& a, const BBox& b);

// Pinhole projection of the target. nullopt when the target is outside the
// horizontal field of view.
std::optional<BBox> project(const RelativeState& rel, const CameraModel& cam = {});

// Inverse of project. Depth comes from the box height, so a box whose
// vertical extent was clamped cannot be inverted. A single clamped horizontal
// edge is recovered from the intact edge and the known target aspect.
RelativeState unproject(const BBox& b, const CameraModel& cam = {});

MaskImage render_mask(const BBox& b, const CameraModel& cam = {});
// Tight box around foreground pixels; nullopt means target lost.
std::optional<BBox> extract_bbox(const MaskImage& m);

GoalDelta difference(const BBox& goal, const BBox& current);

// JSON as [cx, cy, w, h].
nlohmann::json to_json(const BBox& b);
BBox bbox_from_json(const nlohmann::json& j);
// Golden-file formatting: "[0.500000, 0.525000, 0.150000, 0.450000]".
std::string format_fixed(const BBox& b);

void to_json(nlohmann::json& j, const CameraModel& cam);
void from_json(const nlohmann::json& j, CameraModel& cam);

}  // namespace itrack
