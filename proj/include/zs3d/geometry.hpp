#pragma once

// Multi-view rendering of organized point clouds and inverse rendering of
// per-pixel values back onto points.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "zs3d/error.hpp"

namespace zs3d {

/// H x W grid of 3-D points with validity, per-point anomaly mask and RGB.
struct OrganizedPointCloud {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<Eigen::Vector3d> points;
  std::vector<std::uint8_t> valid;
  std::vector<std::uint8_t> mask;  // 1 = anomalous point
  std::vector<std::array<std::uint8_t, 3>> rgb;

  std::size_t size() const { return height * width; }

  std::size_t valid_count() const {
    std::size_t n = 0;
    for (auto v : valid) n += v ? 1 : 0;
    return n;
  }

  /// True iff any valid cell is anomalous.
  bool global_label() const {
    for (std::size_t i = 0; i < size(); ++i) {
      if (valid[i] && mask[i]) return true;
    }
    return false;
  }

  void validate() const {
    const std::size_t n = size();
    if (n == 0) throw InputError("point cloud has an empty grid");
    if (points.size() != n || valid.size() != n || mask.size() != n || rgb.size() != n) {
      throw InputError("point cloud channel sizes do not match its grid");
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (!valid[i] && mask[i]) throw InputError("point cloud marks an invalid cell as anomalous");
    }
  }
};

enum class Axis { x, y };

struct ViewTransform {
  Axis axis = Axis::x;
  double angle = 0.0;  // radians
  Eigen::Matrix3d matrix = Eigen::Matrix3d::Identity();
};

/// Single-axis rotation about X or Y.
inline ViewTransform rotation_matrix(Axis axis, double angle) {
  if (!std::isfinite(angle)) throw InputError("rotation angle must be finite");
  const double c = std::cos(angle), s = std::sin(angle);
  Eigen::Matrix3d m;
  if (axis == Axis::x) {
    m << 1, 0, 0,
         0, c, -s,
         0, s, c;
  } else {
    m << c, 0, s,
         0, 1, 0,
         -s, 0, c;
  }
  return {axis, angle, m};
}

/// One transform per listed angle: all X rotations first, then all Y rotations.
inline std::vector<ViewTransform> make_view_set(std::span<const double> x_angles,
                                                std::span<const double> y_angles) {
  if (x_angles.empty() && y_angles.empty()) throw InputError("view set needs at least one angle");
  std::vector<ViewTransform> views;
  views.reserve(x_angles.size() + y_angles.size());
  for (double a : x_angles) views.push_back(rotation_matrix(Axis::x, a));
  for (double a : y_angles) views.push_back(rotation_matrix(Axis::y, a));
  return views;
}

inline std::vector<double> default_x_angles() {
  constexpr double pi = std::numbers::pi;
  return {-pi / 4, -pi / 12, 0.0, pi / 4, pi / 12};
}

inline std::vector<double> default_y_angles() {
  constexpr double pi = std::numbers::pi;
  return {-pi / 4, -pi / 12, pi / 4, pi / 12};
}

/// The nine default views.
inline std::vector<ViewTransform> default_view_set() {
  return make_view_set(default_x_angles(), default_y_angles());
}

/// Depth image, label map and pixel -> point index map of one view.
/// Pixel (r, c) is stored at r * resolution + c; row 0 is the top (+y).
struct ViewRender {
  std::size_t resolution = 0;
  std::vector<double> depth;             // 0 = background, foreground in (0, 1]
  std::vector<std::uint8_t> mask2d;
  std::vector<std::int64_t> pix2point;   // grid index of the winning point, -1 = empty
  bool view_label = false;
  ViewTransform transform;

  std::size_t pixels() const { return resolution * resolution; }
};

/// Foreground depths are mapped affinely onto [kDepthFloor, 1] so that the
/// farthest surface point stays distinguishable from background (0).
inline constexpr double kDepthFloor = 0.05;

/// Projected coordinate in [-1, 1] -> pixel index, rounding half up.
inline std::size_t project_to_pixel(double u, std::size_t resolution) {
  const double s = (u + 1.0) * 0.5 * static_cast<double>(resolution - 1);
  const double r = std::floor(s + 0.5);
  return static_cast<std::size_t>(std::clamp(r, 0.0, static_cast<double>(resolution - 1)));
}

/// Rotated, centred and unit-cube-normalized coordinates of every valid point
/// (invalid cells are left at zero). Shared by the renderer and its tests.
inline std::vector<Eigen::Vector3d> normalized_view_points(const OrganizedPointCloud& cloud,
                                                           const ViewTransform& t) {
  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  std::size_t n = 0;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (cloud.valid[i]) {
      centroid += cloud.points[i];
      ++n;
    }
  }
  if (n == 0) throw InputError("cannot render a cloud without valid points");
  centroid /= static_cast<double>(n);

  std::vector<Eigen::Vector3d> q(cloud.size(), Eigen::Vector3d::Zero());
  double extent = 0.0;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (!cloud.valid[i]) continue;
    q[i] = t.matrix * (cloud.points[i] - centroid);
    extent = std::max(extent, q[i].cwiseAbs().maxCoeff());
  }
  if (extent > 0.0) {
    for (std::size_t i = 0; i < cloud.size(); ++i) q[i] /= extent;
  }
  return q;
}

/// Orthographic z-buffered render with 3x3 splats; larger rotated z is nearer.
inline ViewRender render_view(const OrganizedPointCloud& cloud, const ViewTransform& t,
                              std::size_t resolution) {
  if (resolution < 8) throw InputError("render resolution must be at least 8");
  cloud.validate();
  const auto q = normalized_view_points(cloud, t);

  double z_min = std::numeric_limits<double>::infinity();
  double z_max = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (!cloud.valid[i]) continue;
    z_min = std::min(z_min, q[i].z());
    z_max = std::max(z_max, q[i].z());
  }

  const std::size_t res = resolution;
  ViewRender out;
  out.resolution = res;
  out.transform = t;
  out.depth.assign(res * res, 0.0);
  out.mask2d.assign(res * res, 0);
  out.pix2point.assign(res * res, -1);
  std::vector<double> zbuf(res * res, -std::numeric_limits<double>::infinity());

  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (!cloud.valid[i]) continue;
    const auto col = static_cast<std::ptrdiff_t>(project_to_pixel(q[i].x(), res));
    const auto row = static_cast<std::ptrdiff_t>(project_to_pixel(-q[i].y(), res));
    for (std::ptrdiff_t dr = -1; dr <= 1; ++dr) {
      for (std::ptrdiff_t dc = -1; dc <= 1; ++dc) {
        const std::ptrdiff_t r = row + dr, c = col + dc;
        if (r < 0 || c < 0 || r >= static_cast<std::ptrdiff_t>(res) || c >= static_cast<std::ptrdiff_t>(res)) {
          continue;
        }
        const std::size_t p = static_cast<std::size_t>(r) * res + static_cast<std::size_t>(c);
        if (q[i].z() > zbuf[p]) {
          zbuf[p] = q[i].z();
          out.pix2point[p] = static_cast<std::int64_t>(i);
        }
      }
    }
  }

  const double span = z_max - z_min;
  for (std::size_t p = 0; p < res * res; ++p) {
    const auto idx = out.pix2point[p];
    if (idx < 0) continue;
    const double unit = span > 0.0 ? (zbuf[p] - z_min) / span : 1.0;
    out.depth[p] = span > 0.0 ? kDepthFloor + (1.0 - kDepthFloor) * unit : 1.0;
    out.mask2d[p] = cloud.mask[static_cast<std::size_t>(idx)];
    out.view_label = out.view_label || out.mask2d[p] != 0;
  }
  return out;
}

inline std::vector<ViewRender> render_views(const OrganizedPointCloud& cloud,
                                            std::span<const ViewTransform> views,
                                            std::size_t resolution) {
  std::vector<ViewRender> out;
  out.reserve(views.size());
  for (const auto& t : views) out.push_back(render_view(cloud, t, resolution));
  return out;
}

/// Linear map from per-view pixel values to per-point means. Precomputes the
/// visibility counts so the adjoint is available for backpropagation.
class InverseRenderer {
 public:
  InverseRenderer(std::span<const ViewRender> views, std::size_t n_points)
      : views_(views), counts_(n_points, 0) {
    if (views.empty()) throw InputError("inverse rendering needs at least one view");
    for (const auto& v : views) {
      for (auto idx : v.pix2point) {
        if (idx < 0) continue;
        if (static_cast<std::size_t>(idx) >= n_points) throw InputError("pix2point index out of range");
        ++counts_[static_cast<std::size_t>(idx)];
      }
    }
  }

  std::size_t n_points() const { return counts_.size(); }
  std::size_t visibility(std::size_t point) const { return counts_[point]; }

  std::vector<double> apply(std::span<const std::vector<double>> values) const {
    check(values);
    // Running mean: a point seen several times with one value gets exactly
    // that value back, which a sum followed by a division does not guarantee.
    std::vector<double> mean(counts_.size(), 0.0);
    std::vector<std::size_t> seen(counts_.size(), 0);
    for (std::size_t k = 0; k < views_.size(); ++k) {
      const auto& p2p = views_[k].pix2point;
      for (std::size_t p = 0; p < p2p.size(); ++p) {
        if (p2p[p] < 0) continue;
        const auto i = static_cast<std::size_t>(p2p[p]);
        const std::size_t n = ++seen[i];
        mean[i] = n == 1 ? values[k][p] : mean[i] + (values[k][p] - mean[i]) / static_cast<double>(n);
      }
    }
    return mean;
  }

  /// Adjoint of apply(): per-view pixel gradients from per-point gradients.
  std::vector<std::vector<double>> apply_transpose(std::span<const double> point_grad) const {
    if (point_grad.size() != counts_.size()) throw InputError("inverse render adjoint: size mismatch");
    std::vector<std::vector<double>> g(views_.size());
    for (std::size_t k = 0; k < views_.size(); ++k) {
      const auto& p2p = views_[k].pix2point;
      g[k].assign(p2p.size(), 0.0);
      for (std::size_t p = 0; p < p2p.size(); ++p) {
        if (p2p[p] < 0) continue;
        const auto i = static_cast<std::size_t>(p2p[p]);
        g[k][p] = point_grad[i] / static_cast<double>(counts_[i]);
      }
    }
    return g;
  }

 private:
  void check(std::span<const std::vector<double>> values) const {
    if (values.size() != views_.size()) throw InputError("inverse render: map count does not match view count");
    for (std::size_t k = 0; k < views_.size(); ++k) {
      if (values[k].size() != views_[k].pixels()) {
        throw InputError("inverse render: map " + std::to_string(k) + " does not match its view shape");
      }
    }
  }

  std::span<const ViewRender> views_;
  std::vector<std::size_t> counts_;
};

/// Mean of all pixel values naming each point; points seen by no pixel get 0.
inline std::vector<double> inverse_render(std::span<const std::vector<double>> values_per_view,
                                          std::span<const ViewRender> views, std::size_t n_points) {
  if (values_per_view.size() != views.size()) {
    throw InputError("inverse render: map count does not match view count");
  }
  return InverseRenderer(views, n_points).apply(values_per_view);
}

}  // namespace zs3d
