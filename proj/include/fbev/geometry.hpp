// Copyright (c) 2026 fbev contributors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <vector>

#include "fbev/tensor.hpp"

namespace fbev {

using Vec3 = std::array<double, 3>;

Vec3 vadd(const Vec3& a, const Vec3& b);
Vec3 vsub(const Vec3& a, const Vec3& b);
Vec3 vscale(const Vec3& a, double s);
double vdot(const Vec3& a, const Vec3& b);
double vnorm(const Vec3& a);
Vec3 vnormalize(const Vec3& a);

/// Row-major 3x3 rotation helpers.
using Mat3 = std::array<double, 9>;
Vec3 mat_apply(const Mat3& m, const Vec3& v);
Mat3 mat_mul(const Mat3& a, const Mat3& b);
Mat3 mat_transpose(const Mat3& m);
Mat3 rot_z(double angle);
Mat3 rot_y(double angle);
Mat3 rot_x(double angle);

/// r(theta) = a1*theta + a2*theta^2 + a3*theta^3 + a4*theta^4, pixels per
/// incident angle. Must be strictly increasing on [0, theta_max]; checked
/// at construction by sampling dr/dtheta on a fine grid.
class DistortionPoly {
  public:
    DistortionPoly(double a1, double a2, double a3, double a4, double theta_max);

    double radius(double theta) const;   // throws outside [0, theta_max]
    double theta(double radius) const;   // bisection inverse, throws outside [0, max_radius]
    double max_radius() const { return max_radius_; }
    double theta_max() const { return theta_max_; }
    double a1() const { return a_[0]; }
    double a2() const { return a_[1]; }
    double a3() const { return a_[2]; }
    double a4() const { return a_[3]; }

  private:
    double eval(double theta) const;

    std::array<double, 4> a_;
    double theta_max_;
    double max_radius_;
};

struct CameraIntrinsics {
    DistortionPoly poly;
    double cx, cy;               // principal point, pixels
    std::size_t width, height;   // image extents

    void validate() const;       // principal point inside image
};

/// World-to-camera transform: x_cam = R * (x_world - center).
/// Camera frame: +z optical axis, +x image right, +y image down.
struct CameraExtrinsics {
    Mat3 rot_world_to_cam;
    Vec3 center;

    /// yaw about world z, pitch below the horizon (negative looks down),
    /// roll about the optical axis; all radians.
    static CameraExtrinsics from_pose(const Vec3& position, double yaw, double pitch, double roll);
    void validate() const;  // orthonormal within 1e-9, det +1

    Vec3 world_to_cam(const Vec3& p) const;
    Vec3 cam_dir_to_world(const Vec3& d) const;
};

struct Camera {
    CameraIntrinsics intr;
    CameraExtrinsics extr;
    double yaw = 0, pitch = 0, roll = 0;  // retained for rig file round trips
};

struct CameraRig {
    std::vector<Camera> cams;
};

/// BEV grid in the ego frame. Cell (row, col) maps to metric
/// x_fwd = (O_row - row) * cell_m, y_left = (O_col - col) * cell_m.
struct BEVGrid {
    std::size_t h = 32, w = 32;
    double cell_m = 0.5;
    std::vector<double> z_anchors = {0.0, 0.5};

    std::size_t queries() const { return h * w; }
    double center_row() const { return (static_cast<double>(h) - 1.0) / 2.0; }
    double center_col() const { return (static_cast<double>(w) - 1.0) / 2.0; }
    double radius() const { return static_cast<double>(w) / 2.0; }
    std::array<double, 2> cell_metric(std::size_t row, std::size_t col) const;
    /// Metric ego-frame point -> fractional (col, row) cell coordinates.
    std::array<double, 2> metric_to_cell(double x_fwd, double y_left) const;
};

struct Projection {
    double u = 0, v = 0;
    bool visible = false;
};

/// Projects a world point through the fisheye model. Visible iff the
/// incident angle is within the FOV cone and the pixel lands inside the
/// image. A point at the camera center is reported not visible.
Projection project_point(const Camera& cam, const Vec3& world);

/// Unit ray direction in world coordinates for a pixel, plus the camera
/// center as ray origin. Throws for pixels outside the image circle.
struct Ray {
    Vec3 origin;
    Vec3 dir;
};
Ray unproject_pixel(const Camera& cam, double u, double v);

/// Per-query, per-camera, per-anchor reference pixels with visibility.
struct RefPoints {
    std::size_t n_query = 0, n_cam = 0, n_anchor = 0;
    std::vector<double> uv;                  // [q][cam][anchor][2]
    std::vector<std::uint8_t> anchor_visible;  // [q][cam][anchor]
    std::vector<std::uint8_t> mask;            // [q][cam]: any anchor visible

    std::size_t uv_index(std::size_t q, std::size_t c, std::size_t a) const
    {
        return ((q * n_cam + c) * n_anchor + a) * 2;
    }
};
RefPoints bev_reference_points(const BEVGrid& grid, const CameraRig& rig);

/// log10 ratio of the local singular values of the pixel -> incident-angle
/// plane mapping, evaluated by central differences (0.5 px step). Pixels
/// outside the usable image circle are NaN.
Tensor anisotropy_heatmap(const CameraIntrinsics& intr);

/// Default surround rig: four cameras at the side midpoints of a 4 m x 2 m
/// ego box, 1 m high, yaw 0/90/180/270 deg, pitched 65 deg below the
/// horizon, 190 deg FOV. Distortion coefficients scale with image width so
/// the image circle stays matched to the frame.
CameraRig default_rig(std::size_t img_w, std::size_t img_h);

/// Text rig file: `#` comments, `cameras = N`, then per camera
/// camI.{a1..a4,cx,cy,width,height,fov_deg,yaw_deg,pitch_deg,roll_deg,x,y,z}.
CameraRig load_rig(const std::filesystem::path& path);
void save_rig(const CameraRig& rig, const std::filesystem::path& path);

}  // namespace fbev
