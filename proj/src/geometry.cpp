// Copyright (c) 2026 fbev contributors.
// SPDX-License-Identifier: Apache-2.0

#include "fbev/geometry.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

namespace fbev {

namespace {

constexpr double kPi = 3.14159265358979323846;

double deg2rad(double d) { return d * kPi / 180.0; }
double rad2deg(double r) { return r * 180.0 / kPi; }

}  // namespace

Vec3 vadd(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
Vec3 vsub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
Vec3 vscale(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }
double vdot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
double vnorm(const Vec3& a) { return std::sqrt(vdot(a, a)); }
Vec3 vnormalize(const Vec3& a)
{
    const double n = vnorm(a);
    return {a[0] / n, a[1] / n, a[2] / n};
}

Vec3 mat_apply(const Mat3& m, const Vec3& v)
{
    return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2], m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
            m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
}

Mat3 mat_mul(const Mat3& a, const Mat3& b)
{
    Mat3 out{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
        {
            double acc = 0;
            for (int k = 0; k < 3; ++k)
                acc += a[i * 3 + k] * b[k * 3 + j];
            out[i * 3 + j] = acc;
        }
    return out;
}

Mat3 mat_transpose(const Mat3& m)
{
    return {m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]};
}

Mat3 rot_z(double a)
{
    const double c = std::cos(a), s = std::sin(a);
    return {c, -s, 0, s, c, 0, 0, 0, 1};
}

Mat3 rot_y(double a)
{
    const double c = std::cos(a), s = std::sin(a);
    return {c, 0, s, 0, 1, 0, -s, 0, c};
}

Mat3 rot_x(double a)
{
    const double c = std::cos(a), s = std::sin(a);
    return {1, 0, 0, 0, c, -s, 0, s, c};
}

// ---- distortion polynomial --------------------------------------------------

DistortionPoly::DistortionPoly(double a1, double a2, double a3, double a4, double theta_max)
    : a_{a1, a2, a3, a4}, theta_max_(theta_max)
{
    if (!(theta_max > 0.0))
        throw std::invalid_argument("DistortionPoly: theta_max must be positive");
    // strict monotonicity on [0, theta_max], sampled derivative
    const int samples = 2048;
    for (int i = 0; i <= samples; ++i)
    {
        const double t = theta_max * static_cast<double>(i) / samples;
        const double dr = a_[0] + 2 * a_[1] * t + 3 * a_[2] * t * t + 4 * a_[3] * t * t * t;
        if (!(dr > 0.0))
            throw std::invalid_argument(
                "DistortionPoly: r(theta) is not strictly increasing at theta=" +
                std::to_string(t));
    }
    max_radius_ = eval(theta_max);
}

double DistortionPoly::eval(double t) const
{
    return ((a_[3] * t + a_[2]) * t + a_[1]) * t * t + a_[0] * t;
}

double DistortionPoly::radius(double theta) const
{
    if (theta < 0.0 || theta > theta_max_)
        throw std::domain_error("DistortionPoly::radius: theta " + std::to_string(theta) +
                                " outside [0, " + std::to_string(theta_max_) + "]");
    return eval(theta);
}

double DistortionPoly::theta(double radius) const
{
    if (radius < 0.0 || radius > max_radius_)
        throw std::domain_error("DistortionPoly::theta: radius " + std::to_string(radius) +
                                " beyond image circle " + std::to_string(max_radius_));
    if (radius == 0.0)
        return 0.0;
    // bisection; valid because r is strictly monotone
    double lo = 0.0, hi = theta_max_;
    for (int i = 0; i < 200; ++i)
    {
        const double mid = 0.5 * (lo + hi);
        const double r = eval(mid);
        if (std::abs(r - radius) < 1e-12)
            return mid;
        if (r < radius)
            lo = mid;
        else
            hi = mid;
    }
    return 0.5 * (lo + hi);
}

// ---- cameras ----------------------------------------------------------------

void CameraIntrinsics::validate() const
{
    if (cx < 0 || cx > static_cast<double>(width - 1) || cy < 0 ||
        cy > static_cast<double>(height - 1))
        throw std::invalid_argument("CameraIntrinsics: principal point outside image");
}

CameraExtrinsics CameraExtrinsics::from_pose(const Vec3& position, double yaw, double pitch,
                                             double roll)
{
    // Base orientation looks along +x world with image right = -y world
    // (right-hand ego frame: x forward, y left, z up) and image down = -z.
    const Mat3 base{0, 0, 1, -1, 0, 0, 0, -1, 0};
    const Mat3 roll_cam = rot_z(roll);  // about the optical axis
    Mat3 cam_to_world = mat_mul(rot_z(yaw), mat_mul(rot_y(-pitch), mat_mul(base, roll_cam)));
    CameraExtrinsics e;
    e.rot_world_to_cam = mat_transpose(cam_to_world);
    e.center = position;
    e.validate();
    return e;
}

void CameraExtrinsics::validate() const
{
    const Mat3& r = rot_world_to_cam;
    const Mat3 rrt = mat_mul(r, mat_transpose(r));
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
        {
            const double expect = i == j ? 1.0 : 0.0;
            if (std::abs(rrt[i * 3 + j] - expect) > 1e-9)
                throw std::invalid_argument("CameraExtrinsics: rotation is not orthonormal");
        }
    const double det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6]) +
                       r[2] * (r[3] * r[7] - r[4] * r[6]);
    if (std::abs(det - 1.0) > 1e-9)
        throw std::invalid_argument("CameraExtrinsics: rotation determinant is not +1");
}

Vec3 CameraExtrinsics::world_to_cam(const Vec3& p) const
{
    return mat_apply(rot_world_to_cam, vsub(p, center));
}

Vec3 CameraExtrinsics::cam_dir_to_world(const Vec3& d) const
{
    return mat_apply(mat_transpose(rot_world_to_cam), d);
}

std::array<double, 2> BEVGrid::cell_metric(std::size_t row, std::size_t col) const
{
    return {(center_row() - static_cast<double>(row)) * cell_m,
            (center_col() - static_cast<double>(col)) * cell_m};
}

std::array<double, 2> BEVGrid::metric_to_cell(double x_fwd, double y_left) const
{
    return {center_col() - y_left / cell_m, center_row() - x_fwd / cell_m};
}

Projection project_point(const Camera& cam, const Vec3& world)
{
    Projection out;
    const Vec3 pc = cam.extr.world_to_cam(world);
    const double rho = std::hypot(pc[0], pc[1]);
    const double dist = vnorm(pc);
    if (dist < 1e-12)
        return out;  // point at the camera center
    const double theta = std::atan2(rho, pc[2]);
    if (theta > cam.intr.poly.theta_max())
    {
        out.u = out.v = std::numeric_limits<double>::quiet_NaN();
        return out;
    }
    const double r = cam.intr.poly.radius(theta);
    if (rho < 1e-12)
    {
        out.u = cam.intr.cx;
        out.v = cam.intr.cy;
    }
    else
    {
        out.u = cam.intr.cx + r * pc[0] / rho;
        out.v = cam.intr.cy + r * pc[1] / rho;
    }
    out.visible = out.u >= 0.0 && out.u <= static_cast<double>(cam.intr.width - 1) &&
                  out.v >= 0.0 && out.v <= static_cast<double>(cam.intr.height - 1);
    return out;
}

Ray unproject_pixel(const Camera& cam, double u, double v)
{
    const double du = u - cam.intr.cx;
    const double dv = v - cam.intr.cy;
    const double rho = std::hypot(du, dv);
    Vec3 dir_cam;
    if (rho < 1e-12)
        dir_cam = {0, 0, 1};
    else
    {
        const double theta = cam.intr.poly.theta(rho);
        const double s = std::sin(theta);
        dir_cam = {s * du / rho, s * dv / rho, std::cos(theta)};
    }
    return Ray{cam.extr.center, cam.extr.cam_dir_to_world(dir_cam)};
}

RefPoints bev_reference_points(const BEVGrid& grid, const CameraRig& rig)
{
    RefPoints rp;
    rp.n_query = grid.queries();
    rp.n_cam = rig.cams.size();
    rp.n_anchor = grid.z_anchors.size();
    rp.uv.assign(rp.n_query * rp.n_cam * rp.n_anchor * 2, 0.0);
    rp.anchor_visible.assign(rp.n_query * rp.n_cam * rp.n_anchor, 0);
    rp.mask.assign(rp.n_query * rp.n_cam, 0);

    std::size_t q = 0;
    for (std::size_t row = 0; row < grid.h; ++row)
        for (std::size_t col = 0; col < grid.w; ++col, ++q)
        {
            const auto [x, y] = grid.cell_metric(row, col);
            for (std::size_t c = 0; c < rp.n_cam; ++c)
            {
                bool any = false;
                for (std::size_t a = 0; a < rp.n_anchor; ++a)
                {
                    const Projection pr =
                        project_point(rig.cams[c], Vec3{x, y, grid.z_anchors[a]});
                    const std::size_t base = rp.uv_index(q, c, a);
                    if (pr.visible)
                    {
                        rp.uv[base] = pr.u;
                        rp.uv[base + 1] = pr.v;
                        rp.anchor_visible[(q * rp.n_cam + c) * rp.n_anchor + a] = 1;
                        any = true;
                    }
                }
                rp.mask[q * rp.n_cam + c] = any ? 1 : 0;
            }
        }
    return rp;
}

Tensor anisotropy_heatmap(const CameraIntrinsics& intr)
{
    const double nan = std::numeric_limits<double>::quiet_NaN();
    Tensor out({intr.height, intr.width}, nan);
    const double usable = intr.poly.max_radius() - 0.75;  // margin for the 0.5 px probes

    // pixel -> theta * unit image direction; isotropic iff distortion is
    // locally equidistant
    const auto nu = [&](double u, double v, double& nx, double& ny) {
        const double du = u - intr.cx;
        const double dv = v - intr.cy;
        const double rho = std::hypot(du, dv);
        if (rho < 1e-9)
        {
            const double k = 1.0 / intr.poly.a1();
            nx = du * k;
            ny = dv * k;
            return;
        }
        const double theta = intr.poly.theta(rho);
        nx = theta * du / rho;
        ny = theta * dv / rho;
    };

    for (std::size_t iv = 0; iv < intr.height; ++iv)
        for (std::size_t iu = 0; iu < intr.width; ++iu)
        {
            const double u = static_cast<double>(iu);
            const double v = static_cast<double>(iv);
            const double rho = std::hypot(u - intr.cx, v - intr.cy);
            if (rho >= usable)
                continue;
            double xp, yp, xm, ym;
            double j00, j10, j01, j11;
            nu(u + 0.5, v, xp, yp);
            nu(u - 0.5, v, xm, ym);
            j00 = xp - xm;
            j10 = yp - ym;
            nu(u, v + 0.5, xp, yp);
            nu(u, v - 0.5, xm, ym);
            j01 = xp - xm;
            j11 = yp - ym;
            // singular values of the 2x2 Jacobian via its Gram matrix
            const double e = j00 * j00 + j01 * j01 + j10 * j10 + j11 * j11;
            const double det = j00 * j11 - j01 * j10;
            const double disc = std::sqrt(std::max(0.0, e * e - 4.0 * det * det));
            const double smax = std::sqrt(std::max(0.0, 0.5 * (e + disc)));
            const double smin = std::sqrt(std::max(0.0, 0.5 * (e - disc)));
            if (smin <= 0.0)
                continue;
            out.at({iv, iu}) = std::log10(smax / smin);
        }
    return out;
}

CameraRig default_rig(std::size_t img_w, std::size_t img_h)
{
    const double scale = static_cast<double>(img_w) / 64.0;
    const double theta_max = deg2rad(95.0);
    CameraRig rig;
    const struct {
        Vec3 pos;
        double yaw_deg;
    } mounts[4] = {
        {{2.0, 0.0, 1.0}, 0.0},
        {{0.0, 1.0, 1.0}, 90.0},
        {{-2.0, 0.0, 1.0}, 180.0},
        {{0.0, -1.0, 1.0}, 270.0},
    };
    for (const auto& m : mounts)
    {
        Camera cam{CameraIntrinsics{DistortionPoly(22.0 * scale, -1.5 * scale, 0.0, 0.0, theta_max),
                                    (static_cast<double>(img_w) - 1.0) / 2.0,
                                    (static_cast<double>(img_h) - 1.0) / 2.0, img_w, img_h},
                   CameraExtrinsics{},
                   deg2rad(m.yaw_deg),
                   deg2rad(-65.0),
                   0.0};
        cam.extr = CameraExtrinsics::from_pose(m.pos, cam.yaw, cam.pitch, cam.roll);
        cam.intr.validate();
        rig.cams.push_back(std::move(cam));
    }
    return rig;
}

namespace {

std::map<std::string, std::string> parse_kv_file(const std::filesystem::path& path)
{
    std::ifstream is(path);
    if (!is)
        throw std::runtime_error("cannot open rig file '" + path.string() + "'");
    std::map<std::string, std::string> kv;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line))
    {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos)
            line.resize(hash);
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
        {
            if (line.find_first_not_of(" \t\r") != std::string::npos)
                throw std::runtime_error("rig file '" + path.string() + "' line " +
                                         std::to_string(lineno) + ": expected key = value");
            continue;
        }
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return kv;
}

double want_num(const std::map<std::string, std::string>& kv, const std::string& key)
{
    auto it = kv.find(key);
    if (it == kv.end())
        throw std::runtime_error("rig file: missing key '" + key + "'");
    return std::stod(it->second);
}

}  // namespace

CameraRig load_rig(const std::filesystem::path& path)
{
    const auto kv = parse_kv_file(path);
    const auto n = static_cast<std::size_t>(want_num(kv, "cameras"));
    if (n < 1)
        throw std::runtime_error("rig file: cameras must be >= 1");
    CameraRig rig;
    for (std::size_t i = 0; i < n; ++i)
    {
        const std::string p = "cam" + std::to_string(i) + ".";
        const double fov = want_num(kv, p + "fov_deg");
        Camera cam{
            CameraIntrinsics{DistortionPoly(want_num(kv, p + "a1"), want_num(kv, p + "a2"),
                                            want_num(kv, p + "a3"), want_num(kv, p + "a4"),
                                            deg2rad(fov / 2.0)),
                             want_num(kv, p + "cx"), want_num(kv, p + "cy"),
                             static_cast<std::size_t>(want_num(kv, p + "width")),
                             static_cast<std::size_t>(want_num(kv, p + "height"))},
            CameraExtrinsics{},
            deg2rad(want_num(kv, p + "yaw_deg")),
            deg2rad(want_num(kv, p + "pitch_deg")),
            deg2rad(want_num(kv, p + "roll_deg"))};
        cam.extr = CameraExtrinsics::from_pose(
            Vec3{want_num(kv, p + "x"), want_num(kv, p + "y"), want_num(kv, p + "z")}, cam.yaw,
            cam.pitch, cam.roll);
        cam.intr.validate();
        rig.cams.push_back(std::move(cam));
    }
    return rig;
}

void save_rig(const CameraRig& rig, const std::filesystem::path& path)
{
    std::ofstream os(path);
    if (!os)
        throw std::runtime_error("cannot write rig file '" + path.string() + "'");
    os.precision(17);
    os << "cameras = " << rig.cams.size() << '\n';
    for (std::size_t i = 0; i < rig.cams.size(); ++i)
    {
        const Camera& c = rig.cams[i];
        const std::string p = "cam" + std::to_string(i) + ".";
        os << p << "a1 = " << c.intr.poly.a1() << '\n';
        os << p << "a2 = " << c.intr.poly.a2() << '\n';
        os << p << "a3 = " << c.intr.poly.a3() << '\n';
        os << p << "a4 = " << c.intr.poly.a4() << '\n';
        os << p << "cx = " << c.intr.cx << '\n';
        os << p << "cy = " << c.intr.cy << '\n';
        os << p << "width = " << c.intr.width << '\n';
        os << p << "height = " << c.intr.height << '\n';
        os << p << "fov_deg = " << rad2deg(c.intr.poly.theta_max() * 2.0) << '\n';
        os << p << "yaw_deg = " << rad2deg(c.yaw) << '\n';
        os << p << "pitch_deg = " << rad2deg(c.pitch) << '\n';
        os << p << "roll_deg = " << rad2deg(c.roll) << '\n';
        os << p << "x = " << c.extr.center[0] << '\n';
        os << p << "y = " << c.extr.center[1] << '\n';
        os << p << "z = " << c.extr.center[2] << '\n';
    }
}

}  // namespace fbev
