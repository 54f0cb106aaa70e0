// Copyright (c) 2026 fbev contributors.
// SPDX-License-Identifier: Apache-2.0

#include "fbev/synth.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace fbev {

namespace {

constexpr double kVehicleHalfLen = 2.1;
constexpr double kVehicleHalfWid = 0.95;

std::uint64_t scene_seed(std::uint64_t master, std::size_t index)
{
    Rng mix(master);
    return mix.fork(0x5ce9e + index).next_u64();
}

}  // namespace

std::uint8_t StampedMap::nearest(double wx, double wy) const
{
    const double fc = (wx + extent) / res;
    const double fr = (wy + extent) / res;
    if (fc < 0.0 || fr < 0.0)
        return kVoid;
    const auto col = static_cast<std::size_t>(fc);
    const auto row = static_cast<std::size_t>(fr);
    if (col >= cells || row >= cells)
        return kVoid;
    return map[row * cells + col];
}

std::array<double, 2> StampedMap::to_cell_coords(double wx, double wy) const
{
    return {(wx + extent) / res - 0.5, (wy + extent) / res - 0.5};
}

bool SyntheticScene::in_ego_box(double wx, double wy, const ScenePose& pose)
{
    const double c = std::cos(pose.yaw), s = std::sin(pose.yaw);
    const double dx = wx - pose.x, dy = wy - pose.y;
    const double u = c * dx + s * dy;
    const double v = -s * dx + c * dy;
    return std::abs(u) <= kEgoHalfLen && std::abs(v) <= kEgoHalfWid;
}

SyntheticScene::SyntheticScene(std::uint64_t seed, const SynthParams& params)
    : seed_(seed), params_(params)
{
    if (params.map_cells < 16 || !(params.res_m > 0.0))
        throw std::invalid_argument("SyntheticScene: bad map extents");
    Rng rng(seed);

    static_map_.cells = params.map_cells;
    static_map_.res = params.res_m;
    static_map_.extent = static_cast<double>(params.map_cells) * params.res_m / 2.0;
    static_map_.map.assign(params.map_cells * params.map_cells, kVegetation);
    const double e = static_map_.extent;
    const std::size_t n = params.map_cells;

    const auto center_of = [&](std::size_t row, std::size_t col) {
        return std::array<double, 2>{(static_cast<double>(col) + 0.5) * params.res_m - e,
                                     (static_cast<double>(row) + 0.5) * params.res_m - e};
    };

    // vegetation is the base terrain, broken up by void patches (unmapped
    // ground); the road corridor paints over both
    for (std::size_t pidx = 0; pidx < params.void_patches; ++pidx)
    {
        const double px = rng.uniform(-0.9 * e, 0.9 * e);
        const double py = rng.uniform(-0.9 * e, 0.9 * e);
        const double rx = rng.uniform(1.2, 4.0);
        const double ry = rng.uniform(1.2, 4.0);
        for (std::size_t row = 0; row < n; ++row)
            for (std::size_t col = 0; col < n; ++col)
            {
                const auto [wx, wy] = center_of(row, col);
                const double qx = (wx - px) / rx, qy = (wy - py) / ry;
                if (qx * qx + qy * qy <= 1.0)
                    static_map_.map[row * n + col] = kVoid;
            }
    }

    // straight road corridor along x with sidewalk margins
    const double road_center = rng.uniform(-0.8, 0.8);
    const double road_half = rng.uniform(3.0, 4.5);
    const double walk_width = rng.uniform(1.5, 2.5);
    for (std::size_t row = 0; row < n; ++row)
        for (std::size_t col = 0; col < n; ++col)
        {
            const auto [wx, wy] = center_of(row, col);
            (void)wx;
            const double d = std::abs(wy - road_center);
            if (d <= road_half)
                static_map_.map[row * n + col] = kRoad;
            else if (d <= road_half + walk_width)
                static_map_.map[row * n + col] = kSidewalk;
        }

    // ego trajectory: straight or gentle arc, at least three poses
    const std::size_t poses = params.frames < 3 ? 3 : params.frames;
    const double speed = rng.uniform(1.2, 2.2);
    const double yaw_rate = rng.uniform(0.0, 1.0) < 0.4 ? rng.uniform(-0.12, 0.12) : 0.0;
    const double dt = 0.5;
    ScenePose pose;
    trajectory_.push_back(pose);
    for (std::size_t k = 1; k < poses; ++k)
    {
        pose.x += std::cos(pose.yaw) * speed * dt;
        pose.y += std::sin(pose.yaw) * speed * dt;
        pose.yaw += yaw_rate * dt;
        trajectory_.push_back(pose);
    }

    // parked vehicles; rejected if any painted cell would touch the ego
    // footprint at any trajectory pose
    const std::size_t want =
        params.min_vehicles + rng.uniform_index(params.max_vehicles - params.min_vehicles + 1);
    std::size_t placed = 0;
    for (int attempt = 0; attempt < 80 && placed < want; ++attempt)
    {
        double vx, vy;
        if (placed == 0)
        {
            // keep the first vehicle inside the BEV range, ahead of the ego
            vx = rng.uniform(4.5, 7.5);
            vy = road_center + rng.uniform(-road_half + 1.0, road_half - 1.0);
        }
        else
        {
            vx = rng.uniform(-(e - 3.0), e - 3.0);
            vy = road_center + rng.uniform(-(road_half + walk_width), road_half + walk_width);
        }
        const double vyaw = rng.uniform(-0.18, 0.18);
        const double cy = std::cos(vyaw), sy = std::sin(vyaw);

        std::vector<std::size_t> body;
        bool collides = false;
        const double reach = kVehicleHalfLen + 0.5;
        const auto lo_col = static_cast<std::ptrdiff_t>((vx - reach + e) / params.res_m);
        const auto hi_col = static_cast<std::ptrdiff_t>((vx + reach + e) / params.res_m) + 1;
        const auto lo_row = static_cast<std::ptrdiff_t>((vy - reach + e) / params.res_m);
        const auto hi_row = static_cast<std::ptrdiff_t>((vy + reach + e) / params.res_m) + 1;
        for (std::ptrdiff_t row = lo_row; row <= hi_row && !collides; ++row)
            for (std::ptrdiff_t col = lo_col; col <= hi_col; ++col)
            {
                if (row < 0 || col < 0 || row >= static_cast<std::ptrdiff_t>(n) ||
                    col >= static_cast<std::ptrdiff_t>(n))
                    continue;
                const auto [wx, wy] = center_of(static_cast<std::size_t>(row),
                                                static_cast<std::size_t>(col));
                const double du = cy * (wx - vx) + sy * (wy - vy);
                const double dv = -sy * (wx - vx) + cy * (wy - vy);
                if (std::abs(du) > kVehicleHalfLen || std::abs(dv) > kVehicleHalfWid)
                    continue;
                for (const ScenePose& tp : trajectory_)
                    if (in_ego_box(wx, wy, tp))
                    {
                        collides = true;
                        break;
                    }
                if (collides)
                    break;
                body.push_back(static_cast<std::size_t>(row) * n +
                               static_cast<std::size_t>(col));
            }
        if (collides || body.empty())
            continue;
        for (std::size_t idx : body)
            static_map_.map[idx] = kVehicle;
        ++placed;
    }
}

StampedMap SyntheticScene::stamped(const ScenePose& pose) const
{
    StampedMap out = static_map_;
    const std::size_t n = out.cells;
    const double reach = kEgoHalfLen + 0.5;
    const auto lo_col = static_cast<std::ptrdiff_t>((pose.x - reach + out.extent) / out.res);
    const auto hi_col = static_cast<std::ptrdiff_t>((pose.x + reach + out.extent) / out.res) + 1;
    const auto lo_row = static_cast<std::ptrdiff_t>((pose.y - reach + out.extent) / out.res);
    const auto hi_row = static_cast<std::ptrdiff_t>((pose.y + reach + out.extent) / out.res) + 1;
    for (std::ptrdiff_t row = lo_row; row <= hi_row; ++row)
        for (std::ptrdiff_t col = lo_col; col <= hi_col; ++col)
        {
            if (row < 0 || col < 0 || row >= static_cast<std::ptrdiff_t>(n) ||
                col >= static_cast<std::ptrdiff_t>(n))
                continue;
            const double wx = (static_cast<double>(col) + 0.5) * out.res - out.extent;
            const double wy = (static_cast<double>(row) + 0.5) * out.res - out.extent;
            if (in_ego_box(wx, wy, pose))
                out.map[static_cast<std::size_t>(row) * n + static_cast<std::size_t>(col)] = kEgo;
        }
    return out;
}

// ---- renderer ---------------------------------------------------------------

RigRenderer::RigRenderer(const CameraRig& rig) : rig_(rig)
{
    rays_.resize(rig_.cams.size());
    for (std::size_t c = 0; c < rig_.cams.size(); ++c)
    {
        const CameraIntrinsics& intr = rig_.cams[c].intr;
        rays_[c].resize(intr.width * intr.height);
        for (std::size_t py = 0; py < intr.height; ++py)
            for (std::size_t px = 0; px < intr.width; ++px)
            {
                const double du = static_cast<double>(px) - intr.cx;
                const double dv = static_cast<double>(py) - intr.cy;
                const double rho = std::hypot(du, dv);
                if (rho > intr.poly.max_radius())
                    continue;  // outside the image circle
                PixelRay& ray = rays_[c][py * intr.width + px];
                ray.valid = true;
                if (rho < 1e-12)
                    ray.dir_cam = {0, 0, 1};
                else
                {
                    const double theta = intr.poly.theta(rho);
                    const double s = std::sin(theta);
                    ray.dir_cam = {s * du / rho, s * dv / rho, std::cos(theta)};
                }
            }
    }
}

bool RigRenderer::ground_point(const ScenePose& pose, std::size_t cam_index, std::size_t px,
                               std::size_t py, double& wx, double& wy) const
{
    const Camera& cam = rig_.cams[cam_index];
    const PixelRay& ray = rays_[cam_index][py * cam.intr.width + px];
    if (!ray.valid)
        return false;
    const double cy = std::cos(pose.yaw), sy = std::sin(pose.yaw);
    const Vec3 dir_ego = cam.extr.cam_dir_to_world(ray.dir_cam);
    const Vec3 dir = {cy * dir_ego[0] - sy * dir_ego[1], sy * dir_ego[0] + cy * dir_ego[1],
                      dir_ego[2]};
    const Vec3& mount = cam.extr.center;
    const Vec3 origin = {pose.x + cy * mount[0] - sy * mount[1],
                         pose.y + sy * mount[0] + cy * mount[1], mount[2]};
    if (dir[2] >= -1e-9)
        return false;  // ray misses the ground
    const double t = -origin[2] / dir[2];
    wx = origin[0] + t * dir[0];
    wy = origin[1] + t * dir[1];
    return true;
}

namespace {

std::uint8_t blend_class(const StampedMap& map, double wx, double wy)
{
    const auto [fc, fr] = map.to_cell_coords(wx, wy);
    const double ffc = std::floor(fc), ffr = std::floor(fr);
    const double ax = fc - ffc, ay = fr - ffr;
    const auto c0 = static_cast<std::ptrdiff_t>(ffc);
    const auto r0 = static_cast<std::ptrdiff_t>(ffr);
    const auto& palette = class_palette();

    std::uint8_t classes[4];
    double weights[4];
    double blend[3] = {0, 0, 0};
    int k = 0;
    for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx, ++k)
        {
            const std::ptrdiff_t col = c0 + dx, row = r0 + dy;
            std::uint8_t cls = kVoid;
            if (col >= 0 && row >= 0 && col < static_cast<std::ptrdiff_t>(map.cells) &&
                row < static_cast<std::ptrdiff_t>(map.cells))
                cls = map.at_cell(static_cast<std::size_t>(row), static_cast<std::size_t>(col));
            classes[k] = cls;
            weights[k] = (dx ? ax : 1 - ax) * (dy ? ay : 1 - ay);
            for (int ch = 0; ch < 3; ++ch)
                blend[ch] += weights[k] * palette[cls][ch];
        }

    // quantize back to the palette, restricted to the contributing classes
    std::uint8_t best = classes[0];
    double best_d = 1e300;
    for (int i = 0; i < 4; ++i)
    {
        const auto& col = palette[classes[i]];
        const double d = (blend[0] - col[0]) * (blend[0] - col[0]) +
                         (blend[1] - col[1]) * (blend[1] - col[1]) +
                         (blend[2] - col[2]) * (blend[2] - col[2]);
        if (d < best_d)
        {
            best_d = d;
            best = classes[i];
        }
    }
    return best;
}

}  // namespace

std::uint8_t RigRenderer::pixel_class(const StampedMap& map, const ScenePose& pose,
                                      std::size_t cam_index, std::size_t px, std::size_t py) const
{
    double wx, wy;
    if (!ground_point(pose, cam_index, px, py, wx, wy))
        return kVoid;
    return blend_class(map, wx, wy);
}

Tensor RigRenderer::render(const StampedMap& map, const ScenePose& pose,
                           std::size_t cam_index) const
{
    const Camera& cam = rig_.cams[cam_index];
    const std::size_t h = cam.intr.height, w = cam.intr.width;
    Tensor img({3, h, w}, 0.0, Dtype::Real32);
    const auto& palette = class_palette();
    for (std::size_t py = 0; py < h; ++py)
        for (std::size_t px = 0; px < w; ++px)
        {
            const std::uint8_t cls = pixel_class(map, pose, cam_index, px, py);
            for (std::size_t ch = 0; ch < 3; ++ch)
                img[(ch * h + py) * w + px] =
                    static_cast<double>(static_cast<float>(palette[cls][ch]));
        }
    return img;
}

Tensor bev_ground_truth(const SyntheticScene& scene, const ScenePose& pose, const BEVGrid& grid)
{
    const StampedMap map = scene.stamped(pose);
    Tensor gt({grid.h, grid.w}, 0.0, Dtype::Real32);
    const double cy = std::cos(pose.yaw), sy = std::sin(pose.yaw);
    std::size_t q = 0;
    for (std::size_t row = 0; row < grid.h; ++row)
        for (std::size_t col = 0; col < grid.w; ++col, ++q)
        {
            const auto [x, y] = grid.cell_metric(row, col);
            const double wx = pose.x + cy * x - sy * y;
            const double wy = pose.y + sy * x + cy * y;
            gt[q] = static_cast<double>(map.nearest(wx, wy));
        }
    return gt;
}

std::vector<SceneSample> render_scene_sequence(const SyntheticScene& scene,
                                               const RigRenderer& renderer, const BEVGrid& grid)
{
    std::vector<SceneSample> out;
    for (std::size_t f = 0; f < scene.params().frames; ++f)
    {
        const ScenePose& pose = scene.trajectory()[f];
        const StampedMap map = scene.stamped(pose);
        SceneSample sample;
        sample.pose = pose;
        for (std::size_t c = 0; c < renderer.rig().cams.size(); ++c)
            sample.images.push_back(renderer.render(map, pose, c));
        sample.bev_gt = bev_ground_truth(scene, pose, grid);
        out.push_back(std::move(sample));
    }
    return out;
}

// ---- dataset I/O -------------------------------------------------------------

namespace {

std::string scene_dir(std::size_t s)
{
    std::ostringstream os;
    os << "scene_" << std::setw(4) << std::setfill('0') << s;
    return os.str();
}

std::string frame_dir(std::size_t f)
{
    std::ostringstream os;
    os << "frame_" << std::setw(2) << std::setfill('0') << f;
    return os.str();
}

}  // namespace

DatasetInfo write_dataset(const std::filesystem::path& root, const CameraRig& rig,
                          const BEVGrid& grid, const SynthParams& params, std::size_t scenes,
                          std::uint64_t seed, std::array<std::uint64_t, kNumClasses>* histogram)
{
    namespace fs = std::filesystem;
    fs::create_directories(root);
    save_rig(rig, root / "rig.txt");
    const RigRenderer renderer(rig);
    if (histogram)
        histogram->fill(0);

    std::ofstream manifest(root / "manifest.txt");
    if (!manifest)
        throw std::runtime_error("cannot write manifest in '" + root.string() + "'");
    manifest << "scenes " << scenes << '\n';
    manifest << "frames " << params.frames << '\n';
    manifest << "cameras " << rig.cams.size() << '\n';
    manifest << "seed " << seed << '\n';
    manifest << "rig rig.txt\n";

    for (std::size_t s = 0; s < scenes; ++s)
    {
        const SyntheticScene scene(scene_seed(seed, s), params);
        manifest << "scene_seed " << s << ' ' << scene.seed() << '\n';
        const auto samples = render_scene_sequence(scene, renderer, grid);
        for (std::size_t f = 0; f < samples.size(); ++f)
        {
            const fs::path dir = root / scene_dir(s) / frame_dir(f);
            fs::create_directories(dir);
            for (std::size_t c = 0; c < samples[f].images.size(); ++c)
                write_fbt(samples[f].images[c], dir / ("cam_" + std::to_string(c) + ".fbt"));
            write_fbt(samples[f].bev_gt, dir / "bev_gt.fbt");
            std::ofstream pose(dir / "pose.txt");
            pose << std::setprecision(17) << samples[f].pose.x << ' ' << samples[f].pose.y << ' '
                 << samples[f].pose.yaw << '\n';
            if (histogram)
                for (std::size_t i = 0; i < samples[f].bev_gt.size(); ++i)
                    ++(*histogram)[static_cast<std::size_t>(samples[f].bev_gt[i])];
        }
    }
    DatasetInfo info;
    info.root = root;
    info.scenes = scenes;
    info.frames = params.frames;
    info.cameras = rig.cams.size();
    info.seed = seed;
    return info;
}

DatasetInfo open_dataset(const std::filesystem::path& root)
{
    std::ifstream manifest(root / "manifest.txt");
    if (!manifest)
        throw std::runtime_error("cannot open dataset manifest in '" + root.string() + "'");
    DatasetInfo info;
    info.root = root;
    std::string key;
    while (manifest >> key)
    {
        if (key == "scenes")
            manifest >> info.scenes;
        else if (key == "frames")
            manifest >> info.frames;
        else if (key == "cameras")
            manifest >> info.cameras;
        else if (key == "seed")
            manifest >> info.seed;
        else
        {
            std::string rest;
            std::getline(manifest, rest);
        }
    }
    if (info.frames == 0 || info.cameras == 0)
        throw std::runtime_error("dataset manifest in '" + root.string() + "' is incomplete");
    return info;
}

std::vector<SceneSample> load_scene_sequence(const DatasetInfo& info, std::size_t scene)
{
    namespace fs = std::filesystem;
    std::vector<SceneSample> out;
    for (std::size_t f = 0; f < info.frames; ++f)
    {
        const fs::path dir = info.root / scene_dir(scene) / frame_dir(f);
        SceneSample sample;
        for (std::size_t c = 0; c < info.cameras; ++c)
            sample.images.push_back(read_fbt(dir / ("cam_" + std::to_string(c) + ".fbt")));
        sample.bev_gt = read_fbt(dir / "bev_gt.fbt");
        std::ifstream pose(dir / "pose.txt");
        if (!(pose >> sample.pose.x >> sample.pose.y >> sample.pose.yaw))
            throw std::runtime_error("malformed pose file '" + (dir / "pose.txt").string() + "'");
        out.push_back(std::move(sample));
    }
    return out;
}

std::array<double, 3> pose_delta(const ScenePose& prev, const ScenePose& cur)
{
    const double c = std::cos(prev.yaw), s = std::sin(prev.yaw);
    const double dx_w = cur.x - prev.x, dy_w = cur.y - prev.y;
    return {c * dx_w + s * dy_w, -s * dx_w + c * dy_w, cur.yaw - prev.yaw};
}

}  // namespace fbev
