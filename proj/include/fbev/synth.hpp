// Copyright (c) 2026 fbev contributors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "fbev/geometry.hpp"
#include "fbev/image_io.hpp"
#include "fbev/rng.hpp"
#include "fbev/tensor.hpp"

namespace fbev {

enum SceneClass : std::uint8_t {
    kVoid = 0,
    kRoad = 1,
    kSidewalk = 2,
    kVegetation = 3,
    kVehicle = 4,
    kEgo = 5,
};

struct ScenePose {
    double x = 0, y = 0, yaw = 0;
};

struct SynthParams {
    std::size_t map_cells = 200;
    double res_m = 0.2;
    std::size_t frames = 3;
    std::size_t void_patches = 5;
    std::size_t min_vehicles = 1, max_vehicles = 4;
};

/// Ground-plane class map with an ego footprint stamped at one pose; the
/// single source for rendering, ground truth and consistency checks.
struct StampedMap {
    std::size_t cells = 0;
    double res = 0.2;
    double extent = 0.0;  // half size in meters
    std::vector<std::uint8_t> map;

    std::uint8_t at_cell(std::size_t row, std::size_t col) const { return map[row * cells + col]; }
    /// Nearest-cell class; void outside the map.
    std::uint8_t nearest(double wx, double wy) const;
    /// Continuous cell coordinates (integers at cell centers).
    std::array<double, 2> to_cell_coords(double wx, double wy) const;
};

/// Procedurally generated ground scene: a road band with sidewalk margins,
/// vegetation patches and parked vehicles, plus a short ego trajectory.
class SyntheticScene {
  public:
    static constexpr double kEgoHalfLen = 1.95;
    static constexpr double kEgoHalfWid = 0.95;

    SyntheticScene(std::uint64_t seed, const SynthParams& params);

    std::uint64_t seed() const { return seed_; }
    const SynthParams& params() const { return params_; }
    const std::vector<ScenePose>& trajectory() const { return trajectory_; }
    const StampedMap& static_map() const { return static_map_; }

    /// Static map with the ego footprint stamped at the given pose.
    StampedMap stamped(const ScenePose& pose) const;
    static bool in_ego_box(double wx, double wy, const ScenePose& pose);

  private:
    std::uint64_t seed_;
    SynthParams params_;
    StampedMap static_map_;
    std::vector<ScenePose> trajectory_;
};

/// Per-camera pixel rays cached once per rig (intrinsics never change
/// between frames), making renders cheap.
class RigRenderer {
  public:
    explicit RigRenderer(const CameraRig& rig);

    const CameraRig& rig() const { return rig_; }

    /// Fisheye render of the stamped ground map: per pixel, invert the
    /// distortion to a ray, intersect the ground plane, then bilinear-blend
    /// the four neighboring cell colors and quantize back to the palette.
    /// Rays outside the image circle or missing the ground render void.
    Tensor render(const StampedMap& map, const ScenePose& pose, std::size_t cam_index) const;

    /// Class the renderer would assign to a pixel, or kVoid for sky/circle
    /// misses; used by the render/ground-truth consistency check.
    std::uint8_t pixel_class(const StampedMap& map, const ScenePose& pose, std::size_t cam_index,
                             std::size_t px, std::size_t py) const;

    /// Ground intersection of a pixel ray; returns false for misses.
    bool ground_point(const ScenePose& pose, std::size_t cam_index, std::size_t px, std::size_t py,
                      double& wx, double& wy) const;

  private:
    CameraRig rig_;
    struct PixelRay {
        bool valid = false;
        Vec3 dir_cam{};
    };
    std::vector<std::vector<PixelRay>> rays_;
};

/// Nearest-cell lookup of the stamped scene on the BEV grid in the ego
/// frame at `pose`.
Tensor bev_ground_truth(const SyntheticScene& scene, const ScenePose& pose, const BEVGrid& grid);

struct SceneSample {
    std::vector<Tensor> images;  // per camera, [3,H,W]
    Tensor bev_gt;               // [H_bev, W_bev] class indices
    ScenePose pose;              // absolute pose of this frame
};

/// Renders all frames of a scene through the rig.
std::vector<SceneSample> render_scene_sequence(const SyntheticScene& scene,
                                               const RigRenderer& renderer, const BEVGrid& grid);

// ---- dataset I/O -----------------------------------------------------------
// layout: <root>/manifest.txt, <root>/rig.txt,
//         <root>/scene_XXXX/frame_YY/{cam_0..N.fbt, bev_gt.fbt, pose.txt}

struct DatasetInfo {
    std::filesystem::path root;
    std::size_t scenes = 0;
    std::size_t frames = 0;
    std::size_t cameras = 0;
    std::uint64_t seed = 0;
};

DatasetInfo write_dataset(const std::filesystem::path& root, const CameraRig& rig,
                          const BEVGrid& grid, const SynthParams& params, std::size_t scenes,
                          std::uint64_t seed, std::array<std::uint64_t, kNumClasses>* histogram);

DatasetInfo open_dataset(const std::filesystem::path& root);
std::vector<SceneSample> load_scene_sequence(const DatasetInfo& info, std::size_t scene);

/// Motion of `cur` relative to `prev`, expressed in the previous frame:
/// (dx, dy, dyaw) as consumed by ego alignment.
std::array<double, 3> pose_delta(const ScenePose& prev, const ScenePose& cur);

}  // namespace fbev
