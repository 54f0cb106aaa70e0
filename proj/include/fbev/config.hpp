// Copyright (c) 2026 fbev contributors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <string>
#include <vector>

namespace fbev {

/// Whole-run configuration. Every key has a default; unknown keys are
/// rejected. File format: UTF-8 text, `section.key = value` lines, `#`
/// comments.
struct RunConfig {
    std::string profile = "desk";
    std::uint64_t seed = 42;

    // grid
    std::size_t grid_h = 32, grid_w = 32;
    double grid_cell_m = 0.5;
    std::vector<double> grid_z_anchors = {0.0, 0.5};

    // image / rig
    std::size_t img_h = 64, img_w = 64;
    std::string rig_file;  // empty: built-in default rig

    // backbone
    std::size_t patch = 8;
    std::size_t backbone_dim = 64;
    std::size_t backbone_layers = 4;

    // encoder
    std::size_t enc_blocks = 2;
    std::size_t enc_dim = 64;
    std::size_t k_points = 4;
    std::size_t mc_train = 4;
    std::size_t mc_eval = 32;
    double xi = 1e-6;
    double log_var_prior = -4.0;
    double lambda_kl = 0.01;
    double kappa = 10.0;
    double delta = 0.8;
    double enc_dropout = 0.1;
    std::string uncertainty_fusion = "on";  // on | uniform
    std::string distance_gating = "on";     // on | off

    // decoder / loss
    std::size_t decoder_upscale = 1;
    double focal_alpha = 0.25;
    double focal_gamma = 2.0;

    // optimizer
    double lr = 3e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;
    double epoch_decay = 0.99;

    // training
    std::size_t steps = 300;   // used when epochs == 0
    std::size_t epochs = 0;    // when > 0, steps = epochs * ceil(scenes/batch)
    std::size_t batch = 1;
    std::size_t seq_len = 3;

    // synthesis
    std::size_t synth_scenes = 40;
    std::size_t synth_frames = 3;
    std::size_t scene_cells = 200;
    double scene_res_m = 0.2;

    void validate() const;
};

RunConfig desk_profile();
RunConfig full_profile();
RunConfig profile_by_name(const std::string& name);

/// Applies one `section.key=value` override; throws on unknown keys or
/// unparsable values.
void apply_config_kv(RunConfig& cfg, const std::string& key, const std::string& value);

RunConfig parse_config(std::istream& is, RunConfig base);
RunConfig parse_config_file(const std::filesystem::path& path, RunConfig base);
std::string serialize_config(const RunConfig& cfg);

}  // namespace fbev
