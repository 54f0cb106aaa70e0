// Copyright (c) 2026 fbev contributors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <iosfwd>

#include "fbev/bev_encoder.hpp"
#include "fbev/config.hpp"
#include "fbev/decoder.hpp"
#include "fbev/drme.hpp"
#include "fbev/metrics.hpp"
#include "fbev/optim.hpp"
#include "fbev/synth.hpp"

namespace fbev {

/// Everything needed to run the surround-view pipeline: geometry tables,
/// module configs and the parameter store.
struct Model {
    RunConfig cfg;
    CameraRig rig;
    BEVGrid grid;
    BackboneConfig backbone;
    EncoderConfig encoder;
    FocalConfig focal;
    RefPoints refs;
    Tensor gamma;      // [N_q,1] distance gate
    Tensor base_pts;   // [N_q,2] query cell centers for temporal sampling
    double feat_scale = 1.0;  // image px -> feature map px
    ParamStore params;

    std::size_t target_h() const { return grid.h * cfg.decoder_upscale; }
    std::size_t target_w() const { return grid.w * cfg.decoder_upscale; }
};

Model build_model(const RunConfig& cfg);
Model load_model(const RunConfig& cfg, const std::filesystem::path& checkpoint);

struct SequenceOutput {
    Var total;       // focal + lambda_kl * kl
    Var focal_term;  // scalar
    Var kl_term;     // scalar, mean over U-SCA invocations
    Var logits;      // [C_stuff, target_h, target_w], final frame
    Tensor conf;     // [N_q] diagnostic from the last U-SCA
};

/// Runs DRME + the encoder over the frame sequence (temporal recurrence
/// with ego alignment) and decodes the final frame.
SequenceOutput forward_sequence(Model& model, Tape& tape,
                                const std::vector<SceneSample>& frames, bool training,
                                Rng& noise);

Tensor upsample_labels_nearest(const Tensor& labels, std::size_t th, std::size_t tw);

struct PredictOutput {
    Tensor classes;   // [target_h, target_w] argmax map
    Tensor conf_map;  // [H_bev, W_bev]
    double focal = 0, kl = 0, total = 0;
};
PredictOutput predict_sequence(Model& model, const std::vector<SceneSample>& frames,
                               std::uint64_t noise_seed);

// ---- training ----------------------------------------------------------------

struct TrainLogRow {
    std::size_t step;
    double focal, kl, total;
};

struct TrainResult {
    std::filesystem::path checkpoint;
    std::vector<TrainLogRow> rows;
    double seconds = 0;
    std::size_t epochs_completed = 0;
};

struct TrainError : std::runtime_error {
    explicit TrainError(const std::string& what, std::size_t step_index)
        : std::runtime_error(what), step(step_index)
    {
    }
    std::size_t step;
};

/// Deterministic training loop: seeded shuffling, AdamW with per-epoch lr
/// decay, CSV logging (step,focal,kl,total) and per-epoch checkpoints.
/// Throws TrainError on a non-finite loss.
TrainResult train_model(const RunConfig& cfg, const std::filesystem::path& dataset,
                        const std::filesystem::path& out_dir, std::ostream* console);

// ---- evaluation ----------------------------------------------------------------

struct EvalRow {
    std::string name;
    std::array<double, kNumClasses - 1> iou{};  // classes 1..5
    double miou_value = 0;
};

struct EvalResult {
    EvalRow row;
    std::size_t scenes = 0;
};

EvalResult evaluate_model(Model& model, const std::filesystem::path& dataset,
                          const std::filesystem::path& out_dir, std::ostream* console);

/// Ablation rows in the fixed order baseline / +gating / +uncertainty /
/// +both, all evaluated from the same checkpoint.
std::vector<EvalRow> evaluate_ablation_table(const RunConfig& cfg,
                                             const std::filesystem::path& checkpoint,
                                             const std::filesystem::path& dataset,
                                             const std::filesystem::path& out_dir,
                                             std::ostream* console);

// ---- verification ----------------------------------------------------------------

struct GradcheckComponent {
    std::string name;
    double max_rel_err = 0;
    double seconds = 0;
    bool pass = false;
};

/// Finite-difference sweep over every sublayer plus the full objective on a
/// micro profile. corrupt_hook adds a negative-control component with a
/// deliberately wrong backward rule, which must be reported as a failure.
std::vector<GradcheckComponent> run_gradcheck(std::uint64_t seed, bool corrupt_hook);

/// Grid-overlay fisheye renders, anisotropy heatmaps and per-camera BEV
/// visibility masks.
void export_projection_debug(const RunConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace fbev
