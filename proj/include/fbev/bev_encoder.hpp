// Copyright (c) 2026 fbev contributors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>

#include "fbev/autodiff.hpp"
#include "fbev/geometry.hpp"

namespace fbev {

struct GatingConfig {
    double kappa = 10.0;   // sigmoid slope
    double delta = 0.8;    // near/far threshold in normalized distance

    void validate() const;
};

struct FusionConfig {
    std::size_t k_points = 4;   // deformable sampling points per camera/frame
    std::size_t mc_rounds = 4;  // Monte-Carlo rounds (diagnostics use more)
    double xi = 1e-6;           // weighting stabilizer
    double log_var_prior = -4.0;
    double lambda_kl = 0.01;
    bool uniform_weights = false;  // ablation: replace precision weights by 1

    void validate() const;
};

struct EncoderConfig {
    std::size_t blocks = 2;
    std::size_t dim = 64;
    double dropout_rate = 0.1;
    bool distance_gating = true;  // ablation flag; off fixes gamma = 0.5
    double logvar_min = -10.0, logvar_max = 4.0;
    GatingConfig gate;
    FusionConfig fusion;

    void validate() const;
};

/// Registers query embeddings and all per-block parameters ("enc." prefix).
void init_encoder_params(ParamStore& store, const EncoderConfig& cfg, std::size_t n_queries,
                         Rng& rng);

/// Initial query state: learned content embedding plus learned positional
/// embedding, [N_q, C].
Var initial_queries(Tape& tape, ParamStore& store);

/// Normalized distance of every BEV cell to the grid center O, |p-O|/R with
/// R = W/2; row-major [N_q].
Tensor center_distances(const BEVGrid& grid);

/// gamma = sigmoid(kappa * (delta - dbar)).
double gating_factor(double dbar, const GatingConfig& cfg);
/// Per-query gate column [N_q,1]; distance_gating=off gives all 0.5.
Tensor gating_vector(const BEVGrid& grid, const GatingConfig& cfg, bool enabled);

/// Deformable read of one feature map: softmax(K) attention over bilinear
/// samples at ref + 3*tanh(offset). refs are [N,2] feature-map coordinates;
/// offsets_raw [N,2K]; logits [N,K].
Var deformable_attend(Var map, const Tensor& refs, Var offsets_raw, Var logits);

struct UncertaintyEstimate {
    Var mu;      // [N,C]
    Var logvar;  // [N,C], clamped
};

/// Two-layer MLP heads for mean and clamped log-variance.
UncertaintyEstimate estimate_uncertainty(Tape& tape, ParamStore& store, const std::string& prefix,
                                         Var features, const EncoderConfig& cfg);

/// z = mu + exp(logvar/2) * eps with eps a fixed standard-normal draw.
Var reparameterize(Var mu, Var logvar, const Tensor& eps);

/// Precision-weighted masked fusion across cameras for one MC sample.
/// mask_cols holds one [N,1] column per camera.
Var precision_fuse(std::span<const Var> samples, std::span<const Var> variances,
                   std::span<const Tensor> mask_cols, double xi, bool uniform_weights);

struct McFusion {
    Var fused;    // [N,C] mean over MC rounds
    Tensor conf;  // [N] mean-channel unbiased variance across rounds (diagnostic)
};

/// Monte-Carlo fusion over mc_rounds reparameterized draws. Throws if
/// mc_rounds < 2 (the confidence estimate divides by rounds-1).
McFusion mc_fuse(Tape& tape, std::span<const UncertaintyEstimate> estimates,
                 std::span<const Tensor> mask_cols, const FusionConfig& cfg, Rng& rng);

/// Mean Gaussian KL against the zero-mean prior N(0, var_prior).
Var kl_regularizer(const UncertaintyEstimate& est, double log_var_prior);

struct UscaResult {
    Var queries;  // updated [N_q, C]
    Var kl;       // scalar, mean over cameras of kl_regularizer
    Tensor conf;  // [N_q] diagnostic
};

/// Uncertainty-aware spatial cross attention for one block: per-camera
/// anchor-averaged deformable reads, uncertainty heads, MC precision fusion,
/// then residual + layer norm. refs carry feature-map scaled coordinates.
UscaResult usca_block(Tape& tape, ParamStore& store, std::size_t block, Var queries,
                      std::span<const Var> camera_maps, const RefPoints& refs, double feat_scale,
                      const EncoderConfig& cfg, Rng& rng);

/// Gated two-frame temporal attention. base_pts are the query cell centers
/// in (col,row) coordinates; gamma is a [N_q,1] constant (or overridden).
Var gated_temporal_attend(Tape& tape, ParamStore& store, std::size_t block, Var queries,
                          Var prev_map, Var cur_map, const Tensor& base_pts, const Tensor& gamma,
                          const EncoderConfig& cfg);

/// The gated two-frame weight pair for inspection/testing: (1-gamma)*w and
/// gamma*w with w the softmax-normalized per-frame weights.
struct GatedWeights {
    Var prev;  // [N,K]
    Var cur;   // [N,K]
};
GatedWeights gated_weights(Var weights, Var gamma_col);

/// Position-wise FFN with residual + layer norm; hidden width is 2*dim.
Var ffn_forward(Tape& tape, ParamStore& store, std::size_t block, Var queries,
                const EncoderConfig& cfg, bool training, Rng& rng);

/// Rigid resample of the previous BEV query grid into the current ego
/// frame. delta = (dx, dy, dyaw): motion expressed in the previous frame.
Var ego_align(Tape& tape, Var prev_queries, const BEVGrid& grid, double dx, double dy,
              double dyaw);

/// Queries [N_q,C] viewed as a [C,H,W] grid map for sampling.
Var queries_to_grid(Var queries, const BEVGrid& grid);

}  // namespace fbev
