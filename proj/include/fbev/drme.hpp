// Copyright (c) 2026 fbev contributors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>

#include "fbev/autodiff.hpp"

namespace fbev {

/// Backbone stand-in configuration. The image is split into P x P patches,
/// projected to dim-wide tokens and pushed through `layers` position-wise
/// residual blocks; the last four layer outputs feed the multi-scale fusion.
struct BackboneConfig {
    std::size_t in_channels = 3;
    std::size_t img_h = 64, img_w = 64;
    std::size_t patch = 8;
    std::size_t dim = 64;
    std::size_t layers = 4;
    std::size_t fused_channels = 64;

    std::size_t tokens_h() const { return img_h / patch; }
    std::size_t tokens_w() const { return img_w / patch; }
    std::size_t tokens() const { return tokens_h() * tokens_w(); }
    void validate() const;
};

/// Registers all backbone/fusion parameters under the "drme." prefix.
void init_drme_params(ParamStore& store, const BackboneConfig& cfg, Rng& rng);

/// [C,H,W] image -> [N+1, D] tokens; token 0 is the learned class token.
Var patch_embed(Tape& tape, ParamStore& store, const BackboneConfig& cfg, const Tensor& image);

/// All `layers` hidden states of the stand-in backbone, each [N+1, D].
std::vector<Var> toy_backbone(Tape& tape, ParamStore& store, const BackboneConfig& cfg,
                              Var tokens);

/// Drops the class token and reshapes the sequence to a [D, h, w] map.
Var tokens_to_map(Var tokens, std::size_t h, std::size_t w);

struct MultiScale {
    std::vector<Var> levels;  // post-lateral, post-resize maps, finest first
    Var fused;                // finest fused map consumed downstream
};

/// Scale schedule {2x, 1x, 1/2x, 1/4x} of the token resolution, shallowest
/// tap mapped to the finest level, fused top-down.
MultiScale multiscale_fuse(Tape& tape, ParamStore& store, const BackboneConfig& cfg,
                           const std::array<Var, 4>& maps);

/// Full path: image -> tokens -> last-four taps -> maps -> fused finest map
/// of shape [fused_channels, 2*tokens_h, 2*tokens_w].
Var drme_forward(Tape& tape, ParamStore& store, const BackboneConfig& cfg, const Tensor& image);

/// Extent of one side of the fused output map.
std::size_t drme_out_h(const BackboneConfig& cfg);
std::size_t drme_out_w(const BackboneConfig& cfg);

}  // namespace fbev
