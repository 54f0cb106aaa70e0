// Copyright (c) 2026 fbev contributors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "fbev/autodiff.hpp"
#include "fbev/geometry.hpp"
#include "fbev/image_io.hpp"

namespace fbev {

struct FocalConfig {
    double alpha = 0.25;
    double gamma = 2.0;
    int void_class = 0;  // excluded from the loss and the metrics

    void validate() const;
};

/// Registers decoder parameters ("dec." prefix).
void init_decoder_params(ParamStore& store, std::size_t dim, Rng& rng);

/// Queries -> per-class BEV logits: linear projection to kNumClasses,
/// reshape to [C_stuff, H_bev, W_bev], bilinear upsample to the target
/// resolution, then one residual 3x3 refinement conv.
Var mask_head_decode(Tape& tape, ParamStore& store, Var queries, const BEVGrid& grid,
                     std::size_t target_h, std::size_t target_w);

/// Mean focal loss over non-void pixels of logits[C,H,W] against the
/// class-index map labels[H,W].
Var focal_loss(Var logits, const Tensor& labels, const FocalConfig& cfg);

/// total = focal + lambda_kl * kl.
Var total_loss(Var focal, Var kl, double lambda_kl);

/// Argmax class map [H,W] from logits [C,H,W].
Tensor argmax_classes(const Tensor& logits);

}  // namespace fbev
