// Copyright (c) 2026 fbev contributors.
// SPDX-License-Identifier: Apache-2.0

#include "fbev/decoder.hpp"

#include <cmath>
#include <stdexcept>

namespace fbev {

void FocalConfig::validate() const
{
    if (!(alpha > 0.0) || alpha > 1.0)
        throw std::invalid_argument("FocalConfig: alpha must lie in (0,1]");
    if (gamma < 0.0)
        throw std::invalid_argument("FocalConfig: gamma must be nonnegative");
}

void init_decoder_params(ParamStore& store, std::size_t dim, Rng& rng)
{
    store.create_uniform("dec.proj.w", {dim, kNumClasses}, dim, rng);
    store.create_uniform("dec.proj.b", {kNumClasses}, dim, rng);
    store.create_uniform("dec.refine.w", {kNumClasses, kNumClasses, 3, 3}, kNumClasses * 9, rng);
    store.create_uniform("dec.refine.b", {kNumClasses}, kNumClasses * 9, rng);
}

Var mask_head_decode(Tape& tape, ParamStore& store, Var queries, const BEVGrid& grid,
                     std::size_t target_h, std::size_t target_w)
{
    if (queries.value().extent(0) != grid.queries())
        throw std::invalid_argument("mask_head_decode: query count does not match the grid");
    if (target_h < grid.h || target_w < grid.w)
        throw std::invalid_argument("mask_head_decode: target resolution below the BEV grid");
    Var logits = linear(queries, tape.param(store, "dec.proj.w"), tape.param(store, "dec.proj.b"));
    Var grid_logits = reshape(transpose2d(logits), {kNumClasses, grid.h, grid.w});
    Var up = interp_resize(grid_logits, target_h, target_w);
    Var refined = conv2d(up, tape.param(store, "dec.refine.w"), 1, 1,
                         tape.param(store, "dec.refine.b"));
    return add(up, refined);
}

Var focal_loss(Var logits, const Tensor& labels, const FocalConfig& cfg)
{
    cfg.validate();
    const Tensor& lv = logits.value();
    if (lv.rank() != 3)
        throw std::invalid_argument("focal_loss: expected [C,H,W] logits, got " + lv.shape_str());
    const std::size_t c = lv.extent(0), h = lv.extent(1), w = lv.extent(2);
    if (labels.rank() != 2 || labels.extent(0) != h || labels.extent(1) != w)
        throw std::invalid_argument("focal_loss: label map " + labels.shape_str() +
                                    " does not match logits " + lv.shape_str());
    std::vector<int> flat(h * w);
    for (std::size_t i = 0; i < h * w; ++i)
    {
        const double v = labels[i];
        if (!(v >= 0.0) || v >= static_cast<double>(c) || v != std::floor(v))
            throw std::invalid_argument("focal_loss: label " + std::to_string(v) +
                                        " out of range [0," + std::to_string(c) + ")");
        flat[i] = static_cast<int>(v);
    }
    Var rows = transpose2d(reshape(logits, {c, h * w}));
    return focal_loss_rows(rows, flat, cfg.alpha, cfg.gamma, cfg.void_class);
}

Var total_loss(Var focal, Var kl, double lambda_kl)
{
    if (lambda_kl < 0.0)
        throw std::invalid_argument("total_loss: lambda_kl must be nonnegative");
    return add(focal, scale(kl, lambda_kl));
}

Tensor argmax_classes(const Tensor& logits)
{
    if (logits.rank() != 3)
        throw std::invalid_argument("argmax_classes: expected [C,H,W]");
    const std::size_t c = logits.extent(0), h = logits.extent(1), w = logits.extent(2);
    Tensor out({h, w});
    for (std::size_t i = 0; i < h * w; ++i)
    {
        std::size_t best = 0;
        double best_v = logits[i];
        for (std::size_t ch = 1; ch < c; ++ch)
        {
            const double v = logits[ch * h * w + i];
            if (v > best_v)
            {
                best_v = v;
                best = ch;
            }
        }
        out[i] = static_cast<double>(best);
    }
    return out;
}

}  // namespace fbev
