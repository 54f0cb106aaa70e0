// Copyright (c) 2026 fbev contributors.
// SPDX-License-Identifier: Apache-2.0

#include "fbev/drme.hpp"

#include <cmath>
#include <stdexcept>

namespace fbev {

namespace {

std::string blk(std::size_t l) { return "drme.blk" + std::to_string(l) + "."; }

std::size_t scaled_extent(std::size_t base, double mult)
{
    const auto v = static_cast<std::size_t>(std::llround(static_cast<double>(base) * mult));
    return v < 1 ? 1 : v;
}

constexpr double kScaleSchedule[4] = {2.0, 1.0, 0.5, 0.25};

}  // namespace

void BackboneConfig::validate() const
{
    if (patch == 0 || img_h % patch != 0 || img_w % patch != 0)
        throw std::invalid_argument("BackboneConfig: image extents must be divisible by patch");
    if (layers < 4)
        throw std::invalid_argument("BackboneConfig: need at least 4 layers to tap the last four");
    if (dim == 0 || fused_channels == 0)
        throw std::invalid_argument("BackboneConfig: zero-sized dims");
}

void init_drme_params(ParamStore& store, const BackboneConfig& cfg, Rng& rng)
{
    cfg.validate();
    const std::size_t patch_in = cfg.in_channels * cfg.patch * cfg.patch;
    store.create_uniform("drme.patch.w", {patch_in, cfg.dim}, patch_in, rng);
    store.create_uniform("drme.patch.b", {cfg.dim}, patch_in, rng);
    store.create_uniform("drme.cls", {1, cfg.dim}, cfg.dim, rng);
    for (std::size_t l = 0; l < cfg.layers; ++l)
    {
        store.create(blk(l) + "ln.g", {cfg.dim}).fill(1.0);
        store.create(blk(l) + "ln.b", {cfg.dim});
        store.create_uniform(blk(l) + "fc1.w", {cfg.dim, cfg.dim}, cfg.dim, rng);
        store.create_uniform(blk(l) + "fc1.b", {cfg.dim}, cfg.dim, rng);
        store.create_uniform(blk(l) + "fc2.w", {cfg.dim, cfg.dim}, cfg.dim, rng);
        store.create_uniform(blk(l) + "fc2.b", {cfg.dim}, cfg.dim, rng);
    }
    for (std::size_t i = 0; i < 4; ++i)
    {
        const std::string p = "drme.lat" + std::to_string(i) + ".";
        store.create_uniform(p + "w", {cfg.fused_channels, cfg.dim, 1, 1}, cfg.dim, rng);
        store.create_uniform(p + "b", {cfg.fused_channels}, cfg.dim, rng);
    }
    for (std::size_t i = 0; i < 3; ++i)
    {
        const std::string p = "drme.smooth" + std::to_string(i) + ".";
        store.create_uniform(p + "w", {cfg.fused_channels, cfg.fused_channels, 3, 3},
                             cfg.fused_channels * 9, rng);
        store.create_uniform(p + "b", {cfg.fused_channels}, cfg.fused_channels * 9, rng);
    }
}

Var patch_embed(Tape& tape, ParamStore& store, const BackboneConfig& cfg, const Tensor& image)
{
    cfg.validate();
    if (image.rank() != 3 || image.extent(0) != cfg.in_channels || image.extent(1) != cfg.img_h ||
        image.extent(2) != cfg.img_w)
        throw std::invalid_argument("patch_embed: image shape " + image.shape_str() +
                                    " does not match config");
    const std::size_t th = cfg.tokens_h(), tw = cfg.tokens_w(), p = cfg.patch;
    const std::size_t patch_in = cfg.in_channels * p * p;
    Tensor patches({cfg.tokens(), patch_in});
    for (std::size_t py = 0; py < th; ++py)
        for (std::size_t px = 0; px < tw; ++px)
        {
            double* row = patches.data() + (py * tw + px) * patch_in;
            std::size_t k = 0;
            for (std::size_t c = 0; c < cfg.in_channels; ++c)
                for (std::size_t dy = 0; dy < p; ++dy)
                    for (std::size_t dx = 0; dx < p; ++dx, ++k)
                        row[k] = image[(c * cfg.img_h + py * p + dy) * cfg.img_w + px * p + dx];
        }
    Var tokens = linear(tape.constant(std::move(patches)), tape.param(store, "drme.patch.w"),
                        tape.param(store, "drme.patch.b"));
    return concat_rows(tape.param(store, "drme.cls"), tokens);
}

std::vector<Var> toy_backbone(Tape& tape, ParamStore& store, const BackboneConfig& cfg, Var tokens)
{
    std::vector<Var> states;
    states.reserve(cfg.layers);
    Var x = tokens;
    for (std::size_t l = 0; l < cfg.layers; ++l)
    {
        // pre-norm residual block: zero weights give the identity map
        Var h = layer_normalize(x, tape.param(store, blk(l) + "ln.g"),
                                tape.param(store, blk(l) + "ln.b"));
        h = relu(linear(h, tape.param(store, blk(l) + "fc1.w"), tape.param(store, blk(l) + "fc1.b")));
        h = linear(h, tape.param(store, blk(l) + "fc2.w"), tape.param(store, blk(l) + "fc2.b"));
        x = add(x, h);
        states.push_back(x);
    }
    return states;
}

Var tokens_to_map(Var tokens, std::size_t h, std::size_t w)
{
    const Tensor& tv = tokens.value();
    if (tv.rank() != 2 || tv.extent(0) != h * w + 1)
        throw std::invalid_argument("tokens_to_map: expected " + std::to_string(h * w + 1) +
                                    " tokens, got " + tv.shape_str());
    const std::size_t d = tv.extent(1);
    Var body = slice_rows(tokens, 1, h * w);  // class token dropped
    return reshape(transpose2d(body), {d, h, w});
}

MultiScale multiscale_fuse(Tape& tape, ParamStore& store, const BackboneConfig& cfg [[maybe_unused]],
                           const std::array<Var, 4>& maps)
{
    const std::size_t th = maps[0].value().extent(1);
    const std::size_t tw = maps[0].value().extent(2);
    for (const Var& m : maps)
        if (m.value().extent(1) != th || m.value().extent(2) != tw)
            throw std::invalid_argument("multiscale_fuse: levels must share the token extent");

    MultiScale ms;
    ms.levels.reserve(4);
    for (std::size_t i = 0; i < 4; ++i)
    {
        const std::string p = "drme.lat" + std::to_string(i) + ".";
        Var lat = conv2d(maps[i], tape.param(store, p + "w"), 1, 0, tape.param(store, p + "b"));
        ms.levels.push_back(interp_resize(lat, scaled_extent(th, kScaleSchedule[i]),
                                          scaled_extent(tw, kScaleSchedule[i])));
    }

    // top-down: upsample the coarser fused level, add the lateral, then a
    // residual 3x3 smoothing
    Var fused = ms.levels[3];
    for (std::size_t i = 3; i-- > 0;)
    {
        const Tensor& target = ms.levels[i].value();
        Var merged = add(ms.levels[i], interp_resize(fused, target.extent(1), target.extent(2)));
        const std::string p = "drme.smooth" + std::to_string(i) + ".";
        fused = add(merged,
                    conv2d(merged, tape.param(store, p + "w"), 1, 1, tape.param(store, p + "b")));
    }
    ms.fused = fused;
    return ms;
}

Var drme_forward(Tape& tape, ParamStore& store, const BackboneConfig& cfg, const Tensor& image)
{
    Var tokens = patch_embed(tape, store, cfg, image);
    const std::vector<Var> states = toy_backbone(tape, store, cfg, tokens);
    // taps: last four layers, shallowest first
    std::array<Var, 4> maps;
    for (std::size_t i = 0; i < 4; ++i)
        maps[i] = tokens_to_map(states[cfg.layers - 4 + i], cfg.tokens_h(), cfg.tokens_w());
    return multiscale_fuse(tape, store, cfg, maps).fused;
}

std::size_t drme_out_h(const BackboneConfig& cfg) { return scaled_extent(cfg.tokens_h(), 2.0); }
std::size_t drme_out_w(const BackboneConfig& cfg) { return scaled_extent(cfg.tokens_w(), 2.0); }

}  // namespace fbev
