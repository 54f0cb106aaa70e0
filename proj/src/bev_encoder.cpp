// Copyright (c) 2026 fbev contributors.
// SPDX-License-Identifier: Apache-2.0

#include "fbev/bev_encoder.hpp"

#include <cmath>
#include <stdexcept>

namespace fbev {

namespace {

std::string blk(std::size_t b) { return "enc.b" + std::to_string(b) + "."; }

double sigmoid_scalar(double x)
{
    if (x >= 0.0)
        return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// Bounded sampling offsets shared by every map a query attends to:
/// delta_k = 3 * tanh(offsets[:, 2k:2k+2]).
std::vector<Var> bounded_offsets(Var offsets_raw, std::size_t k)
{
    if (offsets_raw.value().extent(1) != 2 * k)
        throw std::invalid_argument("deformable offsets must be [N,2K]");
    std::vector<Var> deltas;
    deltas.reserve(k);
    for (std::size_t i = 0; i < k; ++i)
        deltas.push_back(scale(tanh(slice_cols(offsets_raw, 2 * i, 2)), 3.0));
    return deltas;
}

std::vector<Var> sample_at_offsets(Var map, Var ref_leaf, std::span<const Var> deltas)
{
    std::vector<Var> samples;
    samples.reserve(deltas.size());
    for (const Var& delta : deltas)
        samples.push_back(bilinear_sample(map, add(ref_leaf, delta)));
    return samples;
}

Var mlp2(Tape& tape, ParamStore& store, const std::string& prefix, Var x)
{
    Var h = relu(linear(x, tape.param(store, prefix + "fc1.w"), tape.param(store, prefix + "fc1.b")));
    return linear(h, tape.param(store, prefix + "fc2.w"), tape.param(store, prefix + "fc2.b"));
}

}  // namespace

void GatingConfig::validate() const
{
    if (!(kappa > 0.0))
        throw std::invalid_argument("GatingConfig: kappa must be positive");
    if (delta < 0.0 || delta > 1.0)
        throw std::invalid_argument("GatingConfig: delta must lie in [0,1]");
}

void FusionConfig::validate() const
{
    if (k_points < 1 || mc_rounds < 1)
        throw std::invalid_argument("FusionConfig: k_points and mc_rounds must be >= 1");
    if (!(xi > 0.0))
        throw std::invalid_argument("FusionConfig: xi must be positive");
}

void EncoderConfig::validate() const
{
    if (blocks < 1 || dim < 1)
        throw std::invalid_argument("EncoderConfig: blocks and dim must be >= 1");
    gate.validate();
    fusion.validate();
}

void init_encoder_params(ParamStore& store, const EncoderConfig& cfg, std::size_t n_queries,
                         Rng& rng)
{
    cfg.validate();
    const std::size_t c = cfg.dim;
    const std::size_t k = cfg.fusion.k_points;
    store.create_uniform("enc.q_embed", {n_queries, c}, c, rng);
    store.create_uniform("enc.q_pos", {n_queries, c}, c, rng);
    for (std::size_t b = 0; b < cfg.blocks; ++b)
    {
        const std::string p = blk(b);
        // offset and attention-weight heads start at zero: sampling begins
        // at the reference points with uniform weights
        store.create(p + "tsa.off.w", {c, 2 * k});
        store.create(p + "tsa.off.b", {2 * k});
        store.create(p + "tsa.wt.w", {c, k});
        store.create(p + "tsa.wt.b", {k});
        store.create(p + "tsa.ln.g", {c}).fill(1.0);
        store.create(p + "tsa.ln.b", {c});

        store.create(p + "sca.off.w", {c, 2 * k});
        store.create(p + "sca.off.b", {2 * k});
        store.create(p + "sca.wt.w", {c, k});
        store.create(p + "sca.wt.b", {k});
        store.create_uniform(p + "sca.mu.fc1.w", {c, c}, c, rng);
        store.create_uniform(p + "sca.mu.fc1.b", {c}, c, rng);
        store.create_uniform(p + "sca.mu.fc2.w", {c, c}, c, rng);
        store.create_uniform(p + "sca.mu.fc2.b", {c}, c, rng);
        store.create_uniform(p + "sca.sig.fc1.w", {c, c}, c, rng);
        store.create_uniform(p + "sca.sig.fc1.b", {c}, c, rng);
        // variance head output starts at the prior
        store.create(p + "sca.sig.fc2.w", {c, c});
        store.create(p + "sca.sig.fc2.b", {c}).fill(cfg.fusion.log_var_prior);
        store.create(p + "sca.ln.g", {c}).fill(1.0);
        store.create(p + "sca.ln.b", {c});

        store.create_uniform(p + "ffn.fc1.w", {c, 2 * c}, c, rng);
        store.create_uniform(p + "ffn.fc1.b", {2 * c}, c, rng);
        store.create_uniform(p + "ffn.fc2.w", {2 * c, c}, 2 * c, rng);
        store.create_uniform(p + "ffn.fc2.b", {c}, 2 * c, rng);
        store.create(p + "ffn.ln.g", {c}).fill(1.0);
        store.create(p + "ffn.ln.b", {c});
    }
}

Var initial_queries(Tape& tape, ParamStore& store)
{
    return add(tape.param(store, "enc.q_embed"), tape.param(store, "enc.q_pos"));
}

Tensor center_distances(const BEVGrid& grid)
{
    Tensor d({grid.queries()});
    const double r = grid.radius();
    std::size_t q = 0;
    for (std::size_t row = 0; row < grid.h; ++row)
        for (std::size_t col = 0; col < grid.w; ++col, ++q)
        {
            const double dy = static_cast<double>(row) - grid.center_row();
            const double dx = static_cast<double>(col) - grid.center_col();
            d[q] = std::sqrt(dx * dx + dy * dy) / r;
        }
    return d;
}

double gating_factor(double dbar, const GatingConfig& cfg)
{
    return sigmoid_scalar(cfg.kappa * (cfg.delta - dbar));
}

Tensor gating_vector(const BEVGrid& grid, const GatingConfig& cfg, bool enabled)
{
    cfg.validate();
    Tensor g({grid.queries(), 1}, 0.5);
    if (!enabled)
        return g;
    const Tensor d = center_distances(grid);
    for (std::size_t q = 0; q < d.size(); ++q)
        g[q] = gating_factor(d[q], cfg);
    return g;
}

Var deformable_attend(Var map, const Tensor& refs, Var offsets_raw, Var logits)
{
    Tape& tape = *map.tape;
    const auto deltas = bounded_offsets(offsets_raw, logits.value().extent(1));
    const auto samples = sample_at_offsets(map, tape.constant(refs), deltas);
    return rows_weighted_sum(samples, softmax_lastdim(logits));
}

UncertaintyEstimate estimate_uncertainty(Tape& tape, ParamStore& store, const std::string& prefix,
                                         Var features, const EncoderConfig& cfg)
{
    UncertaintyEstimate est;
    est.mu = mlp2(tape, store, prefix + "mu.", features);
    est.logvar = clamp(mlp2(tape, store, prefix + "sig.", features), cfg.logvar_min,
                       cfg.logvar_max);
    return est;
}

Var reparameterize(Var mu, Var logvar, const Tensor& eps)
{
    Var sigma = exp(scale(logvar, 0.5));
    return add(mu, mul(sigma, mu.tape->constant(eps)));
}

Var precision_fuse(std::span<const Var> samples, std::span<const Var> variances,
                   std::span<const Tensor> mask_cols, double xi, bool uniform_weights)
{
    if (samples.empty() || (!uniform_weights && variances.size() != samples.size()) ||
        mask_cols.size() != samples.size())
        throw std::invalid_argument("precision_fuse: camera spans disagree");
    Tape& tape = *samples[0].tape;
    const std::size_t channels = samples[0].value().extent(1);
    Var num, den;
    for (std::size_t c = 0; c < samples.size(); ++c)
    {
        Var mask = broadcast_col(tape.constant(mask_cols[c]), channels);
        Var w = uniform_weights ? mask : mul(mask, reciprocal(add_scalar(variances[c], xi)));
        Var num_term = mul(w, samples[c]);
        num = num.valid() ? add(num, num_term) : num_term;
        den = den.valid() ? add(den, w) : w;
    }
    return div(num, add_scalar(den, xi));
}

McFusion mc_fuse(Tape& tape [[maybe_unused]], std::span<const UncertaintyEstimate> estimates,
                 std::span<const Tensor> mask_cols, const FusionConfig& cfg, Rng& rng)
{
    if (cfg.mc_rounds < 2)
        throw std::invalid_argument("mc_fuse: the confidence estimate needs mc_rounds >= 2");
    const std::size_t n_cam = estimates.size();
    const std::size_t n = estimates[0].mu.value().extent(0);
    const std::size_t c = estimates[0].mu.value().extent(1);

    // masked precision weights, the denominator and the per-camera sigma
    // are draw independent; hoisting them keeps the tape small across rounds
    Tape& tape2 = *estimates[0].mu.tape;
    std::vector<Var> masked_w, sigmas;
    Var den;
    for (std::size_t cam = 0; cam < n_cam; ++cam)
    {
        Var mask = broadcast_col(tape2.constant(mask_cols[cam]), c);
        Var w = cfg.uniform_weights
                    ? mask
                    : mul(mask, reciprocal(add_scalar(exp(estimates[cam].logvar), cfg.xi)));
        masked_w.push_back(w);
        sigmas.push_back(exp(scale(estimates[cam].logvar, 0.5)));
        den = den.valid() ? add(den, w) : w;
    }
    den = add_scalar(den, cfg.xi);

    std::vector<Var> rounds;
    rounds.reserve(cfg.mc_rounds);
    Var mean_acc;
    for (std::size_t s = 0; s < cfg.mc_rounds; ++s)
    {
        std::vector<Var> draws;
        draws.reserve(n_cam);
        for (std::size_t cam = 0; cam < n_cam; ++cam)
        {
            Tensor eps({n, c});
            for (std::size_t i = 0; i < eps.size(); ++i)
                eps[i] = rng.normal();
            draws.push_back(add_mul_const(estimates[cam].mu, sigmas[cam], eps));
        }
        Var fused = div(sum_products(masked_w, draws), den);
        rounds.push_back(fused);
        mean_acc = mean_acc.valid() ? add(mean_acc, fused) : fused;
    }
    McFusion out;
    out.fused = scale(mean_acc, 1.0 / static_cast<double>(cfg.mc_rounds));

    // unbiased per-channel sample variance across rounds, averaged over
    // channels; diagnostic only, so computed outside the tape
    out.conf = Tensor({n});
    const Tensor& mean = out.fused.value();
    for (std::size_t i = 0; i < n; ++i)
    {
        double acc = 0.0;
        for (std::size_t ch = 0; ch < c; ++ch)
        {
            double var = 0.0;
            for (const Var& round : rounds)
            {
                const double d = round.value()[i * c + ch] - mean[i * c + ch];
                var += d * d;
            }
            acc += var / static_cast<double>(cfg.mc_rounds - 1);
        }
        out.conf[i] = acc / static_cast<double>(c);
    }
    return out;
}

Var kl_regularizer(const UncertaintyEstimate& est, double log_var_prior)
{
    // 0.5 * [log(var_prior/var) + (var + mu^2)/var_prior - 1], elementwise
    Var a = add_scalar(scale(est.logvar, -1.0), log_var_prior);
    Var b = exp(add_scalar(est.logvar, -log_var_prior));
    Var c = scale(mul(est.mu, est.mu), std::exp(-log_var_prior));
    Var expr = add(add(a, b), add_scalar(c, -1.0));
    return scale(mean_all(expr), 0.5);
}

UscaResult usca_block(Tape& tape, ParamStore& store, std::size_t block, Var queries,
                      std::span<const Var> camera_maps, const RefPoints& refs, double feat_scale,
                      const EncoderConfig& cfg, Rng& rng)
{
    const std::string p = blk(block) + "sca.";
    const std::size_t n = queries.value().extent(0);
    const std::size_t n_cam = camera_maps.size();
    if (refs.n_query != n || refs.n_cam != n_cam)
        throw std::invalid_argument("usca_block: reference point table does not match");

    Var offsets = linear(queries, tape.param(store, p + "off.w"), tape.param(store, p + "off.b"));
    Var logits = linear(queries, tape.param(store, p + "wt.w"), tape.param(store, p + "wt.b"));
    const std::size_t k_pts = cfg.fusion.k_points;
    const auto deltas = bounded_offsets(offsets, k_pts);
    Var attn = softmax_lastdim(logits);

    std::vector<UncertaintyEstimate> estimates;
    std::vector<Tensor> mask_cols;
    estimates.reserve(n_cam);
    mask_cols.reserve(n_cam);
    for (std::size_t cam = 0; cam < n_cam; ++cam)
    {
        // anchor-averaged deformable read, folded into one weighted sum over
        // (anchor, k) samples; invisible anchors contribute nothing and fully
        // invisible (query,camera) rows stay zero
        Tensor inv_count({n, 1});
        for (std::size_t q = 0; q < n; ++q)
        {
            std::size_t vis = 0;
            for (std::size_t a = 0; a < refs.n_anchor; ++a)
                vis += refs.anchor_visible[(q * n_cam + cam) * refs.n_anchor + a];
            inv_count[q] = vis ? 1.0 / static_cast<double>(vis) : 0.0;
        }
        std::vector<Var> samples;
        std::vector<Var> weight_blocks;
        samples.reserve(refs.n_anchor * k_pts);
        for (std::size_t a = 0; a < refs.n_anchor; ++a)
        {
            Tensor ref_pts({n, 2});
            Tensor anchor_mask({n, 1});
            for (std::size_t q = 0; q < n; ++q)
            {
                const std::size_t base = refs.uv_index(q, cam, a);
                // image pixels -> feature map coordinates (pixel centers)
                ref_pts[2 * q] = (refs.uv[base] + 0.5) * feat_scale - 0.5;
                ref_pts[2 * q + 1] = (refs.uv[base + 1] + 0.5) * feat_scale - 0.5;
                anchor_mask[q] =
                    refs.anchor_visible[(q * n_cam + cam) * refs.n_anchor + a] ? inv_count[q] : 0.0;
            }
            const auto anchor_samples =
                sample_at_offsets(camera_maps[cam], tape.constant(ref_pts), deltas);
            samples.insert(samples.end(), anchor_samples.begin(), anchor_samples.end());
            weight_blocks.push_back(
                mul(attn, broadcast_col(tape.constant(anchor_mask), k_pts)));
        }
        Var feat = rows_weighted_sum(samples, concat_lastdim(weight_blocks));
        estimates.push_back(estimate_uncertainty(tape, store, p, feat, cfg));

        Tensor mask({n, 1});
        for (std::size_t q = 0; q < n; ++q)
            mask[q] = refs.mask[q * n_cam + cam] ? 1.0 : 0.0;
        mask_cols.push_back(std::move(mask));
    }

    McFusion fusion = mc_fuse(tape, estimates, mask_cols, cfg.fusion, rng);

    Var kl;
    for (const UncertaintyEstimate& est : estimates)
    {
        Var term = kl_regularizer(est, cfg.fusion.log_var_prior);
        kl = kl.valid() ? add(kl, term) : term;
    }
    kl = scale(kl, 1.0 / static_cast<double>(n_cam));

    UscaResult out;
    out.queries = layer_normalize(add(queries, fusion.fused), tape.param(store, p + "ln.g"),
                                  tape.param(store, p + "ln.b"));
    out.kl = kl;
    out.conf = std::move(fusion.conf);
    return out;
}

GatedWeights gated_weights(Var weights, Var gamma_col)
{
    const std::size_t k = weights.value().extent(1);
    Var gamma = broadcast_col(gamma_col, k);
    Var one_minus = add_scalar(scale(gamma, -1.0), 1.0);
    return GatedWeights{mul(one_minus, weights), mul(gamma, weights)};
}

Var gated_temporal_attend(Tape& tape, ParamStore& store, std::size_t block, Var queries,
                          Var prev_map, Var cur_map, const Tensor& base_pts, const Tensor& gamma,
                          const EncoderConfig& cfg)
{
    const std::string p = blk(block) + "tsa.";
    Var offsets = linear(queries, tape.param(store, p + "off.w"), tape.param(store, p + "off.b"));
    Var logits = linear(queries, tape.param(store, p + "wt.w"), tape.param(store, p + "wt.b"));

    // the two frames share sampling points and base weights; the distance
    // gate alone balances current against history
    const auto deltas = bounded_offsets(offsets, cfg.fusion.k_points);
    Var ref_leaf = tape.constant(base_pts);
    std::vector<Var> pts;
    pts.reserve(deltas.size());
    for (const Var& delta : deltas)
        pts.push_back(add(ref_leaf, delta));
    std::vector<Var> prev_samples, cur_samples;
    for (const Var& pt : pts)
    {
        prev_samples.push_back(bilinear_sample(prev_map, pt));
        cur_samples.push_back(bilinear_sample(cur_map, pt));
    }
    const GatedWeights gw = gated_weights(softmax_lastdim(logits), tape.constant(gamma));
    Var fused =
        add(rows_weighted_sum(prev_samples, gw.prev), rows_weighted_sum(cur_samples, gw.cur));
    return layer_normalize(add(queries, fused), tape.param(store, p + "ln.g"),
                           tape.param(store, p + "ln.b"));
}

Var ffn_forward(Tape& tape, ParamStore& store, std::size_t block, Var queries,
                const EncoderConfig& cfg, bool training, Rng& rng)
{
    const std::string p = blk(block) + "ffn.";
    Var h = relu(linear(queries, tape.param(store, p + "fc1.w"), tape.param(store, p + "fc1.b")));
    h = dropout(h, cfg.dropout_rate, training, rng);
    h = linear(h, tape.param(store, p + "fc2.w"), tape.param(store, p + "fc2.b"));
    h = dropout(h, cfg.dropout_rate, training, rng);
    return layer_normalize(add(queries, h), tape.param(store, p + "ln.g"),
                           tape.param(store, p + "ln.b"));
}

Var queries_to_grid(Var queries, const BEVGrid& grid)
{
    const std::size_t c = queries.value().extent(1);
    return reshape(transpose2d(queries), {c, grid.h, grid.w});
}

Var ego_align(Tape& tape, Var prev_queries, const BEVGrid& grid, double dx, double dy, double dyaw)
{
    Var prev_map = queries_to_grid(prev_queries, grid);
    const double cy = std::cos(dyaw), sy = std::sin(dyaw);
    Tensor pts({grid.queries(), 2});
    std::size_t q = 0;
    for (std::size_t row = 0; row < grid.h; ++row)
        for (std::size_t col = 0; col < grid.w; ++col, ++q)
        {
            const auto [x_cur, y_cur] = grid.cell_metric(row, col);
            // location of the current cell in the previous ego frame
            const double x_prev = cy * x_cur - sy * y_cur + dx;
            const double y_prev = sy * x_cur + cy * y_cur + dy;
            const auto [pc, pr] = grid.metric_to_cell(x_prev, y_prev);
            pts[2 * q] = pc;
            pts[2 * q + 1] = pr;
        }
    return bilinear_sample(prev_map, tape.constant(std::move(pts)));
}

}  // namespace fbev
