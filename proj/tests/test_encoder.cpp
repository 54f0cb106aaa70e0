// Copyright (c) 2026 fbev contributors.
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "fbev/bev_encoder.hpp"

using namespace fbev;

namespace {

EncoderConfig small_cfg()
{
    EncoderConfig cfg;
    cfg.blocks = 1;
    cfg.dim = 8;
    cfg.dropout_rate = 0.0;
    cfg.fusion.k_points = 2;
    cfg.fusion.mc_rounds = 3;
    return cfg;
}

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0)
{
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i)
        t[i] = rng.uniform(lo, hi);
    return t;
}

}  // namespace

TEST_CASE("deformable attention: zero offsets sample the reference point")
{
    Tape tape;
    Rng rng(1);
    Tensor map = random_tensor({3, 6, 6}, rng);
    Var m = tape.constant(map);

    // K=1: softmax of a single logit is 1, zero offsets stay at the ref
    Tensor refs = Tensor::from_values({2, 2}, {2.0, 3.0, 4.0, 1.0});
    Var off = tape.constant(Tensor({2, 2}));
    Var logit = tape.constant(Tensor({2, 1}, 5.0));
    Var f = deformable_attend(m, refs, off, logit);
    for (std::size_t ch = 0; ch < 3; ++ch)
    {
        CHECK(f.value()[0 * 3 + ch] == map[(ch * 6 + 3) * 6 + 2]);
        CHECK(f.value()[1 * 3 + ch] == map[(ch * 6 + 1) * 6 + 4]);
    }

    // K=2 with equal logits and offsets landing on two integer cells
    // averages the two values
    const double raw = std::atanh(1.0 / 3.0);  // 3*tanh(raw) = 1
    Tensor off2 = Tensor::from_values({1, 4}, {raw, 0.0, -raw, 0.0});
    Var f2 = deformable_attend(m, Tensor::from_values({1, 2}, {2.0, 3.0}), tape.constant(off2),
                               tape.constant(Tensor({1, 2})));
    for (std::size_t ch = 0; ch < 3; ++ch)
        CHECK(f2.value()[ch] ==
              doctest::Approx(0.5 * (map[(ch * 6 + 3) * 6 + 3] + map[(ch * 6 + 3) * 6 + 1]))
                  .epsilon(1e-12));
}

TEST_CASE("uncertainty heads: zero init, clamp, gradients")
{
    EncoderConfig cfg = small_cfg();
    ParamStore store;
    Rng rng(2);
    init_encoder_params(store, cfg, 4, rng);

    // zeroed heads emit mu = 0, logvar = 0 (unit variance)
    for (const char* n : {"sca.mu.fc1.w", "sca.mu.fc1.b", "sca.mu.fc2.w", "sca.mu.fc2.b",
                          "sca.sig.fc1.w", "sca.sig.fc1.b", "sca.sig.fc2.w", "sca.sig.fc2.b"})
        store.value(std::string("enc.b0.") + n).fill(0.0);
    {
        Tape tape;
        Var f = tape.constant(random_tensor({4, 8}, rng));
        const UncertaintyEstimate est = estimate_uncertainty(tape, store, "enc.b0.sca.", f, cfg);
        for (std::size_t i = 0; i < est.mu.value().size(); ++i)
        {
            CHECK(est.mu.value()[i] == 0.0);
            CHECK(est.logvar.value()[i] == 0.0);
        }
    }

    // the raw head output is clamped into [-10, 4]
    store.value("enc.b0.sca.sig.fc2.b").fill(9.0);
    {
        Tape tape;
        Var f = tape.constant(Tensor({4, 8}));
        const UncertaintyEstimate est = estimate_uncertainty(tape, store, "enc.b0.sca.", f, cfg);
        for (std::size_t i = 0; i < est.logvar.value().size(); ++i)
            CHECK(est.logvar.value()[i] == 4.0);
    }

    // gradient of a scalar readout of mu w.r.t. head weights
    ParamStore store2;
    Rng rng2(3);
    init_encoder_params(store2, cfg, 4, rng2);
    Tensor f_in = random_tensor({4, 8}, rng2);
    auto build = [&](Tape& tape) {
        const UncertaintyEstimate est =
            estimate_uncertainty(tape, store2, "enc.b0.sca.", tape.constant(f_in), cfg);
        Rng probe(9);
        Var w = tape.constant(random_tensor({4, 8}, probe));
        return sum_all(mul(est.mu, w));
    };
    CHECK(finite_diff_check(build, store2, 1e-5, 10, 5).max_rel_err < 1e-4);
}

TEST_CASE("reparameterization")
{
    Tape tape;
    Rng rng(4);
    Tensor mu_v = random_tensor({3, 4}, rng);
    Var mu = tape.constant(mu_v);
    Var logvar = tape.constant(Tensor({3, 4}, 0.0));

    // eps = 0 returns mu exactly
    Var z0 = reparameterize(mu, logvar, Tensor({3, 4}));
    for (std::size_t i = 0; i < z0.value().size(); ++i)
        CHECK(z0.value()[i] == mu_v[i]);

    // logvar = 0, eps = 1 adds one sigma
    Var z1 = reparameterize(mu, logvar, Tensor({3, 4}, 1.0));
    for (std::size_t i = 0; i < z1.value().size(); ++i)
        CHECK(z1.value()[i] == doctest::Approx(mu_v[i] + 1.0).epsilon(1e-15));

    // Monte-Carlo mean approaches mu (mu = 1, var = 1)
    Rng noise(5);
    double mean = 0.0;
    const int draws = 100000;
    Tape t2;
    Var mu1 = t2.constant(Tensor({1, 1}, 1.0));
    Var lv1 = t2.constant(Tensor({1, 1}, 0.0));
    for (int i = 0; i < draws; ++i)
    {
        Tensor eps({1, 1});
        eps[0] = noise.normal();
        mean += reparameterize(mu1, lv1, eps).value()[0];
    }
    mean /= draws;
    CHECK(std::abs(mean - 1.0) < 0.01);
}

TEST_CASE("precision fusion against hand evaluation")
{
    Tape tape;

    // equal variances and full visibility average the two cameras
    {
        Rng rng(6);
        Tensor z1 = random_tensor({5, 3}, rng), z2 = random_tensor({5, 3}, rng);
        std::vector<Var> samples = {tape.constant(z1), tape.constant(z2)};
        std::vector<Var> vars = {tape.constant(Tensor({5, 3}, 0.7)),
                                 tape.constant(Tensor({5, 3}, 0.7))};
        std::vector<Tensor> masks = {Tensor({5, 1}, 1.0), Tensor({5, 1}, 1.0)};
        Var fused = precision_fuse(samples, vars, masks, 1e-6, false);
        for (std::size_t i = 0; i < fused.value().size(); ++i)
            CHECK(fused.value()[i] ==
                  doctest::Approx(0.5 * (z1[i] + z2[i])).epsilon(1e-5));
    }

    // all cameras masked out -> exactly zero
    {
        std::vector<Var> samples = {tape.constant(Tensor({2, 3}, 4.0)),
                                    tape.constant(Tensor({2, 3}, -2.0))};
        std::vector<Var> vars = {tape.constant(Tensor({2, 3}, 1.0)),
                                 tape.constant(Tensor({2, 3}, 1.0))};
        std::vector<Tensor> masks = {Tensor({2, 1}, 0.0), Tensor({2, 1}, 0.0)};
        Var fused = precision_fuse(samples, vars, masks, 1e-6, false);
        for (std::size_t i = 0; i < fused.value().size(); ++i)
            CHECK(fused.value()[i] == 0.0);
    }

    // var = (1,3), z = (0,4), xi -> 0 gives (0 + 4/3) / (1 + 1/3) = 1
    {
        std::vector<Var> samples = {tape.constant(Tensor({1, 1}, 0.0)),
                                    tape.constant(Tensor({1, 1}, 4.0))};
        std::vector<Var> vars = {tape.constant(Tensor({1, 1}, 1.0)),
                                 tape.constant(Tensor({1, 1}, 3.0))};
        std::vector<Tensor> masks = {Tensor({1, 1}, 1.0), Tensor({1, 1}, 1.0)};
        Var fused = precision_fuse(samples, vars, masks, 1e-12, false);
        CHECK(fused.value()[0] == doctest::Approx(1.0).epsilon(1e-9));
    }

    // uniform ablation ignores the variances
    {
        std::vector<Var> samples = {tape.constant(Tensor({1, 2}, 1.0)),
                                    tape.constant(Tensor({1, 2}, 3.0))};
        std::vector<Var> vars = {tape.constant(Tensor({1, 2}, 0.01)),
                                 tape.constant(Tensor({1, 2}, 100.0))};
        std::vector<Tensor> masks = {Tensor({1, 1}, 1.0), Tensor({1, 1}, 1.0)};
        Var fused = precision_fuse(samples, vars, masks, 1e-9, true);
        CHECK(fused.value()[0] == doctest::Approx(2.0).epsilon(1e-7));
    }
}

TEST_CASE("mc fusion: degenerate variance, determinism, confidence")
{
    FusionConfig fusion;
    fusion.mc_rounds = 16;
    fusion.xi = 1e-6;

    auto run = [&](double logvar_value, std::uint64_t seed) {
        Tape tape;
        Rng rng(seed);
        Rng noise(seed + 1);
        std::vector<UncertaintyEstimate> estimates;
        Tensor mu_v = random_tensor({6, 4}, rng);
        for (int cam = 0; cam < 2; ++cam)
        {
            UncertaintyEstimate est;
            est.mu = tape.constant(mu_v);
            est.logvar = tape.constant(Tensor({6, 4}, logvar_value));
            estimates.push_back(est);
        }
        std::vector<Tensor> masks = {Tensor({6, 1}, 1.0), Tensor({6, 1}, 1.0)};
        McFusion out = mc_fuse(tape, estimates, masks, fusion, noise);
        return std::make_pair(Tensor(out.fused.value()), out.conf);
    };

    // near-zero variance: confidence collapses and the mean is mu
    auto [fused_lo, conf_lo] = run(-10.0, 42);
    for (std::size_t i = 0; i < conf_lo.size(); ++i)
        CHECK(conf_lo[i] < 1e-4);

    // identical seeds reproduce results bit for bit
    auto [fa, ca] = run(-1.0, 7);
    auto [fb, cb] = run(-1.0, 7);
    CHECK(std::memcmp(fa.data(), fb.data(), fa.size() * sizeof(double)) == 0);
    CHECK(std::memcmp(ca.data(), cb.data(), ca.size() * sizeof(double)) == 0);

    // mc_rounds < 2 cannot produce the confidence
    FusionConfig bad = fusion;
    bad.mc_rounds = 1;
    Tape tape;
    std::vector<UncertaintyEstimate> est = {{tape.constant(Tensor({1, 1})),
                                             tape.constant(Tensor({1, 1}))}};
    std::vector<Tensor> masks = {Tensor({1, 1}, 1.0)};
    Rng noise(1);
    CHECK_THROWS_AS(mc_fuse(tape, est, masks, bad, noise), std::invalid_argument);
}

TEST_CASE("single-camera confidence approaches the analytic variance")
{
    FusionConfig fusion;
    fusion.mc_rounds = 10000;
    fusion.xi = 1e-6;
    Tape tape;
    const double logvar = -1.0;
    const double var = std::exp(logvar);
    std::vector<UncertaintyEstimate> estimates = {
        {tape.constant(Tensor({2, 3}, 1.0)), tape.constant(Tensor({2, 3}, logvar))}};
    std::vector<Tensor> masks = {Tensor({2, 1}, 1.0)};
    Rng noise(99);
    McFusion out = mc_fuse(tape, estimates, masks, fusion, noise);
    const double w = 1.0 / (var + fusion.xi);
    const double expect = var * (w / (w + fusion.xi)) * (w / (w + fusion.xi));
    for (std::size_t i = 0; i < out.conf.size(); ++i)
        CHECK(std::abs(out.conf[i] - expect) / expect < 0.05);
}

TEST_CASE("KL regularizer fixed points and hand values")
{
    Tape tape;
    const double lvp = -4.0;

    // prior match: exactly zero
    UncertaintyEstimate prior{tape.constant(Tensor({3, 5}, 0.0)),
                              tape.constant(Tensor({3, 5}, lvp))};
    CHECK(std::abs(kl_regularizer(prior, lvp).value()[0]) < 1e-12);

    // mu=0, logvar=-3 (var = e * var_prior): (e-2)/2
    UncertaintyEstimate a{tape.constant(Tensor({2, 2}, 0.0)), tape.constant(Tensor({2, 2}, -3.0))};
    CHECK(kl_regularizer(a, lvp).value()[0] ==
          doctest::Approx((std::exp(1.0) - 2.0) / 2.0).epsilon(1e-9));
    CHECK(kl_regularizer(a, lvp).value()[0] == doctest::Approx(0.3591409).epsilon(1e-6));

    // mu^2 = var_prior, var = var_prior: 0.5
    UncertaintyEstimate b{tape.constant(Tensor({1, 1}, std::exp(lvp / 2.0))),
                          tape.constant(Tensor({1, 1}, lvp))};
    CHECK(kl_regularizer(b, lvp).value()[0] == doctest::Approx(0.5).epsilon(1e-9));

    // non-negativity on random perturbations
    Rng rng(8);
    for (int trial = 0; trial < 200; ++trial)
    {
        UncertaintyEstimate r{tape.constant(random_tensor({4, 4}, rng, -2, 2)),
                              tape.constant(random_tensor({4, 4}, rng, -8, 3))};
        CHECK(kl_regularizer(r, lvp).value()[0] >= 0.0);
    }
}

TEST_CASE("center distance and gating")
{
    BEVGrid grid;
    grid.h = grid.w = 50;
    grid.cell_m = 1.0;
    const Tensor d = center_distances(grid);

    const std::size_t center_q = 24 * 50 + 24;  // row 24, col 24 -> distance to (24.5,24.5)
    CHECK(d[center_q] == doctest::Approx(std::sqrt(0.5) / 25.0).epsilon(1e-12));
    // a cell 25 columns right of center: R = 25 -> exactly 1
    // O = (24.5, 24.5); col 49.5 does not exist, so check the formula directly
    GatingConfig gate;
    CHECK(gating_factor(gate.delta, gate) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(gating_factor(0.0, gate) == doctest::Approx(0.99966465).epsilon(1e-7));
    CHECK(gating_factor(1.0, gate) == doctest::Approx(0.11920292).epsilon(1e-7));

    // corner of the 50x50 grid: sqrt(2) * 24.5 / 25
    CHECK(d[0] == doctest::Approx(1.38593).epsilon(1e-5));

    // strict monotone decrease
    double prev = 2.0;
    for (double dist = 0.0; dist <= 1.4 + 1e-12; dist += 1e-3)
    {
        const double g = gating_factor(dist, gate);
        CHECK(g < prev);
        prev = g;
    }

    // ablation: gating off pins gamma at 0.5
    const Tensor off = gating_vector(grid, gate, false);
    for (std::size_t i = 0; i < off.size(); ++i)
        CHECK(off[i] == 0.5);
}

TEST_CASE("gated temporal attention")
{
    EncoderConfig cfg = small_cfg();
    BEVGrid grid;
    grid.h = grid.w = 6;
    grid.cell_m = 0.5;
    ParamStore store;
    Rng rng(10);
    init_encoder_params(store, cfg, grid.queries(), rng);
    // give the heads non-trivial values
    Rng wiggle(11);
    for (const char* n : {"tsa.off.w", "tsa.off.b", "tsa.wt.w", "tsa.wt.b"})
    {
        Tensor& t = store.value(std::string("enc.b0.") + n);
        for (std::size_t i = 0; i < t.size(); ++i)
            t[i] = wiggle.uniform(-0.5, 0.5);
    }

    Tensor base_pts({grid.queries(), 2});
    std::size_t q = 0;
    for (std::size_t row = 0; row < grid.h; ++row)
        for (std::size_t col = 0; col < grid.w; ++col, ++q)
        {
            base_pts[2 * q] = static_cast<double>(col);
            base_pts[2 * q + 1] = static_cast<double>(row);
        }

    Rng data(12);
    Tensor q_v = random_tensor({grid.queries(), cfg.dim}, data);
    Tensor prev_v = random_tensor({cfg.dim, grid.h, grid.w}, data);

    // gamma forced to 1: the history branch contributes exactly zero
    {
        Tape tape;
        Var queries = tape.constant(q_v);
        Var cur = queries_to_grid(queries, grid);
        Var prev = tape.constant(prev_v);
        Var garbage = tape.constant(Tensor({cfg.dim, grid.h, grid.w}, 1e9));
        Tensor gamma1({grid.queries(), 1}, 1.0);
        Var with_prev =
            gated_temporal_attend(tape, store, 0, queries, prev, cur, base_pts, gamma1, cfg);
        Var with_garbage =
            gated_temporal_attend(tape, store, 0, queries, garbage, cur, base_pts, gamma1, cfg);
        for (std::size_t i = 0; i < with_prev.value().size(); ++i)
            CHECK(with_prev.value()[i] == with_garbage.value()[i]);
    }

    // equal frames: any gamma reproduces the ungated single-frame result
    {
        Tape tape;
        Var queries = tape.constant(q_v);
        Var cur = tape.constant(prev_v);
        Var prev = tape.constant(prev_v);
        Rng grng(13);
        Tensor gamma({grid.queries(), 1});
        for (std::size_t i = 0; i < gamma.size(); ++i)
            gamma[i] = grng.uniform(0.05, 0.95);
        Tensor gamma_one({grid.queries(), 1}, 1.0);
        Var mixed = gated_temporal_attend(tape, store, 0, queries, prev, cur, base_pts, gamma, cfg);
        Var single =
            gated_temporal_attend(tape, store, 0, queries, prev, cur, base_pts, gamma_one, cfg);
        for (std::size_t i = 0; i < mixed.value().size(); ++i)
            CHECK(std::abs(mixed.value()[i] - single.value()[i]) < 1e-12);
    }

    // gated weights of both frames sum to one per query
    {
        Tape tape;
        Rng r(14);
        Var w = softmax_lastdim(tape.constant(random_tensor({20, 4}, r, -3, 3)));
        Tensor gamma({20, 1});
        for (std::size_t i = 0; i < 20; ++i)
            gamma[i] = r.uniform(0.0, 1.0);
        const GatedWeights gw = gated_weights(w, tape.constant(gamma));
        for (std::size_t row = 0; row < 20; ++row)
        {
            double sum = 0.0;
            for (std::size_t k = 0; k < 4; ++k)
                sum += gw.prev.value()[row * 4 + k] + gw.cur.value()[row * 4 + k];
            CHECK(std::abs(sum - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("ego alignment")
{
    BEVGrid grid;
    grid.h = grid.w = 8;
    grid.cell_m = 0.5;
    Rng rng(15);
    Tensor qv = random_tensor({grid.queries(), 3}, rng);

    // zero delta is the identity
    {
        Tape tape;
        Var aligned = ego_align(tape, tape.constant(qv), grid, 0.0, 0.0, 0.0);
        for (std::size_t i = 0; i < qv.size(); ++i)
            CHECK(std::abs(aligned.value()[i] - qv[i]) < 1e-12);
    }

    // pure quarter-turn matches the integer rotation oracle
    {
        Tape tape;
        Var aligned =
            ego_align(tape, tape.constant(qv), grid, 0.0, 0.0, 3.14159265358979323846 / 2.0);
        for (std::size_t row = 0; row < 8; ++row)
            for (std::size_t col = 0; col < 8; ++col)
                for (std::size_t c = 0; c < 3; ++c)
                {
                    const double got = aligned.value()[(row * 8 + col) * 3 + c];
                    const double want = qv[((7 - col) * 8 + row) * 3 + c];
                    CHECK(std::abs(got - want) < 1e-9);
                }
    }

    // forward motion of one cell shifts rows and zero-fills the border
    {
        Tape tape;
        Var aligned = ego_align(tape, tape.constant(qv), grid, grid.cell_m, 0.0, 0.0);
        for (std::size_t row = 0; row < 8; ++row)
            for (std::size_t col = 0; col < 8; ++col)
                for (std::size_t c = 0; c < 3; ++c)
                {
                    const double got = aligned.value()[(row * 8 + col) * 3 + c];
                    const double want = row == 0 ? 0.0 : qv[((row - 1) * 8 + col) * 3 + c];
                    CHECK(std::abs(got - want) < 1e-12);
                }
    }
}

TEST_CASE("ffn: zero weights reduce to layer norm, width doubles the dim")
{
    EncoderConfig cfg = small_cfg();
    ParamStore store;
    Rng rng(16);
    init_encoder_params(store, cfg, 4, rng);
    CHECK(store.value("enc.b0.ffn.fc1.w").shape() == std::vector<std::size_t>{8, 16});

    for (const char* n : {"ffn.fc1.w", "ffn.fc1.b", "ffn.fc2.w", "ffn.fc2.b"})
        store.value(std::string("enc.b0.") + n).fill(0.0);
    Tape tape;
    Rng drop(17);
    Tensor x = random_tensor({4, 8}, rng);
    Var out = ffn_forward(tape, store, 0, tape.constant(x), cfg, false, drop);
    Var want = layer_normalize(tape.constant(x), tape.param(store, "enc.b0.ffn.ln.g"),
                               tape.param(store, "enc.b0.ffn.ln.b"));
    for (std::size_t i = 0; i < out.value().size(); ++i)
        CHECK(out.value()[i] == doctest::Approx(want.value()[i]).epsilon(1e-14));

    // full profile widths: 256 -> 512
    EncoderConfig big = cfg;
    big.dim = 256;
    ParamStore store2;
    init_encoder_params(store2, big, 4, rng);
    CHECK(store2.value("enc.b0.ffn.fc1.w").shape() == std::vector<std::size_t>{256, 512});
}

TEST_CASE("usca block: shape, masked queries, high-variance exclusion")
{
    EncoderConfig cfg = small_cfg();
    cfg.fusion.mc_rounds = 32;
    BEVGrid grid;
    grid.h = grid.w = 4;
    grid.cell_m = 2.0;
    grid.z_anchors = {0.0, 0.5};
    const CameraRig rig = default_rig(16, 16);
    const RefPoints refs = bev_reference_points(grid, rig);

    ParamStore store;
    Rng rng(18);
    init_encoder_params(store, cfg, grid.queries(), rng);

    Tape tape;
    Rng noise(19);
    std::vector<Var> maps;
    for (int cam = 0; cam < 4; ++cam)
        maps.push_back(tape.constant(random_tensor({cfg.dim, 4, 4}, rng)));
    Var queries = initial_queries(tape, store);
    const UscaResult res =
        usca_block(tape, store, 0, queries, maps, refs, 4.0 / 16.0, cfg, noise);
    CHECK(res.queries.value().shape() == std::vector<std::size_t>{16, 8});
    CHECK(res.kl.value().size() == 1);
    CHECK(res.conf.size() == 16);
    CHECK(res.queries.value().all_finite());

    // a query invisible everywhere passes through as LN(q)
    RefPoints hidden = refs;
    const std::size_t victim = 5;
    for (std::size_t c = 0; c < hidden.n_cam; ++c)
    {
        hidden.mask[victim * hidden.n_cam + c] = 0;
        for (std::size_t a = 0; a < hidden.n_anchor; ++a)
            hidden.anchor_visible[(victim * hidden.n_cam + c) * hidden.n_anchor + a] = 0;
    }
    Tape t2;
    Rng noise2(19);
    std::vector<Var> maps2;
    for (int cam = 0; cam < 4; ++cam)
        maps2.push_back(t2.constant(maps[cam].value()));
    Var q2 = initial_queries(t2, store);
    const UscaResult res2 =
        usca_block(t2, store, 0, q2, maps2, hidden, 4.0 / 16.0, cfg, noise2);
    Var plain = layer_normalize(q2, t2.param(store, "enc.b0.sca.ln.g"),
                                t2.param(store, "enc.b0.sca.ln.b"));
    for (std::size_t ch = 0; ch < cfg.dim; ++ch)
        CHECK(res2.queries.value()[victim * cfg.dim + ch] ==
              doctest::Approx(plain.value()[victim * cfg.dim + ch]).epsilon(1e-12));
}

TEST_CASE("precision-weight limit: a high-variance camera is effectively excluded")
{
    FusionConfig fusion;
    fusion.mc_rounds = 32;
    fusion.xi = 1e-6;
    Rng rng(20);
    Tensor mu[3];
    for (int cam = 0; cam < 3; ++cam)
        mu[cam] = random_tensor({8, 6}, rng);

    auto fuse = [&](bool include_bad, std::uint64_t seed) {
        Tape tape;
        std::vector<UncertaintyEstimate> est;
        for (int cam = 0; cam < 3; ++cam)
            est.push_back({tape.constant(mu[cam]),
                           tape.constant(Tensor({8, 6}, cam == 2 ? 4.0 : -4.0))});
        std::vector<Tensor> masks(3, Tensor({8, 1}, 1.0));
        if (!include_bad)
            masks[2].fill(0.0);
        Rng noise(seed);
        return Tensor(mc_fuse(tape, est, masks, fusion, noise).fused.value());
    };

    const Tensor with_bad = fuse(true, 31);
    const Tensor without_bad = fuse(false, 31);
    for (std::size_t i = 0; i < with_bad.size(); ++i)
        CHECK(std::abs(with_bad[i] - without_bad[i]) < 1e-3);
}

TEST_CASE("uniform fusion ablation reduces to a plain masked mean of the draws")
{
    FusionConfig fusion;
    fusion.mc_rounds = 4;
    fusion.xi = 1e-6;
    fusion.uniform_weights = true;
    const std::size_t n = 6, c = 5;
    Rng rng(40);
    Tensor mu[2] = {random_tensor({n, c}, rng), random_tensor({n, c}, rng)};
    Tensor lv[2] = {random_tensor({n, c}, rng, -3, 1), random_tensor({n, c}, rng, -3, 1)};
    std::vector<Tensor> masks = {Tensor({n, 1}, 1.0), Tensor({n, 1}, 1.0)};
    masks[1][2] = 0.0;

    Tape tape;
    std::vector<UncertaintyEstimate> est;
    for (int cam = 0; cam < 2; ++cam)
        est.push_back({tape.constant(mu[cam]), tape.constant(lv[cam])});
    Rng noise(41);
    const McFusion out = mc_fuse(tape, est, masks, fusion, noise);

    // oracle: replay the same standard-normal stream and average the masked
    // per-camera draws directly, ignoring the variances entirely
    Rng replay(41);
    Tensor want({n, c});
    for (std::size_t s = 0; s < fusion.mc_rounds; ++s)
    {
        Tensor draw[2];
        for (int cam = 0; cam < 2; ++cam)
        {
            draw[cam] = Tensor({n, c});
            for (std::size_t i = 0; i < n * c; ++i)
                draw[cam][i] = mu[cam][i] + std::exp(0.5 * lv[cam][i]) * replay.normal();
        }
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t ch = 0; ch < c; ++ch)
            {
                double num = 0.0, den = fusion.xi;
                for (int cam = 0; cam < 2; ++cam)
                {
                    num += masks[cam][i] * draw[cam][i * c + ch];
                    den += masks[cam][i];
                }
                want[i * c + ch] += num / den / static_cast<double>(fusion.mc_rounds);
            }
    }
    for (std::size_t i = 0; i < want.size(); ++i)
        CHECK(out.fused.value()[i] == doctest::Approx(want[i]).epsilon(1e-12));
}

TEST_CASE("usca and temporal attention pass the gradient check on a micro profile")
{
    EncoderConfig cfg = small_cfg();
    cfg.fusion.mc_rounds = 2;
    BEVGrid grid;
    grid.h = grid.w = 4;
    grid.cell_m = 2.0;
    const CameraRig rig = default_rig(16, 16);
    const RefPoints refs = bev_reference_points(grid, rig);

    ParamStore store;
    Rng rng(21);
    init_encoder_params(store, cfg, grid.queries(), rng);
    // move heads off their zero init so offset gradients are exercised
    for (const char* n : {"tsa.off.w", "tsa.wt.w", "sca.off.w", "sca.wt.w"})
    {
        Tensor& t = store.value(std::string("enc.b0.") + n);
        for (std::size_t i = 0; i < t.size(); ++i)
            t[i] = rng.uniform(-0.3, 0.3);
    }
    Tensor map_v[4];
    for (int cam = 0; cam < 4; ++cam)
        map_v[cam] = random_tensor({cfg.dim, 4, 4}, rng);
    Tensor prev_v = random_tensor({grid.queries(), cfg.dim}, rng);
    const Tensor gamma = gating_vector(grid, cfg.gate, true);
    Tensor base_pts({grid.queries(), 2});
    std::size_t q = 0;
    for (std::size_t row = 0; row < grid.h; ++row)
        for (std::size_t col = 0; col < grid.w; ++col, ++q)
        {
            base_pts[2 * q] = static_cast<double>(col) + 0.3;
            base_pts[2 * q + 1] = static_cast<double>(row) + 0.4;
        }

    auto build = [&](Tape& tape) {
        Rng noise(500);
        std::vector<Var> maps;
        for (int cam = 0; cam < 4; ++cam)
            maps.push_back(tape.constant(map_v[cam]));
        Var queries = initial_queries(tape, store);
        Var prev = ego_align(tape, tape.constant(prev_v), grid, 0.31, -0.2, 0.1);
        Var cur = queries_to_grid(queries, grid);
        Var prev_grid = queries_to_grid(prev, grid);
        Var t = gated_temporal_attend(tape, store, 0, queries, prev_grid, cur, base_pts, gamma,
                                      cfg);
        const UscaResult usca =
            usca_block(tape, store, 0, t, maps, refs, 4.0 / 16.0, cfg, noise);
        Var f = ffn_forward(tape, store, 0, usca.queries, cfg, true, noise);
        Rng probe(501);
        Var w = tape.constant(random_tensor({grid.queries(), cfg.dim}, probe));
        return add(sum_all(mul(f, w)), scale(usca.kl, 0.01));
    };
    const auto report = finite_diff_check(build, store, 1e-5, 5, 77);
    CHECK(report.max_rel_err < 1e-4);
}
