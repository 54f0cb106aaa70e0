// Copyright (c) 2026 fbev contributors.
// SPDX-License-Identifier: Apache-2.0

#include "fbev/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace fbev {

namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0)
{
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

BackboneConfig backbone_from(const RunConfig& cfg)
{
    BackboneConfig bb;
    bb.img_h = cfg.img_h;
    bb.img_w = cfg.img_w;
    bb.patch = cfg.patch;
    bb.dim = cfg.backbone_dim;
    bb.layers = cfg.backbone_layers;
    bb.fused_channels = cfg.enc_dim;
    return bb;
}

EncoderConfig encoder_from(const RunConfig& cfg)
{
    EncoderConfig enc;
    enc.blocks = cfg.enc_blocks;
    enc.dim = cfg.enc_dim;
    enc.dropout_rate = cfg.enc_dropout;
    enc.distance_gating = cfg.distance_gating == "on";
    enc.gate.kappa = cfg.kappa;
    enc.gate.delta = cfg.delta;
    enc.fusion.k_points = cfg.k_points;
    enc.fusion.mc_rounds = cfg.mc_train;
    enc.fusion.xi = cfg.xi;
    enc.fusion.log_var_prior = cfg.log_var_prior;
    enc.fusion.lambda_kl = cfg.lambda_kl;
    enc.fusion.uniform_weights = cfg.uncertainty_fusion == "uniform";
    return enc;
}

std::string fmt17(double v)
{
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

Model build_model(const RunConfig& cfg)
{
    cfg.validate();
    Model m;
    m.cfg = cfg;
    m.rig = cfg.rig_file.empty() ? default_rig(cfg.img_w, cfg.img_h) : load_rig(cfg.rig_file);
    m.grid.h = cfg.grid_h;
    m.grid.w = cfg.grid_w;
    m.grid.cell_m = cfg.grid_cell_m;
    m.grid.z_anchors = cfg.grid_z_anchors;
    m.backbone = backbone_from(cfg);
    m.encoder = encoder_from(cfg);
    m.focal.alpha = cfg.focal_alpha;
    m.focal.gamma = cfg.focal_gamma;
    m.refs = bev_reference_points(m.grid, m.rig);
    m.gamma = gating_vector(m.grid, m.encoder.gate, m.encoder.distance_gating);
    m.base_pts = Tensor({m.grid.queries(), 2});
    std::size_t q = 0;
    for (std::size_t row = 0; row < m.grid.h; ++row)
        for (std::size_t col = 0; col < m.grid.w; ++col, ++q)
        {
            m.base_pts[2 * q] = static_cast<double>(col);
            m.base_pts[2 * q + 1] = static_cast<double>(row);
        }
    m.feat_scale =
        static_cast<double>(drme_out_w(m.backbone)) / static_cast<double>(cfg.img_w);

    Rng init(cfg.seed);
    init_drme_params(m.params, m.backbone, init);
    init_encoder_params(m.params, m.encoder, m.grid.queries(), init);
    init_decoder_params(m.params, m.encoder.dim, init);
    return m;
}

Model load_model(const RunConfig& cfg, const fs::path& checkpoint)
{
    Model m = build_model(cfg);
    ParamStore loaded = ParamStore::load(checkpoint);
    std::string mismatches;
    for (const std::string& name : m.params.names())
    {
        if (!loaded.has(name))
        {
            mismatches += "  missing: " + name + "\n";
            continue;
        }
        if (!loaded.value(name).same_shape(m.params.value(name)))
            mismatches += "  " + name + ": checkpoint " + loaded.value(name).shape_str() +
                          " vs config " + m.params.value(name).shape_str() + "\n";
    }
    for (const std::string& name : loaded.names())
        if (!m.params.has(name))
            mismatches += "  unexpected: " + name + "\n";
    if (!mismatches.empty())
        throw std::runtime_error("checkpoint/config mismatch:\n" + mismatches);
    for (const std::string& name : m.params.names())
        m.params.value(name) = loaded.value(name);
    return m;
}

Tensor upsample_labels_nearest(const Tensor& labels, std::size_t th, std::size_t tw)
{
    const std::size_t h = labels.extent(0), w = labels.extent(1);
    if (h == th && w == tw)
        return labels;
    Tensor out({th, tw});
    for (std::size_t y = 0; y < th; ++y)
        for (std::size_t x = 0; x < tw; ++x)
            out[y * tw + x] = labels[(y * h / th) * w + x * w / tw];
    return out;
}

SequenceOutput forward_sequence(Model& model, Tape& tape, const std::vector<SceneSample>& frames,
                                bool training, Rng& noise)
{
    if (frames.empty())
        throw std::invalid_argument("forward_sequence: empty frame sequence");
    const std::size_t n_cams = model.rig.cams.size();

    Var queries;
    Var prev_queries;  // final queries of the previous frame
    Var kl_acc;
    Tensor conf;
    std::size_t kl_count = 0;

    for (std::size_t f = 0; f < frames.size(); ++f)
    {
        const SceneSample& frame = frames[f];
        if (frame.images.size() != n_cams)
            throw std::invalid_argument("forward_sequence: camera count mismatch");

        std::vector<Var> maps;
        maps.reserve(n_cams);
        for (std::size_t c = 0; c < n_cams; ++c)
            maps.push_back(drme_forward(tape, model.params, model.backbone, frame.images[c]));

        queries = initial_queries(tape, model.params);
        Var aligned_prev;
        if (f > 0)
        {
            const auto [dx, dy, dyaw] = pose_delta(frames[f - 1].pose, frame.pose);
            aligned_prev = ego_align(tape, prev_queries, model.grid, dx, dy, dyaw);
        }

        for (std::size_t b = 0; b < model.encoder.blocks; ++b)
        {
            Var cur_map = queries_to_grid(queries, model.grid);
            Var prev_map = f == 0 ? cur_map : queries_to_grid(aligned_prev, model.grid);
            queries = gated_temporal_attend(tape, model.params, b, queries, prev_map, cur_map,
                                            model.base_pts, model.gamma, model.encoder);
            UscaResult usca = usca_block(tape, model.params, b, queries, maps, model.refs,
                                         model.feat_scale, model.encoder, noise);
            queries = usca.queries;
            kl_acc = kl_acc.valid() ? add(kl_acc, usca.kl) : usca.kl;
            ++kl_count;
            conf = std::move(usca.conf);
            queries = ffn_forward(tape, model.params, b, queries, model.encoder, training, noise);
        }
        prev_queries = queries;
    }

    SequenceOutput out;
    out.kl_term = scale(kl_acc, 1.0 / static_cast<double>(kl_count));
    out.logits = mask_head_decode(tape, model.params, queries, model.grid, model.target_h(),
                                  model.target_w());
    const Tensor labels =
        upsample_labels_nearest(frames.back().bev_gt, model.target_h(), model.target_w());
    out.focal_term = focal_loss(out.logits, labels, model.focal);
    out.total = total_loss(out.focal_term, out.kl_term, model.encoder.fusion.lambda_kl);
    out.conf = std::move(conf);
    return out;
}

PredictOutput predict_sequence(Model& model, const std::vector<SceneSample>& frames,
                               std::uint64_t noise_seed)
{
    const std::size_t train_rounds = model.encoder.fusion.mc_rounds;
    model.encoder.fusion.mc_rounds = model.cfg.mc_eval;
    Tape tape;
    Rng noise(noise_seed);
    SequenceOutput seq = forward_sequence(model, tape, frames, false, noise);
    model.encoder.fusion.mc_rounds = train_rounds;

    PredictOutput out;
    out.classes = argmax_classes(seq.logits.value());
    out.conf_map = Tensor({model.grid.h, model.grid.w});
    for (std::size_t i = 0; i < seq.conf.size(); ++i)
        out.conf_map[i] = seq.conf[i];
    out.focal = seq.focal_term.value()[0];
    out.kl = seq.kl_term.value()[0];
    out.total = seq.total.value()[0];
    return out;
}

// ---- training ------------------------------------------------------------------

TrainResult train_model(const RunConfig& cfg, const fs::path& dataset, const fs::path& out_dir,
                        std::ostream* console)
{
    const auto t0 = Clock::now();
    Model model = build_model(cfg);
    const DatasetInfo info = open_dataset(dataset);
    if (info.scenes == 0)
        throw TrainError("dataset has no scenes", 0);

    const std::size_t steps_per_epoch = (info.scenes + cfg.batch - 1) / cfg.batch;
    const std::size_t total_steps =
        cfg.epochs > 0 ? cfg.epochs * steps_per_epoch : cfg.steps;

    fs::create_directories(out_dir);
    std::ofstream log(out_dir / "train_log.csv");
    if (!log)
        throw std::runtime_error("cannot write train log in '" + out_dir.string() + "'");
    log << "step,focal,kl,total\n";

    AdamWConfig adam_cfg;
    adam_cfg.lr = cfg.lr;
    adam_cfg.beta1 = cfg.beta1;
    adam_cfg.beta2 = cfg.beta2;
    adam_cfg.eps = cfg.adam_eps;
    adam_cfg.weight_decay = cfg.weight_decay;
    adam_cfg.epoch_decay = cfg.epoch_decay;
    AdamW opt(adam_cfg);

    Rng shuffle_rng = Rng(cfg.seed).fork(17);
    std::vector<std::size_t> order(info.scenes);
    for (std::size_t i = 0; i < order.size(); ++i)
        order[i] = i;
    const auto reshuffle = [&]() {
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.uniform_index(i)]);
    };
    reshuffle();

    TrainResult result;
    std::size_t cursor = 0;
    std::size_t epoch = 0;
    for (std::size_t step = 1; step <= total_steps; ++step)
    {
        Tape tape;
        Rng noise = Rng(cfg.seed).fork(1000 + step);
        Var batch_total, batch_focal, batch_kl;
        for (std::size_t b = 0; b < cfg.batch; ++b)
        {
            const std::size_t scene = order[cursor];
            cursor = (cursor + 1) % order.size();
            auto frames = load_scene_sequence(info, scene);
            if (frames.size() > cfg.seq_len)
                frames.resize(cfg.seq_len);
            SequenceOutput seq = forward_sequence(model, tape, frames, true, noise);
            batch_total = batch_total.valid() ? add(batch_total, seq.total) : seq.total;
            batch_focal = batch_focal.valid() ? add(batch_focal, seq.focal_term) : seq.focal_term;
            batch_kl = batch_kl.valid() ? add(batch_kl, seq.kl_term) : seq.kl_term;
        }
        const double inv_batch = 1.0 / static_cast<double>(cfg.batch);
        Var loss = scale(batch_total, inv_batch);
        const double total_v = loss.value()[0];
        const double focal_v = batch_focal.value()[0] * inv_batch;
        const double kl_v = batch_kl.value()[0] * inv_batch;
        if (!std::isfinite(total_v))
            throw TrainError("non-finite loss at step " + std::to_string(step), step);

        model.params.zero_grads();
        tape.backward(loss);
        opt.step(model.params);

        log << step << ',' << fmt17(focal_v) << ',' << fmt17(kl_v) << ',' << fmt17(total_v)
            << '\n';
        log.flush();
        result.rows.push_back({step, focal_v, kl_v, total_v});
        if (console && (step == 1 || step % 25 == 0 || step == total_steps))
            *console << "step " << step << "/" << total_steps << "  focal " << focal_v << "  kl "
                     << kl_v << "  total " << total_v << "  lr " << opt.current_lr() << '\n';

        if (step % steps_per_epoch == 0)
        {
            ++epoch;
            opt.end_epoch();
            reshuffle();
            std::ostringstream dir;
            dir << "checkpoint_epoch_" << std::setw(3) << std::setfill('0') << epoch;
            model.params.save(out_dir / dir.str());
        }
    }
    model.params.save(out_dir / "checkpoint");
    result.checkpoint = out_dir / "checkpoint";
    result.epochs_completed = epoch;
    result.seconds = seconds_since(t0);
    return result;
}

// ---- evaluation ----------------------------------------------------------------

namespace {

EvalRow row_from_confusion(const std::string& name, const ConfusionMatrix& cm)
{
    EvalRow row;
    row.name = name;
    const auto ious = per_class_ious(cm);
    for (std::size_t i = 0; i < row.iou.size(); ++i)
        row.iou[i] = ious[i];
    row.miou_value = miou(cm);
    return row;
}

const char* kClassNames[kNumClasses] = {"void", "road", "sidewalk", "vegetation", "vehicle",
                                        "ego"};

void print_row(std::ostream& os, const EvalRow& row)
{
    os << std::left << std::setw(24) << row.name << std::right << std::fixed
       << std::setprecision(4);
    for (double v : row.iou)
        os << std::setw(9) << v;
    os << std::setw(9) << row.miou_value << '\n';
}

EvalResult evaluate_internal(Model& model, const fs::path& dataset, const fs::path& out_dir,
                             std::ostream* console, const std::string& row_name,
                             bool export_images)
{
    const DatasetInfo info = open_dataset(dataset);
    ConfusionMatrix cm;
    if (!out_dir.empty())
        fs::create_directories(out_dir);
    for (std::size_t s = 0; s < info.scenes; ++s)
    {
        auto frames = load_scene_sequence(info, s);
        if (frames.size() > model.cfg.seq_len)
            frames.resize(model.cfg.seq_len);
        const PredictOutput pred =
            predict_sequence(model, frames, model.cfg.seed ^ (0xe5a1 + s));
        const Tensor labels =
            upsample_labels_nearest(frames.back().bev_gt, model.target_h(), model.target_w());
        cm.add(labels, pred.classes);
        if (export_images && !out_dir.empty())
        {
            std::ostringstream stem;
            stem << "scene_" << std::setw(4) << std::setfill('0') << s;
            write_pgm(pred.classes, out_dir / (stem.str() + "_pred.pgm"));
            write_class_ppm(pred.classes, out_dir / (stem.str() + "_pred.ppm"));
            write_class_ppm(labels, out_dir / (stem.str() + "_gt.ppm"));
            double cmax = 0;
            for (std::size_t i = 0; i < pred.conf_map.size(); ++i)
                cmax = std::max(cmax, pred.conf_map[i]);
            write_pgm_scaled(pred.conf_map, out_dir / (stem.str() + "_conf.pgm"), 0.0,
                             cmax > 0 ? cmax : 1.0);
        }
    }
    EvalResult result;
    result.row = row_from_confusion(row_name, cm);
    result.scenes = info.scenes;
    if (console)
    {
        *console << std::left << std::setw(24) << "config";
        for (std::size_t c = 1; c < kNumClasses; ++c)
            *console << std::right << std::setw(9) << kClassNames[c];
        *console << std::right << std::setw(9) << "mIoU" << '\n';
        print_row(*console, result.row);
    }
    if (!out_dir.empty())
    {
        std::ofstream csv(out_dir / "metrics.csv");
        csv << "config";
        for (std::size_t c = 1; c < kNumClasses; ++c)
            csv << ',' << kClassNames[c];
        csv << ",miou\n" << result.row.name;
        for (double v : result.row.iou)
            csv << ',' << fmt17(v);
        csv << ',' << fmt17(result.row.miou_value) << '\n';
    }
    return result;
}

}  // namespace

EvalResult evaluate_model(Model& model, const fs::path& dataset, const fs::path& out_dir,
                          std::ostream* console)
{
    const std::string name = std::string(model.encoder.fusion.uniform_weights ? "uniform" : "precision") +
                             "+" + (model.encoder.distance_gating ? "gating" : "nogating");
    return evaluate_internal(model, dataset, out_dir, console, name, true);
}

std::vector<EvalRow> evaluate_ablation_table(const RunConfig& cfg, const fs::path& checkpoint,
                                             const fs::path& dataset, const fs::path& out_dir,
                                             std::ostream* console)
{
    struct Combo {
        const char* name;
        const char* fusion;
        const char* gating;
    };
    const Combo combos[4] = {
        {"baseline", "uniform", "off"},
        {"+gating", "uniform", "on"},
        {"+uncertainty", "on", "off"},
        {"+both", "on", "on"},
    };
    std::vector<EvalRow> rows;
    for (const Combo& combo : combos)
    {
        RunConfig ablated = cfg;
        ablated.uncertainty_fusion = combo.fusion;
        ablated.distance_gating = combo.gating;
        Model model = load_model(ablated, checkpoint);
        rows.push_back(
            evaluate_internal(model, dataset, fs::path(), nullptr, combo.name, false).row);
    }
    if (console)
    {
        *console << std::left << std::setw(24) << "ablation";
        for (std::size_t c = 1; c < kNumClasses; ++c)
            *console << std::right << std::setw(9) << kClassNames[c];
        *console << std::right << std::setw(9) << "mIoU" << '\n';
        for (const EvalRow& row : rows)
            print_row(*console, row);
    }
    if (!out_dir.empty())
    {
        fs::create_directories(out_dir);
        std::ofstream csv(out_dir / "ablation.csv");
        csv << "config";
        for (std::size_t c = 1; c < kNumClasses; ++c)
            csv << ',' << kClassNames[c];
        csv << ",miou\n";
        for (const EvalRow& row : rows)
        {
            csv << row.name;
            for (double v : row.iou)
                csv << ',' << fmt17(v);
            csv << ',' << fmt17(row.miou_value) << '\n';
        }
    }
    return rows;
}

// ---- gradient checking -----------------------------------------------------------

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0)
{
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i)
        t[i] = rng.uniform(lo, hi);
    return t;
}

Var fixed_readout(Tape& tape, Var x, std::uint64_t seed)
{
    Rng rng(seed);
    return sum_all(mul(x, tape.constant(random_tensor(x.value().shape(), rng))));
}

/// Identity forward with a deliberately wrong backward rule (negative
/// control for the gradient checker).
Var corrupted_identity(Var x)
{
    const std::size_t xid = x.id;
    std::size_t ins[] = {xid};
    return x.tape->emit(Tensor(x.value()), ins, [xid](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad_buffer(self);
        Tensor gx(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i)
            gx[i] = 1.01 * g[i];
        tp.add_grad(xid, gx);
    });
}

RunConfig micro_profile(std::uint64_t seed)
{
    RunConfig cfg = desk_profile();
    cfg.seed = seed;
    cfg.img_h = cfg.img_w = 16;
    cfg.patch = 8;
    cfg.backbone_dim = 8;
    cfg.backbone_layers = 4;
    cfg.enc_dim = 8;
    cfg.enc_blocks = 1;
    cfg.k_points = 2;
    cfg.mc_train = 2;
    cfg.grid_h = cfg.grid_w = 4;
    cfg.grid_cell_m = 2.0;
    cfg.enc_dropout = 0.1;
    return cfg;
}

}  // namespace

std::vector<GradcheckComponent> run_gradcheck(std::uint64_t seed, bool corrupt_hook)
{
    std::vector<GradcheckComponent> results;
    const auto run = [&](const std::string& name, ParamStore& params,
                         const std::function<Var(Tape&)>& build, std::size_t coords) {
        const auto t0 = Clock::now();
        const GradCheckReport report = finite_diff_check(build, params, 1e-5, coords, seed + 13);
        GradcheckComponent comp;
        comp.name = name;
        comp.max_rel_err = report.max_rel_err;
        comp.seconds = seconds_since(t0);
        comp.pass = report.max_rel_err < 1e-4;
        results.push_back(comp);
    };

    const EncoderConfig enc = encoder_from(micro_profile(seed));
    const std::size_t c = enc.dim;
    const std::size_t n = 12;

    // deformable attention: map, offset and weight heads
    {
        ParamStore params;
        Rng rng(seed + 1);
        params.create_uniform("map", {c, 6, 6}, 1, rng);
        params.create_uniform("q", {n, c}, c, rng);
        params.create_uniform("off.w", {c, 2 * enc.fusion.k_points}, c, rng);
        params.create_uniform("off.b", {2 * enc.fusion.k_points}, c, rng);
        params.create_uniform("wt.w", {c, enc.fusion.k_points}, c, rng);
        params.create_uniform("wt.b", {enc.fusion.k_points}, c, rng);
        Tensor refs({n, 2});
        for (std::size_t i = 0; i < n; ++i)
        {
            refs[2 * i] = rng.uniform_index(5) + rng.uniform(0.25, 0.75);
            refs[2 * i + 1] = rng.uniform_index(5) + rng.uniform(0.25, 0.75);
        }
        run("deformable-attention", params, [&params, refs, seed](Tape& tape) {
            Var q = tape.param(params, "q");
            Var offsets = linear(q, tape.param(params, "off.w"), tape.param(params, "off.b"));
            Var logits = linear(q, tape.param(params, "wt.w"), tape.param(params, "wt.b"));
            Var f = deformable_attend(tape.param(params, "map"), refs, offsets, logits);
            return fixed_readout(tape, f, seed + 2);
        }, 20);
    }

    // uncertainty heads through MC fusion plus the KL term
    {
        ParamStore params;
        Rng rng(seed + 3);
        init_encoder_params(params, enc, n, rng);
        Tensor feats[2] = {random_tensor({n, c}, rng), random_tensor({n, c}, rng)};
        std::vector<Tensor> masks = {Tensor({n, 1}, 1.0), Tensor({n, 1}, 1.0)};
        for (std::size_t i = 0; i < n; i += 3)
            masks[1][i] = 0.0;
        run("uncertainty-mc-fusion", params, [&, seed](Tape& tape) {
            std::vector<UncertaintyEstimate> est;
            Var kl;
            for (int cam = 0; cam < 2; ++cam)
            {
                est.push_back(estimate_uncertainty(tape, params, "enc.b0.sca.",
                                                   tape.constant(feats[cam]), enc));
                Var term = kl_regularizer(est.back(), enc.fusion.log_var_prior);
                kl = kl.valid() ? add(kl, term) : term;
            }
            Rng noise(seed + 4);
            McFusion fusion = mc_fuse(tape, est, masks, enc.fusion, noise);
            return add(fixed_readout(tape, fusion.fused, seed + 5), scale(kl, 0.01));
        }, 16);
    }

    // distance gating / temporal attention
    {
        RunConfig cfg = micro_profile(seed);
        BEVGrid grid;
        grid.h = cfg.grid_h;
        grid.w = cfg.grid_w;
        grid.cell_m = cfg.grid_cell_m;
        ParamStore params;
        Rng rng(seed + 6);
        init_encoder_params(params, enc, grid.queries(), rng);
        for (const char* nm : {"tsa.off.w", "tsa.wt.w"})
        {
            Tensor& t = params.value(std::string("enc.b0.") + nm);
            for (std::size_t i = 0; i < t.size(); ++i)
                t[i] = rng.uniform(-0.3, 0.3);
        }
        params.create_uniform("prev", {grid.queries(), c}, c, rng);
        const Tensor gamma = gating_vector(grid, enc.gate, true);
        Tensor base_pts({grid.queries(), 2});
        std::size_t q = 0;
        for (std::size_t row = 0; row < grid.h; ++row)
            for (std::size_t col = 0; col < grid.w; ++col, ++q)
            {
                base_pts[2 * q] = static_cast<double>(col) + 0.31;
                base_pts[2 * q + 1] = static_cast<double>(row) + 0.43;
            }
        run("distance-gating-temporal", params, [&, gamma, base_pts, seed](Tape& tape) {
            Var queries = initial_queries(tape, params);
            Var prev = queries_to_grid(tape.param(params, "prev"), grid);
            Var cur = queries_to_grid(queries, grid);
            Var out = gated_temporal_attend(tape, params, 0, queries, prev, cur, base_pts, gamma,
                                            enc);
            return fixed_readout(tape, out, seed + 7);
        }, 16);
    }

    // FFN with dropout active
    {
        ParamStore params;
        Rng rng(seed + 8);
        init_encoder_params(params, enc, n, rng);
        Tensor x = random_tensor({n, c}, rng);
        run("ffn", params, [&, x, seed](Tape& tape) {
            Rng drop(seed + 9);
            Var out = ffn_forward(tape, params, 0, tape.constant(x), enc, true, drop);
            return fixed_readout(tape, out, seed + 10);
        }, 16);
    }

    // decoder through the focal loss
    {
        BEVGrid grid;
        grid.h = grid.w = 4;
        ParamStore params;
        Rng rng(seed + 11);
        init_decoder_params(params, c, rng);
        params.create_uniform("queries", {grid.queries(), c}, c, rng);
        Tensor labels({8, 8});
        for (std::size_t i = 0; i < labels.size(); ++i)
            labels[i] = static_cast<double>(rng.uniform_index(kNumClasses));
        FocalConfig focal;
        run("decoder", params, [&, labels](Tape& tape) {
            Var logits =
                mask_head_decode(tape, params, tape.param(params, "queries"), grid, 8, 8);
            return focal_loss(logits, labels, focal);
        }, 12);
    }

    // full objective on the micro model with a rendered synthetic sample;
    // zero-initialized offset heads would pin the samplers exactly on cell
    // corners (a bilinear kink), so the check runs at a generic point with
    // the deformable heads perturbed
    {
        RunConfig cfg = micro_profile(seed);
        Model model = build_model(cfg);
        Rng wiggle(seed + 20);
        for (std::size_t b = 0; b < model.encoder.blocks; ++b)
            for (const char* head : {"tsa.off", "tsa.wt", "sca.off", "sca.wt"})
                for (const char* part : {".w", ".b"})
                {
                    Tensor& t = model.params.value("enc.b" + std::to_string(b) + "." + head + part);
                    for (std::size_t i = 0; i < t.size(); ++i)
                        t[i] += wiggle.uniform(-0.25, 0.25);
                }
        SynthParams sp;
        sp.frames = 2;
        const SyntheticScene scene(seed + 12, sp);
        const RigRenderer renderer(model.rig);
        const auto frames = render_scene_sequence(scene, renderer, model.grid);
        run("full-objective", model.params, [&model, &frames, seed](Tape& tape) {
            Rng noise(seed + 14);
            return forward_sequence(model, tape, frames, true, noise).total;
        }, 4);
    }

    if (corrupt_hook)
    {
        ParamStore params;
        Rng rng(seed + 15);
        params.create_uniform("x", {6, 6}, 6, rng);
        run("negative-control", params, [&params, seed](Tape& tape) {
            Var bad = corrupted_identity(tanh(tape.param(params, "x")));
            return fixed_readout(tape, bad, seed + 16);
        }, 12);
    }
    return results;
}

// ---- projection debug -------------------------------------------------------------

void export_projection_debug(const RunConfig& cfg, const fs::path& out_dir)
{
    fs::create_directories(out_dir);
    Model model = build_model(cfg);

    // ground grid world: road with sidewalk lines every meter
    StampedMap world;
    world.cells = 240;
    world.res = 0.25;
    world.extent = 30.0;
    world.map.assign(world.cells * world.cells, kRoad);
    for (std::size_t row = 0; row < world.cells; ++row)
        for (std::size_t col = 0; col < world.cells; ++col)
        {
            const double wx = (static_cast<double>(col) + 0.5) * world.res - world.extent;
            const double wy = (static_cast<double>(row) + 0.5) * world.res - world.extent;
            const double fx = wx - std::floor(wx);
            const double fy = wy - std::floor(wy);
            if (fx < world.res || fy < world.res)
                world.map[row * world.cells + col] = kSidewalk;
        }

    const RigRenderer renderer(model.rig);
    const ScenePose origin{};
    for (std::size_t c = 0; c < model.rig.cams.size(); ++c)
    {
        const std::string stem = "cam" + std::to_string(c);
        write_ppm(renderer.render(world, origin, c), out_dir / (stem + "_grid.ppm"));

        const Tensor heat = anisotropy_heatmap(model.rig.cams[c].intr);
        write_fbt(heat, out_dir / (stem + "_anisotropy.fbt"));
        double hi = 0.0;
        for (std::size_t i = 0; i < heat.size(); ++i)
            if (std::isfinite(heat[i]))
                hi = std::max(hi, heat[i]);
        write_pgm_scaled(heat, out_dir / (stem + "_anisotropy.pgm"), 0.0, hi > 0 ? hi : 1.0);

        Tensor vis({model.grid.h, model.grid.w});
        for (std::size_t q = 0; q < model.grid.queries(); ++q)
            vis[q] = model.refs.mask[q * model.refs.n_cam + c] ? 255.0 : 0.0;
        write_pgm(vis, out_dir / (stem + "_visibility.pgm"));
    }
}

}  // namespace fbev
