// Copyright (c) 2026 fbev contributors.
// SPDX-License-Identifier: Apache-2.0

#include "fbev/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace fbev {

namespace {

std::string fmt_double(double v)
{
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double parse_double(const std::string& key, const std::string& s)
{
    try
    {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size())
            throw std::invalid_argument(s);
        return v;
    }
    catch (const std::exception&)
    {
        throw std::invalid_argument("config: bad numeric value '" + s + "' for " + key);
    }
}

std::uint64_t parse_u64(const std::string& key, const std::string& s)
{
    std::uint64_t v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw std::invalid_argument("config: bad integer value '" + s + "' for " + key);
    return v;
}

struct Entry {
    const char* key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

#define NUM_FIELD(key, field)                                                       \
    Entry{key, [](const RunConfig& c) { return fmt_double(c.field); },              \
          [](RunConfig& c, const std::string& v) { c.field = parse_double(key, v); }}
#define INT_FIELD(key, field)                                                       \
    Entry{key, [](const RunConfig& c) { return std::to_string(c.field); },          \
          [](RunConfig& c, const std::string& v) {                                  \
              c.field = static_cast<std::size_t>(parse_u64(key, v));                \
          }}
#define STR_FIELD(key, field)                                                       \
    Entry{key, [](const RunConfig& c) { return c.field; },                          \
          [](RunConfig& c, const std::string& v) { c.field = v; }}

const std::vector<Entry>& registry()
{
    static const std::vector<Entry> entries = {
        STR_FIELD("run.profile", profile),
        Entry{"run.seed", [](const RunConfig& c) { return std::to_string(c.seed); },
              [](RunConfig& c, const std::string& v) { c.seed = parse_u64("run.seed", v); }},
        INT_FIELD("grid.h", grid_h),
        INT_FIELD("grid.w", grid_w),
        NUM_FIELD("grid.cell_m", grid_cell_m),
        Entry{"grid.z_anchors",
              [](const RunConfig& c) {
                  std::string out;
                  for (std::size_t i = 0; i < c.grid_z_anchors.size(); ++i)
                      out += (i ? "," : "") + fmt_double(c.grid_z_anchors[i]);
                  return out;
              },
              [](RunConfig& c, const std::string& v) {
                  std::vector<double> anchors;
                  std::stringstream ss(v);
                  std::string item;
                  while (std::getline(ss, item, ','))
                      anchors.push_back(parse_double("grid.z_anchors", item));
                  if (anchors.empty())
                      throw std::invalid_argument("config: grid.z_anchors needs >= 1 anchor");
                  c.grid_z_anchors = std::move(anchors);
              }},
        INT_FIELD("image.h", img_h),
        INT_FIELD("image.w", img_w),
        STR_FIELD("image.rig_file", rig_file),
        INT_FIELD("backbone.patch", patch),
        INT_FIELD("backbone.dim", backbone_dim),
        INT_FIELD("backbone.layers", backbone_layers),
        INT_FIELD("encoder.blocks", enc_blocks),
        INT_FIELD("encoder.dim", enc_dim),
        INT_FIELD("encoder.k_points", k_points),
        INT_FIELD("encoder.mc_train", mc_train),
        INT_FIELD("encoder.mc_eval", mc_eval),
        NUM_FIELD("encoder.xi", xi),
        NUM_FIELD("encoder.log_var_prior", log_var_prior),
        NUM_FIELD("encoder.lambda_kl", lambda_kl),
        NUM_FIELD("encoder.kappa", kappa),
        NUM_FIELD("encoder.delta", delta),
        NUM_FIELD("encoder.dropout", enc_dropout),
        STR_FIELD("encoder.uncertainty_fusion", uncertainty_fusion),
        STR_FIELD("encoder.distance_gating", distance_gating),
        INT_FIELD("decoder.upscale", decoder_upscale),
        NUM_FIELD("focal.alpha", focal_alpha),
        NUM_FIELD("focal.gamma", focal_gamma),
        NUM_FIELD("optim.lr", lr),
        NUM_FIELD("optim.beta1", beta1),
        NUM_FIELD("optim.beta2", beta2),
        NUM_FIELD("optim.eps", adam_eps),
        NUM_FIELD("optim.weight_decay", weight_decay),
        NUM_FIELD("optim.epoch_decay", epoch_decay),
        INT_FIELD("train.steps", steps),
        INT_FIELD("train.epochs", epochs),
        INT_FIELD("train.batch", batch),
        INT_FIELD("train.seq_len", seq_len),
        INT_FIELD("synth.scenes", synth_scenes),
        INT_FIELD("synth.frames", synth_frames),
        INT_FIELD("synth.scene_cells", scene_cells),
        NUM_FIELD("synth.scene_res_m", scene_res_m),
    };
    return entries;
}

#undef NUM_FIELD
#undef INT_FIELD
#undef STR_FIELD

std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

}  // namespace

void RunConfig::validate() const
{
    if (profile != "desk" && profile != "full")
        throw std::invalid_argument("config: run.profile must be desk or full");
    if (uncertainty_fusion != "on" && uncertainty_fusion != "uniform")
        throw std::invalid_argument("config: encoder.uncertainty_fusion must be on or uniform");
    if (distance_gating != "on" && distance_gating != "off")
        throw std::invalid_argument("config: encoder.distance_gating must be on or off");
    if (grid_h == 0 || grid_w == 0 || !(grid_cell_m > 0.0))
        throw std::invalid_argument("config: bad grid");
    if (steps == 0 && epochs == 0)
        throw std::invalid_argument("config: one of train.steps or train.epochs must be set");
    if (batch == 0 || seq_len == 0)
        throw std::invalid_argument("config: train.batch and train.seq_len must be >= 1");
    if (patch == 0 || img_h % patch != 0 || img_w % patch != 0)
        throw std::invalid_argument("config: image extents must be divisible by backbone.patch");
    if (decoder_upscale == 0)
        throw std::invalid_argument("config: decoder.upscale must be >= 1");
}

RunConfig desk_profile() { return RunConfig{}; }

RunConfig full_profile()
{
    RunConfig c;
    c.profile = "full";
    c.grid_h = c.grid_w = 50;
    c.grid_cell_m = 1.0;
    c.img_h = 540;
    c.img_w = 640;
    c.patch = 20;
    c.backbone_dim = 256;
    c.backbone_layers = 8;
    c.enc_dim = 256;
    c.decoder_upscale = 4;
    c.steps = 0;
    c.epochs = 50;
    c.batch = 2;
    c.synth_scenes = 100;
    c.scene_cells = 320;
    c.scene_res_m = 0.2;
    return c;
}

RunConfig profile_by_name(const std::string& name)
{
    if (name == "desk")
        return desk_profile();
    if (name == "full")
        return full_profile();
    throw std::invalid_argument("unknown profile '" + name + "' (expected desk or full)");
}

void apply_config_kv(RunConfig& cfg, const std::string& key, const std::string& value)
{
    for (const Entry& e : registry())
        if (key == e.key)
        {
            e.set(cfg, value);
            return;
        }
    throw std::invalid_argument("config: unknown key '" + key + "'");
}

RunConfig parse_config(std::istream& is, RunConfig base)
{
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line))
    {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos)
            line.resize(hash);
        if (trim(line).empty())
            continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": expected key = value");
        apply_config_kv(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    base.validate();
    return base;
}

RunConfig parse_config_file(const std::filesystem::path& path, RunConfig base)
{
    std::ifstream is(path);
    if (!is)
        throw std::runtime_error("cannot open config file '" + path.string() + "'");
    return parse_config(is, std::move(base));
}

std::string serialize_config(const RunConfig& cfg)
{
    std::string out;
    std::string section;
    for (const Entry& e : registry())
    {
        const std::string key = e.key;
        const std::string sec = key.substr(0, key.find('.'));
        if (sec != section)
        {
            if (!section.empty())
                out += '\n';
            section = sec;
        }
        out += key + " = " + e.get(cfg) + '\n';
    }
    return out;
}

}  // namespace fbev
