#pragma once

// Line-oriented key = value configuration with [section] headers. Parsing,
// serialization and validation round-trip exactly; doubles are printed with
// 17 significant digits so parse(serialize(c)) is a fixed point.

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "daft/maskgen.hpp"

namespace daft {

struct Config {
    // [model]
    int image_size = 32;
    int depth = 4;
    int d_w = 32;
    int d_z = 32;
    int base_channels = 16;
    int channel_cap = 128;
    int spatial_channels = 16;
    int disc_base_channels = 16;
    int disc_channel_cap = 128;
    // [loss]
    double lambda_rec = 0.2;
    double lambda_damsm = 0.01;
    double magp_k = 2.0;
    double magp_p = 6.0;
    // [optim]
    double lr_g = 1e-4;
    double lr_d = 4e-4;
    double adam_beta1 = 0.0;
    double adam_beta2 = 0.9;
    int batch_size = 8;
    int steps = 2000;
    // [mask]
    std::string mask_kind = "irregular";
    double mask_ratio_lo = 0.10;
    double mask_ratio_hi = 0.70;
    int brush_count = 3;
    double brush_width_lo = 0.03;
    double brush_width_hi = 0.10;
    int walk_steps = 10;
    // [data]
    int dataset_size = 512;
    int holdout_modulus = 10;
    bool dump_dataset = false;
    // [run]
    uint64_t master_seed = 1234;
    std::string out_dir = "out";
    int checkpoint_every = 1000;
    int eval_count = 32;

    MaskSpec mask_spec() const {
        MaskSpec s;
        s.kind = mask_kind == "center" ? MaskKind::Center : MaskKind::Irregular;
        s.ratio_lo = mask_ratio_lo;
        s.ratio_hi = mask_ratio_hi;
        s.brush_count = brush_count;
        s.brush_width_lo = brush_width_lo;
        s.brush_width_hi = brush_width_hi;
        s.walk_steps = walk_steps;
        return s;
    }

    void validate() const {
        int expected = 4 << (depth - 1);
        if (depth < 1 || depth > 8) throw ConfigError("model.depth must lie in [1,8]");
        if (image_size != expected)
            throw ConfigError("model.image_size=" + std::to_string(image_size) +
                              " violates S = 4*2^(L-1): depth " + std::to_string(depth) +
                              " requires " + std::to_string(expected));
        if (d_w < 1 || d_z < 1) throw ConfigError("model.d_w and model.d_z must be positive");
        if (base_channels < 1 || spatial_channels < 1)
            throw ConfigError("model channel widths must be positive");
        if (lambda_rec < 0 || lambda_damsm < 0 || magp_k < 0 || magp_p < 0)
            throw ConfigError("loss weights must be nonnegative");
        if (lr_g <= 0 || lr_d <= 0) throw ConfigError("optim learning rates must be positive");
        if (batch_size < 1) throw ConfigError("optim.batch_size must be at least 1");
        if (steps < 0) throw ConfigError("optim.steps must be nonnegative");
        if (mask_kind != "irregular" && mask_kind != "center")
            throw ConfigError("mask.kind must be 'irregular' or 'center', got '" + mask_kind + "'");
        if (mask_ratio_lo < 0 || mask_ratio_hi > 1 || mask_ratio_lo > mask_ratio_hi)
            throw ConfigError("mask.ratio bounds must satisfy 0 <= lo <= hi <= 1");
        if (dataset_size < 2) throw ConfigError("data.dataset_size must be at least 2");
        if (holdout_modulus < 2) throw ConfigError("data.holdout_modulus must be at least 2");
        if (checkpoint_every < 1) throw ConfigError("run.checkpoint_every must be at least 1");
        if (eval_count < 1) throw ConfigError("run.eval_count must be at least 1");
    }
};

namespace detail {

inline std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

}  // namespace detail

inline std::string serialize_config(const Config& c) {
    std::ostringstream os;
    auto d = detail::fmt_double;
    os << "[model]\n";
    os << "image_size = " << c.image_size << "\n";
    os << "depth = " << c.depth << "\n";
    os << "d_w = " << c.d_w << "\n";
    os << "d_z = " << c.d_z << "\n";
    os << "base_channels = " << c.base_channels << "\n";
    os << "channel_cap = " << c.channel_cap << "\n";
    os << "spatial_channels = " << c.spatial_channels << "\n";
    os << "disc_base_channels = " << c.disc_base_channels << "\n";
    os << "disc_channel_cap = " << c.disc_channel_cap << "\n";
    os << "[loss]\n";
    os << "lambda_rec = " << d(c.lambda_rec) << "\n";
    os << "lambda_damsm = " << d(c.lambda_damsm) << "\n";
    os << "magp_k = " << d(c.magp_k) << "\n";
    os << "magp_p = " << d(c.magp_p) << "\n";
    os << "[optim]\n";
    os << "lr_g = " << d(c.lr_g) << "\n";
    os << "lr_d = " << d(c.lr_d) << "\n";
    os << "adam_beta1 = " << d(c.adam_beta1) << "\n";
    os << "adam_beta2 = " << d(c.adam_beta2) << "\n";
    os << "batch_size = " << c.batch_size << "\n";
    os << "steps = " << c.steps << "\n";
    os << "[mask]\n";
    os << "kind = " << c.mask_kind << "\n";
    os << "ratio_lo = " << d(c.mask_ratio_lo) << "\n";
    os << "ratio_hi = " << d(c.mask_ratio_hi) << "\n";
    os << "brush_count = " << c.brush_count << "\n";
    os << "brush_width_lo = " << d(c.brush_width_lo) << "\n";
    os << "brush_width_hi = " << d(c.brush_width_hi) << "\n";
    os << "walk_steps = " << c.walk_steps << "\n";
    os << "[data]\n";
    os << "dataset_size = " << c.dataset_size << "\n";
    os << "holdout_modulus = " << c.holdout_modulus << "\n";
    os << "dump_dataset = " << (c.dump_dataset ? "true" : "false") << "\n";
    os << "[run]\n";
    os << "master_seed = " << c.master_seed << "\n";
    os << "out_dir = " << c.out_dir << "\n";
    os << "checkpoint_every = " << c.checkpoint_every << "\n";
    os << "eval_count = " << c.eval_count << "\n";
    return os.str();
}

inline Config parse_config(const std::string& text) {
    Config c;
    std::istringstream is(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (t.front() == '[' && t.back() == ']') {
            section = t.substr(1, t.size() - 2);
            continue;
        }
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value', got '" +
                              t + "'");
        std::string key = detail::trim(t.substr(0, eq));
        std::string val = detail::trim(t.substr(eq + 1));
        std::string full = section + "." + key;
        try {
            if (full == "model.image_size") c.image_size = std::stoi(val);
            else if (full == "model.depth") c.depth = std::stoi(val);
            else if (full == "model.d_w") c.d_w = std::stoi(val);
            else if (full == "model.d_z") c.d_z = std::stoi(val);
            else if (full == "model.base_channels") c.base_channels = std::stoi(val);
            else if (full == "model.channel_cap") c.channel_cap = std::stoi(val);
            else if (full == "model.spatial_channels") c.spatial_channels = std::stoi(val);
            else if (full == "model.disc_base_channels") c.disc_base_channels = std::stoi(val);
            else if (full == "model.disc_channel_cap") c.disc_channel_cap = std::stoi(val);
            else if (full == "loss.lambda_rec") c.lambda_rec = std::stod(val);
            else if (full == "loss.lambda_damsm") c.lambda_damsm = std::stod(val);
            else if (full == "loss.magp_k") c.magp_k = std::stod(val);
            else if (full == "loss.magp_p") c.magp_p = std::stod(val);
            else if (full == "optim.lr_g") c.lr_g = std::stod(val);
            else if (full == "optim.lr_d") c.lr_d = std::stod(val);
            else if (full == "optim.adam_beta1") c.adam_beta1 = std::stod(val);
            else if (full == "optim.adam_beta2") c.adam_beta2 = std::stod(val);
            else if (full == "optim.batch_size") c.batch_size = std::stoi(val);
            else if (full == "optim.steps") c.steps = std::stoi(val);
            else if (full == "mask.kind") c.mask_kind = val;
            else if (full == "mask.ratio_lo") c.mask_ratio_lo = std::stod(val);
            else if (full == "mask.ratio_hi") c.mask_ratio_hi = std::stod(val);
            else if (full == "mask.brush_count") c.brush_count = std::stoi(val);
            else if (full == "mask.brush_width_lo") c.brush_width_lo = std::stod(val);
            else if (full == "mask.brush_width_hi") c.brush_width_hi = std::stod(val);
            else if (full == "mask.walk_steps") c.walk_steps = std::stoi(val);
            else if (full == "data.dataset_size") c.dataset_size = std::stoi(val);
            else if (full == "data.holdout_modulus") c.holdout_modulus = std::stoi(val);
            else if (full == "data.dump_dataset") c.dump_dataset = (val == "true" || val == "1");
            else if (full == "run.master_seed") c.master_seed = std::stoull(val);
            else if (full == "run.out_dir") c.out_dir = val;
            else if (full == "run.checkpoint_every") c.checkpoint_every = std::stoi(val);
            else if (full == "run.eval_count") c.eval_count = std::stoi(val);
            else
                throw ConfigError("line " + std::to_string(lineno) + ": unknown field '" + full +
                                  "'");
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception&) {
            throw ConfigError("line " + std::to_string(lineno) + ": cannot parse value '" + val +
                              "' for field '" + full + "'");
        }
    }
    return c;
}

inline Config load_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_config(ss.str());
}

}  // namespace daft
