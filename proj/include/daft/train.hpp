#pragma once

// Adversarial training loop: one discriminator step on detached generated
// images, then one generator step, per batch. Single-threaded and fully
// deterministic under the master seed; all randomness flows through one
// sequentially consumed RNG whose state is checkpointed.

#include <filesystem>
#include <iostream>

#include "daft/adversary.hpp"
#include "daft/checkpoint.hpp"
#include "daft/image_io.hpp"
#include "daft/metrics.hpp"
#include "daft/scene.hpp"

namespace daft {

struct Models {
    Vocabulary vocab;
    TextEncoderParams text;
    GeneratorParams gen;
    DiscriminatorParams disc;
    FeatureExtractorParams fe;
};

inline Models build_models(ParamStore& store, const Config& cfg) {
    cfg.validate();
    Models m;
    Rng init_rng(cfg.master_seed ^ 0xDAF7AB1Eu);
    m.text = TextEncoderParams::build(store, m.vocab, cfg.d_w, init_rng);
    m.gen = GeneratorParams::build(store, cfg.depth, cfg.image_size, cfg.base_channels,
                                   cfg.channel_cap, cfg.d_w, cfg.d_z, cfg.spatial_channels,
                                   init_rng);
    m.disc = DiscriminatorParams::build(store, cfg.image_size, cfg.d_w, cfg.disc_base_channels,
                                        cfg.disc_channel_cap, init_rng);
    // the perceptual stand-in uses a fixed seed so the metric is one and the
    // same function across every run and checkpoint
    Rng fe_rng(0x5EEDFEA7u);
    m.fe = FeatureExtractorParams::build(store, fe_rng);
    return m;
}

inline std::vector<int> ids_with_prefixes(const ParamStore& store,
                                          const std::vector<std::string>& prefixes) {
    std::vector<int> ids;
    for (int i = 0; i < store.count(); ++i) {
        const Param& p = store.at(i);
        if (!p.trainable) continue;
        for (const std::string& pre : prefixes)
            if (p.name.rfind(pre, 0) == 0) {
                ids.push_back(i);
                break;
            }
    }
    return ids;
}

inline std::vector<double> apply_mask(const std::vector<double>& image, const MaskGrid& m) {
    std::vector<double> out(image.size(), 0.0);
    int64_t hw = int64_t(m.h) * m.w;
    for (int c = 0; c < 3; ++c)
        for (int64_t i = 0; i < hw; ++i)
            if (!m.cells[size_t(i)]) out[size_t(c) * hw + i] = image[size_t(c) * hw + i];
    return out;
}

struct TrainItem {
    ShapeScene scene;
    MaskGrid mask;
    std::vector<int32_t> tokens;
    std::vector<double> z;
    std::vector<double> masked;
};

namespace detail {

inline void check_finite(const LossReport& r, int64_t step) {
    for (const auto& [name, v] : r.entries)
        if (!std::isfinite(v))
            throw ContractError("loss component '" + name + "' is not finite at step " +
                                std::to_string(step));
}

inline std::vector<double> run_generator_values(ParamStore& store, const Models& m,
                                                const TrainItem& item, int S,
                                                std::vector<double>* sentence_out) {
    Tape tape;
    Binder bind(tape, store, /*with_grad=*/false);
    TextBundle tb = encode_text(bind, m.text, item.tokens);
    Tensor img = tape.constant(Shape{3, S, S}, item.masked);
    Tensor z = tape.constant(Shape{int(item.z.size())}, item.z);
    GeneratorOutput out = generate(bind, m.gen, img, item.mask, z, tb);
    if (sentence_out) *sentence_out = tb.sentence.value();
    return out.composited.value();
}

}  // namespace detail

// one discriminator update on a batch; generated images are produced on
// throwaway tapes and enter this tape as constants
inline LossReport train_d_step(ParamStore& store, const Models& m, const Config& cfg,
                               const std::vector<TrainItem>& items, Adam& adam_d,
                               const std::vector<int>& d_ids, int64_t step) {
    int S = cfg.image_size;
    size_t n = items.size();
    std::vector<std::vector<double>> xhat_vals(n), s_vals(n);
    for (size_t i = 0; i < n; ++i)
        xhat_vals[i] = detail::run_generator_values(store, m, items[i], S, &s_vals[i]);

    Tape tape;
    Binder bind(tape, store, /*with_grad=*/true);
    std::vector<Tensor> xs, xh, ss, sh;
    for (size_t i = 0; i < n; ++i) {
        xs.push_back(tape.constant(Shape{3, S, S}, items[i].scene.image));
        xh.push_back(tape.constant(Shape{3, S, S}, xhat_vals[i]));
        ss.push_back(tape.constant(Shape{cfg.d_w}, s_vals[i]));
        // mismatched sentences by rolling the batch one position
        sh.push_back(tape.constant(Shape{cfg.d_w}, s_vals[(i + 1) % n]));
    }
    DiscriminatorFn D = [&](const Tensor& x, const Tensor& s) {
        return discriminate(bind, m.disc, x, s);
    };
    DLossResult res = d_loss(tape, D, xs, xh, ss, sh, cfg.magp_k, cfg.magp_p);
    LossReport report = res.report();
    detail::check_finite(report, step);
    tape.backward(res.total);
    bind.harvest();
    adam_d.step(store, d_ids);
    store.zero_grad();
    return report;
}

// one generator update; also reports batch PSNR/SSIM of the composited output
inline LossReport train_g_step(ParamStore& store, const Models& m, const Config& cfg,
                               const std::vector<TrainItem>& items, Adam& adam_g,
                               const std::vector<int>& g_ids, int64_t step) {
    int S = cfg.image_size;
    size_t n = items.size();
    Tape tape;
    Binder bind(tape, store, /*with_grad=*/true);
    Binder bind_frozen(tape, store, /*with_grad=*/false);  // discriminator stays fixed here

    std::vector<Tensor> xhats, ss;
    Tensor rec, attn;
    double psnr_sum = 0.0, ssim_sum = 0.0;
    for (size_t i = 0; i < n; ++i) {
        TextBundle tb = encode_text(bind, m.text, items[i].tokens);
        Tensor img = tape.constant(Shape{3, S, S}, items[i].masked);
        Tensor z = tape.constant(Shape{cfg.d_z}, items[i].z);
        GeneratorOutput out = generate(bind, m.gen, img, items[i].mask, z, tb);
        Tensor real = tape.constant(Shape{3, S, S}, items[i].scene.image);
        Tensor rec_i = recon_loss(bind, m.fe, out.composited, real);
        Tensor attn_i = attn_loss(store, m.gen, tb.words, out.composited, real);
        rec = i == 0 ? rec_i : add(rec, rec_i);
        attn = i == 0 ? attn_i : add(attn, attn_i);
        xhats.push_back(out.composited);
        ss.push_back(tb.sentence);
        psnr_sum += psnr_capped(out.composited.value(), items[i].scene.image);
        ssim_sum += ssim(out.composited.value(), items[i].scene.image, S);
    }
    rec = scalar_mul(rec, 1.0 / double(n));
    attn = scalar_mul(attn, 1.0 / double(n));
    DiscriminatorFn D = [&](const Tensor& x, const Tensor& s) {
        return discriminate(bind_frozen, m.disc, x, s);
    };
    Tensor adv = g_adv_loss(D, xhats, ss);
    GLossResult res = g_total_loss(rec, adv, attn, damsm_loss_stub(tape), LossWeights{
        cfg.lambda_rec, cfg.lambda_damsm, cfg.magp_k, cfg.magp_p});
    LossReport report = res.report();
    report.add("psnr", psnr_sum / double(n));
    report.add("ssim", ssim_sum / double(n));
    detail::check_finite(report, step);
    tape.backward(res.total);
    bind.harvest();
    adam_g.step(store, g_ids);
    store.zero_grad();
    return report;
}

inline std::vector<uint64_t> split_seeds(const Config& cfg, bool heldout) {
    std::vector<uint64_t> seeds;
    for (int s = 0; s < cfg.dataset_size; ++s) {
        bool held = (s % cfg.holdout_modulus) == 0;
        if (held == heldout) seeds.push_back(uint64_t(s));
    }
    return seeds;
}

inline TrainItem make_item(const Config& cfg, const Vocabulary& vocab, uint64_t scene_seed,
                           Rng& rng) {
    TrainItem item;
    item.scene = render_scene(scene_seed, cfg.image_size);
    item.mask = gen_mask(cfg.mask_spec(), cfg.image_size, rng);
    item.tokens = tokenize(vocab, item.scene.caption);
    item.z.resize(size_t(cfg.d_z));
    for (double& v : item.z) v = rng.normal();
    item.masked = apply_mask(item.scene.image, item.mask);
    return item;
}

inline std::string metrics_csv_header() {
    return "step,d_real_hinge,d_fake_hinge,d_mismatch_hinge,d_magp,d_total,"
           "g_adv,g_rec,g_attn,g_damsm,g_total,psnr,ssim";
}

inline std::string metrics_csv_row(int64_t step, const LossReport& d, const LossReport& g) {
    std::ostringstream os;
    os << step;
    const char* dcols[] = {"d_real_hinge", "d_fake_hinge", "d_mismatch_hinge", "d_magp", "d_total"};
    const char* gcols[] = {"g_adv", "g_rec", "g_attn", "g_damsm", "g_total", "psnr", "ssim"};
    for (const char* c : dcols) os << "," << detail::fmt_double(d.get(c));
    for (const char* c : gcols) os << "," << detail::fmt_double(g.get(c));
    return os.str();
}

inline void dump_dataset_cache(const Config& cfg, const std::string& dir) {
    std::filesystem::create_directories(dir);
    for (int s = 0; s < cfg.dataset_size; ++s) {
        ShapeScene scene = render_scene(uint64_t(s), cfg.image_size);
        Image img;
        img.h = img.w = cfg.image_size;
        img.data = scene.image;
        std::string base = dir + "/scene_" + std::to_string(s);
        write_ppm(img, base + ".ppm");
        std::ofstream cap(base + ".txt");
        cap << scene.caption << "\n";
    }
}

struct TrainSummary {
    std::string final_checkpoint;
    int64_t steps_run = 0;
};

inline TrainSummary train(Config cfg, const std::string& resume_path = "") {
    if (!resume_path.empty()) cfg = read_checkpoint_config(resume_path);
    cfg.validate();
    std::filesystem::create_directories(cfg.out_dir);

    ParamStore store;
    Models models = build_models(store, cfg);
    Adam adam_g(AdamConfig{cfg.lr_g, cfg.adam_beta1, cfg.adam_beta2, 1e-8});
    Adam adam_d(AdamConfig{cfg.lr_d, cfg.adam_beta1, cfg.adam_beta2, 1e-8});
    Rng rng(cfg.master_seed ^ 0x7EA1B0D5u);
    int64_t start_step = 0;
    if (!resume_path.empty()) {
        CheckpointMeta meta = load_checkpoint(resume_path, store);
        adam_g.set_t(meta.adam_g_t);
        adam_d.set_t(meta.adam_d_t);
        rng.set_state(meta.rng_state);
        start_step = meta.step;
    }

    std::vector<int> g_ids = ids_with_prefixes(store, {"gen.", "text."});
    std::vector<int> d_ids = ids_with_prefixes(store, {"disc."});
    std::vector<uint64_t> train_seeds = split_seeds(cfg, false);
    if (train_seeds.empty()) throw ConfigError("training split is empty");

    std::string csv_path = cfg.out_dir + "/metrics.csv";
    bool append = !resume_path.empty() && std::filesystem::exists(csv_path) && start_step > 0;
    std::ofstream csv(csv_path, append ? std::ios::app : std::ios::trunc);
    if (!csv) throw ContractError("cannot open '" + csv_path + "' for writing");
    if (!append) csv << metrics_csv_header() << "\n";

    if (cfg.dump_dataset) dump_dataset_cache(cfg, cfg.out_dir + "/dataset");

    for (int64_t step = start_step + 1; step <= cfg.steps; ++step) {
        std::vector<TrainItem> items;
        for (int b = 0; b < cfg.batch_size; ++b) {
            uint64_t seed = train_seeds[size_t(rng.below(train_seeds.size()))];
            items.push_back(make_item(cfg, models.vocab, seed, rng));
        }
        LossReport d_report = train_d_step(store, models, cfg, items, adam_d, d_ids, step);
        LossReport g_report = train_g_step(store, models, cfg, items, adam_g, g_ids, step);
        csv << metrics_csv_row(step, d_report, g_report) << "\n";
        if (step % 100 == 0) {
            std::cout << "step " << step << "  d_total " << d_report.get("d_total") << "  g_total "
                      << g_report.get("g_total") << "  psnr " << g_report.get("psnr") << "\n";
            std::cout.flush();
        }
        if (step % cfg.checkpoint_every == 0 && step != cfg.steps) {
            save_checkpoint(cfg.out_dir + "/checkpoint_" + std::to_string(step) + ".bin", cfg,
                            models.vocab, store, adam_g.t(), adam_d.t(), rng.state(), step);
        }
    }
    csv.flush();

    TrainSummary summary;
    summary.steps_run = std::max<int64_t>(0, cfg.steps - start_step);
    summary.final_checkpoint = cfg.out_dir + "/checkpoint_final.bin";
    save_checkpoint(summary.final_checkpoint, cfg, models.vocab, store, adam_g.t(), adam_d.t(),
                    rng.state(), std::max(start_step, int64_t(cfg.steps)));
    return summary;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
    double model_psnr = 0, model_ssim = 0;
    double baseline_psnr = 0, baseline_ssim = 0;
    int count = 0;
};

// Mean PSNR/SSIM of the composited output and of the masked input itself over
// a split; deterministic for a given (config, spec, salt).
inline EvalResult evaluate(const Config& cfg, ParamStore& store, const Models& models,
                           const MaskSpec& spec, bool heldout, int count, uint64_t salt = 0xE7A1) {
    std::vector<uint64_t> seeds = split_seeds(cfg, heldout);
    if (seeds.empty()) throw ConfigError("evaluation split is empty");
    EvalResult r;
    r.count = count;
    int S = cfg.image_size;
    for (int i = 0; i < count; ++i) {
        uint64_t scene_seed = seeds[size_t(i) % seeds.size()];
        Rng rng(cfg.master_seed ^ salt ^ (0x9e3779b97f4a7c15ull * (uint64_t(i) + 1)));
        TrainItem item;
        item.scene = render_scene(scene_seed, S);
        item.mask = gen_mask(spec, S, rng);
        item.tokens = tokenize(models.vocab, item.scene.caption);
        item.z.resize(size_t(cfg.d_z));
        for (double& v : item.z) v = rng.normal();
        item.masked = apply_mask(item.scene.image, item.mask);
        std::vector<double> xhat = detail::run_generator_values(store, models, item, S, nullptr);
        r.model_psnr += psnr_capped(xhat, item.scene.image);
        r.model_ssim += ssim(xhat, item.scene.image, S);
        r.baseline_psnr += psnr_capped(item.masked, item.scene.image);
        r.baseline_ssim += ssim(item.masked, item.scene.image, S);
    }
    r.model_psnr /= count;
    r.model_ssim /= count;
    r.baseline_psnr /= count;
    r.baseline_ssim /= count;
    return r;
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

// corrupted | composited | original, side by side
inline Image infer_triptych(const Config& cfg, ParamStore& store, const Models& models,
                            const Image& input, const MaskGrid& mask, const std::string& caption,
                            uint64_t seed) {
    int S = cfg.image_size;
    if (input.h != S || input.w != S)
        throw ContractError("input image is " + std::to_string(input.w) + "x" +
                            std::to_string(input.h) + " but the checkpoint expects " +
                            std::to_string(S) + "x" + std::to_string(S));
    if (mask.h != S || mask.w != S)
        throw ContractError("mask is " + std::to_string(mask.w) + "x" + std::to_string(mask.h) +
                            " but the checkpoint expects " + std::to_string(S) + "x" +
                            std::to_string(S));
    TrainItem item;
    item.scene.size = S;
    item.scene.image = input.data;
    item.mask = mask;
    item.tokens = tokenize(models.vocab, caption);
    Rng rng(seed);
    item.z.resize(size_t(cfg.d_z));
    for (double& v : item.z) v = rng.normal();
    item.masked = apply_mask(input.data, mask);
    std::vector<double> xhat = detail::run_generator_values(store, models, item, S, nullptr);

    Image out;
    out.h = S;
    out.w = 3 * S;
    out.data.assign(size_t(3) * S * 3 * S, 0.0);
    auto blit = [&](const std::vector<double>& src, int panel) {
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < S; ++y)
                for (int x = 0; x < S; ++x)
                    out.data[(size_t(c) * S + y) * (3 * S) + panel * S + x] =
                        src[(size_t(c) * S + y) * S + x];
    };
    blit(item.masked, 0);
    blit(xhat, 1);
    blit(input.data, 2);
    return out;
}

// ---------------------------------------------------------------------------
// Mask-bias experiment
// ---------------------------------------------------------------------------

struct MaskBiasReport {
    double center_on_center = 0, center_on_irregular = 0;
    double diverse_on_center = 0, diverse_on_irregular = 0;
};

inline MaskSpec center_eval_spec() {
    MaskSpec s;
    s.kind = MaskKind::Center;
    s.ratio_lo = s.ratio_hi = 0.25;
    return s;
}

inline MaskSpec irregular_eval_spec() {
    MaskSpec s;
    s.kind = MaskKind::Irregular;
    s.ratio_lo = 0.10;
    s.ratio_hi = 0.70;
    return s;
}

// 2x2 held-out PSNR grid: {center-trained, diverse-trained} x {center masks,
// irregular masks}
inline MaskBiasReport mask_bias_experiment(const std::string& center_ckpt,
                                           const std::string& diverse_ckpt, int count) {
    MaskBiasReport rep;
    auto eval_ckpt = [&](const std::string& path, const MaskSpec& spec) {
        Config cfg = read_checkpoint_config(path);
        ParamStore store;
        Models models = build_models(store, cfg);
        load_checkpoint(path, store);
        return evaluate(cfg, store, models, spec, /*heldout=*/true, count).model_psnr;
    };
    rep.center_on_center = eval_ckpt(center_ckpt, center_eval_spec());
    rep.center_on_irregular = eval_ckpt(center_ckpt, irregular_eval_spec());
    rep.diverse_on_center = eval_ckpt(diverse_ckpt, center_eval_spec());
    rep.diverse_on_irregular = eval_ckpt(diverse_ckpt, irregular_eval_spec());
    return rep;
}

}  // namespace daft
