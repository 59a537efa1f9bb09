// Command-line surface: train, infer, eval, grad-check and mask-demo.
// Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

#include <CLI11.hpp>

#include "daft/daft.hpp"

namespace {

std::string env_out_dir_default(const std::string& configured) {
    if (configured != "out") return configured;
    const char* env = std::getenv("DAFT_OUT_DIR");
    return env && *env ? env : configured;
}

int cmd_train(const std::string& config_path, const std::string& resume) {
    daft::Config cfg;
    if (!resume.empty()) {
        cfg = daft::read_checkpoint_config(resume);
    } else {
        cfg = daft::load_config_file(config_path);
    }
    cfg.out_dir = env_out_dir_default(cfg.out_dir);
    cfg.validate();
    daft::TrainSummary s = daft::train(cfg, resume);
    std::cout << "trained " << s.steps_run << " step(s); final checkpoint: " << s.final_checkpoint
              << "\n";
    return 0;
}

int cmd_infer(const std::string& ckpt, const std::string& image_path, const std::string& mask_path,
              const std::string& caption, uint64_t seed, const std::string& out_path) {
    daft::Config cfg = daft::read_checkpoint_config(ckpt);
    daft::ParamStore store;
    daft::Models models = daft::build_models(store, cfg);
    daft::load_checkpoint(ckpt, store);
    daft::Image input = daft::read_ppm_file(image_path);
    daft::MaskGrid mask = daft::read_pgm_file(mask_path);
    daft::Image triptych = daft::infer_triptych(cfg, store, models, input, mask, caption, seed);
    daft::write_ppm(triptych, out_path);
    std::cout << "wrote " << out_path << " (corrupted | generated | original)\n";
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& split, const std::string& mask_kind,
             double lo, double hi, int count, const std::string& csv_path) {
    daft::Config cfg = daft::read_checkpoint_config(ckpt);
    daft::ParamStore store;
    daft::Models models = daft::build_models(store, cfg);
    daft::load_checkpoint(ckpt, store);
    daft::MaskSpec spec = cfg.mask_spec();
    if (!mask_kind.empty()) {
        spec.kind = mask_kind == "center" ? daft::MaskKind::Center : daft::MaskKind::Irregular;
        spec.ratio_lo = lo;
        spec.ratio_hi = hi;
    }
    bool heldout = split != "train";
    daft::EvalResult r = daft::evaluate(cfg, store, models, spec, heldout, count);
    std::ostringstream table;
    table << "row,psnr,ssim,count\n";
    table << "model," << daft::detail::fmt_double(r.model_psnr) << ","
          << daft::detail::fmt_double(r.model_ssim) << "," << r.count << "\n";
    table << "baseline," << daft::detail::fmt_double(r.baseline_psnr) << ","
          << daft::detail::fmt_double(r.baseline_ssim) << "," << r.count << "\n";
    std::cout << table.str();
    std::ofstream csv(csv_path);
    if (!csv) throw daft::ContractError("cannot open '" + csv_path + "' for writing");
    csv << table.str();
    return 0;
}

int cmd_grad_check(const std::string& scope, int seeds) {
    daft::GradSuiteReport rep = daft::run_grad_suite(scope, seeds, &std::cout);
    if (!rep.all_pass) {
        std::cout << "grad-check: FAILURES above tolerance\n";
        return 1;
    }
    std::cout << "grad-check: all " << rep.outcomes.size() << " targets passed\n";
    return 0;
}

int cmd_mask_demo(const std::string& kind, double ratio, double lo, double hi, int size,
                  uint64_t seed, const std::string& out_path, int sweep) {
    daft::MaskSpec spec;
    spec.kind = kind == "center" ? daft::MaskKind::Center : daft::MaskKind::Irregular;
    if (kind == "center") {
        spec.ratio_lo = spec.ratio_hi = ratio;
    } else {
        spec.ratio_lo = lo;
        spec.ratio_hi = hi;
    }
    daft::Rng rng(seed);
    daft::MaskGrid m = daft::gen_mask(spec, size, rng);
    daft::write_pgm(m, out_path);
    std::cout << "mask " << size << "x" << size << " invalid_fraction "
              << daft::detail::fmt_double(m.invalid_fraction());
    if (kind == "center") {
        int side = int(std::lround(size * std::sqrt(ratio)));
        side = std::max(1, std::min(size, side));
        std::cout << " center_square " << side << "x" << side;
    }
    std::cout << "\n";
    if (sweep > 0) {
        double fmin = 1.0, fmax = 0.0;
        for (int i = 0; i < sweep; ++i) {
            daft::Rng r2(seed + uint64_t(i) + 1);
            daft::MaskGrid mm = daft::gen_mask(spec, size, r2);
            double f = mm.invalid_fraction();
            fmin = std::min(fmin, f);
            fmax = std::max(fmax, f);
        }
        std::cout << "sweep " << sweep << " fraction_min " << daft::detail::fmt_double(fmin)
                  << " fraction_max " << daft::detail::fmt_double(fmax) << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DAFT text-guided inpainting"};
    app.require_subcommand(1);

    auto* train = app.add_subcommand("train", "train from a config file");
    std::string config_path, resume;
    train->add_option("--config", config_path, "config file (key = value with [sections])");
    train->add_option("--resume", resume, "checkpoint to resume from (overrides --config)");

    auto* infer = app.add_subcommand("infer", "inpaint one image; writes a PPM triptych");
    std::string ckpt, image_path, mask_path, caption, out_path = "triptych.ppm";
    uint64_t seed = 1;
    infer->add_option("--checkpoint", ckpt, "trained checkpoint")->required();
    infer->add_option("--image", image_path, "input image (PPM, P6)")->required();
    infer->add_option("--mask", mask_path, "mask (PGM, P5; 0 valid, 255 invalid)")->required();
    infer->add_option("--caption", caption, "text guidance")->required();
    infer->add_option("--seed", seed, "noise seed");
    infer->add_option("--out", out_path, "output triptych path");

    auto* eval = app.add_subcommand("eval", "PSNR/SSIM over a dataset split");
    std::string eval_ckpt, split = "held", eval_kind;
    double eval_lo = 0.10, eval_hi = 0.70;
    int eval_count = 32;
    std::string eval_csv = "eval.csv";
    eval->add_option("--checkpoint", eval_ckpt, "trained checkpoint")->required();
    eval->add_option("--split", split, "held or train")
        ->check(CLI::IsMember({"held", "train"}));
    eval->add_option("--mask-kind", eval_kind, "override mask kind (irregular or center)")
        ->check(CLI::IsMember({"irregular", "center"}));
    eval->add_option("--ratio-lo", eval_lo, "mask ratio lower bound");
    eval->add_option("--ratio-hi", eval_hi, "mask ratio upper bound");
    eval->add_option("--count", eval_count, "number of scenes");
    eval->add_option("--csv", eval_csv, "CSV output path");

    auto* gc = app.add_subcommand("grad-check", "finite-difference gradient suites");
    std::string scope = "all";
    int gc_seeds = 50;
    gc->add_option("--scope", scope, "tensor-core, composites, magp or all");
    gc->add_option("--seeds", gc_seeds, "random seeds per target");

    auto* md = app.add_subcommand("mask-demo", "generate a mask and print statistics");
    std::string md_kind = "irregular", md_out = "mask.pgm";
    double md_ratio = 0.25, md_lo = 0.10, md_hi = 0.70;
    int md_size = 32, md_sweep = 0;
    uint64_t md_seed = 1;
    md->add_option("--kind", md_kind, "irregular or center")
        ->check(CLI::IsMember({"irregular", "center"}));
    md->add_option("--ratio", md_ratio, "center mask area ratio");
    md->add_option("--lo", md_lo, "irregular ratio lower bound");
    md->add_option("--hi", md_hi, "irregular ratio upper bound");
    md->add_option("--size", md_size, "grid size");
    md->add_option("--seed", md_seed, "rng seed");
    md->add_option("--out", md_out, "output PGM path");
    md->add_option("--sweep", md_sweep, "also sweep N seeds and print min/max fraction");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;  // usage errors exit 2
    }

    try {
        if (train->parsed()) {
            if (config_path.empty() && resume.empty())
                throw daft::ConfigError("train needs --config or --resume");
            return cmd_train(config_path, resume);
        }
        if (infer->parsed())
            return cmd_infer(ckpt, image_path, mask_path, caption, seed, out_path);
        if (eval->parsed())
            return cmd_eval(eval_ckpt, split, eval_kind, eval_lo, eval_hi, eval_count, eval_csv);
        if (gc->parsed()) return cmd_grad_check(scope, gc_seeds);
        if (md->parsed())
            return cmd_mask_demo(md_kind, md_ratio, md_lo, md_hi, md_size, md_seed, md_out,
                                 md_sweep);
    } catch (const daft::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
