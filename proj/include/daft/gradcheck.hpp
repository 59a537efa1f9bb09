#pragma once

// Central finite-difference verification of analytic gradients, for every
// primitive op and for the model composites. The FD side only ever calls
// forward evaluation, so it is independent of the backward implementation.
//
// Piecewise-linear ops (relu, leaky_relu, abs, max-pool windows, hinges) make
// central differences invalid when a preactivation sits within the FD step of
// its kink. Each trial therefore measures the margin to the nearest kink and
// redraws the seed when the margin is too small; the checked gradient is
// always taken at a point where the loss is locally smooth.

#include <iomanip>

#include "daft/train.hpp"

namespace daft {

using GradGroups = std::vector<std::vector<double>>;

struct FdCase {
    std::string name;
    std::vector<Shape> groups;  // differentiable inputs, flattened per group
    // returns the scalar loss; fills analytic grads per group when grads
    // != nullptr; fills the kink margin when margin != nullptr
    std::function<double(const GradGroups&, GradGroups*, double*)> eval;
    // optional per-seed state reset (masks, projections, tokens)
    std::function<void(Rng&)> reseed = [](Rng&) {};
    double tol = 1e-4;
    int probes_per_group = 0;  // 0 = every coordinate
    double fd_step = 1e-5;
};

struct FdOutcome {
    std::string name;
    double max_rel_err = 0.0;
    double tol = 0.0;
    int seeds = 0;
    bool pass = false;
};

// smallest |preactivation| across kink-bearing nodes, plus max-pool runner-up
// margins; softmax/tanh/sigmoid are smooth and need no guard
inline double kink_margin(const Tape& tape) {
    double margin = std::numeric_limits<double>::infinity();
    for (int id = 0; id < tape.size(); ++id) {
        const Node& n = tape.node(id);
        switch (n.op) {
            case Op::Relu:
            case Op::LeakyRelu:
            case Op::Abs: {
                const Node& a = tape.node(n.inputs[0]);
                for (double v : a.value) margin = std::min(margin, std::fabs(v));
                break;
            }
            case Op::MaxPool2d: {
                const Node& a = tape.node(n.inputs[0]);
                int C = a.shape[0], H = a.shape[1], W = a.shape[2];
                int k = n.a0, stride = n.a1, pad = n.a2;
                int Ho = n.shape[1], Wo = n.shape[2];
                for (int c = 0; c < C; ++c)
                    for (int oy = 0; oy < Ho; ++oy)
                        for (int ox = 0; ox < Wo; ++ox) {
                            double best = -std::numeric_limits<double>::infinity();
                            double second = best;
                            for (int ky = 0; ky < k; ++ky) {
                                int iy = oy * stride + ky - pad;
                                if (iy < 0 || iy >= H) continue;
                                for (int kx = 0; kx < k; ++kx) {
                                    int ix = ox * stride + kx - pad;
                                    if (ix < 0 || ix >= W) continue;
                                    double v = a.value[(size_t(c) * H + iy) * W + ix];
                                    if (v > best) {
                                        second = best;
                                        best = v;
                                    } else if (v > second) {
                                        second = v;
                                    }
                                }
                            }
                            if (std::isfinite(second)) margin = std::min(margin, best - second);
                        }
                break;
            }
            default:
                break;
        }
    }
    return margin;
}

inline FdOutcome run_fd_case(const FdCase& c, int n_seeds, uint64_t base_seed = 0xF0D5) {
    FdOutcome out;
    out.name = c.name;
    out.tol = c.tol;
    constexpr double kMinMargin = 1e-3;
    uint64_t attempt = 0;
    while (out.seeds < n_seeds) {
        if (attempt > uint64_t(n_seeds) * 40 + 200)
            throw ContractError("gradient check '" + c.name +
                                "' could not find enough kink-free configurations");
        Rng rng(base_seed ^ (0x9e3779b97f4a7c15ull * ++attempt));
        c.reseed(rng);
        GradGroups x(c.groups.size());
        for (size_t g = 0; g < c.groups.size(); ++g) {
            x[g].resize(size_t(numel(c.groups[g])));
            for (double& v : x[g]) v = rng.normal();
        }
        GradGroups analytic;
        double margin = 0.0;
        double f0 = c.eval(x, &analytic, &margin);
        (void)f0;
        if (margin < kMinMargin) continue;  // FD undefined across a kink; redraw
        bool bad_seed = false;
        for (size_t g = 0; g < x.size() && !bad_seed; ++g) {
            size_t n = x[g].size();
            std::vector<size_t> coords;
            if (c.probes_per_group <= 0 || size_t(c.probes_per_group) >= n) {
                for (size_t i = 0; i < n; ++i) coords.push_back(i);
            } else {
                for (int p = 0; p < c.probes_per_group; ++p) coords.push_back(size_t(rng.below(n)));
            }
            for (size_t ix : coords) {
                double keep = x[g][ix];
                x[g][ix] = keep + c.fd_step;
                double fp = c.eval(x, nullptr, nullptr);
                x[g][ix] = keep - c.fd_step;
                double fm = c.eval(x, nullptr, nullptr);
                x[g][ix] = keep;
                double fd = (fp - fm) / (2.0 * c.fd_step);
                double a = analytic[g][ix];
                double rel = std::fabs(a - fd) / std::max({1.0, std::fabs(a), std::fabs(fd)});
                out.max_rel_err = std::max(out.max_rel_err, rel);
            }
        }
        if (!bad_seed) ++out.seeds;
    }
    out.pass = out.max_rel_err < c.tol;
    return out;
}

// ---------------------------------------------------------------------------
// Case builders
// ---------------------------------------------------------------------------

namespace gradcases {

// scalar loss that is sensitive to every output coordinate
inline Tensor project(Tape& tape, const Tensor& t, Rng& rng) {
    std::vector<double> p(size_t(t.numel()));
    for (double& v : p) v = rng.normal();
    return sum(mul(t, tape.constant(t.shape(), p)));
}

// generic wrapper: leaves with the given shapes feed a graph builder
inline FdCase op_case(const std::string& name, std::vector<Shape> shapes,
                      std::function<Tensor(Tape&, std::vector<Tensor>&)> build, double tol = 1e-4,
                      int probes = 0) {
    FdCase c;
    c.name = name;
    c.groups = shapes;
    auto proj_seed = std::make_shared<uint64_t>(7);
    c.reseed = [proj_seed](Rng& rng) { *proj_seed = rng.next_u64(); };
    c.eval = [shapes, build, proj_seed](const GradGroups& x, GradGroups* grads,
                                        double* margin) -> double {
        Tape tape;
        std::vector<Tensor> leaves;
        for (size_t g = 0; g < shapes.size(); ++g)
            leaves.push_back(tape.leaf(shapes[g], x[g], grads != nullptr));
        Tensor out = build(tape, leaves);
        Tensor loss;
        if (out.numel() == 1) {
            loss = out;
        } else {
            Rng prng(*proj_seed);
            loss = project(tape, out, prng);
        }
        if (margin) *margin = kink_margin(tape);
        if (grads) {
            tape.backward(loss);
            grads->clear();
            for (Tensor& l : leaves) grads->push_back(l.grad());
        }
        return loss.item();
    };
    c.tol = tol;
    c.probes_per_group = probes;
    return c;
}

inline std::vector<FdCase> tensor_core_cases() {
    std::vector<FdCase> cs;
    auto unary = [&](const std::string& name, std::function<Tensor(Tensor)> f) {
        cs.push_back(op_case("elementwise." + name, {Shape{3, 4}},
                             [f](Tape&, std::vector<Tensor>& in) { return f(in[0]); }));
    };
    cs.push_back(op_case("add", {Shape{2, 3}, Shape{2, 3}},
                         [](Tape&, std::vector<Tensor>& in) { return add(in[0], in[1]); }));
    cs.push_back(op_case("add.scalar_broadcast", {Shape{2, 3}, Shape{}},
                         [](Tape&, std::vector<Tensor>& in) { return add(in[0], in[1]); }));
    cs.push_back(op_case("sub", {Shape{2, 3}, Shape{2, 3}},
                         [](Tape&, std::vector<Tensor>& in) { return sub(in[0], in[1]); }));
    cs.push_back(op_case("mul", {Shape{2, 3}, Shape{2, 3}},
                         [](Tape&, std::vector<Tensor>& in) { return mul(in[0], in[1]); }));
    cs.push_back(op_case("mul.scalar_broadcast", {Shape{}, Shape{2, 3}},
                         [](Tape&, std::vector<Tensor>& in) { return mul(in[0], in[1]); }));
    cs.push_back(op_case("scalar_mul", {Shape{5}},
                         [](Tape&, std::vector<Tensor>& in) { return scalar_mul(in[0], -1.7); }));
    unary("relu", [](Tensor t) { return relu(t); });
    unary("leaky_relu", [](Tensor t) { return leaky_relu(t, 0.2); });
    unary("tanh", [](Tensor t) { return tanh(t); });
    unary("sigmoid", [](Tensor t) { return sigmoid(t); });
    unary("abs", [](Tensor t) { return abs(t); });
    cs.push_back(op_case("power6.of_square", {Shape{4}}, [](Tape&, std::vector<Tensor>& in) {
        return power(add(mul(in[0], in[0]), in[0].tape()->scalar(0.5)), 6.0);
    }));
    cs.push_back(op_case("sqrt.of_square", {Shape{4}}, [](Tape&, std::vector<Tensor>& in) {
        return sqrt(add(mul(in[0], in[0]), in[0].tape()->scalar(0.5)));
    }));
    cs.push_back(op_case("sum", {Shape{3, 4}},
                         [](Tape&, std::vector<Tensor>& in) { return sum(in[0]); }));
    cs.push_back(op_case("mean", {Shape{3, 4}},
                         [](Tape&, std::vector<Tensor>& in) { return mean(in[0]); }));
    cs.push_back(op_case("sum_axis", {Shape{3, 4, 2}},
                         [](Tape&, std::vector<Tensor>& in) { return sum_axis(in[0], 1); }));
    cs.push_back(op_case("square_norm", {Shape{5}},
                         [](Tape&, std::vector<Tensor>& in) { return square_norm(in[0]); }));
    cs.push_back(op_case("softmax.axis1", {Shape{3, 5}},
                         [](Tape&, std::vector<Tensor>& in) { return softmax(in[0], 1); }));
    cs.push_back(op_case("softmax.axis0", {Shape{4, 2}},
                         [](Tape&, std::vector<Tensor>& in) { return softmax(in[0], 0); }));
    cs.push_back(op_case("conv2d.s1p1", {Shape{2, 5, 5}, Shape{3, 2, 3, 3}, Shape{3}},
                         [](Tape&, std::vector<Tensor>& in) {
                             return conv2d(in[0], in[1], in[2], 1, 1);
                         }));
    cs.push_back(op_case("conv2d.s2p1k4", {Shape{2, 8, 8}, Shape{3, 2, 4, 4}, Shape{3}},
                         [](Tape&, std::vector<Tensor>& in) {
                             return conv2d(in[0], in[1], in[2], 2, 1);
                         }));
    cs.push_back(op_case("conv2d.s1p0k1", {Shape{3, 4, 4}, Shape{2, 3, 1, 1}, Shape{2}},
                         [](Tape&, std::vector<Tensor>& in) {
                             return conv2d(in[0], in[1], in[2], 1, 0);
                         }));
    cs.push_back(op_case("max_pool2d.k3s2p1", {Shape{2, 6, 6}},
                         [](Tape&, std::vector<Tensor>& in) { return max_pool2d(in[0], 3, 2, 1); }));
    cs.push_back(op_case("max_pool2d.k2s2", {Shape{1, 4, 4}},
                         [](Tape&, std::vector<Tensor>& in) { return max_pool2d(in[0], 2, 2, 0); }));
    cs.push_back(op_case("linear.rank2", {Shape{3, 4}, Shape{5, 4}, Shape{5}},
                         [](Tape&, std::vector<Tensor>& in) {
                             return linear(in[0], in[1], in[2]);
                         }));
    cs.push_back(op_case("linear.rank1", {Shape{4}, Shape{5, 4}, Shape{5}},
                         [](Tape&, std::vector<Tensor>& in) {
                             return linear(in[0], in[1], in[2]);
                         }));
    cs.push_back(op_case("upsample_nearest2x", {Shape{2, 3, 3}},
                         [](Tape&, std::vector<Tensor>& in) { return upsample_nearest2x(in[0]); }));
    cs.push_back(op_case("concat.axis0", {Shape{2, 3}, Shape{4, 3}, Shape{1, 3}},
                         [](Tape&, std::vector<Tensor>& in) {
                             return concat({in[0], in[1], in[2]}, 0);
                         }));
    cs.push_back(op_case("concat.axis1", {Shape{2, 2, 2}, Shape{2, 3, 2}},
                         [](Tape&, std::vector<Tensor>& in) {
                             return concat({in[0], in[1]}, 1);
                         }));
    cs.push_back(op_case("slice_axis", {Shape{3, 6}}, [](Tape&, std::vector<Tensor>& in) {
        return slice_axis(in[0], 1, 2, 3);
    }));
    cs.push_back(op_case("reshape", {Shape{2, 6}}, [](Tape&, std::vector<Tensor>& in) {
        return reshape(in[0], Shape{3, 4});
    }));
    cs.push_back(op_case("transpose2d", {Shape{3, 5}},
                         [](Tape&, std::vector<Tensor>& in) { return transpose2d(in[0]); }));
    cs.push_back(op_case("broadcast_scalar", {Shape{}}, [](Tape&, std::vector<Tensor>& in) {
        return broadcast_scalar(in[0], Shape{2, 3});
    }));
    cs.push_back(op_case("broadcast_axis", {Shape{3, 2}}, [](Tape&, std::vector<Tensor>& in) {
        return broadcast_axis(in[0], 1, 4);
    }));
    cs.push_back(op_case("replicate_spatial", {Shape{3}}, [](Tape&, std::vector<Tensor>& in) {
        return replicate_spatial(in[0], 2, 3);
    }));
    cs.push_back(op_case("embed_rows", {Shape{6, 3}}, [](Tape&, std::vector<Tensor>& in) {
        return embed_rows(in[0], {0, 2, 2, 5});
    }));
    cs.push_back(op_case("channel_affine", {Shape{2, 3, 3}, Shape{2}, Shape{2}},
                         [](Tape&, std::vector<Tensor>& in) {
                             return channel_affine(in[0], in[1], in[2]);
                         }));
    // mask-consuming ops use a fixed representative mask
    {
        auto mask = std::make_shared<MaskGrid>(4, 4, 0);
        for (int i = 0; i < 16; ++i) mask->cells[size_t(i)] = uint8_t((i * 7 + 3) % 3 == 0);
        cs.push_back(op_case("mask_mul", {Shape{2, 4, 4}},
                             [mask](Tape&, std::vector<Tensor>& in) {
                                 return mask_mul(in[0], *mask, true);
                             }));
        cs.push_back(op_case("region_standardize", {Shape{2, 4, 4}},
                             [mask](Tape&, std::vector<Tensor>& in) {
                                 return region_standardize(in[0], *mask);
                             }));
    }
    // grad-of-grad on the closed-form subset: loss = ||grad_x sum(x^2)||^2
    cs.push_back(op_case("grad_of_grad.square_norm", {Shape{4}},
                         [](Tape& tape, std::vector<Tensor>& in) {
                             Tensor s = sum(mul(in[0], in[0]));
                             Tensor g = tape.grad(s, in[0]);
                             return square_norm(g);
                         }));
    return cs;
}

// shared scratch for composite cases: a store built once, re-filled from the
// FD groups on every evaluation
struct CompositeState {
    ParamStore store;
    std::vector<int> group_pids;  // store param ids, aligned with trailing groups
    MaskGrid mask{4, 4, 0};
    std::vector<double> proj;
    std::vector<int32_t> tokens{1, 7};
    uint64_t salt = 1;
};

inline void load_groups_into_store(CompositeState& st, const GradGroups& x, size_t first_group) {
    for (size_t g = first_group; g < x.size(); ++g) {
        Param& p = st.store.at(st.group_pids[g - first_group]);
        if (p.value.size() != x[g].size())
            throw ContractError("gradcheck group size mismatch for " + p.name);
        p.value = x[g];
    }
}

inline GradGroups harvest_groups(CompositeState& st, Binder& bind,
                                 const std::vector<Tensor>& input_leaves) {
    GradGroups grads;
    for (const Tensor& l : input_leaves) grads.push_back(l.grad());
    st.store.zero_grad();
    bind.harvest();
    for (int pid : st.group_pids) grads.push_back(st.store.at(pid).grad);
    return grads;
}

inline FdCase smc_block_case() {
    auto st = std::make_shared<CompositeState>();
    Rng init(42);
    SmcBlockParams p = SmcBlockParams::build(st->store, "blk", 2, 3, ConvGeometry{4, 2, 1}, init);
    auto pp = std::make_shared<SmcBlockParams>(p);
    for (int pid : {p.conv_valid_w, p.conv_valid_b, p.conv_invalid_w, p.conv_invalid_b,
                    p.norm_gamma, p.norm_beta})
        st->group_pids.push_back(pid);
    FdCase c;
    c.name = "composite.smc_block";
    c.groups = {Shape{2, 8, 8}};
    for (int pid : st->group_pids) c.groups.push_back(st->store.at(pid).shape);
    c.reseed = [st](Rng& rng) {
        st->mask = MaskGrid(8, 8, 0);
        for (uint8_t& cell : st->mask.cells) cell = uint8_t(rng.below(2));
        st->proj.resize(size_t(3 * 4 * 4));
        for (double& v : st->proj) v = rng.normal();
    };
    c.eval = [st, pp](const GradGroups& x, GradGroups* grads, double* margin) {
        load_groups_into_store(*st, x, 1);
        Tape tape;
        Binder bind(tape, st->store, grads != nullptr);
        Tensor f = tape.leaf(Shape{2, 8, 8}, x[0], grads != nullptr);
        auto [out, m_next] = smc_block(bind, *pp, f, st->mask);
        Tensor loss = sum(mul(out, tape.constant(out.shape(), st->proj)));
        if (margin) *margin = kink_margin(tape);
        if (grads) {
            tape.backward(loss);
            *grads = harvest_groups(*st, bind, {f});
        }
        return loss.item();
    };
    c.probes_per_group = 6;
    return c;
}

inline FdCase rat_step_case() {
    auto st = std::make_shared<CompositeState>();
    Rng init(43);
    auto rp = std::make_shared<RatParams>(RatParams::build(st->store, "rat", 4, 3, init));
    for (int pid : {rp->cell.w_ih, rp->cell.w_hh, rp->cell.b_ih, rp->cell.b_hh, rp->gamma_mlp.w1,
                    rp->gamma_mlp.b1, rp->gamma_mlp.w2, rp->gamma_mlp.b2, rp->beta_mlp.w1,
                    rp->beta_mlp.b1, rp->beta_mlp.w2, rp->beta_mlp.b2})
        st->group_pids.push_back(pid);
    FdCase c;
    c.name = "composite.rat_step";
    c.groups = {Shape{3, 2, 2}, Shape{4}};  // feature map, sentence embedding
    for (int pid : st->group_pids) c.groups.push_back(st->store.at(pid).shape);
    c.reseed = [st](Rng& rng) {
        st->proj.resize(12);
        for (double& v : st->proj) v = rng.normal();
    };
    c.eval = [st, rp](const GradGroups& x, GradGroups* grads, double* margin) {
        load_groups_into_store(*st, x, 2);
        Tape tape;
        Binder bind(tape, st->store, grads != nullptr);
        Tensor f = tape.leaf(Shape{3, 2, 2}, x[0], grads != nullptr);
        Tensor s = tape.leaf(Shape{4}, x[1], grads != nullptr);
        RecurrentState state = initial_state(tape, 4);
        auto [out, next] = rat_step(bind, *rp, f, s, state);
        (void)next;
        Tensor loss = sum(mul(out, tape.constant(out.shape(), st->proj)));
        if (margin) *margin = kink_margin(tape);
        if (grads) {
            tape.backward(loss);
            *grads = harvest_groups(*st, bind, {f, s});
        }
        return loss.item();
    };
    c.probes_per_group = 6;
    return c;
}

inline FdCase cross_affine_case() {
    auto st = std::make_shared<CompositeState>();
    Rng init(44);
    auto cp = std::make_shared<CrossAffineParams>(
        CrossAffineParams::build(st->store, "ca", 4, 3, init));
    for (int pid : {cp->wq, cp->gamma_mlp.w1, cp->gamma_mlp.b1, cp->gamma_mlp.w2, cp->gamma_mlp.b2,
                    cp->beta_mlp.w1, cp->beta_mlp.b1, cp->beta_mlp.w2, cp->beta_mlp.b2})
        st->group_pids.push_back(pid);
    FdCase c;
    c.name = "composite.cross_affine";
    c.groups = {Shape{3, 2, 2}, Shape{4}, Shape{2, 4}};  // x, h_t, words
    for (int pid : st->group_pids) c.groups.push_back(st->store.at(pid).shape);
    c.reseed = [st](Rng& rng) {
        st->proj.resize(12);
        for (double& v : st->proj) v = rng.normal();
    };
    c.eval = [st, cp](const GradGroups& x, GradGroups* grads, double* margin) {
        load_groups_into_store(*st, x, 3);
        Tape tape;
        Binder bind(tape, st->store, grads != nullptr);
        Tensor xin = tape.leaf(Shape{3, 2, 2}, x[0], grads != nullptr);
        Tensor h = tape.leaf(Shape{4}, x[1], grads != nullptr);
        Tensor w = tape.leaf(Shape{2, 4}, x[2], grads != nullptr);
        Tensor out = cross_affine(bind, *cp, xin, h, w);
        Tensor loss = sum(mul(out, tape.constant(out.shape(), st->proj)));
        if (margin) *margin = kink_margin(tape);
        if (grads) {
            tape.backward(loss);
            *grads = harvest_groups(*st, bind, {xin, h, w});
        }
        return loss.item();
    };
    c.probes_per_group = 6;
    return c;
}

inline Config tiny_config() {
    Config cfg;
    cfg.image_size = 16;
    cfg.depth = 3;
    cfg.d_w = 4;
    cfg.d_z = 3;
    cfg.base_channels = 3;
    cfg.channel_cap = 6;
    cfg.spatial_channels = 3;
    cfg.disc_base_channels = 3;
    cfg.disc_channel_cap = 6;
    return cfg;
}

// full generator at 16 px: loss projected from the composited image,
// gradients w.r.t. z, the text table and every generator parameter
inline FdCase generator_case() {
    auto st = std::make_shared<CompositeState>();
    Config cfg = tiny_config();
    Rng init(45);
    auto vocab = std::make_shared<Vocabulary>();
    auto text = std::make_shared<TextEncoderParams>(
        TextEncoderParams::build(st->store, *vocab, cfg.d_w, init));
    auto gen = std::make_shared<GeneratorParams>(
        GeneratorParams::build(st->store, cfg.depth, cfg.image_size, cfg.base_channels,
                               cfg.channel_cap, cfg.d_w, cfg.d_z, cfg.spatial_channels, init));
    for (int pid = 0; pid < st->store.count(); ++pid)
        if (st->store.at(pid).trainable) st->group_pids.push_back(pid);
    auto image = std::make_shared<std::vector<double>>();
    FdCase c;
    c.name = "composite.generator_16px";
    c.groups = {Shape{cfg.d_z}};
    for (int pid : st->group_pids) c.groups.push_back(st->store.at(pid).shape);
    c.reseed = [st, cfg, image](Rng& rng) {
        st->mask = MaskGrid(cfg.image_size, cfg.image_size, 0);
        for (uint8_t& cell : st->mask.cells) cell = uint8_t(rng.below(2));
        st->proj.resize(size_t(3 * cfg.image_size * cfg.image_size));
        for (double& v : st->proj) v = rng.normal();
        image->resize(st->proj.size());
        for (double& v : *image) v = rng.uniform(-0.9, 0.9);
        int64_t hw = int64_t(cfg.image_size) * cfg.image_size;
        for (int ch = 0; ch < 3; ++ch)
            for (int64_t i = 0; i < hw; ++i)
                if (st->mask.cells[size_t(i)]) (*image)[size_t(ch) * hw + i] = 0.0;
        st->tokens = {int32_t(1 + rng.below(6)), int32_t(7 + rng.below(4))};
    };
    c.eval = [st, cfg, gen, text, image](const GradGroups& x, GradGroups* grads, double* margin) {
        load_groups_into_store(*st, x, 1);
        Tape tape;
        Binder bind(tape, st->store, grads != nullptr);
        Tensor z = tape.leaf(Shape{cfg.d_z}, x[0], grads != nullptr);
        Tensor img = tape.constant(Shape{3, cfg.image_size, cfg.image_size}, *image);
        TextBundle tb = encode_text(bind, *text, st->tokens);
        GeneratorOutput out = generate(bind, *gen, img, st->mask, z, tb);
        Tensor loss = sum(mul(out.composited, tape.constant(out.composited.shape(), st->proj)));
        if (margin) *margin = kink_margin(tape);
        if (grads) {
            tape.backward(loss);
            *grads = harvest_groups(*st, bind, {z});
        }
        return loss.item();
    };
    c.probes_per_group = 2;
    return c;
}

inline FdCase discriminator_case() {
    auto st = std::make_shared<CompositeState>();
    Config cfg = tiny_config();
    Rng init(46);
    auto disc = std::make_shared<DiscriminatorParams>(DiscriminatorParams::build(
        st->store, cfg.image_size, cfg.d_w, cfg.disc_base_channels, cfg.disc_channel_cap, init));
    for (int pid = 0; pid < st->store.count(); ++pid) st->group_pids.push_back(pid);
    FdCase c;
    c.name = "composite.discriminator_16px";
    c.groups = {Shape{3, cfg.image_size, cfg.image_size}, Shape{cfg.d_w}};
    for (int pid : st->group_pids) c.groups.push_back(st->store.at(pid).shape);
    c.eval = [st, cfg, disc](const GradGroups& x, GradGroups* grads, double* margin) {
        load_groups_into_store(*st, x, 2);
        Tape tape;
        Binder bind(tape, st->store, grads != nullptr);
        Tensor img = tape.leaf(Shape{3, cfg.image_size, cfg.image_size}, x[0], grads != nullptr);
        Tensor s = tape.leaf(Shape{cfg.d_w}, x[1], grads != nullptr);
        Tensor loss = discriminate(bind, *disc, img, s);
        if (margin) *margin = kink_margin(tape);
        if (grads) {
            tape.backward(loss);
            *grads = harvest_groups(*st, bind, {img, s});
        }
        return loss.item();
    };
    c.probes_per_group = 4;
    return c;
}

inline FdCase recon_loss_case() {
    auto st = std::make_shared<CompositeState>();
    Rng init(47);
    auto fe = std::make_shared<FeatureExtractorParams>(FeatureExtractorParams::build(st->store, init));
    auto ref = std::make_shared<std::vector<double>>();
    FdCase c;
    c.name = "composite.recon_loss";
    c.groups = {Shape{3, 8, 8}};
    c.reseed = [ref](Rng& rng) {
        ref->resize(size_t(3 * 8 * 8));
        for (double& v : *ref) v = rng.normal();
    };
    c.eval = [st, fe, ref](const GradGroups& x, GradGroups* grads, double* margin) {
        Tape tape;
        Binder bind(tape, st->store, false);
        Tensor xhat = tape.leaf(Shape{3, 8, 8}, x[0], grads != nullptr);
        Tensor xref = tape.constant(Shape{3, 8, 8}, *ref);
        Tensor loss = recon_loss(bind, *fe, xhat, xref);
        if (margin) *margin = kink_margin(tape);
        if (grads) {
            tape.backward(loss);
            grads->clear();
            grads->push_back(xhat.grad());
        }
        return loss.item();
    };
    return c;
}

inline FdCase attn_loss_case() {
    auto amap = std::make_shared<std::vector<double>>();
    auto ref = std::make_shared<std::vector<double>>();
    FdCase c;
    c.name = "composite.attn_loss";
    c.groups = {Shape{3, 4, 4}};
    c.reseed = [amap, ref](Rng& rng) {
        amap->resize(16);
        for (double& v : *amap) v = rng.uniform(0.05, 1.0);
        ref->resize(48);
        for (double& v : *ref) v = rng.normal();
    };
    c.eval = [amap, ref](const GradGroups& x, GradGroups* grads, double* margin) {
        Tape tape;
        Tensor xhat = tape.leaf(Shape{3, 4, 4}, x[0], grads != nullptr);
        Tensor xref = tape.constant(Shape{3, 4, 4}, *ref);
        Tensor loss = attn_loss_with_map(xhat, xref, *amap);
        if (margin) *margin = kink_margin(tape);
        if (grads) {
            tape.backward(loss);
            grads->clear();
            grads->push_back(xhat.grad());
        }
        return loss.item();
    };
    return c;
}

// full discriminator objective including the MA-GP double-backward path,
// differentiated w.r.t. every discriminator parameter
inline FdCase magp_case() {
    auto st = std::make_shared<CompositeState>();
    Config cfg = tiny_config();
    Rng init(48);
    auto disc = std::make_shared<DiscriminatorParams>(DiscriminatorParams::build(
        st->store, cfg.image_size, cfg.d_w, cfg.disc_base_channels, cfg.disc_channel_cap, init));
    for (int pid = 0; pid < st->store.count(); ++pid) st->group_pids.push_back(pid);
    auto fixed = std::make_shared<GradGroups>();  // x, xhat, s, shat
    FdCase c;
    c.name = "composite.d_loss_magp_16px";
    for (int pid : st->group_pids) c.groups.push_back(st->store.at(pid).shape);
    c.reseed = [fixed, cfg](Rng& rng) {
        fixed->assign(4, {});
        int64_t npix = 3ll * cfg.image_size * cfg.image_size;
        (*fixed)[0].resize(size_t(npix));
        (*fixed)[1].resize(size_t(npix));
        (*fixed)[2].resize(size_t(cfg.d_w));
        (*fixed)[3].resize(size_t(cfg.d_w));
        for (auto& grp : *fixed)
            for (double& v : grp) v = rng.normal() * 0.5;
    };
    c.eval = [st, cfg, disc, fixed](const GradGroups& x, GradGroups* grads, double* margin) {
        load_groups_into_store(*st, x, 0);
        Tape tape;
        Binder bind(tape, st->store, grads != nullptr);
        Shape ishape{3, cfg.image_size, cfg.image_size};
        std::vector<Tensor> xs{tape.constant(ishape, (*fixed)[0])};
        std::vector<Tensor> xh{tape.constant(ishape, (*fixed)[1])};
        std::vector<Tensor> ss{tape.constant(Shape{cfg.d_w}, (*fixed)[2])};
        std::vector<Tensor> sh{tape.constant(Shape{cfg.d_w}, (*fixed)[3])};
        DiscriminatorFn D = [&](const Tensor& a, const Tensor& b) {
            return discriminate(bind, *disc, a, b);
        };
        DLossResult res = d_loss(tape, D, xs, xh, ss, sh, 2.0, 6.0);
        if (margin) *margin = kink_margin(tape);
        if (grads) {
            tape.backward(res.total);
            *grads = harvest_groups(*st, bind, {});
        }
        return res.total.item();
    };
    c.tol = 1e-3;
    c.probes_per_group = 4;
    return c;
}

inline std::vector<FdCase> composite_cases() {
    std::vector<FdCase> cs;
    cs.push_back(smc_block_case());
    cs.push_back(rat_step_case());
    cs.push_back(cross_affine_case());
    cs.push_back(generator_case());
    cs.push_back(discriminator_case());
    cs.push_back(recon_loss_case());
    cs.push_back(attn_loss_case());
    return cs;
}

inline std::vector<FdCase> magp_cases() { return {magp_case()}; }

}  // namespace gradcases

struct GradSuiteReport {
    std::vector<FdOutcome> outcomes;
    bool all_pass = true;
};

inline GradSuiteReport run_grad_suite(const std::string& scope, int n_seeds,
                                      std::ostream* os = nullptr) {
    std::vector<FdCase> cases;
    auto extend = [&](std::vector<FdCase> more) {
        for (FdCase& c : more) cases.push_back(std::move(c));
    };
    if (scope == "tensor-core") {
        extend(gradcases::tensor_core_cases());
    } else if (scope == "composites") {
        extend(gradcases::composite_cases());
    } else if (scope == "magp") {
        extend(gradcases::magp_cases());
    } else if (scope == "all") {
        extend(gradcases::tensor_core_cases());
        extend(gradcases::composite_cases());
        extend(gradcases::magp_cases());
    } else {
        throw ConfigError("unknown grad-check scope '" + scope +
                          "' (expected tensor-core, composites, magp or all)");
    }
    GradSuiteReport rep;
    for (const FdCase& c : cases) {
        FdOutcome o = run_fd_case(c, n_seeds);
        rep.all_pass = rep.all_pass && o.pass;
        if (os)
            *os << (o.pass ? "PASS " : "FAIL ") << std::left << std::setw(34) << o.name
                << " max_rel_err " << std::scientific << std::setprecision(3) << o.max_rel_err
                << "  tol " << o.tol << std::defaultfloat << "  seeds " << o.seeds << "\n";
        rep.outcomes.push_back(o);
    }
    return rep;
}

}  // namespace daft
