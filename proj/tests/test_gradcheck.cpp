// Finite-difference verification at unit-test scale (a reduced seed count;
// the acceptance suite runs the full 50-seed sweep).

#include <gtest/gtest.h>

#include "daft/gradcheck.hpp"

using namespace daft;

namespace {
constexpr int kSeeds = 8;
}

TEST(GradCheck, TensorCorePrimitives) {
    for (const FdCase& c : gradcases::tensor_core_cases()) {
        FdOutcome o = run_fd_case(c, kSeeds);
        EXPECT_TRUE(o.pass) << o.name << " max_rel_err " << o.max_rel_err;
    }
}

TEST(GradCheck, SmcBlock) {
    FdOutcome o = run_fd_case(gradcases::smc_block_case(), kSeeds);
    EXPECT_TRUE(o.pass) << o.max_rel_err;
}

TEST(GradCheck, RatStep) {
    FdOutcome o = run_fd_case(gradcases::rat_step_case(), kSeeds);
    EXPECT_TRUE(o.pass) << o.max_rel_err;
}

TEST(GradCheck, CrossAffine) {
    FdOutcome o = run_fd_case(gradcases::cross_affine_case(), kSeeds);
    EXPECT_TRUE(o.pass) << o.max_rel_err;
}

TEST(GradCheck, Generator16px) {
    FdOutcome o = run_fd_case(gradcases::generator_case(), 3);
    EXPECT_TRUE(o.pass) << o.max_rel_err;
}

TEST(GradCheck, Discriminator16px) {
    FdOutcome o = run_fd_case(gradcases::discriminator_case(), 4);
    EXPECT_TRUE(o.pass) << o.max_rel_err;
}

TEST(GradCheck, ReconAndAttnLosses) {
    FdOutcome r = run_fd_case(gradcases::recon_loss_case(), kSeeds);
    EXPECT_TRUE(r.pass) << r.max_rel_err;
    FdOutcome a = run_fd_case(gradcases::attn_loss_case(), kSeeds);
    EXPECT_TRUE(a.pass) << a.max_rel_err;
}

TEST(GradCheck, MagpDoubleBackward) {
    FdOutcome o = run_fd_case(gradcases::magp_case(), 3);
    EXPECT_TRUE(o.pass) << o.max_rel_err;
}

TEST(GradCheck, UnknownScopeRejected) {
    EXPECT_THROW(run_grad_suite("bogus", 1), ConfigError);
}
