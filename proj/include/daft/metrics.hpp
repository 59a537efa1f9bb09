#pragma once

// PSNR and single-scale SSIM on [-1,1] images, scored after mapping to unit
// dynamic range. SSIM uses 8x8 uniform sliding windows so an independent
// direct-formula oracle can reproduce it exactly.

#include "daft/core.hpp"

namespace daft {

constexpr double kPsnrCap = 100.0;  // logging cap for the MSE=0 sentinel

namespace detail {
inline double to_unit(double v) { return (v + 1.0) * 0.5; }
}

// 10*log10(1/MSE) on the [0,1] mapping; +inf when identical
inline double psnr(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ShapeError("psnr operands have different element counts");
    if (a.empty()) throw ContractError("psnr of empty images");
    double mse = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = detail::to_unit(a[i]) - detail::to_unit(b[i]);
        mse += d * d;
    }
    mse /= double(a.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

inline double psnr_capped(const std::vector<double>& a, const std::vector<double>& b) {
    return std::min(psnr(a, b), kPsnrCap);
}

// channel-averaged SSIM over all 8x8 windows (stride 1), C1=(0.01)^2,
// C2=(0.03)^2, population statistics
inline double ssim(const std::vector<double>& a, const std::vector<double>& b, int H, int W) {
    constexpr int kWin = 8;
    constexpr double kC1 = 0.01 * 0.01;
    constexpr double kC2 = 0.03 * 0.03;
    if (H < kWin || W < kWin)
        throw ContractError("ssim needs images of at least 8x8, got " + std::to_string(H) + "x" +
                            std::to_string(W));
    if (a.size() != size_t(3) * H * W || b.size() != a.size())
        throw ShapeError("ssim expects two [3,H,W] images");
    double total = 0.0;
    int64_t windows = 0;
    for (int c = 0; c < 3; ++c) {
        const double* ac = a.data() + size_t(c) * H * W;
        const double* bc = b.data() + size_t(c) * H * W;
        for (int y = 0; y + kWin <= H; ++y) {
            for (int x = 0; x + kWin <= W; ++x) {
                double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
                for (int wy = 0; wy < kWin; ++wy)
                    for (int wx = 0; wx < kWin; ++wx) {
                        double va = detail::to_unit(ac[(y + wy) * W + (x + wx)]);
                        double vb = detail::to_unit(bc[(y + wy) * W + (x + wx)]);
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                constexpr double n = double(kWin * kWin);
                double ma = sa / n, mb = sb / n;
                double va = saa / n - ma * ma;
                double vb = sbb / n - mb * mb;
                double cov = sab / n - ma * mb;
                double num = (2.0 * ma * mb + kC1) * (2.0 * cov + kC2);
                double den = (ma * ma + mb * mb + kC1) * (va + vb + kC2);
                total += num / den;
                ++windows;
            }
        }
    }
    return total / double(windows);
}

inline double ssim(const std::vector<double>& a, const std::vector<double>& b, int S) {
    return ssim(a, b, S, S);
}

}  // namespace daft
