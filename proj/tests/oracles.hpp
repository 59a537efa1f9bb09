#pragma once

// Test-only brute-force oracles, written independently of the engine: direct
// per-output-position loops, long-double accumulation for softmax, receptive
// field scans for the mask update, and direct-formula PSNR/SSIM. None of
// these share code with the implementation they check.

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

namespace oracles {

struct ConvSpec {
    int cin, h, w, cout, k, stride, pad;
    int ho() const { return (h + 2 * pad - k) / stride + 1; }
    int wo() const { return (w + 2 * pad - k) / stride + 1; }
};

// forward: iterate each output position and scan its window
inline std::vector<double> conv2d(const ConvSpec& s, const std::vector<double>& x,
                                  const std::vector<double>& w, const std::vector<double>& b) {
    std::vector<double> out(size_t(s.cout) * s.ho() * s.wo(), 0.0);
    for (int co = 0; co < s.cout; ++co)
        for (int oy = 0; oy < s.ho(); ++oy)
            for (int ox = 0; ox < s.wo(); ++ox) {
                double acc = b.empty() ? 0.0 : b[size_t(co)];
                for (int ci = 0; ci < s.cin; ++ci)
                    for (int ky = 0; ky < s.k; ++ky)
                        for (int kx = 0; kx < s.k; ++kx) {
                            int iy = oy * s.stride + ky - s.pad;
                            int ix = ox * s.stride + kx - s.pad;
                            if (iy < 0 || iy >= s.h || ix < 0 || ix >= s.w) continue;
                            acc += x[(size_t(ci) * s.h + iy) * s.w + ix] *
                                   w[((size_t(co) * s.cin + ci) * s.k + ky) * s.k + kx];
                        }
                out[(size_t(co) * s.ho() + oy) * s.wo() + ox] = acc;
            }
    return out;
}

// gradients by direct accumulation from each output position
struct ConvGrads {
    std::vector<double> dx, dw, db;
};

inline ConvGrads conv2d_grads(const ConvSpec& s, const std::vector<double>& x,
                              const std::vector<double>& w, const std::vector<double>& gout) {
    ConvGrads g;
    g.dx.assign(x.size(), 0.0);
    g.dw.assign(w.size(), 0.0);
    g.db.assign(size_t(s.cout), 0.0);
    for (int co = 0; co < s.cout; ++co)
        for (int oy = 0; oy < s.ho(); ++oy)
            for (int ox = 0; ox < s.wo(); ++ox) {
                double go = gout[(size_t(co) * s.ho() + oy) * s.wo() + ox];
                g.db[size_t(co)] += go;
                for (int ci = 0; ci < s.cin; ++ci)
                    for (int ky = 0; ky < s.k; ++ky)
                        for (int kx = 0; kx < s.k; ++kx) {
                            int iy = oy * s.stride + ky - s.pad;
                            int ix = ox * s.stride + kx - s.pad;
                            if (iy < 0 || iy >= s.h || ix < 0 || ix >= s.w) continue;
                            size_t xi = (size_t(ci) * s.h + iy) * s.w + ix;
                            size_t wi = ((size_t(co) * s.cin + ci) * s.k + ky) * s.k + kx;
                            g.dx[xi] += go * w[wi];
                            g.dw[wi] += go * x[xi];
                        }
            }
    return g;
}

// sliding-window max scan; -inf outside the grid
inline std::vector<double> max_pool(const std::vector<double>& x, int c, int h, int w, int k,
                                    int stride, int pad, int* ho_out = nullptr,
                                    int* wo_out = nullptr) {
    int ho = (h + 2 * pad - k) / stride + 1;
    int wo = (w + 2 * pad - k) / stride + 1;
    if (ho_out) *ho_out = ho;
    if (wo_out) *wo_out = wo;
    std::vector<double> out(size_t(c) * ho * wo);
    for (int ch = 0; ch < c; ++ch)
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
                double best = -std::numeric_limits<double>::infinity();
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) {
                        int iy = oy * stride + ky - pad;
                        int ix = ox * stride + kx - pad;
                        if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                        best = std::max(best, x[(size_t(ch) * h + iy) * w + ix]);
                    }
                out[(size_t(ch) * ho + oy) * wo + ox] = best;
            }
    return out;
}

// triple-loop matmul: y[r][j] = sum_i x[r][i] * wt[j][i] + b[j]
inline std::vector<double> linear(const std::vector<double>& x, int rows, int n,
                                  const std::vector<double>& wt, int m,
                                  const std::vector<double>& b) {
    std::vector<double> out(size_t(rows) * m, 0.0);
    for (int r = 0; r < rows; ++r)
        for (int j = 0; j < m; ++j) {
            long double acc = b.empty() ? 0.0L : b[size_t(j)];
            for (int i = 0; i < n; ++i)
                acc += (long double)(x[size_t(r) * n + i]) * wt[size_t(j) * n + i];
            out[size_t(r) * m + j] = double(acc);
        }
    return out;
}

// extended-precision softmax over a flat vector
inline std::vector<double> softmax(const std::vector<double>& x) {
    long double mx = -std::numeric_limits<long double>::infinity();
    for (double v : x) mx = std::max(mx, (long double)v);
    long double z = 0.0L;
    std::vector<long double> e(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        e[i] = expl((long double)x[i] - mx);
        z += e[i];
    }
    std::vector<double> out(x.size());
    for (size_t i = 0; i < x.size(); ++i) out[i] = double(e[i] / z);
    return out;
}

// mask update oracle: an output cell is valid iff its receptive field holds a
// valid cell anywhere inside the grid
inline std::vector<uint8_t> mask_update(const std::vector<uint8_t>& m, int h, int w, int k,
                                        int stride, int pad, int* ho_out = nullptr,
                                        int* wo_out = nullptr) {
    int ho = (h + 2 * pad - k) / stride + 1;
    int wo = (w + 2 * pad - k) / stride + 1;
    if (ho_out) *ho_out = ho;
    if (wo_out) *wo_out = wo;
    std::vector<uint8_t> out(size_t(ho) * wo, 1);
    for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
            bool any_valid = false;
            for (int ky = 0; ky < k && !any_valid; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    int iy = oy * stride + ky - pad;
                    int ix = ox * stride + kx - pad;
                    if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                    if (m[size_t(iy) * w + ix] == 0) {
                        any_valid = true;
                        break;
                    }
                }
            out[size_t(oy) * wo + ox] = any_valid ? 0 : 1;
        }
    return out;
}

// direct-formula PSNR on the [0,1] mapping of [-1,1] data
inline double psnr(const std::vector<double>& a, const std::vector<double>& b) {
    long double se = 0.0L;
    for (size_t i = 0; i < a.size(); ++i) {
        long double da = ((long double)a[i] + 1.0L) / 2.0L;
        long double db = ((long double)b[i] + 1.0L) / 2.0L;
        se += (da - db) * (da - db);
    }
    long double mse = se / (long double)a.size();
    if (mse == 0.0L) return std::numeric_limits<double>::infinity();
    return double(10.0L * log10l(1.0L / mse));
}

// direct-formula single-scale SSIM, uniform 8x8 sliding windows
inline double ssim(const std::vector<double>& a, const std::vector<double>& b, int h, int w) {
    const double c1 = 0.0001, c2 = 0.0009;
    double total = 0.0;
    long n_windows = 0;
    for (int ch = 0; ch < 3; ++ch)
        for (int y = 0; y + 8 <= h; ++y)
            for (int x = 0; x + 8 <= w; ++x) {
                double ma = 0, mb = 0;
                for (int i = 0; i < 8; ++i)
                    for (int j = 0; j < 8; ++j) {
                        ma += (a[(size_t(ch) * h + y + i) * w + x + j] + 1.0) / 2.0;
                        mb += (b[(size_t(ch) * h + y + i) * w + x + j] + 1.0) / 2.0;
                    }
                ma /= 64.0;
                mb /= 64.0;
                double va = 0, vb = 0, cov = 0;
                for (int i = 0; i < 8; ++i)
                    for (int j = 0; j < 8; ++j) {
                        double da = (a[(size_t(ch) * h + y + i) * w + x + j] + 1.0) / 2.0 - ma;
                        double db = (b[(size_t(ch) * h + y + i) * w + x + j] + 1.0) / 2.0 - mb;
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                va /= 64.0;
                vb /= 64.0;
                cov /= 64.0;
                total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                         ((ma * ma + mb * mb + c1) * (va + vb + c2));
                ++n_windows;
            }
    return total / double(n_windows);
}

}  // namespace oracles
