#pragma once

// Mask generators for the robustness protocol: free-form irregular brush
// masks with a target coverage band, and axis-aligned center squares.

#include "daft/mask.hpp"

namespace daft {

enum class MaskKind { Irregular, Center };

struct MaskSpec {
    MaskKind kind = MaskKind::Irregular;
    double ratio_lo = 0.10;
    double ratio_hi = 0.70;
    int brush_count = 3;          // initial stroke count before coverage seeking
    double brush_width_lo = 0.03;  // fraction of S
    double brush_width_hi = 0.10;
    int walk_steps = 10;
};

// centered square of side round(S*sqrt(ratio))
inline MaskGrid gen_center_mask(double ratio, int S) {
    if (ratio <= 0.0 || ratio >= 1.0)
        throw ContractError("center mask ratio must lie in (0,1), got " + std::to_string(ratio));
    int side = int(std::lround(S * std::sqrt(ratio)));
    side = std::max(1, std::min(S, side));
    int start = (S - side) / 2;
    MaskGrid m(S, S, 0);
    for (int y = start; y < start + side; ++y)
        for (int x = start; x < start + side; ++x) m.at(y, x) = 1;
    return m;
}

namespace detail {

inline void stamp_disk(MaskGrid& m, double cx, double cy, double r) {
    int S = m.h;
    int y0 = std::max(0, int(cy - r) - 1), y1 = std::min(S - 1, int(cy + r) + 1);
    int x0 = std::max(0, int(cx - r) - 1), x1 = std::min(m.w - 1, int(cx + r) + 1);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
            if (dx * dx + dy * dy <= r * r) m.at(y, x) = 1;
        }
}

inline void add_stroke(MaskGrid& m, Rng& rng, const MaskSpec& spec, double width_scale) {
    int S = m.h;
    double x = rng.uniform(0.05, 0.95) * m.w;
    double y = rng.uniform(0.05, 0.95) * S;
    double theta = rng.uniform(0.0, 6.283185307179586);
    double width = rng.uniform(spec.brush_width_lo, spec.brush_width_hi) * S * width_scale;
    width = std::max(width, 0.7);
    for (int step = 0; step < spec.walk_steps; ++step) {
        theta += rng.uniform(-0.9, 0.9);
        double len = rng.uniform(S / 16.0, S / 5.0);
        double nx = x + std::cos(theta) * len;
        double ny = y + std::sin(theta) * len;
        double dist = std::hypot(nx - x, ny - y);
        int n = std::max(2, int(dist * 2));
        for (int i = 0; i <= n; ++i) {
            double t = double(i) / n;
            stamp_disk(m, x + (nx - x) * t, y + (ny - y) * t, width);
        }
        x = std::min(std::max(nx, 0.0), double(m.w));
        y = std::min(std::max(ny, 0.0), double(S));
    }
}

// one morphological erosion step of the invalid set (4-neighborhood,
// outside-of-grid counts as valid so full-frame masks still shrink)
inline void erode(MaskGrid& m) {
    MaskGrid out = m;
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x) {
            if (!m.at(y, x)) continue;
            bool keep = y > 0 && y < m.h - 1 && x > 0 && x < m.w - 1 && m.at(y - 1, x) &&
                        m.at(y + 1, x) && m.at(y, x - 1) && m.at(y, x + 1);
            out.at(y, x) = keep ? 1 : 0;
        }
    m = out;
}

}  // namespace detail

// Union of random-walk brush strokes, adjusted by adding strokes or eroding
// until the invalid fraction lies in [lo, hi]. At most 100 adjustment rounds.
inline MaskGrid gen_irregular_mask(const MaskSpec& spec, int S, Rng& rng) {
    if (spec.kind != MaskKind::Irregular)
        throw ContractError("gen_irregular_mask called with a non-irregular spec");
    if (spec.ratio_lo < 0.0 || spec.ratio_hi > 1.0 || spec.ratio_lo > spec.ratio_hi)
        throw ContractError("mask ratio bounds must satisfy 0 <= lo <= hi <= 1");
    MaskGrid m(S, S, 0);
    double target = rng.uniform(spec.ratio_lo, spec.ratio_hi);
    for (int i = 0; i < spec.brush_count; ++i) detail::add_stroke(m, rng, spec, 1.0);
    int rounds = 0;
    // seek the per-mask target so the coverage distribution fills the band
    while (m.invalid_fraction() < target && rounds < 60) {
        detail::add_stroke(m, rng, spec, 1.0);
        ++rounds;
    }
    while (rounds < 100) {
        double f = m.invalid_fraction();
        if (f >= spec.ratio_lo && f <= spec.ratio_hi) return m;
        if (f > spec.ratio_hi) {
            detail::erode(m);
        } else {
            detail::add_stroke(m, rng, spec, 0.5);
        }
        ++rounds;
    }
    double f = m.invalid_fraction();
    if (f >= spec.ratio_lo && f <= spec.ratio_hi) return m;
    throw ContractError("mask generation failed to reach bounds [" +
                        std::to_string(spec.ratio_lo) + "," + std::to_string(spec.ratio_hi) +
                        "] within 100 rounds (got " + std::to_string(f) + ")");
}

// unified entry: center masks use the midpoint of the ratio band
inline MaskGrid gen_mask(const MaskSpec& spec, int S, Rng& rng) {
    if (spec.kind == MaskKind::Center)
        return gen_center_mask(0.5 * (spec.ratio_lo + spec.ratio_hi), S);
    return gen_irregular_mask(spec, S, rng);
}

}  // namespace daft
