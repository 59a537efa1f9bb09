#pragma once

// Synthetic captioned-shapes dataset. Every scene is a pure function of
// (seed, size): a tinted gray background with 1-3 anti-aliased colored
// shapes, captioned by the primary shape's size, color, kind and position.

#include "daft/core.hpp"

namespace daft {

struct ShapeScene {
    int size = 0;
    std::vector<double> image;  // [3,S,S], values in [-1,1]
    std::string caption;
    uint64_t seed = 0;
};

namespace detail {

struct ShapeSpec {
    int kind = 0;   // 0 circle, 1 square, 2 triangle, 3 bar
    double cx = 0, cy = 0, r = 0;
    double rgb[3] = {0, 0, 0};  // in [0,1]
};

inline bool point_in_shape(const ShapeSpec& s, double x, double y) {
    double dx = x - s.cx, dy = y - s.cy;
    switch (s.kind) {
        case 0:
            return dx * dx + dy * dy <= s.r * s.r;
        case 1: {
            double h = s.r * 0.9;
            return std::fabs(dx) <= h && std::fabs(dy) <= h;
        }
        case 2: {
            // upward triangle: apex (cx, cy-r), base at cy + 0.75 r
            double ax = s.cx, ay = s.cy - s.r;
            double bx = s.cx - 0.95 * s.r, by = s.cy + 0.75 * s.r;
            double cx2 = s.cx + 0.95 * s.r, cy2 = s.cy + 0.75 * s.r;
            auto side = [&](double x1, double y1, double x2, double y2) {
                return (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1);
            };
            double d1 = side(ax, ay, bx, by);
            double d2 = side(bx, by, cx2, cy2);
            double d3 = side(cx2, cy2, ax, ay);
            bool has_neg = d1 < 0 || d2 < 0 || d3 < 0;
            bool has_pos = d1 > 0 || d2 > 0 || d3 > 0;
            return !(has_neg && has_pos);
        }
        default:
            return std::fabs(dx) <= s.r * 1.15 && std::fabs(dy) <= s.r * 0.38;
    }
}

// 4x4 supersampled coverage blend
inline void rasterize(std::vector<double>& img, int S, const ShapeSpec& s) {
    int y0 = std::max(0, int(s.cy - 1.5 * s.r) - 1);
    int y1 = std::min(S - 1, int(s.cy + 1.5 * s.r) + 1);
    int x0 = std::max(0, int(s.cx - 1.5 * s.r) - 1);
    int x1 = std::min(S - 1, int(s.cx + 1.5 * s.r) + 1);
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            int hits = 0;
            for (int sy = 0; sy < 4; ++sy)
                for (int sx = 0; sx < 4; ++sx)
                    if (point_in_shape(s, x + (sx + 0.5) / 4.0, y + (sy + 0.5) / 4.0)) ++hits;
            if (!hits) continue;
            double cov = hits / 16.0;
            for (int c = 0; c < 3; ++c) {
                double& px = img[(size_t(c) * S + y) * S + x];
                double shape_val = 2.0 * s.rgb[c] - 1.0;
                px = px * (1.0 - cov) + shape_val * cov;
            }
        }
    }
}

}  // namespace detail

inline const char* const kColorWords[6] = {"red", "green", "blue", "yellow", "white", "black"};
inline const double kColorRgb[6][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1},
                                       {1, 1, 0}, {1, 1, 1}, {0, 0, 0}};
inline const char* const kShapeWords[4] = {"circle", "square", "triangle", "bar"};
inline const char* const kSizeWords[2] = {"small", "large"};
inline const char* const kPositionWords[5] = {"left", "right", "top", "bottom", "center"};

// shape_count < 0 draws the usual 1-3 shapes; 0 renders background only
inline ShapeScene render_scene_with_count(uint64_t seed, int S, int shape_count) {
    if (S < 8) throw ConfigError("scene size must be at least 8, got " + std::to_string(S));
    Rng rng(seed * 0x9e3779b97f4a7c15ull + uint64_t(S));
    ShapeScene scene;
    scene.size = S;
    scene.seed = seed;
    scene.image.resize(size_t(3) * S * S);

    double base = rng.uniform(0.25, 0.75);
    for (int c = 0; c < 3; ++c) {
        double tint = base + rng.uniform(-0.04, 0.04);
        std::fill_n(scene.image.begin() + size_t(c) * S * S, size_t(S) * S, 2.0 * tint - 1.0);
    }
    if (shape_count == 0) return scene;

    int color = int(rng.below(6));
    int kind = int(rng.below(4));
    int size_ix = int(rng.below(2));
    int pos = int(rng.below(5));

    int extras = shape_count < 0 ? int(rng.below(3)) : shape_count - 1;
    for (int i = 0; i < extras; ++i) {
        detail::ShapeSpec s;
        s.kind = int(rng.below(4));
        int c2 = int(rng.below(6));
        for (int c = 0; c < 3; ++c) s.rgb[c] = kColorRgb[c2][c];
        s.r = S * rng.uniform(0.05, 0.10);
        s.cx = rng.uniform(0.15, 0.85) * S;
        s.cy = rng.uniform(0.15, 0.85) * S;
        detail::rasterize(scene.image, S, s);
    }

    static const double kPosXY[5][2] = {
        {0.28, 0.50}, {0.72, 0.50}, {0.50, 0.28}, {0.50, 0.72}, {0.50, 0.50}};
    detail::ShapeSpec primary;
    primary.kind = kind;
    for (int c = 0; c < 3; ++c) primary.rgb[c] = kColorRgb[color][c];
    primary.r = S * (size_ix == 0 ? 0.12 : 0.22);
    primary.cx = kPosXY[pos][0] * S;
    primary.cy = kPosXY[pos][1] * S;
    detail::rasterize(scene.image, S, primary);

    scene.caption = std::string(kSizeWords[size_ix]) + " " + kColorWords[color] + " " +
                    kShapeWords[kind] + " " + kPositionWords[pos];
    return scene;
}

inline ShapeScene render_scene(uint64_t seed, int S) { return render_scene_with_count(seed, S, -1); }

}  // namespace daft
