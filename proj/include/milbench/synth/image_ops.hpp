#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <vector>

#include "milbench/core/errors.hpp"
#include "milbench/core/image.hpp"
#include "milbench/synth/color_model.hpp"

namespace milbench::synth {

// Bilinear resampling with half-pixel-centre alignment and edge clamping.
inline Image resize_bilinear(const Image& src, int target_h, int target_w) {
    if (target_h < src.height || target_w < src.width)
        throw ConfigError("resize_bilinear only upsamples: target must be at least the source size");
    Image out(target_h, target_w, src.channels);
    const double sy = static_cast<double>(src.height) / target_h;
    const double sx = static_cast<double>(src.width) / target_w;
    for (int y = 0; y < target_h; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, src.height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < target_w; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, src.width - 1);
            const double wx = fx - x0;
            for (int c = 0; c < src.channels; ++c) {
                const double top = src.at(y0, x0, c) * (1 - wx) + src.at(y0, x1, c) * wx;
                const double bot = src.at(y1, x0, c) * (1 - wx) + src.at(y1, x1, c) * wx;
                out.at(y, x, c) = clamp_u8(top * (1 - wy) + bot * wy);
            }
        }
    }
    return out;
}

// Tints a grayscale stroke image: intensity 0 maps to white, 255 to the colour.
inline Image colorize(const Image& gray, const ColorTriple& color) {
    if (gray.channels != 1) throw FormatError("colorize expects a single-channel image");
    Image out(gray.height, gray.width, 3);
    for (int y = 0; y < gray.height; ++y)
        for (int x = 0; x < gray.width; ++x) {
            const double g = gray.at(y, x) / 255.0;
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = clamp_u8(255.0 - g * (255.0 - color[c]));
        }
    return out;
}

inline Image flip_horizontal(const Image& src) {
    Image out(src.height, src.width, src.channels);
    for (int y = 0; y < src.height; ++y)
        for (int x = 0; x < src.width; ++x)
            for (int c = 0; c < src.channels; ++c) out.at(y, src.width - 1 - x, c) = src.at(y, x, c);
    return out;
}

inline Image flip_vertical(const Image& src) {
    Image out(src.height, src.width, src.channels);
    for (int y = 0; y < src.height; ++y)
        for (int x = 0; x < src.width; ++x)
            for (int c = 0; c < src.channels; ++c) out.at(src.height - 1 - y, x, c) = src.at(y, x, c);
    return out;
}

// Rotation about the image centre by `degrees` (counter-clockwise), bilinear,
// pixels mapped from outside the source take `fill`.
inline Image rotate(const Image& src, double degrees, std::array<std::uint8_t, 3> fill = {255, 255, 255}) {
    Image out(src.height, src.width, src.channels);
    const double rad = degrees * std::numbers::pi / 180.0;
    const double cs = std::cos(rad), sn = std::sin(rad);
    const double cy = (src.height - 1) / 2.0, cx = (src.width - 1) / 2.0;
    auto sample = [&](int y, int x, int c) -> double {
        if (y < 0 || y >= src.height || x < 0 || x >= src.width) return fill[std::min(c, 2)];
        return src.at(y, x, c);
    };
    for (int y = 0; y < src.height; ++y)
        for (int x = 0; x < src.width; ++x) {
            const double dx = x - cx, dy = y - cy;
            const double sx = cs * dx - sn * dy + cx;
            const double sy = sn * dx + cs * dy + cy;
            const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
            const double wx = sx - x0, wy = sy - y0;
            for (int c = 0; c < src.channels; ++c) {
                const double v = (sample(y0, x0, c) * (1 - wx) + sample(y0, x0 + 1, c) * wx) * (1 - wy) +
                                 (sample(y0 + 1, x0, c) * (1 - wx) + sample(y0 + 1, x0 + 1, c) * wx) * wy;
                out.at(y, x, c) = clamp_u8(v);
            }
        }
    return out;
}

// Counter-clockwise rotation by quarter turns (exact, no resampling).
inline Image rotate90(const Image& src, int quarter_turns) {
    int k = ((quarter_turns % 4) + 4) % 4;
    Image cur = src;
    while (k-- > 0) {
        Image next(cur.width, cur.height, cur.channels);
        for (int y = 0; y < cur.height; ++y)
            for (int x = 0; x < cur.width; ++x)
                for (int c = 0; c < cur.channels; ++c) next.at(cur.width - 1 - x, y, c) = cur.at(y, x, c);
        cur = std::move(next);
    }
    return cur;
}

// Correlates each channel with a (2r+1)x(2r+1) kernel, replicating borders.
inline Image convolve(const Image& src, const std::vector<double>& kernel, int radius) {
    const int k = 2 * radius + 1;
    Image out(src.height, src.width, src.channels);
    for (int y = 0; y < src.height; ++y)
        for (int x = 0; x < src.width; ++x)
            for (int c = 0; c < src.channels; ++c) {
                double acc = 0.0;
                for (int dy = -radius; dy <= radius; ++dy) {
                    const int yy = std::clamp(y + dy, 0, src.height - 1);
                    for (int dx = -radius; dx <= radius; ++dx) {
                        const int xx = std::clamp(x + dx, 0, src.width - 1);
                        acc += kernel[(dy + radius) * k + (dx + radius)] * src.at(yy, xx, c);
                    }
                }
                out.at(y, x, c) = clamp_u8(acc);
            }
    return out;
}

inline Image gaussian_blur(const Image& src, double sigma) {
    if (!(sigma > 0.0)) return src;
    const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    const int k = 2 * r + 1;
    std::vector<double> kern(static_cast<std::size_t>(k) * k);
    double total = 0.0;
    for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
            const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            kern[(dy + r) * k + (dx + r)] = v;
            total += v;
        }
    for (auto& v : kern) v /= total;
    return convolve(src, kern, r);
}

// Averages along a line of `length` pixels through the centre at `degrees`.
inline Image motion_blur(const Image& src, int length, double degrees) {
    if (length < 2) return src;
    const int r = length / 2;
    const int k = 2 * r + 1;
    std::vector<double> kern(static_cast<std::size_t>(k) * k, 0.0);
    const double rad = degrees * std::numbers::pi / 180.0;
    const double dx = std::cos(rad), dy = std::sin(rad);
    for (int s = 0; s <= 4 * r; ++s) {
        const double t = -r + s * 0.5;
        const int x = static_cast<int>(std::lround(t * dx)) + r;
        const int y = static_cast<int>(std::lround(t * dy)) + r;
        kern[y * k + x] = 1.0;
    }
    double total = 0.0;
    for (double v : kern) total += v;
    for (auto& v : kern) v /= total;
    return convolve(src, kern, r);
}

}  // namespace milbench::synth
