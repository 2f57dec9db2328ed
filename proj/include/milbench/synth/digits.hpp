#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "milbench/core/errors.hpp"
#include "milbench/core/image.hpp"
#include "milbench/core/rng.hpp"

namespace milbench::synth {

inline constexpr int kDigitSize = 28;

struct DigitImage {
    std::string id;
    int digit = 0;
    Image gray;  // kDigitSize x kDigitSize, one channel, stroke = bright
};

using DigitSet = std::vector<DigitImage>;

// A QMNIST-style pool: the original train and test sets.
struct SourcePool {
    DigitSet train;
    DigitSet test;
};

struct SourceSplits {
    DigitSet train;
    DigitSet validation;
    DigitSet test;

    [[nodiscard]] const DigitSet& get(std::string_view split) const {
        if (split == "train") return train;
        if (split == "validation") return validation;
        if (split == "test") return test;
        throw ConfigError("unknown source split '" + std::string(split) + "'");
    }
};

inline constexpr double kValidationFraction = 0.2;

// Validation = a seeded random 20% of the original test set, test = the rest.
inline SourceSplits split_source_pool(const SourcePool& pool, std::uint64_t seed) {
    if (pool.train.empty() || pool.test.empty()) throw DataError("source pool train and test sets must be nonempty");
    SourceSplits s;
    s.train = pool.train;
    std::vector<std::size_t> order(pool.test.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    auto rng = make_stream(seed, {key_of("split_source_pool")});
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_val = static_cast<std::size_t>(std::llround(kValidationFraction * static_cast<double>(order.size())));
    std::vector<std::size_t> val_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<std::size_t> test_idx(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
    // Keep the original relative order inside each part.
    std::sort(val_idx.begin(), val_idx.end());
    std::sort(test_idx.begin(), test_idx.end());
    for (auto i : val_idx) s.validation.push_back(pool.test[i]);
    for (auto i : test_idx) s.test.push_back(pool.test[i]);
    return s;
}

// ---------------------------------------------------------------------------
// IDX archives (the MNIST/QMNIST distribution format, uncompressed).
// Images: magic 0x00000803, dims n x 28 x 28, unsigned bytes.
// Labels: magic 0x00000801 (n unsigned bytes) or QMNIST's 0x00000C02
// (n x k big-endian int32, first column is the digit).
// ---------------------------------------------------------------------------
namespace detail {

inline std::uint32_t read_be32(std::istream& in) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError("idx: truncated header");
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) | b[3];
}

}  // namespace detail

inline DigitSet load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                         const std::string& id_prefix) {
    std::ifstream im(images_path, std::ios::binary);
    std::ifstream lb(labels_path, std::ios::binary);
    if (!im) throw IoError("cannot open " + images_path.string());
    if (!lb) throw IoError("cannot open " + labels_path.string());
    if (detail::read_be32(im) != 0x00000803) throw FormatError("idx: bad image magic in " + images_path.string());
    const auto n = detail::read_be32(im);
    const auto rows = detail::read_be32(im);
    const auto cols = detail::read_be32(im);
    if (rows != kDigitSize || cols != kDigitSize) throw FormatError("idx: expected 28x28 digit images");

    const auto label_magic = detail::read_be32(lb);
    std::vector<int> labels;
    if (label_magic == 0x00000801) {
        const auto nl = detail::read_be32(lb);
        if (nl != n) throw FormatError("idx: label count does not match image count");
        labels.resize(n);
        for (auto& l : labels) {
            char c;
            if (!lb.get(c)) throw FormatError("idx: truncated labels");
            l = static_cast<unsigned char>(c);
        }
    } else if (label_magic == 0x00000C02) {
        const auto nl = detail::read_be32(lb);
        const auto width = detail::read_be32(lb);
        if (nl != n || width == 0) throw FormatError("idx: bad QMNIST label table");
        labels.resize(n);
        for (auto& l : labels) {
            l = static_cast<int>(detail::read_be32(lb));
            for (std::uint32_t k = 1; k < width; ++k) (void)detail::read_be32(lb);
        }
    } else {
        throw FormatError("idx: bad label magic in " + labels_path.string());
    }

    DigitSet set;
    set.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        DigitImage d;
        d.id = id_prefix + std::to_string(i);
        d.digit = labels[i];
        if (d.digit < 0 || d.digit > 9) throw FormatError("idx: digit label out of range");
        d.gray = Image(kDigitSize, kDigitSize, 1);
        if (!im.read(reinterpret_cast<char*>(d.gray.pixels.data()), kDigitSize * kDigitSize))
            throw FormatError("idx: truncated image data");
        set.push_back(std::move(d));
    }
    return set;
}

// ---------------------------------------------------------------------------
// Procedural handwriting-like digits: each glyph is a set of polylines in the
// unit square, perturbed per sample by point jitter, a random affine map and a
// random stroke width, then rendered with antialiasing into the central
// 20x20 box of a 28x28 canvas.
// ---------------------------------------------------------------------------
namespace detail {

struct Pt {
    double x, y;
};
using Stroke = std::vector<Pt>;

inline Stroke arc(double cx, double cy, double rx, double ry, double deg0, double deg1, int steps = 16) {
    Stroke s;
    for (int i = 0; i <= steps; ++i) {
        const double t = (deg0 + (deg1 - deg0) * i / steps) * std::numbers::pi / 180.0;
        s.push_back({cx + rx * std::cos(t), cy + ry * std::sin(t)});
    }
    return s;
}

// Angles in degrees, y axis pointing down (90 = bottom).
inline std::vector<Stroke> glyph(int digit) {
    switch (digit) {
        case 0: return {arc(0.5, 0.5, 0.28, 0.42, 0, 360, 28)};
        case 1: return {{{0.36, 0.22}, {0.52, 0.08}, {0.52, 0.92}}};
        case 2: {
            Stroke s = arc(0.5, 0.32, 0.27, 0.23, 190, 380, 14);
            s.push_back({0.22, 0.9});
            s.push_back({0.8, 0.9});
            return {s};
        }
        case 3: {
            Stroke top = arc(0.48, 0.3, 0.25, 0.2, 220, 450, 14);
            Stroke bot = arc(0.48, 0.7, 0.28, 0.21, 270, 500, 14);
            return {top, bot};
        }
        case 4: return {{{0.64, 0.92}, {0.64, 0.08}, {0.16, 0.64}, {0.84, 0.64}}};
        case 5: {
            Stroke s{{0.76, 0.1}, {0.32, 0.1}, {0.28, 0.46}};
            Stroke bowl = arc(0.47, 0.67, 0.27, 0.23, 230, 495, 14);
            return {s, bowl};
        }
        case 6: {
            Stroke s = arc(0.62, 0.6, 0.38, 0.5, 255, 180, 10);
            return {s, arc(0.5, 0.7, 0.24, 0.2, 0, 360, 20)};
        }
        case 7: return {{{0.18, 0.1}, {0.8, 0.1}, {0.42, 0.92}}};
        case 8: return {arc(0.5, 0.29, 0.2, 0.19, 0, 360, 20), arc(0.5, 0.7, 0.25, 0.21, 0, 360, 20)};
        case 9: {
            Stroke loop = arc(0.5, 0.3, 0.24, 0.2, 0, 360, 20);
            return {loop, {{0.74, 0.3}, {0.7, 0.6}, {0.62, 0.92}}};
        }
        default: throw ConfigError("digit out of range");
    }
}

inline double segment_distance(Pt p, Pt a, Pt b) {
    const double vx = b.x - a.x, vy = b.y - a.y;
    const double len2 = vx * vx + vy * vy;
    double t = len2 > 0 ? ((p.x - a.x) * vx + (p.y - a.y) * vy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double dx = p.x - (a.x + t * vx), dy = p.y - (a.y + t * vy);
    return std::sqrt(dx * dx + dy * dy);
}

}  // namespace detail

inline Image render_digit(int digit, Rng& rng) {
    std::normal_distribution<double> jitter(0.0, 0.025);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto between = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };

    auto strokes = detail::glyph(digit);
    const double scale_x = between(0.8, 1.08), scale_y = between(0.88, 1.08);
    const double shear = between(-0.25, 0.25);
    const double rot = between(-0.2, 0.2);
    const double tx = between(-0.05, 0.05), ty = between(-0.04, 0.04);
    const double half_width = between(0.055, 0.1);
    const double cr = std::cos(rot), sr = std::sin(rot);
    for (auto& s : strokes)
        for (auto& p : s) {
            double x = (p.x - 0.5 + jitter(rng)) * scale_x;
            double y = (p.y - 0.5 + jitter(rng)) * scale_y;
            x += shear * y;
            const double rx = cr * x - sr * y, ry = sr * x + cr * y;
            p = {rx + 0.5 + tx, ry + 0.5 + ty};
        }

    Image img(kDigitSize, kDigitSize, 1);
    constexpr double box = 20.0, offset = (kDigitSize - box) / 2.0;
    const double aa = 0.6 / box;
    for (int y = 0; y < kDigitSize; ++y)
        for (int x = 0; x < kDigitSize; ++x) {
            const detail::Pt p{(x + 0.5 - offset) / box, (y + 0.5 - offset) / box};
            double d = 1e9;
            for (const auto& s : strokes)
                for (std::size_t i = 0; i + 1 < s.size(); ++i) d = std::min(d, detail::segment_distance(p, s[i], s[i + 1]));
            const double cover = std::clamp((half_width - d) / aa + 0.5, 0.0, 1.0);
            img.at(y, x) = clamp_u8(255.0 * cover);
        }
    return img;
}

// n digits with labels cycling 0..9 in a seeded shuffled order.
inline DigitSet render_digit_set(std::size_t n, std::uint64_t seed, const std::string& id_prefix) {
    DigitSet set;
    set.reserve(n);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % 10);
    auto order_rng = make_stream(seed, {key_of(id_prefix), key_of("labels")});
    std::shuffle(labels.begin(), labels.end(), order_rng);
    for (std::size_t i = 0; i < n; ++i) {
        auto rng = make_stream(seed, {key_of(id_prefix), i});
        set.push_back({id_prefix + std::to_string(i), labels[i], render_digit(labels[i], rng)});
    }
    return set;
}

inline SourcePool procedural_pool(std::size_t n_train, std::size_t n_test, std::uint64_t seed) {
    return {render_digit_set(n_train, seed, "ptrain"), render_digit_set(n_test, seed, "ptest")};
}

}  // namespace milbench::synth
