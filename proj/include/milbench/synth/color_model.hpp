#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <numbers>
#include <random>
#include <span>
#include <string>

#include "milbench/core/errors.hpp"
#include "milbench/core/image.hpp"
#include "milbench/core/rng.hpp"

namespace milbench::synth {

struct NormalParams {
    double mean = 0.0;
    double std = 1.0;

    bool operator==(const NormalParams&) const = default;
};

struct SkewNormalParams {
    double location = 0.0;
    double scale = 1.0;
    double shape = 0.0;

    [[nodiscard]] double delta() const { return shape / std::sqrt(1.0 + shape * shape); }
    [[nodiscard]] double mean() const { return location + scale * delta() * std::sqrt(2.0 / std::numbers::pi); }

    bool operator==(const SkewNormalParams&) const = default;
};

// Largest skewness a skew-normal law can reach is ~0.99527; fits clamp to this.
inline constexpr double kMaxSkewness = 0.9952;

inline constexpr std::string_view kPredicatePapStain = "pap-stain:r>=g,r>=b-20";
inline constexpr std::string_view kPredicateAcceptAll = "accept-all";

struct ChannelColorModel {
    SkewNormalParams red{200.0, 40.0, -3.0};
    NormalParams green{115.0, 30.0};
    NormalParams blue{150.0, 30.0};
    std::string accept_predicate_id{kPredicatePapStain};

    bool operator==(const ChannelColorModel&) const = default;
};

using ColorTriple = std::array<std::uint8_t, 3>;

inline std::function<bool(const ColorTriple&)> acceptance_predicate(std::string_view id) {
    if (id == kPredicateAcceptAll) return [](const ColorTriple&) { return true; };
    if (id == kPredicatePapStain)
        return [](const ColorTriple& c) { return c[0] >= c[1] && static_cast<int>(c[0]) >= static_cast<int>(c[2]) - 20; };
    throw ConfigError("unknown color acceptance predicate '" + std::string(id) + "'");
}

// Two correlated standard normals u0, u1 with corr delta; |u0| sign-flips u1.
inline double sample_skew_normal(double location, double scale, double shape, Rng& rng) {
    if (!(scale > 0.0)) throw ConfigError("skew-normal scale must be positive");
    std::normal_distribution<double> normal(0.0, 1.0);
    const double delta = shape / std::sqrt(1.0 + shape * shape);
    const double u0 = normal(rng);
    const double v = normal(rng);
    const double u1 = delta * u0 + std::sqrt(1.0 - delta * delta) * v;
    const double z = u0 >= 0.0 ? u1 : -u1;
    return location + scale * z;
}

inline double sample_skew_normal(const SkewNormalParams& p, Rng& rng) {
    return sample_skew_normal(p.location, p.scale, p.shape, rng);
}

inline void validate(const ChannelColorModel& m) {
    if (!(m.green.std > 0.0) || !(m.blue.std > 0.0) || !(m.red.scale > 0.0))
        throw ConfigError("color model standard deviations and scale must be positive");
    (void)acceptance_predicate(m.accept_predicate_id);
}

inline constexpr int kMaxColorRejections = 10000;

// Draws (r, g, b) from the channel laws, clamped to [0,255], resampling until
// the acceptance predicate holds.
inline ColorTriple sample_color_triple(const ChannelColorModel& model, Rng& rng,
                                       int* rejected = nullptr) {
    validate(model);
    const auto accept = acceptance_predicate(model.accept_predicate_id);
    std::normal_distribution<double> green(model.green.mean, model.green.std);
    std::normal_distribution<double> blue(model.blue.mean, model.blue.std);
    for (int attempt = 0; attempt <= kMaxColorRejections; ++attempt) {
        ColorTriple c{clamp_u8(sample_skew_normal(model.red, rng)), clamp_u8(green(rng)), clamp_u8(blue(rng))};
        if (accept(c)) {
            if (rejected) *rejected = attempt;
            return c;
        }
    }
    throw ConfigError("color acceptance predicate rejected " + std::to_string(kMaxColorRejections) +
                      " consecutive draws; the color model and predicate are incompatible");
}

struct SampleMoments {
    double mean = 0.0;
    double variance = 0.0;
    double skewness = 0.0;
};

inline SampleMoments sample_moments(std::span<const double> xs) {
    SampleMoments m;
    if (xs.empty()) return m;
    const double n = static_cast<double>(xs.size());
    for (double x : xs) m.mean += x;
    m.mean /= n;
    double m2 = 0.0, m3 = 0.0;
    for (double x : xs) {
        const double d = x - m.mean;
        m2 += d * d;
        m3 += d * d * d;
    }
    m2 /= n;
    m3 /= n;
    m.variance = m2;
    m.skewness = m2 > 0.0 ? m3 / std::pow(m2, 1.5) : 0.0;
    return m;
}

// Method-of-moments skew-normal fit; skewness is clamped to the feasible range.
inline SkewNormalParams fit_skew_normal(const SampleMoments& mom) {
    if (!(mom.variance > 0.0)) throw DataError("degenerate fit: zero variance");
    constexpr double pi = std::numbers::pi;
    const double b = std::sqrt(2.0 / pi);
    const double g = std::clamp(mom.skewness, -kMaxSkewness, kMaxSkewness);
    const double r = std::cbrt(2.0 * std::abs(g) / (4.0 - pi));
    const double delta = std::copysign(r / (b * std::sqrt(1.0 + r * r)), g);
    SkewNormalParams p;
    p.shape = delta / std::sqrt(1.0 - delta * delta);
    p.scale = std::sqrt(mom.variance / (1.0 - b * b * delta * delta));
    p.location = mom.mean - p.scale * b * delta;
    return p;
}

inline NormalParams fit_normal(const SampleMoments& mom) {
    if (!(mom.variance > 0.0)) throw DataError("degenerate fit: zero variance");
    return {mom.mean, std::sqrt(mom.variance)};
}

// Fits the channel laws to every pixel of the sample images (RGB, 8-bit units).
inline ChannelColorModel fit_channel_models(std::span<const Image> samples,
                                            std::string predicate_id = std::string(kPredicatePapStain)) {
    if (samples.empty()) throw DataError("cannot fit color model to an empty sample");
    std::array<std::vector<double>, 3> values;
    for (const auto& img : samples) {
        if (img.channels != 3) throw FormatError("color model fitting needs RGB images");
        for (std::size_t p = 0; p < img.pixels.size(); p += 3)
            for (int c = 0; c < 3; ++c) values[c].push_back(img.pixels[p + c]);
    }
    ChannelColorModel m;
    const char* names[] = {"red", "green", "blue"};
    std::array<SampleMoments, 3> mom;
    for (int c = 0; c < 3; ++c) {
        mom[c] = sample_moments(values[c]);
        if (!(mom[c].variance > 0.0)) throw DataError(std::string("degenerate fit: zero variance in ") + names[c]);
    }
    m.red = fit_skew_normal(mom[0]);
    m.green = fit_normal(mom[1]);
    m.blue = fit_normal(mom[2]);
    m.accept_predicate_id = std::move(predicate_id);
    return m;
}

inline nlohmann::ordered_json to_json(const ChannelColorModel& m) {
    return {{"red", {{"location", m.red.location}, {"scale", m.red.scale}, {"shape", m.red.shape}}},
            {"green", {{"mean", m.green.mean}, {"std", m.green.std}}},
            {"blue", {{"mean", m.blue.mean}, {"std", m.blue.std}}},
            {"accept_predicate", m.accept_predicate_id}};
}

inline ChannelColorModel color_model_from_json(const nlohmann::json& j) {
    ChannelColorModel m;
    if (j.contains("red")) {
        m.red.location = j["red"].value("location", m.red.location);
        m.red.scale = j["red"].value("scale", m.red.scale);
        m.red.shape = j["red"].value("shape", m.red.shape);
    }
    if (j.contains("green")) {
        m.green.mean = j["green"].value("mean", m.green.mean);
        m.green.std = j["green"].value("std", m.green.std);
    }
    if (j.contains("blue")) {
        m.blue.mean = j["blue"].value("mean", m.blue.mean);
        m.blue.std = j["blue"].value("std", m.blue.std);
    }
    m.accept_predicate_id = j.value("accept_predicate", m.accept_predicate_id);
    validate(m);
    return m;
}

}  // namespace milbench::synth
