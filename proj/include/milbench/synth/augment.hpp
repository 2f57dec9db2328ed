#pragma once

#include <nlohmann/json.hpp>

#include <random>

#include "milbench/core/image.hpp"
#include "milbench/core/rng.hpp"
#include "milbench/synth/image_ops.hpp"

namespace milbench::synth {

struct AugmentConfig {
    double rotate_p = 1.0;  // uniform angle in [0, 360)
    double hflip_p = 0.5;
    double vflip_p = 0.5;
    double noise_p = 0.5;
    double noise_sigma_min = 3.0;
    double noise_sigma_max = 7.0;
    double blur_p = 0.3;
    double blur_sigma_min = 0.5;
    double blur_sigma_max = 1.2;
    double motion_blur_p = 0.2;
    int motion_blur_min = 3;
    int motion_blur_max = 7;
    double fog_p = 0.2;
    double fog_min = 0.1;
    double fog_max = 0.35;
    double brightness_contrast_p = 0.5;
    double brightness_limit = 0.15;
    double contrast_limit = 0.15;

    static AugmentConfig none() {
        AugmentConfig a;
        a.rotate_p = a.hflip_p = a.vflip_p = a.noise_p = a.blur_p = a.motion_blur_p = a.fog_p =
            a.brightness_contrast_p = 0.0;
        return a;
    }

    bool operator==(const AugmentConfig&) const = default;
};

inline Image add_gaussian_noise(const Image& src, double sigma, Rng& rng) {
    std::normal_distribution<double> n(0.0, sigma);
    Image out = src;
    for (auto& p : out.pixels) p = clamp_u8(p + n(rng));
    return out;
}

// Blends towards white with a smooth random density field.
inline Image add_fog(const Image& src, double intensity, Rng& rng) {
    constexpr int grid = 4;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::array<double, (grid + 1) * (grid + 1)> field{};
    for (auto& v : field) v = u(rng);
    Image out = src;
    for (int y = 0; y < src.height; ++y)
        for (int x = 0; x < src.width; ++x) {
            const double gy = static_cast<double>(y) / std::max(1, src.height - 1) * grid;
            const double gx = static_cast<double>(x) / std::max(1, src.width - 1) * grid;
            const int y0 = std::min(static_cast<int>(gy), grid - 1), x0 = std::min(static_cast<int>(gx), grid - 1);
            const double wy = gy - y0, wx = gx - x0;
            auto f = [&](int yy, int xx) { return field[yy * (grid + 1) + xx]; };
            const double density = (f(y0, x0) * (1 - wx) + f(y0, x0 + 1) * wx) * (1 - wy) +
                                   (f(y0 + 1, x0) * (1 - wx) + f(y0 + 1, x0 + 1) * wx) * wy;
            const double t = intensity * density;
            for (int c = 0; c < src.channels; ++c) out.at(y, x, c) = clamp_u8((1 - t) * src.at(y, x, c) + t * 255.0);
        }
    return out;
}

inline Image brightness_contrast(const Image& src, double alpha, double beta) {
    Image out = src;
    for (auto& p : out.pixels) p = clamp_u8(alpha * p + beta * 255.0);
    return out;
}

// Applies each augmentation with its configured probability, in a fixed order.
// Every decision is drawn from `rng` whether or not the branch fires, so the
// stream position after the call does not depend on which branches applied.
inline Image augment(const Image& src, const AugmentConfig& cfg, Rng& rng,
                     std::array<std::uint8_t, 3> background = {255, 255, 255}) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto fires = [&](double p) { return u(rng) < p; };
    auto between = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };

    Image img = src;
    {
        const bool f = fires(cfg.rotate_p);
        const double angle = between(0.0, 360.0);
        if (f) img = rotate(img, angle, background);
    }
    if (fires(cfg.hflip_p)) img = flip_horizontal(img);
    if (fires(cfg.vflip_p)) img = flip_vertical(img);
    {
        const bool f = fires(cfg.blur_p);
        const double s = between(cfg.blur_sigma_min, cfg.blur_sigma_max);
        if (f) img = gaussian_blur(img, s);
    }
    {
        const bool f = fires(cfg.motion_blur_p);
        const double len = between(cfg.motion_blur_min, cfg.motion_blur_max + 1);
        const double angle = between(0.0, 180.0);
        if (f) img = motion_blur(img, static_cast<int>(len), angle);
    }
    {
        const bool f = fires(cfg.fog_p);
        const double t = between(cfg.fog_min, cfg.fog_max);
        Rng fog_rng(rng());
        if (f) img = add_fog(img, t, fog_rng);
    }
    {
        const bool f = fires(cfg.brightness_contrast_p);
        const double alpha = 1.0 + between(-cfg.contrast_limit, cfg.contrast_limit);
        const double beta = between(-cfg.brightness_limit, cfg.brightness_limit);
        if (f) img = brightness_contrast(img, alpha, beta);
    }
    {
        const bool f = fires(cfg.noise_p);
        const double s = between(cfg.noise_sigma_min, cfg.noise_sigma_max);
        Rng noise_rng(rng());
        if (f) img = add_gaussian_noise(img, s, noise_rng);
    }
    return img;
}

inline nlohmann::ordered_json to_json(const AugmentConfig& a) {
    return {{"rotate_p", a.rotate_p},
            {"hflip_p", a.hflip_p},
            {"vflip_p", a.vflip_p},
            {"noise_p", a.noise_p},
            {"noise_sigma", {a.noise_sigma_min, a.noise_sigma_max}},
            {"blur_p", a.blur_p},
            {"blur_sigma", {a.blur_sigma_min, a.blur_sigma_max}},
            {"motion_blur_p", a.motion_blur_p},
            {"motion_blur_length", {a.motion_blur_min, a.motion_blur_max}},
            {"fog_p", a.fog_p},
            {"fog_intensity", {a.fog_min, a.fog_max}},
            {"brightness_contrast_p", a.brightness_contrast_p},
            {"brightness_limit", a.brightness_limit},
            {"contrast_limit", a.contrast_limit}};
}

inline AugmentConfig augment_config_from_json(const nlohmann::json& j) {
    AugmentConfig a;
    a.rotate_p = j.value("rotate_p", a.rotate_p);
    a.hflip_p = j.value("hflip_p", a.hflip_p);
    a.vflip_p = j.value("vflip_p", a.vflip_p);
    a.noise_p = j.value("noise_p", a.noise_p);
    if (j.contains("noise_sigma")) {
        a.noise_sigma_min = j["noise_sigma"].at(0).get<double>();
        a.noise_sigma_max = j["noise_sigma"].at(1).get<double>();
    }
    a.blur_p = j.value("blur_p", a.blur_p);
    if (j.contains("blur_sigma")) {
        a.blur_sigma_min = j["blur_sigma"].at(0).get<double>();
        a.blur_sigma_max = j["blur_sigma"].at(1).get<double>();
    }
    a.motion_blur_p = j.value("motion_blur_p", a.motion_blur_p);
    if (j.contains("motion_blur_length")) {
        a.motion_blur_min = j["motion_blur_length"].at(0).get<int>();
        a.motion_blur_max = j["motion_blur_length"].at(1).get<int>();
    }
    a.fog_p = j.value("fog_p", a.fog_p);
    if (j.contains("fog_intensity")) {
        a.fog_min = j["fog_intensity"].at(0).get<double>();
        a.fog_max = j["fog_intensity"].at(1).get<double>();
    }
    a.brightness_contrast_p = j.value("brightness_contrast_p", a.brightness_contrast_p);
    a.brightness_limit = j.value("brightness_limit", a.brightness_limit);
    a.contrast_limit = j.value("contrast_limit", a.contrast_limit);
    return a;
}

}  // namespace milbench::synth
