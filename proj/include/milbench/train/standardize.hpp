#pragma once

#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "milbench/core/dataset.hpp"
#include "milbench/core/errors.hpp"
#include "milbench/core/image.hpp"

namespace milbench::train {

// Maps pixel x in channel c to (x/255 - mean[c]) / std[c].
struct Standardizer {
    std::array<double, 3> mean{0.0, 0.0, 0.0};
    std::array<double, 3> std{1.0, 1.0, 1.0};

    [[nodiscard]] double apply(std::uint8_t x, int c) const { return (x / 255.0 - mean[c]) / std[c]; }

    // HWC uint8 -> CHW float.
    template <typename T>
    void to_chw(const Image& img, T* out) const {
        const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
        for (std::size_t p = 0; p < plane; ++p)
            for (int c = 0; c < 3; ++c) out[c * plane + p] = static_cast<T>(apply(img.pixels[p * 3 + c], c));
    }
};

// Running per-channel moments; chunks merge exactly as one pass over the union
// (Chan et al. parallel variance update).
struct ChannelAccumulator {
    std::array<double, 3> mean{0.0, 0.0, 0.0};
    std::array<double, 3> m2{0.0, 0.0, 0.0};
    double count = 0.0;

    void add(const Image& img) {
        ChannelAccumulator local;
        const double n = static_cast<double>(img.pixels.size() / 3);
        if (n == 0) return;
        for (std::size_t p = 0; p < img.pixels.size(); p += 3)
            for (int c = 0; c < 3; ++c) local.mean[c] += img.pixels[p + c] / 255.0;
        for (int c = 0; c < 3; ++c) local.mean[c] /= n;
        for (std::size_t p = 0; p < img.pixels.size(); p += 3)
            for (int c = 0; c < 3; ++c) {
                const double d = img.pixels[p + c] / 255.0 - local.mean[c];
                local.m2[c] += d * d;
            }
        local.count = n;
        merge(local);
    }

    void merge(const ChannelAccumulator& o) {
        if (o.count == 0) return;
        const double total = count + o.count;
        for (int c = 0; c < 3; ++c) {
            const double delta = o.mean[c] - mean[c];
            mean[c] += delta * o.count / total;
            m2[c] += o.m2[c] + delta * delta * count * o.count / total;
        }
        count = total;
    }

    [[nodiscard]] Standardizer finish() const {
        if (count == 0) throw DataError("cannot standardize an empty dataset");
        Standardizer s;
        for (int c = 0; c < 3; ++c) {
            s.mean[c] = mean[c];
            s.std[c] = std::sqrt(m2[c] / count);
            if (!(s.std[c] > 1e-12)) throw DataError("zero standard deviation in channel " + std::to_string(c));
        }
        return s;
    }
};

// Statistics over every instance of the whole dataset.
inline Standardizer standardize(const Dataset& ds) {
    if (ds.manifest.bags.empty()) throw DataError("cannot standardize an empty dataset");
    ChannelAccumulator acc;
    for (const auto& bag : ds.manifest.bags)
        for (const auto& inst : bag.instances) acc.add(ds.image(inst.id));
    return acc.finish();
}

// Same statistics from independently accumulated chunks of bags.
inline Standardizer standardize_chunked(const Dataset& ds, std::size_t bags_per_chunk) {
    ChannelAccumulator total;
    const auto& bags = ds.manifest.bags;
    for (std::size_t start = 0; start < bags.size(); start += bags_per_chunk) {
        ChannelAccumulator chunk;
        for (std::size_t b = start; b < std::min(bags.size(), start + bags_per_chunk); ++b)
            for (const auto& inst : bags[b].instances) chunk.add(ds.image(inst.id));
        total.merge(chunk);
    }
    return total.finish();
}

}  // namespace milbench::train
