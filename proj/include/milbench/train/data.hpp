#pragma once

#include <nlohmann/json.hpp>

#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "milbench/core/dataset.hpp"
#include "milbench/core/errors.hpp"
#include "milbench/core/rng.hpp"
#include "milbench/nn/tensor.hpp"
#include "milbench/train/standardize.hpp"

namespace milbench::train {

// Training-time augmentation on standardized CHW arrays. Quarter-turn
// rotations only, so no interpolation is involved.
struct TrainAugment {
    double hflip_p = 0.5;
    double vflip_p = 0.5;
    double rot90_p = 0.5;
    double noise_p = 0.5;
    double noise_var_min = 10.0;  // pixel units squared
    double noise_var_max = 50.0;

    static TrainAugment none() { return {0.0, 0.0, 0.0, 0.0, 10.0, 50.0}; }
    bool operator==(const TrainAugment&) const = default;
};

inline nlohmann::ordered_json to_json(const TrainAugment& a) {
    return {{"hflip_p", a.hflip_p},
            {"vflip_p", a.vflip_p},
            {"rot90_p", a.rot90_p},
            {"noise_p", a.noise_p},
            {"noise_var", {a.noise_var_min, a.noise_var_max}}};
}

inline TrainAugment train_augment_from_json(const nlohmann::json& j) {
    TrainAugment a;
    a.hflip_p = j.value("hflip_p", a.hflip_p);
    a.vflip_p = j.value("vflip_p", a.vflip_p);
    a.rot90_p = j.value("rot90_p", a.rot90_p);
    a.noise_p = j.value("noise_p", a.noise_p);
    if (j.contains("noise_var")) {
        a.noise_var_min = j["noise_var"].at(0).get<double>();
        a.noise_var_max = j["noise_var"].at(1).get<double>();
    }
    return a;
}

// Standardized CHW float copies of every instance, indexed by position.
class InstanceStore {
public:
    InstanceStore(const Dataset& ds, const Standardizer& st) : height_(ds.manifest.height), width_(ds.manifest.width), st_(st) {
        const std::size_t per = per_item();
        std::size_t n = ds.manifest.instance_count();
        data_.resize(n * per);
        std::size_t i = 0;
        for (const auto& bag : ds.manifest.bags)
            for (const auto& inst : bag.instances) {
                index_.emplace(inst.id, i);
                ids_.push_back(inst.id);
                st.to_chw(ds.image(inst.id), data_.data() + i * per);
                ++i;
            }
    }

    [[nodiscard]] std::size_t index(const std::string& id) const {
        auto it = index_.find(id);
        if (it == index_.end()) throw StructuralError("unknown instance " + id);
        return it->second;
    }
    [[nodiscard]] const std::string& id(std::size_t index) const { return ids_[index]; }
    [[nodiscard]] std::size_t size() const { return ids_.size(); }
    [[nodiscard]] int height() const { return height_; }
    [[nodiscard]] int width() const { return width_; }
    [[nodiscard]] std::size_t per_item() const { return static_cast<std::size_t>(3) * height_ * width_; }
    [[nodiscard]] const float* item(std::size_t index) const { return data_.data() + index * per_item(); }
    [[nodiscard]] const Standardizer& standardizer() const { return st_; }

    // Batch of the given instances, unaugmented.
    template <typename T>
    nn::Tensor<T> batch(std::span<const std::size_t> indices) const {
        nn::Tensor<T> x({static_cast<int>(indices.size()), 3, height_, width_});
        for (std::size_t k = 0; k < indices.size(); ++k) {
            const float* src = item(indices[k]);
            std::copy(src, src + per_item(), x.item(static_cast<int>(k)));
        }
        return x;
    }

    // Batch with per-item augmentation streams keyed by (seed, epoch, stream_base + k).
    template <typename T>
    nn::Tensor<T> augmented_batch(std::span<const std::size_t> indices, const TrainAugment& aug, std::uint64_t seed,
                                  std::uint64_t epoch, std::uint64_t stream_base) const {
        nn::Tensor<T> x({static_cast<int>(indices.size()), 3, height_, width_});
        for (std::size_t k = 0; k < indices.size(); ++k) {
            auto rng = make_stream(seed, {key_of("train_augment"), epoch, stream_base + k});
            augment_item(item(indices[k]), x.item(static_cast<int>(k)), aug, rng);
        }
        return x;
    }

    template <typename T>
    void augment_item(const float* src, T* dst, const TrainAugment& aug, Rng& rng) const {
        std::uniform_real_distribution<double> u(0.0, 1.0);
        const bool hflip = u(rng) < aug.hflip_p;
        const bool vflip = u(rng) < aug.vflip_p;
        const bool rot = u(rng) < aug.rot90_p && height_ == width_;
        const int turns = 1 + static_cast<int>(u(rng) * 3.0) % 3;
        const bool noise = u(rng) < aug.noise_p;
        const double sigma = std::sqrt(aug.noise_var_min + (aug.noise_var_max - aug.noise_var_min) * u(rng));
        const int H = height_, W = width_;
        const std::size_t plane = static_cast<std::size_t>(H) * W;
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    // Output (y, x) reads source (sy, sx) after flips then a CCW quarter-turn count.
                    int sy = y, sx = x;
                    if (rot) {
                        for (int t = 0; t < turns; ++t) {
                            const int ny = sx, nx = W - 1 - sy;
                            sy = ny;
                            sx = nx;
                        }
                    }
                    if (vflip) sy = H - 1 - sy;
                    if (hflip) sx = W - 1 - sx;
                    dst[c * plane + static_cast<std::size_t>(y) * W + x] =
                        static_cast<T>(src[c * plane + static_cast<std::size_t>(sy) * W + sx]);
                }
        if (noise) {
            std::normal_distribution<double> n(0.0, sigma);
            for (int c = 0; c < 3; ++c) {
                const double scale = 1.0 / (255.0 * st_.std[c]);
                for (std::size_t p = 0; p < plane; ++p) dst[c * plane + p] += static_cast<T>(n(rng) * scale);
            }
        }
    }

private:
    int height_, width_;
    Standardizer st_;
    std::vector<float> data_;
    std::vector<std::string> ids_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Every instance labelled with its bag's label.
inline std::unordered_map<std::string, Label> assign_weak_labels(const DatasetManifest& m) {
    std::unordered_map<std::string, Label> out;
    for (const auto& bag : m.bags)
        for (const auto& inst : bag.instances) out.emplace(inst.id, bag.label);
    return out;
}

struct MiniBag {
    std::string parent_bag_id;
    std::vector<std::string> instance_ids;
    Label inherited_label = Label::negative;
};

// Uniform sample without replacement of min(size, |bag|) instances, in the
// bag's original order.
inline MiniBag sample_mini_bag(const Bag& bag, int size, Rng& rng) {
    if (size < 1) throw ConfigError("mini-bag size must be at least 1");
    MiniBag mb;
    mb.parent_bag_id = bag.id;
    mb.inherited_label = bag.label;
    const std::size_t n = bag.instances.size();
    const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(size), n);
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    // Partial Fisher-Yates.
    for (std::size_t i = 0; i < k; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    for (auto i : idx) mb.instance_ids.push_back(bag.instances[i].id);
    return mb;
}

}  // namespace milbench::train
