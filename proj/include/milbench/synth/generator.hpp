#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "milbench/core/dataset.hpp"
#include "milbench/core/errors.hpp"
#include "milbench/core/rng.hpp"
#include "milbench/core/types.hpp"
#include "milbench/synth/augment.hpp"
#include "milbench/synth/color_model.hpp"
#include "milbench/synth/digits.hpp"
#include "milbench/synth/image_ops.hpp"

namespace milbench::synth {

// Where the digit pool comes from when the generator is driven from a config file.
struct SourceSpec {
    std::string kind = "procedural";  // "procedural" or "idx"
    std::size_t procedural_train = 6000;
    std::size_t procedural_test = 6000;
    std::uint64_t procedural_seed = 7;
    std::string train_images, train_labels, test_images, test_labels;  // idx paths

    bool operator==(const SourceSpec&) const = default;
};

struct BagSizeProfile {
    std::string mode = "constant";  // "constant", "list" or "cohort"
    int constant = 200;
    std::vector<int> sizes;         // mode "list": negatives first, then positives
    double cohort_mean = 9300.0;
    double cohort_std = 2500.0;
    int cohort_min = 500;

    bool operator==(const BagSizeProfile&) const = default;
};

struct GeneratorConfig {
    std::string dataset_id = "pap-qmnist";
    int key_digit = 4;
    double key_ratio = 0.2;
    int n_negative_bags = 12;
    int n_positive_bags = 12;
    BagSizeProfile bag_size_profile;
    int height = 80;
    int width = 80;
    AugmentConfig augmentation;
    std::uint64_t master_seed = 0;
    ChannelColorModel color_model;
    // Digits used for non-key instances; empty means every digit but the key digit.
    std::vector<int> nonkey_digits;
    SourceSpec source;

    [[nodiscard]] int bag_count() const { return n_negative_bags + n_positive_bags; }

    [[nodiscard]] std::vector<int> resolved_nonkey_digits() const {
        if (!nonkey_digits.empty()) return nonkey_digits;
        std::vector<int> d;
        for (int i = 0; i < 10; ++i)
            if (i != key_digit) d.push_back(i);
        return d;
    }

    bool operator==(const GeneratorConfig&) const = default;
};

inline nlohmann::ordered_json to_json(const GeneratorConfig& c) {
    nlohmann::ordered_json j;
    j["dataset_id"] = c.dataset_id;
    j["key_digit"] = c.key_digit;
    j["key_ratio"] = c.key_ratio;
    j["n_negative_bags"] = c.n_negative_bags;
    j["n_positive_bags"] = c.n_positive_bags;
    nlohmann::ordered_json prof;
    prof["mode"] = c.bag_size_profile.mode;
    if (c.bag_size_profile.mode == "constant") prof["size"] = c.bag_size_profile.constant;
    if (c.bag_size_profile.mode == "list") prof["sizes"] = c.bag_size_profile.sizes;
    if (c.bag_size_profile.mode == "cohort") {
        prof["mean"] = c.bag_size_profile.cohort_mean;
        prof["std"] = c.bag_size_profile.cohort_std;
        prof["min"] = c.bag_size_profile.cohort_min;
    }
    j["bag_size_profile"] = prof;
    j["image_size"] = {c.height, c.width};
    j["augmentation"] = to_json(c.augmentation);
    j["master_seed"] = c.master_seed;
    j["color_model"] = to_json(c.color_model);
    j["nonkey_digits"] = c.resolved_nonkey_digits();
    nlohmann::ordered_json src;
    src["kind"] = c.source.kind;
    if (c.source.kind == "procedural") {
        src["train"] = c.source.procedural_train;
        src["test"] = c.source.procedural_test;
        src["seed"] = c.source.procedural_seed;
    } else {
        src["train_images"] = c.source.train_images;
        src["train_labels"] = c.source.train_labels;
        src["test_images"] = c.source.test_images;
        src["test_labels"] = c.source.test_labels;
    }
    j["source"] = src;
    return j;
}

inline GeneratorConfig generator_config_from_json(const nlohmann::json& j) {
    try {
        GeneratorConfig c;
        c.dataset_id = j.value("dataset_id", c.dataset_id);
        c.key_digit = j.value("key_digit", c.key_digit);
        c.key_ratio = j.value("key_ratio", c.key_ratio);
        c.n_negative_bags = j.value("n_negative_bags", c.n_negative_bags);
        c.n_positive_bags = j.value("n_positive_bags", c.n_positive_bags);
        if (j.contains("bag_size_profile")) {
            const auto& p = j["bag_size_profile"];
            auto& prof = c.bag_size_profile;
            prof.mode = p.value("mode", prof.mode);
            prof.constant = p.value("size", prof.constant);
            if (p.contains("sizes")) prof.sizes = p["sizes"].get<std::vector<int>>();
            prof.cohort_mean = p.value("mean", prof.cohort_mean);
            prof.cohort_std = p.value("std", prof.cohort_std);
            prof.cohort_min = p.value("min", prof.cohort_min);
        }
        if (j.contains("image_size")) {
            c.height = j["image_size"].at(0).get<int>();
            c.width = j["image_size"].at(1).get<int>();
        }
        if (j.contains("augmentation")) c.augmentation = augment_config_from_json(j["augmentation"]);
        c.master_seed = j.value("master_seed", c.master_seed);
        if (j.contains("color_model")) c.color_model = color_model_from_json(j["color_model"]);
        if (j.contains("nonkey_digits")) c.nonkey_digits = j["nonkey_digits"].get<std::vector<int>>();
        if (j.contains("source")) {
            const auto& s = j["source"];
            c.source.kind = s.value("kind", c.source.kind);
            c.source.procedural_train = s.value("train", c.source.procedural_train);
            c.source.procedural_test = s.value("test", c.source.procedural_test);
            c.source.procedural_seed = s.value("seed", c.source.procedural_seed);
            c.source.train_images = s.value("train_images", "");
            c.source.train_labels = s.value("train_labels", "");
            c.source.test_images = s.value("test_images", "");
            c.source.test_labels = s.value("test_labels", "");
        }
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed generator config: ") + e.what());
    }
}

// Hex FNV-1a of the canonical JSON form.
inline std::string config_hash(const GeneratorConfig& c) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(to_json(c).dump())));
    return buf;
}

// Per-bag sizes, negatives first.
inline std::vector<int> resolve_bag_sizes(const GeneratorConfig& c) {
    const auto& p = c.bag_size_profile;
    const int n = c.bag_count();
    std::vector<int> sizes;
    if (p.mode == "constant") {
        sizes.assign(static_cast<std::size_t>(n), p.constant);
    } else if (p.mode == "list") {
        if (static_cast<int>(p.sizes.size()) != n)
            throw ConfigError("bag_size_profile list has " + std::to_string(p.sizes.size()) + " entries for " +
                              std::to_string(n) + " bags");
        sizes = p.sizes;
    } else if (p.mode == "cohort") {
        auto rng = make_stream(c.master_seed, {key_of("bag_sizes")});
        std::normal_distribution<double> dist(p.cohort_mean, p.cohort_std);
        for (int i = 0; i < n; ++i) sizes.push_back(std::max(p.cohort_min, static_cast<int>(std::lround(dist(rng)))));
    } else {
        throw ConfigError("unknown bag_size_profile mode '" + p.mode + "'");
    }
    for (int s : sizes)
        if (s < 1) throw ConfigError("bag sizes must be positive");
    return sizes;
}

inline int key_count(double key_ratio, int bag_size) {
    return static_cast<int>(std::lround(key_ratio * bag_size));
}

// Per class: the first half of the bags draw from the train source, a sixth
// from validation, the rest from test (6/2/4 for twelve bags).
inline std::vector<std::string> source_split_assignment(int n_bags_in_class) {
    const int n_train = static_cast<int>(std::lround(n_bags_in_class / 2.0));
    const int n_val = static_cast<int>(std::lround(n_bags_in_class / 6.0));
    std::vector<std::string> out;
    for (int i = 0; i < n_bags_in_class; ++i)
        out.push_back(i < n_train ? "train" : (i < n_train + n_val ? "validation" : "test"));
    return out;
}

inline void validate(const GeneratorConfig& c) {
    if (c.key_digit < 0 || c.key_digit > 9) throw ConfigError("key_digit must be 0..9");
    if (!(c.key_ratio > 0.0 && c.key_ratio < 1.0)) throw ConfigError("key_ratio must lie in (0,1)");
    if (c.n_negative_bags < 1 || c.n_positive_bags < 1) throw ConfigError("need at least one bag per class");
    if (c.height < kDigitSize || c.width < kDigitSize) throw ConfigError("image size must be at least 28x28");
    for (int d : c.resolved_nonkey_digits())
        if (d == c.key_digit || d < 0 || d > 9) throw ConfigError("nonkey_digits must exclude the key digit");
    validate(c.color_model);
    const auto sizes = resolve_bag_sizes(c);
    for (int b = c.n_negative_bags; b < c.bag_count(); ++b)
        if (key_count(c.key_ratio, sizes[b]) < 1)
            throw ConfigError("key_ratio * bag_size rounds to zero for positive bag " + std::to_string(b));
}

inline std::string bag_id_for(int index) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "bag%02d", index);
    return buf;
}

inline std::string instance_id_for(const std::string& bag_id, int index) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "_i%05d", index);
    return bag_id + buf;
}

// One resized, colourised and augmented instance.
inline Image render_instance(const DigitImage& src, const GeneratorConfig& c, Rng& rng) {
    const auto color = sample_color_triple(c.color_model, rng);
    const Image big = resize_bilinear(src.gray, c.height, c.width);
    return augment(colorize(big, color), c.augmentation, rng);
}

// Builds the bag dataset. Bags 0..n_neg-1 are negative, the rest positive.
// Source digits are handed out per split from a seeded permutation so no
// source image is used twice within a split; per-bag work then draws from a
// stream keyed by (master_seed, bag_id), independent of generation order.
inline Dataset compose_bags(const GeneratorConfig& c, const SourceSplits& splits) {
    validate(c);
    const auto sizes = resolve_bag_sizes(c);
    const auto nonkey = c.resolved_nonkey_digits();
    auto is_nonkey = [&](int d) { return std::find(nonkey.begin(), nonkey.end(), d) != nonkey.end(); };

    struct Plan {
        std::string id;
        Label label;
        std::string split;
        int size;
        int keys;
        std::vector<const DigitImage*> sources;  // keys first
    };
    std::vector<Plan> plans;
    const auto neg_split = source_split_assignment(c.n_negative_bags);
    const auto pos_split = source_split_assignment(c.n_positive_bags);
    for (int b = 0; b < c.bag_count(); ++b) {
        const bool positive = b >= c.n_negative_bags;
        Plan p;
        p.id = bag_id_for(b);
        p.label = positive ? Label::positive : Label::negative;
        p.split = positive ? pos_split[b - c.n_negative_bags] : neg_split[b];
        p.size = sizes[b];
        p.keys = positive ? key_count(c.key_ratio, p.size) : 0;
        plans.push_back(std::move(p));
    }

    for (const char* split : {"train", "validation", "test"}) {
        const auto& set = splits.get(split);
        std::vector<const DigitImage*> keys, others;
        for (const auto& d : set) {
            if (d.digit == c.key_digit)
                keys.push_back(&d);
            else if (is_nonkey(d.digit))
                others.push_back(&d);
        }
        auto rng = make_stream(c.master_seed, {key_of("source_order"), key_of(split)});
        std::shuffle(keys.begin(), keys.end(), rng);
        std::shuffle(others.begin(), others.end(), rng);
        std::size_t next_key = 0, next_other = 0;
        for (auto& p : plans) {
            if (p.split != split) continue;
            const auto n_other = static_cast<std::size_t>(p.size - p.keys);
            if (next_key + p.keys > keys.size() || next_other + n_other > others.size())
                throw DataError(std::string("source pool exhausted in split '") + split + "' at bag " + p.id);
            for (int k = 0; k < p.keys; ++k) p.sources.push_back(keys[next_key++]);
            for (std::size_t k = 0; k < n_other; ++k) p.sources.push_back(others[next_other++]);
        }
    }

    Dataset ds;
    auto& m = ds.manifest;
    m.dataset_id = c.dataset_id;
    m.height = c.height;
    m.width = c.width;
    m.generator_config_hash = config_hash(c);
    m.color_predicate = c.color_model.accept_predicate_id;
    for (const auto& p : plans) {
        auto rng = make_stream(c.master_seed, {key_of("bag"), key_of(p.id)});
        std::vector<std::size_t> order(p.sources.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), rng);
        Bag bag;
        bag.id = p.id;
        bag.label = p.label;
        bag.source_split = p.split;
        for (std::size_t i = 0; i < order.size(); ++i) {
            const std::size_t src_index = order[i];
            const DigitImage& src = *p.sources[src_index];
            InstanceInfo inst;
            inst.id = instance_id_for(p.id, static_cast<int>(i));
            inst.true_label = static_cast<int>(src_index) < p.keys ? Label::positive : Label::negative;
            inst.source_id = src.id;
            ds.images.emplace(inst.id, render_instance(src, c, rng));
            bag.instances.push_back(std::move(inst));
        }
        m.bags.push_back(std::move(bag));
    }
    m.channel_stats = compute_channel_stats(m, ds.images);
    validate_manifest(m);
    return ds;
}

inline SourcePool load_source_pool(const SourceSpec& s) {
    if (s.kind == "procedural") return procedural_pool(s.procedural_train, s.procedural_test, s.procedural_seed);
    if (s.kind == "idx")
        return {load_idx(s.train_images, s.train_labels, "train"), load_idx(s.test_images, s.test_labels, "test")};
    throw ConfigError("unknown source kind '" + s.kind + "'");
}

// Full generation from a config: load/render the pool, split it, compose bags.
inline Dataset generate_dataset(const GeneratorConfig& c) {
    const auto pool = load_source_pool(c.source);
    const auto splits = split_source_pool(pool, c.master_seed);
    return compose_bags(c, splits);
}

}  // namespace milbench::synth
