#pragma once

#include <algorithm>
#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "milbench/core/errors.hpp"

namespace milbench {

// 0 = negative, 1 = positive everywhere (files, metrics, tensors).
enum class Label : int { negative = 0, positive = 1 };

inline int to_int(Label l) { return static_cast<int>(l); }

inline Label label_from_int(int v) {
    if (v == 0) return Label::negative;
    if (v == 1) return Label::positive;
    throw FormatError("label must be 0 or 1, got " + std::to_string(v));
}

inline std::string_view to_string(Label l) { return l == Label::positive ? "positive" : "negative"; }

struct InstanceInfo {
    std::string id;
    std::optional<Label> true_label;
    // Identifier of the source image the instance was generated from; empty for real data.
    std::string source_id;

    bool operator==(const InstanceInfo&) const = default;
};

struct Bag {
    std::string id;
    Label label = Label::negative;
    std::vector<InstanceInfo> instances;
    // Source split the bag's instances were drawn from ("train", "validation", "test"); empty for real data.
    std::string source_split;

    [[nodiscard]] std::vector<std::string> instance_ids() const {
        std::vector<std::string> ids;
        ids.reserve(instances.size());
        for (const auto& i : instances) ids.push_back(i.id);
        return ids;
    }
    [[nodiscard]] std::size_t size() const { return instances.size(); }

    bool operator==(const Bag&) const = default;
};

struct ChannelStats {
    std::array<double, 3> mean{0.0, 0.0, 0.0};
    std::array<double, 3> std{1.0, 1.0, 1.0};

    bool operator==(const ChannelStats&) const = default;
};

struct DatasetManifest {
    std::string dataset_id;
    int height = 80;
    int width = 80;
    std::vector<Bag> bags;
    // Empty for real data.
    std::string generator_config_hash;
    // Color acceptance rule used by the generator, if any.
    std::string color_predicate;
    // Pixel statistics in [0,1] units over every instance of the dataset.
    ChannelStats channel_stats;

    [[nodiscard]] bool synthetic() const { return !generator_config_hash.empty(); }

    [[nodiscard]] std::size_t instance_count() const {
        std::size_t n = 0;
        for (const auto& b : bags) n += b.size();
        return n;
    }
    [[nodiscard]] std::size_t instance_count(Label label) const {
        std::size_t n = 0;
        for (const auto& b : bags)
            if (b.label == label) n += b.size();
        return n;
    }
    [[nodiscard]] std::size_t max_bag_size() const {
        std::size_t m = 0;
        for (const auto& b : bags) m = std::max(m, b.size());
        return m;
    }
    [[nodiscard]] const Bag& bag(std::string_view id) const {
        for (const auto& b : bags)
            if (b.id == id) return b;
        throw StructuralError("unknown bag id: " + std::string(id));
    }

    bool operator==(const DatasetManifest&) const = default;
};

struct FoldSpec {
    int fold_id = 0;
    std::vector<std::string> train;
    std::vector<std::string> validation;
    std::vector<std::string> test;

    bool operator==(const FoldSpec&) const = default;
};

}  // namespace milbench
