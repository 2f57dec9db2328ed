#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <string>

#include "milbench/core/errors.hpp"
#include "milbench/nn/extractors.hpp"
#include "milbench/nn/model.hpp"
#include "milbench/train/data.hpp"

namespace milbench::train {

struct Hyperparameters {
    double learning_rate;
    double weight_decay;
};

// Learning rate and weight decay per (method, architecture).
inline Hyperparameters default_hyperparameters(nn::Method method, nn::Architecture arch) {
    using nn::Architecture;
    if (method == nn::Method::abmil) {
        switch (arch) {
            case Architecture::lenet: return {5e-5, 1e-6};
            case Architecture::resnet18: return {5e-6, 1e-5};
            case Architecture::squeezenet: return {5e-5, 1e-5};
        }
    }
    switch (arch) {
        case Architecture::lenet: return {1e-4, 1e-4};
        case Architecture::resnet18:
        case Architecture::squeezenet: return {1e-4, 1e-6};
    }
    return {1e-4, 1e-4};
}

inline int default_max_epochs(nn::Method method) { return method == nn::Method::abmil ? 1500 : 150; }

inline constexpr int kPaperMiniBagSizes[] = {500, 1200, 2500};

struct TrainConfig {
    nn::Method method = nn::Method::abmil;
    nn::Architecture architecture = nn::Architecture::lenet;
    std::optional<double> learning_rate;
    std::optional<double> weight_decay;
    std::optional<int> max_epochs;
    int mini_bag_size = 500;
    int sil_batch_size = 56;
    int selection_window = 15;
    // SIL validation F1: "mini_bag" scores validation mini-bags (sized by
    // mini_bag_size) by the fraction rule, "bag" does the same on whole bags,
    // "instance" scores every instance against its weak label.
    std::string sil_f1_level = "mini_bag";
    std::uint64_t seed = 0;
    int embedding_dim = 500;
    int attention_dim = 128;
    int width_divisor = 1;
    // Validation mini-bags per bag follow the test-time coverage formula.
    int validation_coverage = 10;
    TrainAugment augmentation;
    bool keep_all_checkpoints = true;

    [[nodiscard]] double lr() const {
        return learning_rate.value_or(default_hyperparameters(method, architecture).learning_rate);
    }
    [[nodiscard]] double wd() const {
        return weight_decay.value_or(default_hyperparameters(method, architecture).weight_decay);
    }
    [[nodiscard]] int epochs() const { return max_epochs.value_or(default_max_epochs(method)); }

    [[nodiscard]] nn::FeatureExtractorConfig extractor(int height, int width) const {
        nn::FeatureExtractorConfig fx;
        fx.architecture = architecture;
        fx.embedding_dim = embedding_dim;
        fx.height = height;
        fx.width = width;
        fx.width_divisor = width_divisor;
        return fx;
    }
};

inline void validate(const TrainConfig& c) {
    if (!(c.lr() > 0.0) || c.wd() < 0.0) throw ConfigError("learning rate must be positive and weight decay nonnegative");
    if (c.epochs() < 1) throw ConfigError("max_epochs must be positive");
    if (c.epochs() > default_max_epochs(c.method))
        throw ConfigError("max_epochs exceeds the cap of " + std::to_string(default_max_epochs(c.method)) + " for " +
                          nn::to_string(c.method));
    if (c.mini_bag_size < 1 || c.sil_batch_size < 1 || c.selection_window < 1 || c.validation_coverage < 1)
        throw ConfigError("sizes and windows must be positive");
    if (c.embedding_dim < 1 || c.attention_dim < 1) throw ConfigError("embedding and attention dims must be positive");
    if (c.sil_f1_level != "mini_bag" && c.sil_f1_level != "bag" && c.sil_f1_level != "instance")
        throw ConfigError("sil_f1_level must be 'mini_bag', 'bag' or 'instance'");
}

// With resolve_defaults false, unset rates and epoch caps stay unset so the
// config can be reapplied to another method or architecture.
inline nlohmann::ordered_json to_json(const TrainConfig& c, bool resolve_defaults = true) {
    nlohmann::ordered_json j;
    j["method"] = nn::to_string(c.method);
    j["architecture"] = nn::to_string(c.architecture);
    if (resolve_defaults || c.learning_rate) j["learning_rate"] = c.lr();
    if (resolve_defaults || c.weight_decay) j["weight_decay"] = c.wd();
    if (resolve_defaults || c.max_epochs) j["max_epochs"] = c.epochs();
    j["mini_bag_size"] = c.mini_bag_size;
    j["sil_batch_size"] = c.sil_batch_size;
    j["selection_window"] = c.selection_window;
    j["sil_f1_level"] = c.sil_f1_level;
    j["seed"] = c.seed;
    j["embedding_dim"] = c.embedding_dim;
    j["attention_dim"] = c.attention_dim;
    j["width_divisor"] = c.width_divisor;
    j["validation_coverage"] = c.validation_coverage;
    j["augmentation"] = to_json(c.augmentation);
    j["keep_all_checkpoints"] = c.keep_all_checkpoints;
    return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
    try {
        if (j.contains("method")) c.method = nn::method_from_string(j["method"].get<std::string>());
        if (j.contains("architecture")) c.architecture = nn::architecture_from_string(j["architecture"].get<std::string>());
        if (j.contains("learning_rate")) c.learning_rate = j["learning_rate"].get<double>();
        if (j.contains("weight_decay")) c.weight_decay = j["weight_decay"].get<double>();
        if (j.contains("max_epochs")) c.max_epochs = j["max_epochs"].get<int>();
        c.mini_bag_size = j.value("mini_bag_size", c.mini_bag_size);
        c.sil_batch_size = j.value("sil_batch_size", c.sil_batch_size);
        c.selection_window = j.value("selection_window", c.selection_window);
        c.sil_f1_level = j.value("sil_f1_level", c.sil_f1_level);
        c.seed = j.value("seed", c.seed);
        c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
        c.attention_dim = j.value("attention_dim", c.attention_dim);
        c.width_divisor = j.value("width_divisor", c.width_divisor);
        c.validation_coverage = j.value("validation_coverage", c.validation_coverage);
        if (j.contains("augmentation")) c.augmentation = train_augment_from_json(j["augmentation"]);
        c.keep_all_checkpoints = j.value("keep_all_checkpoints", c.keep_all_checkpoints);
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed train config: ") + e.what());
    }
}

}  // namespace milbench::train
