#pragma once

#include <memory>
#include <string>

#include "milbench/core/errors.hpp"
#include "milbench/nn/layers.hpp"

namespace milbench::nn {

enum class Architecture { lenet, resnet18, squeezenet };

inline std::string to_string(Architecture a) {
    switch (a) {
        case Architecture::lenet: return "lenet";
        case Architecture::resnet18: return "resnet18-style";
        case Architecture::squeezenet: return "squeezenet-style";
    }
    return "?";
}

inline Architecture architecture_from_string(const std::string& s) {
    if (s == "lenet") return Architecture::lenet;
    if (s == "resnet18-style" || s == "resnet18") return Architecture::resnet18;
    if (s == "squeezenet-style" || s == "squeezenet") return Architecture::squeezenet;
    throw ConfigError("unknown architecture '" + s + "'");
}

struct FeatureExtractorConfig {
    Architecture architecture = Architecture::lenet;
    int embedding_dim = 500;
    int height = 80;
    int width = 80;
    // Channel-count divisor for the ResNet/SqueezeNet topologies (1 = published widths).
    int width_divisor = 1;

    bool operator==(const FeatureExtractorConfig&) const = default;
};

namespace detail {

template <typename T>
void lenet(Sequential<T>& net, const FeatureExtractorConfig& cfg) {
    net.template add<Conv2d<T>>(3, 20, 5)
        .template add<ReLU<T>>()
        .template add<MaxPool2d<T>>(2, 2)
        .template add<Conv2d<T>>(20, 50, 5)
        .template add<ReLU<T>>()
        .template add<MaxPool2d<T>>(2, 2)
        .template add<Flatten<T>>();
    const Shape s = net.output_shape({1, 3, cfg.height, cfg.width});
    net.template add<Linear<T>>(s.c, cfg.embedding_dim).template add<ReLU<T>>();
}

template <typename T>
void resnet18(Sequential<T>& net, const FeatureExtractorConfig& cfg) {
    const int d = cfg.width_divisor;
    const int w0 = 64 / d;
    net.template add<Conv2d<T>>(3, w0, 7, 2, 3, false)
        .template add<BatchNorm2d<T>>(w0)
        .template add<ReLU<T>>()
        .template add<MaxPool2d<T>>(3, 2, 1);
    int in = w0;
    const int widths[] = {64 / d, 128 / d, 256 / d, 512 / d};
    for (int stage = 0; stage < 4; ++stage) {
        const int out = widths[stage];
        net.template add<BasicBlock<T>>(in, out, stage == 0 ? 1 : 2);
        net.template add<BasicBlock<T>>(out, out, 1);
        in = out;
    }
    net.template add<GlobalAvgPool<T>>()
        .template add<Flatten<T>>()
        .template add<Linear<T>>(in, cfg.embedding_dim)
        .template add<ReLU<T>>();
}

// SqueezeNet 1.1 feature stack.
template <typename T>
void squeezenet(Sequential<T>& net, const FeatureExtractorConfig& cfg) {
    const int d = cfg.width_divisor;
    auto f = [&](int in, int s, int e) { net.template add<Fire<T>>(in / d, s / d, e / d, e / d); };
    net.template add<Conv2d<T>>(3, 64 / d, 3, 2)
        .template add<ReLU<T>>()
        .template add<MaxPool2d<T>>(3, 2, 0, true);
    f(64, 16, 64);
    f(128, 16, 64);
    net.template add<MaxPool2d<T>>(3, 2, 0, true);
    f(128, 32, 128);
    f(256, 32, 128);
    net.template add<MaxPool2d<T>>(3, 2, 0, true);
    f(256, 48, 192);
    f(384, 48, 192);
    f(384, 64, 256);
    f(512, 64, 256);
    net.template add<GlobalAvgPool<T>>()
        .template add<Flatten<T>>()
        .template add<Linear<T>>(512 / d, cfg.embedding_dim)
        .template add<ReLU<T>>();
}

}  // namespace detail

// Image -> M-dimensional embedding. Input is N x 3 x H x W, standardized.
template <typename T>
std::unique_ptr<Sequential<T>> make_extractor(const FeatureExtractorConfig& cfg) {
    if (cfg.embedding_dim <= 0) throw ConfigError("embedding_dim must be positive");
    if (cfg.width_divisor < 1 || 16 % cfg.width_divisor != 0) throw ConfigError("width_divisor must divide 16");
    auto net = std::make_unique<Sequential<T>>();
    switch (cfg.architecture) {
        case Architecture::lenet: detail::lenet(*net, cfg); break;
        case Architecture::resnet18: detail::resnet18(*net, cfg); break;
        case Architecture::squeezenet: detail::squeezenet(*net, cfg); break;
    }
    const Shape out = net->output_shape({1, 3, cfg.height, cfg.width});
    if (out.c != cfg.embedding_dim || out.h != 1 || out.w != 1)
        throw ConfigError("extractor output does not match embedding_dim");
    return net;
}

}  // namespace milbench::nn
