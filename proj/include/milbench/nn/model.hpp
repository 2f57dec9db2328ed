#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "milbench/core/errors.hpp"
#include "milbench/core/rng.hpp"
#include "milbench/nn/extractors.hpp"
#include "milbench/nn/heads.hpp"

namespace milbench::nn {

enum class Method { abmil, sil };

inline std::string to_string(Method m) { return m == Method::abmil ? "abmil" : "sil"; }

inline Method method_from_string(const std::string& s) {
    if (s == "abmil") return Method::abmil;
    if (s == "sil") return Method::sil;
    throw ConfigError("unknown method '" + s + "'");
}

// Feature extractor plus the method's head.
template <typename T>
class Model {
public:
    Model(Method method, const FeatureExtractorConfig& fx, int attention_dim = 128)
        : method_(method), fx_(fx), attention_dim_(attention_dim), extractor_(make_extractor<T>(fx)) {
        if (method == Method::abmil)
            attention_ = std::make_unique<AttentionHead<T>>(fx.embedding_dim, attention_dim);
        else
            sil_ = std::make_unique<SilHead<T>>(fx.embedding_dim);
    }

    void init(std::uint64_t seed) {
        auto rng = make_stream(seed, {key_of("model_init")});
        extractor_->init(rng);
        if (attention_) attention_->init(rng);
        if (sil_) sil_->init(rng);
    }

    std::vector<Param<T>*> params() {
        std::vector<Param<T>*> out;
        extractor_->collect(out);
        if (attention_) attention_->collect(out);
        if (sil_) sil_->collect(out);
        return out;
    }

    void zero_grad() {
        for (auto* p : params()) p->zero_grad();
    }

    Tensor<T> embed(const Tensor<T>& images, Mode mode) { return extractor_->forward(images, mode); }
    Tensor<T> embed_backward(const Tensor<T>& dembed) { return extractor_->backward(dembed); }

    [[nodiscard]] Method method() const { return method_; }
    [[nodiscard]] const FeatureExtractorConfig& extractor_config() const { return fx_; }
    [[nodiscard]] int attention_dim() const { return attention_dim_; }
    Sequential<T>& extractor() { return *extractor_; }
    AttentionHead<T>& attention() {
        if (!attention_) throw ConfigError("model has no attention head");
        return *attention_;
    }
    SilHead<T>& sil() {
        if (!sil_) throw ConfigError("model has no single-instance head");
        return *sil_;
    }

private:
    Method method_;
    FeatureExtractorConfig fx_;
    int attention_dim_;
    std::unique_ptr<Sequential<T>> extractor_;
    std::unique_ptr<AttentionHead<T>> attention_;
    std::unique_ptr<SilHead<T>> sil_;
};

// Adam with decoupled weight decay.
template <typename T>
class AdamW {
public:
    AdamW(std::vector<Param<T>*> params, double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
          double eps = 1e-8)
        : lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
        for (auto* p : params)
            if (p->trainable) {
                params_.push_back(p);
                m_.emplace_back(p->size(), 0.0);
                v_.emplace_back(p->size(), 0.0);
            }
    }

    void step() {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto& p = *params_[k];
            auto& m = m_[k];
            auto& v = v_[k];
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double g = static_cast<double>(p.grad[i]);
                m[i] = b1_ * m[i] + (1 - b1_) * g;
                v[i] = b2_ * v[i] + (1 - b2_) * g * g;
                double x = static_cast<double>(p.value[i]) * (1.0 - lr_ * wd_);
                x -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
                p.value[i] = static_cast<T>(x);
            }
        }
    }

    [[nodiscard]] long steps() const { return t_; }

private:
    std::vector<Param<T>*> params_;
    std::vector<std::vector<double>> m_, v_;
    double lr_, wd_, b1_, b2_, eps_;
    long t_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoint file: "MILBCKPT" | u32 version | u64 header bytes | JSON header |
// parameter values in collect() order, float32 little-endian.
// ---------------------------------------------------------------------------
inline constexpr char kCheckpointMagic[8] = {'M', 'I', 'L', 'B', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointInfo {
    std::string method;
    std::string architecture;
    int epoch = 0;
    std::string rng_digest;
    nlohmann::json extra;
};

template <typename T>
void save_checkpoint(const std::filesystem::path& path, Model<T>& model, const CheckpointInfo& info) {
    auto params = model.params();
    nlohmann::ordered_json h;
    h["method"] = to_string(model.method());
    h["architecture"] = to_string(model.extractor_config().architecture);
    h["embedding_dim"] = model.extractor_config().embedding_dim;
    h["attention_dim"] = model.attention_dim();
    h["input_size"] = {model.extractor_config().height, model.extractor_config().width};
    h["width_divisor"] = model.extractor_config().width_divisor;
    h["epoch"] = info.epoch;
    h["rng_digest"] = info.rng_digest;
    auto shapes = nlohmann::ordered_json::array();
    for (auto* p : params) shapes.push_back({{"name", p->name}, {"dims", p->dims}});
    h["params"] = shapes;
    if (!info.extra.is_null()) h["extra"] = info.extra;
    const std::string header = h.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out.write(kCheckpointMagic, 8);
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t hlen = header.size();
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&hlen), sizeof hlen);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    std::vector<float> buf;
    for (auto* p : params) {
        buf.resize(p->size());
        for (std::size_t i = 0; i < p->size(); ++i) buf[i] = static_cast<float>(p->value[i]);
        out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    if (!out) throw IoError("checkpoint write failed: " + path.string());
}

inline nlohmann::json read_checkpoint_header(std::ifstream& in, const std::filesystem::path& path) {
    char magic[8];
    std::uint32_t version = 0;
    std::uint64_t hlen = 0;
    if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw FormatError("not a checkpoint file: " + path.string());
    in.read(reinterpret_cast<char*>(&version), sizeof version);
    in.read(reinterpret_cast<char*>(&hlen), sizeof hlen);
    if (!in || version != kCheckpointVersion || hlen > (1u << 26)) throw FormatError("bad checkpoint header: " + path.string());
    std::string header(hlen, '\0');
    in.read(header.data(), static_cast<std::streamsize>(hlen));
    return nlohmann::json::parse(header);
}

inline nlohmann::json read_checkpoint_header(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    return read_checkpoint_header(in, path);
}

template <typename T>
CheckpointInfo load_checkpoint(const std::filesystem::path& path, Model<T>& model) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    const auto h = read_checkpoint_header(in, path);
    if (h.at("method").get<std::string>() != to_string(model.method()) ||
        h.at("architecture").get<std::string>() != to_string(model.extractor_config().architecture))
        throw FormatError("checkpoint " + path.string() + " was written for a different model");
    auto params = model.params();
    const auto& shapes = h.at("params");
    if (shapes.size() != params.size()) throw FormatError("checkpoint parameter count mismatch");
    std::vector<float> buf;
    for (std::size_t k = 0; k < params.size(); ++k) {
        if (shapes[k].at("dims").get<std::vector<int>>() != params[k]->dims)
            throw FormatError("checkpoint parameter shape mismatch at " + params[k]->name);
        buf.resize(params[k]->size());
        if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float))))
            throw FormatError("truncated checkpoint " + path.string());
        for (std::size_t i = 0; i < buf.size(); ++i) params[k]->value[i] = static_cast<T>(buf[i]);
    }
    CheckpointInfo info;
    info.method = h.at("method");
    info.architecture = h.at("architecture");
    info.epoch = h.at("epoch");
    info.rng_digest = h.value("rng_digest", "");
    if (h.contains("extra")) info.extra = h["extra"];
    return info;
}

}  // namespace milbench::nn
