#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "milbench/core/rng.hpp"
#include "milbench/core/types.hpp"
#include "milbench/eval/metrics.hpp"
#include "milbench/nn/model.hpp"
#include "milbench/train/data.hpp"

namespace milbench::eval {

inline constexpr int kInferenceBatch = 64;

// Embeddings (rows) for the given instance indices, inference mode, chunked.
template <typename T>
nn::Mat<T> embed_instances(nn::Model<T>& model, const train::InstanceStore& store,
                           std::span<const std::size_t> indices, int batch = kInferenceBatch) {
    const int M = model.extractor_config().embedding_dim;
    nn::Mat<T> out(static_cast<Eigen::Index>(indices.size()), M);
    for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(batch)) {
        const std::size_t end = std::min(indices.size(), start + static_cast<std::size_t>(batch));
        const auto x = store.batch<T>(indices.subspan(start, end - start));
        const auto e = model.embed(x, nn::Mode::eval);
        out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(end - start)) = e.matrix();
    }
    return out;
}

struct AbmilBagInference {
    std::string bag_id;
    Label predicted = Label::negative;
    std::vector<Label> mini_bag_labels;
    std::vector<AttentionRecord> records;  // weights normalized per mini-bag
};

// Draws `n_mini_bags` mini-bags from the bag, predicts each from the cached
// embeddings (rows aligned with bag.instances), and majority-votes the bag.
template <typename T>
AbmilBagInference abmil_infer_bag(const nn::AttentionHead<T>& head, const nn::Mat<T>& bag_embeddings, const Bag& bag,
                                  int n_mini_bags, int mini_bag_size, Rng& rng,
                                  WeightNormalization norm = WeightNormalization::min_max) {
    std::unordered_map<std::string, Eigen::Index> row;
    for (std::size_t i = 0; i < bag.instances.size(); ++i) row.emplace(bag.instances[i].id, static_cast<Eigen::Index>(i));
    AbmilBagInference r;
    r.bag_id = bag.id;
    for (int j = 0; j < n_mini_bags; ++j) {
        const auto mb = train::sample_mini_bag(bag, mini_bag_size, rng);
        nn::Mat<T> H(static_cast<Eigen::Index>(mb.instance_ids.size()), bag_embeddings.cols());
        for (std::size_t k = 0; k < mb.instance_ids.size(); ++k) H.row(static_cast<Eigen::Index>(k)) = bag_embeddings.row(row.at(mb.instance_ids[k]));
        const auto pooled = head.pool(H);
        const Label label = head.predict(pooled.embedding) >= T(0.5) ? Label::positive : Label::negative;
        r.mini_bag_labels.push_back(label);
        std::vector<double> w(static_cast<std::size_t>(pooled.weights.size()));
        for (std::size_t k = 0; k < w.size(); ++k) w[k] = static_cast<double>(pooled.weights[static_cast<Eigen::Index>(k)]);
        const auto nw = normalize_mini_bag_weights(w, norm);
        for (std::size_t k = 0; k < nw.size(); ++k) r.records.push_back({mb.instance_ids[k], j, nw[k], label});
    }
    r.predicted = majority_vote_bag_label(r.mini_bag_labels);
    return r;
}

// Groups the records by instance and aggregates them; instances never sampled
// are returned with score 0, majority label negative and zero evaluations.
inline std::vector<InstanceScore> aggregate_bag_scores(const Bag& bag, const std::vector<AttentionRecord>& records) {
    std::unordered_map<std::string, std::vector<AttentionRecord>> by_instance;
    for (const auto& r : records) by_instance[r.instance_id].push_back(r);
    std::vector<InstanceScore> out;
    for (const auto& inst : bag.instances) {
        auto it = by_instance.find(inst.id);
        if (it == by_instance.end()) {
            InstanceScore s;
            s.instance_id = inst.id;
            s.method = "abmil";
            out.push_back(s);
        } else {
            out.push_back(aggregate_instance_attention(it->second));
        }
    }
    return out;
}

// p_positive per instance from the single-instance head.
template <typename T>
std::vector<double> sil_instance_probabilities(nn::Model<T>& model, const train::InstanceStore& store,
                                               std::span<const std::size_t> indices, int batch = kInferenceBatch) {
    std::vector<double> out;
    out.reserve(indices.size());
    for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(batch)) {
        const std::size_t end = std::min(indices.size(), start + static_cast<std::size_t>(batch));
        const auto x = store.batch<T>(indices.subspan(start, end - start));
        const auto e = model.embed(x, nn::Mode::eval);
        const auto logits = model.sil().forward(e, nn::Mode::eval);
        for (int i = 0; i < logits.shape.n; ++i)
            out.push_back(static_cast<double>(nn::sil_softmax(logits.data[2 * i], logits.data[2 * i + 1]).second));
    }
    return out;
}

// Argmax of the two-class softmax; p_positive = 0.5 counts as positive.
inline Label sil_instance_label(double p_positive) { return p_positive >= 0.5 ? Label::positive : Label::negative; }

inline std::vector<std::size_t> bag_indices(const Bag& bag, const train::InstanceStore& store) {
    std::vector<std::size_t> idx;
    idx.reserve(bag.instances.size());
    for (const auto& inst : bag.instances) idx.push_back(store.index(inst.id));
    return idx;
}

struct SilBagScores {
    std::vector<double> p_positive;  // aligned with bag.instances
    double fraction = 0.0;
};

template <typename T>
SilBagScores sil_score_bag(nn::Model<T>& model, const train::InstanceStore& store, const Bag& bag) {
    SilBagScores s;
    s.p_positive = sil_instance_probabilities(model, store, bag_indices(bag, store));
    std::vector<Label> labels;
    for (double p : s.p_positive) labels.push_back(sil_instance_label(p));
    s.fraction = sil_bag_fraction(labels);
    return s;
}

}  // namespace milbench::eval
