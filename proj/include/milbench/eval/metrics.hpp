#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "milbench/core/errors.hpp"
#include "milbench/core/types.hpp"

namespace milbench::eval {

inline constexpr int kDefaultCoverage = 10;

// Mini-bags drawn per test bag so the largest bag sees ~coverage evaluations per instance.
inline int num_test_mini_bags(std::size_t max_bag_size, int mini_bag_size, int coverage = kDefaultCoverage) {
    if (max_bag_size == 0 || mini_bag_size <= 0 || coverage <= 0)
        throw ConfigError("num_test_mini_bags needs positive arguments");
    const auto num = static_cast<std::size_t>(coverage) * max_bag_size;
    return static_cast<int>((num + static_cast<std::size_t>(mini_bag_size) - 1) / static_cast<std::size_t>(mini_bag_size));
}

// Strict majority wins; an exact tie goes to positive.
inline Label majority_vote_bag_label(std::span<const Label> predictions) {
    if (predictions.empty()) throw DataError("majority vote over an empty list");
    const auto pos = std::count(predictions.begin(), predictions.end(), Label::positive);
    const auto neg = static_cast<std::ptrdiff_t>(predictions.size()) - pos;
    return neg > pos ? Label::negative : Label::positive;
}

enum class WeightNormalization { min_max, divide_by_max };

// Min-max to [0,1]; a constant vector maps to 0.5 everywhere.
inline std::vector<double> normalize_mini_bag_weights(std::span<const double> w,
                                                      WeightNormalization mode = WeightNormalization::min_max) {
    if (w.empty()) throw DataError("cannot normalize an empty weight vector");
    const auto [lo_it, hi_it] = std::minmax_element(w.begin(), w.end());
    const double lo = *lo_it, hi = *hi_it;
    std::vector<double> out(w.size(), 0.5);
    if (hi == lo) return out;
    for (std::size_t i = 0; i < w.size(); ++i)
        out[i] = mode == WeightNormalization::min_max ? (w[i] - lo) / (hi - lo) : w[i] / hi;
    return out;
}

struct AttentionRecord {
    std::string instance_id;
    int mini_bag_id = 0;
    double weight = 0.0;  // raw or per-mini-bag normalized, depending on stage
    Label mini_bag_predicted_label = Label::negative;
};

struct InstanceScore {
    std::string instance_id;
    double score = 0.0;
    Label majority_predicted_bag_label = Label::negative;
    std::string method;
    int evaluations = 0;  // number of mini-bags that contained the instance
};

// Mode of the mini-bag labels (tie -> positive); score = mean normalized
// weight over the records carrying that label.
inline InstanceScore aggregate_instance_attention(std::span<const AttentionRecord> records) {
    if (records.empty()) throw DataError("no attention records for instance");
    std::vector<Label> labels;
    labels.reserve(records.size());
    for (const auto& r : records) labels.push_back(r.mini_bag_predicted_label);
    InstanceScore s;
    s.instance_id = records.front().instance_id;
    s.method = "abmil";
    s.majority_predicted_bag_label = majority_vote_bag_label(labels);
    s.evaluations = static_cast<int>(records.size());
    double sum = 0.0;
    int n = 0;
    for (const auto& r : records)
        if (r.mini_bag_predicted_label == s.majority_predicted_bag_label) {
            sum += r.weight;
            ++n;
        }
    s.score = sum / n;
    return s;
}

// Detected iff score > threshold, majority label positive and truly positive.
inline bool key_instance_detected(const InstanceScore& s, double threshold, Label true_label) {
    return s.score > threshold && s.majority_predicted_bag_label == Label::positive && true_label == Label::positive;
}

// P(random positive outscores random negative), ties count one half. Computed
// from average ranks, O(n log n).
inline double compute_auc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw DataError("compute_auc: score and label counts differ");
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rank_sum_pos = 0.0;
    std::size_t n_pos = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double avg_rank = (static_cast<double>(i) + static_cast<double>(j) + 1.0) / 2.0;  // 1-based
        for (std::size_t k = i; k < j; ++k)
            if (labels[order[k]] == 1) {
                rank_sum_pos += avg_rank;
                ++n_pos;
            } else if (labels[order[k]] != 0) {
                throw DataError("compute_auc: labels must be 0 or 1");
            }
        i = j;
    }
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) throw DataError("AUC undefined: only one class present");
    const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
    return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

// Instances whose majority mini-bag label is negative can never be detected
// and get effective score 0.
inline std::vector<double> abmil_instance_scores_for_auc(std::span<const InstanceScore> scores) {
    std::vector<double> eff;
    eff.reserve(scores.size());
    for (const auto& s : scores) eff.push_back(s.majority_predicted_bag_label == Label::positive ? s.score : 0.0);
    return eff;
}

// Instances in bags predicted negative get effective score 0.
inline std::vector<double> sil_instance_scores_for_auc(std::span<const double> p_positive,
                                                       std::span<const Label> bag_prediction_of_instance) {
    if (p_positive.size() != bag_prediction_of_instance.size())
        throw DataError("sil_instance_scores_for_auc: length mismatch");
    std::vector<double> eff(p_positive.size());
    for (std::size_t i = 0; i < eff.size(); ++i)
        eff[i] = bag_prediction_of_instance[i] == Label::positive ? p_positive[i] : 0.0;
    return eff;
}

inline double sil_bag_fraction(std::span<const Label> instance_predictions) {
    if (instance_predictions.empty()) throw DataError("bag fraction of an empty bag");
    const auto pos = std::count(instance_predictions.begin(), instance_predictions.end(), Label::positive);
    return static_cast<double>(pos) / static_cast<double>(instance_predictions.size());
}

inline double mean_of(std::span<const double> v) {
    if (v.empty()) throw DataError("mean of an empty list");
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Midpoint between the mean positive-bag and mean negative-bag fractions.
inline double compute_fold_threshold(std::span<const double> pos_bag_fractions, std::span<const double> neg_bag_fractions) {
    if (pos_bag_fractions.empty() || neg_bag_fractions.empty())
        throw DataError("fold threshold needs both positive and negative validation bags");
    return (mean_of(pos_bag_fractions) + mean_of(neg_bag_fractions)) / 2.0;
}

inline constexpr std::size_t kThresholdFolds = 9;

inline double aggregate_thresholds(std::span<const double> fold_thresholds) {
    if (fold_thresholds.size() != kThresholdFolds)
        throw ConfigError("aggregate_thresholds needs exactly 9 fold thresholds, got " +
                          std::to_string(fold_thresholds.size()));
    return mean_of(fold_thresholds);
}

// Positive iff the fraction strictly exceeds the threshold.
inline Label sil_bag_predict(double fraction, double threshold) {
    return fraction > threshold ? Label::positive : Label::negative;
}

inline double bag_accuracy(const std::map<std::string, Label>& predictions, const std::map<std::string, Label>& truths) {
    if (predictions.size() != truths.size()) throw DataError("bag_accuracy: key sets differ");
    if (predictions.empty()) throw DataError("bag_accuracy: no bags");
    std::size_t correct = 0;
    for (const auto& [id, label] : predictions) {
        auto it = truths.find(id);
        if (it == truths.end()) throw DataError("bag_accuracy: no truth for bag " + id);
        if (it->second == label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(predictions.size());
}

// Positive-class F1; 0 when there are no true or predicted positives.
inline double f1_score(std::span<const Label> predicted, std::span<const Label> truth) {
    if (predicted.size() != truth.size()) throw DataError("f1_score: length mismatch");
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        const bool p = predicted[i] == Label::positive, t = truth[i] == Label::positive;
        if (p && t) ++tp;
        if (p && !t) ++fp;
        if (!p && t) ++fn;
    }
    if (tp == 0) return 0.0;
    return 2.0 * tp / (2.0 * tp + fp + fn);
}

struct MetricsReport {
    int fold_id = 0;
    std::string method;
    std::string architecture;
    int mini_bag_size = 0;
    double bag_accuracy = 0.0;
    std::optional<double> instance_auc;
    std::map<std::string, double> per_bag_positive_fraction;
    std::map<std::string, Label> bag_predictions;
    std::optional<double> sil_threshold;
    std::optional<double> sil_fold_threshold;
    int uncovered_instances = 0;
    double mean_instance_coverage = 0.0;
    int selected_epoch = 0;
};

}  // namespace milbench::eval
