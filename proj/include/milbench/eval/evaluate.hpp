#pragma once

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "milbench/core/dataset.hpp"
#include "milbench/core/rng.hpp"
#include "milbench/eval/inference.hpp"
#include "milbench/eval/metrics.hpp"
#include "milbench/nn/model.hpp"
#include "milbench/train/data.hpp"

namespace milbench::eval {

// One line of the instance score dump.
struct InstanceRow {
    std::string instance_id;
    std::string bag_id;
    std::string method;
    double score = 0.0;
    double effective_score = 0.0;
    Label majority_predicted_bag_label = Label::negative;
    std::optional<Label> true_label;
    int evaluations = 0;
};

struct FoldEvaluation {
    MetricsReport report;
    std::vector<InstanceRow> rows;
};

// AUC over effective scores when ground truth exists and both classes occur.
inline std::optional<double> instance_auc(const std::vector<InstanceRow>& rows) {
    std::vector<double> s;
    std::vector<int> y;
    for (const auto& r : rows) {
        if (!r.true_label) return std::nullopt;
        s.push_back(r.effective_score);
        y.push_back(to_int(*r.true_label));
    }
    const auto pos = std::count(y.begin(), y.end(), 1);
    if (pos == 0 || pos == static_cast<long>(y.size())) return std::nullopt;
    return compute_auc(s, y);
}

inline std::map<std::string, Label> truths_of(const DatasetManifest& m, const std::vector<std::string>& bag_ids) {
    std::map<std::string, Label> out;
    for (const auto& id : bag_ids) out.emplace(id, m.bag(id).label);
    return out;
}

// Test-time mini-bag draws for a bag depend only on (seed, bag id).
inline Rng test_stream(std::uint64_t seed, const std::string& bag_id) {
    return make_stream(seed, {key_of("test_mini_bags"), key_of(bag_id)});
}

template <typename T>
FoldEvaluation evaluate_abmil(nn::Model<T>& model, const Dataset& ds, const train::InstanceStore& store,
                              const std::vector<std::string>& test_bags, int mini_bag_size, std::uint64_t seed,
                              int coverage = kDefaultCoverage, WeightNormalization norm = WeightNormalization::min_max) {
    FoldEvaluation out;
    auto& rep = out.report;
    rep.method = "abmil";
    rep.mini_bag_size = mini_bag_size;
    const int n_mb = num_test_mini_bags(ds.manifest.max_bag_size(), mini_bag_size, coverage);
    std::size_t total_instances = 0;
    long total_evaluations = 0;
    for (const auto& bag_id : test_bags) {
        const Bag& bag = ds.manifest.bag(bag_id);
        const auto idx = bag_indices(bag, store);
        const auto H = embed_instances(model, store, idx);
        auto rng = test_stream(seed, bag_id);
        const auto inf = abmil_infer_bag(model.attention(), H, bag, n_mb, mini_bag_size, rng, norm);
        rep.bag_predictions[bag_id] = inf.predicted;
        const auto scores = aggregate_bag_scores(bag, inf.records);
        const auto eff = abmil_instance_scores_for_auc(scores);
        std::size_t flagged = 0;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            const auto& s = scores[i];
            out.rows.push_back({s.instance_id, bag_id, "abmil", s.score, eff[i], s.majority_predicted_bag_label,
                                bag.instances[i].true_label, s.evaluations});
            if (s.evaluations == 0) ++rep.uncovered_instances;
            if (s.majority_predicted_bag_label == Label::positive) ++flagged;
            total_evaluations += s.evaluations;
        }
        total_instances += scores.size();
        // Share of instances whose mini-bags mostly voted positive.
        rep.per_bag_positive_fraction[bag_id] = static_cast<double>(flagged) / static_cast<double>(scores.size());
    }
    rep.bag_accuracy = bag_accuracy(rep.bag_predictions, truths_of(ds.manifest, test_bags));
    rep.instance_auc = instance_auc(out.rows);
    rep.mean_instance_coverage = static_cast<double>(total_evaluations) / static_cast<double>(total_instances);
    return out;
}

// Midpoint of the class-mean positive fractions over the validation bags.
template <typename T>
double sil_fold_threshold(nn::Model<T>& model, const Dataset& ds, const train::InstanceStore& store,
                          const std::vector<std::string>& validation_bags) {
    std::vector<double> pos, neg;
    for (const auto& id : validation_bags) {
        const Bag& bag = ds.manifest.bag(id);
        (bag.label == Label::positive ? pos : neg).push_back(sil_score_bag(model, store, bag).fraction);
    }
    return compute_fold_threshold(pos, neg);
}

template <typename T>
FoldEvaluation evaluate_sil(nn::Model<T>& model, const Dataset& ds, const train::InstanceStore& store,
                            const std::vector<std::string>& test_bags, double threshold) {
    FoldEvaluation out;
    auto& rep = out.report;
    rep.method = "sil";
    rep.sil_threshold = threshold;
    for (const auto& bag_id : test_bags) {
        const Bag& bag = ds.manifest.bag(bag_id);
        const auto s = sil_score_bag(model, store, bag);
        const Label pred = sil_bag_predict(s.fraction, threshold);
        rep.bag_predictions[bag_id] = pred;
        rep.per_bag_positive_fraction[bag_id] = s.fraction;
        const std::vector<Label> bag_pred(s.p_positive.size(), pred);
        const auto eff = sil_instance_scores_for_auc(s.p_positive, bag_pred);
        for (std::size_t i = 0; i < eff.size(); ++i)
            out.rows.push_back({bag.instances[i].id, bag_id, "sil", s.p_positive[i], eff[i], pred,
                                bag.instances[i].true_label, 1});
    }
    rep.bag_accuracy = bag_accuracy(rep.bag_predictions, truths_of(ds.manifest, test_bags));
    rep.instance_auc = instance_auc(out.rows);
    rep.mean_instance_coverage = 1.0;
    return out;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline std::string format_real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string instance_rows_csv(const std::vector<InstanceRow>& rows) {
    std::string out = "instance_id,bag_id,method,score,effective_score,majority_predicted_bag_label,true_label,evaluations\n";
    for (const auto& r : rows) {
        out += r.instance_id + "," + r.bag_id + "," + r.method + "," + format_real(r.score) + "," +
               format_real(r.effective_score) + "," + std::string(to_string(r.majority_predicted_bag_label)) + "," +
               (r.true_label ? std::string(to_string(*r.true_label)) : std::string()) + "," + std::to_string(r.evaluations) + "\n";
    }
    return out;
}

inline nlohmann::ordered_json to_json(const MetricsReport& r) {
    nlohmann::ordered_json j;
    j["fold_id"] = r.fold_id;
    j["method"] = r.method;
    j["architecture"] = r.architecture;
    j["mini_bag_size"] = r.mini_bag_size;
    j["bag_accuracy"] = r.bag_accuracy;
    j["instance_auc"] = r.instance_auc ? nlohmann::ordered_json(*r.instance_auc) : nlohmann::ordered_json();
    j["sil_threshold"] = r.sil_threshold ? nlohmann::ordered_json(*r.sil_threshold) : nlohmann::ordered_json();
    j["sil_fold_threshold"] =
        r.sil_fold_threshold ? nlohmann::ordered_json(*r.sil_fold_threshold) : nlohmann::ordered_json();
    j["selected_epoch"] = r.selected_epoch;
    j["uncovered_instances"] = r.uncovered_instances;
    j["mean_instance_coverage"] = r.mean_instance_coverage;
    auto bags = nlohmann::ordered_json::object();
    for (const auto& [id, p] : r.bag_predictions) {
        nlohmann::ordered_json b;
        b["predicted"] = std::string(to_string(p));
        if (auto it = r.per_bag_positive_fraction.find(id); it != r.per_bag_positive_fraction.end())
            b["positive_fraction"] = it->second;
        bags[id] = b;
    }
    j["bags"] = bags;
    return j;
}

inline MetricsReport metrics_report_from_json(const nlohmann::json& j) {
    try {
        MetricsReport r;
        r.fold_id = j.at("fold_id");
        r.method = j.at("method");
        r.architecture = j.value("architecture", "");
        r.mini_bag_size = j.value("mini_bag_size", 0);
        r.bag_accuracy = j.at("bag_accuracy");
        if (!j.at("instance_auc").is_null()) r.instance_auc = j["instance_auc"].get<double>();
        if (!j.at("sil_threshold").is_null()) r.sil_threshold = j["sil_threshold"].get<double>();
        if (j.contains("sil_fold_threshold") && !j["sil_fold_threshold"].is_null())
            r.sil_fold_threshold = j["sil_fold_threshold"].get<double>();
        r.selected_epoch = j.value("selected_epoch", 0);
        r.uncovered_instances = j.value("uncovered_instances", 0);
        r.mean_instance_coverage = j.value("mean_instance_coverage", 0.0);
        for (const auto& [id, b] : j.at("bags").items()) {
            r.bag_predictions[id] = b.at("predicted").get<std::string>() == "positive" ? Label::positive : Label::negative;
            if (b.contains("positive_fraction")) r.per_bag_positive_fraction[id] = b["positive_fraction"].get<double>();
        }
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed metrics report: ") + e.what());
    }
}

inline std::vector<InstanceRow> read_instance_rows(const std::filesystem::path& path) {
    const std::string text = read_text_file(path);
    std::vector<InstanceRow> rows;
    std::size_t pos = text.find('\n');
    if (pos == std::string::npos) throw FormatError("empty score dump " + path.string());
    ++pos;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string::npos) end = text.size();
        const std::string line = text.substr(pos, end - pos);
        pos = end + 1;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::size_t a = 0;
        for (;;) {
            const std::size_t b = line.find(',', a);
            f.push_back(line.substr(a, b == std::string::npos ? std::string::npos : b - a));
            if (b == std::string::npos) break;
            a = b + 1;
        }
        if (f.size() != 8) throw FormatError("bad score dump line in " + path.string());
        InstanceRow r;
        r.instance_id = f[0];
        r.bag_id = f[1];
        r.method = f[2];
        r.score = std::stod(f[3]);
        r.effective_score = std::stod(f[4]);
        r.majority_predicted_bag_label = f[5] == "positive" ? Label::positive : Label::negative;
        if (!f[6].empty()) r.true_label = f[6] == "positive" ? Label::positive : Label::negative;
        r.evaluations = std::stoi(f[7]);
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace milbench::eval
