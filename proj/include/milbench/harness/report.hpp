#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "milbench/core/dataset.hpp"
#include "milbench/core/errors.hpp"
#include "milbench/eval/evaluate.hpp"
#include "milbench/eval/metrics.hpp"

namespace milbench::harness {

struct BagFractionRow {
    std::string bag_id;
    std::optional<Label> label;
    std::vector<int> folds;
    std::vector<double> fractions;  // one per fold in which the bag was tested
    double mean = 0.0;
    double std = 0.0;  // population spread across those folds
    double min = 0.0;
    double max = 0.0;
};

struct BagFractionTable {
    std::vector<BagFractionRow> rows;
    double threshold = 0.0;
};

// Per test bag: positive fraction in each fold that tested it, and the
// threshold applied to all of them.
inline BagFractionTable report_bag_fractions(const std::vector<eval::MetricsReport>& reports,
                                             const DatasetManifest* manifest = nullptr) {
    if (reports.empty()) throw DataError("no fold reports to summarize");
    BagFractionTable t;
    std::optional<double> threshold;
    std::map<std::string, BagFractionRow> by_bag;
    for (const auto& r : reports) {
        if (r.method != "sil" || !r.sil_threshold) throw DataError("bag fraction report needs SIL results");
        if (threshold && *threshold != *r.sil_threshold) throw ConsistencyError("folds used different SIL thresholds");
        threshold = r.sil_threshold;
        for (const auto& [id, f] : r.per_bag_positive_fraction) {
            auto& row = by_bag[id];
            row.bag_id = id;
            row.folds.push_back(r.fold_id);
            row.fractions.push_back(f);
        }
    }
    t.threshold = *threshold;
    for (auto& [id, row] : by_bag) {
        if (manifest) row.label = manifest->bag(id).label;
        const double n = static_cast<double>(row.fractions.size());
        row.mean = eval::mean_of(row.fractions);
        double ss = 0.0;
        for (double f : row.fractions) ss += (f - row.mean) * (f - row.mean);
        row.std = std::sqrt(ss / n);
        row.min = *std::min_element(row.fractions.begin(), row.fractions.end());
        row.max = *std::max_element(row.fractions.begin(), row.fractions.end());
        t.rows.push_back(std::move(row));
    }
    return t;
}

inline std::string bag_fraction_csv(const BagFractionTable& t) {
    std::size_t width = 0;
    for (const auto& r : t.rows) width = std::max(width, r.fractions.size());
    std::string out = "bag_id,label";
    for (std::size_t i = 0; i < width; ++i) out += ",fold_" + std::to_string(i) + ",fraction_" + std::to_string(i);
    out += ",mean,std,min,max,threshold\n";
    for (const auto& r : t.rows) {
        out += r.bag_id + "," + (r.label ? std::string(to_string(*r.label)) : std::string());
        for (std::size_t i = 0; i < width; ++i)
            out += i < r.fractions.size() ? "," + std::to_string(r.folds[i]) + "," + eval::format_real(r.fractions[i]) : ",,";
        out += "," + eval::format_real(r.mean) + "," + eval::format_real(r.std) + "," + eval::format_real(r.min) + "," +
               eval::format_real(r.max) + "," + eval::format_real(t.threshold) + "\n";
    }
    return out;
}

// Bar-with-error-bars layout: one series entry per bag plus a threshold line.
inline nlohmann::ordered_json bag_fraction_plot_json(const BagFractionTable& t) {
    nlohmann::ordered_json j;
    j["kind"] = "bag_positive_fraction";
    j["threshold"] = t.threshold;
    auto bags = nlohmann::ordered_json::array();
    for (const auto& r : t.rows) {
        nlohmann::ordered_json b;
        b["bag_id"] = r.bag_id;
        b["label"] = r.label ? nlohmann::ordered_json(std::string(to_string(*r.label))) : nlohmann::ordered_json();
        b["folds"] = r.folds;
        b["fractions"] = r.fractions;
        b["mean"] = r.mean;
        b["error_low"] = r.mean - r.min;
        b["error_high"] = r.max - r.mean;
        b["std"] = r.std;
        bags.push_back(b);
    }
    j["bags"] = bags;
    return j;
}

inline void write_bag_fraction_report(const std::filesystem::path& dir, const BagFractionTable& t) {
    write_text_file(dir / "bag_fractions.csv", bag_fraction_csv(t));
    write_text_file(dir / "bag_fractions.json", bag_fraction_plot_json(t).dump(1) + "\n");
}

}  // namespace milbench::harness
