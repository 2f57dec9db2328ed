#pragma once

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "milbench/core/dataset.hpp"
#include "milbench/core/errors.hpp"
#include "milbench/core/folds.hpp"
#include "milbench/core/rng.hpp"
#include "milbench/eval/evaluate.hpp"
#include "milbench/harness/mosaic.hpp"
#include "milbench/harness/report.hpp"
#include "milbench/synth/generator.hpp"
#include "milbench/train/config.hpp"
#include "milbench/train/standardize.hpp"
#include "milbench/train/trainer.hpp"

namespace milbench::harness {

namespace fs = std::filesystem;

inline constexpr const char* kDeviceEnv = "MILBENCH_DEVICE";

// Only the portable CPU path exists; anything else is a configuration error.
inline std::string selected_device() {
    const char* v = std::getenv(kDeviceEnv);
    if (v == nullptr || *v == '\0' || std::string(v) == "cpu") return "cpu";
    throw ConfigError(std::string(kDeviceEnv) + "=" + v + " is not available; only 'cpu' is supported");
}

using Logger = std::function<void(const std::string&)>;

struct Combination {
    nn::Method method = nn::Method::abmil;
    nn::Architecture architecture = nn::Architecture::lenet;
    int mini_bag_size = 0;  // 0 for SIL

    [[nodiscard]] std::string name() const {
        return nn::to_string(method) + "-" + nn::to_string(architecture) + "-" +
               (method == nn::Method::abmil ? std::to_string(mini_bag_size) : std::string("na"));
    }
};

struct ExperimentSpec {
    std::optional<fs::path> dataset_path;
    std::optional<synth::GeneratorConfig> generator;
    bool write_generated_dataset = false;
    std::optional<fs::path> folds_path;
    std::vector<nn::Method> methods{nn::Method::abmil, nn::Method::sil};
    std::vector<nn::Architecture> architectures{nn::Architecture::lenet};
    std::vector<int> mini_bag_sizes{500};
    std::vector<int> folds{0, 1, 2, 3, 4, 5, 6, 7, 8};
    fs::path output_root = "runs";
    std::uint64_t seed = 0;
    train::TrainConfig train;
    // Per-method train overrides, e.g. {"sil": {"learning_rate": 1e-3}}.
    nlohmann::json method_overrides = nlohmann::json::object();
    int coverage = eval::kDefaultCoverage;
    eval::WeightNormalization weight_normalization = eval::WeightNormalization::min_max;
    bool export_mosaics = true;
    bool mosaics_for_negative_bags = false;
    MosaicSpec mosaic;

    [[nodiscard]] std::vector<Combination> combinations() const {
        std::vector<Combination> out;
        for (auto m : methods)
            for (auto a : architectures) {
                if (m == nn::Method::sil) {
                    out.push_back({m, a, 0});
                    continue;
                }
                for (int mb : mini_bag_sizes) out.push_back({m, a, mb});
            }
        return out;
    }
};

inline void validate(const ExperimentSpec& s) {
    if (!s.dataset_path && !s.generator) throw ConfigError("experiment needs a dataset path or a generator config");
    if (s.methods.empty() || s.architectures.empty()) throw ConfigError("methods and architectures must be nonempty");
    if (s.folds.empty()) throw ConfigError("at least one fold is required");
    for (int f : s.folds)
        if (f < 0 || f >= kFoldCount) throw ConfigError("fold id " + std::to_string(f) + " is out of range 0..8");
    for (int mb : s.mini_bag_sizes)
        if (mb < 1) throw ConfigError("mini-bag sizes must be positive");
    if (std::find(s.methods.begin(), s.methods.end(), nn::Method::abmil) != s.methods.end() && s.mini_bag_sizes.empty())
        throw ConfigError("abmil needs at least one mini-bag size");
    if (s.coverage < 1) throw ConfigError("coverage must be positive");
    validate(s.mosaic);
}

inline nlohmann::ordered_json to_json(const ExperimentSpec& s) {
    nlohmann::ordered_json j;
    if (s.dataset_path) j["dataset"] = s.dataset_path->string();
    if (s.generator) j["generator"] = synth::to_json(*s.generator);
    j["write_generated_dataset"] = s.write_generated_dataset;
    if (s.folds_path) j["folds_file"] = s.folds_path->string();
    auto methods = nlohmann::ordered_json::array();
    for (auto m : s.methods) methods.push_back(nn::to_string(m));
    j["methods"] = methods;
    auto archs = nlohmann::ordered_json::array();
    for (auto a : s.architectures) archs.push_back(nn::to_string(a));
    j["architectures"] = archs;
    j["mini_bag_sizes"] = s.mini_bag_sizes;
    j["folds"] = s.folds;
    j["output_root"] = s.output_root.string();
    j["seed"] = s.seed;
    j["train"] = train::to_json(s.train, false);
    j["method_overrides"] = s.method_overrides;
    j["coverage"] = s.coverage;
    j["weight_normalization"] = s.weight_normalization == eval::WeightNormalization::min_max ? "min_max" : "divide_by_max";
    j["export_mosaics"] = s.export_mosaics;
    j["mosaics_for_negative_bags"] = s.mosaics_for_negative_bags;
    j["mosaic"] = to_json(s.mosaic);
    return j;
}

inline ExperimentSpec experiment_spec_from_json(const nlohmann::json& j, ExperimentSpec s = {}) {
    try {
        if (j.contains("dataset")) s.dataset_path = j["dataset"].get<std::string>();
        if (j.contains("generator")) s.generator = synth::generator_config_from_json(j["generator"]);
        s.write_generated_dataset = j.value("write_generated_dataset", s.write_generated_dataset);
        if (j.contains("folds_file")) s.folds_path = j["folds_file"].get<std::string>();
        if (j.contains("methods")) {
            s.methods.clear();
            for (const auto& m : j["methods"]) s.methods.push_back(nn::method_from_string(m.get<std::string>()));
        }
        if (j.contains("architectures")) {
            s.architectures.clear();
            for (const auto& a : j["architectures"]) s.architectures.push_back(nn::architecture_from_string(a.get<std::string>()));
        }
        if (j.contains("mini_bag_sizes")) s.mini_bag_sizes = j["mini_bag_sizes"].get<std::vector<int>>();
        if (j.contains("folds")) s.folds = j["folds"].get<std::vector<int>>();
        if (j.contains("output_root")) s.output_root = j["output_root"].get<std::string>();
        s.seed = j.value("seed", s.seed);
        if (j.contains("train")) s.train = train::train_config_from_json(j["train"], s.train);
        if (j.contains("method_overrides")) s.method_overrides = j["method_overrides"];
        s.coverage = j.value("coverage", s.coverage);
        if (j.contains("weight_normalization")) {
            const auto w = j["weight_normalization"].get<std::string>();
            if (w == "min_max") s.weight_normalization = eval::WeightNormalization::min_max;
            else if (w == "divide_by_max") s.weight_normalization = eval::WeightNormalization::divide_by_max;
            else throw ConfigError("unknown weight normalization '" + w + "'");
        }
        s.export_mosaics = j.value("export_mosaics", s.export_mosaics);
        s.mosaics_for_negative_bags = j.value("mosaics_for_negative_bags", s.mosaics_for_negative_bags);
        if (j.contains("mosaic")) s.mosaic = mosaic_spec_from_json(j["mosaic"], s.mosaic);
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed experiment config: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// Shared state for all jobs of one experiment.
// ---------------------------------------------------------------------------
struct PreparedData {
    Dataset ds;
    std::optional<train::InstanceStore> store;
    std::vector<FoldSpec> folds;
    double key_ratio = 0.0;

    [[nodiscard]] const std::string& dataset_id() const { return ds.manifest.dataset_id; }
    [[nodiscard]] const FoldSpec& fold(int id) const {
        for (const auto& f : folds)
            if (f.fold_id == id) return f;
        throw ConfigError("fold " + std::to_string(id) + " is not defined");
    }
};

// Share of key instances among the instances of positive bags.
inline double observed_key_ratio(const DatasetManifest& m) {
    std::size_t key = 0, total = 0;
    for (const auto& bag : m.bags) {
        if (bag.label != Label::positive) continue;
        total += bag.instances.size();
        for (const auto& inst : bag.instances)
            if (inst.true_label == Label::positive) ++key;
    }
    return total == 0 ? 0.0 : static_cast<double>(key) / static_cast<double>(total);
}

inline fs::path dataset_dir(const ExperimentSpec& s, const std::string& dataset_id) { return s.output_root / dataset_id; }
inline fs::path combination_dir(const ExperimentSpec& s, const std::string& dataset_id, const Combination& c) {
    return dataset_dir(s, dataset_id) / c.name();
}
inline fs::path fold_dir(const ExperimentSpec& s, const std::string& dataset_id, const Combination& c, int fold_id) {
    return combination_dir(s, dataset_id, c) / ("fold" + std::to_string(fold_id));
}

inline PreparedData prepare(const ExperimentSpec& spec, const Logger& log = {}) {
    validate(spec);
    PreparedData p;
    if (spec.dataset_path) {
        if (log) log("loading dataset " + spec.dataset_path->string());
        p.ds = load_dataset(*spec.dataset_path);
    } else {
        if (log) log("generating dataset " + spec.generator->dataset_id);
        p.ds = synth::generate_dataset(*spec.generator);
        if (spec.write_generated_dataset) write_dataset(p.ds, dataset_dir(spec, p.dataset_id()) / "data");
    }
    const auto dir = dataset_dir(spec, p.dataset_id());
    fs::create_directories(dir);
    if (spec.folds_path) {
        p.folds = read_folds(*spec.folds_path);
    } else {
        p.folds = make_folds(p.ds.manifest, spec.seed);
    }
    for (const auto& f : p.folds) validate_fold(f, p.ds.manifest);
    write_folds(dir / "folds.json", p.folds, spec.seed);
    p.key_ratio = observed_key_ratio(p.ds.manifest);
    p.store.emplace(p.ds, train::standardize(p.ds));
    return p;
}

inline std::uint64_t job_seed(const ExperimentSpec& s, std::string_view stage, const Combination& c, int fold_id) {
    return derive_seed(s.seed, {key_of(stage), key_of(c.name()), static_cast<std::uint64_t>(fold_id)});
}

inline train::TrainConfig train_config_for(const ExperimentSpec& s, const Combination& c, int fold_id) {
    train::TrainConfig cfg = s.train;
    cfg.method = c.method;
    cfg.architecture = c.architecture;
    const auto key = nn::to_string(c.method);
    if (s.method_overrides.contains(key)) cfg = train::train_config_from_json(s.method_overrides[key], cfg);
    if (c.method == nn::Method::abmil) cfg.mini_bag_size = c.mini_bag_size;
    cfg.seed = job_seed(s, "train", c, fold_id);
    train::validate(cfg);
    return cfg;
}

inline train::TrainResult run_training(const PreparedData& p, const ExperimentSpec& s, const Combination& c, int fold_id,
                                       const Logger& log = {}) {
    const auto cfg = train_config_for(s, c, fold_id);
    const auto dir = fold_dir(s, p.dataset_id(), c, fold_id);
    fs::create_directories(dir);
    nlohmann::ordered_json snap;
    snap["combination"] = c.name();
    snap["fold_id"] = fold_id;
    snap["dataset_id"] = p.dataset_id();
    snap["generator_config_hash"] = p.ds.manifest.generator_config_hash;
    snap["train"] = train::to_json(cfg);
    write_text_file(dir / "config.json", snap.dump(1) + "\n");
    train::EpochCallback cb;
    if (log)
        cb = [&](const train::EpochLog& e) {
            char buf[160];
            std::snprintf(buf, sizeof buf, "%s fold%d epoch %d loss %.5f val %.4f (%.1fs)", c.name().c_str(), fold_id,
                          e.epoch, e.train_loss, e.validation_metric, e.seconds);
            log(buf);
        };
    const auto r = train::train_model<float>(train::TrainSplit::from(p.fold(fold_id)), p.ds, *p.store, cfg, dir, cb);
    nlohmann::ordered_json tr;
    tr["selected_epoch"] = r.selected_epoch;
    tr["metric"] = r.metric_name;
    tr["value"] = r.selected_metric;
    tr["seconds"] = r.seconds;
    write_text_file(dir / "train_result.json", tr.dump(1) + "\n");
    return r;
}

inline nlohmann::json read_json_file(const fs::path& path) {
    try {
        return nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("invalid JSON in " + path.string() + ": " + e.what());
    }
}

inline nn::Model<float> load_selected_model(const PreparedData& p, const ExperimentSpec& s, const Combination& c,
                                            int fold_id, int* selected_epoch = nullptr) {
    const auto dir = fold_dir(s, p.dataset_id(), c, fold_id);
    if (!fs::exists(dir / "selection.json")) throw StructuralError("no trained model in " + dir.string());
    const auto sel = read_json_file(dir / "selection.json");
    const int epoch = sel.at("epoch").get<int>();
    if (selected_epoch) *selected_epoch = epoch;
    return train::load_trained_model<float>(train::checkpoint_path(dir, epoch), train_config_for(s, c, fold_id),
                                            p.ds.manifest.height, p.ds.manifest.width);
}

// Threshold from this fold's validation bags only; cached in the fold directory.
inline double sil_fold_threshold(const PreparedData& p, const ExperimentSpec& s, const Combination& c, int fold_id) {
    auto model = load_selected_model(p, s, c, fold_id);
    const double t = eval::sil_fold_threshold(model, p.ds, *p.store, p.fold(fold_id).validation);
    nlohmann::ordered_json j;
    j["fold_threshold"] = t;
    write_text_file(fold_dir(s, p.dataset_id(), c, fold_id) / "threshold.json", j.dump(1) + "\n");
    return t;
}

// All nine fold thresholds give the defined aggregate; a partial run uses the
// plain mean of the folds it has.
inline double combine_fold_thresholds(const std::vector<double>& t) {
    return t.size() == eval::kThresholdFolds ? eval::aggregate_thresholds(t) : eval::mean_of(t);
}

inline eval::FoldEvaluation run_evaluation(const PreparedData& p, const ExperimentSpec& s, const Combination& c,
                                           int fold_id, std::optional<double> sil_threshold = std::nullopt,
                                           std::optional<double> sil_fold_threshold_value = std::nullopt) {
    int epoch = 0;
    auto model = load_selected_model(p, s, c, fold_id, &epoch);
    const auto& test = p.fold(fold_id).test;
    eval::FoldEvaluation ev;
    if (c.method == nn::Method::abmil) {
        ev = eval::evaluate_abmil(model, p.ds, *p.store, test, c.mini_bag_size, job_seed(s, "test", c, fold_id),
                                  s.coverage, s.weight_normalization);
    } else {
        if (!sil_threshold) throw ConfigError("SIL evaluation needs the aggregated threshold");
        ev = eval::evaluate_sil(model, p.ds, *p.store, test, *sil_threshold);
        ev.report.sil_fold_threshold = sil_fold_threshold_value;
    }
    ev.report.fold_id = fold_id;
    ev.report.architecture = nn::to_string(c.architecture);
    ev.report.mini_bag_size = c.mini_bag_size;
    ev.report.selected_epoch = epoch;

    const auto dir = fold_dir(s, p.dataset_id(), c, fold_id);
    write_text_file(dir / "metrics.json", eval::to_json(ev.report).dump(1) + "\n");
    write_text_file(dir / "scores.csv", eval::instance_rows_csv(ev.rows));
    if (s.export_mosaics) {
        std::map<std::string, std::vector<ScoredInstance>> by_bag;
        for (const auto& r : ev.rows) by_bag[r.bag_id].emplace_back(r.instance_id, r.score);
        for (const auto& [bag_id, scored] : by_bag) {
            const bool positive = ev.report.bag_predictions.at(bag_id) == Label::positive;
            if (positive || s.mosaics_for_negative_bags)
                export_mosaic(dir / "mosaics" / (bag_id + ".png"), bag_id, scored, p.ds, s.mosaic);
        }
    }
    return ev;
}

// ---------------------------------------------------------------------------
// Summary
// ---------------------------------------------------------------------------
struct SummaryRow {
    std::string dataset_id;
    std::string method;
    std::string architecture;
    int mini_bag_size = 0;
    double key_ratio = 0.0;
    int fold_id = 0;
    double bag_accuracy = 0.0;
    std::optional<double> instance_auc;
    std::optional<double> sil_threshold;
    double wall_time_seconds = 0.0;
};

struct Failure {
    std::string combination;
    int fold_id = -1;  // -1: the whole combination
    std::string stage;
    std::string message;
};

struct ExperimentResult {
    std::string dataset_id;
    std::vector<SummaryRow> rows;
    std::vector<Failure> failures;
    std::map<std::string, std::vector<eval::MetricsReport>> reports;  // by combination name
    std::map<std::string, double> sil_thresholds;                     // by combination name
};

inline std::string optional_real(const std::optional<double>& v) { return v ? eval::format_real(*v) : std::string(); }

inline std::string summary_csv(const std::vector<SummaryRow>& rows, bool include_wall_time = true) {
    std::string out = "dataset_id,method,architecture,mini_bag_size,key_ratio,fold_id,bag_accuracy,instance_auc,sil_threshold";
    out += include_wall_time ? ",wall_time_seconds\n" : "\n";
    for (const auto& r : rows) {
        out += r.dataset_id + "," + r.method + "," + r.architecture + "," +
               (r.method == "abmil" ? std::to_string(r.mini_bag_size) : std::string()) + "," +
               eval::format_real(r.key_ratio) + "," + std::to_string(r.fold_id) + "," + eval::format_real(r.bag_accuracy) +
               "," + optional_real(r.instance_auc) + "," + optional_real(r.sil_threshold);
        out += include_wall_time ? "," + eval::format_real(r.wall_time_seconds) + "\n" : "\n";
    }
    return out;
}

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;  // sample standard deviation; 0 for a single fold
    int n = 0;
};

inline MeanStd mean_std(const std::vector<double>& v) {
    MeanStd m;
    m.n = static_cast<int>(v.size());
    if (v.empty()) return m;
    m.mean = eval::mean_of(v);
    if (v.size() > 1) {
        double ss = 0.0;
        for (double x : v) ss += (x - m.mean) * (x - m.mean);
        m.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    return m;
}

// One line per combination: mean and standard deviation over its folds.
inline std::string aggregate_csv(const std::vector<SummaryRow>& rows) {
    std::map<std::string, std::vector<const SummaryRow*>> groups;
    std::vector<std::string> order;
    for (const auto& r : rows) {
        const auto key = r.method + "|" + r.architecture + "|" + std::to_string(r.mini_bag_size);
        if (!groups.count(key)) order.push_back(key);
        groups[key].push_back(&r);
    }
    std::string out =
        "dataset_id,method,architecture,mini_bag_size,key_ratio,folds,bag_accuracy_mean,bag_accuracy_std,"
        "instance_auc_mean,instance_auc_std,sil_threshold\n";
    for (const auto& key : order) {
        const auto& g = groups[key];
        std::vector<double> acc, auc;
        for (const auto* r : g) {
            acc.push_back(r->bag_accuracy);
            if (r->instance_auc) auc.push_back(*r->instance_auc);
        }
        const auto a = mean_std(acc);
        const auto u = mean_std(auc);
        const auto& f = *g.front();
        out += f.dataset_id + "," + f.method + "," + f.architecture + "," +
               (f.method == "abmil" ? std::to_string(f.mini_bag_size) : std::string()) + "," +
               eval::format_real(f.key_ratio) + "," + std::to_string(a.n) + "," + eval::format_real(a.mean) + "," +
               eval::format_real(a.std) + "," + (u.n ? eval::format_real(u.mean) : std::string()) + "," +
               (u.n ? eval::format_real(u.std) : std::string()) + "," + optional_real(f.sil_threshold) + "\n";
    }
    return out;
}

inline void write_failures(const fs::path& path, const std::vector<Failure>& failures) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& f : failures)
        arr.push_back({{"combination", f.combination}, {"fold_id", f.fold_id}, {"stage", f.stage}, {"message", f.message}});
    write_text_file(path, arr.dump(1) + "\n");
}

// Cross-validation: all training first, then the SIL threshold pass over the
// validation bags of every fold, then test evaluation. A failing stage is
// recorded and the remaining jobs continue.
inline ExperimentResult run_experiment(const ExperimentSpec& spec, const Logger& log = {}) {
    (void)selected_device();
    const auto p = prepare(spec, log);
    ExperimentResult out;
    out.dataset_id = p.dataset_id();
    const auto dir = dataset_dir(spec, p.dataset_id());
    write_text_file(dir / "experiment.json", to_json(spec).dump(1) + "\n");

    for (const auto& c : spec.combinations()) {
        std::map<int, double> train_seconds;
        for (int f : spec.folds) {
            try {
                train_seconds[f] = run_training(p, spec, c, f, log).seconds;
            } catch (const Error& e) {
                out.failures.push_back({c.name(), f, "train", e.what()});
                if (log) log(c.name() + " fold" + std::to_string(f) + " training failed: " + e.what());
            }
        }
        std::optional<double> threshold;
        std::map<int, double> fold_thresholds;
        if (c.method == nn::Method::sil) {
            std::vector<double> ts;
            for (const auto& [f, secs] : train_seconds) {
                try {
                    fold_thresholds[f] = sil_fold_threshold(p, spec, c, f);
                    ts.push_back(fold_thresholds[f]);
                } catch (const Error& e) {
                    out.failures.push_back({c.name(), f, "threshold", e.what()});
                }
            }
            if (ts.empty()) {
                out.failures.push_back({c.name(), -1, "threshold", "no fold thresholds available"});
                continue;
            }
            threshold = combine_fold_thresholds(ts);
            out.sil_thresholds[c.name()] = *threshold;
        }
        for (const auto& [f, secs] : train_seconds) {
            if (c.method == nn::Method::sil && !fold_thresholds.count(f)) continue;
            try {
                const auto t0 = std::chrono::steady_clock::now();
                std::optional<double> ft;
                if (fold_thresholds.count(f)) ft = fold_thresholds[f];
                const auto ev = run_evaluation(p, spec, c, f, threshold, ft);
                const double eval_secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                out.reports[c.name()].push_back(ev.report);
                out.rows.push_back({p.dataset_id(), nn::to_string(c.method), nn::to_string(c.architecture),
                                    c.mini_bag_size, p.key_ratio, f, ev.report.bag_accuracy, ev.report.instance_auc,
                                    threshold, secs + eval_secs});
                if (log) {
                    char buf[160];
                    std::snprintf(buf, sizeof buf, "%s fold%d accuracy %.4f auc %s", c.name().c_str(), f,
                                  ev.report.bag_accuracy, optional_real(ev.report.instance_auc).c_str());
                    log(buf);
                }
            } catch (const Error& e) {
                out.failures.push_back({c.name(), f, "evaluate", e.what()});
            }
        }
        if (c.method == nn::Method::sil && !out.reports[c.name()].empty())
            write_bag_fraction_report(combination_dir(spec, p.dataset_id(), c),
                                      report_bag_fractions(out.reports[c.name()], &p.ds.manifest));
    }
    write_text_file(dir / "summary.csv", summary_csv(out.rows));
    write_text_file(dir / "summary_aggregate.csv", aggregate_csv(out.rows));
    write_failures(dir / "failures.json", out.failures);
    return out;
}

}  // namespace milbench::harness
