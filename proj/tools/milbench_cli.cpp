// Command-line front end: dataset generation, folds, training, evaluation,
// cross-validation, mosaics and bag-fraction reports.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "milbench/core/dataset.hpp"
#include "milbench/core/errors.hpp"
#include "milbench/core/folds.hpp"
#include "milbench/eval/evaluate.hpp"
#include "milbench/harness/experiment.hpp"
#include "milbench/harness/mosaic.hpp"
#include "milbench/harness/report.hpp"
#include "milbench/synth/generator.hpp"

namespace fs = std::filesystem;
using namespace milbench;

namespace {

enum ExitCode { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kDivergence = 4 };

bool g_quiet = false;

void log_line(const std::string& msg) {
    if (!g_quiet) std::cerr << "[milbench] " << msg << "\n";
}

nlohmann::json load_config(const std::string& path) {
    if (path.empty()) return nlohmann::json::object();
    if (!fs::exists(path)) throw ConfigError("config file not found: " + path);
    try {
        return nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config " + path + " is not valid JSON: " + e.what());
    }
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------
struct GenerateArgs {
    std::string config, out, dataset_id;
    std::optional<std::uint64_t> seed;
    std::optional<double> key_ratio;
    std::optional<int> key_digit, bag_size, height, width, negatives, positives;
    std::vector<int> nonkey_digits;
    bool no_augment = false;
};

int run_generate(const GenerateArgs& a) {
    auto cfg = synth::generator_config_from_json(load_config(a.config));
    if (!a.dataset_id.empty()) cfg.dataset_id = a.dataset_id;
    if (a.seed) cfg.master_seed = *a.seed;
    if (a.key_ratio) cfg.key_ratio = *a.key_ratio;
    if (a.key_digit) cfg.key_digit = *a.key_digit;
    if (a.bag_size) {
        cfg.bag_size_profile.mode = "constant";
        cfg.bag_size_profile.constant = *a.bag_size;
    }
    if (a.height) cfg.height = *a.height;
    if (a.width) cfg.width = *a.width;
    if (a.negatives) cfg.n_negative_bags = *a.negatives;
    if (a.positives) cfg.n_positive_bags = *a.positives;
    if (!a.nonkey_digits.empty()) cfg.nonkey_digits = a.nonkey_digits;
    if (a.no_augment) cfg.augmentation = synth::AugmentConfig::none();
    if (a.out.empty()) throw ConfigError("generate needs --out");
    log_line("generating " + cfg.dataset_id + " (" + std::to_string(cfg.bag_count()) + " bags)");
    const auto ds = synth::generate_dataset(cfg);
    write_dataset(ds, a.out);
    write_text_file(fs::path(a.out) / "generator_config.json", synth::to_json(cfg).dump(1) + "\n");
    std::cout << "wrote " << ds.manifest.instance_count() << " instances in " << ds.manifest.bags.size() << " bags to "
              << a.out << "\n";
    return kOk;
}

// ---------------------------------------------------------------------------
// folds
// ---------------------------------------------------------------------------
struct FoldsArgs {
    std::string config, dataset, out;
    std::optional<std::uint64_t> seed;
};

int run_folds(const FoldsArgs& a) {
    const auto j = load_config(a.config);
    const std::string dataset = !a.dataset.empty() ? a.dataset : j.value("dataset", std::string());
    if (dataset.empty()) throw ConfigError("folds needs --dataset");
    const std::uint64_t seed = a.seed.value_or(j.value("seed", std::uint64_t{0}));
    const std::string out = !a.out.empty() ? a.out : j.value("out", (fs::path(dataset) / "folds.json").string());
    const auto m = load_manifest(dataset);
    const auto folds = make_folds(m, seed);
    write_folds(out, folds, seed);
    for (const auto& f : folds) {
        std::cout << "fold " << f.fold_id << " test:";
        for (const auto& id : f.test) std::cout << " " << id;
        std::cout << "\n";
    }
    std::cout << "wrote " << out << "\n";
    return kOk;
}

// ---------------------------------------------------------------------------
// train / evaluate / crossval share the experiment spec and its overrides
// ---------------------------------------------------------------------------
struct ExperimentArgs {
    std::string config, dataset, generator, output_root, folds_file, sil_f1;
    std::vector<std::string> methods, architectures;
    std::vector<int> mini_bag_sizes, folds;
    std::optional<std::uint64_t> seed;
    std::optional<int> epochs, window, batch_size, coverage, width_divisor;
    std::optional<double> lr, wd, threshold;
    bool no_mosaics = false;
    bool negative_mosaics = false;
};

void add_experiment_options(CLI::App* app, ExperimentArgs& a) {
    app->add_option("--config", a.config, "Experiment config (JSON)");
    app->add_option("--dataset", a.dataset, "Dataset directory");
    app->add_option("--generator", a.generator, "Generator config used when no dataset directory is given");
    app->add_option("--output-root", a.output_root, "Root directory for run outputs");
    app->add_option("--folds-file", a.folds_file, "Use these folds instead of deriving them from --seed");
    app->add_option("--method", a.methods, "abmil and/or sil")->check(CLI::IsMember({"abmil", "sil"}));
    app->add_option("--arch", a.architectures, "lenet, resnet18-style, squeezenet-style");
    app->add_option("--mini-bag", a.mini_bag_sizes, "ABMIL mini-bag sizes");
    app->add_option("--fold", a.folds, "Fold ids (0-8)");
    app->add_option("--seed", a.seed, "Experiment seed (folds, initialization, sampling)");
    app->add_option("--epochs", a.epochs, "Maximum epochs");
    app->add_option("--lr", a.lr, "Learning rate");
    app->add_option("--wd", a.wd, "Weight decay");
    app->add_option("--window", a.window, "Checkpoint selection window");
    app->add_option("--batch-size", a.batch_size, "SIL mini-batch size");
    app->add_option("--sil-f1", a.sil_f1, "SIL validation F1 level")->check(CLI::IsMember({"mini_bag", "bag", "instance"}));
    app->add_option("--coverage", a.coverage, "Target test evaluations per instance");
    app->add_option("--width-divisor", a.width_divisor, "Channel divisor for the wide extractors");
    app->add_flag("--no-mosaics", a.no_mosaics, "Skip mosaic export");
    app->add_flag("--negative-mosaics", a.negative_mosaics, "Also export mosaics for negative-predicted bags");
}

harness::ExperimentSpec build_spec(const ExperimentArgs& a) {
    auto spec = harness::experiment_spec_from_json(load_config(a.config));
    if (!a.dataset.empty()) {
        spec.dataset_path = a.dataset;
        spec.generator.reset();
    }
    if (!a.generator.empty()) {
        spec.generator = synth::generator_config_from_json(load_config(a.generator));
        if (a.dataset.empty()) spec.dataset_path.reset();
    }
    if (!a.output_root.empty()) spec.output_root = a.output_root;
    if (!a.folds_file.empty()) spec.folds_path = a.folds_file;
    if (!a.methods.empty()) {
        spec.methods.clear();
        for (const auto& m : a.methods) spec.methods.push_back(nn::method_from_string(m));
    }
    if (!a.architectures.empty()) {
        spec.architectures.clear();
        for (const auto& s : a.architectures) spec.architectures.push_back(nn::architecture_from_string(s));
    }
    if (!a.mini_bag_sizes.empty()) spec.mini_bag_sizes = a.mini_bag_sizes;
    if (!a.folds.empty()) spec.folds = a.folds;
    if (a.seed) spec.seed = *a.seed;
    // Flag overrides beat both the shared and the per-method config values.
    nlohmann::json flags = nlohmann::json::object();
    if (a.epochs) flags["max_epochs"] = *a.epochs;
    if (a.lr) flags["learning_rate"] = *a.lr;
    if (a.wd) flags["weight_decay"] = *a.wd;
    if (a.window) flags["selection_window"] = *a.window;
    if (a.batch_size) flags["sil_batch_size"] = *a.batch_size;
    if (!a.sil_f1.empty()) flags["sil_f1_level"] = a.sil_f1;
    if (a.width_divisor) flags["width_divisor"] = *a.width_divisor;
    spec.train = train::train_config_from_json(flags, spec.train);
    for (const char* m : {"abmil", "sil"})
        if (spec.method_overrides.contains(m)) spec.method_overrides[m].update(flags);
    if (a.coverage) spec.coverage = *a.coverage;
    if (a.no_mosaics) spec.export_mosaics = false;
    if (a.negative_mosaics) spec.mosaics_for_negative_bags = true;
    harness::validate(spec);
    return spec;
}

int run_train(const ExperimentArgs& a) {
    (void)harness::selected_device();
    const auto spec = build_spec(a);
    const auto p = harness::prepare(spec, log_line);
    for (const auto& c : spec.combinations())
        for (int f : spec.folds) {
            const auto r = harness::run_training(p, spec, c, f, log_line);
            std::printf("%s fold%d selected epoch %d %s %.6f (%.1fs)\n", c.name().c_str(), f, r.selected_epoch,
                        r.metric_name.c_str(), r.selected_metric, r.seconds);
        }
    return kOk;
}

int run_evaluate(const ExperimentArgs& a) {
    (void)harness::selected_device();
    const auto spec = build_spec(a);
    const auto p = harness::prepare(spec, log_line);
    for (const auto& c : spec.combinations()) {
        std::optional<double> threshold = a.threshold;
        std::map<int, double> fold_thresholds;
        if (c.method == nn::Method::sil) {
            // Every trained fold contributes its validation threshold.
            std::vector<double> ts;
            for (int f = 0; f < kFoldCount; ++f) {
                if (!fs::exists(harness::fold_dir(spec, p.dataset_id(), c, f) / "selection.json")) continue;
                fold_thresholds[f] = harness::sil_fold_threshold(p, spec, c, f);
                ts.push_back(fold_thresholds[f]);
            }
            if (!threshold) {
                if (ts.empty()) throw DataError("no trained SIL folds for " + c.name());
                threshold = harness::combine_fold_thresholds(ts);
                if (ts.size() != eval::kThresholdFolds)
                    log_line("threshold from " + std::to_string(ts.size()) + " of 9 folds");
            }
        }
        for (int f : spec.folds) {
            std::optional<double> ft;
            if (fold_thresholds.count(f)) ft = fold_thresholds[f];
            const auto ev = harness::run_evaluation(p, spec, c, f, threshold, ft);
            std::printf("%s fold%d bag_accuracy %.4f instance_auc %s", c.name().c_str(), f, ev.report.bag_accuracy,
                        harness::optional_real(ev.report.instance_auc).c_str());
            if (threshold) std::printf(" sil_threshold %.6f", *threshold);
            std::printf("\n");
        }
    }
    return kOk;
}

int run_crossval(const ExperimentArgs& a) {
    const auto spec = build_spec(a);
    const auto r = harness::run_experiment(spec, log_line);
    std::cout << harness::aggregate_csv(r.rows);
    for (const auto& f : r.failures)
        std::cerr << "failed: " << f.combination << " fold " << f.fold_id << " (" << f.stage << "): " << f.message << "\n";
    std::cout << "summary: " << (harness::dataset_dir(spec, r.dataset_id) / "summary.csv").string() << "\n";
    return r.failures.empty() ? kOk : kOther;
}

// ---------------------------------------------------------------------------
// mosaic
// ---------------------------------------------------------------------------
struct MosaicArgs {
    std::string config, scores, dataset, out;
    std::vector<std::string> bags;
    std::optional<int> k, rows, cols, cell;
    std::optional<std::uint64_t> seed;
    bool include_negative = false;
};

int run_mosaic(const MosaicArgs& a) {
    const auto j = load_config(a.config);
    const std::string scores = !a.scores.empty() ? a.scores : j.value("scores", std::string());
    const std::string dataset = !a.dataset.empty() ? a.dataset : j.value("dataset", std::string());
    if (scores.empty() || dataset.empty()) throw ConfigError("mosaic needs --scores and --dataset");
    std::string out = !a.out.empty() ? a.out : j.value("out", std::string());
    if (out.empty()) out = (fs::path(scores).parent_path() / "mosaics").string();
    auto spec = j.contains("mosaic") ? harness::mosaic_spec_from_json(j["mosaic"]) : harness::MosaicSpec{};
    if (a.k) spec.k = *a.k;
    if (a.rows) spec.rows = *a.rows;
    if (a.cols) spec.cols = *a.cols;
    if (a.cell) spec.cell_height = spec.cell_width = *a.cell;
    if ((a.k && !a.rows && !a.cols) || spec.rows * spec.cols != spec.k) {
        int r = 1;
        while ((r + 1) * (r + 1) <= spec.k) ++r;
        while (spec.k % r != 0) --r;
        spec.rows = r;
        spec.cols = spec.k / r;
    }
    const bool include_negative = a.include_negative || j.value("include_negative", false);
    // The seed has no effect on mosaics; accepted for a uniform interface.
    (void)a.seed;

    const auto ds = load_dataset(dataset);
    const auto rows = eval::read_instance_rows(scores);
    std::map<std::string, std::vector<harness::ScoredInstance>> by_bag;
    std::map<std::string, Label> predicted;
    for (const auto& r : rows) {
        by_bag[r.bag_id].emplace_back(r.instance_id, r.score);
        predicted[r.bag_id] = r.majority_predicted_bag_label;
    }
    // An ABMIL bag's prediction lives in metrics.json; fall back to the rows.
    const auto metrics = fs::path(scores).parent_path() / "metrics.json";
    if (fs::exists(metrics)) predicted = eval::metrics_report_from_json(harness::read_json_file(metrics)).bag_predictions;
    std::vector<std::string> bags = a.bags;
    if (bags.empty())
        for (const auto& [id, lab] : predicted)
            if (lab == Label::positive || include_negative) bags.push_back(id);
    for (const auto& id : bags) {
        if (!by_bag.count(id)) throw StructuralError("no scores for bag " + id);
        const auto path = fs::path(out) / (id + ".png");
        harness::export_mosaic(path, id, by_bag[id], ds, spec);
        std::cout << "wrote " << path.string() << "\n";
    }
    return kOk;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------
struct ReportArgs {
    std::string config, combination_dir, dataset, out;
    std::optional<std::uint64_t> seed;
};

int run_report(const ReportArgs& a) {
    const auto j = load_config(a.config);
    const std::string dir = !a.combination_dir.empty() ? a.combination_dir : j.value("combination_dir", std::string());
    if (dir.empty()) throw ConfigError("report needs --combination-dir");
    const std::string dataset = !a.dataset.empty() ? a.dataset : j.value("dataset", std::string());
    const std::string out = !a.out.empty() ? a.out : j.value("out", dir);
    (void)a.seed;
    std::vector<eval::MetricsReport> reports;
    for (int f = 0; f < kFoldCount; ++f) {
        const auto path = fs::path(dir) / ("fold" + std::to_string(f)) / "metrics.json";
        if (fs::exists(path)) reports.push_back(eval::metrics_report_from_json(harness::read_json_file(path)));
    }
    if (reports.empty()) throw StructuralError("no fold metrics under " + dir);
    std::optional<DatasetManifest> manifest;
    if (!dataset.empty()) manifest = load_manifest(dataset);
    const auto table = harness::report_bag_fractions(reports, manifest ? &*manifest : nullptr);
    fs::create_directories(out);
    harness::write_bag_fraction_report(out, table);
    std::cout << harness::bag_fraction_csv(table);
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"milbench: multiple-instance learning benchmark on synthetic cytology-like bags"};
    app.require_subcommand(1);
    app.add_flag("-q,--quiet", g_quiet, "Suppress progress output");

    GenerateArgs gen;
    auto* g = app.add_subcommand("generate", "Generate a synthetic bag dataset");
    g->add_option("--config", gen.config, "Generator config (JSON)");
    g->add_option("--out", gen.out, "Output dataset directory");
    g->add_option("--seed", gen.seed, "Master seed");
    g->add_option("--dataset-id", gen.dataset_id);
    g->add_option("--key-ratio", gen.key_ratio);
    g->add_option("--key-digit", gen.key_digit);
    g->add_option("--bag-size", gen.bag_size, "Constant bag size");
    g->add_option("--height", gen.height);
    g->add_option("--width", gen.width);
    g->add_option("--negatives", gen.negatives, "Number of negative bags");
    g->add_option("--positives", gen.positives, "Number of positive bags");
    g->add_option("--nonkey-digits", gen.nonkey_digits, "Digits used for non-key instances");
    g->add_flag("--no-augment", gen.no_augment, "Disable generation-time augmentation");

    FoldsArgs folds;
    auto* fo = app.add_subcommand("folds", "Write the 9 cross-validation folds for a dataset");
    fo->add_option("--config", folds.config);
    fo->add_option("--dataset", folds.dataset);
    fo->add_option("--out", folds.out);
    fo->add_option("--seed", folds.seed);

    ExperimentArgs tr, ev, cv;
    add_experiment_options(app.add_subcommand("train", "Train one or more folds"), tr);
    auto* e = app.add_subcommand("evaluate", "Evaluate trained folds on their test bags");
    add_experiment_options(e, ev);
    e->add_option("--threshold", ev.threshold, "SIL bag threshold (default: from the trained folds)");
    add_experiment_options(app.add_subcommand("crossval", "Train, threshold and evaluate all folds"), cv);

    MosaicArgs mo;
    auto* m = app.add_subcommand("mosaic", "Export top-k instance mosaics from a score dump");
    m->add_option("--config", mo.config);
    m->add_option("--scores", mo.scores, "scores.csv of an evaluated fold");
    m->add_option("--dataset", mo.dataset);
    m->add_option("--out", mo.out, "Output directory");
    m->add_option("--bag", mo.bags, "Bag ids (default: positive-predicted bags)");
    m->add_option("--k", mo.k);
    m->add_option("--rows", mo.rows);
    m->add_option("--cols", mo.cols);
    m->add_option("--cell-size", mo.cell, "Cell edge in pixels");
    m->add_option("--seed", mo.seed);
    m->add_flag("--include-negative", mo.include_negative);

    ReportArgs re;
    auto* r = app.add_subcommand("report", "Per-bag positive-fraction report for SIL folds");
    r->add_option("--config", re.config);
    r->add_option("--combination-dir", re.combination_dir, "e.g. runs/<dataset>/sil-lenet-na");
    r->add_option("--dataset", re.dataset, "Dataset directory (adds bag labels)");
    r->add_option("--out", re.out);
    r->add_option("--seed", re.seed);

    CLI11_PARSE(app, argc, argv);

    try {
        if (g->parsed()) return run_generate(gen);
        if (fo->parsed()) return run_folds(folds);
        if (app.got_subcommand("train")) return run_train(tr);
        if (e->parsed()) return run_evaluate(ev);
        if (app.got_subcommand("crossval")) return run_crossval(cv);
        if (m->parsed()) return run_mosaic(mo);
        if (r->parsed()) return run_report(re);
    } catch (const ConfigError& ex) {
        std::cerr << "config error: " << ex.what() << "\n";
        return kConfig;
    } catch (const DivergenceError& ex) {
        std::cerr << "training diverged: " << ex.what() << "\n";
        return kDivergence;
    } catch (const IoError& ex) {
        std::cerr << "i/o error: " << ex.what() << "\n";
        return kOther;
    } catch (const Error& ex) {
        std::cerr << "data error: " << ex.what() << "\n";
        return kData;
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return kOther;
    }
    return kOther;
}
