#include <gtest/gtest.h>

#include <cstdlib>
#include <set>

#include "milbench/core/png_io.hpp"
#include "milbench/harness/experiment.hpp"
#include "milbench/harness/mosaic.hpp"
#include "milbench/harness/report.hpp"
#include "test_util.hpp"

using namespace milbench;
using namespace milbench::harness;

namespace {

std::vector<ScoredInstance> scores_for(const Bag& bag) {
    std::vector<ScoredInstance> s;
    for (std::size_t i = 0; i < bag.instances.size(); ++i)
        s.emplace_back(bag.instances[i].id, static_cast<double>(i) / static_cast<double>(bag.instances.size()));
    return s;
}

ExperimentSpec tiny_spec(const std::filesystem::path& root) {
    ExperimentSpec s;
    synth::GeneratorConfig g;
    g.dataset_id = "tiny";
    g.height = g.width = 28;
    g.bag_size_profile.constant = 12;
    g.master_seed = 2;
    g.source.procedural_train = 600;
    g.source.procedural_test = 600;
    s.generator = g;
    s.methods = {nn::Method::abmil, nn::Method::sil};
    s.mini_bag_sizes = {4};
    s.folds = {0, 4};
    s.output_root = root;
    s.seed = 5;
    s.train.max_epochs = 2;
    s.train.embedding_dim = 8;
    s.train.attention_dim = 4;
    s.train.selection_window = 1;
    s.train.sil_batch_size = 16;
    s.train.keep_all_checkpoints = false;
    s.mosaic = {4, 2, 2, 0, 0};
    return s;
}

}  // namespace

TEST(Mosaic, TopKOrdersByScoreThenId) {
    const auto t = top_k({{"b", 0.5}, {"a", 0.5}, {"c", 0.9}, {"d", 0.1}}, 3);
    ASSERT_EQ(t.size(), 3u);
    EXPECT_EQ(t[0].first, "c");
    EXPECT_EQ(t[1].first, "a");
    EXPECT_EQ(t[2].first, "b");
    EXPECT_EQ(top_k({{"x", 1.0}}, 36).size(), 1u);
}

TEST(Mosaic, SixBySixGridOfEightyPixelCells) {
    const auto ds = testutil::toy_dataset({40, 10}, {8, 0}, 80, 80);
    const auto& bag = ds.manifest.bags[0];
    const auto scored = scores_for(bag);
    const auto img = build_mosaic(scored, ds, MosaicSpec{});
    EXPECT_EQ(img.height, 480);
    EXPECT_EQ(img.width, 480);
    // Highest score is the last instance; it fills the top-left cell.
    const auto& first = ds.image(bag.instances.back().id);
    for (int y = 0; y < 80; y += 7)
        for (int x = 0; x < 80; x += 9) EXPECT_EQ(img.at(y, x, 1), first.at(y, x, 1));
    // Cell (1, 0) holds the seventh-ranked instance.
    const auto& seventh = ds.image(bag.instances[bag.instances.size() - 7].id);
    EXPECT_EQ(img.at(80 + 3, 5, 0), seventh.at(3, 5, 0));
}

TEST(Mosaic, SmallBagsArePaddedWithWhite) {
    const auto ds = testutil::toy_dataset({10}, {2}, 20, 20);
    const auto img = build_mosaic(scores_for(ds.manifest.bags[0]), ds, MosaicSpec{});
    EXPECT_EQ(img.height, 120);
    for (int c = 0; c < 3; ++c) EXPECT_EQ(img.at(119, 119, c), 255);
    EXPECT_EQ(img.at(20 + 4, 4 * 20 + 3, 0), 255);  // cell 10 is empty
}

TEST(Mosaic, ExportIsDeterministicAndHasSidecar) {
    const auto ds = testutil::toy_dataset({36}, {5}, 12, 12);
    testutil::TempDir dir("mosaic");
    MosaicSpec spec;
    spec.cell_height = spec.cell_width = 24;
    const auto s = scores_for(ds.manifest.bags[0]);
    export_mosaic(dir.path() / "a.png", "b0", s, ds, spec);
    export_mosaic(dir.path() / "b.png", "b0", s, ds, spec);
    EXPECT_EQ(testutil::slurp(dir.path() / "a.png"), testutil::slurp(dir.path() / "b.png"));
    const auto back = png::read(dir.path() / "a.png");
    EXPECT_EQ(back.height, 144);
    const auto side = nlohmann::json::parse(testutil::slurp(dir.path() / "a.json"));
    EXPECT_EQ(side["cells"].size(), 36u);
    EXPECT_EQ(side["cells"][0]["instance_id"], "b0_35");
    auto missing = s;
    missing.pop_back();
    EXPECT_THROW(export_mosaic(dir.path() / "c.png", "b0", missing, ds, spec), DataError);
    spec.rows = 5;
    EXPECT_THROW(export_mosaic(dir.path() / "d.png", "b0", s, ds, spec), ConfigError);
}

TEST(Report, OneRowPerBagWithFoldSpread) {
    const auto ds = testutil::toy_dataset(std::vector<int>(24, 5), [] {
        std::vector<int> k(24, 0);
        for (int i = 12; i < 24; ++i) k[i] = 1;
        return k;
    }());
    const auto folds = make_folds(ds.manifest, 3);
    std::vector<eval::MetricsReport> reports;
    for (const auto& f : folds) {
        eval::MetricsReport r;
        r.fold_id = f.fold_id;
        r.method = "sil";
        r.sil_threshold = 0.125;
        for (const auto& b : f.test) r.per_bag_positive_fraction[b] = 0.1 * (f.fold_id % 3);
        reports.push_back(r);
    }
    const auto t = report_bag_fractions(reports, &ds.manifest);
    ASSERT_EQ(t.rows.size(), 24u);
    for (const auto& row : t.rows) {
        EXPECT_EQ(row.fractions.size(), 3u);
        EXPECT_TRUE(row.label.has_value());
        for (double f : row.fractions) {
            EXPECT_GE(f, 0.0);
            EXPECT_LE(f, 1.0);
        }
        EXPECT_LE(row.min, row.mean);
        EXPECT_GE(row.max, row.mean);
    }
    EXPECT_EQ(t.threshold, 0.125);
    const auto csv = bag_fraction_csv(t);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 25);
    const auto plot = bag_fraction_plot_json(t);
    EXPECT_EQ(plot["threshold"], 0.125);

    reports[1].sil_threshold = 0.2;
    EXPECT_THROW(report_bag_fractions(reports), ConsistencyError);
    reports[1].method = "abmil";
    EXPECT_THROW(report_bag_fractions(reports), DataError);
}

TEST(Summary, CsvSchemaAndAggregates) {
    std::vector<SummaryRow> rows{{"d", "abmil", "lenet", 500, 0.2, 0, 1.0, 0.9, std::nullopt, 1.5},
                                 {"d", "abmil", "lenet", 500, 0.2, 1, 0.5, 0.7, std::nullopt, 2.5},
                                 {"d", "sil", "lenet", 0, 0.2, 0, 0.75, std::nullopt, 0.3, 1.0}};
    const auto csv = summary_csv(rows);
    EXPECT_EQ(csv.substr(0, csv.find('\n')),
              "dataset_id,method,architecture,mini_bag_size,key_ratio,fold_id,bag_accuracy,instance_auc,sil_threshold,"
              "wall_time_seconds");
    EXPECT_NE(csv.find("\nd,sil,lenet,,0.20000000000000001,0,0.75,,0.29999999999999999,1\n"), std::string::npos);
    EXPECT_EQ(summary_csv(rows, false).find("wall_time"), std::string::npos);
    const auto m = mean_std({1.0, 0.5});
    EXPECT_DOUBLE_EQ(m.mean, 0.75);
    EXPECT_NEAR(m.std, std::sqrt(0.125), 1e-15);
    EXPECT_EQ(mean_std({0.3}).std, 0.0);
    const auto agg = aggregate_csv(rows);
    EXPECT_EQ(std::count(agg.begin(), agg.end(), '\n'), 3);
}

TEST(ExperimentSpec, JsonRoundTripAndValidation) {
    testutil::TempDir dir("spec");
    auto s = tiny_spec(dir.path());
    s.method_overrides = {{"sil", {{"learning_rate", 0.002}}}};
    const auto back = experiment_spec_from_json(nlohmann::json::parse(to_json(s).dump()));
    EXPECT_EQ(to_json(back).dump(), to_json(s).dump());
    EXPECT_EQ(back.combinations().size(), 2u);
    EXPECT_EQ(back.combinations()[0].name(), "abmil-lenet-4");
    EXPECT_EQ(back.combinations()[1].name(), "sil-lenet-na");
    const auto sil_cfg = train_config_for(back, back.combinations()[1], 0);
    EXPECT_EQ(sil_cfg.lr(), 0.002);
    EXPECT_EQ(sil_cfg.wd(), 1e-4);
    EXPECT_NE(sil_cfg.seed, train_config_for(back, back.combinations()[1], 4).seed);

    auto bad = s;
    bad.folds = {9};
    EXPECT_THROW(validate(bad), ConfigError);
    bad = s;
    bad.generator.reset();
    EXPECT_THROW(validate(bad), ConfigError);
    EXPECT_THROW(experiment_spec_from_json(nlohmann::json{{"weight_normalization", "softmax"}}), ConfigError);
}

TEST(Experiment, DeviceSelection) {
    ::unsetenv(kDeviceEnv);
    EXPECT_EQ(selected_device(), "cpu");
    ::setenv(kDeviceEnv, "cuda:0", 1);
    EXPECT_THROW(selected_device(), ConfigError);
    ::setenv(kDeviceEnv, "cpu", 1);
    EXPECT_EQ(selected_device(), "cpu");
    ::unsetenv(kDeviceEnv);
}

TEST(Experiment, TinyCrossValidationIsDeterministic) {
    testutil::TempDir a("cv_a"), b("cv_b");
    const auto ra = run_experiment(tiny_spec(a.path()));
    const auto rb = run_experiment(tiny_spec(b.path()));
    EXPECT_TRUE(ra.failures.empty()) << (ra.failures.empty() ? "" : ra.failures[0].message);
    ASSERT_EQ(ra.rows.size(), 4u);
    EXPECT_EQ(summary_csv(ra.rows, false), summary_csv(rb.rows, false));
    const auto root_a = a.path() / "tiny", root_b = b.path() / "tiny";
    for (const char* f : {"abmil-lenet-4/fold0/scores.csv", "sil-lenet-na/fold4/scores.csv", "folds.json",
                          "sil-lenet-na/bag_fractions.csv", "abmil-lenet-4/fold4/metrics.json"})
        EXPECT_EQ(testutil::slurp(root_a / f), testutil::slurp(root_b / f)) << f;
    for (const char* f : {"summary.csv", "summary_aggregate.csv", "failures.json", "experiment.json",
                          "sil-lenet-na/fold0/threshold.json", "abmil-lenet-4/fold0/selection.json",
                          "abmil-lenet-4/fold0/metric_series.csv", "sil-lenet-na/bag_fractions.json"})
        EXPECT_TRUE(std::filesystem::exists(root_a / f)) << f;

    // The SIL threshold is the mean of the per-fold midpoints and is shared by both folds.
    const double t0 = read_json_file(root_a / "sil-lenet-na/fold0/threshold.json")["fold_threshold"];
    const double t4 = read_json_file(root_a / "sil-lenet-na/fold4/threshold.json")["fold_threshold"];
    EXPECT_NEAR(ra.sil_thresholds.at("sil-lenet-na"), (t0 + t4) / 2, 1e-12);
    for (const auto& r : ra.reports.at("sil-lenet-na")) EXPECT_EQ(*r.sil_threshold, ra.sil_thresholds.at("sil-lenet-na"));
    // Each test bag of 12 instances is covered by 30 mini-bags of 4.
    for (const auto& r : ra.reports.at("abmil-lenet-4")) EXPECT_GT(r.mean_instance_coverage, 5.0);

    // Only the selected checkpoint survives.
    int ckpts = 0;
    for (const auto& e : std::filesystem::directory_iterator(root_a / "abmil-lenet-4/fold0/checkpoints")) ckpts += e.is_regular_file();
    EXPECT_EQ(ckpts, 1);
    // Scores round-trip through CSV.
    const auto rows = eval::read_instance_rows(root_a / "abmil-lenet-4/fold0/scores.csv");
    EXPECT_EQ(rows.size(), 8u * 12u);
}

#ifdef MILBENCH_CONFIG_DIR
namespace {
void check_spec(const nlohmann::json& j) {
    const auto spec = experiment_spec_from_json(j);
    validate(spec);
    if (spec.generator) synth::validate(*spec.generator);
    for (const auto& c : spec.combinations()) (void)train_config_for(spec, c, spec.folds.front());
}
}  // namespace

TEST(SampleConfigs, AllParseAndValidate) {
    const std::filesystem::path dir = MILBENCH_CONFIG_DIR;
    int seen = 0;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        const auto name = e.path().filename().string();
        const auto j = read_json_file(e.path());
        if (name.starts_with("generator_")) {
            EXPECT_NO_THROW(synth::validate(synth::generator_config_from_json(j))) << name;
        } else if (name.starts_with("experiment_")) {
            EXPECT_NO_THROW(check_spec(j)) << name;
        } else if (name == "acceptance.json") {
            for (const char* part : {"mini", "separable"}) EXPECT_NO_THROW(check_spec(j.at(part))) << part;
        } else {
            ADD_FAILURE() << "unexpected config " << name;
        }
        ++seen;
    }
    EXPECT_GE(seen, 4);
}
#endif

#ifdef MILBENCH_CLI_PATH
namespace {
int run_cli(const std::string& args) {
    const int rc = std::system((std::string(MILBENCH_CLI_PATH) + " -q " + args + " > /dev/null 2>&1").c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}
}  // namespace

TEST(Cli, ExitCodes) {
    testutil::TempDir dir("cli");
    const auto d = dir.path().string();
    EXPECT_EQ(run_cli("generate --out " + d + "/ds --seed 3 --bag-size 8 --height 28 --width 28"), 0);
    EXPECT_TRUE(std::filesystem::exists(dir.path() / "ds/manifest.json"));
    EXPECT_EQ(run_cli("folds --dataset " + d + "/ds --out " + d + "/folds.json --seed 1"), 0);
    const auto folds = read_folds(dir.path() / "folds.json");
    EXPECT_EQ(folds.size(), 9u);
    // Bad configuration values.
    EXPECT_EQ(run_cli("generate --out " + d + "/x --key-ratio 1.5"), 2);
    EXPECT_EQ(run_cli("train --dataset " + d + "/ds --method sil --epochs 151 --fold 0 --output-root " + d), 2);
    // Missing dataset.
    EXPECT_NE(run_cli("folds --dataset " + d + "/nowhere --out " + d + "/f.json"), 0);
    EXPECT_NE(run_cli("no-such-command"), 0);
}
#endif
