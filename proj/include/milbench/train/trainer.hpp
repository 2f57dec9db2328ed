#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "milbench/core/dataset.hpp"
#include "milbench/core/errors.hpp"
#include "milbench/core/rng.hpp"
#include "milbench/eval/inference.hpp"
#include "milbench/eval/metrics.hpp"
#include "milbench/nn/model.hpp"
#include "milbench/train/config.hpp"
#include "milbench/train/data.hpp"
#include "milbench/train/selection.hpp"

namespace milbench::train {

// Bags used for fitting and for per-epoch validation.
struct TrainSplit {
    std::vector<std::string> train;
    std::vector<std::string> validation;

    static TrainSplit from(const FoldSpec& f) { return {f.train, f.validation}; }
};

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double validation_metric = 0.0;
    double seconds = 0.0;
};

struct TrainResult {
    std::string metric_name;         // "classification_error" or "f1"
    std::vector<double> series;      // one validation value per epoch
    std::vector<double> train_loss;  // mean training loss per epoch
    int selected_epoch = 0;
    double selected_metric = 0.0;
    std::filesystem::path selected_checkpoint;
    double seconds = 0.0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

inline std::filesystem::path checkpoint_path(const std::filesystem::path& dir, int epoch) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "epoch_%04d.ckpt", epoch);
    return dir / "checkpoints" / buf;
}

inline std::string rng_digest(std::uint64_t seed, int epoch) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(derive_seed(seed, {key_of("epoch_state"), static_cast<std::uint64_t>(epoch)})));
    return buf;
}

namespace detail {

inline std::vector<const Bag*> resolve_bags(const DatasetManifest& m, const std::vector<std::string>& ids) {
    std::vector<const Bag*> out;
    for (const auto& id : ids) out.push_back(&m.bag(id));
    return out;
}

inline void write_series(const std::filesystem::path& dir, const TrainResult& r) {
    std::string csv = "epoch,train_loss," + r.metric_name + "\n";
    char line[96];
    for (std::size_t e = 0; e < r.series.size(); ++e) {
        std::snprintf(line, sizeof line, "%zu,%.17g,%.17g\n", e, r.train_loss[e], r.series[e]);
        csv += line;
    }
    write_text_file(dir / "metric_series.csv", csv);
}

inline void finish_selection(const std::filesystem::path& dir, const TrainConfig& cfg, TrainResult& r, Direction dir_better) {
    r.selected_epoch = static_cast<int>(select_checkpoint(r.series, static_cast<std::size_t>(cfg.selection_window), dir_better));
    r.selected_metric = r.series[static_cast<std::size_t>(r.selected_epoch)];
    r.selected_checkpoint = checkpoint_path(dir, r.selected_epoch);
    nlohmann::ordered_json sel;
    sel["epoch"] = r.selected_epoch;
    sel["metric"] = r.metric_name;
    sel["value"] = r.selected_metric;
    sel["window"] = cfg.selection_window;
    sel["direction"] = dir_better == Direction::maximize ? "maximize" : "minimize";
    sel["checkpoint"] = r.selected_checkpoint.filename().string();
    write_text_file(dir / "selection.json", sel.dump(1) + "\n");
    write_series(dir, r);
    if (!cfg.keep_all_checkpoints)
        for (int e = 0; e < static_cast<int>(r.series.size()); ++e)
            if (e != r.selected_epoch && std::filesystem::exists(checkpoint_path(dir, e)))
                std::filesystem::remove(checkpoint_path(dir, e));
}

// Deletes checkpoints that can no longer be selected. Once every window
// starting at or before s is complete, only the best complete window and the
// epochs of windows still open can win.
class CheckpointPruner {
public:
    CheckpointPruner(std::filesystem::path dir, const TrainConfig& cfg)
        : dir_(std::move(dir)), window_(static_cast<std::size_t>(cfg.selection_window)),
          better_(cfg.method == nn::Method::abmil ? Direction::minimize : Direction::maximize),
          active_(!cfg.keep_all_checkpoints && cfg.epochs() >= cfg.selection_window) {}

    void after_epoch(const std::vector<double>& series) {
        if (!active_ || series.size() < window_) return;
        const std::size_t n = series.size();
        const std::size_t last_start = n - window_;
        double sum = 0.0;
        for (std::size_t i = last_start; i < n; ++i) sum += series[i];
        const double avg = sum / static_cast<double>(window_);
        if (!have_best_ || (better_ == Direction::maximize ? avg > best_avg_ : avg < best_avg_)) {
            best_avg_ = avg;
            best_start_ = last_start;
            have_best_ = true;
        }
        // Epochs after last_start still belong to open windows.
        for (std::size_t e = kept_from_; e < n; ++e) alive_.push_back(e);
        kept_from_ = n;
        std::erase_if(alive_, [&](std::size_t e) {
            if (e > last_start || (e >= best_start_ && e < best_start_ + window_)) return false;
            std::filesystem::remove(checkpoint_path(dir_, static_cast<int>(e)));
            return true;
        });
    }

private:
    std::filesystem::path dir_;
    std::size_t window_;
    Direction better_;
    bool active_;
    bool have_best_ = false;
    double best_avg_ = 0.0;
    std::size_t best_start_ = 0;
    std::size_t kept_from_ = 0;
    std::vector<std::size_t> alive_;
};

template <typename T>
void check_finite(T loss, int epoch) {
    if (!std::isfinite(static_cast<double>(loss)))
        throw DivergenceError("training diverged: non-finite loss at epoch " + std::to_string(epoch));
}

}  // namespace detail

// Bag-level classification error from majority votes over mini-bags. The
// mini-bag draws for bag i come from a stream keyed by (seed, i) so every
// epoch is scored on the same draws.
template <typename T>
double abmil_validation_error(nn::Model<T>& model, const InstanceStore& store, const std::vector<const Bag*>& bags,
                              int n_mini_bags, int mini_bag_size, std::uint64_t seed) {
    std::size_t wrong = 0;
    for (std::size_t b = 0; b < bags.size(); ++b) {
        const auto idx = eval::bag_indices(*bags[b], store);
        const auto H = eval::embed_instances(model, store, idx);
        auto rng = make_stream(seed, {key_of("validation_mini_bags"), b});
        const auto r = eval::abmil_infer_bag(model.attention(), H, *bags[b], n_mini_bags, mini_bag_size, rng);
        if (r.predicted != bags[b]->label) ++wrong;
    }
    return static_cast<double>(wrong) / static_cast<double>(bags.size());
}

// Positive-class F1 of instance predictions against weak (bag) labels.
template <typename T>
double sil_instance_f1(nn::Model<T>& model, const InstanceStore& store, const std::vector<const Bag*>& bags) {
    std::vector<Label> pred, truth;
    for (const auto* bag : bags) {
        const auto idx = eval::bag_indices(*bag, store);
        for (double p : eval::sil_instance_probabilities(model, store, idx)) pred.push_back(eval::sil_instance_label(p));
        truth.insert(truth.end(), bag->instances.size(), bag->label);
    }
    return eval::f1_score(pred, truth);
}

// Positive-class F1 over validation bags, each called by its positive
// fraction against the midpoint threshold of these same bags.
template <typename T>
double sil_bag_f1(nn::Model<T>& model, const InstanceStore& store, const std::vector<const Bag*>& bags) {
    std::vector<double> fractions, pos, neg;
    for (const auto* bag : bags) {
        fractions.push_back(eval::sil_score_bag(model, store, *bag).fraction);
        (bag->label == Label::positive ? pos : neg).push_back(fractions.back());
    }
    if (pos.empty() || neg.empty()) throw DataError("bag-level F1 needs positive and negative validation bags");
    const double threshold = eval::compute_fold_threshold(pos, neg);
    std::vector<Label> pred, truth;
    for (std::size_t i = 0; i < bags.size(); ++i) {
        pred.push_back(eval::sil_bag_predict(fractions[i], threshold));
        truth.push_back(bags[i]->label);
    }
    return eval::f1_score(pred, truth);
}

// As sil_bag_f1, but over mini-bags drawn from each validation bag with the
// ABMIL validation stream, so the score keeps resolving once whole bags are
// all called correctly. Mixed-up instance calls show up as fraction noise.
template <typename T>
double sil_mini_bag_f1(nn::Model<T>& model, const InstanceStore& store, const std::vector<const Bag*>& bags,
                       int n_mini_bags, int mini_bag_size, std::uint64_t seed) {
    std::vector<double> fractions, pos, neg;
    std::vector<Label> truth;
    for (std::size_t b = 0; b < bags.size(); ++b) {
        const auto& bag = *bags[b];
        const auto s = eval::sil_score_bag(model, store, bag);
        std::unordered_map<std::string, Label> call;
        for (std::size_t i = 0; i < bag.instances.size(); ++i)
            call.emplace(bag.instances[i].id, eval::sil_instance_label(s.p_positive[i]));
        auto rng = make_stream(seed, {key_of("validation_mini_bags"), b});
        for (int j = 0; j < n_mini_bags; ++j) {
            const auto mb = sample_mini_bag(bag, mini_bag_size, rng);
            std::vector<Label> labels;
            for (const auto& id : mb.instance_ids) labels.push_back(call.at(id));
            fractions.push_back(eval::sil_bag_fraction(labels));
            truth.push_back(bag.label);
            (bag.label == Label::positive ? pos : neg).push_back(fractions.back());
        }
    }
    if (pos.empty() || neg.empty()) throw DataError("mini-bag F1 needs positive and negative validation bags");
    const double threshold = eval::compute_fold_threshold(pos, neg);
    std::vector<Label> pred;
    for (double f : fractions) pred.push_back(eval::sil_bag_predict(f, threshold));
    return eval::f1_score(pred, truth);
}

template <typename T>
double sil_validation_f1(nn::Model<T>& model, const InstanceStore& store, const std::vector<const Bag*>& bags,
                         const TrainConfig& cfg, int n_mini_bags) {
    if (cfg.sil_f1_level == "instance") return sil_instance_f1(model, store, bags);
    if (cfg.sil_f1_level == "bag") return sil_bag_f1(model, store, bags);
    return sil_mini_bag_f1(model, store, bags, n_mini_bags, cfg.mini_bag_size, cfg.seed);
}

// Attention MIL: one fresh mini-bag per training bag per epoch, bags in
// shuffled order, one optimizer step per mini-bag.
template <typename T = float>
TrainResult train_abmil(const TrainSplit& split, const Dataset& ds, const InstanceStore& store, const TrainConfig& cfg,
                        const std::filesystem::path& out_dir, const EpochCallback& on_epoch = {}) {
    if (cfg.method != nn::Method::abmil) throw ConfigError("train_abmil needs an abmil config");
    validate(cfg);
    if (split.train.empty() || split.validation.empty()) throw ConfigError("training and validation bags are required");
    std::filesystem::create_directories(out_dir / "checkpoints");
    const auto t_start = std::chrono::steady_clock::now();

    const auto train_bags = detail::resolve_bags(ds.manifest, split.train);
    const auto val_bags = detail::resolve_bags(ds.manifest, split.validation);
    nn::Model<T> model(nn::Method::abmil, cfg.extractor(ds.manifest.height, ds.manifest.width), cfg.attention_dim);
    model.init(cfg.seed);
    nn::AdamW<T> opt(model.params(), cfg.lr(), cfg.wd());
    const int n_val_mini_bags =
        eval::num_test_mini_bags(ds.manifest.max_bag_size(), cfg.mini_bag_size, cfg.validation_coverage);

    TrainResult result;
    result.metric_name = "classification_error";
    detail::CheckpointPruner pruner(out_dir, cfg);
    for (int epoch = 0; epoch < cfg.epochs(); ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<std::size_t> order(train_bags.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        auto order_rng = make_stream(cfg.seed, {key_of("bag_order"), static_cast<std::uint64_t>(epoch)});
        std::shuffle(order.begin(), order.end(), order_rng);
        double loss_sum = 0.0;
        for (std::size_t pos = 0; pos < order.size(); ++pos) {
            const Bag& bag = *train_bags[order[pos]];
            auto rng = make_stream(cfg.seed, {key_of("mini_bag"), static_cast<std::uint64_t>(epoch), pos});
            const auto mb = sample_mini_bag(bag, cfg.mini_bag_size, rng);
            std::vector<std::size_t> idx;
            for (const auto& id : mb.instance_ids) idx.push_back(store.index(id));
            const auto x = store.augmented_batch<T>(idx, cfg.augmentation, cfg.seed, static_cast<std::uint64_t>(epoch),
                                                    static_cast<std::uint64_t>(pos) << 32);
            model.zero_grad();
            const auto E = model.embed(x, nn::Mode::train);
            const T logit = model.attention().forward(E.matrix());
            const auto [loss, dlogit] = nn::bce_with_logit(logit, to_int(mb.inherited_label));
            detail::check_finite(loss, epoch);
            loss_sum += static_cast<double>(loss);
            const nn::Mat<T> dH = model.attention().backward(dlogit);
            nn::Tensor<T> dE(E.shape);
            dE.matrix() = dH;
            model.embed_backward(dE);
            opt.step();
        }
        const double err = abmil_validation_error(model, store, val_bags, n_val_mini_bags, cfg.mini_bag_size, cfg.seed);
        result.series.push_back(err);
        result.train_loss.push_back(loss_sum / static_cast<double>(order.size()));
        nn::save_checkpoint(checkpoint_path(out_dir, epoch), model, {"abmil", "", epoch, rng_digest(cfg.seed, epoch), {}});
        pruner.after_epoch(result.series);
        if (on_epoch)
            on_epoch({epoch, result.train_loss.back(), err,
                      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()});
    }
    detail::finish_selection(out_dir, cfg, result, Direction::minimize);
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return result;
}

// Single-instance learning on weak labels with mini-batches drawn from the
// shuffled union of the training bags' instances.
template <typename T = float>
TrainResult train_sil(const TrainSplit& split, const Dataset& ds, const InstanceStore& store, const TrainConfig& cfg,
                      const std::filesystem::path& out_dir, const EpochCallback& on_epoch = {}) {
    if (cfg.method != nn::Method::sil) throw ConfigError("train_sil needs a sil config");
    validate(cfg);
    if (split.train.empty() || split.validation.empty()) throw ConfigError("training and validation bags are required");
    std::filesystem::create_directories(out_dir / "checkpoints");
    const auto t_start = std::chrono::steady_clock::now();

    const auto train_bags = detail::resolve_bags(ds.manifest, split.train);
    const auto val_bags = detail::resolve_bags(ds.manifest, split.validation);
    std::vector<std::size_t> pool;
    std::vector<int> weak;
    for (const auto* bag : train_bags)
        for (const auto& inst : bag->instances) {
            pool.push_back(store.index(inst.id));
            weak.push_back(to_int(bag->label));
        }
    nn::Model<T> model(nn::Method::sil, cfg.extractor(ds.manifest.height, ds.manifest.width), cfg.attention_dim);
    model.init(cfg.seed);
    nn::AdamW<T> opt(model.params(), cfg.lr(), cfg.wd());

    const int n_val_mini_bags =
        eval::num_test_mini_bags(ds.manifest.max_bag_size(), cfg.mini_bag_size, cfg.validation_coverage);

    TrainResult result;
    result.metric_name = "f1";
    detail::CheckpointPruner pruner(out_dir, cfg);
    const auto batch = static_cast<std::size_t>(cfg.sil_batch_size);
    for (int epoch = 0; epoch < cfg.epochs(); ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<std::size_t> order(pool.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        auto order_rng = make_stream(cfg.seed, {key_of("instance_order"), static_cast<std::uint64_t>(epoch)});
        std::shuffle(order.begin(), order.end(), order_rng);
        double loss_sum = 0.0;
        std::size_t n_batches = 0;
        for (std::size_t start = 0; start < order.size(); start += batch) {
            const std::size_t end = std::min(order.size(), start + batch);
            std::vector<std::size_t> idx;
            std::vector<int> labels;
            for (std::size_t k = start; k < end; ++k) {
                idx.push_back(pool[order[k]]);
                labels.push_back(weak[order[k]]);
            }
            const auto x = store.augmented_batch<T>(idx, cfg.augmentation, cfg.seed, static_cast<std::uint64_t>(epoch), start);
            model.zero_grad();
            const auto E = model.embed(x, nn::Mode::train);
            const auto logits = model.sil().forward(E, nn::Mode::train);
            nn::Tensor<T> dlogits;
            const T loss = nn::softmax_cross_entropy(logits, labels, dlogits);
            detail::check_finite(loss, epoch);
            loss_sum += static_cast<double>(loss);
            ++n_batches;
            model.embed_backward(model.sil().backward(dlogits));
            opt.step();
        }
        const double f1 = sil_validation_f1(model, store, val_bags, cfg, n_val_mini_bags);
        result.series.push_back(f1);
        result.train_loss.push_back(loss_sum / static_cast<double>(std::max<std::size_t>(1, n_batches)));
        nn::save_checkpoint(checkpoint_path(out_dir, epoch), model, {"sil", "", epoch, rng_digest(cfg.seed, epoch), {}});
        pruner.after_epoch(result.series);
        if (on_epoch)
            on_epoch({epoch, result.train_loss.back(), f1,
                      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()});
    }
    detail::finish_selection(out_dir, cfg, result, Direction::maximize);
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return result;
}

template <typename T = float>
TrainResult train_model(const TrainSplit& split, const Dataset& ds, const InstanceStore& store, const TrainConfig& cfg,
                        const std::filesystem::path& out_dir, const EpochCallback& on_epoch = {}) {
    return cfg.method == nn::Method::abmil ? train_abmil<T>(split, ds, store, cfg, out_dir, on_epoch)
                                           : train_sil<T>(split, ds, store, cfg, out_dir, on_epoch);
}

// Rebuilds the model described by `cfg` and loads a checkpoint into it.
template <typename T = float>
nn::Model<T> load_trained_model(const std::filesystem::path& checkpoint, const TrainConfig& cfg, int height, int width) {
    nn::Model<T> model(cfg.method, cfg.extractor(height, width), cfg.attention_dim);
    nn::load_checkpoint(checkpoint, model);
    return model;
}

}  // namespace milbench::train
