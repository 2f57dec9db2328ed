#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "milbench/core/dataset.hpp"
#include "milbench/core/errors.hpp"
#include "milbench/core/rng.hpp"
#include "milbench/core/types.hpp"

namespace milbench {

inline constexpr int kFoldCount = 9;
inline constexpr int kBagsPerClass = 12;

struct BagIdsByClass {
    std::vector<std::string> negative;
    std::vector<std::string> positive;
};

inline BagIdsByClass bag_ids_by_class(const DatasetManifest& m) {
    BagIdsByClass ids;
    for (const auto& b : m.bags) (b.label == Label::positive ? ids.positive : ids.negative).push_back(b.id);
    return ids;
}

// Fold f = 3*rotation + sub_fold. Per class the ids are permuted once and cut
// into three test groups of four; for a rotation the remaining eight ids give
// the validation pair at positions (2s, 2s+1) and six training ids.
inline std::vector<FoldSpec> make_folds(const BagIdsByClass& ids, std::uint64_t seed) {
    if (ids.negative.size() != kBagsPerClass || ids.positive.size() != kBagsPerClass)
        throw ConfigError("make_folds needs exactly 12 negative and 12 positive bag ids, got " +
                          std::to_string(ids.negative.size()) + " and " + std::to_string(ids.positive.size()));
    std::set<std::string> seen;
    for (const auto* cls : {&ids.negative, &ids.positive})
        for (const auto& id : *cls)
            if (!seen.insert(id).second) throw StructuralError("duplicate bag id in fold input: " + id);

    auto permuted = [&](std::vector<std::string> v, std::uint64_t cls) {
        auto rng = make_stream(seed, {key_of("folds"), cls});
        std::shuffle(v.begin(), v.end(), rng);
        return v;
    };
    const std::vector<std::vector<std::string>> classes{permuted(ids.negative, 0), permuted(ids.positive, 1)};

    std::vector<FoldSpec> folds;
    for (int rotation = 0; rotation < 3; ++rotation) {
        for (int sub = 0; sub < 3; ++sub) {
            FoldSpec f;
            f.fold_id = 3 * rotation + sub;
            for (const auto& perm : classes) {
                std::vector<std::string> rest;
                for (int i = 0; i < kBagsPerClass; ++i) {
                    if (i / 4 == rotation)
                        f.test.push_back(perm[i]);
                    else
                        rest.push_back(perm[i]);
                }
                for (int i = 0; i < static_cast<int>(rest.size()); ++i) {
                    if (i / 2 == sub)
                        f.validation.push_back(rest[i]);
                    else
                        f.train.push_back(rest[i]);
                }
            }
            folds.push_back(std::move(f));
        }
    }
    return folds;
}

inline std::vector<FoldSpec> make_folds(const DatasetManifest& m, std::uint64_t seed) {
    return make_folds(bag_ids_by_class(m), seed);
}

// Checks disjointness and coverage of one fold against the manifest, plus the
// 6+6 / 2+2 / 4+4 class balance.
inline void validate_fold(const FoldSpec& f, const DatasetManifest& m) {
    if (f.fold_id < 0 || f.fold_id >= kFoldCount) throw ConfigError("fold id out of range: " + std::to_string(f.fold_id));
    std::set<std::string> all;
    auto check = [&](const std::vector<std::string>& ids, int per_class, const char* name) {
        int pos = 0, neg = 0;
        for (const auto& id : ids) {
            if (!all.insert(id).second) throw StructuralError("bag " + id + " appears twice in fold " + std::to_string(f.fold_id));
            (m.bag(id).label == Label::positive ? pos : neg)++;
        }
        if (pos != per_class || neg != per_class)
            throw StructuralError(std::string("fold ") + std::to_string(f.fold_id) + " " + name + " split is not " +
                                  std::to_string(per_class) + "+" + std::to_string(per_class));
    };
    check(f.train, 6, "train");
    check(f.validation, 2, "validation");
    check(f.test, 4, "test");
    if (all.size() != m.bags.size()) throw StructuralError("fold does not cover every bag");
}

inline nlohmann::ordered_json folds_to_json(const std::vector<FoldSpec>& folds, std::uint64_t seed) {
    nlohmann::ordered_json j;
    j["format"] = "milbench-folds/1";
    j["seed"] = seed;
    auto arr = nlohmann::ordered_json::array();
    for (const auto& f : folds)
        arr.push_back({{"fold_id", f.fold_id}, {"train", f.train}, {"validation", f.validation}, {"test", f.test}});
    j["folds"] = std::move(arr);
    return j;
}

inline void write_folds(const std::filesystem::path& path, const std::vector<FoldSpec>& folds, std::uint64_t seed) {
    write_text_file(path, folds_to_json(folds, seed).dump(1) + "\n");
}

inline std::vector<FoldSpec> read_folds(const std::filesystem::path& path) {
    try {
        const auto j = nlohmann::json::parse(read_text_file(path));
        std::vector<FoldSpec> folds;
        for (const auto& jf : j.at("folds")) {
            FoldSpec f;
            f.fold_id = jf.at("fold_id").get<int>();
            f.train = jf.at("train").get<std::vector<std::string>>();
            f.validation = jf.at("validation").get<std::vector<std::string>>();
            f.test = jf.at("test").get<std::vector<std::string>>();
            folds.push_back(std::move(f));
        }
        return folds;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed fold file: ") + e.what());
    }
}

}  // namespace milbench
