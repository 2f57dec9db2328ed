#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>

#include "milbench/core/errors.hpp"
#include "milbench/core/image.hpp"
#include "milbench/core/png_io.hpp"
#include "milbench/core/types.hpp"

namespace milbench {

// Manifest plus decoded pixels, keyed by instance id.
struct Dataset {
    DatasetManifest manifest;
    std::unordered_map<std::string, Image> images;

    [[nodiscard]] const Image& image(const std::string& instance_id) const {
        auto it = images.find(instance_id);
        if (it == images.end()) throw StructuralError("no image for instance " + instance_id);
        return it->second;
    }
};

inline constexpr std::string_view kManifestFormat = "milbench-manifest/1";
inline constexpr std::string_view kManifestFile = "manifest.json";

inline bool is_safe_id(std::string_view id) {
    if (id.empty() || id == "." || id == "..") return false;
    for (char c : id) {
        const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' ||
                        c == '-' || c == '.';
        if (!ok) return false;
    }
    return true;
}

// Checks id uniqueness, nonempty bags and, for synthetic data, that every
// instance has a true label and that bag labels follow the MIL definition.
inline void validate_manifest(const DatasetManifest& m) {
    if (m.height <= 0 || m.width <= 0) throw FormatError("image size must be positive");
    std::unordered_set<std::string> bag_ids;
    std::unordered_set<std::string> inst_ids;
    for (const auto& bag : m.bags) {
        if (!is_safe_id(bag.id)) throw StructuralError("invalid bag id '" + bag.id + "'");
        if (!bag_ids.insert(bag.id).second) throw StructuralError("duplicate bag id " + bag.id);
        if (bag.instances.empty()) throw StructuralError("bag " + bag.id + " is empty");
        bool any_positive = false;
        for (const auto& inst : bag.instances) {
            if (!is_safe_id(inst.id)) throw StructuralError("invalid instance id '" + inst.id + "'");
            if (!inst_ids.insert(inst.id).second) throw StructuralError("duplicate instance id " + inst.id);
            if (m.synthetic() && !inst.true_label)
                throw ConsistencyError("synthetic instance " + inst.id + " has no true label");
            if (inst.true_label == Label::positive) any_positive = true;
        }
        if (m.synthetic()) {
            const Label expected = any_positive ? Label::positive : Label::negative;
            if (bag.label != expected)
                throw ConsistencyError("bag " + bag.id + " labelled " + std::string(to_string(bag.label)) +
                                       " but its instances imply " + std::string(to_string(expected)));
        } else if (any_positive && bag.label == Label::negative) {
            throw ConsistencyError("negative bag " + bag.id + " contains a positive instance");
        }
    }
}

// Per-channel mean and population std of pixel/255 over every instance.
inline ChannelStats compute_channel_stats(const DatasetManifest& m,
                                          const std::unordered_map<std::string, Image>& images) {
    std::array<double, 3> sum{}, mean{}, var{};
    std::size_t count = 0;
    auto each_image = [&](auto&& fn) {
        for (const auto& bag : m.bags)
            for (const auto& inst : bag.instances) {
                auto it = images.find(inst.id);
                if (it == images.end()) throw StructuralError("no image for instance " + inst.id);
                fn(it->second);
            }
    };
    each_image([&](const Image& img) {
        for (std::size_t p = 0; p < img.pixels.size(); p += 3)
            for (int c = 0; c < 3; ++c) sum[c] += img.pixels[p + c] / 255.0;
        count += img.pixels.size() / 3;
    });
    if (count == 0) throw DataError("cannot compute channel stats of an empty dataset");
    for (int c = 0; c < 3; ++c) mean[c] = sum[c] / static_cast<double>(count);
    each_image([&](const Image& img) {
        for (std::size_t p = 0; p < img.pixels.size(); p += 3)
            for (int c = 0; c < 3; ++c) {
                const double d = img.pixels[p + c] / 255.0 - mean[c];
                var[c] += d * d;
            }
    });
    ChannelStats s;
    for (int c = 0; c < 3; ++c) {
        s.mean[c] = mean[c];
        s.std[c] = std::sqrt(var[c] / static_cast<double>(count));
    }
    return s;
}

inline nlohmann::ordered_json manifest_to_json(const DatasetManifest& m) {
    nlohmann::ordered_json j;
    j["format"] = kManifestFormat;
    j["dataset_id"] = m.dataset_id;
    j["image_size"] = {m.height, m.width};
    j["generator_config_hash"] = m.generator_config_hash;
    j["color_predicate"] = m.color_predicate;
    j["channel_stats"] = {{"mean", m.channel_stats.mean}, {"std", m.channel_stats.std}};
    auto bags = nlohmann::ordered_json::array();
    for (const auto& b : m.bags) {
        nlohmann::ordered_json jb;
        jb["bag_id"] = b.id;
        jb["label"] = to_int(b.label);
        jb["source_split"] = b.source_split;
        auto insts = nlohmann::ordered_json::array();
        for (const auto& i : b.instances) {
            nlohmann::ordered_json row = nlohmann::ordered_json::array();
            row.push_back(i.id);
            if (i.true_label)
                row.push_back(to_int(*i.true_label));
            else
                row.push_back(nullptr);
            row.push_back(i.source_id);
            insts.push_back(std::move(row));
        }
        jb["instances"] = std::move(insts);
        bags.push_back(std::move(jb));
    }
    j["bags"] = std::move(bags);
    return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
    try {
        if (j.at("format").get<std::string>() != kManifestFormat)
            throw FormatError("unsupported manifest format " + j.at("format").get<std::string>());
        DatasetManifest m;
        m.dataset_id = j.at("dataset_id").get<std::string>();
        m.height = j.at("image_size").at(0).get<int>();
        m.width = j.at("image_size").at(1).get<int>();
        m.generator_config_hash = j.value("generator_config_hash", "");
        m.color_predicate = j.value("color_predicate", "");
        m.channel_stats.mean = j.at("channel_stats").at("mean").get<std::array<double, 3>>();
        m.channel_stats.std = j.at("channel_stats").at("std").get<std::array<double, 3>>();
        for (const auto& jb : j.at("bags")) {
            Bag b;
            b.id = jb.at("bag_id").get<std::string>();
            b.label = label_from_int(jb.at("label").get<int>());
            b.source_split = jb.value("source_split", "");
            for (const auto& row : jb.at("instances")) {
                InstanceInfo inst;
                inst.id = row.at(0).get<std::string>();
                if (!row.at(1).is_null()) inst.true_label = label_from_int(row.at(1).get<int>());
                inst.source_id = row.size() > 2 ? row.at(2).get<std::string>() : "";
                b.instances.push_back(std::move(inst));
            }
            m.bags.push_back(std::move(b));
        }
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed manifest: ") + e.what());
    }
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("write failed: " + path.string());
}

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline std::filesystem::path image_path(const std::filesystem::path& root, const Bag& bag, const InstanceInfo& inst) {
    return root / "images" / bag.id / (inst.id + ".png");
}

// Layout: <root>/manifest.json and <root>/images/<bag_id>/<instance_id>.png.
// Writing the same inputs twice produces identical bytes.
inline void write_dataset(const DatasetManifest& manifest, const std::unordered_map<std::string, Image>& images,
                          const std::filesystem::path& root) {
    validate_manifest(manifest);
    for (const auto& bag : manifest.bags)
        for (const auto& inst : bag.instances) {
            auto it = images.find(inst.id);
            if (it == images.end()) throw StructuralError("no image for instance " + inst.id);
            const Image& img = it->second;
            if (img.height != manifest.height || img.width != manifest.width || img.channels != 3)
                throw FormatError("image " + inst.id + " does not match the declared size");
        }
    std::error_code ec;
    std::filesystem::create_directories(root / "images", ec);
    if (ec) throw IoError("cannot create " + (root / "images").string() + ": " + ec.message());
    for (const auto& bag : manifest.bags) {
        std::filesystem::create_directories(root / "images" / bag.id, ec);
        if (ec) throw IoError("cannot create bag directory for " + bag.id + ": " + ec.message());
        for (const auto& inst : bag.instances) png::write(image_path(root, bag, inst), images.at(inst.id));
    }
    write_text_file(root / kManifestFile, manifest_to_json(manifest).dump(1) + "\n");
}

inline void write_dataset(const Dataset& ds, const std::filesystem::path& root) {
    write_dataset(ds.manifest, ds.images, root);
}

enum class ImageCheck {
    pixels,   // decode every image and verify channel stats
    headers,  // check that every image file exists with the declared size
    none,     // manifest only
};

struct LoadOptions {
    ImageCheck check = ImageCheck::pixels;
    double stats_rel_tolerance = 1e-6;
};

inline DatasetManifest load_manifest(const std::filesystem::path& root) {
    const auto path = root / kManifestFile;
    if (!std::filesystem::exists(path)) throw StructuralError("missing manifest: " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("manifest is not valid JSON: ") + e.what());
    }
    auto m = manifest_from_json(j);
    validate_manifest(m);
    return m;
}

inline Dataset load_dataset(const std::filesystem::path& root, const LoadOptions& opts = {}) {
    Dataset ds;
    ds.manifest = load_manifest(root);
    const auto& m = ds.manifest;
    if (opts.check == ImageCheck::none) return ds;
    for (const auto& bag : m.bags)
        for (const auto& inst : bag.instances) {
            const auto path = image_path(root, bag, inst);
            if (!std::filesystem::exists(path)) throw StructuralError("missing image file " + path.string());
            if (opts.check == ImageCheck::headers) {
                const auto h = png::read_header(path);
                if (h.height != m.height || h.width != m.width || h.channels != 3)
                    throw FormatError("image " + inst.id + " does not match the declared size");
                continue;
            }
            Image img = png::read(path);
            if (img.height != m.height || img.width != m.width || img.channels != 3)
                throw FormatError("image " + inst.id + " does not match the declared size");
            ds.images.emplace(inst.id, std::move(img));
        }
    if (opts.check == ImageCheck::pixels) {
        const auto stats = compute_channel_stats(m, ds.images);
        for (int c = 0; c < 3; ++c) {
            auto close = [&](double a, double b) {
                return std::abs(a - b) <= opts.stats_rel_tolerance * std::max(std::abs(b), 1e-12);
            };
            if (!close(m.channel_stats.mean[c], stats.mean[c]) || !close(m.channel_stats.std[c], stats.std[c]))
                throw ConsistencyError("manifest channel_stats do not match the pixel data");
        }
    }
    return ds;
}

}  // namespace milbench
