#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "milbench/core/dataset.hpp"
#include "milbench/core/errors.hpp"
#include "milbench/core/image.hpp"
#include "milbench/core/png_io.hpp"
#include "milbench/synth/image_ops.hpp"

namespace milbench::harness {

struct MosaicSpec {
    int k = 36;
    int rows = 6;
    int cols = 6;
    int cell_height = 0;  // 0: use the instance image size
    int cell_width = 0;
};

inline void validate(const MosaicSpec& s) {
    if (s.k < 1 || s.rows < 1 || s.cols < 1) throw ConfigError("mosaic k and grid must be positive");
    if (s.rows * s.cols != s.k) throw ConfigError("mosaic grid rows*cols must equal k");
    if (s.cell_height < 0 || s.cell_width < 0) throw ConfigError("mosaic cell size must be nonnegative");
}

inline nlohmann::ordered_json to_json(const MosaicSpec& s) {
    return {{"k", s.k}, {"rows", s.rows}, {"cols", s.cols}, {"cell_height", s.cell_height}, {"cell_width", s.cell_width}};
}

inline MosaicSpec mosaic_spec_from_json(const nlohmann::json& j, MosaicSpec s = {}) {
    s.k = j.value("k", s.k);
    s.rows = j.value("rows", s.rows);
    s.cols = j.value("cols", s.cols);
    s.cell_height = j.value("cell_height", s.cell_height);
    s.cell_width = j.value("cell_width", s.cell_width);
    return s;
}

using ScoredInstance = std::pair<std::string, double>;

// Highest scores first; equal scores ordered by instance id.
inline std::vector<ScoredInstance> top_k(std::vector<ScoredInstance> scored, int k) {
    std::sort(scored.begin(), scored.end(), [](const ScoredInstance& a, const ScoredInstance& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    if (static_cast<int>(scored.size()) > k) scored.resize(static_cast<std::size_t>(k));
    return scored;
}

// Row-major grid of the top-k instances; unused cells stay white.
inline Image build_mosaic(const std::vector<ScoredInstance>& scored, const Dataset& ds, const MosaicSpec& spec) {
    validate(spec);
    const int ch = spec.cell_height > 0 ? spec.cell_height : ds.manifest.height;
    const int cw = spec.cell_width > 0 ? spec.cell_width : ds.manifest.width;
    Image out;
    out.height = spec.rows * ch;
    out.width = spec.cols * cw;
    out.channels = 3;
    out.pixels.assign(static_cast<std::size_t>(out.height) * out.width * 3, 255);
    const auto chosen = top_k(scored, spec.k);
    for (std::size_t n = 0; n < chosen.size(); ++n) {
        Image cell = ds.image(chosen[n].first);
        if (cell.height != ch || cell.width != cw) cell = synth::resize_bilinear(cell, ch, cw);
        const int r0 = static_cast<int>(n) / spec.cols * ch, c0 = static_cast<int>(n) % spec.cols * cw;
        for (int y = 0; y < ch; ++y)
            for (int x = 0; x < cw; ++x)
                for (int c = 0; c < 3; ++c) out.at(r0 + y, c0 + x, c) = cell.at(y, x, cell.channels == 3 ? c : 0);
    }
    return out;
}

// Writes the mosaic PNG plus a sidecar listing the placed instances.
inline void export_mosaic(const std::filesystem::path& png_path, const std::string& bag_id,
                          const std::vector<ScoredInstance>& scored, const Dataset& ds, const MosaicSpec& spec) {
    const Bag& bag = ds.manifest.bag(bag_id);
    if (scored.size() != bag.instances.size()) throw DataError("mosaic needs a score for every instance of " + bag_id);
    std::filesystem::create_directories(png_path.parent_path());
    png::write(png_path, build_mosaic(scored, ds, spec));
    auto cells = nlohmann::ordered_json::array();
    for (const auto& [id, score] : top_k(scored, spec.k)) cells.push_back({{"instance_id", id}, {"score", score}});
    nlohmann::ordered_json j;
    j["bag_id"] = bag_id;
    j["spec"] = to_json(spec);
    j["cells"] = cells;
    auto sidecar = png_path;
    sidecar.replace_extension(".json");
    write_text_file(sidecar, j.dump(1) + "\n");
}

}  // namespace milbench::harness
