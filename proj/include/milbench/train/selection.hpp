#pragma once

#include <cstddef>
#include <span>

#include "milbench/core/errors.hpp"

namespace milbench::train {

enum class Direction { maximize, minimize };

// Picks the contiguous window of length min(window, n) with the best mean,
// then the best raw value inside it. Ties go to the earliest window/epoch.
inline std::size_t select_checkpoint(std::span<const double> series, std::size_t window, Direction better) {
    if (series.empty()) throw DataError("select_checkpoint needs at least one epoch");
    if (window == 0) throw ConfigError("selection window must be positive");
    const std::size_t n = series.size();
    const std::size_t w = std::min(window, n);
    auto improves = [&](double candidate, double incumbent) {
        return better == Direction::maximize ? candidate > incumbent : candidate < incumbent;
    };
    std::size_t best_start = 0;
    double best_avg = 0.0;
    for (std::size_t start = 0; start + w <= n; ++start) {
        double sum = 0.0;
        for (std::size_t i = start; i < start + w; ++i) sum += series[i];
        const double avg = sum / static_cast<double>(w);
        if (start == 0 || improves(avg, best_avg)) {
            best_avg = avg;
            best_start = start;
        }
    }
    std::size_t best = best_start;
    for (std::size_t i = best_start + 1; i < best_start + w; ++i)
        if (improves(series[i], series[best])) best = i;
    return best;
}

}  // namespace milbench::train
