#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace milbench {

// 8-bit image, interleaved channels, row-major (HWC).
struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<std::uint8_t> pixels;

    Image() = default;
    Image(int h, int w, int c, std::uint8_t fill = 0)
        : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h) * w * c, fill) {}

    [[nodiscard]] std::size_t size() const { return pixels.size(); }
    [[nodiscard]] bool empty() const { return pixels.empty(); }

    std::uint8_t& at(int y, int x, int c = 0) {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    [[nodiscard]] std::uint8_t at(int y, int x, int c = 0) const {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }

    [[nodiscard]] std::span<const std::uint8_t> view() const { return pixels; }

    bool operator==(const Image&) const = default;
};

inline std::uint8_t clamp_u8(double v) {
    if (!(v > 0.0)) return 0;
    if (v >= 255.0) return 255;
    return static_cast<std::uint8_t>(v + 0.5);
}

}  // namespace milbench
