#pragma once

#include <png.h>

#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "milbench/core/errors.hpp"
#include "milbench/core/image.hpp"

namespace milbench::png {

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline int color_type_for(int channels) {
    switch (channels) {
        case 1: return PNG_COLOR_TYPE_GRAY;
        case 3: return PNG_COLOR_TYPE_RGB;
        case 4: return PNG_COLOR_TYPE_RGB_ALPHA;
        default: throw FormatError("png: unsupported channel count " + std::to_string(channels));
    }
}

}  // namespace detail

// Writes an 8-bit PNG. Output bytes depend only on the pixels: no timestamps
// or text chunks, fixed compression settings.
inline void write(const std::filesystem::path& path, const Image& img) {
    detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot open for writing: " + path.string());

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IoError("png: allocation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("png: write failed: " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_compression_level(png, 9);
    png_set_filter(png, 0, PNG_FILTER_NONE);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 detail::color_type_for(img.channels), PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
    for (int y = 0; y < img.height; ++y) {
        png_write_row(png, const_cast<png_bytep>(img.pixels.data() + y * stride));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

struct Header {
    int height = 0;
    int width = 0;
    int channels = 0;
};

namespace detail {

struct Reader {
    FilePtr fp;
    png_structp png = nullptr;
    png_infop info = nullptr;

    explicit Reader(const std::filesystem::path& path) : fp(std::fopen(path.c_str(), "rb")) {
        if (!fp) throw IoError("cannot open: " + path.string());
        unsigned char sig[8];
        if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
            throw FormatError("not a PNG file: " + path.string());
        png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
        info = png ? png_create_info_struct(png) : nullptr;
        if (!png || !info) throw IoError("png: allocation failed");
        png_init_io(png, fp.get());
        png_set_sig_bytes(png, 8);
    }
    ~Reader() { png_destroy_read_struct(&png, &info, nullptr); }
    Reader(const Reader&) = delete;
    Reader& operator=(const Reader&) = delete;
};

}  // namespace detail

inline Header read_header(const std::filesystem::path& path) {
    detail::Reader r(path);
    if (setjmp(png_jmpbuf(r.png))) throw FormatError("png: corrupt header: " + path.string());
    png_read_info(r.png, r.info);
    Header h;
    h.width = static_cast<int>(png_get_image_width(r.png, r.info));
    h.height = static_cast<int>(png_get_image_height(r.png, r.info));
    h.channels = png_get_channels(r.png, r.info);
    return h;
}

// Reads an 8-bit gray/RGB/RGBA PNG without conversion.
inline Image read(const std::filesystem::path& path) {
    detail::Reader r(path);
    Image img;
    if (setjmp(png_jmpbuf(r.png))) throw FormatError("png: corrupt file: " + path.string());
    png_read_info(r.png, r.info);
    if (png_get_bit_depth(r.png, r.info) != 8) throw FormatError("png: expected 8-bit depth: " + path.string());
    const int ct = png_get_color_type(r.png, r.info);
    if (ct == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(r.png);
    png_read_update_info(r.png, r.info);
    img.width = static_cast<int>(png_get_image_width(r.png, r.info));
    img.height = static_cast<int>(png_get_image_height(r.png, r.info));
    img.channels = png_get_channels(r.png, r.info);
    img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * img.channels);
    std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
    const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
    for (int y = 0; y < img.height; ++y) rows[y] = img.pixels.data() + y * stride;
    png_read_image(r.png, rows.data());
    png_read_end(r.png, nullptr);
    return img;
}

}  // namespace milbench::png
