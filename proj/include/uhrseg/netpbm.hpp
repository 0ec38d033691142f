#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace uhrseg {

/// 8-bit RGB image, row-major, interleaved (r,g,b per pixel).
struct ImageU8 {
    int64_t h = 0, w = 0;
    std::vector<uint8_t> rgb; // 3*h*w

    uint8_t& at(int64_t y, int64_t x, int64_t ch) {
        return rgb[static_cast<size_t>((y * w + x) * 3 + ch)];
    }
    uint8_t at(int64_t y, int64_t x, int64_t ch) const {
        return rgb[static_cast<size_t>((y * w + x) * 3 + ch)];
    }
};

/// Per-pixel class ids (one byte each).
struct LabelMap {
    int64_t h = 0, w = 0;
    std::vector<uint8_t> v; // h*w

    uint8_t& at(int64_t y, int64_t x) { return v[static_cast<size_t>(y * w + x)]; }
    uint8_t at(int64_t y, int64_t x) const { return v[static_cast<size_t>(y * w + x)]; }
};

/// Binary PPM (P6, maxval 255). Throws IoError with a byte offset on
/// malformed magic/header/truncation.
void write_ppm(const std::string& path, const ImageU8& img);
ImageU8 read_ppm(const std::string& path);

/// Binary PGM (P5, maxval 255), one class id per byte.
void write_pgm(const std::string& path, const LabelMap& labels);
LabelMap read_pgm(const std::string& path);

} // namespace uhrseg
