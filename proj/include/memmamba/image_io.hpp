#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace memmamba {

// 8-bit interleaved pixels, channels is 1 (gray) or 3 (RGB).
struct Image {
    std::int64_t width = 0;
    std::int64_t height = 0;
    std::int64_t channels = 0;
    std::vector<std::uint8_t> pixels;
};

// Decodes PNG, JPEG or BMP, picked by magic bytes. Throws DataError with the
// path on undecodable input.
Image decode_image(const std::string& path);

void write_png_rgb8(const std::string& path, std::int64_t width, std::int64_t height,
                    const std::uint8_t* rgb);

// Bilinear resize of interleaved float pixels (half-pixel centers, edge
// clamped).
std::vector<float> resize_bilinear(const std::vector<float>& src, std::int64_t src_h,
                                   std::int64_t src_w, std::int64_t channels, std::int64_t dst_h,
                                   std::int64_t dst_w);

}  // namespace memmamba
