#include "memmamba/image_io.hpp"

#include <jpeglib.h>
#include <png.h>

#include <cstdio>
#include <cstring>
#include <fstream>

#include "memmamba/errors.hpp"

namespace memmamba {

namespace {

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open image file: " + path);
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in),
                                     std::istreambuf_iterator<char>());
}

Image decode_png(const std::string& path) {
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.c_str())) {
        throw DataError("PNG decode failed for " + path + ": " + img.message);
    }
    img.format = PNG_FORMAT_RGB;
    Image out;
    out.width = img.width;
    out.height = img.height;
    out.channels = 3;
    out.pixels.resize(static_cast<std::size_t>(PNG_IMAGE_SIZE(img)));
    if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
        png_image_free(&img);
        throw DataError("PNG decode failed for " + path + ": " + img.message);
    }
    return out;
}

struct JpegErrorMgr {
    jpeg_error_mgr pub;
    std::string message;
};

void jpeg_error_exit(j_common_ptr cinfo) {
    char buf[JMSG_LENGTH_MAX];
    (*cinfo->err->format_message)(cinfo, buf);
    auto* mgr = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
    mgr->message = buf;
    throw DataError("JPEG decode failed: " + mgr->message);
}

Image decode_jpeg(const std::string& path) {
    auto bytes = read_file(path);
    jpeg_decompress_struct cinfo;
    JpegErrorMgr err;
    cinfo.err = jpeg_std_error(&err.pub);
    err.pub.error_exit = jpeg_error_exit;
    jpeg_create_decompress(&cinfo);
    try {
        jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
        jpeg_read_header(&cinfo, TRUE);
        cinfo.out_color_space = JCS_RGB;
        jpeg_start_decompress(&cinfo);
        Image out;
        out.width = cinfo.output_width;
        out.height = cinfo.output_height;
        out.channels = 3;
        out.pixels.resize(static_cast<std::size_t>(out.width * out.height * 3));
        while (cinfo.output_scanline < cinfo.output_height) {
            JSAMPROW row = out.pixels.data() +
                           static_cast<std::size_t>(cinfo.output_scanline) * out.width * 3;
            jpeg_read_scanlines(&cinfo, &row, 1);
        }
        jpeg_finish_decompress(&cinfo);
        jpeg_destroy_decompress(&cinfo);
        return out;
    } catch (const DataError&) {
        jpeg_destroy_decompress(&cinfo);
        throw DataError("JPEG decode failed for " + path + ": " + err.message);
    }
}

std::uint32_t read_u32le(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

// Uncompressed 8/24/32-bit BMP.
Image decode_bmp(const std::string& path) {
    auto bytes = read_file(path);
    if (bytes.size() < 54 || bytes[0] != 'B' || bytes[1] != 'M') {
        throw DataError("BMP decode failed for " + path + ": bad header");
    }
    const std::uint32_t data_offset = read_u32le(&bytes[10]);
    const std::uint32_t header_size = read_u32le(&bytes[14]);
    if (header_size < 40) throw DataError("BMP decode failed for " + path + ": old header");
    const auto width = static_cast<std::int32_t>(read_u32le(&bytes[18]));
    const auto height_raw = static_cast<std::int32_t>(read_u32le(&bytes[22]));
    const std::uint16_t bpp = static_cast<std::uint16_t>(bytes[28] | (bytes[29] << 8));
    const std::uint32_t compression = read_u32le(&bytes[30]);
    if (compression != 0 || (bpp != 8 && bpp != 24 && bpp != 32) || width <= 0) {
        throw DataError("BMP decode failed for " + path + ": unsupported variant");
    }
    const bool flipped = height_raw > 0;
    const std::int64_t height = flipped ? height_raw : -height_raw;
    const std::int64_t row_bytes = ((width * bpp / 8) + 3) / 4 * 4;
    if (bytes.size() < data_offset + static_cast<std::size_t>(row_bytes * height)) {
        throw DataError("BMP decode failed for " + path + ": truncated pixel data");
    }

    // palette for 8-bit
    const std::uint8_t* palette = nullptr;
    if (bpp == 8) {
        palette = bytes.data() + 14 + header_size;
        if (14 + header_size + 256 * 4 > data_offset) {
            // smaller palettes are legal; grayscale fallback below handles it
        }
    }

    Image out;
    out.width = width;
    out.height = height;
    out.channels = 3;
    out.pixels.resize(static_cast<std::size_t>(width) * height * 3);
    for (std::int64_t y = 0; y < height; ++y) {
        const std::int64_t src_y = flipped ? height - 1 - y : y;
        const std::uint8_t* row = bytes.data() + data_offset + src_y * row_bytes;
        for (std::int64_t x = 0; x < width; ++x) {
            std::uint8_t r, g, b;
            if (bpp == 8) {
                const std::uint8_t idx = row[x];
                if (palette && 14 + header_size + (idx + 1) * 4 <= data_offset) {
                    b = palette[idx * 4];
                    g = palette[idx * 4 + 1];
                    r = palette[idx * 4 + 2];
                } else {
                    r = g = b = idx;
                }
            } else {
                const std::uint8_t* px = row + x * (bpp / 8);
                b = px[0];
                g = px[1];
                r = px[2];
            }
            auto* dst = &out.pixels[static_cast<std::size_t>((y * width + x) * 3)];
            dst[0] = r;
            dst[1] = g;
            dst[2] = b;
        }
    }
    return out;
}

}  // namespace

Image decode_image(const std::string& path) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) throw DataError("cannot open image file: " + path);
    std::uint8_t magic[4] = {};
    probe.read(reinterpret_cast<char*>(magic), 4);
    probe.close();
    if (magic[0] == 0x89 && magic[1] == 'P') return decode_png(path);
    if (magic[0] == 0xFF && magic[1] == 0xD8) return decode_jpeg(path);
    if (magic[0] == 'B' && magic[1] == 'M') return decode_bmp(path);
    throw DataError("unrecognized image format: " + path);
}

void write_png_rgb8(const std::string& path, std::int64_t width, std::int64_t height,
                    const std::uint8_t* rgb) {
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(width);
    img.height = static_cast<png_uint_32>(height);
    img.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&img, path.c_str(), 0, rgb, 0, nullptr)) {
        throw DataError("PNG write failed for " + path + ": " + img.message);
    }
}

std::vector<float> resize_bilinear(const std::vector<float>& src, std::int64_t src_h,
                                   std::int64_t src_w, std::int64_t channels, std::int64_t dst_h,
                                   std::int64_t dst_w) {
    std::vector<float> dst(static_cast<std::size_t>(dst_h * dst_w * channels));
    const double sy = static_cast<double>(src_h) / static_cast<double>(dst_h);
    const double sx = static_cast<double>(src_w) / static_cast<double>(dst_w);
    for (std::int64_t y = 0; y < dst_h; ++y) {
        const double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
        std::int64_t y0 = static_cast<std::int64_t>(std::floor(fy));
        const double ty = fy - static_cast<double>(y0);
        std::int64_t y1 = y0 + 1;
        y0 = std::max<std::int64_t>(0, std::min(y0, src_h - 1));
        y1 = std::max<std::int64_t>(0, std::min(y1, src_h - 1));
        for (std::int64_t x = 0; x < dst_w; ++x) {
            const double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
            std::int64_t x0 = static_cast<std::int64_t>(std::floor(fx));
            const double tx = fx - static_cast<double>(x0);
            std::int64_t x1 = x0 + 1;
            x0 = std::max<std::int64_t>(0, std::min(x0, src_w - 1));
            x1 = std::max<std::int64_t>(0, std::min(x1, src_w - 1));
            for (std::int64_t c = 0; c < channels; ++c) {
                const double v00 = src[static_cast<std::size_t>((y0 * src_w + x0) * channels + c)];
                const double v01 = src[static_cast<std::size_t>((y0 * src_w + x1) * channels + c)];
                const double v10 = src[static_cast<std::size_t>((y1 * src_w + x0) * channels + c)];
                const double v11 = src[static_cast<std::size_t>((y1 * src_w + x1) * channels + c)];
                const double top = v00 * (1.0 - tx) + v01 * tx;
                const double bot = v10 * (1.0 - tx) + v11 * tx;
                dst[static_cast<std::size_t>((y * dst_w + x) * channels + c)] =
                    static_cast<float>(top * (1.0 - ty) + bot * ty);
            }
        }
    }
    return dst;
}

}  // namespace memmamba
