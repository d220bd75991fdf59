#pragma once

// PNG (8/16-bit gray or RGB) through libpng, and the "SMAP" saliency format:
// magic "SMAP", u32 width, u32 height, float32 row-major, all little-endian.

#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mrgan/checkpoint.hpp"
#include "mrgan/error.hpp"
#include "mrgan/image.hpp"

namespace mrgan {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace detail

inline Image read_png(const std::filesystem::path& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  require(fp != nullptr, ErrorCode::io, "cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorCode::io, "libpng initialization failed");
  }
  std::vector<png_bytep> rows;
  std::vector<std::uint8_t> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorCode::format, "malformed PNG: " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_bit_depth(png, info) == 16) png_set_swap(png);  // host little-endian samples
  png_read_update_info(png, info);

  const std::size_t width = png_get_image_width(png, info);
  const std::size_t height = png_get_image_height(png, info);
  const int depth = png_get_bit_depth(png, info);
  const std::size_t channels = png_get_channels(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  buffer.resize(rowbytes * height);
  rows.resize(height);
  for (std::size_t y = 0; y < height; ++y) rows[y] = buffer.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  require(channels == 1 || channels == 3, ErrorCode::format, "PNG must decode to gray or RGB");
  Image img(width, height, channels);
  const double scale = depth == 16 ? 65535.0 : 255.0;
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t c = 0; c < channels; ++c) {
        const std::size_t k = x * channels + c;
        double v = 0;
        if (depth == 16) {
          const auto* p = rows[y] + 2 * k;
          v = static_cast<double>(p[0] | (p[1] << 8));
        } else {
          v = rows[y][k];
        }
        img.at(c, y, x) = static_cast<float>(v / scale);
      }
  return img;
}

/// Writes gray or RGB at 8 or 16 bits; values are clamped to [0,1].
inline void write_png(const std::filesystem::path& path, const Image& img, int bit_depth = 8) {
  require(img.channels == 1 || img.channels == 3, ErrorCode::invalid_argument, "PNG output must be gray or RGB");
  require(bit_depth == 8 || bit_depth == 16, ErrorCode::invalid_argument, "PNG bit depth must be 8 or 16");
  auto tmp = path;
  tmp += ".tmp";
  {
    detail::FilePtr fp(std::fopen(tmp.c_str(), "wb"));
    require(fp != nullptr, ErrorCode::io, "cannot open " + tmp.string() + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
      png_destroy_write_struct(&png, &info);
      throw Error(ErrorCode::io, "libpng initialization failed");
    }
    const std::size_t bytes = bit_depth / 8;
    const std::size_t rowbytes = img.width * img.channels * bytes;
    std::vector<std::uint8_t> buffer(rowbytes * img.height);
    std::vector<png_bytep> rows(img.height);
    const double scale = bit_depth == 16 ? 65535.0 : 255.0;
    for (std::size_t y = 0; y < img.height; ++y) {
      rows[y] = buffer.data() + y * rowbytes;
      for (std::size_t x = 0; x < img.width; ++x)
        for (std::size_t c = 0; c < img.channels; ++c) {
          const double v = std::clamp(static_cast<double>(img.at(c, y, x)), 0.0, 1.0);
          const auto q = static_cast<std::uint32_t>(std::lround(v * scale));
          const std::size_t k = (x * img.channels + c) * bytes;
          if (bit_depth == 16) {
            rows[y][k] = static_cast<std::uint8_t>(q >> 8);  // PNG is big-endian
            rows[y][k + 1] = static_cast<std::uint8_t>(q & 0xff);
          } else {
            rows[y][k] = static_cast<std::uint8_t>(q);
          }
        }
    }
    if (setjmp(png_jmpbuf(png))) {
      png_destroy_write_struct(&png, &info);
      throw Error(ErrorCode::io, "PNG encoding failed: " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), bit_depth,
                 img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
  }
  std::filesystem::rename(tmp, path);
}

inline std::vector<std::uint8_t> encode_smap(const SaliencyMap& m) {
  std::vector<std::uint8_t> out{'S', 'M', 'A', 'P'};
  detail::put_u32(out, static_cast<std::uint32_t>(m.width));
  detail::put_u32(out, static_cast<std::uint32_t>(m.height));
  for (double v : m.values) detail::put_f32(out, static_cast<float>(v));
  return out;
}

inline SaliencyMap decode_smap(std::span<const std::uint8_t> bytes) {
  detail::ByteReader in(bytes);
  require(in.str(4) == "SMAP", ErrorCode::format, "not an SMAP file");
  const std::uint32_t w = in.u32(), h = in.u32();
  SaliencyMap m(w, h);
  for (auto& v : m.values) v = in.f32();
  require(in.done(), ErrorCode::format, "trailing bytes in SMAP file");
  return m;
}

inline void write_smap(const std::filesystem::path& path, const SaliencyMap& m) {
  write_file_atomic(path, encode_smap(m));
}

inline SaliencyMap read_smap(const std::filesystem::path& path) { return decode_smap(read_file(path)); }

/// Grayscale preview scaled by the map maximum.
inline void write_saliency_preview(const std::filesystem::path& path, const SaliencyMap& m) {
  write_png(path, to_image(normalize_max(m)), 8);
}

/// Loads a saliency map from .smap or a grayscale/RGB PNG (first channel).
inline SaliencyMap read_saliency(const std::filesystem::path& path) {
  if (path.extension() == ".smap") return read_smap(path);
  return to_saliency(read_png(path), 0);
}

}  // namespace mrgan
