#pragma once

#include <png.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "panopix/common.hpp"
#include "panopix/image.hpp"

// Thin libpng wrappers: 16-bit grayscale (panoptic maps) and 8-bit RGB
// (images), to and from memory buffers, with file helpers. 16-bit samples are
// packed big-endian as the PNG format requires.

namespace panopix {
namespace detail {

inline void png_append_cb(png_structp png, png_bytep data, png_size_t len) {
  auto* out = static_cast<std::vector<uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + len);
}

inline void png_flush_cb(png_structp) {}

struct PngReadCursor {
  const uint8_t* data;
  size_t size;
  size_t pos;
};

inline void png_read_cb(png_structp png, png_bytep dst, png_size_t len) {
  auto* cur = static_cast<PngReadCursor*>(png_get_io_ptr(png));
  if (cur->pos + len > cur->size) png_error(png, "unexpected end of stream");
  std::memcpy(dst, cur->data + cur->pos, len);
  cur->pos += len;
}

}  // namespace detail

inline std::vector<uint8_t> encode_png_gray16(const std::vector<uint16_t>& pixels, int64_t width,
                                              int64_t height) {
  if (width < 1 || height < 1 || pixels.size() != static_cast<size_t>(width * height))
    throw DataError("png: pixel buffer does not match dimensions");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (png == nullptr) throw DataError("png: writer allocation failed");
  png_infop info = png_create_info_struct(png);
  if (info == nullptr) {
    png_destroy_write_struct(&png, nullptr);
    throw DataError("png: info allocation failed");
  }
  std::vector<uint8_t> out;
  std::vector<uint8_t> row(static_cast<size_t>(width) * 2);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("png: encode failed");
  }
  png_set_write_fn(png, &out, detail::png_append_cb, detail::png_flush_cb);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 16,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int64_t y = 0; y < height; ++y) {
    for (int64_t x = 0; x < width; ++x) {
      uint16_t v = pixels[static_cast<size_t>(y * width + x)];
      row[static_cast<size_t>(2 * x)] = static_cast<uint8_t>(v >> 8);
      row[static_cast<size_t>(2 * x + 1)] = static_cast<uint8_t>(v & 0xff);
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

inline std::vector<uint16_t> decode_png_gray16(const std::vector<uint8_t>& bytes, int64_t* width,
                                               int64_t* height) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (png == nullptr) throw DataError("png: reader allocation failed");
  png_infop info = png_create_info_struct(png);
  if (info == nullptr) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw DataError("png: info allocation failed");
  }
  detail::PngReadCursor cur{bytes.data(), bytes.size(), 0};
  std::vector<uint16_t> pixels;
  std::vector<uint8_t> row;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("png: malformed stream");
  }
  png_set_read_fn(png, &cur, detail::png_read_cb);
  png_read_info(png, info);
  png_uint_32 w = png_get_image_width(png, info);
  png_uint_32 h = png_get_image_height(png, info);
  int depth = png_get_bit_depth(png, info);
  int color = png_get_color_type(png, info);
  if (depth != 16 || color != PNG_COLOR_TYPE_GRAY) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("png: expected 16-bit grayscale, got depth " + std::to_string(depth) +
                    " color type " + std::to_string(color));
  }
  pixels.resize(static_cast<size_t>(w) * h);
  row.resize(static_cast<size_t>(w) * 2);
  for (png_uint_32 y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (png_uint_32 x = 0; x < w; ++x)
      pixels[static_cast<size_t>(y) * w + x] = static_cast<uint16_t>(
          (static_cast<uint16_t>(row[2 * x]) << 8) | row[2 * x + 1]);
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  *width = w;
  *height = h;
  return pixels;
}

// Image values are clamped to [0,1] and quantized to 8 bits with rounding.
inline std::vector<uint8_t> encode_png_rgb8(const Image& img) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (png == nullptr) throw DataError("png: writer allocation failed");
  png_infop info = png_create_info_struct(png);
  if (info == nullptr) {
    png_destroy_write_struct(&png, nullptr);
    throw DataError("png: info allocation failed");
  }
  std::vector<uint8_t> out;
  std::vector<uint8_t> row(static_cast<size_t>(img.width) * 3);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("png: encode failed");
  }
  png_set_write_fn(png, &out, detail::png_append_cb, detail::png_flush_cb);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
               static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int64_t y = 0; y < img.height; ++y) {
    for (int64_t x = 0; x < img.width; ++x)
      for (int64_t c = 0; c < 3; ++c)
        row[static_cast<size_t>(3 * x + c)] =
            static_cast<uint8_t>(std::lround(clamp01(img.at(c, y, x)) * 255.0));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

inline Image decode_png_rgb8(const std::vector<uint8_t>& bytes) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (png == nullptr) throw DataError("png: reader allocation failed");
  png_infop info = png_create_info_struct(png);
  if (info == nullptr) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw DataError("png: info allocation failed");
  }
  detail::PngReadCursor cur{bytes.data(), bytes.size(), 0};
  Image img;
  std::vector<uint8_t> row;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("png: malformed stream");
  }
  png_set_read_fn(png, &cur, detail::png_read_cb);
  png_read_info(png, info);
  png_uint_32 w = png_get_image_width(png, info);
  png_uint_32 h = png_get_image_height(png, info);
  int depth = png_get_bit_depth(png, info);
  int color = png_get_color_type(png, info);
  if (depth != 8 || color != PNG_COLOR_TYPE_RGB) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("png: expected 8-bit RGB, got depth " + std::to_string(depth) +
                    " color type " + std::to_string(color));
  }
  img = Image(static_cast<int64_t>(h), static_cast<int64_t>(w));
  row.resize(static_cast<size_t>(w) * 3);
  for (png_uint_32 y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (png_uint_32 x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c)
        img.at(c, static_cast<int64_t>(y), static_cast<int64_t>(x)) =
            static_cast<float>(row[3 * x + static_cast<size_t>(c)]) / 255.f;
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

inline void write_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("write failed: " + path);
}

inline std::vector<uint8_t> read_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw DataError("cannot open: " + path);
  std::streamsize n = f.tellg();
  f.seekg(0);
  std::vector<uint8_t> bytes(static_cast<size_t>(n));
  f.read(reinterpret_cast<char*>(bytes.data()), n);
  if (!f) throw DataError("read failed: " + path);
  return bytes;
}

}  // namespace panopix
