#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "etap/error.hpp"
#include "etap/io.hpp"

#ifdef ETAP_WITH_PNG
#include <png.h>
#endif

namespace etap {

/// Single-channel intensity image, row-major, values nominally in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  std::vector<double> data;

  Image() = default;
  Image(int w, int h, double fill = 0.0)
      : width(w), height(h), data(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), fill) {}

  double& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
  double at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }

  friend bool operator==(const Image&, const Image&) = default;
};

inline std::uint8_t quantize8(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Binary PGM (P5), 8-bit.
inline std::string encode_pgm(const Image& img) {
  std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.reserve(out.size() + img.data.size());
  for (double v : img.data) out.push_back(static_cast<char>(quantize8(v)));
  return out;
}

inline Image decode_pgm(std::string_view data) {
  std::size_t pos = 0;
  auto next_token = [&]() {
    while (pos < data.size()) {
      if (data[pos] == '#') {
        while (pos < data.size() && data[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(data[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < data.size() && !std::isspace(static_cast<unsigned char>(data[pos]))) ++pos;
    return std::string(data.substr(start, pos - start));
  };
  if (next_token() != "P5") fail(ErrorCode::Format, "only binary PGM (P5) is supported");
  const int w = static_cast<int>(io::to_int(next_token()));
  const int h = static_cast<int>(io::to_int(next_token()));
  const int maxval = static_cast<int>(io::to_int(next_token()));
  if (w <= 0 || h <= 0 || maxval != 255) fail(ErrorCode::Format, "unsupported PGM header");
  ++pos;  // single whitespace before raster
  if (data.size() < pos + static_cast<std::size_t>(w) * h) fail(ErrorCode::Format, "truncated PGM");
  Image img(w, h);
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    img.data[i] = static_cast<unsigned char>(data[pos + i]) / 255.0;
  }
  return img;
}

#ifdef ETAP_WITH_PNG
inline Image read_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    fail(ErrorCode::Format, "cannot read PNG " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&image);
    fail(ErrorCode::Format, "cannot decode PNG " + path.string() + ": " + image.message);
  }
  Image img(static_cast<int>(image.width), static_cast<int>(image.height));
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = buffer[i] / 255.0;
  return img;
}

inline void write_png(const std::filesystem::path& path, const Image& img) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buffer(img.data.size());
  for (std::size_t i = 0; i < buffer.size(); ++i) buffer[i] = quantize8(img.data[i]);
  if (!png_image_write_to_file(&image, path.c_str(), 0, buffer.data(), 0, nullptr)) {
    fail(ErrorCode::Io, "cannot write PNG " + path.string() + ": " + image.message);
  }
}
#endif

inline Image read_image(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".pgm") return decode_pgm(io::read_text(path));
#ifdef ETAP_WITH_PNG
  if (ext == ".png") return read_png(path);
#endif
  fail(ErrorCode::Format, "unsupported image type " + path.string());
}

}  // namespace etap
