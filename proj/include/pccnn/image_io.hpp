#pragma once

#include <png.h>

#include <cctype>
#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "pccnn/data.hpp"

// PGM / PNG import and export plus the on-disk dataset cache.
// Exported pixels are display values: level * 255 / (K - 1).

namespace pccnn {

namespace detail {

inline std::vector<std::uint8_t> to_display(const Image& img) {
  std::vector<std::uint8_t> out(img.pixels().size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<std::uint8_t>(display_value(img.pixels()[i], img.levels()));
  }
  return out;
}

inline Image from_display(int h, int w, int c, const std::vector<std::uint8_t>& raw, int levels) {
  std::vector<std::uint8_t> px(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) px[i] = static_cast<std::uint8_t>(requantize_level(raw[i], levels));
  return Image(Signature{h, w, c, levels}, std::move(px));
}

}  // namespace detail

/// Binary PGM (P5, maxval 255) of a single-channel image.
inline std::vector<std::uint8_t> encode_pgm(const Image& img) {
  if (img.channels() != 1) throw ValidationError("PGM export needs one channel, got " + img.signature().to_string());
  const std::string header =
      "P5\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  const auto px = detail::to_display(img);
  out.insert(out.end(), px.begin(), px.end());
  return out;
}

inline void write_pgm(const std::filesystem::path& path, const Image& img) {
  detail::write_file(path, encode_pgm(img));
}

/// Reads a P5 PGM with maxval 255 and maps it to `levels` levels.
inline Image decode_pgm(std::span<const std::uint8_t> bytes, int levels = 256, const std::string& name = "pgm") {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) t.push_back(static_cast<char>(bytes[pos++]));
    return t;
  };
  if (token() != "P5") throw FormatError(name + ": not a binary PGM (P5)");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw FormatError(name + ": malformed PGM header");
  }
  if (maxval != 255 || w < 1 || h < 1) throw FormatError(name + ": unsupported PGM header (maxval must be 255)");
  ++pos;  // single whitespace after maxval
  const std::size_t n = static_cast<std::size_t>(w) * h;
  if (pos + n > bytes.size()) {
    throw FormatError(name + ": truncated PGM, missing " + std::to_string(pos + n - bytes.size()) + " bytes");
  }
  std::vector<std::uint8_t> raw(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return detail::from_display(h, w, 1, raw, levels);
}

inline Image read_pgm(const std::filesystem::path& path, int levels = 256) {
  return decode_pgm(detail::read_file(path), levels, path.string());
}

/// 8-bit gray or RGB PNG of an image (1 or 3 channels).
inline void write_png(const std::filesystem::path& path, const Image& img) {
  if (img.channels() != 1 && img.channels() != 3) {
    throw ValidationError("PNG export needs 1 or 3 channels, got " + img.signature().to_string());
  }
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw RuntimeFault("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw RuntimeFault("libpng initialisation failed");
  }
  auto px = detail::to_display(img);
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height()));
  const std::size_t stride = static_cast<std::size_t>(img.width()) * img.channels();
  for (int y = 0; y < img.height(); ++y) rows[static_cast<std::size_t>(y)] = px.data() + y * stride;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw RuntimeFault("libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width()), static_cast<png_uint_32>(img.height()), 8,
               img.channels() == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Reads an 8-bit gray or RGB PNG (alpha is dropped) and maps it to `levels`.
inline Image read_png(const std::filesystem::path& path, int levels = 256) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!fp) throw RuntimeFault("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw RuntimeFault("libpng initialisation failed");
  }
  std::vector<std::uint8_t> raw;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError(path.string() + ": not a readable PNG");
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_packing(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const int c = png_get_channels(png, info);
  raw.resize(static_cast<std::size_t>(w) * h * c);
  rows.resize(static_cast<std::size_t>(h));
  for (int y = 0; y < h; ++y) rows[static_cast<std::size_t>(y)] = raw.data() + static_cast<std::size_t>(y) * w * c;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  if (c != 1 && c != 3) throw FormatError(path.string() + ": unsupported PNG channel count " + std::to_string(c));
  return detail::from_display(h, w, c, raw, levels);
}

/// Reads PGM or PNG by extension.
inline Image read_image(const std::filesystem::path& path, int levels) {
  return path.extension() == ".png" ? read_png(path, levels) : read_pgm(path, levels);
}

/// PGM for single-channel images, PNG otherwise.
inline std::filesystem::path write_image(const std::filesystem::path& stem, const Image& img) {
  std::filesystem::path p = stem;
  if (img.channels() == 1) {
    p.replace_extension(".pgm");
    write_pgm(p, img);
  } else {
    p.replace_extension(".png");
    write_png(p, img);
  }
  return p;
}

/// Writes `dir/manifest.json` plus one image file per dataset entry.
inline void save_dataset_dir(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  nlohmann::json files = nlohmann::json::array();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "%06zu", i);
    files.push_back(write_image(dir / stem, ds.images[i]).filename().string());
  }
  const nlohmann::json manifest{{"signature",
                                 {{"height", ds.signature.height},
                                  {"width", ds.signature.width},
                                  {"channels", ds.signature.channels},
                                  {"levels", ds.signature.levels}}},
                                {"split", ds.split},
                                {"labels", ds.labels},
                                {"files", files}};
  const std::string text = manifest.dump(2);
  detail::write_file(dir / "manifest.json", std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline Dataset load_dataset_dir(const std::filesystem::path& dir) {
  const auto bytes = detail::read_file(dir / "manifest.json");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((dir / "manifest.json").string() + ": " + e.what());
  }
  Dataset ds;
  const auto& s = manifest.at("signature");
  ds.signature = Signature{s.at("height"), s.at("width"), s.at("channels"), s.at("levels")};
  ds.split = manifest.value("split", "train");
  ds.labels = manifest.value("labels", std::vector<int>{});
  for (const auto& f : manifest.at("files")) {
    Image img = read_image(dir / f.get<std::string>(), ds.signature.levels);
    if (img.signature() != ds.signature) {
      throw FormatError((dir / f.get<std::string>()).string() + ": image " + img.signature().to_string() +
                        " disagrees with manifest " + ds.signature.to_string());
    }
    ds.images.push_back(std::move(img));
  }
  return ds;
}

}  // namespace pccnn
