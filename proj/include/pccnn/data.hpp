#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "pccnn/image.hpp"

namespace pccnn {

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

namespace detail {

inline std::string hex32(std::uint32_t v) {
  std::ostringstream os;
  os << "0x" << std::hex;
  os.width(8);
  os.fill('0');
  os << v;
  return os.str();
}

inline std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset, const std::string& what) {
  if (offset + 4 > bytes.size()) {
    throw FormatError(what + ": truncated header at byte offset " + std::to_string(offset) + " (file has " +
                      std::to_string(bytes.size()) + " bytes)");
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

inline void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(v >> shift));
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeFault("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFault("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw RuntimeFault("short write to " + path.string());
}

}  // namespace detail

/// Decodes an IDX image stream into 8-bit grayscale images (K = 256).
inline Dataset decode_idx_images(std::span<const std::uint8_t> bytes, const std::string& name = "idx") {
  const std::uint32_t magic = detail::read_be32(bytes, 0, name);
  if (magic != kIdxImageMagic) {
    throw FormatError(name + ": bad magic at byte offset 0: expected " + detail::hex32(kIdxImageMagic) +
                      ", found " + detail::hex32(magic));
  }
  const std::uint64_t count = detail::read_be32(bytes, 4, name);
  const std::uint64_t rows = detail::read_be32(bytes, 8, name);
  const std::uint64_t cols = detail::read_be32(bytes, 12, name);
  if (rows == 0 || cols == 0 || rows > 65535 || cols > 65535) {
    throw FormatError(name + ": image dimensions " + std::to_string(rows) + "x" + std::to_string(cols) +
                      " out of range at byte offset 8");
  }
  const std::uint64_t plane = rows * cols;
  const std::uint64_t needed = 16 + count * plane;
  if (count > (std::uint64_t{1} << 40) / plane || needed > bytes.size()) {
    const std::uint64_t have = bytes.size() < 16 ? 0 : (bytes.size() - 16) / plane;
    throw FormatError(name + ": truncated at byte offset " + std::to_string(16 + have * plane) + ": header declares " +
                      std::to_string(count) + " images, file holds " + std::to_string(have));
  }
  Dataset ds;
  ds.signature = Signature{static_cast<int>(rows), static_cast<int>(cols), 1, 256};
  ds.images.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto* p = bytes.data() + 16 + i * plane;
    ds.images.emplace_back(ds.signature, std::vector<std::uint8_t>(p, p + plane));
  }
  return ds;
}

inline std::vector<int> decode_idx_labels(std::span<const std::uint8_t> bytes, const std::string& name = "idx") {
  const std::uint32_t magic = detail::read_be32(bytes, 0, name);
  if (magic != kIdxLabelMagic) {
    throw FormatError(name + ": bad magic at byte offset 0: expected " + detail::hex32(kIdxLabelMagic) +
                      ", found " + detail::hex32(magic));
  }
  const std::uint64_t count = detail::read_be32(bytes, 4, name);
  if (8 + count > bytes.size()) {
    throw FormatError(name + ": truncated at byte offset " + std::to_string(bytes.size()) + ": header declares " +
                      std::to_string(count) + " labels");
  }
  return {bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(count)};
}

inline std::vector<std::uint8_t> encode_idx_images(const Dataset& ds) {
  const Signature& s = ds.signature;
  if (s.channels != 1 || s.levels != 256) {
    throw ValidationError("IDX export needs 8-bit single-channel images, got " + s.to_string());
  }
  std::vector<std::uint8_t> out;
  out.reserve(16 + ds.size() * static_cast<std::size_t>(s.height) * s.width);
  detail::write_be32(out, kIdxImageMagic);
  detail::write_be32(out, static_cast<std::uint32_t>(ds.size()));
  detail::write_be32(out, static_cast<std::uint32_t>(s.height));
  detail::write_be32(out, static_cast<std::uint32_t>(s.width));
  for (const Image& img : ds.images) out.insert(out.end(), img.pixels().begin(), img.pixels().end());
  return out;
}

inline std::vector<std::uint8_t> encode_idx_labels(std::span<const int> labels) {
  std::vector<std::uint8_t> out;
  detail::write_be32(out, kIdxLabelMagic);
  detail::write_be32(out, static_cast<std::uint32_t>(labels.size()));
  for (int l : labels) out.push_back(static_cast<std::uint8_t>(l));
  return out;
}

/// Loads an IDX image file and, optionally, its label file.
inline Dataset load_idx(const std::filesystem::path& images_path,
                        const std::optional<std::filesystem::path>& labels_path = std::nullopt) {
  Dataset ds = decode_idx_images(detail::read_file(images_path), images_path.string());
  if (labels_path) {
    ds.labels = decode_idx_labels(detail::read_file(*labels_path), labels_path->string());
    if (ds.labels.size() != ds.size()) {
      throw FormatError(labels_path->string() + ": " + std::to_string(ds.labels.size()) + " labels for " +
                        std::to_string(ds.size()) + " images");
    }
  }
  return ds;
}

/// 1 iff intensity / 255 > 0.5, i.e. raw value >= 128.
inline Dataset binarize(const Dataset& ds) {
  if (ds.signature.levels != 256) {
    throw ValidationError("binarize expects 8-bit input, got " + ds.signature.to_string());
  }
  Dataset out;
  out.signature = ds.signature;
  out.signature.levels = 2;
  out.labels = ds.labels;
  out.split = ds.split;
  out.images.reserve(ds.size());
  for (const Image& img : ds.images) {
    std::vector<std::uint8_t> px(img.pixels().size());
    std::transform(img.pixels().begin(), img.pixels().end(), px.begin(),
                   [](std::uint8_t v) { return static_cast<std::uint8_t>(v / 255.0 > 0.5 ? 1 : 0); });
    out.images.emplace_back(out.signature, std::move(px));
  }
  return out;
}

/// Level of an 8-bit value after truncation to 5 bits.
constexpr int quantize_5bit(int v) noexcept { return v / 8; }

/// Centered crop of an 8-bit image.
inline Image center_crop(const Image& img, int height, int width) {
  if (height > img.height() || width > img.width()) {
    throw ValidationError("crop " + std::to_string(height) + "x" + std::to_string(width) + " exceeds image " +
                          img.signature().to_string());
  }
  const int y0 = (img.height() - height) / 2;
  const int x0 = (img.width() - width) / 2;
  Image out(height, width, img.channels(), img.levels());
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < img.channels(); ++c) out.set(y, x, c, img.at(y0 + y, x0 + x, c));
  return out;
}

/// Box-filter (area-averaging) resize; each output value is the mean over
/// the exact source footprint, rounded to the nearest level.
inline Image resize_area(const Image& img, int height, int width) {
  const double sy = static_cast<double>(img.height()) / height;
  const double sx = static_cast<double>(img.width()) / width;
  Image out(height, width, img.channels(), img.levels());
  auto overlap = [](double a0, double a1, int cell) {
    return std::max(0.0, std::min(a1, cell + 1.0) - std::max(a0, static_cast<double>(cell)));
  };
  for (int y = 0; y < height; ++y) {
    const double y0 = y * sy, y1 = (y + 1) * sy;
    for (int x = 0; x < width; ++x) {
      const double x0 = x * sx, x1 = (x + 1) * sx;
      for (int c = 0; c < img.channels(); ++c) {
        double acc = 0.0, area = 0.0;
        for (int iy = static_cast<int>(y0); iy < std::min(img.height(), static_cast<int>(std::ceil(y1))); ++iy) {
          const double wy = overlap(y0, y1, iy);
          for (int ix = static_cast<int>(x0); ix < std::min(img.width(), static_cast<int>(std::ceil(x1))); ++ix) {
            const double w = wy * overlap(x0, x1, ix);
            acc += w * img.at(iy, ix, c);
            area += w;
          }
        }
        const long v = std::lround(acc / area);
        out.set(y, x, c, static_cast<std::uint8_t>(std::clamp<long>(v, 0, img.levels() - 1)));
      }
    }
  }
  return out;
}

/// 218x178x3 8-bit face -> centered 89x89 crop -> 32x32 area resize -> 5-bit levels.
inline Image celeba_pipeline(const Image& img) {
  if (img.height() != 218 || img.width() != 178 || img.channels() != 3 || img.levels() != 256) {
    throw ValidationError("celeba_pipeline expects a 218x178x3 8-bit image, got " + img.signature().to_string());
  }
  const Image small = resize_area(center_crop(img, 89, 89), 32, 32);
  std::vector<std::uint8_t> px(small.pixels().size());
  std::transform(small.pixels().begin(), small.pixels().end(), px.begin(),
                 [](std::uint8_t v) { return static_cast<std::uint8_t>(quantize_5bit(v)); });
  return Image(Signature::celeba(), std::move(px));
}

/// Maps an 8-bit value to the nearest of `levels` evenly spaced levels.
constexpr int requantize_level(int v, int levels) noexcept {
  return (v * (levels - 1) * 2 + 255) / 510;
}

/// 8-bit display value of a level.
constexpr int display_value(int level, int levels) noexcept {
  return (level * 255 * 2 + (levels - 1)) / (2 * (levels - 1));
}

/// Brings an image into a model's signature. Matching images pass through;
/// 8-bit images are reduced the way the training data was (threshold for
/// binary, 5-bit truncation for 32 levels, nearest level otherwise), and raw
/// 218x178 faces go through the CelebA pipeline.
inline Image conform_image(const Image& img, const Signature& sig) {
  if (img.signature() == sig) return img;
  if (img.levels() == 256 && sig.channels == 3 && sig.levels == 32 && img.height() == 218 && img.width() == 178 &&
      img.channels() == 3 && sig.height == 32 && sig.width == 32) {
    return celeba_pipeline(img);
  }
  if (img.levels() != 256 || img.height() != sig.height || img.width() != sig.width ||
      img.channels() != sig.channels) {
    throw ValidationError("image " + img.signature().to_string() + " does not match model " + sig.to_string());
  }
  std::vector<std::uint8_t> px(img.pixels().size());
  std::transform(img.pixels().begin(), img.pixels().end(), px.begin(), [&](std::uint8_t v) {
    if (sig.levels == 2) return static_cast<std::uint8_t>(v / 255.0 > 0.5 ? 1 : 0);
    if (sig.levels == 32) return static_cast<std::uint8_t>(quantize_5bit(v));
    return static_cast<std::uint8_t>(requantize_level(v, sig.levels));
  });
  return Image(sig, std::move(px));
}

inline Dataset conform_dataset(const Dataset& ds, const Signature& sig) {
  if (ds.signature == sig) return ds;
  Dataset out;
  out.signature = sig;
  out.labels = ds.labels;
  out.split = ds.split;
  out.images.reserve(ds.size());
  for (const Image& img : ds.images) out.images.push_back(conform_image(img, sig));
  return out;
}

}  // namespace pccnn
