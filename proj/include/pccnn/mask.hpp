#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pccnn/data.hpp"
#include "pccnn/image.hpp"
#include "pccnn/rng.hpp"

namespace pccnn {

/// H x W visibility grid: 1 = visible (constrained), 0 = hidden.
class Mask {
 public:
  Mask() = default;
  Mask(int height, int width, std::uint8_t fill = 0)
      : height_(height), width_(width), bits_(static_cast<std::size_t>(height) * width, fill) {
    if (height < 1 || width < 1) throw ValidationError("mask dimensions must be positive");
    if (fill > 1) throw ValidationError("mask values must be 0 or 1");
  }
  Mask(int height, int width, std::vector<std::uint8_t> bits) : Mask(height, width) {
    if (bits.size() != bits_.size()) {
      throw ValidationError("mask of " + std::to_string(height) + "x" + std::to_string(width) + " needs " +
                            std::to_string(bits_.size()) + " values, got " + std::to_string(bits.size()));
    }
    for (std::uint8_t b : bits) {
      if (b > 1) throw ValidationError("mask values must be 0 or 1, got " + std::to_string(b));
    }
    bits_ = std::move(bits);
  }

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  std::uint8_t at(int y, int x) const noexcept { return bits_[static_cast<std::size_t>(y) * width_ + x]; }
  bool visible(int y, int x) const noexcept { return at(y, x) != 0; }
  void set(int y, int x, std::uint8_t v) noexcept { bits_[static_cast<std::size_t>(y) * width_ + x] = v ? 1 : 0; }
  const std::vector<std::uint8_t>& bits() const noexcept { return bits_; }

  std::size_t visible_count() const noexcept {
    std::size_t n = 0;
    for (std::uint8_t b : bits_) n += b;
    return n;
  }
  std::size_t hidden_count() const noexcept { return bits_.size() - visible_count(); }

  Mask inverted() const {
    Mask m = *this;
    for (auto& b : m.bits_) b ^= 1;
    return m;
  }

  friend bool operator==(const Mask&, const Mask&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> bits_;
};

struct MaskGenParams {
  int max_num_blobs = 4;
  int iter_min = 2;
  int iter_max = 7;

  void validate() const {
    if (max_num_blobs < 1 || iter_min < 1 || iter_min > iter_max) {
      throw ValidationError("mask parameters need max_num_blobs >= 1 and 1 <= iter_min <= iter_max, got " +
                            std::to_string(max_num_blobs) + ", " + std::to_string(iter_min) + ", " +
                            std::to_string(iter_max));
    }
  }
};

struct BlobMask {
  Mask mask;
  int num_blobs = 0;
};

/// Random-blob mask. Each blob sets a uniform center cell, then expands for
/// num_iters rounds: every in-bounds 4-neighbour of every frontier cell is set
/// with probability 1/2 and joins the next frontier (duplicates allowed).
inline BlobMask generate_blob_mask(int h, int w, const MaskGenParams& params, std::uint64_t seed) {
  params.validate();
  Mask mask(h, w);
  Rng rng(seed);
  const int num_blobs = rng.uniform_int(1, params.max_num_blobs);
  constexpr std::array<std::pair<int, int>, 4> kNeighbours{{{-1, 0}, {1, 0}, {0, -1}, {0, 1}}};
  std::vector<std::pair<int, int>> frontier, next;
  for (int blob = 0; blob < num_blobs; ++blob) {
    const int num_iters = rng.uniform_int(params.iter_min, params.iter_max);
    const int x0 = rng.uniform_int(0, w - 1);
    const int y0 = rng.uniform_int(0, h - 1);
    mask.set(y0, x0, 1);
    frontier.assign(1, {y0, x0});
    for (int it = 0; it < num_iters; ++it) {
      next.clear();
      for (auto [y, x] : frontier) {
        for (auto [dy, dx] : kNeighbours) {
          const int ny = y + dy, nx = x + dx;
          if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
          if (rng.uniform() > 0.5) {
            mask.set(ny, nx, 1);
            next.emplace_back(ny, nx);
          }
        }
      }
      std::swap(frontier, next);
    }
  }
  return {std::move(mask), num_blobs};
}

inline Mask generate_mask(int h, int w, const MaskGenParams& params, std::uint64_t seed) {
  return generate_blob_mask(h, w, params, seed).mask;
}

/// Half-image occlusions: the named half is hidden, the rest visible.
enum class RegularMask { top, bottom, left, right };

inline Mask regular_mask(int h, int w, RegularMask kind) {
  Mask m(h, w, 1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      bool hidden = false;
      switch (kind) {
        case RegularMask::top: hidden = y < h / 2; break;
        case RegularMask::bottom: hidden = y >= h / 2; break;
        case RegularMask::left: hidden = x < w / 2; break;
        case RegularMask::right: hidden = x >= w / 2; break;
      }
      if (hidden) m.set(y, x, 0);
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Mask-dataset file: "PCMK", u32 version, u32 count, u16 height, u16 width
// (all little-endian), then count * h * w bytes of 0/1, row-major.

inline constexpr std::uint32_t kMaskFileVersion = 1;

struct MaskDataset {
  int height = 0;
  int width = 0;
  std::vector<Mask> masks;

  std::size_t size() const noexcept { return masks.size(); }
};

namespace detail {

inline void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint64_t get_le(std::span<const std::uint8_t> in, std::size_t offset, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= std::uint64_t{in[offset + static_cast<std::size_t>(i)]} << (8 * i);
  return v;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_mask_dataset(const MaskDataset& ds) {
  std::vector<std::uint8_t> out{'P', 'C', 'M', 'K'};
  detail::put_le(out, kMaskFileVersion, 4);
  detail::put_le(out, ds.size(), 4);
  detail::put_le(out, static_cast<std::uint64_t>(ds.height), 2);
  detail::put_le(out, static_cast<std::uint64_t>(ds.width), 2);
  out.reserve(out.size() + ds.size() * static_cast<std::size_t>(ds.height) * ds.width);
  for (const Mask& m : ds.masks) {
    if (m.height() != ds.height || m.width() != ds.width) throw ValidationError("mask dataset holds masks of mixed size");
    out.insert(out.end(), m.bits().begin(), m.bits().end());
  }
  return out;
}

inline MaskDataset decode_mask_dataset(std::span<const std::uint8_t> bytes, const std::string& name = "masks") {
  constexpr std::size_t header = 16;
  if (bytes.size() < header) {
    throw FormatError(name + ": truncated header, " + std::to_string(bytes.size()) + " of 16 bytes");
  }
  if (!(bytes[0] == 'P' && bytes[1] == 'C' && bytes[2] == 'M' && bytes[3] == 'K')) {
    throw FormatError(name + ": bad magic, expected \"PCMK\"");
  }
  const auto version = detail::get_le(bytes, 4, 4);
  if (version != kMaskFileVersion) {
    throw FormatError(name + ": unsupported mask file version " + std::to_string(version));
  }
  MaskDataset ds;
  const std::size_t count = detail::get_le(bytes, 8, 4);
  ds.height = static_cast<int>(detail::get_le(bytes, 12, 2));
  ds.width = static_cast<int>(detail::get_le(bytes, 14, 2));
  if (ds.height < 1 || ds.width < 1) throw FormatError(name + ": zero mask dimension");
  const std::size_t plane = static_cast<std::size_t>(ds.height) * ds.width;
  if (header + count * plane != bytes.size()) {
    const std::size_t expected = header + count * plane;
    throw FormatError(name + ": expected " + std::to_string(expected) + " bytes for " + std::to_string(count) +
                      " masks, found " + std::to_string(bytes.size()) +
                      (expected > bytes.size() ? " (missing " + std::to_string(expected - bytes.size()) + ")" : ""));
  }
  ds.masks.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto* p = bytes.data() + header + i * plane;
    for (std::size_t j = 0; j < plane; ++j) {
      if (p[j] > 1) {
        throw FormatError(name + ": mask value " + std::to_string(p[j]) + " at byte offset " +
                          std::to_string(header + i * plane + j));
      }
    }
    ds.masks.emplace_back(ds.height, ds.width, std::vector<std::uint8_t>(p, p + plane));
  }
  return ds;
}

inline void save_mask_dataset(const std::filesystem::path& path, const MaskDataset& ds) {
  detail::write_file(path, encode_mask_dataset(ds));
}

inline MaskDataset load_mask_dataset(const std::filesystem::path& path) {
  return decode_mask_dataset(detail::read_file(path), path.string());
}

/// `count` blob masks; mask i uses seed split_seed(seed, i).
inline MaskDataset make_mask_dataset(std::size_t count, int h, int w, const MaskGenParams& params, std::uint64_t seed,
                                     bool invert = false) {
  if (count < 1) throw ValidationError("mask count must be >= 1");
  MaskDataset ds{h, w, {}};
  ds.masks.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Mask m = generate_mask(h, w, params, split_seed(seed, i));
    ds.masks.push_back(invert ? m.inverted() : std::move(m));
  }
  return ds;
}

inline void generate_mask_dataset(std::size_t count, int h, int w, const MaskGenParams& params, std::uint64_t seed,
                                  const std::filesystem::path& path, bool invert = false) {
  save_mask_dataset(path, make_mask_dataset(count, h, w, params, seed, invert));
}

/// Conditioning-network input [1, C+1, H, W]: image scaled to [0, 1] times
/// the mask, followed by the mask itself.
template <typename T = float>
Tensor<T> apply_mask(const Image& image, const Mask& mask) {
  if (image.height() != mask.height() || image.width() != mask.width()) {
    throw ValidationError("apply_mask: image " + image.signature().to_string() + " vs mask " +
                          std::to_string(mask.height()) + "x" + std::to_string(mask.width()));
  }
  const int c = image.channels();
  Tensor<T> out({1, c + 1, image.height(), image.width()});
  const T scale = T{1} / static_cast<T>(image.levels() - 1);
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      const T m = mask.visible(y, x) ? T{1} : T{0};
      for (int ch = 0; ch < c; ++ch) out.at(0, ch, y, x) = static_cast<T>(image.at(y, x, ch)) * scale * m;
      out.at(0, c, y, x) = m;
    }
  }
  return out;
}

}  // namespace pccnn
