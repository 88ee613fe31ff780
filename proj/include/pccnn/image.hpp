#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pccnn/tensor.hpp"

namespace pccnn {

/// (height, width, channels, levels) shared by images, masks and models.
struct Signature {
  int height = 0;
  int width = 0;
  int channels = 1;
  int levels = 2;

  friend bool operator==(const Signature&, const Signature&) = default;

  std::string to_string() const {
    return std::to_string(height) + "x" + std::to_string(width) + "x" + std::to_string(channels) +
           " K=" + std::to_string(levels);
  }

  static Signature mnist() { return {28, 28, 1, 2}; }
  static Signature celeba() { return {32, 32, 3, 32}; }
};

/// H x W x C grid of discrete levels in [0, K-1], stored row-major with the
/// channel index fastest (HWC).
class Image {
 public:
  Image() = default;

  Image(int height, int width, int channels, int levels)
      : sig_{height, width, channels, levels},
        pixels_(static_cast<std::size_t>(height) * width * channels, 0) {
    if (height < 1 || width < 1 || channels < 1) {
      throw ValidationError("image dimensions must be positive, got " + sig_.to_string());
    }
    if (levels < 2 || levels > 256) throw ValidationError("image levels must be in [2, 256], got " + std::to_string(levels));
  }

  explicit Image(const Signature& s) : Image(s.height, s.width, s.channels, s.levels) {}

  Image(const Signature& s, std::vector<std::uint8_t> pixels) : Image(s) {
    if (pixels.size() != pixels_.size()) {
      throw ValidationError("image of " + s.to_string() + " needs " + std::to_string(pixels_.size()) +
                            " values, got " + std::to_string(pixels.size()));
    }
    for (std::uint8_t v : pixels) {
      if (v >= s.levels) {
        throw ValidationError("pixel value " + std::to_string(v) + " outside [0, " + std::to_string(s.levels - 1) + "]");
      }
    }
    pixels_ = std::move(pixels);
  }

  const Signature& signature() const noexcept { return sig_; }
  int height() const noexcept { return sig_.height; }
  int width() const noexcept { return sig_.width; }
  int channels() const noexcept { return sig_.channels; }
  int levels() const noexcept { return sig_.levels; }

  std::uint8_t at(int y, int x, int c = 0) const noexcept { return pixels_[index(y, x, c)]; }
  void set(int y, int x, int c, std::uint8_t v) {
    if (v >= sig_.levels) throw ValidationError("pixel value " + std::to_string(v) + " outside level range");
    pixels_[index(y, x, c)] = v;
  }

  const std::vector<std::uint8_t>& pixels() const noexcept { return pixels_; }

  /// Levels scaled to [0, 1] as a [1, C, H, W] tensor.
  template <typename T = float>
  Tensor<T> to_tensor() const {
    Tensor<T> t({1, sig_.channels, sig_.height, sig_.width});
    const T scale = T{1} / static_cast<T>(sig_.levels - 1);
    for (int y = 0; y < sig_.height; ++y)
      for (int x = 0; x < sig_.width; ++x)
        for (int c = 0; c < sig_.channels; ++c) t.at(0, c, y, x) = static_cast<T>(at(y, x, c)) * scale;
    return t;
  }

  friend bool operator==(const Image&, const Image&) = default;

 private:
  std::size_t index(int y, int x, int c) const noexcept {
    return (static_cast<std::size_t>(y) * sig_.width + x) * sig_.channels + c;
  }

  Signature sig_;
  std::vector<std::uint8_t> pixels_;
};

/// Homogeneous list of images plus a split label.
struct Dataset {
  Signature signature;
  std::vector<Image> images;
  std::vector<int> labels;  // optional bookkeeping, may be empty
  std::string split = "train";

  std::size_t size() const noexcept { return images.size(); }

  void push_back(Image img) {
    if (images.empty() && signature.height == 0) signature = img.signature();
    if (img.signature() != signature) {
      throw ValidationError("dataset signature " + signature.to_string() + " does not admit image " +
                            img.signature().to_string());
    }
    images.push_back(std::move(img));
  }
};

}  // namespace pccnn
