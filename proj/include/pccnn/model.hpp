#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pccnn/autodiff.hpp"
#include "pccnn/image.hpp"
#include "pccnn/mask.hpp"
#include "pccnn/ops.hpp"
#include "pccnn/rng.hpp"

namespace pccnn {

struct PriorConfig {
  int gated_blocks = 14;  // after the restricted block
  int filters = 32;
  int kernel = 5;
  int head_hidden = 0;  // width of the optional 1x1 + ReLU layer before the logits

  friend bool operator==(const PriorConfig&, const PriorConfig&) = default;
};

struct ConditioningConfig {
  int residual_blocks = 15;
  int filters = 32;
  int kernel = 5;

  friend bool operator==(const ConditioningConfig&, const ConditioningConfig&) = default;
};

struct ArchitectureConfig {
  std::string name = "mnist";
  Signature signature = Signature::mnist();
  PriorConfig prior;
  ConditioningConfig conditioning;

  int logits_per_pixel() const { return signature.channels * signature.levels; }
  int total_gated_blocks() const { return 1 + prior.gated_blocks; }

  /// Rows above pixel row r that can influence the prior logits at row r.
  int prior_reach_rows() const { return total_gated_blocks() * (prior.kernel / 2) + 1; }

  void validate() const {
    auto odd = [](int k) { return k >= 1 && k % 2 == 1; };
    if (!odd(prior.kernel) || !odd(conditioning.kernel)) throw ValidationError("kernel sizes must be odd");
    if (prior.gated_blocks < 0 || conditioning.residual_blocks < 1 || prior.filters < 1 ||
        conditioning.filters < 1 || prior.head_hidden < 0) {
      throw ValidationError("invalid architecture layer counts");
    }
    if (signature.height < 1 || signature.width < 1 || signature.channels < 1 || signature.levels < 2) {
      throw ValidationError("invalid image signature " + signature.to_string());
    }
  }

  friend bool operator==(const ArchitectureConfig&, const ArchitectureConfig&) = default;

  static ArchitectureConfig mnist() { return {}; }

  /// Reduced MNIST model used for desk-scale training.
  static ArchitectureConfig mnist_small() {
    ArchitectureConfig c;
    c.name = "mnist-small";
    c.prior.gated_blocks = 5;
    c.conditioning.residual_blocks = 6;
    return c;
  }

  static ArchitectureConfig celeba() {
    ArchitectureConfig c;
    c.name = "celeba";
    c.signature = Signature::celeba();
    c.prior = {16, 66, 5, 1023};
    c.conditioning = {17, 66, 5};
    return c;
  }

  static ArchitectureConfig from_preset(const std::string& preset) {
    if (preset == "mnist") return mnist();
    if (preset == "mnist-small") return mnist_small();
    if (preset == "celeba") return celeba();
    throw ValidationError("unknown preset '" + preset + "' (expected mnist, mnist-small or celeba)");
  }
};

inline void to_json(nlohmann::json& j, const Signature& s) {
  j = {{"height", s.height}, {"width", s.width}, {"channels", s.channels}, {"levels", s.levels}};
}
inline void from_json(const nlohmann::json& j, Signature& s) {
  s = {j.at("height"), j.at("width"), j.at("channels"), j.at("levels")};
}
inline void to_json(nlohmann::json& j, const ArchitectureConfig& c) {
  j = {{"name", c.name},
       {"signature", c.signature},
       {"prior",
        {{"gated_blocks", c.prior.gated_blocks},
         {"filters", c.prior.filters},
         {"kernel", c.prior.kernel},
         {"head_hidden", c.prior.head_hidden}}},
       {"conditioning",
        {{"residual_blocks", c.conditioning.residual_blocks},
         {"filters", c.conditioning.filters},
         {"kernel", c.conditioning.kernel}}}};
}
inline void from_json(const nlohmann::json& j, ArchitectureConfig& c) {
  c.name = j.at("name");
  c.signature = j.at("signature");
  const auto& p = j.at("prior");
  c.prior = {p.at("gated_blocks"), p.at("filters"), p.at("kernel"), p.at("head_hidden")};
  const auto& q = j.at("conditioning");
  c.conditioning = {q.at("residual_blocks"), q.at("filters"), q.at("kernel")};
}

enum class MaskType { A, B };

/// [k, k] tap mask for raster-order causality. Type A drops the center and
/// everything after it in raster order; type B keeps the center.
template <typename T>
Tensor<T> causal_tap_mask(int k, MaskType type) {
  Tensor<T> m({k, k}, T{1});
  const int c = k / 2;
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k; ++j) {
      const bool after = i > c || (i == c && j > c) || (i == c && j == c && type == MaskType::A);
      if (after) m[static_cast<std::size_t>(i * k + j)] = T{0};
    }
  }
  return m;
}

namespace ad {

/// Same-size k x k convolution whose kernel is restricted to taps that
/// precede (type A) or precede-or-equal (type B) the center in raster order.
template <typename T>
Var<T> masked_conv(Var<T> x, Var<T> w, Var<T> b, MaskType type) {
  const Shape& ws = w.shape();
  if (ws.size() != 4 || ws[2] != ws[3] || ws[2] % 2 == 0) {
    throw ValidationError("masked_conv: kernel must be square with odd size, got " + to_string(ws));
  }
  const int k = ws[2];
  return conv2d(x, w, b, Padding::same(k, k), causal_tap_mask<T>(k, type));
}

}  // namespace ad

/// Named parameter tensors in a fixed construction order.
template <typename T>
class ModelParams {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
  };

  void add(std::string name, Tensor<T> value) {
    if (index_.count(name)) throw ValidationError("duplicate parameter " + name);
    index_[name] = entries_.size();
    entries_.push_back({std::move(name), std::move(value)});
  }

  std::size_t index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("unknown parameter " + name);
    return it->second;
  }

  const Tensor<T>& operator[](const std::string& name) const { return entries_[index(name)].value; }
  Tensor<T>& operator[](const std::string& name) { return entries_[index(name)].value; }

  std::vector<Entry>& entries() noexcept { return entries_; }
  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  /// Tensor views in construction order (for the optimizer).
  std::vector<Tensor<T>*> tensors() {
    std::vector<Tensor<T>*> out;
    for (auto& e : entries_) out.push_back(&e.value);
    return out;
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>());
    return out;
  }

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
      if (a.entries_[i].name != b.entries_[i].name || !(a.entries_[i].value == b.entries_[i].value)) return false;
    }
    return true;
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

namespace names {
inline std::string prior_block(int i, const char* layer, const char* kind) {
  return "prior.block" + std::to_string(i) + "." + layer + "." + kind;
}
inline std::string cond_block(int i, const char* layer, const char* kind) {
  return "cond.block" + std::to_string(i) + "." + layer + "." + kind;
}
}  // namespace names

/// Shapes of every parameter, keyed in construction order.
inline std::vector<std::pair<std::string, Shape>> parameter_layout(const ArchitectureConfig& cfg) {
  cfg.validate();
  std::vector<std::pair<std::string, Shape>> out;
  auto conv = [&](const std::string& stem, int out_ch, int in_ch, int kh, int kw) {
    out.emplace_back(stem + ".weight", Shape{out_ch, in_ch, kh, kw});
    out.emplace_back(stem + ".bias", Shape{out_ch});
  };
  const int c = cfg.signature.channels;
  const int f = cfg.prior.filters;
  const int k = cfg.prior.kernel;
  for (int i = 0; i < cfg.total_gated_blocks(); ++i) {
    const int in_ch = i == 0 ? c : f;
    const std::string stem = "prior.block" + std::to_string(i);
    conv(stem + ".v_conv", 2 * f, in_ch, k / 2 + 1, k);
    conv(stem + ".h_conv", 2 * f, in_ch, 1, k / 2 + 1);
    conv(stem + ".v_to_h", 2 * f, 2 * f, 1, 1);
    conv(stem + ".h_out", f, f, 1, 1);
  }
  if (cfg.prior.head_hidden > 0) {
    conv("prior.head.hidden", cfg.prior.head_hidden, f, 1, 1);
    conv("prior.head.out", cfg.logits_per_pixel(), cfg.prior.head_hidden, 1, 1);
  } else {
    conv("prior.head.out", cfg.logits_per_pixel(), f, 1, 1);
  }
  const int g = cfg.conditioning.filters;
  const int kc = cfg.conditioning.kernel;
  for (int i = 0; i < cfg.conditioning.residual_blocks; ++i) {
    const int in_ch = i == 0 ? c + 1 : g;
    const std::string stem = "cond.block" + std::to_string(i);
    conv(stem + ".conv1", g, in_ch, kc, kc);
    conv(stem + ".conv2", g, g, kc, kc);
    if (in_ch != g) conv(stem + ".skip", g, in_ch, 1, 1);
  }
  conv("cond.head.out", cfg.logits_per_pixel(), g, 1, 1);
  return out;
}

inline std::size_t parameter_count(const ArchitectureConfig& cfg) {
  std::size_t n = 0;
  for (const auto& [name, shape] : parameter_layout(cfg)) n += element_count(shape);
  return n;
}

/// Fan-in scaled uniform initialization: U(-gain/sqrt(fan_in), gain/sqrt(fan_in))
/// for weights and biases alike.
template <typename T>
ModelParams<T> init_params(const ArchitectureConfig& cfg, std::uint64_t seed, double gain = 1.0) {
  ModelParams<T> params;
  Rng rng(seed);
  std::size_t fan_in = 1;
  for (const auto& [name, shape] : parameter_layout(cfg)) {
    if (shape.size() == 4) fan_in = static_cast<std::size_t>(shape[1]) * shape[2] * shape[3];
    const double bound = gain / std::sqrt(static_cast<double>(fan_in));
    Tensor<T> t(shape);
    for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    params.add(name, std::move(t));
  }
  return params;
}

/// Parameters placed on a tape, addressable by name.
template <typename T>
class BoundParams {
 public:
  BoundParams(Tape<T>& tape, const ModelParams<T>& params, bool requires_grad) : params_(&params) {
    vars_.reserve(params.size());
    for (const auto& e : params.entries()) vars_.push_back(tape.leaf(e.value, requires_grad));
  }

  /// Wraps vars already on a tape; `layout` supplies the name index.
  BoundParams(const ModelParams<T>& layout, std::vector<Var<T>> vars) : params_(&layout), vars_(std::move(vars)) {
    if (vars_.size() != layout.size()) throw ValidationError("BoundParams: parameter count mismatch");
  }

  Var<T> operator[](const std::string& name) const { return vars_[params_->index(name)]; }
  std::span<const Var<T>> vars() const noexcept { return vars_; }

 private:
  const ModelParams<T>* params_;
  std::vector<Var<T>> vars_;
};

/// Prior (masked) network: x [N, C, H, W] scaled to [0, 1] -> logits
/// [N, C*K, H, W]. Logits at raster position i read only x at positions < i.
template <typename T>
Var<T> prior_network(const ArchitectureConfig& cfg, const BoundParams<T>& p, Var<T> x) {
  const int k = cfg.prior.kernel;
  const Padding v_pad{k / 2, 0, k / 2, k / 2};
  const Padding h_pad{0, 0, k / 2, 0};
  const Padding none{};
  Tensor<T> restricted({1, k / 2 + 1}, T{1});
  restricted[static_cast<std::size_t>(k / 2)] = T{0};

  Var<T> v = x, h = x;
  const int blocks = cfg.total_gated_blocks();
  for (int i = 0; i < blocks; ++i) {
    auto w = [&](const char* layer, const char* kind) { return p[names::prior_block(i, layer, kind)]; };
    Var<T> v_pre = ad::conv2d(v, w("v_conv", "weight"), w("v_conv", "bias"), v_pad);
    Var<T> h_pre = i == 0 ? ad::conv2d(h, w("h_conv", "weight"), w("h_conv", "bias"), h_pad, restricted)
                          : ad::conv2d(h, w("h_conv", "weight"), w("h_conv", "bias"), h_pad);
    Var<T> link = ad::conv2d(ad::shift_down(v_pre), w("v_to_h", "weight"), w("v_to_h", "bias"), none);
    Var<T> h_gated = ad::gate(ad::add(h_pre, link));
    Var<T> h_next = ad::conv2d(h_gated, w("h_out", "weight"), w("h_out", "bias"), none);
    h = i == 0 ? h_next : ad::add(h_next, h);
    if (i + 1 < blocks) v = ad::gate(v_pre);
  }
  if (cfg.prior.head_hidden > 0) {
    h = ad::relu(ad::conv2d(h, p["prior.head.hidden.weight"], p["prior.head.hidden.bias"], none));
  }
  return ad::conv2d(h, p["prior.head.out.weight"], p["prior.head.out.bias"], none);
}

/// Conditioning network: masked image plus mask channel [N, C+1, H, W] ->
/// logits [N, C*K, H, W]. Residual block: relu(conv(relu(conv(x))) + skip(x)).
template <typename T>
Var<T> conditioning_network(const ArchitectureConfig& cfg, const BoundParams<T>& p, Var<T> x) {
  const int k = cfg.conditioning.kernel;
  const Padding same = Padding::same(k, k);
  Var<T> h = x;
  for (int i = 0; i < cfg.conditioning.residual_blocks; ++i) {
    auto w = [&](const char* layer, const char* kind) { return p[names::cond_block(i, layer, kind)]; };
    Var<T> y = ad::relu(ad::conv2d(h, w("conv1", "weight"), w("conv1", "bias"), same));
    y = ad::conv2d(y, w("conv2", "weight"), w("conv2", "bias"), same);
    Var<T> skip = h.shape()[1] != cfg.conditioning.filters
                      ? ad::conv2d(h, w("skip", "weight"), w("skip", "bias"), Padding{})
                      : h;
    h = ad::relu(ad::add(y, skip));
  }
  return ad::conv2d(h, p["cond.head.out.weight"], p["cond.head.out.bias"], Padding{});
}

enum class LogitFlavor { prior, conditional, combined };

/// Per-pixel, per-channel, per-level logits of one image: [1, C*K, H, W].
template <typename T = float>
struct LogitGrid {
  Tensor<T> logits;
  LogitFlavor flavor = LogitFlavor::combined;
  int channels = 1;
  int levels = 2;

  int height() const { return logits.dim(2); }
  int width() const { return logits.dim(3); }
  T at(int c, int k, int y, int x) const { return logits.at(0, c * levels + k, y, x); }

  /// Softmax over levels at (c, y, x).
  std::vector<double> probabilities(int c, int y, int x) const {
    std::vector<double> p(static_cast<std::size_t>(levels));
    double mx = -INFINITY;
    for (int k = 0; k < levels; ++k) mx = std::max(mx, static_cast<double>(at(c, k, y, x)));
    double z = 0;
    for (int k = 0; k < levels; ++k) z += p[static_cast<std::size_t>(k)] = std::exp(at(c, k, y, x) - mx);
    for (auto& v : p) v /= z;
    return p;
  }
};

/// Elementwise sum of prior and conditional logits.
template <typename T>
LogitGrid<T> combine(const LogitGrid<T>& prior, const LogitGrid<T>& cond) {
  if (prior.logits.shape() != cond.logits.shape() || prior.levels != cond.levels || prior.channels != cond.channels) {
    throw ValidationError("combine: logit grids differ: " + to_string(prior.logits.shape()) + " vs " +
                          to_string(cond.logits.shape()));
  }
  LogitGrid<T> out{prior.logits, LogitFlavor::combined, prior.channels, prior.levels};
  for (std::size_t i = 0; i < out.logits.size(); ++i) out.logits[i] += cond.logits[i];
  return out;
}

/// Pixel Constrained CNN: prior network + conditioning network, logits added.
template <typename T = float>
class Model {
 public:
  Model(ArchitectureConfig cfg, std::uint64_t seed, double init_gain = 1.0)
      : cfg_(std::move(cfg)), params_(init_params<T>(cfg_, seed, init_gain)) {}

  Model(ArchitectureConfig cfg, ModelParams<T> params) : cfg_(std::move(cfg)), params_(std::move(params)) {
    const auto layout = parameter_layout(cfg_);
    if (layout.size() != params_.size()) {
      throw ValidationError("model " + cfg_.name + " expects " + std::to_string(layout.size()) + " tensors, got " +
                            std::to_string(params_.size()));
    }
    for (std::size_t i = 0; i < layout.size(); ++i) {
      const auto& e = params_.entries()[i];
      if (e.name != layout[i].first || e.value.shape() != layout[i].second) {
        throw ValidationError("parameter " + e.name + " " + to_string(e.value.shape()) + " does not match " +
                              layout[i].first + " " + to_string(layout[i].second));
      }
    }
  }

  const ArchitectureConfig& config() const noexcept { return cfg_; }
  const Signature& signature() const noexcept { return cfg_.signature; }
  const ModelParams<T>& params() const noexcept { return params_; }
  ModelParams<T>& params() noexcept { return params_; }

  /// Batched prior logits for scaled images [N, C, h, W]; any height works,
  /// which is what windowed sampling relies on.
  Tensor<T> prior_logits(const Tensor<T>& x) const {
    check_input(x, cfg_.signature.channels, false);
    Tape<T> tape(false);
    BoundParams<T> p(tape, params_, false);
    return prior_network(cfg_, p, tape.leaf(x)).value();
  }

  Tensor<T> cond_logits(const Tensor<T>& cond_input) const {
    check_input(cond_input, cfg_.signature.channels + 1, true);
    Tape<T> tape(false);
    BoundParams<T> p(tape, params_, false);
    return conditioning_network(cfg_, p, tape.leaf(cond_input)).value();
  }

  LogitGrid<T> prior_forward(const Image& image) const {
    check_image(image);
    return {prior_logits(image.to_tensor<T>()), LogitFlavor::prior, cfg_.signature.channels, cfg_.signature.levels};
  }

  LogitGrid<T> cond_forward(const Tensor<T>& cond_input) const {
    return {cond_logits(cond_input), LogitFlavor::conditional, cfg_.signature.channels, cfg_.signature.levels};
  }

  LogitGrid<T> cond_forward(const Image& image, const Mask& mask) const {
    check_image(image);
    return cond_forward(apply_mask<T>(image, mask));
  }

  /// Teacher-forced combined logits of `image` given the visible pixels of
  /// `source` under `mask`.
  LogitGrid<T> forward(const Image& image, const Image& source, const Mask& mask) const {
    return combine(prior_forward(image), cond_forward(source, mask));
  }

  void check_image(const Image& image) const {
    if (image.signature() != cfg_.signature) {
      throw ValidationError("image signature " + image.signature().to_string() + " does not match model " +
                            cfg_.signature.to_string());
    }
  }

 private:
  void check_input(const Tensor<T>& x, int channels, bool full_height) const {
    const Shape& s = x.shape();
    if (s.size() != 4 || s[1] != channels || s[3] != cfg_.signature.width ||
        (full_height ? s[2] != cfg_.signature.height : s[2] > cfg_.signature.height)) {
      throw ValidationError("input " + to_string(s) + " does not match model signature " +
                            cfg_.signature.to_string());
    }
  }

  ArchitectureConfig cfg_;
  ModelParams<T> params_;
};

}  // namespace pccnn
