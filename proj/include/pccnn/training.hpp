#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pccnn/adam.hpp"
#include "pccnn/checkpoint.hpp"
#include "pccnn/model.hpp"

namespace pccnn {

struct TrainConfig {
  int epochs = 50;
  double learning_rate = 4e-4;
  double alpha = 1.0;
  int batch_size = 64;
  int micro_batch = 16;  // images per forward/backward; gradients accumulate up to batch_size
  std::uint64_t seed = 0;
  std::string mask_path;
  int checkpoint_every = 0;  // epochs, 0 disables
  std::string checkpoint_dir;
  bool aux_all_pixels = false;  // auxiliary term over every pixel instead of hidden ones only

  void validate() const {
    if (epochs < 1) throw ValidationError("epochs must be >= 1, got " + std::to_string(epochs));
    if (!(learning_rate > 0)) throw ValidationError("learning rate must be positive");
    if (!(alpha >= 0)) throw ValidationError("alpha must be >= 0");
    if (batch_size < 1 || micro_batch < 1) throw ValidationError("batch sizes must be >= 1");
    if (checkpoint_every < 0) throw ValidationError("checkpoint cadence must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"learning_rate", c.learning_rate},
       {"alpha", c.alpha},
       {"batch_size", c.batch_size},
       {"micro_batch", c.micro_batch},
       {"seed", c.seed},
       {"mask_path", c.mask_path},
       {"checkpoint_every", c.checkpoint_every},
       {"checkpoint_dir", c.checkpoint_dir},
       {"aux_all_pixels", c.aux_all_pixels}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.alpha = j.value("alpha", d.alpha);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.micro_batch = j.value("micro_batch", d.micro_batch);
  c.seed = j.value("seed", d.seed);
  c.mask_path = j.value("mask_path", d.mask_path);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.checkpoint_dir = j.value("checkpoint_dir", d.checkpoint_dir);
  c.aux_all_pixels = j.value("aux_all_pixels", d.aux_all_pixels);
}

struct TrainRecord {
  int epoch = 0;
  double joint = 0;  // nats per hidden pixel
  double aux = 0;
  double bits_per_dim = 0;
  double seconds = 0;
};

inline void to_json(nlohmann::json& j, const TrainRecord& r) {
  j = {{"epoch", r.epoch},
       {"joint", r.joint},
       {"aux", r.aux},
       {"bits_per_dim", r.bits_per_dim},
       {"seconds", r.seconds}};
}

/// Tensors for a group of (image, mask) pairs. Per-pixel weights already carry
/// the per-image normalization: each image contributes the mean over its
/// hidden pixels, and the group is divided by `batch_total`.
template <typename T>
struct LossBatch {
  Tensor<T> images;  // [n, C, H, W] in [0, 1]
  Tensor<T> cond;    // [n, C+1, H, W]
  std::vector<int> targets;
  Tensor<T> joint_weights;
  Tensor<T> aux_weights;
  double joint_scale = 0;
  double aux_scale = 0;
};

template <typename T>
LossBatch<T> make_loss_batch(std::span<const Image* const> images, std::span<const Mask* const> masks,
                             std::size_t batch_total, bool aux_all_pixels) {
  if (images.empty() || images.size() != masks.size()) throw ValidationError("loss batch needs matching images/masks");
  const Signature s = images[0]->signature();
  const int n = static_cast<int>(images.size());
  const int c = s.channels, h = s.height, w = s.width;
  LossBatch<T> b{Tensor<T>({n, c, h, w}), Tensor<T>({n, c + 1, h, w}), {}, Tensor<T>({n, c, h, w}),
                 Tensor<T>({n, c, h, w}), 0, 0};
  b.targets.resize(static_cast<std::size_t>(n) * c * h * w);
  double joint_sum = 0, aux_sum = 0;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int i = 0; i < n; ++i) {
    const Image& img = *images[static_cast<std::size_t>(i)];
    const Mask& m = *masks[static_cast<std::size_t>(i)];
    if (img.signature() != s) throw ValidationError("loss batch mixes image signatures");
    const auto x = img.to_tensor<T>();
    const auto ci = apply_mask<T>(img, m);
    std::copy(x.data().begin(), x.data().end(), b.images.ptr() + i * x.size());
    std::copy(ci.data().begin(), ci.data().end(), b.cond.ptr() + i * ci.size());
    const std::size_t hidden = m.hidden_count();
    const T jw = hidden ? static_cast<T>(1.0 / (static_cast<double>(hidden) * c)) : T{0};
    const T aw_all = static_cast<T>(1.0 / (static_cast<double>(plane) * c));
    for (int ch = 0; ch < c; ++ch) {
      for (int y = 0; y < h; ++y) {
        for (int xx = 0; xx < w; ++xx) {
          const std::size_t idx = ((static_cast<std::size_t>(i) * c + ch) * h + y) * w + xx;
          b.targets[idx] = img.at(y, xx, ch);
          const bool hid = !m.visible(y, xx);
          b.joint_weights[idx] = hid ? jw : T{0};
          b.aux_weights[idx] = aux_all_pixels ? aw_all : b.joint_weights[idx];
        }
      }
    }
    joint_sum += hidden ? 1.0 : 0.0;
    aux_sum += aux_all_pixels ? 1.0 : (hidden ? 1.0 : 0.0);
  }
  // softmax_cross_entropy divides by the weight sum; rescale to sum / batch_total.
  b.joint_scale = joint_sum / static_cast<double>(batch_total);
  b.aux_scale = aux_sum / static_cast<double>(batch_total);
  return b;
}

template <typename T>
struct LossVars {
  Var<T> total, joint, aux;
};

/// Loss from combined and conditional logits: joint = mean hidden-pixel NLL of
/// the combined logits, aux = the same from the conditional logits alone,
/// total = joint + alpha * aux.
template <typename T>
LossVars<T> loss_terms(Var<T> combined, Var<T> cond, const LossBatch<T>& b, int levels, double alpha) {
  Var<T> joint = ad::scale(ad::softmax_cross_entropy(combined, b.targets, b.joint_weights, levels),
                           static_cast<T>(b.joint_scale));
  Var<T> aux =
      ad::scale(ad::softmax_cross_entropy(cond, b.targets, b.aux_weights, levels), static_cast<T>(b.aux_scale));
  Var<T> total = alpha == 0 ? joint : ad::add(joint, ad::scale(aux, static_cast<T>(alpha)));
  return {total, joint, aux};
}

template <typename T>
LossVars<T> model_loss(Tape<T>& tape, const ArchitectureConfig& cfg, const BoundParams<T>& p, const LossBatch<T>& b,
                       double alpha) {
  Var<T> prior = prior_network(cfg, p, tape.leaf(b.images));
  Var<T> cond = conditioning_network(cfg, p, tape.leaf(b.cond));
  return loss_terms(ad::add(prior, cond), cond, b, cfg.signature.levels, alpha);
}

struct LossValue {
  double total = 0, joint = 0, aux = 0;
};

/// Loss of a single (image, mask) pair.
template <typename T>
LossValue loss(const Model<T>& model, const Image& image, const Mask& mask, double alpha, bool aux_all_pixels = false) {
  model.check_image(image);
  const Image* ip = &image;
  const Mask* mp = &mask;
  const auto b = make_loss_batch<T>(std::span<const Image* const>(&ip, 1), std::span<const Mask* const>(&mp, 1), 1,
                                    aux_all_pixels);
  Tape<T> tape(false);
  BoundParams<T> p(tape, model.params(), false);
  const auto v = model_loss(tape, model.config(), p, b, alpha);
  return {v.total.value()[0], v.joint.value()[0], v.aux.value()[0]};
}

using EpochCallback = std::function<void(const TrainRecord&)>;

/// Adam on the joint + alpha * aux loss. Each image draws one mask uniformly
/// from `masks` per epoch; order and draws are fixed by `cfg.seed`.
template <typename T>
std::vector<TrainRecord> train(Model<T>& model, const Dataset& data, const MaskDataset& masks, const TrainConfig& cfg,
                               const EpochCallback& on_epoch = {}) {
  cfg.validate();
  const Signature& sig = model.signature();
  if (data.size() == 0) throw ValidationError("training set is empty");
  if (data.signature != sig) {
    throw ValidationError("training data " + data.signature.to_string() + " does not match model " + sig.to_string());
  }
  if (masks.size() == 0) throw ValidationError("mask dataset is empty");
  if (masks.height != sig.height || masks.width != sig.width) {
    throw ValidationError("masks are " + std::to_string(masks.height) + "x" + std::to_string(masks.width) +
                          " but images are " + std::to_string(sig.height) + "x" + std::to_string(sig.width));
  }

  auto& params = model.params();
  AdamState<T> adam(AdamConfig{cfg.learning_rate}, [&] {
    std::vector<Tensor<T>> shapes;
    for (const auto& e : params.entries()) shapes.emplace_back(e.value.shape());
    return shapes;
  }());
  std::vector<Tensor<T>> grads;
  for (const auto& e : params.entries()) grads.emplace_back(e.value.shape());

  std::vector<TrainRecord> records;
  std::vector<std::size_t> order(data.size());
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    Rng rng(split_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng.engine());
    double joint_sum = 0, aux_sum = 0;
    std::size_t batch_index = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(cfg.batch_size), ++batch_index) {
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
      const std::size_t n = end - begin;
      std::vector<const Image*> imgs;
      std::vector<const Mask*> ms;
      for (std::size_t i = begin; i < end; ++i) {
        imgs.push_back(&data.images[order[i]]);
        ms.push_back(&masks.masks[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(masks.size()) - 1))]);
      }
      for (auto& g : grads) g.fill(T{0});
      double batch_joint = 0, batch_aux = 0;
      for (std::size_t mb = 0; mb < n; mb += static_cast<std::size_t>(cfg.micro_batch)) {
        const std::size_t mend = std::min(n, mb + static_cast<std::size_t>(cfg.micro_batch));
        const auto b = make_loss_batch<T>(std::span<const Image* const>(imgs.data() + mb, mend - mb),
                                          std::span<const Mask* const>(ms.data() + mb, mend - mb), n,
                                          cfg.aux_all_pixels);
        Tape<T> tape;
        BoundParams<T> p(tape, params, true);
        const auto v = model_loss(tape, model.config(), p, b, cfg.alpha);
        const double total = v.total.value()[0];
        if (!std::isfinite(total)) {
          throw RuntimeFault("non-finite loss in epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batch_index));
        }
        batch_joint += v.joint.value()[0];
        batch_aux += v.aux.value()[0];
        const auto g = tape.gradients(v.total, p.vars());
        for (std::size_t i = 0; i < grads.size(); ++i) {
          for (std::size_t j = 0; j < grads[i].size(); ++j) grads[i][j] += g[i][j];
        }
      }
      std::vector<Tensor<T>> values;
      values.reserve(params.size());
      for (auto& e : params.entries()) values.push_back(std::move(e.value));
      adam_step<T>(values, grads, adam);
      for (std::size_t i = 0; i < values.size(); ++i) params.entries()[i].value = std::move(values[i]);
      joint_sum += batch_joint * static_cast<double>(n);
      aux_sum += batch_aux * static_cast<double>(n);
    }
    TrainRecord r;
    r.epoch = epoch;
    r.joint = joint_sum / static_cast<double>(data.size());
    r.aux = aux_sum / static_cast<double>(data.size());
    r.bits_per_dim = r.joint / std::numbers::ln2;
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    records.push_back(r);
    if (cfg.checkpoint_every > 0 && !cfg.checkpoint_dir.empty() && epoch % cfg.checkpoint_every == 0) {
      std::filesystem::create_directories(cfg.checkpoint_dir);
      const auto path = std::filesystem::path(cfg.checkpoint_dir) / ("epoch-" + std::to_string(epoch) + ".pccn");
      if constexpr (std::is_same_v<T, float>) {
        save_checkpoint(path, model.config(), params, cfg);
      } else {
        save_checkpoint(path, model.config(), params.template cast<float>(), cfg);
      }
    }
    if (on_epoch) on_epoch(r);
  }
  return records;
}

}  // namespace pccnn
