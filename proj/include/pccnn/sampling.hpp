#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pccnn/checkpoint.hpp"
#include "pccnn/model.hpp"
#include "pccnn/parallel.hpp"

namespace pccnn {

/// One completion of `source` under `mask`.
struct SampleResult {
  Image image;
  Mask mask;
  std::vector<double> log_probs;  // natural log per (y, x, c) in HWC order; 0 at visible pixels
  double total_log_likelihood = 0;
  std::uint64_t seed = 0;

  std::size_t hidden_values() const { return mask.hidden_count() * static_cast<std::size_t>(image.channels()); }

  /// Mean log-probability per hidden value, 0 when nothing is hidden.
  double per_pixel_mean() const {
    const std::size_t n = hidden_values();
    return n ? total_log_likelihood / static_cast<double>(n) : 0.0;
  }

  nlohmann::json sidecar() const {
    return {{"seed", seed},
            {"total_log_likelihood", total_log_likelihood},
            {"per_pixel_mean_log_likelihood", per_pixel_mean()},
            {"mask_digest", mask_digest(mask)}};
  }
};

namespace detail {

inline void check_pair(const Signature& sig, const Image& source, const Mask& mask) {
  if (source.signature() != sig) {
    throw ValidationError("image signature " + source.signature().to_string() + " does not match model " +
                          sig.to_string());
  }
  if (mask.height() != sig.height || mask.width() != sig.width) {
    throw ValidationError("mask " + std::to_string(mask.height()) + "x" + std::to_string(mask.width()) +
                          " does not match model " + sig.to_string());
  }
}

/// Source values at visible pixels, level 0 elsewhere: hidden source values
/// must never reach the prior network.
inline Image visible_part(const Image& source, const Mask& mask) {
  Image out(source.signature());
  for (int y = 0; y < source.height(); ++y)
    for (int x = 0; x < source.width(); ++x)
      if (mask.visible(y, x))
        for (int c = 0; c < source.channels(); ++c) out.set(y, x, c, source.at(y, x, c));
  return out;
}

template <typename T>
Tensor<T> stack_images(std::span<const Image> images) {
  const Signature& s = images[0].signature();
  Tensor<T> out({static_cast<int>(images.size()), s.channels, s.height, s.width});
  const std::size_t stride = static_cast<std::size_t>(s.channels) * s.height * s.width;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto t = images[i].to_tensor<T>();
    std::copy(t.data().begin(), t.data().end(), out.ptr() + i * stride);
  }
  return out;
}

/// log softmax(logits[n, c*K + k, y, x])[level], evaluated in double.
template <typename T>
double log_softmax_at(const Tensor<T>& prior, int prior_row, const Tensor<T>& cond, int n, int c, int levels, int y,
                      int x, int level) {
  double mx = -std::numeric_limits<double>::infinity();
  std::vector<double> l(static_cast<std::size_t>(levels));
  for (int k = 0; k < levels; ++k) {
    l[static_cast<std::size_t>(k)] = static_cast<double>(prior.at(n, c * levels + k, prior_row, x)) +
                                     static_cast<double>(cond.at(0, c * levels + k, y, x));
    mx = std::max(mx, l[static_cast<std::size_t>(k)]);
  }
  double z = 0;
  for (double v : l) z += std::exp(v - mx);
  return l[static_cast<std::size_t>(level)] - mx - std::log(z);
}

}  // namespace detail

/// Per-value log-probabilities of each completion by teacher forcing, in HWC
/// order with zeros at visible pixels.
template <typename T>
std::vector<std::vector<double>> hidden_log_probs(const Model<T>& model, std::span<const Image> completions,
                                                  const Image& source, const Mask& mask) {
  const Signature& sig = model.signature();
  detail::check_pair(sig, source, mask);
  for (const Image& img : completions) {
    detail::check_pair(sig, img, mask);
    for (int y = 0; y < sig.height; ++y)
      for (int x = 0; x < sig.width; ++x)
        if (mask.visible(y, x))
          for (int c = 0; c < sig.channels; ++c)
            if (img.at(y, x, c) != source.at(y, x, c)) {
              throw ValidationError("completion differs from source at visible pixel (" + std::to_string(y) + ", " +
                                    std::to_string(x) + ")");
            }
  }
  std::vector<std::vector<double>> out;
  if (completions.empty()) return out;
  const Tensor<T> cond = model.cond_logits(apply_mask<T>(source, mask));
  const Tensor<T> prior = model.prior_logits(detail::stack_images<T>(completions));
  const int levels = sig.levels;
  for (std::size_t n = 0; n < completions.size(); ++n) {
    std::vector<double> lp(static_cast<std::size_t>(sig.height) * sig.width * sig.channels, 0.0);
    for (int y = 0; y < sig.height; ++y)
      for (int x = 0; x < sig.width; ++x)
        if (!mask.visible(y, x))
          for (int c = 0; c < sig.channels; ++c)
            lp[(static_cast<std::size_t>(y) * sig.width + x) * sig.channels + c] = detail::log_softmax_at(
                prior, y, cond, static_cast<int>(n), c, levels, y, x, completions[n].at(y, x, c));
    out.push_back(std::move(lp));
  }
  return out;
}

/// Exact log-likelihood of the hidden pixels of `completed` given the visible
/// pixels of `source`.
template <typename T>
double log_likelihood(const Model<T>& model, const Image& completed, const Image& source, const Mask& mask) {
  const auto lp = hidden_log_probs(model, std::span<const Image>(&completed, 1), source, mask);
  return std::accumulate(lp[0].begin(), lp[0].end(), 0.0);
}

/// Batched log-likelihoods of several completions of one (source, mask).
template <typename T>
std::vector<double> log_likelihoods(const Model<T>& model, std::span<const Image> completions, const Image& source,
                                    const Mask& mask, std::size_t chunk = 64) {
  std::vector<double> out;
  for (std::size_t i = 0; i < completions.size(); i += chunk) {
    const auto part = completions.subspan(i, std::min(chunk, completions.size() - i));
    for (const auto& lp : hidden_log_probs(model, part, source, mask)) {
      out.push_back(std::accumulate(lp.begin(), lp.end(), 0.0));
    }
  }
  return out;
}

/// Draws one completion per seed. Pixels are visited in raster order; visible
/// ones are copied from `source`, hidden ones drawn from softmax(combined /
/// temperature), every channel of a pixel from the same forward pass. The
/// prior network only sees the rows that can reach the current row, which
/// gives the same logits as a full-image pass. Recorded log-probabilities are
/// at temperature 1, from a teacher-forced pass over the finished images.
template <typename T>
std::vector<SampleResult> sample_inpaintings(const Model<T>& model, const Image& source, const Mask& mask,
                                             std::span<const std::uint64_t> seeds, double temperature = 1.0) {
  const Signature& sig = model.signature();
  detail::check_pair(sig, source, mask);
  if (!(temperature > 0) || !std::isfinite(temperature)) {
    throw ValidationError("temperature must be positive, got " + std::to_string(temperature));
  }
  const int S = static_cast<int>(seeds.size());
  if (S == 0) return {};
  const int H = sig.height, W = sig.width, C = sig.channels, K = sig.levels;

  std::vector<Image> images(static_cast<std::size_t>(S), detail::visible_part(source, mask));
  std::vector<Rng> rngs;
  for (std::uint64_t s : seeds) rngs.emplace_back(s);

  if (mask.hidden_count() > 0) {
    const Tensor<T> cond = model.cond_logits(apply_mask<T>(source, mask));
    Tensor<T> x = detail::stack_images<T>(images);
    const T scale = T{1} / static_cast<T>(K - 1);
    const int reach = model.config().prior_reach_rows();
    std::vector<double> p(static_cast<std::size_t>(K));
    for (int y = 0; y < H; ++y) {
      const int r0 = std::max(0, y - reach);
      const int rows = y - r0 + 1;
      for (int xc = 0; xc < W; ++xc) {
        if (mask.visible(y, xc)) continue;
        Tensor<T> window({S, C, rows, W});
        for (int n = 0; n < S; ++n)
          for (int c = 0; c < C; ++c)
            std::copy(&x.at(n, c, r0, 0), &x.at(n, c, r0, 0) + static_cast<std::size_t>(rows) * W,
                      &window.at(n, c, 0, 0));
        const Tensor<T> prior = model.prior_logits(window);
        for (int n = 0; n < S; ++n) {
          for (int c = 0; c < C; ++c) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int k = 0; k < K; ++k) {
              p[static_cast<std::size_t>(k)] = (static_cast<double>(prior.at(n, c * K + k, rows - 1, xc)) +
                                                static_cast<double>(cond.at(0, c * K + k, y, xc))) /
                                               temperature;
              mx = std::max(mx, p[static_cast<std::size_t>(k)]);
            }
            double z = 0;
            for (auto& v : p) z += v = std::exp(v - mx);
            double u = rngs[static_cast<std::size_t>(n)].uniform() * z;
            int level = K - 1;
            for (int k = 0; k < K; ++k) {
              u -= p[static_cast<std::size_t>(k)];
              if (u < 0) {
                level = k;
                break;
              }
            }
            images[static_cast<std::size_t>(n)].set(y, xc, c, static_cast<std::uint8_t>(level));
            x.at(n, c, y, xc) = static_cast<T>(level) * scale;
          }
        }
      }
    }
  }

  const auto lps = hidden_log_probs(model, std::span<const Image>(images), source, mask);
  std::vector<SampleResult> out;
  for (int n = 0; n < S; ++n) {
    SampleResult r{std::move(images[static_cast<std::size_t>(n)]), mask, lps[static_cast<std::size_t>(n)], 0.0,
                   seeds[static_cast<std::size_t>(n)]};
    r.total_log_likelihood = std::accumulate(r.log_probs.begin(), r.log_probs.end(), 0.0);
    out.push_back(std::move(r));
  }
  return out;
}

template <typename T>
SampleResult sample_inpainting(const Model<T>& model, const Image& source, const Mask& mask, std::uint64_t seed,
                               double temperature = 1.0) {
  return std::move(sample_inpaintings(model, source, mask, std::span<const std::uint64_t>(&seed, 1), temperature)[0]);
}

/// Seeds of `count` samples derived from one root seed.
inline std::vector<std::uint64_t> sample_seeds(std::uint64_t root, std::size_t count) {
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < count; ++i) seeds.push_back(split_seed(root, i));
  return seeds;
}

// ---------------------------------------------------------------------------
// Probability maps (binary single-channel models).

struct ProbabilityMap {
  int height = 0;
  int width = 0;
  std::vector<double> values;  // row-major, in [0, 1]

  double at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

/// P(level 1) at every hidden, not yet sampled pixel from one teacher-forced
/// pass; visible and sampled pixels carry their known value. Unsampled hidden
/// pixels are fed to the prior as 0.
template <typename T>
ProbabilityMap probability_map(const Model<T>& model, const Image& partial, const Mask& mask,
                               const Mask* sampled = nullptr) {
  const Signature& sig = model.signature();
  if (sig.levels != 2 || sig.channels != 1) {
    throw ValidationError("probability maps need a binary single-channel model, got " + sig.to_string());
  }
  detail::check_pair(sig, partial, mask);
  if (sampled && (sampled->height() != sig.height || sampled->width() != sig.width)) {
    throw ValidationError("sampled-pixel mask does not match the model size");
  }
  auto known = [&](int y, int x) { return mask.visible(y, x) || (sampled && sampled->visible(y, x)); };
  Image input(sig);
  for (int y = 0; y < sig.height; ++y)
    for (int x = 0; x < sig.width; ++x)
      if (known(y, x)) input.set(y, x, 0, partial.at(y, x));
  const auto grid = model.forward(input, partial, mask);
  ProbabilityMap map{sig.height, sig.width, std::vector<double>(static_cast<std::size_t>(sig.height) * sig.width)};
  for (int y = 0; y < sig.height; ++y)
    for (int x = 0; x < sig.width; ++x)
      map.values[static_cast<std::size_t>(y) * sig.width + x] =
          known(y, x) ? static_cast<double>(input.at(y, x)) : grid.probabilities(0, y, x)[1];
  return map;
}

/// Maps along one sampling trajectory: frame j is the state before the
/// (j * stride)-th hidden pixel (raster order) is drawn.
template <typename T>
std::vector<ProbabilityMap> probability_progression(const Model<T>& model, const Image& source, const Mask& mask,
                                                    std::uint64_t seed, int stride = 1,
                                                    SampleResult* trajectory = nullptr) {
  if (stride < 1) throw ValidationError("stride must be >= 1, got " + std::to_string(stride));
  SampleResult done = sample_inpainting(model, source, mask, seed);
  std::vector<std::pair<int, int>> hidden;
  for (int y = 0; y < mask.height(); ++y)
    for (int x = 0; x < mask.width(); ++x)
      if (!mask.visible(y, x)) hidden.emplace_back(y, x);
  std::vector<ProbabilityMap> frames;
  Mask sampled(mask.height(), mask.width(), std::uint8_t{0});
  Image partial = detail::visible_part(source, mask);
  for (std::size_t j = 0; j < hidden.size(); ++j) {
    if (j % static_cast<std::size_t>(stride) == 0) frames.push_back(probability_map(model, partial, mask, &sampled));
    const auto [y, x] = hidden[j];
    partial.set(y, x, 0, done.image.at(y, x));
    sampled.set(y, x, 1);
  }
  if (trajectory) *trajectory = std::move(done);
  return frames;
}

/// Mean binary entropy (nats) of the map over the pixels hidden by `mask`.
inline double map_entropy(const ProbabilityMap& map, const Mask& mask) {
  double sum = 0;
  std::size_t n = 0;
  for (int y = 0; y < map.height; ++y) {
    for (int x = 0; x < map.width; ++x) {
      if (mask.visible(y, x)) continue;
      const double p = map.at(y, x);
      if (p > 0 && p < 1) sum -= p * std::log(p) + (1 - p) * std::log(1 - p);
      ++n;
    }
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

// ---------------------------------------------------------------------------
// Ranking.

struct Ranking {
  std::vector<std::size_t> order;  // indices into the results, best first
  std::optional<int> ground_truth_rank;  // 1-based among samples + ground truth
  std::optional<double> ground_truth_log_likelihood;
};

/// Orders completions by log-likelihood (descending, ties by index). With a
/// ground-truth log-likelihood, its rank is 1 + the number of samples scoring
/// strictly higher, so ties go to the ground truth.
inline Ranking rank_inpaintings(std::span<const SampleResult> results,
                                std::optional<double> ground_truth_log_likelihood = std::nullopt) {
  for (const auto& r : results) {
    if (!(r.mask == results[0].mask)) throw ValidationError("rank_inpaintings: results use different masks");
  }
  Ranking out;
  out.order.resize(results.size());
  std::iota(out.order.begin(), out.order.end(), std::size_t{0});
  std::stable_sort(out.order.begin(), out.order.end(), [&](std::size_t a, std::size_t b) {
    return results[a].total_log_likelihood > results[b].total_log_likelihood;
  });
  if (ground_truth_log_likelihood) {
    int above = 0;
    for (const auto& r : results) above += r.total_log_likelihood > *ground_truth_log_likelihood ? 1 : 0;
    out.ground_truth_rank = 1 + above;
    out.ground_truth_log_likelihood = ground_truth_log_likelihood;
  }
  return out;
}

template <typename T>
Ranking rank_inpaintings(const Model<T>& model, std::span<const SampleResult> results, const Image& source,
                         const Image& ground_truth) {
  if (results.empty()) throw ValidationError("rank_inpaintings: no samples");
  return rank_inpaintings(results, log_likelihood(model, ground_truth, source, results[0].mask));
}

struct RankStudy {
  std::vector<int> ranks;  // ground-truth rank per image, 1..samples+1
  double mean_rank = 0;
};

/// For each image: `samples` completions under masks[i % masks.size()] with
/// seeds from split_seed(seed, i), then the rank of the original among them.
template <typename T>
RankStudy rank_study(const Model<T>& model, std::span<const Image> images, std::span<const Mask> masks, int samples,
                     std::uint64_t seed) {
  if (images.empty() || masks.empty()) throw ValidationError("rank study needs images and masks");
  if (samples < 1) throw ValidationError("samples per image must be >= 1");
  RankStudy out;
  out.ranks.resize(images.size());
  parallel_for(images.size(), [&](std::size_t i) {
    const Mask& mask = masks[i % masks.size()];
    const auto results = sample_inpaintings(model, images[i], mask,
                                            sample_seeds(split_seed(seed, i), static_cast<std::size_t>(samples)));
    out.ranks[i] = *rank_inpaintings(model, results, images[i], images[i]).ground_truth_rank;
  });
  out.mean_rank = std::accumulate(out.ranks.begin(), out.ranks.end(), 0.0) / static_cast<double>(out.ranks.size());
  return out;
}

}  // namespace pccnn
