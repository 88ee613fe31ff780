#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "pccnn/mask.hpp"
#include "pccnn/parallel.hpp"
#include "pccnn/sampling.hpp"

namespace pccnn {

inline constexpr double kPsnrDisplayCap = 99.0;

namespace detail {

inline void check_same_signature(const Image& a, const Image& b) {
  if (a.signature() != b.signature()) {
    throw ValidationError("metric inputs differ: " + a.signature().to_string() + " vs " + b.signature().to_string());
  }
}

/// Mean of f(|a - b| / (K - 1)) over all values.
template <typename F>
double mean_normalized(const Image& a, const Image& b, F f) {
  check_same_signature(a, b);
  const double scale = 1.0 / (a.levels() - 1);
  double sum = 0;
  const auto& pa = a.pixels();
  const auto& pb = b.pixels();
  for (std::size_t i = 0; i < pa.size(); ++i) sum += f(std::abs(double(pa[i]) - double(pb[i])) * scale);
  return sum / static_cast<double>(pa.size());
}

}  // namespace detail

/// Mean absolute normalized difference over all pixels, in percent.
inline double l1(const Image& pred, const Image& truth) {
  return 100.0 * detail::mean_normalized(pred, truth, [](double d) { return d; });
}

/// Root-mean-square normalized difference over all pixels, in percent.
inline double l2(const Image& pred, const Image& truth) {
  return 100.0 * std::sqrt(detail::mean_normalized(pred, truth, [](double d) { return d * d; }));
}

/// 10 log10(1 / MSE) on intensities in [0, 1]; +inf for identical images.
inline double psnr(const Image& pred, const Image& truth) {
  const double mse = detail::mean_normalized(pred, truth, [](double d) { return d * d; });
  if (mse == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

inline double psnr_display(double db) { return std::min(db, kPsnrDisplayCap); }

struct MetricTriple {
  double l1 = 0;
  double l2 = 0;
  double psnr = 0;  // may be +inf
};

struct ImageEval {
  std::size_t index = 0;
  MetricTriple mean;  // averaged over samples (pSNR averaged on capped values)
  MetricTriple best;  // best sample per metric
};

struct EvalReport {
  std::vector<ImageEval> images;
  MetricTriple mean;
  MetricTriple best;
  int samples_per_image = 0;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const {
    auto triple = [](const MetricTriple& t) {
      return nlohmann::json{{"l1_percent", t.l1},
                            {"l2_percent", t.l2},
                            {"psnr_db", psnr_display(t.psnr)},
                            {"psnr_infinite", std::isinf(t.psnr)}};
    };
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : images) rows.push_back({{"index", r.index}, {"mean", triple(r.mean)}, {"best", triple(r.best)}});
    return {{"samples_per_image", samples_per_image},
            {"seed", seed},
            {"aggregate", {{"mean", triple(mean)}, {"best", triple(best)}}},
            {"images", rows}};
  }

  std::string to_csv() const {
    std::ostringstream out;
    out << "index,l1_mean,l2_mean,psnr_mean,l1_best,l2_best,psnr_best\n";
    for (const auto& r : images) {
      out << r.index << ',' << r.mean.l1 << ',' << r.mean.l2 << ',' << psnr_display(r.mean.psnr) << ',' << r.best.l1
          << ',' << r.best.l2 << ',' << psnr_display(r.best.psnr) << '\n';
    }
    return out.str();
  }
};

/// Produces `seeds.size()` completions of (source, mask).
using Sampler = std::function<std::vector<Image>(const Image& source, const Mask& mask,
                                                 std::span<const std::uint64_t> seeds)>;

template <typename T>
Sampler model_sampler(const Model<T>& model, double temperature = 1.0) {
  return [&model, temperature](const Image& source, const Mask& mask, std::span<const std::uint64_t> seeds) {
    std::vector<Image> out;
    for (auto& r : sample_inpaintings(model, source, mask, seeds, temperature)) out.push_back(std::move(r.image));
    return out;
  };
}

inline MetricTriple score(const Image& pred, const Image& truth) { return {l1(pred, truth), l2(pred, truth), psnr(pred, truth)}; }

/// Image i is completed under masks[i % masks.size()] with seeds derived from
/// split_seed(seed, i); metrics compare full images against the originals.
inline EvalReport evaluate(const Sampler& sampler, std::span<const Image> images, std::span<const Mask> masks,
                           int samples_per_image, std::uint64_t seed) {
  if (images.empty()) throw ValidationError("evaluate: no images");
  if (masks.empty()) throw ValidationError("evaluate: no masks");
  if (samples_per_image < 1) throw ValidationError("samples per image must be >= 1");
  EvalReport report;
  report.samples_per_image = samples_per_image;
  report.seed = seed;
  report.images.resize(images.size());
  parallel_for(images.size(), [&](std::size_t i) {
    const Image& truth = images[i];
    const auto seeds = sample_seeds(split_seed(seed, i), static_cast<std::size_t>(samples_per_image));
    const auto samples = sampler(truth, masks[i % masks.size()], seeds);
    ImageEval e;
    e.index = i;
    e.best = {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(), -1.0};
    for (const Image& s : samples) {
      const MetricTriple m = score(s, truth);
      e.mean.l1 += m.l1;
      e.mean.l2 += m.l2;
      e.mean.psnr += psnr_display(m.psnr);
      e.best.l1 = std::min(e.best.l1, m.l1);
      e.best.l2 = std::min(e.best.l2, m.l2);
      e.best.psnr = std::max(e.best.psnr, m.psnr);
    }
    const double n = static_cast<double>(samples.size());
    e.mean.l1 /= n;
    e.mean.l2 /= n;
    e.mean.psnr /= n;
    report.images[i] = e;
  });
  for (const auto& e : report.images) {
    report.mean.l1 += e.mean.l1;
    report.mean.l2 += e.mean.l2;
    report.mean.psnr += e.mean.psnr;
    report.best.l1 += e.best.l1;
    report.best.l2 += e.best.l2;
    report.best.psnr += psnr_display(e.best.psnr);
  }
  const double n = static_cast<double>(report.images.size());
  report.mean = {report.mean.l1 / n, report.mean.l2 / n, report.mean.psnr / n};
  report.best = {report.best.l1 / n, report.best.l2 / n, report.best.psnr / n};
  return report;
}

}  // namespace pccnn
