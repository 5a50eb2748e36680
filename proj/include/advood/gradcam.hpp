#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "advood/autograd.hpp"
#include "advood/error.hpp"
#include "advood/model.hpp"
#include "advood/ops.hpp"
#include "json.hpp"

namespace advood {

struct GradCamMap {
  Tensor map;              // [h, w] in [0, 1]
  int target = 0;
  std::size_t sample = 0;
  bool degenerate = false;  // raw map was all zero
};

// relu(sum_k mean(g_k) a_k), scaled so the maximum is 1. `a` and `g` are
// [K, h, w] for one sample.
inline GradCamMap cam_from_gradients(const double* a, const double* g, std::size_t k,
                                     std::size_t h, std::size_t w) {
  const std::size_t hw = h * w;
  GradCamMap m;
  m.map = Tensor(Shape{h, w}, 0.0);
  for (std::size_t c = 0; c < k; ++c) {
    double weight = 0.0;
    for (std::size_t i = 0; i < hw; ++i) weight += g[c * hw + i];
    weight /= static_cast<double>(hw);
    for (std::size_t i = 0; i < hw; ++i) m.map[i] += weight * a[c * hw + i];
  }
  double peak = 0.0;
  for (double& v : m.map.data()) {
    v = std::max(v, 0.0);
    peak = std::max(peak, v);
  }
  if (peak > 0.0) {
    for (double& v : m.map.data()) v /= peak;
  } else {
    m.degenerate = true;
  }
  return m;
}

// Maps for a batch of last-block activations [N, K, h, w], differentiating
// the target logit through global pooling and the classifier head.
inline std::vector<GradCamMap> gradcam_from_activations(const SmallConvNet& net,
                                                        const Tensor& activations,
                                                        std::span<const int> targets) {
  if (activations.rank() != 4) throw ShapeError("gradcam expects [N,K,h,w] activations");
  const std::size_t n = activations.dim(0), k = activations.dim(1), h = activations.dim(2),
                    w = activations.dim(3);
  if (targets.size() != n) throw ShapeError("gradcam: target count differs from batch size");
  const std::size_t classes = net.num_classes();
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= classes) {
      throw Error("gradcam: target class " + std::to_string(t) + " outside [0, " +
                  std::to_string(classes) + ")");
    }
  }
  Graph g;
  Var a = g.leaf(activations, true);
  Var logits = ops::linear(ops::global_avgpool(a), g.constant(net.checkpoint().weights.at("fc.weight")),
                           g.constant(net.checkpoint().weights.at("fc.bias")));
  Var total = ops::pick(logits, static_cast<std::size_t>(targets[0]));
  for (std::size_t i = 1; i < n; ++i) {
    total = ops::add(total, ops::pick(logits, i * classes + static_cast<std::size_t>(targets[i])));
  }
  g.backward(total);
  const Tensor grad = a.grad();
  std::vector<GradCamMap> maps;
  const std::size_t per = k * h * w;
  for (std::size_t i = 0; i < n; ++i) {
    GradCamMap m = cam_from_gradients(activations.data().data() + i * per,
                                      grad.data().data() + i * per, k, h, w);
    m.target = targets[i];
    m.sample = i;
    maps.push_back(std::move(m));
  }
  return maps;
}

inline std::vector<GradCamMap> gradcam(const SmallConvNet& net, const Tensor& images,
                                       std::span<const int> targets) {
  return gradcam_from_activations(net, forward_with_taps(net, images, false).activations,
                                  targets);
}

namespace detail {
inline void require_same_map_shape(const GradCamMap& a, const GradCamMap& b) {
  if (a.map.shape() != b.map.shape()) {
    throw ShapeError("map shapes differ: " + shape_string(a.map.shape()) + " vs " +
                     shape_string(b.map.shape()));
  }
}
}  // namespace detail

inline double l2_distance(const GradCamMap& a, const GradCamMap& b) {
  detail::require_same_map_shape(a, b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.map.size(); ++i) {
    const double d = a.map[i] - b.map[i];
    s += d * d;
  }
  return std::sqrt(s);
}

inline constexpr double kSsimC1 = 1e-4;  // (0.01 * 1)^2
inline constexpr double kSsimC2 = 9e-4;  // (0.03 * 1)^2

// Single-window SSIM over the whole map with population moments.
inline double ssim(const GradCamMap& a, const GradCamMap& b) {
  detail::require_same_map_shape(a, b);
  const std::size_t n = a.map.size();
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a.map[i];
    mb += b.map[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double va = 0.0, vb = 0.0, cov = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double da = a.map[i] - ma, db = b.map[i] - mb;
    va += da * da;
    vb += db * db;
    cov += da * db;
  }
  va /= static_cast<double>(n);
  vb /= static_cast<double>(n);
  cov /= static_cast<double>(n);
  return ((2.0 * ma * mb + kSsimC1) * (2.0 * cov + kSsimC2)) /
         ((ma * ma + mb * mb + kSsimC1) * (va + vb + kSsimC2));
}

struct ShiftRecord {
  std::size_t sample = 0;
  std::string attack;
  double l2 = 0.0;
  double ssim = 1.0;
  int benign_class = 0;
  int adv_class = 0;
  bool degenerate = false;  // either map was all zero
};

struct ShiftHistogram {
  std::vector<double> l2_edges;    // l2_bins + 1
  std::vector<double> ssim_edges;  // ssim_bins + 1
  std::vector<std::vector<std::size_t>> counts;  // [l2_bin][ssim_bin]
  std::size_t total = 0;
  double mean_l2 = 0.0;
  double mean_ssim = 0.0;
};

namespace detail {
inline std::size_t bin_of(double v, double lo, double hi, std::size_t bins, bool empty_to_last) {
  if (!(hi > lo)) return empty_to_last ? bins - 1 : 0;
  const double pos = (v - lo) / (hi - lo) * static_cast<double>(bins);
  return std::min(bins - 1, static_cast<std::size_t>(std::max(0.0, std::floor(pos))));
}

inline std::vector<double> edges(double lo, double hi, std::size_t bins) {
  std::vector<double> e(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) {
    e[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
  }
  return e;
}
}  // namespace detail

// 2-D histogram over l2 in [0, max] and ssim in [min, 1].
inline ShiftHistogram shift_density(std::span<const ShiftRecord> records, std::size_t l2_bins,
                                    std::size_t ssim_bins) {
  if (records.empty()) throw Error("shift_density: no records");
  if (l2_bins == 0 || ssim_bins == 0) throw Error("shift_density: bin counts must be positive");
  double l2_max = 0.0, ssim_min = 1.0;
  for (const ShiftRecord& r : records) {
    l2_max = std::max(l2_max, r.l2);
    ssim_min = std::min(ssim_min, r.ssim);
  }
  ShiftHistogram h;
  h.l2_edges = detail::edges(0.0, l2_max, l2_bins);
  h.ssim_edges = detail::edges(ssim_min, 1.0, ssim_bins);
  h.counts.assign(l2_bins, std::vector<std::size_t>(ssim_bins, 0));
  for (const ShiftRecord& r : records) {
    const std::size_t i = detail::bin_of(r.l2, 0.0, l2_max, l2_bins, false);
    const std::size_t j = detail::bin_of(r.ssim, ssim_min, 1.0, ssim_bins, true);
    ++h.counts[i][j];
    h.mean_l2 += r.l2;
    h.mean_ssim += r.ssim;
  }
  h.total = records.size();
  h.mean_l2 /= static_cast<double>(h.total);
  h.mean_ssim /= static_cast<double>(h.total);
  return h;
}

inline nlohmann::json to_json(const ShiftHistogram& h) {
  return {{"l2_edges", h.l2_edges}, {"ssim_edges", h.ssim_edges}, {"counts", h.counts},
          {"total", h.total},       {"mean_l2", h.mean_l2},         {"mean_ssim", h.mean_ssim}};
}

}  // namespace advood
