#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <limits>
#include <mutex>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "advood/autograd.hpp"
#include "advood/error.hpp"
#include "advood/model.hpp"
#include "advood/ops.hpp"
#include "advood/rng.hpp"
#include "advood/tensor.hpp"

namespace advood {

enum class AttackKind { kFgsm, kPgd, kMpgd, kDeepFool };

inline constexpr std::array<AttackKind, 4> kAllAttacks = {
    AttackKind::kFgsm, AttackKind::kPgd, AttackKind::kMpgd, AttackKind::kDeepFool};

inline std::string_view to_string(AttackKind k) {
  switch (k) {
    case AttackKind::kFgsm: return "fgsm";
    case AttackKind::kPgd: return "pgd";
    case AttackKind::kMpgd: return "mpgd";
    case AttackKind::kDeepFool: return "deepfool";
  }
  return "?";
}

inline AttackKind parse_attack_kind(std::string_view s) {
  for (AttackKind k : kAllAttacks) {
    if (to_string(k) == s) return k;
  }
  throw Error("unknown attack '" + std::string(s) +
              "' (valid: fgsm, pgd, mpgd, deepfool)");
}

// Patch rows [row, row+height) and columns [col, col+width). A negative row
// or col draws the location per sample from the attack seed.
struct Patch {
  int row = -1;
  int col = -1;
  int height = 8;
  int width = 8;
  friend bool operator==(const Patch&, const Patch&) = default;
};

struct AttackConfig {
  AttackKind kind = AttackKind::kPgd;
  double epsilon = 8.0 / 255.0;   // L-inf radius (fgsm, pgd)
  int steps = 20;                 // pgd, mpgd
  double step_size = 0.0;         // 0 selects the per-kind default
  bool random_start = true;       // pgd
  Patch patch;                    // mpgd
  double overshoot = 0.02;        // deepfool
  int max_iters = 50;             // deepfool
  std::uint64_t seed = 0;

  // PGD: 2.5 * eps / T. mPGD: 4/255.
  double effective_step_size() const {
    if (step_size > 0.0) return step_size;
    if (kind == AttackKind::kMpgd) return 4.0 / 255.0;
    if (kind == AttackKind::kFgsm) return epsilon;
    return 2.5 * epsilon / static_cast<double>(steps);
  }

  void validate(std::size_t height = kImageSize, std::size_t width = kImageSize) const {
    if ((kind == AttackKind::kFgsm || kind == AttackKind::kPgd) && !(epsilon > 0.0)) {
      throw Error(std::string(to_string(kind)) + ": epsilon must be positive");
    }
    if ((kind == AttackKind::kPgd || kind == AttackKind::kMpgd) && steps < 1) {
      throw Error(std::string(to_string(kind)) + ": steps must be >= 1");
    }
    if (kind == AttackKind::kPgd && !(effective_step_size() > 0.0 &&
                                      effective_step_size() <= epsilon)) {
      throw Error("pgd: step size must satisfy 0 < alpha <= epsilon");
    }
    if (kind == AttackKind::kMpgd) {
      if (!(effective_step_size() > 0.0)) throw Error("mpgd: step size must be positive");
      if (patch.height <= 0 || patch.width <= 0 ||
          static_cast<std::size_t>(patch.height) > height ||
          static_cast<std::size_t>(patch.width) > width) {
        throw Error("mpgd: patch " + std::to_string(patch.height) + "x" +
                    std::to_string(patch.width) + " does not fit the image");
      }
      if ((patch.row >= 0) != (patch.col >= 0)) {
        throw Error("mpgd: patch row and col must both be fixed or both random");
      }
      if (patch.row >= 0 &&
          (static_cast<std::size_t>(patch.row + patch.height) > height ||
           static_cast<std::size_t>(patch.col + patch.width) > width)) {
        throw Error("mpgd: patch out of image bounds");
      }
    }
    if (kind == AttackKind::kDeepFool) {
      if (overshoot < 0.0) throw Error("deepfool: overshoot must be nonnegative");
      if (max_iters < 1) throw Error("deepfool: max_iters must be >= 1");
    }
  }
};

struct AttackResult {
  AttackConfig config;
  Tensor adversarial;
  std::vector<int> labels;
  std::vector<int> clean_pred;
  std::vector<int> adv_pred;
  std::vector<char> clean_correct;
  std::vector<char> success;  // adv_pred != clean_pred
  std::vector<double> linf;
  std::vector<double> l2;
  std::vector<int> iterations;               // deepfool steps taken
  std::vector<char> converged;               // deepfool flipped within max_iters
  std::vector<std::array<int, 2>> patch_origin;  // mpgd (row, col)
  double asr = 0.0;

  std::size_t size() const { return labels.size(); }
};

// Fraction of clean-correct samples whose prediction flipped.
inline double asr(const AttackResult& r) {
  if (r.size() == 0) throw Error("asr: empty batch");
  std::size_t correct = 0, flipped = 0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    if (!r.clean_correct[i]) continue;
    ++correct;
    flipped += r.success[i] ? 1 : 0;
  }
  if (correct == 0) throw Error("asr: no correctly classified clean samples");
  return static_cast<double>(flipped) / static_cast<double>(correct);
}

inline double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// d/dx of the summed cross entropy. Summation keeps every sample's gradient
// independent of how the batch is chunked.
inline Tensor loss_input_gradient(const Classifier& model, const Tensor& x,
                                  std::span<const int> labels) {
  Graph g;
  Var in = g.leaf(x, true);
  g.backward(ops::cross_entropy(model.logits(g, in), labels, ops::Reduction::kSum));
  return in.grad();
}

inline std::vector<int> classify(const Classifier& model, const Tensor& x) {
  Graph g;
  return kernels::argmax_rows(model.logits(g, g.constant(x)).value());
}

struct DeepFoolTrace {
  Tensor perturbation;  // (1 + overshoot) * accumulated step, before clipping
  Tensor adversarial;   // clip(x + perturbation, 0, 1)
  int iterations = 0;
  bool converged = false;
};

// Multi-class DeepFool on one sample [1,...]. `label` is the class to move
// away from; if the sample is not currently classified as `label` nothing is
// done.
inline DeepFoolTrace deepfool_sample(const Classifier& model, const Tensor& x, int label,
                                     const AttackConfig& cfg) {
  const std::size_t classes = model.num_classes();
  DeepFoolTrace t;
  t.perturbation = Tensor(x.shape(), 0.0);
  t.adversarial = x;
  std::vector<double> r_tot(x.size(), 0.0);
  for (int it = 0;; ++it) {
    Graph g;
    Var in = g.leaf(t.adversarial, true);
    Var logits = model.logits(g, in);
    const int current = kernels::argmax_rows(logits.value())[0];
    if (current != label) {
      t.converged = it > 0;
      break;
    }
    if (it == cfg.max_iters) break;
    double best_ratio = std::numeric_limits<double>::infinity();
    Tensor best_w;
    double best_f = 0.0;
    for (std::size_t k = 0; k < classes; ++k) {
      if (static_cast<int>(k) == label) continue;
      g.reset_grads();
      Var diff = ops::sub(ops::pick(logits, k), ops::pick(logits, static_cast<std::size_t>(label)));
      g.backward(diff);
      Tensor w = in.grad();
      double norm2 = 0.0;
      for (double v : w.data()) norm2 += v * v;
      if (norm2 == 0.0) continue;
      const double f = diff.value().item();
      const double ratio = std::abs(f) / std::sqrt(norm2);
      if (ratio < best_ratio) {
        best_ratio = ratio;
        best_w = std::move(w);
        best_f = f;
      }
    }
    if (best_w.empty()) break;  // flat logits: no direction to follow
    double norm2 = 0.0;
    for (double v : best_w.data()) norm2 += v * v;
    const double coeff = std::abs(best_f) / norm2;
    for (std::size_t i = 0; i < r_tot.size(); ++i) r_tot[i] += coeff * best_w[i];
    for (std::size_t i = 0; i < r_tot.size(); ++i) {
      t.perturbation[i] = (1.0 + cfg.overshoot) * r_tot[i];
      t.adversarial[i] = std::clamp(x[i] + t.perturbation[i], 0.0, 1.0);
    }
    t.iterations = it + 1;
  }
  return t;
}

namespace detail {

struct Chunk {
  std::size_t begin, end;
};

// Runs fn(chunk) over [0, n) in fixed-size chunks on up to `threads` workers.
// Chunk boundaries do not depend on the thread count.
template <typename Fn>
void for_each_chunk(std::size_t n, std::size_t chunk, unsigned threads, Fn&& fn) {
  std::vector<Chunk> chunks;
  for (std::size_t b = 0; b < n; b += chunk) chunks.push_back({b, std::min(n, b + chunk)});
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(chunks.size())));
  if (threads == 1) {
    for (const Chunk& c : chunks) fn(c);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < chunks.size(); i = next++) {
        try {
          fn(chunks[i]);
        } catch (...) {
          std::lock_guard lock(failure_mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

inline void apply_signed_step(double* adv, const double* grad, std::size_t n, double step) {
  for (std::size_t i = 0; i < n; ++i) adv[i] = std::clamp(adv[i] + step * sign(grad[i]), 0.0, 1.0);
}

}  // namespace detail

// Runs one attack over a batch of [N,C,H,W] images in [0,1] with ground-truth
// labels. Deterministic in config.seed regardless of `threads`.
inline AttackResult run_attack(const Classifier& model, const Tensor& images,
                               const std::vector<int>& labels, const AttackConfig& cfg,
                               unsigned threads = 1, std::size_t chunk = 25) {
  if (images.rank() != 4) throw ShapeError("attack expects [N,C,H,W] images");
  const std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (labels.size() != n) throw ShapeError("attack: label count differs from batch size");
  cfg.validate(h, w);
  const std::size_t per = c * h * w;

  AttackResult r;
  r.config = cfg;
  r.labels = labels;
  r.adversarial = images;
  r.clean_pred.assign(n, 0);
  r.adv_pred.assign(n, 0);
  r.iterations.assign(n, 0);
  r.converged.assign(n, 0);
  if (cfg.kind == AttackKind::kMpgd) r.patch_origin.assign(n, {0, 0});

  detail::for_each_chunk(n, chunk, threads, [&](const detail::Chunk& ch) {
    const std::size_t m = ch.end - ch.begin;
    const Tensor x = images.rows(ch.begin, ch.end);
    std::span<const int> y(labels.data() + ch.begin, m);
    const std::vector<int> clean = classify(model, x);
    std::copy(clean.begin(), clean.end(), r.clean_pred.begin() + static_cast<long>(ch.begin));
    Tensor adv = x;
    const double alpha = cfg.effective_step_size();
    switch (cfg.kind) {
      case AttackKind::kFgsm: {
        const Tensor g = loss_input_gradient(model, x, y);
        detail::apply_signed_step(adv.data().data(), g.data().data(), adv.size(), cfg.epsilon);
        break;
      }
      case AttackKind::kPgd: {
        if (cfg.random_start) {
          for (std::size_t s = 0; s < m; ++s) {
            Rng rng(mix_seed(cfg.seed, ch.begin + s));
            for (std::size_t i = 0; i < per; ++i) {
              double& v = adv[s * per + i];
              v = std::clamp(v + rng.uniform(-cfg.epsilon, cfg.epsilon), 0.0, 1.0);
            }
          }
        }
        for (int t = 0; t < cfg.steps; ++t) {
          const Tensor g = loss_input_gradient(model, adv, y);
          detail::apply_signed_step(adv.data().data(), g.data().data(), adv.size(), alpha);
          for (std::size_t i = 0; i < adv.size(); ++i) {
            adv[i] = std::clamp(adv[i], x[i] - cfg.epsilon, x[i] + cfg.epsilon);
          }
        }
        break;
      }
      case AttackKind::kMpgd: {
        std::vector<std::array<int, 2>> origin(m);
        for (std::size_t s = 0; s < m; ++s) {
          if (cfg.patch.row >= 0) {
            origin[s] = {cfg.patch.row, cfg.patch.col};
          } else {
            Rng rng(mix_seed(cfg.seed, ch.begin + s));
            origin[s] = {static_cast<int>(rng.below(h - static_cast<std::size_t>(cfg.patch.height) + 1)),
                         static_cast<int>(rng.below(w - static_cast<std::size_t>(cfg.patch.width) + 1))};
          }
          r.patch_origin[ch.begin + s] = origin[s];
        }
        for (int t = 0; t < cfg.steps; ++t) {
          const Tensor g = loss_input_gradient(model, adv, y);
          for (std::size_t s = 0; s < m; ++s)
            for (std::size_t k = 0; k < c; ++k)
              for (int py = 0; py < cfg.patch.height; ++py)
                for (int px = 0; px < cfg.patch.width; ++px) {
                  const std::size_t idx =
                      s * per + (k * h + static_cast<std::size_t>(origin[s][0] + py)) * w +
                      static_cast<std::size_t>(origin[s][1] + px);
                  adv[idx] = std::clamp(adv[idx] + alpha * sign(g[idx]), 0.0, 1.0);
                }
        }
        break;
      }
      case AttackKind::kDeepFool: {
        for (std::size_t s = 0; s < m; ++s) {
          if (clean[s] != y[s]) continue;  // already misclassified: untouched
          const DeepFoolTrace t = deepfool_sample(model, x.rows(s, s + 1), y[s], cfg);
          std::copy(t.adversarial.data().begin(), t.adversarial.data().end(),
                    adv.data().begin() + static_cast<long>(s * per));
          r.iterations[ch.begin + s] = t.iterations;
          r.converged[ch.begin + s] = t.converged ? 1 : 0;
        }
        break;
      }
    }
    const std::vector<int> after = classify(model, adv);
    std::copy(after.begin(), after.end(), r.adv_pred.begin() + static_cast<long>(ch.begin));
    std::copy(adv.data().begin(), adv.data().end(),
              r.adversarial.data().begin() + static_cast<long>(ch.begin * per));
  });

  r.clean_correct.resize(n);
  r.success.resize(n);
  r.linf.resize(n);
  r.l2.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    r.clean_correct[i] = r.clean_pred[i] == labels[i] ? 1 : 0;
    r.success[i] = r.adv_pred[i] != r.clean_pred[i] ? 1 : 0;
    double linf = 0.0, ss = 0.0;
    for (std::size_t j = 0; j < per; ++j) {
      const double d = r.adversarial[i * per + j] - images[i * per + j];
      linf = std::max(linf, std::abs(d));
      ss += d * d;
    }
    r.linf[i] = linf;
    r.l2[i] = std::sqrt(ss);
  }
  const bool any_correct =
      std::any_of(r.clean_correct.begin(), r.clean_correct.end(), [](char v) { return v != 0; });
  r.asr = any_correct ? asr(r) : 0.0;
  return r;
}

}  // namespace advood
