#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "advood/aotb.hpp"
#include "advood/error.hpp"
#include "advood/rng.hpp"
#include "advood/taps.hpp"
#include "advood/tensor.hpp"

namespace advood {

inline constexpr std::size_t kImageChannels = 3;
inline constexpr std::size_t kImageSize = 32;
inline constexpr std::size_t kImagePixels = kImageChannels * kImageSize * kImageSize;
inline constexpr int kMinClasses = 4;
inline constexpr int kMaxClasses = 10;

enum class Split { kTrain = 0, kTest = 1 };
enum class OodKind { kNearShapes = 0, kFarNoise = 1, kAdversarial = 2 };

inline std::string_view to_string(Split s) { return s == Split::kTrain ? "train" : "test"; }

inline std::string_view to_string(OodKind k) {
  switch (k) {
    case OodKind::kNearShapes: return "near_shapes";
    case OodKind::kFarNoise: return "far_noise";
    case OodKind::kAdversarial: return "adversarial";
  }
  return "?";
}

inline OodKind parse_ood_kind(std::string_view s) {
  if (s == "near_shapes") return OodKind::kNearShapes;
  if (s == "far_noise") return OodKind::kFarNoise;
  if (s == "adversarial") return OodKind::kAdversarial;
  throw Error("unknown OOD kind '" + std::string(s) +
              "' (expected near_shapes, far_noise or adversarial)");
}

struct LabeledDataset {
  Tensor images;  // [N,3,32,32] in [0,1]
  std::vector<int> labels;
  int num_classes = 0;
  Split split = Split::kTrain;
  std::string provenance;

  std::size_t size() const { return labels.size(); }
};

struct OodDataset {
  Tensor images;
  OodKind kind = OodKind::kFarNoise;
  std::string provenance;
  // Generator metadata: primitive id per image, -1 for noise images.
  std::vector<int> primitives;

  std::size_t size() const { return images.empty() ? 0 : images.dim(0); }
};

// Primitive ids 0..9 are available as ID classes; 10..13 are only ever drawn
// for near-OOD, together with any id >= the ID class count.
inline constexpr int kNumPrimitives = 14;

inline std::string_view primitive_name(int id) {
  static constexpr std::array<std::string_view, kNumPrimitives> names = {
      "circle",  "square",    "triangle", "plus",     "diamond",
      "ring",    "saltire",   "frame",    "half_disc", "bars",
      "ellipse", "l_shape",   "crescent", "checker"};
  return names.at(static_cast<std::size_t>(id));
}

namespace detail {

// Coverage test in shape-local coordinates; (u, v) scaled by the radius with
// v pointing down.
inline bool inside_primitive(int id, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  const double r2 = u * u + v * v;
  switch (id) {
    case 0: return r2 <= 1.0;
    case 1: return au <= 0.8 && av <= 0.8;
    case 2: return v <= 0.8 && v >= -0.9 && au <= 0.55 * (v + 0.9);
    case 3: return (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0);
    case 4: return au + av <= 1.0;
    case 5: return r2 <= 1.0 && r2 >= 0.3;
    case 6: return au <= 0.9 && av <= 0.9 &&
                   (std::abs(u - v) <= 0.4 || std::abs(u + v) <= 0.4);
    case 7: return au <= 0.9 && av <= 0.9 && !(au <= 0.5 && av <= 0.5);
    case 8: return r2 <= 1.0 && v >= -0.1;
    case 9: return au <= 1.0 && (std::abs(v - 0.5) <= 0.22 || std::abs(v + 0.5) <= 0.22);
    case 10: return u * u + (v / 0.45) * (v / 0.45) <= 1.0;
    case 11: return (u >= -0.8 && u <= -0.3 && av <= 0.8) ||
                    (au <= 0.8 && v >= 0.3 && v <= 0.8);
    case 12: return r2 <= 1.0 && (u - 0.45) * (u - 0.45) + v * v > 0.7;
    case 13: return au <= 0.9 && av <= 0.9 && ((u > 0) != (v > 0));
  }
  throw Error("unknown primitive id " + std::to_string(id));
}

inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  const double hh = std::fmod(h, 1.0) * 6.0;
  const int sector = static_cast<int>(hh);
  const double f = hh - sector;
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

inline double clip01(double x) { return std::clamp(x, 0.0, 1.0); }

// Renders one primitive into `out` (3*32*32 values): randomized position
// (+-4 px), scale (+-20%), hue and background, 2x2 supersampled coverage,
// additive Gaussian noise sigma 0.02, clipped to [0,1].
inline void render_primitive(int id, Rng& rng, double* out) {
  const double cx = 15.5 + rng.uniform(-4.0, 4.0);
  const double cy = 15.5 + rng.uniform(-4.0, 4.0);
  const double radius = 9.0 * rng.uniform(0.8, 1.2);
  const auto fg = hsv_to_rgb(rng.uniform(), rng.uniform(0.3, 0.7), rng.uniform(0.4, 0.7));
  const double bg = rng.uniform(0.25, 0.5);
  constexpr std::size_t n = kImageSize;
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      int hits = 0;
      for (double sy : {0.25, 0.75}) {
        for (double sx : {0.25, 0.75}) {
          const double u = (static_cast<double>(x) + sx - 0.5 - cx) / radius;
          const double v = (static_cast<double>(y) + sy - 0.5 - cy) / radius;
          hits += inside_primitive(id, u, v) ? 1 : 0;
        }
      }
      const double cover = hits / 4.0;
      for (std::size_t c = 0; c < kImageChannels; ++c) {
        const double clean = cover * fg[c] + (1.0 - cover) * bg;
        out[(c * n + y) * n + x] = clip01(clean + rng.normal(0.0, 0.02));
      }
    }
  }
}

inline void render_uniform_noise(Rng& rng, double* out) {
  for (std::size_t i = 0; i < kImagePixels; ++i) out[i] = rng.uniform();
}

// Box-blurred uniform noise with a contrast stretch; keeps mean near 0.5.
inline void render_blurred_noise(Rng& rng, double* out) {
  constexpr std::size_t n = kImageSize;
  std::vector<double> raw(kImagePixels);
  for (double& v : raw) v = rng.uniform();
  const int radius = 3 + static_cast<int>(rng.below(3));
  const double gain = rng.uniform(1.0, 2.0);
  for (std::size_t c = 0; c < kImageChannels; ++c) {
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        double acc = 0.0;
        int cnt = 0;
        for (int dy = -radius; dy <= radius; ++dy) {
          for (int dx = -radius; dx <= radius; ++dx) {
            // Toroidal wrap keeps the texture stationary at the borders.
            const std::size_t yy = (y + n + static_cast<std::size_t>(dy + static_cast<int>(n))) % n;
            const std::size_t xx = (x + n + static_cast<std::size_t>(dx + static_cast<int>(n))) % n;
            acc += raw[(c * n + yy) * n + xx];
            ++cnt;
          }
        }
        out[(c * n + y) * n + x] = clip01(0.5 + gain * (acc / cnt - 0.5));
      }
    }
  }
}

inline void check_images(const Tensor& images, const std::string& field) {
  if (images.rank() != 4 || images.dim(1) != kImageChannels ||
      images.dim(2) != kImageSize || images.dim(3) != kImageSize) {
    throw ParseError(field, "expected [N,3,32,32], got " + shape_string(images.shape()));
  }
  for (std::size_t i = 0; i < images.size(); ++i) {
    const double v = images[i];
    if (!(v >= 0.0 && v <= 1.0)) {
      throw InvariantError(field + ": pixel " + std::to_string(i) + " = " +
                           std::to_string(v) + " outside [0,1]");
    }
  }
}

}  // namespace detail

// Synthetic ID dataset: class k is primitive k. Labels cycle through the
// classes so any prefix is near-balanced.
inline LabeledDataset generate_shapes(int num_classes, int per_class, std::uint64_t seed,
                                      Split split = Split::kTrain) {
  if (num_classes < kMinClasses || num_classes > kMaxClasses) {
    throw Error("generate_shapes: num_classes must be in [4, 10], got " +
                std::to_string(num_classes));
  }
  if (per_class <= 0) throw Error("generate_shapes: per_class must be positive");
  const std::size_t n = static_cast<std::size_t>(num_classes) * static_cast<std::size_t>(per_class);
  LabeledDataset ds;
  ds.images = Tensor(Shape{n, kImageChannels, kImageSize, kImageSize});
  ds.labels.resize(n);
  ds.num_classes = num_classes;
  ds.split = split;
  ds.provenance = "shapes(seed=" + std::to_string(seed) + ")";
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % static_cast<std::size_t>(num_classes));
    Rng rng(mix_seed(seed, i));
    detail::render_primitive(label, rng, ds.images.data().data() + i * kImagePixels);
    ds.labels[i] = label;
  }
  return ds;
}

// Natural OOD splits. near_shapes renders primitives never used as ID classes
// (ids >= num_id_classes); far_noise alternates uniform noise and blurred
// noise textures.
inline OodDataset generate_ood(OodKind kind, int n, std::uint64_t seed,
                               int num_id_classes = kMinClasses) {
  if (n <= 0) throw Error("generate_ood: n must be positive");
  if (kind == OodKind::kAdversarial) {
    throw Error("generate_ood: adversarial OOD sets come from the attack stage");
  }
  if (num_id_classes < kMinClasses || num_id_classes > kMaxClasses) {
    throw Error("generate_ood: num_id_classes must be in [4, 10]");
  }
  const auto count = static_cast<std::size_t>(n);
  OodDataset ds;
  ds.kind = kind;
  ds.images = Tensor(Shape{count, kImageChannels, kImageSize, kImageSize});
  ds.primitives.resize(count);
  ds.provenance = std::string(to_string(kind)) + "(seed=" + std::to_string(seed) + ")";
  const int held_out = kNumPrimitives - num_id_classes;
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(mix_seed(seed, i));
    double* img = ds.images.data().data() + i * kImagePixels;
    if (kind == OodKind::kNearShapes) {
      const int id = num_id_classes + static_cast<int>(i % static_cast<std::size_t>(held_out));
      detail::render_primitive(id, rng, img);
      ds.primitives[i] = id;
    } else {
      if (i % 2 == 0) {
        detail::render_uniform_noise(rng, img);
      } else {
        detail::render_blurred_noise(rng, img);
      }
      ds.primitives[i] = -1;
    }
  }
  return ds;
}

inline aotb::Bundle to_bundle(const LabeledDataset& ds) {
  aotb::Bundle b;
  b.set("images", ds.images);
  b.set("labels", Tensor(Shape{ds.labels.size()},
                         std::vector<double>(ds.labels.begin(), ds.labels.end())));
  b.set("num_classes", Tensor(Shape{1}, std::vector{static_cast<double>(ds.num_classes)}));
  b.set("split", Tensor(Shape{1}, std::vector{static_cast<double>(ds.split)}));
  return b;
}

inline aotb::Bundle to_bundle(const OodDataset& ds) {
  aotb::Bundle b;
  b.set("images", ds.images);
  b.set("ood_kind", Tensor(Shape{1}, std::vector{static_cast<double>(ds.kind)}));
  if (!ds.primitives.empty()) {
    b.set("primitives", Tensor(Shape{ds.primitives.size()},
                               std::vector<double>(ds.primitives.begin(), ds.primitives.end())));
  }
  return b;
}

namespace detail {

inline int integral_code(const Tensor& t, const std::string& field, int lo, int hi) {
  if (t.size() != 1) throw ParseError(field, "expected a single value");
  const double v = t[0];
  if (v != std::floor(v) || v < lo || v > hi) {
    throw ParseError(field, "value " + std::to_string(v) + " not an integer in [" +
                                std::to_string(lo) + ", " + std::to_string(hi) + "]");
  }
  return static_cast<int>(v);
}

inline std::vector<int> integral_vector(const Tensor& t, const std::string& field) {
  std::vector<int> out(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] != std::floor(t[i]) || std::abs(t[i]) > 1e9) {
      throw ParseError(field, "non-integer value at index " + std::to_string(i));
    }
    out[i] = static_cast<int>(t[i]);
  }
  return out;
}

}  // namespace detail

using LoadedTensors = std::variant<LabeledDataset, OodDataset, ForwardTaps>;

// Interprets an AOTB bundle by its entry names: images+labels -> labeled
// dataset, images+ood_kind -> OOD dataset, features+logits -> taps. Every
// result is validated against its invariants.
inline LoadedTensors from_bundle(const aotb::Bundle& b, const std::string& provenance) {
  if (b.contains("features") || b.contains("logits")) return taps_from_bundle(b);
  const Tensor& images = b.at("images");
  detail::check_images(images, "images");
  const std::size_t n = images.dim(0);
  if (const Tensor* lt = b.find("labels")) {
    if (lt->rank() != 1 || lt->dim(0) != n) {
      throw ParseError("labels", "expected [N] with N = " + std::to_string(n));
    }
    LabeledDataset ds;
    ds.images = images;
    ds.labels = detail::integral_vector(*lt, "labels");
    const int max_label = *std::max_element(ds.labels.begin(), ds.labels.end());
    ds.num_classes = b.contains("num_classes")
                         ? detail::integral_code(b.at("num_classes"), "num_classes", 1, 1 << 20)
                         : max_label + 1;
    for (std::size_t i = 0; i < n; ++i) {
      if (ds.labels[i] < 0 || ds.labels[i] >= ds.num_classes) {
        throw InvariantError("labels: label " + std::to_string(ds.labels[i]) + " at index " +
                             std::to_string(i) + " outside [0, " +
                             std::to_string(ds.num_classes) + ")");
      }
    }
    if (const Tensor* s = b.find("split")) {
      ds.split = static_cast<Split>(detail::integral_code(*s, "split", 0, 1));
    }
    ds.provenance = provenance;
    return ds;
  }
  OodDataset ds;
  ds.images = images;
  ds.kind = static_cast<OodKind>(detail::integral_code(b.at("ood_kind"), "ood_kind", 0, 2));
  if (const Tensor* p = b.find("primitives")) ds.primitives = detail::integral_vector(*p, "primitives");
  ds.provenance = provenance;
  return ds;
}

inline LoadedTensors load_tensors(const std::string& path) {
  return from_bundle(aotb::load(path), path);
}

inline LabeledDataset load_labeled(const std::string& path) {
  LoadedTensors t = load_tensors(path);
  if (auto* ds = std::get_if<LabeledDataset>(&t)) return std::move(*ds);
  throw ParseError(path, "expected a labeled dataset (images + labels)");
}

inline OodDataset load_ood(const std::string& path) {
  LoadedTensors t = load_tensors(path);
  if (auto* ds = std::get_if<OodDataset>(&t)) return std::move(*ds);
  throw ParseError(path, "expected an OOD dataset (images + ood_kind)");
}

// FNV-1a 64 over raw bytes; used for manifest checksums and config hashes.
inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return s;
}

}  // namespace advood
