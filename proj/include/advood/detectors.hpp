#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "advood/aotb.hpp"
#include "advood/autograd.hpp"
#include "advood/error.hpp"
#include "advood/metrics.hpp"
#include "advood/model.hpp"
#include "advood/ops.hpp"
#include "advood/taps.hpp"
#include "json.hpp"

namespace advood {

enum class DetectorKind {
  kMsp, kMls, kEbo, kOdin, kMds, kRmds, kGram, kReact,
  kKlm, kVim, kKnn, kDice, kAsh, kScale, kGen, kNnGuide,
};

inline constexpr std::array<DetectorKind, 16> kAllDetectors = {
    DetectorKind::kMsp,  DetectorKind::kMls,   DetectorKind::kEbo,  DetectorKind::kOdin,
    DetectorKind::kMds,  DetectorKind::kRmds,  DetectorKind::kGram, DetectorKind::kReact,
    DetectorKind::kKlm,  DetectorKind::kVim,   DetectorKind::kKnn,  DetectorKind::kDice,
    DetectorKind::kAsh,  DetectorKind::kScale, DetectorKind::kGen,  DetectorKind::kNnGuide};

inline std::string_view to_string(DetectorKind k) {
  constexpr std::array<std::string_view, 16> names = {
      "msp", "mls", "ebo", "odin", "mds", "rmds", "gram", "react",
      "klm", "vim", "knn", "dice", "ash", "scale", "gen", "nnguide"};
  return names[static_cast<std::size_t>(k)];
}

inline std::string detector_names() {
  std::string s;
  for (DetectorKind k : kAllDetectors) {
    if (!s.empty()) s += ", ";
    s += to_string(k);
  }
  return s;
}

inline DetectorKind parse_detector_kind(std::string_view s) {
  for (DetectorKind k : kAllDetectors) {
    if (to_string(k) == s) return k;
  }
  throw Error("unknown detector '" + std::string(s) + "'; valid kinds: " + detector_names());
}

struct Hyperparams {
  double temperature = 1.0;         // ebo and every energy re-projection
  double odin_temperature = 1000.0;
  double odin_epsilon = 0.0014;
  double ridge = 1e-3;              // lambda = ridge * trace(Sigma) / d
  double react_percentile = 90.0;   // >= 100 disables clipping
  double dice_sparsity = 70.0;
  double ash_percentile = 90.0;
  double scale_percentile = 85.0;
  int knn_k = 0;                    // 0: max(5, ceil(0.001 * bank))
  int nnguide_k = 0;                // 0: same rule as knn
  int vim_dim = 0;                  // principal dimension D; 0: ceil(d / 2)
  std::vector<int> gram_orders{1, 2};
  double gen_gamma = 0.1;
  int gen_m = 0;                    // 0: min(C, 10)

  friend bool operator==(const Hyperparams&, const Hyperparams&) = default;
};

inline nlohmann::json to_json(const Hyperparams& h) {
  return {{"temperature", h.temperature},
          {"odin_temperature", h.odin_temperature},
          {"odin_epsilon", h.odin_epsilon},
          {"ridge", h.ridge},
          {"react_percentile", h.react_percentile},
          {"dice_sparsity", h.dice_sparsity},
          {"ash_percentile", h.ash_percentile},
          {"scale_percentile", h.scale_percentile},
          {"knn_k", h.knn_k},
          {"nnguide_k", h.nnguide_k},
          {"vim_dim", h.vim_dim},
          {"gram_orders", h.gram_orders},
          {"gen_gamma", h.gen_gamma},
          {"gen_m", h.gen_m}};
}

// Reads the keys present in `j` over `base`; unknown keys are rejected.
inline Hyperparams hyperparams_from_json(const nlohmann::json& j, const std::string& path,
                                         Hyperparams base = {}) {
  if (!j.is_object()) throw ConfigError(path, "expected an object");
  for (const auto& [key, value] : j.items()) {
    const std::string field = path + "/" + key;
    try {
      if (key == "temperature") base.temperature = value.get<double>();
      else if (key == "odin_temperature") base.odin_temperature = value.get<double>();
      else if (key == "odin_epsilon") base.odin_epsilon = value.get<double>();
      else if (key == "ridge") base.ridge = value.get<double>();
      else if (key == "react_percentile") base.react_percentile = value.get<double>();
      else if (key == "dice_sparsity") base.dice_sparsity = value.get<double>();
      else if (key == "ash_percentile") base.ash_percentile = value.get<double>();
      else if (key == "scale_percentile") base.scale_percentile = value.get<double>();
      else if (key == "knn_k") base.knn_k = value.get<int>();
      else if (key == "nnguide_k") base.nnguide_k = value.get<int>();
      else if (key == "vim_dim") base.vim_dim = value.get<int>();
      else if (key == "gram_orders") base.gram_orders = value.get<std::vector<int>>();
      else if (key == "gen_gamma") base.gen_gamma = value.get<double>();
      else if (key == "gen_m") base.gen_m = value.get<int>();
      else throw ConfigError(field, "unknown hyperparameter");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(field, e.what());
    }
  }
  auto check = [&](bool ok, const char* key, const char* what) {
    if (!ok) throw ConfigError(path + "/" + key, what);
  };
  check(base.temperature > 0.0, "temperature", "must be positive");
  check(base.odin_temperature > 0.0, "odin_temperature", "must be positive");
  check(base.odin_epsilon >= 0.0, "odin_epsilon", "must be nonnegative");
  check(base.ridge >= 0.0, "ridge", "must be nonnegative");
  check(base.react_percentile >= 0.0, "react_percentile", "must be nonnegative");
  check(base.dice_sparsity >= 0.0 && base.dice_sparsity < 100.0, "dice_sparsity",
        "must lie in [0, 100)");
  check(base.ash_percentile >= 0.0 && base.ash_percentile < 100.0, "ash_percentile",
        "must lie in [0, 100)");
  check(base.scale_percentile >= 0.0 && base.scale_percentile < 100.0, "scale_percentile",
        "must lie in [0, 100)");
  check(base.knn_k >= 0, "knn_k", "must be nonnegative");
  check(base.nnguide_k >= 0, "nnguide_k", "must be nonnegative");
  check(base.vim_dim >= 0, "vim_dim", "must be nonnegative");
  check(base.gen_m >= 0, "gen_m", "must be nonnegative");
  check(base.gen_gamma > 0.0, "gen_gamma", "must be positive");
  for (int p : base.gram_orders) check(p >= 1, "gram_orders", "orders must be >= 1");
  check(!base.gram_orders.empty(), "gram_orders", "must be nonempty");
  return base;
}

// Everything a detector may need from the ID training split.
struct IdStats {
  ForwardTaps taps;
  std::vector<int> labels;
  Tensor head_weight;  // [C, D]; may be empty for imported taps
  Tensor head_bias;    // [C]
};

inline IdStats make_id_stats(const SmallConvNet& net, const LabeledDataset& train) {
  IdStats s;
  s.taps = forward_with_taps(net, train.images);
  s.labels = train.labels;
  s.head_weight = net.checkpoint().weights.at("fc.weight");
  s.head_bias = net.checkpoint().weights.at("fc.bias");
  return s;
}

struct DetectorState {
  DetectorKind kind = DetectorKind::kMsp;
  Hyperparams hp;
  aotb::Bundle artifacts;
  double tau = 0.0;
  bool has_tau = false;
};

// Inputs beyond taps; only odin reads them.
struct ScoreContext {
  const Classifier* model = nullptr;
  const Tensor* images = nullptr;
};

namespace detail {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

inline Eigen::Map<const Mat> as_mat(const Tensor& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.dim(0)),
          static_cast<Eigen::Index>(t.size() / t.dim(0))};
}

inline Tensor from_mat(const Mat& m) {
  Tensor t(Shape{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  std::copy(m.data(), m.data() + m.size(), t.data().begin());
  return t;
}

inline Tensor from_vec(const Vec& v) {
  Tensor t(Shape{static_cast<std::size_t>(v.size())});
  std::copy(v.data(), v.data() + v.size(), t.data().begin());
  return t;
}

// Linear-interpolated percentile of `v` (p in [0, 100]).
inline double percentile(std::vector<double> v, double p) {
  if (v.empty()) throw Error("percentile of empty set");
  std::sort(v.begin(), v.end());
  const double pos = std::clamp(p, 0.0, 100.0) / 100.0 * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return frac == 0.0 ? v[lo] : v[lo] + frac * (v[hi] - v[lo]);
}

inline std::vector<double> energy(const Tensor& logits, double temperature) {
  Tensor scaled = logits;
  for (double& v : scaled.data()) v /= temperature;
  const Tensor lse = kernels::logsumexp(scaled);
  std::vector<double> out(lse.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = temperature * lse[i];
  return out;
}

inline const Tensor& require_tap(const Tensor& t, DetectorKind k, const char* tap) {
  if (t.empty()) {
    throw Error(std::string(to_string(k)) + " needs the '" + tap + "' tap, which is missing");
  }
  return t;
}

inline void require_head(const IdStats& s, DetectorKind k) {
  if (s.head_weight.empty() || s.head_bias.empty()) {
    throw Error(std::string(to_string(k)) + " needs the classifier head weights");
  }
}

inline std::size_t knn_default(std::size_t bank) {
  return std::max<std::size_t>(5, static_cast<std::size_t>(std::ceil(0.001 * static_cast<double>(bank))));
}

inline Mat normalized_rows(const Tensor& features) {
  Mat m = as_mat(features);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double norm = m.row(r).norm();
    if (norm > 0.0) m.row(r) /= norm;
  }
  return m;
}

struct Gaussian {
  Mat means;       // [K, d]
  Mat precision;   // [d, d]
};

inline Mat regularized_inverse(Mat cov, double ridge, DetectorKind k) {
  const auto d = cov.rows();
  const double tr = cov.trace();
  const double lambda = tr > 0.0 ? ridge * tr / static_cast<double>(d) : ridge;
  cov.diagonal().array() += lambda;
  Eigen::LLT<Mat> llt(cov);
  if (llt.info() != Eigen::Success) {
    throw Error(std::string(to_string(k)) +
                ": covariance is singular; set a positive 'ridge' hyperparameter");
  }
  return llt.solve(Mat::Identity(d, d));
}

inline Gaussian class_gaussian(const Tensor& features, const std::vector<int>& labels,
                               std::size_t classes, double ridge, DetectorKind k) {
  const auto f = as_mat(features);
  const auto n = f.rows(), d = f.cols();
  if (labels.size() != static_cast<std::size_t>(n)) {
    throw ShapeError("IdStats: label count differs from feature count");
  }
  Mat means = Mat::Zero(static_cast<Eigen::Index>(classes), d);
  std::vector<double> counts(classes, 0.0);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto y = static_cast<std::size_t>(labels[static_cast<std::size_t>(i)]);
    if (y >= classes) throw InvariantError("IdStats: label out of range");
    means.row(static_cast<Eigen::Index>(y)) += f.row(i);
    counts[y] += 1.0;
  }
  for (std::size_t c = 0; c < classes; ++c) {
    if (counts[c] == 0.0) {
      throw Error(std::string(to_string(k)) + ": class " + std::to_string(c) +
                  " has no training samples");
    }
    means.row(static_cast<Eigen::Index>(c)) /= counts[c];
  }
  Mat centered(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    centered.row(i) = f.row(i) - means.row(labels[static_cast<std::size_t>(i)]);
  }
  const Mat cov = (centered.transpose() * centered) / static_cast<double>(n);
  return {means, regularized_inverse(cov, ridge, k)};
}

inline double mahalanobis(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& mu,
                          const Mat& precision) {
  const Vec diff = x - mu;
  return diff.dot(precision * diff);
}

// Flattened Gram entries of one sample's block output [C, H, W] at order p.
inline std::vector<double> gram_entries(const double* block, std::size_t c, std::size_t hw,
                                        int p) {
  Mat f(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(hw));
  for (std::size_t i = 0; i < c * hw; ++i) f.data()[i] = std::pow(block[i], p);
  const Mat g = f * f.transpose();
  std::vector<double> out(static_cast<std::size_t>(g.size()));
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = g.data()[i];
    out[i] = p == 1 ? v : std::copysign(std::pow(std::abs(v), 1.0 / p), v);
  }
  return out;
}

inline std::string gram_key(std::size_t layer, int order, const char* bound) {
  return "gram.l" + std::to_string(layer) + ".p" + std::to_string(order) + "." + bound;
}

constexpr double kGramEps = 1e-6;

inline std::vector<double> reproject_energy(const Tensor& features, const Tensor& w,
                                            const Tensor& b, double temperature) {
  return energy(kernels::linear(features, w, b), temperature);
}

inline std::vector<double> odin_scores(const DetectorState& st, const ScoreContext& ctx) {
  if (!ctx.model || !ctx.images) throw Error("odin needs the model and input images");
  const Tensor& x = *ctx.images;
  const double t = st.hp.odin_temperature;
  std::vector<double> out;
  constexpr std::size_t kChunk = 50;
  for (std::size_t begin = 0; begin < x.dim(0); begin += kChunk) {
    const std::size_t end = std::min(x.dim(0), begin + kChunk);
    const Tensor batch = x.rows(begin, end);
    Tensor perturbed = batch;
    {
      Graph g;
      Var in = g.leaf(batch, true);
      Var scaled = ops::scale(ctx.model->logits(g, in), 1.0 / t);
      const std::vector<int> pred = kernels::argmax_rows(scaled.value());
      // -log max softmax(logits / T), summed so samples stay independent.
      g.backward(ops::cross_entropy(scaled, pred, ops::Reduction::kSum));
      const Tensor grad = in.grad();
      for (std::size_t i = 0; i < perturbed.size(); ++i) {
        const double sgn = grad[i] > 0.0 ? 1.0 : (grad[i] < 0.0 ? -1.0 : 0.0);
        perturbed[i] -= st.hp.odin_epsilon * sgn;
      }
    }
    Graph g;
    Tensor logits = ctx.model->logits(g, g.constant(perturbed)).value();
    for (double& v : logits.data()) v /= t;
    const Tensor p = kernels::softmax(logits);
    const std::size_t c = p.dim(1);
    for (std::size_t r = 0; r < p.dim(0); ++r) {
      out.push_back(*std::max_element(p.data().begin() + static_cast<long>(r * c),
                                      p.data().begin() + static_cast<long>((r + 1) * c)));
    }
  }
  return out;
}

}  // namespace detail

inline DetectorState fit(DetectorKind kind, const IdStats& s, const Hyperparams& hp = {}) {
  using namespace detail;
  DetectorState st;
  st.kind = kind;
  st.hp = hp;
  const ForwardTaps& t = s.taps;
  if (t.size() == 0) throw Error("fit: empty ID statistics");
  aotb::Bundle& a = st.artifacts;
  auto store_head = [&] {
    require_head(s, kind);
    a.set("head.weight", s.head_weight);
    a.set("head.bias", s.head_bias);
  };
  switch (kind) {
    case DetectorKind::kMsp:
    case DetectorKind::kMls:
    case DetectorKind::kEbo:
    case DetectorKind::kOdin:
      break;
    case DetectorKind::kGen:
      if (st.hp.gen_m == 0) st.hp.gen_m = static_cast<int>(std::min<std::size_t>(t.num_classes(), 10));
      break;
    case DetectorKind::kMds:
    case DetectorKind::kRmds: {
      require_tap(t.features, kind, "features");
      const Gaussian g = class_gaussian(t.features, s.labels, t.num_classes(), hp.ridge, kind);
      a.set("means", from_mat(g.means));
      a.set("precision", from_mat(g.precision));
      if (kind == DetectorKind::kRmds) {
        const auto f = as_mat(t.features);
        const Vec mu0 = f.colwise().mean().transpose();
        const Mat centered = f.rowwise() - mu0.transpose();
        const Mat cov0 = (centered.transpose() * centered) / static_cast<double>(f.rows());
        a.set("bg_mean", from_vec(mu0));
        a.set("bg_precision", from_mat(regularized_inverse(cov0, hp.ridge, kind)));
      }
      break;
    }
    case DetectorKind::kGram: {
      if (t.block_outputs.empty()) require_tap(Tensor(), kind, "block_outputs");
      const std::size_t classes = t.num_classes();
      for (std::size_t l = 0; l < t.block_outputs.size(); ++l) {
        const Tensor& blk = t.block_outputs[l];
        const std::size_t c = blk.dim(1), hw = blk.dim(2) * blk.dim(3), e = c * c;
        for (int p : hp.gram_orders) {
          Tensor lo(Shape{classes, e}, INFINITY), hi(Shape{classes, e}, -INFINITY);
          std::vector<double> glo(e, INFINITY), ghi(e, -INFINITY);
          for (std::size_t i = 0; i < t.size(); ++i) {
            const auto g = gram_entries(blk.data().data() + i * c * hw, c, hw, p);
            const auto k = static_cast<std::size_t>(t.predicted[i]);
            for (std::size_t j = 0; j < e; ++j) {
              lo[k * e + j] = std::min(lo[k * e + j], g[j]);
              hi[k * e + j] = std::max(hi[k * e + j], g[j]);
              glo[j] = std::min(glo[j], g[j]);
              ghi[j] = std::max(ghi[j], g[j]);
            }
          }
          // Classes never predicted on the train split fall back to global bounds.
          for (std::size_t k = 0; k < classes; ++k) {
            if (std::isinf(lo[k * e])) {
              std::copy(glo.begin(), glo.end(), lo.data().begin() + static_cast<long>(k * e));
              std::copy(ghi.begin(), ghi.end(), hi.data().begin() + static_cast<long>(k * e));
            }
          }
          a.set(gram_key(l, p, "min"), lo);
          a.set(gram_key(l, p, "max"), hi);
        }
      }
      break;
    }
    case DetectorKind::kReact: {
      require_tap(t.features, kind, "features");
      store_head();
      const std::size_t n = t.size(), d = t.feature_dim();
      Tensor clip(Shape{d}, INFINITY);
      if (hp.react_percentile < 100.0) {
        for (std::size_t j = 0; j < d; ++j) {
          std::vector<double> col(n);
          for (std::size_t i = 0; i < n; ++i) col[i] = t.features[i * d + j];
          clip[j] = percentile(std::move(col), hp.react_percentile);
        }
      }
      a.set("clip", clip);
      break;
    }
    case DetectorKind::kKlm: {
      const std::size_t c = t.num_classes();
      Tensor templates(Shape{c, c}, 0.0);
      std::vector<double> counts(c, 0.0);
      for (std::size_t i = 0; i < t.size(); ++i) {
        const auto k = static_cast<std::size_t>(t.predicted[i]);
        for (std::size_t j = 0; j < c; ++j) templates[k * c + j] += t.probs[i * c + j];
        counts[k] += 1.0;
      }
      std::vector<Tensor> rows;
      for (std::size_t k = 0; k < c; ++k) {
        if (counts[k] == 0.0) continue;
        Tensor row(Shape{1, c});
        for (std::size_t j = 0; j < c; ++j) row[j] = templates[k * c + j] / counts[k];
        rows.push_back(row);
      }
      a.set("templates", concat_rows(rows));
      break;
    }
    case DetectorKind::kVim: {
      require_tap(t.features, kind, "features");
      const auto f = as_mat(t.features);
      const auto d = f.cols();
      const Eigen::Index dim = hp.vim_dim > 0
                                   ? std::min<Eigen::Index>(hp.vim_dim, d)
                                   : static_cast<Eigen::Index>((d + 1) / 2);
      st.hp.vim_dim = static_cast<int>(dim);
      const Vec u = f.colwise().mean().transpose();
      const Mat centered = f.rowwise() - u.transpose();
      const Mat cov = (centered.transpose() * centered) / static_cast<double>(f.rows());
      a.set("offset", from_vec(u));
      double alpha = 0.0;
      const Eigen::Index r = d - dim;
      if (r > 0) {
        Eigen::SelfAdjointEigenSolver<Mat> eig(cov);
        const Mat basis = eig.eigenvectors().leftCols(r);  // ascending eigenvalues
        a.set("residual", from_mat(basis));
        const Eigen::VectorXd norms = (centered * basis).rowwise().norm();
        const double mean_norm = norms.mean();
        double mean_max_logit = 0.0;
        const std::size_t c = t.num_classes();
        for (std::size_t i = 0; i < t.size(); ++i) {
          mean_max_logit += *std::max_element(t.logits.data().begin() + static_cast<long>(i * c),
                                              t.logits.data().begin() + static_cast<long>((i + 1) * c));
        }
        mean_max_logit /= static_cast<double>(t.size());
        alpha = mean_norm > 0.0 ? mean_max_logit / mean_norm : 0.0;
      }
      a.set("alpha", Tensor::scalar(alpha));
      break;
    }
    case DetectorKind::kKnn:
    case DetectorKind::kNnGuide: {
      require_tap(t.features, kind, "features");
      Mat bank = normalized_rows(t.features);
      int& k = kind == DetectorKind::kKnn ? st.hp.knn_k : st.hp.nnguide_k;
      if (k == 0) k = static_cast<int>(knn_default(t.size()));
      k = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(k), t.size()));
      if (kind == DetectorKind::kNnGuide) {
        const std::vector<double> e = energy(t.logits, hp.temperature);
        for (Eigen::Index i = 0; i < bank.rows(); ++i) bank.row(i) *= e[static_cast<std::size_t>(i)];
      }
      a.set("bank", from_mat(bank));
      break;
    }
    case DetectorKind::kDice: {
      require_tap(t.features, kind, "features");
      store_head();
      const std::size_t c = s.head_weight.dim(0), d = s.head_weight.dim(1);
      std::vector<double> mean(d, 0.0);
      for (std::size_t i = 0; i < t.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) mean[j] += t.features[i * d + j];
      for (double& v : mean) v /= static_cast<double>(t.size());
      std::vector<double> contrib(c * d);
      for (std::size_t o = 0; o < c; ++o)
        for (std::size_t j = 0; j < d; ++j) contrib[o * d + j] = s.head_weight[o * d + j] * mean[j];
      const double thr = percentile(contrib, hp.dice_sparsity);
      Tensor mask(Shape{c, d});
      for (std::size_t i = 0; i < c * d; ++i) mask[i] = contrib[i] >= thr ? 1.0 : 0.0;
      a.set("mask", mask);
      break;
    }
    case DetectorKind::kAsh:
    case DetectorKind::kScale:
      require_tap(t.features, kind, "features");
      store_head();
      break;
  }
  return st;
}

// Per-sample scores, higher means more ID.
inline std::vector<double> score(const DetectorState& st, const ForwardTaps& t,
                                 const ScoreContext& ctx = {}) {
  using namespace detail;
  const std::size_t n = t.size();
  const aotb::Bundle& a = st.artifacts;
  const Hyperparams& hp = st.hp;
  std::vector<double> out(n);
  auto head = [&] { return std::pair(a.at("head.weight"), a.at("head.bias")); };
  switch (st.kind) {
    case DetectorKind::kMsp: {
      const std::size_t c = t.num_classes();
      for (std::size_t i = 0; i < n; ++i) {
        out[i] = *std::max_element(t.probs.data().begin() + static_cast<long>(i * c),
                                   t.probs.data().begin() + static_cast<long>((i + 1) * c));
      }
      break;
    }
    case DetectorKind::kMls: {
      const std::size_t c = t.num_classes();
      for (std::size_t i = 0; i < n; ++i) {
        out[i] = *std::max_element(t.logits.data().begin() + static_cast<long>(i * c),
                                   t.logits.data().begin() + static_cast<long>((i + 1) * c));
      }
      break;
    }
    case DetectorKind::kEbo:
      out = energy(t.logits, hp.temperature);
      break;
    case DetectorKind::kOdin:
      out = odin_scores(st, ctx);
      if (out.size() != n) throw ShapeError("odin: image count differs from taps");
      break;
    case DetectorKind::kMds:
    case DetectorKind::kRmds: {
      require_tap(t.features, st.kind, "features");
      const auto f = as_mat(t.features);
      const Mat means = as_mat(a.at("means"));
      const Mat prec = as_mat(a.at("precision"));
      if (f.cols() != means.cols()) throw ShapeError("mds: feature dimension differs from fit");
      Vec mu0;
      Mat prec0;
      if (st.kind == DetectorKind::kRmds) {
        mu0 = Eigen::Map<const Vec>(a.at("bg_mean").data().data(),
                                    static_cast<Eigen::Index>(a.at("bg_mean").size()));
        prec0 = as_mat(a.at("bg_precision"));
      }
      for (std::size_t i = 0; i < n; ++i) {
        const Vec x = f.row(static_cast<Eigen::Index>(i)).transpose();
        double best = INFINITY;
        for (Eigen::Index k = 0; k < means.rows(); ++k) {
          best = std::min(best, mahalanobis(x, means.row(k).transpose(), prec));
        }
        out[i] = st.kind == DetectorKind::kMds ? -best : mahalanobis(x, mu0, prec0) - best;
      }
      break;
    }
    case DetectorKind::kGram: {
      if (t.block_outputs.empty()) require_tap(Tensor(), st.kind, "block_outputs");
      std::fill(out.begin(), out.end(), 0.0);
      for (std::size_t l = 0; l < t.block_outputs.size(); ++l) {
        const Tensor& blk = t.block_outputs[l];
        const std::size_t c = blk.dim(1), hw = blk.dim(2) * blk.dim(3), e = c * c;
        for (int p : hp.gram_orders) {
          const Tensor& lo = a.at(gram_key(l, p, "min"));
          const Tensor& hi = a.at(gram_key(l, p, "max"));
          if (lo.dim(1) != e) throw ShapeError("gram: block shape differs from fit");
          for (std::size_t i = 0; i < n; ++i) {
            const auto g = gram_entries(blk.data().data() + i * c * hw, c, hw, p);
            const std::size_t k = static_cast<std::size_t>(t.predicted[i]);
            double dev = 0.0;
            for (std::size_t j = 0; j < e; ++j) {
              const double mn = lo[k * e + j], mx = hi[k * e + j];
              if (g[j] < mn) dev += (mn - g[j]) / (std::abs(mn) + kGramEps);
              else if (g[j] > mx) dev += (g[j] - mx) / (std::abs(mx) + kGramEps);
            }
            out[i] -= dev / static_cast<double>(e);
          }
        }
      }
      break;
    }
    case DetectorKind::kReact: {
      const auto [w, b] = head();
      Tensor f = require_tap(t.features, st.kind, "features");
      const Tensor& clip = a.at("clip");
      const std::size_t d = f.dim(1);
      for (std::size_t i = 0; i < f.size(); ++i) f[i] = std::min(f[i], clip[i % d]);
      out = reproject_energy(f, w, b, hp.temperature);
      break;
    }
    case DetectorKind::kKlm: {
      const Tensor& tpl = a.at("templates");
      const std::size_t c = t.num_classes();
      if (tpl.dim(1) != c) throw ShapeError("klm: class count differs from fit");
      for (std::size_t i = 0; i < n; ++i) {
        double best = INFINITY;
        for (std::size_t k = 0; k < tpl.dim(0); ++k) {
          double kl = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            const double p = t.probs[i * c + j];
            if (p > 0.0) kl += p * std::log(p / std::max(tpl[k * c + j], 1e-300));
          }
          best = std::min(best, kl);
        }
        out[i] = -best;
      }
      break;
    }
    case DetectorKind::kVim: {
      require_tap(t.features, st.kind, "features");
      const Tensor lse = kernels::logsumexp(t.logits);
      const double alpha = a.at("alpha").item();
      const Tensor* basis = a.find("residual");
      const auto f = as_mat(t.features);
      const Tensor& u = a.at("offset");
      for (std::size_t i = 0; i < n; ++i) {
        double norm = 0.0;
        if (basis) {
          const Vec x = f.row(static_cast<Eigen::Index>(i)).transpose() -
                        Eigen::Map<const Vec>(u.data().data(), static_cast<Eigen::Index>(u.size()));
          norm = (as_mat(*basis).transpose() * x).norm();
        }
        out[i] = -alpha * norm + lse[i];
      }
      break;
    }
    case DetectorKind::kKnn:
    case DetectorKind::kNnGuide: {
      require_tap(t.features, st.kind, "features");
      const Mat bank = as_mat(a.at("bank"));
      const Mat q = normalized_rows(t.features);
      const bool knn = st.kind == DetectorKind::kKnn;
      const auto k = static_cast<std::size_t>(knn ? hp.knn_k : hp.nnguide_k);
      if (k < 1 || k > static_cast<std::size_t>(bank.rows())) {
        throw Error(std::string(to_string(st.kind)) + ": k outside [1, bank size]");
      }
      const std::vector<double> e = knn ? std::vector<double>{} : energy(t.logits, hp.temperature);
      std::vector<double> v(static_cast<std::size_t>(bank.rows()));
      for (std::size_t i = 0; i < n; ++i) {
        const auto row = q.row(static_cast<Eigen::Index>(i));
        for (Eigen::Index j = 0; j < bank.rows(); ++j) {
          v[static_cast<std::size_t>(j)] = knn ? (row - bank.row(j)).norm() : row.dot(bank.row(j));
        }
        if (knn) {
          std::nth_element(v.begin(), v.begin() + static_cast<long>(k - 1), v.end());
          out[i] = -v[k - 1];
        } else {
          std::partial_sort(v.begin(), v.begin() + static_cast<long>(k), v.end(), std::greater<>());
          double s = 0.0;
          for (std::size_t j = 0; j < k; ++j) s += v[j];
          out[i] = e[i] * (s / static_cast<double>(k));
        }
      }
      break;
    }
    case DetectorKind::kDice: {
      const auto [w, b] = head();
      Tensor masked = w;
      const Tensor& mask = a.at("mask");
      for (std::size_t i = 0; i < masked.size(); ++i) masked[i] *= mask[i];
      out = reproject_energy(require_tap(t.features, st.kind, "features"), masked, b,
                             hp.temperature);
      break;
    }
    case DetectorKind::kAsh:
    case DetectorKind::kScale: {
      const auto [w, b] = head();
      Tensor f = require_tap(t.features, st.kind, "features");
      const std::size_t d = f.dim(1);
      const bool ash = st.kind == DetectorKind::kAsh;
      for (std::size_t i = 0; i < n; ++i) {
        double* row = f.data().data() + i * d;
        const double thr = percentile(std::vector<double>(row, row + d),
                                      ash ? hp.ash_percentile : hp.scale_percentile);
        double before = 0.0, after = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          before += row[j];
          if (row[j] >= thr) after += row[j];
        }
        if (ash) {
          const double r = after != 0.0 ? before / after : 1.0;
          for (std::size_t j = 0; j < d; ++j) row[j] = row[j] >= thr ? row[j] * r : 0.0;
        } else {
          const double r = after != 0.0 ? std::exp(before / after) : 1.0;
          for (std::size_t j = 0; j < d; ++j) row[j] *= r;
        }
      }
      out = reproject_energy(f, w, b, hp.temperature);
      break;
    }
    case DetectorKind::kGen: {
      const std::size_t c = t.num_classes();
      const auto m = static_cast<std::size_t>(hp.gen_m > 0 ? hp.gen_m : static_cast<int>(std::min<std::size_t>(c, 10)));
      std::vector<double> p(c);
      for (std::size_t i = 0; i < n; ++i) {
        std::copy(t.probs.data().begin() + static_cast<long>(i * c),
                  t.probs.data().begin() + static_cast<long>((i + 1) * c), p.begin());
        std::sort(p.begin(), p.end(), std::greater<>());
        double s = 0.0;
        for (std::size_t j = 0; j < std::min(m, c); ++j) {
          s += std::pow(p[j], hp.gen_gamma) * std::pow(1.0 - p[j], hp.gen_gamma);
        }
        out[i] = -s;
      }
      break;
    }
  }
  return out;
}

// Sets tau to the largest threshold accepting at least 95% of ID scores.
inline void calibrate(DetectorState& st, std::span<const double> id_scores,
                      double tpr_target = 0.95) {
  st.tau = threshold_at_tpr(id_scores, tpr_target);
  st.has_tau = true;
}

// true = ID.
inline std::vector<bool> detect(const DetectorState& st, std::span<const double> scores) {
  if (!st.has_tau) throw Error("detect: threshold not calibrated");
  std::vector<bool> out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = scores[i] >= st.tau;
  return out;
}

inline nlohmann::json detector_sidecar(const DetectorState& st) {
  nlohmann::json j = {{"kind", to_string(st.kind)}, {"hyperparams", to_json(st.hp)}};
  if (st.has_tau) j["tau"] = st.tau;
  return j;
}

// Writes `<stem>.aotb` (artifacts) and `<stem>.json` (kind, hyperparameters, tau).
inline void save_detector(const DetectorState& st, const std::string& stem) {
  aotb::save_bundle(stem + ".aotb", st.artifacts);
  std::ofstream out(stem + ".json", std::ios::trunc);
  if (!out) throw Error("cannot write detector sidecar '" + stem + ".json'");
  out << detector_sidecar(st).dump(2) << '\n';
}

inline DetectorState load_detector(const std::string& stem) {
  DetectorState st;
  std::ifstream in(stem + ".json");
  if (!in) throw ParseError(stem + ".json", "cannot open detector sidecar");
  try {
    nlohmann::json j;
    in >> j;
    st.kind = parse_detector_kind(j.at("kind").get<std::string>());
    st.hp = hyperparams_from_json(j.at("hyperparams"), "hyperparams");
    if (j.contains("tau")) {
      st.tau = j.at("tau").get<double>();
      st.has_tau = true;
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(stem + ".json", e.what());
  }
  // Artifact-free kinds write an empty bundle.
  st.artifacts = aotb::load(stem + ".aotb");
  return st;
}

}  // namespace advood
