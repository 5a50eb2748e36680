#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "advood/aotb.hpp"
#include "advood/autograd.hpp"
#include "advood/data.hpp"
#include "advood/error.hpp"
#include "advood/ops.hpp"
#include "advood/rng.hpp"
#include "advood/taps.hpp"
#include "json.hpp"

namespace advood {

// Anything the gradient-based attacks can differentiate through.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual Var logits(Graph& g, Var images) const = 0;
  virtual std::size_t num_classes() const = 0;
};

struct Architecture {
  std::array<std::size_t, 3> widths{16, 32, 64};
  std::size_t num_classes = 4;
  std::array<std::size_t, 3> input_shape{kImageChannels, kImageSize, kImageSize};

  std::size_t feature_dim() const { return widths.back(); }
  friend bool operator==(const Architecture&, const Architecture&) = default;
};

struct TrainOptions {
  int epochs = 20;
  double lr = 0.05;
  double momentum = 0.9;
  std::size_t batch_size = 64;
  std::uint64_t seed = 7;
};

struct TrainingMeta {
  TrainOptions options;
  double final_loss = 0.0;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  bool has_test = false;
};

struct ModelCheckpoint {
  Architecture arch;
  aotb::Bundle weights;
  TrainingMeta meta;
};

inline constexpr std::array<const char*, 3> kConvNames = {"conv1", "conv2", "conv3"};

namespace detail {

inline void fill_uniform(Tensor& t, Rng& rng, double bound) {
  for (double& v : t.data()) v = rng.uniform(-bound, bound);
}

}  // namespace detail

// Seeded fan-in-scaled uniform init. Input normalization starts as identity
// and is set from the training data by train().
inline ModelCheckpoint init_checkpoint(const Architecture& arch, std::uint64_t seed) {
  ModelCheckpoint ck;
  ck.arch = arch;
  Rng rng(seed);
  const std::size_t in_c = arch.input_shape[0];
  ck.weights.set("input_mean", Tensor(Shape{in_c}, 0.0));
  ck.weights.set("input_std", Tensor(Shape{in_c}, 1.0));
  std::size_t prev = in_c;
  for (std::size_t b = 0; b < 3; ++b) {
    Tensor w(Shape{arch.widths[b], prev, 3, 3});
    detail::fill_uniform(w, rng, std::sqrt(6.0 / static_cast<double>(prev * 9)));
    ck.weights.set(std::string(kConvNames[b]) + ".weight", std::move(w));
    ck.weights.set(std::string(kConvNames[b]) + ".bias", Tensor(Shape{arch.widths[b]}, 0.0));
    prev = arch.widths[b];
  }
  Tensor fc(Shape{arch.num_classes, prev});
  detail::fill_uniform(fc, rng, 1.0 / std::sqrt(static_cast<double>(prev)));
  ck.weights.set("fc.weight", std::move(fc));
  ck.weights.set("fc.bias", Tensor(Shape{arch.num_classes}, 0.0));
  return ck;
}

// Graph handles of every weight of a checkpoint.
struct ParamVars {
  std::array<Var, 3> conv_w, conv_b;
  Var fc_w, fc_b;
};

struct ForwardVars {
  std::array<Var, 3> blocks;  // conv -> relu -> avgpool outputs
  Var features;
  Var logits;
};

// SmallConvNet: normalize -> 3 x (conv3x3 pad1 -> relu -> avgpool2) ->
// global average pool -> linear.
class SmallConvNet : public Classifier {
 public:
  explicit SmallConvNet(ModelCheckpoint ck) : ck_(std::move(ck)) { validate(); }

  const ModelCheckpoint& checkpoint() const { return ck_; }
  ModelCheckpoint& mutable_checkpoint() { return ck_; }
  const Architecture& arch() const { return ck_.arch; }
  std::size_t num_classes() const override { return ck_.arch.num_classes; }

  ParamVars bind(Graph& g, bool requires_grad) const {
    ParamVars p;
    for (std::size_t b = 0; b < 3; ++b) {
      p.conv_w[b] = g.leaf(ck_.weights.at(std::string(kConvNames[b]) + ".weight"), requires_grad);
      p.conv_b[b] = g.leaf(ck_.weights.at(std::string(kConvNames[b]) + ".bias"), requires_grad);
    }
    p.fc_w = g.leaf(ck_.weights.at("fc.weight"), requires_grad);
    p.fc_b = g.leaf(ck_.weights.at("fc.bias"), requires_grad);
    return p;
  }

  ForwardVars forward(Graph&, Var images, const ParamVars& p) const {
    check_input(images.shape());
    ForwardVars f;
    Var x = ops::normalize_channels(images, ck_.weights.at("input_mean").data(),
                                    ck_.weights.at("input_std").data());
    for (std::size_t b = 0; b < 3; ++b) {
      x = ops::conv2d(x, p.conv_w[b], p.conv_b[b], 1, 1);
      x = ops::relu(x);
      x = ops::avgpool2d(x, 2);
      f.blocks[b] = x;
    }
    f.features = ops::global_avgpool(x);
    f.logits = ops::linear(f.features, p.fc_w, p.fc_b);
    return f;
  }

  Var logits(Graph& g, Var images) const override {
    return forward(g, images, bind(g, false)).logits;
  }

  // Stateless classifier head: logits from penultimate features.
  Tensor head(const Tensor& features) const {
    return kernels::linear(features, ck_.weights.at("fc.weight"), ck_.weights.at("fc.bias"));
  }

  void check_input(const Shape& s) const {
    const auto& in = ck_.arch.input_shape;
    if (s.size() != 4 || s[1] != in[0] || s[2] != in[1] || s[3] != in[2]) {
      throw ShapeError("model expects [N," + std::to_string(in[0]) + "," +
                       std::to_string(in[1]) + "," + std::to_string(in[2]) + "], got " +
                       shape_string(s));
    }
  }

 private:
  void validate() const {
    const Architecture& a = ck_.arch;
    std::size_t prev = a.input_shape[0];
    auto expect = [&](const std::string& name, const Shape& s) {
      const Tensor& t = ck_.weights.at(name);
      if (t.shape() != s) {
        throw ShapeError("checkpoint weight '" + name + "' has shape " +
                         shape_string(t.shape()) + ", expected " + shape_string(s));
      }
    };
    expect("input_mean", {prev});
    expect("input_std", {prev});
    for (std::size_t b = 0; b < 3; ++b) {
      expect(std::string(kConvNames[b]) + ".weight", {a.widths[b], prev, 3, 3});
      expect(std::string(kConvNames[b]) + ".bias", {a.widths[b]});
      prev = a.widths[b];
    }
    expect("fc.weight", {a.num_classes, prev});
    expect("fc.bias", {a.num_classes});
    if (a.input_shape[1] % 8 != 0 || a.input_shape[2] % 8 != 0) {
      throw ShapeError("input height and width must be divisible by 8");
    }
  }

  ModelCheckpoint ck_;
};

// Runs the network without gradients in chunks and collects every tap.
inline ForwardTaps forward_with_taps(const SmallConvNet& net, const Tensor& batch,
                                     bool keep_blocks = true, std::size_t chunk = 64) {
  net.check_input(batch.shape());
  std::vector<ForwardTaps> parts;
  for (std::size_t begin = 0; begin < batch.dim(0); begin += chunk) {
    const std::size_t end = std::min(batch.dim(0), begin + chunk);
    Graph g;
    Var x = g.constant(batch.rows(begin, end));
    ForwardVars f = net.forward(g, x, net.bind(g, false));
    ForwardTaps t = ForwardTaps::from_logits(f.features.value(), f.logits.value());
    t.activations = f.blocks[2].value();
    if (keep_blocks) {
      for (Var b : f.blocks) t.block_outputs.push_back(b.value());
    }
    parts.push_back(std::move(t));
  }
  return concat_taps(parts);
}

inline double accuracy(const std::vector<int>& predicted, const std::vector<int>& labels) {
  if (predicted.size() != labels.size() || labels.empty()) {
    throw ShapeError("accuracy: prediction/label count mismatch or empty");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predicted[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

inline std::vector<int> predict(const SmallConvNet& net, const Tensor& images) {
  return forward_with_taps(net, images, false).predicted;
}

// Per-channel pixel mean and standard deviation of a dataset.
inline std::pair<Tensor, Tensor> channel_stats(const Tensor& images) {
  const std::size_t n = images.dim(0), c = images.dim(1), area = images.dim(2) * images.dim(3);
  Tensor mean(Shape{c}), stddev(Shape{c});
  for (std::size_t k = 0; k < c; ++k) {
    double s = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < area; ++p) {
        const double v = images[(i * c + k) * area + p];
        s += v;
        s2 += v * v;
      }
    const double cnt = static_cast<double>(n * area);
    mean[k] = s / cnt;
    stddev[k] = std::max(1e-6, std::sqrt(std::max(0.0, s2 / cnt - mean[k] * mean[k])));
  }
  return {mean, stddev};
}

// Mini-batch SGD with momentum (v <- mu v + g; w <- w - lr v) on mean cross
// entropy. Deterministic in options.seed.
inline ModelCheckpoint train(const LabeledDataset& train_set, const LabeledDataset* test_set,
                             const TrainOptions& opt, const Architecture& arch_in,
                             const std::function<void(int, double)>& on_epoch = {}) {
  if (train_set.size() == 0) throw Error("train: empty dataset");
  if (!(opt.lr > 0.0)) throw Error("train: lr must be positive");
  if (opt.batch_size == 0) throw Error("train: batch_size must be positive");
  if (opt.epochs < 0) throw Error("train: epochs must be nonnegative");
  Architecture arch = arch_in;
  arch.num_classes = static_cast<std::size_t>(train_set.num_classes);
  ModelCheckpoint ck = init_checkpoint(arch, opt.seed);
  auto [mean, stddev] = channel_stats(train_set.images);
  ck.weights.set("input_mean", mean);
  ck.weights.set("input_std", stddev);

  std::vector<std::string> trainable;
  for (const auto& [name, t] : ck.weights.entries()) {
    if (name != "input_mean" && name != "input_std") trainable.push_back(name);
  }
  std::vector<Tensor> velocity;
  for (const auto& name : trainable) velocity.emplace_back(ck.weights.at(name).shape(), 0.0);

  Rng rng(mix_seed(opt.seed, 0x7261696eULL));
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  double last_loss = 0.0;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += opt.batch_size) {
      const std::size_t end = std::min(order.size(), begin + opt.batch_size);
      std::span<const std::size_t> idx(order.data() + begin, end - begin);
      std::vector<int> labels;
      for (std::size_t i : idx) labels.push_back(train_set.labels[i]);
      SmallConvNet net(ck);
      Graph g;
      ParamVars p = net.bind(g, true);
      double loss_value = 0.0;
      try {
        Var x = g.constant(select_rows(train_set.images, idx));
        Var loss = ops::cross_entropy(net.forward(g, x, p).logits, labels);
        loss_value = loss.value().item();
        g.backward(loss);
      } catch (const Error& e) {
        throw Error("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                    std::to_string(batches) + ": " + e.what() +
                    " (try a smaller learning rate)");
      }
      if (!std::isfinite(loss_value)) {
        throw Error("training diverged at epoch " + std::to_string(epoch) +
                    ": loss is not finite (try a smaller learning rate)");
      }
      std::vector<Var> vars;
      for (std::size_t b = 0; b < 3; ++b) {
        vars.push_back(p.conv_w[b]);
        vars.push_back(p.conv_b[b]);
      }
      vars.push_back(p.fc_w);
      vars.push_back(p.fc_b);
      for (std::size_t k = 0; k < trainable.size(); ++k) {
        // bind() order matches the checkpoint's insertion order of trainables.
        const Tensor grad = vars[k].grad();
        Tensor w = ck.weights.at(trainable[k]);
        for (std::size_t i = 0; i < w.size(); ++i) {
          velocity[k][i] = opt.momentum * velocity[k][i] + grad[i];
          w[i] -= opt.lr * velocity[k][i];
        }
        ck.weights.set(trainable[k], std::move(w));
      }
      epoch_loss += loss_value;
      ++batches;
    }
    last_loss = epoch_loss / static_cast<double>(batches);
    if (on_epoch) on_epoch(epoch, last_loss);
  }

  SmallConvNet final_net(ck);
  ck.meta.options = opt;
  ck.meta.final_loss = last_loss;
  ck.meta.train_accuracy = accuracy(predict(final_net, train_set.images), train_set.labels);
  if (test_set) {
    ck.meta.has_test = true;
    ck.meta.test_accuracy = accuracy(predict(final_net, test_set->images), test_set->labels);
  }
  return ck;
}

inline nlohmann::json checkpoint_sidecar(const ModelCheckpoint& ck) {
  nlohmann::json j;
  j["architecture"] = {{"widths", ck.arch.widths},
                       {"num_classes", ck.arch.num_classes},
                       {"input_shape", ck.arch.input_shape}};
  const TrainOptions& o = ck.meta.options;
  j["training"] = {{"epochs", o.epochs},       {"lr", o.lr},
                   {"momentum", o.momentum},   {"batch_size", o.batch_size},
                   {"seed", o.seed},           {"final_loss", ck.meta.final_loss},
                   {"train_accuracy", ck.meta.train_accuracy}};
  if (ck.meta.has_test) j["training"]["test_accuracy"] = ck.meta.test_accuracy;
  return j;
}

// Writes `<stem>.aotb` (weights) and `<stem>.json` (architecture + metadata).
inline void save_checkpoint(const ModelCheckpoint& ck, const std::string& stem) {
  aotb::save_bundle(stem + ".aotb", ck.weights);
  std::ofstream out(stem + ".json", std::ios::trunc);
  if (!out) throw Error("cannot write checkpoint sidecar '" + stem + ".json'");
  out << checkpoint_sidecar(ck).dump(2) << '\n';
}

inline ModelCheckpoint load_checkpoint(const std::string& stem) {
  ModelCheckpoint ck;
  ck.weights = aotb::load(stem + ".aotb");
  std::ifstream in(stem + ".json");
  if (!in) throw ParseError(stem + ".json", "cannot open checkpoint sidecar");
  nlohmann::json j;
  try {
    in >> j;
    const auto& a = j.at("architecture");
    ck.arch.widths = a.at("widths").get<std::array<std::size_t, 3>>();
    ck.arch.num_classes = a.at("num_classes").get<std::size_t>();
    ck.arch.input_shape = a.at("input_shape").get<std::array<std::size_t, 3>>();
    const auto& t = j.at("training");
    ck.meta.options.epochs = t.at("epochs").get<int>();
    ck.meta.options.lr = t.at("lr").get<double>();
    ck.meta.options.momentum = t.at("momentum").get<double>();
    ck.meta.options.batch_size = t.at("batch_size").get<std::size_t>();
    ck.meta.options.seed = t.at("seed").get<std::uint64_t>();
    ck.meta.final_loss = t.at("final_loss").get<double>();
    ck.meta.train_accuracy = t.at("train_accuracy").get<double>();
    if (t.contains("test_accuracy")) {
      ck.meta.has_test = true;
      ck.meta.test_accuracy = t.at("test_accuracy").get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(stem + ".json", e.what());
  }
  SmallConvNet validate(ck);
  return ck;
}

}  // namespace advood
