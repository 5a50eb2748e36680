#pragma once

#include <optional>
#include <string>
#include <vector>

#include "advood/aotb.hpp"
#include "advood/error.hpp"
#include "advood/ops.hpp"
#include "advood/tensor.hpp"

namespace advood {

// Per-sample intermediate outputs of the classifier, batched along dim 0.
struct ForwardTaps {
  Tensor features;     // [N, D] penultimate (post global pooling)
  Tensor logits;       // [N, C]
  Tensor probs;        // [N, C] softmax(logits)
  Tensor activations;  // [N, K, h, w] last conv block output; may be empty
  std::vector<Tensor> block_outputs;  // every conv block output; may be empty
  std::vector<int> predicted;         // argmax(logits)

  std::size_t size() const { return logits.empty() ? 0 : logits.dim(0); }
  std::size_t num_classes() const { return logits.dim(1); }
  std::size_t feature_dim() const { return features.dim(1); }

  // Builds taps from features and logits alone (e.g. imported from a real
  // model). probs and predicted are derived.
  static ForwardTaps from_logits(Tensor features, Tensor logits) {
    kernels::require_matrix(features, "features");
    kernels::require_matrix(logits, "logits");
    if (features.dim(0) != logits.dim(0)) {
      throw ShapeError("features and logits disagree on sample count");
    }
    ForwardTaps t;
    t.probs = kernels::softmax(logits);
    t.predicted = kernels::argmax_rows(logits);
    t.features = std::move(features);
    t.logits = std::move(logits);
    return t;
  }

  // Rows [begin, end) of every tap.
  ForwardTaps slice(std::size_t begin, std::size_t end) const {
    ForwardTaps t;
    t.features = features.rows(begin, end);
    t.logits = logits.rows(begin, end);
    t.probs = probs.rows(begin, end);
    if (!activations.empty()) t.activations = activations.rows(begin, end);
    for (const Tensor& b : block_outputs) t.block_outputs.push_back(b.rows(begin, end));
    t.predicted.assign(predicted.begin() + static_cast<long>(begin),
                       predicted.begin() + static_cast<long>(end));
    return t;
  }
};

inline ForwardTaps concat_taps(const std::vector<ForwardTaps>& parts) {
  if (parts.empty()) throw ShapeError("concat of zero tap sets");
  auto gather = [&](auto pick) {
    std::vector<Tensor> ts;
    for (const ForwardTaps& p : parts) ts.push_back(pick(p));
    return concat_rows(ts);
  };
  ForwardTaps t;
  t.features = gather([](const ForwardTaps& p) { return p.features; });
  t.logits = gather([](const ForwardTaps& p) { return p.logits; });
  t.probs = gather([](const ForwardTaps& p) { return p.probs; });
  if (!parts[0].activations.empty()) {
    t.activations = gather([](const ForwardTaps& p) { return p.activations; });
  }
  for (std::size_t b = 0; b < parts[0].block_outputs.size(); ++b) {
    t.block_outputs.push_back(
        gather([b](const ForwardTaps& p) { return p.block_outputs.at(b); }));
  }
  for (const ForwardTaps& p : parts) {
    t.predicted.insert(t.predicted.end(), p.predicted.begin(), p.predicted.end());
  }
  return t;
}

inline aotb::Bundle taps_to_bundle(const ForwardTaps& t) {
  aotb::Bundle b;
  b.set("features", t.features);
  b.set("logits", t.logits);
  if (!t.activations.empty()) b.set("activations", t.activations);
  for (std::size_t i = 0; i < t.block_outputs.size(); ++i) {
    b.set("block" + std::to_string(i), t.block_outputs[i]);
  }
  return b;
}

inline ForwardTaps taps_from_bundle(const aotb::Bundle& b) {
  const Tensor& features = b.at("features");
  const Tensor& logits = b.at("logits");
  if (features.rank() != 2) throw ParseError("features", "expected rank 2");
  if (logits.rank() != 2) throw ParseError("logits", "expected rank 2");
  if (features.dim(0) != logits.dim(0)) {
    throw ParseError("logits", "sample count differs from features");
  }
  ForwardTaps t = ForwardTaps::from_logits(features, logits);
  if (const Tensor* a = b.find("activations")) {
    if (a->rank() != 4 || a->dim(0) != t.size()) {
      throw ParseError("activations", "expected [N,K,h,w] matching features");
    }
    t.activations = *a;
  }
  for (std::size_t i = 0; const Tensor* blk = b.find("block" + std::to_string(i)); ++i) {
    if (blk->rank() != 4 || blk->dim(0) != t.size()) {
      throw ParseError("block" + std::to_string(i), "expected [N,C,H,W] matching features");
    }
    t.block_outputs.push_back(*blk);
  }
  return t;
}

}  // namespace advood
