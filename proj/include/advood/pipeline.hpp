#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "advood/attacks.hpp"
#include "advood/data.hpp"
#include "advood/detectors.hpp"
#include "advood/error.hpp"
#include "advood/gradcam.hpp"
#include "advood/metrics.hpp"
#include "advood/model.hpp"
#include "json.hpp"

namespace advood {

using nlohmann::json;

struct DataConfig {
  int num_classes = 4;
  int train_per_class = 100;
  int test_per_class = 50;
  int ood_count = 200;
  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct RunConfig {
  std::uint64_t seed = 7;
  std::string output_dir = "advood_out";
  DataConfig data;
  TrainOptions train{40, 0.05, 0.9, 16, 0};  // seed derived from `seed`
  std::vector<AttackConfig> attacks;
  std::vector<DetectorKind> detectors;
  Hyperparams hyperparams;
  std::vector<OodKind> natural_ood{OodKind::kNearShapes, OodKind::kFarNoise};
  std::vector<std::string> evaluate;  // OOD sources compared against ID test
  std::size_t l2_bins = 20;
  std::size_t ssim_bins = 20;
};

// Seeds of every random component, derived from the master seed.
struct Seeds {
  std::uint64_t train_data, test_data, model;
  std::uint64_t ood(OodKind k) const { return mix_seed(base, 0x100 + static_cast<std::uint64_t>(k)); }
  std::uint64_t attack(AttackKind k) const {
    return mix_seed(base, 0x200 + static_cast<std::uint64_t>(k));
  }
  std::uint64_t base;
};

inline Seeds derive_seeds(std::uint64_t seed) {
  return {mix_seed(seed, 1), mix_seed(seed, 2), mix_seed(seed, 3), seed};
}

inline RunConfig default_config() {
  RunConfig c;
  for (AttackKind k : kAllAttacks) {
    AttackConfig a;
    a.kind = k;
    c.attacks.push_back(a);
  }
  c.detectors.assign(kAllDetectors.begin(), kAllDetectors.end());
  for (OodKind k : c.natural_ood) c.evaluate.emplace_back(to_string(k));
  for (AttackKind k : kAllAttacks) c.evaluate.emplace_back(to_string(k));
  return c;
}

// ---------------------------------------------------------------- config I/O

inline json attack_to_json(const AttackConfig& a) {
  json j = {{"kind", to_string(a.kind)}};
  switch (a.kind) {
    case AttackKind::kFgsm:
      j["epsilon"] = a.epsilon;
      break;
    case AttackKind::kPgd:
      j["epsilon"] = a.epsilon;
      j["steps"] = a.steps;
      j["step_size"] = a.step_size;
      j["random_start"] = a.random_start;
      break;
    case AttackKind::kMpgd:
      j["steps"] = a.steps;
      j["step_size"] = a.step_size;
      j["patch"] = {{"row", a.patch.row},
                    {"col", a.patch.col},
                    {"height", a.patch.height},
                    {"width", a.patch.width}};
      break;
    case AttackKind::kDeepFool:
      j["overshoot"] = a.overshoot;
      j["max_iters"] = a.max_iters;
      break;
  }
  return j;
}

inline json to_json(const RunConfig& c) {
  json attacks = json::array();
  for (const AttackConfig& a : c.attacks) attacks.push_back(attack_to_json(a));
  json detectors = json::array();
  for (DetectorKind k : c.detectors) detectors.push_back(to_string(k));
  json natural = json::array();
  for (OodKind k : c.natural_ood) natural.push_back(to_string(k));
  return {{"seed", c.seed},
          {"output_dir", c.output_dir},
          {"data",
           {{"num_classes", c.data.num_classes},
            {"train_per_class", c.data.train_per_class},
            {"test_per_class", c.data.test_per_class},
            {"ood_count", c.data.ood_count}}},
          {"train",
           {{"epochs", c.train.epochs},
            {"lr", c.train.lr},
            {"momentum", c.train.momentum},
            {"batch_size", c.train.batch_size}}},
          {"attacks", attacks},
          {"detectors", detectors},
          {"hyperparams", to_json(c.hyperparams)},
          {"natural_ood", natural},
          {"evaluate", c.evaluate},
          {"gradcam", {{"l2_bins", c.l2_bins}, {"ssim_bins", c.ssim_bins}}}};
}

namespace detail {

class ConfigReader {
 public:
  ConfigReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "/" : path_, "expected an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.emplace_back(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(field(key), e.what());
    }
  }

  const json* child(const char* key) {
    seen_.emplace_back(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string field(std::string_view key) const { return path_ + "/" + std::string(key); }

  void reject_unknown() const {
    for (const auto& [key, value] : j_.items()) {
      if (std::find(seen_.begin(), seen_.end(), key) == seen_.end()) {
        throw ConfigError(field(key), "unknown key");
      }
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::vector<std::string> seen_;
};

inline void require(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw ConfigError(field, what);
}

inline AttackConfig attack_from_json(const json& j, const std::string& path) {
  ConfigReader r(j, path);
  std::string kind;
  r.read("kind", kind);
  require(!kind.empty(), r.field("kind"), "missing attack kind");
  AttackConfig a;
  try {
    a.kind = parse_attack_kind(kind);
  } catch (const Error& e) {
    throw ConfigError(r.field("kind"), e.what());
  }
  r.read("epsilon", a.epsilon);
  r.read("steps", a.steps);
  r.read("step_size", a.step_size);
  r.read("random_start", a.random_start);
  r.read("overshoot", a.overshoot);
  r.read("max_iters", a.max_iters);
  if (const json* p = r.child("patch")) {
    ConfigReader pr(*p, r.field("patch"));
    pr.read("row", a.patch.row);
    pr.read("col", a.patch.col);
    pr.read("height", a.patch.height);
    pr.read("width", a.patch.width);
    pr.reject_unknown();
  }
  r.reject_unknown();
  try {
    a.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(path, e.what());
  }
  return a;
}

}  // namespace detail

inline RunConfig config_from_json(const json& j) {
  using detail::require;
  RunConfig c = default_config();
  detail::ConfigReader r(j, "");
  r.read("seed", c.seed);
  r.read("output_dir", c.output_dir);
  if (const json* d = r.child("data")) {
    detail::ConfigReader dr(*d, "/data");
    dr.read("num_classes", c.data.num_classes);
    dr.read("train_per_class", c.data.train_per_class);
    dr.read("test_per_class", c.data.test_per_class);
    dr.read("ood_count", c.data.ood_count);
    dr.reject_unknown();
    require(c.data.num_classes >= kMinClasses && c.data.num_classes <= kMaxClasses,
            "/data/num_classes", "must be in [4, 10]");
    require(c.data.train_per_class > 0, "/data/train_per_class", "must be positive");
    require(c.data.test_per_class > 0, "/data/test_per_class", "must be positive");
    require(c.data.ood_count > 0, "/data/ood_count", "must be positive");
  }
  if (const json* t = r.child("train")) {
    detail::ConfigReader tr(*t, "/train");
    tr.read("epochs", c.train.epochs);
    tr.read("lr", c.train.lr);
    tr.read("momentum", c.train.momentum);
    tr.read("batch_size", c.train.batch_size);
    tr.reject_unknown();
    require(c.train.epochs >= 0, "/train/epochs", "must be nonnegative");
    require(c.train.lr > 0.0, "/train/lr", "must be positive");
    require(c.train.momentum >= 0.0 && c.train.momentum < 1.0, "/train/momentum",
            "must lie in [0, 1)");
    require(c.train.batch_size > 0, "/train/batch_size", "must be positive");
  }
  if (const json* a = r.child("attacks")) {
    require(a->is_array(), "/attacks", "expected an array");
    c.attacks.clear();
    for (std::size_t i = 0; i < a->size(); ++i) {
      const std::string path = "/attacks/" + std::to_string(i);
      AttackConfig cfg = detail::attack_from_json(a->at(i), path);
      for (const AttackConfig& prev : c.attacks) {
        require(prev.kind != cfg.kind, path + "/kind", "attack listed twice");
      }
      c.attacks.push_back(cfg);
    }
  }
  if (const json* d = r.child("detectors")) {
    require(d->is_array(), "/detectors", "expected an array");
    c.detectors.clear();
    for (std::size_t i = 0; i < d->size(); ++i) {
      const std::string path = "/detectors/" + std::to_string(i);
      require(d->at(i).is_string(), path, "expected a detector name");
      DetectorKind k;
      try {
        k = parse_detector_kind(d->at(i).get<std::string>());
      } catch (const Error& e) {
        throw ConfigError(path, e.what());
      }
      require(std::find(c.detectors.begin(), c.detectors.end(), k) == c.detectors.end(), path,
              "detector listed twice");
      c.detectors.push_back(k);
    }
  }
  if (const json* h = r.child("hyperparams")) {
    c.hyperparams = hyperparams_from_json(*h, "/hyperparams");
  }
  if (const json* n = r.child("natural_ood")) {
    require(n->is_array(), "/natural_ood", "expected an array");
    c.natural_ood.clear();
    for (std::size_t i = 0; i < n->size(); ++i) {
      const std::string path = "/natural_ood/" + std::to_string(i);
      require(n->at(i).is_string(), path, "expected near_shapes or far_noise");
      const std::string s = n->at(i).get<std::string>();
      require(s == "near_shapes" || s == "far_noise", path,
              "unknown natural OOD kind '" + s + "' (expected near_shapes or far_noise)");
      c.natural_ood.push_back(parse_ood_kind(s));
    }
  }
  if (j.contains("evaluate")) {
    r.read("evaluate", c.evaluate);
  } else {
    c.evaluate.clear();
    for (OodKind k : c.natural_ood) c.evaluate.emplace_back(to_string(k));
    for (const AttackConfig& a : c.attacks) c.evaluate.emplace_back(to_string(a.kind));
    r.child("evaluate");
  }
  for (std::size_t i = 0; i < c.evaluate.size(); ++i) {
    const std::string& s = c.evaluate[i];
    const bool natural = std::any_of(c.natural_ood.begin(), c.natural_ood.end(),
                                     [&](OodKind k) { return to_string(k) == s; });
    const bool attack = std::any_of(c.attacks.begin(), c.attacks.end(),
                                    [&](const AttackConfig& a) { return to_string(a.kind) == s; });
    require(natural || attack, "/evaluate/" + std::to_string(i),
            "source '" + s + "' is neither a configured natural OOD split nor a configured attack");
  }
  if (const json* g = r.child("gradcam")) {
    detail::ConfigReader gr(*g, "/gradcam");
    gr.read("l2_bins", c.l2_bins);
    gr.read("ssim_bins", c.ssim_bins);
    gr.reject_unknown();
    require(c.l2_bins > 0, "/gradcam/l2_bins", "must be positive");
    require(c.ssim_bins > 0, "/gradcam/ssim_bins", "must be positive");
  }
  r.reject_unknown();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path, "cannot open config file");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError(path, e.what());
  }
  return config_from_json(j);
}

inline std::string config_hash(const RunConfig& c) { return hex64(fnv1a(to_json(c).dump())); }

// -------------------------------------------------------------------- stages

enum class Stage { kGenData, kTrain, kAttack, kFitDetectors, kScore, kEvaluate, kGradcam, kReport };

inline constexpr std::array<Stage, 8> kAllStages = {
    Stage::kGenData, Stage::kTrain,    Stage::kAttack,  Stage::kFitDetectors,
    Stage::kScore,   Stage::kEvaluate, Stage::kGradcam, Stage::kReport};

inline std::string_view to_string(Stage s) {
  constexpr std::array<std::string_view, 8> names = {
      "gen-data", "train", "attack", "fit-detectors", "score", "evaluate", "gradcam", "report"};
  return names[static_cast<std::size_t>(s)];
}

inline Stage parse_stage(std::string_view s) {
  for (Stage st : kAllStages) {
    if (to_string(st) == s) return st;
  }
  std::string valid;
  for (Stage st : kAllStages) valid += (valid.empty() ? "" : ", ") + std::string(to_string(st));
  throw Error("unknown stage '" + std::string(s) + "'; valid stages: " + valid);
}

namespace fs = std::filesystem;

// Output directory layout.
struct Layout {
  fs::path root;

  fs::path config() const { return root / "config.json"; }
  fs::path id_train() const { return root / "data" / "id_train.aotb"; }
  fs::path id_test() const { return root / "data" / "id_test.aotb"; }
  fs::path ood(OodKind k) const { return root / "data" / ("ood_" + std::string(to_string(k)) + ".aotb"); }
  fs::path data_manifest() const { return root / "data" / "manifest.json"; }
  fs::path model_stem() const { return root / "model" / "model"; }
  fs::path attack(AttackKind k) const { return root / "attacks" / (std::string(to_string(k)) + ".aotb"); }
  fs::path attack_manifest(AttackKind k) const {
    return root / "attacks" / (std::string(to_string(k)) + ".json");
  }
  fs::path detector_stem(DetectorKind k) const { return root / "detectors" / std::string(to_string(k)); }
  fs::path scores() const { return root / "scores" / "scores.csv"; }
  fs::path score_failures() const { return root / "scores" / "failures.json"; }
  fs::path metrics_csv() const { return root / "metrics" / "metrics.csv"; }
  fs::path metrics_json() const { return root / "metrics" / "metrics.json"; }
  fs::path shifts(AttackKind k) const { return root / "gradcam" / ("shift_" + std::string(to_string(k)) + ".csv"); }
  fs::path density(AttackKind k) const {
    return root / "gradcam" / ("density_" + std::string(to_string(k)) + ".json");
  }
  fs::path report_json() const { return root / "report.json"; }
  fs::path report_csv() const { return root / "report.csv"; }
  fs::path report_md() const { return root / "report.md"; }
};

namespace detail {

inline void require_file(const fs::path& p, Stage producer) {
  if (!fs::exists(p)) {
    throw MissingStageError("missing '" + p.string() + "'; run the '" +
                            std::string(to_string(producer)) + "' stage first");
  }
}

inline void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + p.string() + "'");
  out << text;
}

inline void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

inline json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ParseError(p.string(), "cannot open file");
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception& e) {
    throw ParseError(p.string(), e.what());
  }
}

// Shortest representation that round-trips.
inline std::string fmt(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, const std::string& field) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ParseError(field, "not a number: '" + std::string(s) + "'");
  }
  return v;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == ',') {
      out.push_back(line.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

inline Tensor vector_tensor(const std::vector<double>& v) {
  return v.empty() ? Tensor() : Tensor(Shape{v.size()}, v);
}

template <typename T>
inline Tensor to_tensor(const std::vector<T>& v) {
  return vector_tensor(std::vector<double>(v.begin(), v.end()));
}

template <typename T>
inline std::vector<T> from_tensor(const aotb::Bundle& b, const std::string& name) {
  std::vector<T> out;
  if (const Tensor* t = b.find(name)) {
    for (double v : t->data()) out.push_back(static_cast<T>(v));
  }
  return out;
}

inline void log_line(std::ostream* log, const std::string& msg) {
  if (log) *log << msg << std::endl;
}

}  // namespace detail

inline aotb::Bundle attack_to_bundle(const AttackResult& r) {
  using detail::to_tensor;
  aotb::Bundle b;
  b.set("images", r.adversarial);
  b.set("labels", to_tensor(r.labels));
  b.set("clean_pred", to_tensor(r.clean_pred));
  b.set("adv_pred", to_tensor(r.adv_pred));
  b.set("clean_correct", to_tensor(r.clean_correct));
  b.set("success", to_tensor(r.success));
  b.set("linf", to_tensor(r.linf));
  b.set("l2", to_tensor(r.l2));
  b.set("iterations", to_tensor(r.iterations));
  b.set("converged", to_tensor(r.converged));
  if (!r.patch_origin.empty()) {
    Tensor p(Shape{r.patch_origin.size(), 2});
    for (std::size_t i = 0; i < r.patch_origin.size(); ++i) {
      p[2 * i] = r.patch_origin[i][0];
      p[2 * i + 1] = r.patch_origin[i][1];
    }
    b.set("patch_origin", p);
  }
  return b;
}

inline AttackResult attack_from_bundle(const aotb::Bundle& b, const AttackConfig& cfg) {
  using detail::from_tensor;
  AttackResult r;
  r.config = cfg;
  r.adversarial = b.at("images");
  r.labels = from_tensor<int>(b, "labels");
  r.clean_pred = from_tensor<int>(b, "clean_pred");
  r.adv_pred = from_tensor<int>(b, "adv_pred");
  r.clean_correct = from_tensor<char>(b, "clean_correct");
  r.success = from_tensor<char>(b, "success");
  r.linf = from_tensor<double>(b, "linf");
  r.l2 = from_tensor<double>(b, "l2");
  r.iterations = from_tensor<int>(b, "iterations");
  r.converged = from_tensor<char>(b, "converged");
  if (const Tensor* p = b.find("patch_origin")) {
    for (std::size_t i = 0; i < p->dim(0); ++i) {
      r.patch_origin.push_back({static_cast<int>((*p)[2 * i]), static_cast<int>((*p)[2 * i + 1])});
    }
  }
  const std::size_t n = r.labels.size();
  if (r.adversarial.rank() != 4 || r.adversarial.dim(0) != n || r.clean_pred.size() != n ||
      r.adv_pred.size() != n || r.clean_correct.size() != n || r.success.size() != n) {
    throw ParseError("attack", "inconsistent per-sample arrays");
  }
  const bool any = std::any_of(r.clean_correct.begin(), r.clean_correct.end(),
                               [](char v) { return v != 0; });
  r.asr = any ? asr(r) : 0.0;
  return r;
}

// Indices of clean-correct samples the attack flipped.
inline std::vector<std::size_t> successful_indices(const AttackResult& r) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < r.size(); ++i) {
    if (r.clean_correct[i] && r.success[i]) idx.push_back(i);
  }
  return idx;
}

struct ScoreRow {
  std::size_t sample;
  std::string split;
  std::string detector;
  double score;
};

struct EvalRow {
  EvalResult result;
  bool ok = true;
  std::string reason;
};

struct ShiftSummary {
  std::string attack;
  std::size_t pairs = 0;
  std::size_t degenerate = 0;
  double frac_l2_positive = 0.0;  // over non-degenerate pairs
  double mean_l2 = 0.0;
  double mean_ssim = 0.0;
};

class Pipeline {
 public:
  Pipeline(RunConfig cfg, fs::path out, unsigned threads = 1, std::ostream* log = nullptr)
      : cfg_(std::move(cfg)), out_{std::move(out)}, threads_(std::max(1u, threads)), log_(log),
        seeds_(derive_seeds(cfg_.seed)) {}

  const RunConfig& config() const { return cfg_; }
  const Layout& layout() const { return out_; }
  const Seeds& seeds() const { return seeds_; }

  void run_stage(Stage s) {
    fs::create_directories(out_.root);
    detail::write_json(out_.config(), to_json(cfg_));
    detail::log_line(log_, "[" + std::string(to_string(s)) + "]");
    switch (s) {
      case Stage::kGenData: gen_data(); break;
      case Stage::kTrain: train_model(); break;
      case Stage::kAttack: attack(); break;
      case Stage::kFitDetectors: fit_detectors(); break;
      case Stage::kScore: score_all(); break;
      case Stage::kEvaluate: evaluate_all(); break;
      case Stage::kGradcam: gradcam_all(); break;
      case Stage::kReport: report(); break;
    }
  }

  void run_all() {
    for (Stage s : kAllStages) run_stage(s);
  }

  // ------------------------------------------------------------- gen-data
  void gen_data() {
    const DataConfig& d = cfg_.data;
    const LabeledDataset train = generate_shapes(d.num_classes, d.train_per_class,
                                                 seeds_.train_data, Split::kTrain);
    const LabeledDataset test = generate_shapes(d.num_classes, d.test_per_class,
                                                seeds_.test_data, Split::kTest);
    fs::create_directories(out_.id_train().parent_path());
    json files = json::array();
    auto save = [&](const fs::path& p, const aotb::Bundle& b, json meta) {
      const std::string bytes = aotb::encode_bundle(b);
      aotb::detail::write_file(p.string(), bytes);
      meta["file"] = p.filename().string();
      meta["checksum"] = hex64(fnv1a(bytes));
      files.push_back(meta);
    };
    save(out_.id_train(), to_bundle(train),
         {{"split", "train"}, {"count", train.size()}, {"seed", seeds_.train_data},
          {"kind", "shapes"}, {"num_classes", d.num_classes}});
    save(out_.id_test(), to_bundle(test),
         {{"split", "test"}, {"count", test.size()}, {"seed", seeds_.test_data},
          {"kind", "shapes"}, {"num_classes", d.num_classes}});
    for (OodKind k : cfg_.natural_ood) {
      const OodDataset ood = generate_ood(k, d.ood_count, seeds_.ood(k), d.num_classes);
      save(out_.ood(k), to_bundle(ood),
           {{"split", "ood"}, {"count", ood.size()}, {"seed", seeds_.ood(k)},
            {"kind", to_string(k)}});
    }
    detail::write_json(out_.data_manifest(), {{"files", files}});
  }

  // ---------------------------------------------------------------- train
  void train_model() {
    detail::require_file(out_.id_train(), Stage::kGenData);
    detail::require_file(out_.id_test(), Stage::kGenData);
    const LabeledDataset train_set = load_labeled(out_.id_train().string());
    const LabeledDataset test_set = load_labeled(out_.id_test().string());
    TrainOptions opt = cfg_.train;
    opt.seed = seeds_.model;
    Architecture arch;
    arch.num_classes = static_cast<std::size_t>(train_set.num_classes);
    const ModelCheckpoint ck = train(train_set, &test_set, opt, arch, [&](int epoch, double loss) {
      detail::log_line(log_, "  epoch " + std::to_string(epoch + 1) + " loss " + detail::fmt(loss));
    });
    fs::create_directories(out_.model_stem().parent_path());
    save_checkpoint(ck, out_.model_stem().string());
    detail::log_line(log_, "  test accuracy " + detail::fmt(ck.meta.test_accuracy));
  }

  // --------------------------------------------------------------- attack
  void attack() {
    const SmallConvNet net = load_model();
    detail::require_file(out_.id_test(), Stage::kGenData);
    const LabeledDataset test_set = load_labeled(out_.id_test().string());
    fs::create_directories(out_.root / "attacks");
    for (AttackConfig a : cfg_.attacks) {
      a.seed = seeds_.attack(a.kind);
      const AttackResult r = run_attack(net, test_set.images, test_set.labels, a, threads_);
      aotb::save_bundle(out_.attack(a.kind).string(), attack_to_bundle(r));
      detail::write_json(out_.attack_manifest(a.kind), attack_manifest(r));
      detail::log_line(log_, "  " + std::string(to_string(a.kind)) + " asr " + detail::fmt(r.asr));
    }
  }

  // -------------------------------------------------------- fit-detectors
  void fit_detectors() {
    const SmallConvNet net = load_model();
    detail::require_file(out_.id_train(), Stage::kGenData);
    detail::require_file(out_.id_test(), Stage::kGenData);
    const IdStats stats = make_id_stats(net, load_labeled(out_.id_train().string()));
    const LabeledDataset test_set = load_labeled(out_.id_test().string());
    const ForwardTaps test_taps = forward_with_taps(net, test_set.images);
    fs::create_directories(out_.root / "detectors");
    json failures = json::object();
    for (DetectorKind k : cfg_.detectors) {
      try {
        DetectorState st = fit(k, stats, cfg_.hyperparams);
        const std::vector<double> s = score(st, test_taps, {&net, &test_set.images});
        calibrate(st, s);
        save_detector(st, out_.detector_stem(k).string());
      } catch (const Error& e) {
        failures[std::string(to_string(k))] = e.what();
        fs::remove(out_.detector_stem(k).string() + ".json");
        detail::log_line(log_, "  " + std::string(to_string(k)) + " failed: " + e.what());
      }
    }
    detail::write_json(out_.root / "detectors" / "failures.json", failures);
  }

  // ---------------------------------------------------------------- score
  struct ScoreSource {
    std::string split;
    Tensor images;
    std::vector<std::size_t> ids;
  };

  std::vector<ScoreSource> score_sources() const {
    std::vector<ScoreSource> src;
    detail::require_file(out_.id_test(), Stage::kGenData);
    const LabeledDataset test_set = load_labeled(out_.id_test().string());
    auto iota = [](std::size_t n) {
      std::vector<std::size_t> v(n);
      for (std::size_t i = 0; i < n; ++i) v[i] = i;
      return v;
    };
    src.push_back({"id_test", test_set.images, iota(test_set.size())});
    for (OodKind k : cfg_.natural_ood) {
      detail::require_file(out_.ood(k), Stage::kGenData);
      const OodDataset ood = load_ood(out_.ood(k).string());
      src.push_back({std::string(to_string(k)), ood.images, iota(ood.size())});
    }
    for (const AttackConfig& a : cfg_.attacks) {
      detail::require_file(out_.attack(a.kind), Stage::kAttack);
      const AttackResult r = attack_from_bundle(aotb::load(out_.attack(a.kind).string()), a);
      const std::vector<std::size_t> idx = successful_indices(r);
      ScoreSource s{std::string(to_string(a.kind)), Tensor(), idx};
      if (!idx.empty()) s.images = select_rows(r.adversarial, idx);
      src.push_back(std::move(s));
    }
    return src;
  }

  void score_all() {
    const SmallConvNet net = load_model();
    const fs::path fit_failures = out_.root / "detectors" / "failures.json";
    detail::require_file(fit_failures, Stage::kFitDetectors);
    const json failed_fits = detail::read_json(fit_failures);
    std::vector<std::pair<DetectorKind, DetectorState>> states;
    for (DetectorKind k : cfg_.detectors) {
      if (failed_fits.contains(std::string(to_string(k)))) continue;
      detail::require_file(out_.detector_stem(k).string() + ".json", Stage::kFitDetectors);
      states.emplace_back(k, load_detector(out_.detector_stem(k).string()));
    }
    std::ostringstream csv;
    csv << "sample_id,split,detector,score\n";
    json failures = json::object();
    for (const ScoreSource& src : score_sources()) {
      if (src.ids.empty()) continue;
      const ForwardTaps taps = forward_with_taps(net, src.images);
      for (const auto& [k, st] : states) {
        std::vector<double> s;
        try {
          s = score(st, taps, {&net, &src.images});
        } catch (const Error& e) {
          failures[std::string(to_string(k))][src.split] = e.what();
          continue;
        }
        for (std::size_t i = 0; i < s.size(); ++i) {
          csv << src.ids[i] << ',' << src.split << ',' << to_string(k) << ',' << detail::fmt(s[i])
              << '\n';
        }
      }
    }
    detail::write_text(out_.scores(), csv.str());
    detail::write_json(out_.score_failures(), failures);
  }

  std::vector<ScoreRow> read_scores() const {
    detail::require_file(out_.scores(), Stage::kScore);
    std::ifstream in(out_.scores());
    std::string line;
    std::getline(in, line);
    if (line != "sample_id,split,detector,score") {
      throw ParseError(out_.scores().string(), "unexpected header");
    }
    std::vector<ScoreRow> rows;
    for (std::size_t n = 2; std::getline(in, line); ++n) {
      const auto cells = detail::split_csv(line);
      const std::string field = out_.scores().string() + ":" + std::to_string(n);
      if (cells.size() != 4) throw ParseError(field, "expected 4 columns");
      rows.push_back({static_cast<std::size_t>(detail::parse_double(cells[0], field)),
                      std::string(cells[1]), std::string(cells[2]),
                      detail::parse_double(cells[3], field)});
    }
    return rows;
  }

  // ------------------------------------------------------------- evaluate
  std::vector<EvalRow> evaluate_rows() const {
    const std::vector<ScoreRow> rows = read_scores();
    std::map<std::pair<std::string, std::string>, std::vector<double>> by;
    for (const ScoreRow& r : rows) by[{r.detector, r.split}].push_back(r.score);
    json fit_failures = json::object(), score_failures = json::object();
    if (fs::exists(out_.root / "detectors" / "failures.json")) {
      fit_failures = detail::read_json(out_.root / "detectors" / "failures.json");
    }
    if (fs::exists(out_.score_failures())) score_failures = detail::read_json(out_.score_failures());
    std::vector<EvalRow> out;
    for (DetectorKind k : cfg_.detectors) {
      const std::string det(to_string(k));
      for (const std::string& source : cfg_.evaluate) {
        EvalRow row;
        row.result.detector = det;
        row.result.source = source;
        const auto id = by.find({det, "id_test"});
        const auto ood = by.find({det, source});
        if (fit_failures.contains(det)) {
          row.ok = false;
          row.reason = "fit failed: " + fit_failures[det].get<std::string>();
        } else if (score_failures.contains(det) && score_failures[det].contains(source)) {
          row.ok = false;
          row.reason = "scoring failed: " + score_failures[det][source].get<std::string>();
        } else if (id == by.end()) {
          row.ok = false;
          row.reason = "no ID test scores";
        } else if (ood == by.end()) {
          row.ok = false;
          row.reason = "no OOD samples (no successful adversarial examples)";
        } else {
          row.result = evaluate(det, source, id->second, ood->second);
        }
        out.push_back(std::move(row));
      }
    }
    return out;
  }

  void evaluate_all() {
    const std::vector<EvalRow> rows = evaluate_rows();
    std::ostringstream csv;
    csv << "detector,source,fpr95,auroc,aupr_in,aupr_out,n_id,n_ood,status,reason\n";
    json j = json::array();
    for (const EvalRow& r : rows) {
      const EvalResult& e = r.result;
      csv << e.detector << ',' << e.source << ',';
      if (r.ok) {
        csv << detail::fmt(e.fpr95) << ',' << detail::fmt(e.auroc) << ','
            << detail::fmt(e.aupr_in) << ',' << detail::fmt(e.aupr_out) << ',' << e.n_id << ','
            << e.n_ood << ",ok,\n";
      } else {
        csv << ",,,,,,failed," << r.reason << '\n';
      }
      j.push_back(eval_json(r));
    }
    detail::write_text(out_.metrics_csv(), csv.str());
    detail::write_json(out_.metrics_json(), j);
  }

  // -------------------------------------------------------------- gradcam
  std::vector<ShiftRecord> shift_records(const SmallConvNet& net, const LabeledDataset& test_set,
                                         const AttackConfig& a) const {
    detail::require_file(out_.attack(a.kind), Stage::kAttack);
    const AttackResult r = attack_from_bundle(aotb::load(out_.attack(a.kind).string()), a);
    const std::vector<std::size_t> idx = successful_indices(r);
    std::vector<ShiftRecord> records;
    if (idx.empty()) return records;
    std::vector<int> targets;
    for (std::size_t i : idx) targets.push_back(r.clean_pred[i]);
    const auto benign = gradcam(net, select_rows(test_set.images, idx), targets);
    const auto adv = gradcam(net, select_rows(r.adversarial, idx), targets);
    for (std::size_t j = 0; j < idx.size(); ++j) {
      ShiftRecord s;
      s.sample = idx[j];
      s.attack = std::string(to_string(a.kind));
      s.l2 = l2_distance(benign[j], adv[j]);
      s.ssim = ssim(benign[j], adv[j]);
      s.benign_class = r.clean_pred[idx[j]];
      s.adv_class = r.adv_pred[idx[j]];
      s.degenerate = benign[j].degenerate || adv[j].degenerate;
      records.push_back(s);
    }
    return records;
  }

  static ShiftSummary summarize(const std::string& attack, const std::vector<ShiftRecord>& recs) {
    ShiftSummary s;
    s.attack = attack;
    s.pairs = recs.size();
    std::size_t usable = 0, positive = 0;
    for (const ShiftRecord& r : recs) {
      if (r.degenerate) {
        ++s.degenerate;
        continue;
      }
      ++usable;
      positive += r.l2 > 1e-6 ? 1 : 0;
      s.mean_l2 += r.l2;
      s.mean_ssim += r.ssim;
    }
    if (usable > 0) {
      s.frac_l2_positive = static_cast<double>(positive) / static_cast<double>(usable);
      s.mean_l2 /= static_cast<double>(usable);
      s.mean_ssim /= static_cast<double>(usable);
    }
    return s;
  }

  void gradcam_all() {
    const SmallConvNet net = load_model();
    detail::require_file(out_.id_test(), Stage::kGenData);
    const LabeledDataset test_set = load_labeled(out_.id_test().string());
    fs::create_directories(out_.root / "gradcam");
    for (const AttackConfig& a : cfg_.attacks) {
      const std::vector<ShiftRecord> recs = shift_records(net, test_set, a);
      std::ostringstream csv;
      csv << "sample_id,attack,l2,ssim,benign_class,adv_class,degenerate\n";
      for (const ShiftRecord& r : recs) {
        csv << r.sample << ',' << r.attack << ',' << detail::fmt(r.l2) << ','
            << detail::fmt(r.ssim) << ',' << r.benign_class << ',' << r.adv_class << ','
            << (r.degenerate ? 1 : 0) << '\n';
      }
      detail::write_text(out_.shifts(a.kind), csv.str());
      const ShiftSummary s = summarize(std::string(to_string(a.kind)), recs);
      json j = {{"attack", s.attack},
                {"pairs", s.pairs},
                {"degenerate", s.degenerate},
                {"frac_l2_positive", s.frac_l2_positive},
                {"mean_l2", s.mean_l2},
                {"mean_ssim", s.mean_ssim},
                {"target_class", "benign prediction"},
                {"ssim", "global statistics on native map, C1=1e-4, C2=9e-4"}};
      if (!recs.empty()) {
        j["histogram"] = to_json(shift_density(recs, cfg_.l2_bins, cfg_.ssim_bins));
      }
      detail::write_json(out_.density(a.kind), j);
    }
  }

  // --------------------------------------------------------------- report
  json build_report() const {
    json rep;
    rep["config_hash"] = config_hash(cfg_);
    rep["config"] = to_json(cfg_);
    json seeds = {{"master", seeds_.base},
                  {"train_data", seeds_.train_data},
                  {"test_data", seeds_.test_data},
                  {"model", seeds_.model}};
    for (OodKind k : cfg_.natural_ood) seeds["ood_" + std::string(to_string(k))] = seeds_.ood(k);
    for (const AttackConfig& a : cfg_.attacks) {
      seeds["attack_" + std::string(to_string(a.kind))] = seeds_.attack(a.kind);
    }
    rep["seeds"] = seeds;

    detail::require_file(out_.model_stem().string() + ".json", Stage::kTrain);
    rep["model"] = detail::read_json(out_.model_stem().string() + ".json");

    json asr_table = json::array();
    for (const AttackConfig& a : cfg_.attacks) {
      detail::require_file(out_.attack_manifest(a.kind), Stage::kAttack);
      asr_table.push_back(detail::read_json(out_.attack_manifest(a.kind)));
    }
    rep["asr"] = asr_table;

    json dets = json::object();
    for (DetectorKind k : cfg_.detectors) {
      const fs::path p = out_.detector_stem(k).string() + ".json";
      if (fs::exists(p)) dets[std::string(to_string(k))] = detail::read_json(p);
    }
    rep["detectors"] = dets;

    detail::require_file(out_.metrics_json(), Stage::kEvaluate);
    rep["metrics"] = detail::read_json(out_.metrics_json());

    json shifts = json::array();
    for (const AttackConfig& a : cfg_.attacks) {
      detail::require_file(out_.density(a.kind), Stage::kGradcam);
      json d = detail::read_json(out_.density(a.kind));
      d.erase("histogram");
      shifts.push_back(d);
    }
    rep["attention_shift"] = shifts;
    return rep;
  }

  void report() {
    const json rep = build_report();
    detail::write_json(out_.report_json(), rep);

    std::ostringstream csv;
    csv << "table,detector,source,metric,value\n";
    for (const json& a : rep["asr"]) {
      csv << "asr,," << a["kind"].get<std::string>() << ",asr," << detail::fmt(a["asr"].get<double>())
          << '\n';
    }
    for (const json& m : rep["metrics"]) {
      for (const char* key : {"fpr95", "auroc", "aupr_in", "aupr_out"}) {
        csv << "metrics," << m["detector"].get<std::string>() << ','
            << m["source"].get<std::string>() << ',' << key << ',';
        if (m["status"] == "ok") csv << detail::fmt(m[key].get<double>());
        else csv << "failed";
        csv << '\n';
      }
    }
    for (const json& s : rep["attention_shift"]) {
      for (const char* key : {"mean_l2", "mean_ssim", "frac_l2_positive"}) {
        csv << "attention_shift,," << s["attack"].get<std::string>() << ',' << key << ','
            << detail::fmt(s[key].get<double>()) << '\n';
      }
    }
    detail::write_text(out_.report_csv(), csv.str());
    detail::write_text(out_.report_md(), render_markdown(rep));
  }

  static std::string render_markdown(const json& rep) {
    auto pct = [](double v) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
      return std::string(buf);
    };
    std::ostringstream md;
    md << "# Run report\n\nConfig hash `" << rep["config_hash"].get<std::string>() << "`\n\n";
    if (rep["model"].contains("training") && rep["model"]["training"].contains("test_accuracy")) {
      md << "Classifier test accuracy: " << pct(rep["model"]["training"]["test_accuracy"].get<double>())
         << "%\n\n";
    }
    md << "## Attack success rate\n\n| attack | ASR (%) | successful | clean correct | mean Linf | mean L2 |\n"
       << "|---|---|---|---|---|---|\n";
    for (const json& a : rep["asr"]) {
      char linf[32], l2[32];
      std::snprintf(linf, sizeof linf, "%.4f", a["mean_linf"].get<double>());
      std::snprintf(l2, sizeof l2, "%.4f", a["mean_l2"].get<double>());
      md << "| " << a["kind"].get<std::string>() << " | " << pct(a["asr"].get<double>()) << " | "
         << a["successful"].get<std::size_t>() << " | " << a["clean_correct"].get<std::size_t>()
         << " | " << linf << " | " << l2 << " |\n";
    }
    std::vector<std::string> sources;
    for (const json& s : rep["config"]["evaluate"]) sources.push_back(s.get<std::string>());
    for (const char* metric : {"auroc", "fpr95"}) {
      md << "\n## " << (std::string(metric) == "auroc" ? "AUROC" : "FPR95") << " (%)\n\n| detector |";
      for (const auto& s : sources) md << ' ' << s << " |";
      md << "\n|---|";
      for (std::size_t i = 0; i < sources.size(); ++i) md << "---|";
      md << '\n';
      std::map<std::pair<std::string, std::string>, const json*> cell;
      std::vector<std::string> order;
      for (const json& m : rep["metrics"]) {
        const std::string det = m["detector"].get<std::string>();
        if (std::find(order.begin(), order.end(), det) == order.end()) order.push_back(det);
        cell[{det, m["source"].get<std::string>()}] = &m;
      }
      for (const auto& det : order) {
        md << "| " << det << " |";
        for (const auto& s : sources) {
          const json* m = cell.count({det, s}) ? cell[{det, s}] : nullptr;
          if (m && (*m)["status"] == "ok") md << ' ' << pct((*m)[metric].get<double>()) << " |";
          else md << " failed |";
        }
        md << '\n';
      }
    }
    md << "\n## Attention shift (Grad-CAM)\n\n| attack | pairs | degenerate | mean L2 | mean SSIM | L2 > 1e-6 (%) |\n"
       << "|---|---|---|---|---|---|\n";
    for (const json& s : rep["attention_shift"]) {
      char l2[32], ss[32];
      std::snprintf(l2, sizeof l2, "%.4f", s["mean_l2"].get<double>());
      std::snprintf(ss, sizeof ss, "%.4f", s["mean_ssim"].get<double>());
      md << "| " << s["attack"].get<std::string>() << " | " << s["pairs"].get<std::size_t>() << " | "
         << s["degenerate"].get<std::size_t>() << " | " << l2 << " | " << ss << " | "
         << pct(s["frac_l2_positive"].get<double>()) << " |\n";
    }
    return md.str();
  }

  SmallConvNet load_model() const {
    detail::require_file(out_.model_stem().string() + ".aotb", Stage::kTrain);
    detail::require_file(out_.model_stem().string() + ".json", Stage::kTrain);
    return SmallConvNet(load_checkpoint(out_.model_stem().string()));
  }

  static json attack_manifest(const AttackResult& r) {
    json cfg = attack_to_json(r.config);
    cfg["seed"] = r.config.seed;
    if (r.config.kind != AttackKind::kDeepFool) cfg["effective_step_size"] = r.config.effective_step_size();
    std::size_t correct = 0;
    double linf = 0.0, l2 = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) {
      correct += r.clean_correct[i] ? 1 : 0;
      linf += r.linf[i];
      l2 += r.l2[i];
    }
    json j = {{"kind", to_string(r.config.kind)},
              {"config", cfg},
              {"asr", r.asr},
              {"count", r.size()},
              {"clean_correct", correct},
              {"successful", successful_indices(r).size()},
              {"mean_linf", linf / static_cast<double>(r.size())},
              {"mean_l2", l2 / static_cast<double>(r.size())},
              {"labels", "ground truth"}};
    if (r.config.kind == AttackKind::kDeepFool) {
      j["converged"] = std::count(r.converged.begin(), r.converged.end(), 1);
    }
    return j;
  }

  static json eval_json(const EvalRow& r) {
    const EvalResult& e = r.result;
    json j = {{"detector", e.detector}, {"source", e.source}, {"status", r.ok ? "ok" : "failed"}};
    if (r.ok) {
      j["fpr95"] = e.fpr95;
      j["auroc"] = e.auroc;
      j["aupr_in"] = e.aupr_in;
      j["aupr_out"] = e.aupr_out;
      j["n_id"] = e.n_id;
      j["n_ood"] = e.n_ood;
    } else {
      j["reason"] = r.reason;
    }
    return j;
  }

 private:
  RunConfig cfg_;
  Layout out_;
  unsigned threads_;
  std::ostream* log_;
  Seeds seeds_;
};

}  // namespace advood
