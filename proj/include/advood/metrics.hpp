#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "advood/error.hpp"

namespace advood {

// ID is the positive class throughout; higher score means more ID.

namespace detail {

inline void require_scores(std::span<const double> id, std::span<const double> ood,
                           const char* what) {
  if (id.empty() || ood.empty()) {
    throw Error(std::string(what) + ": ID and OOD score sets must be nonempty");
  }
}

inline std::size_t count_at_least(std::span<const double> s, double tau) {
  return static_cast<std::size_t>(
      std::count_if(s.begin(), s.end(), [tau](double v) { return v >= tau; }));
}

}  // namespace detail

// Mann-Whitney statistic via midranks: P(id > ood) + 0.5 P(id == ood).
inline double auroc(std::span<const double> id, std::span<const double> ood) {
  detail::require_scores(id, ood, "auroc");
  const std::size_t n = id.size(), m = ood.size();
  std::vector<std::pair<double, bool>> all;
  all.reserve(n + m);
  for (double v : id) all.emplace_back(v, true);
  for (double v : ood) all.emplace_back(v, false);
  std::sort(all.begin(), all.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  // Ranks are 1-based; doubled to keep midranks integral.
  std::size_t twice_rank_sum = 0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].first == all[i].first) ++j;
    const std::size_t twice_mid = (i + 1) + j;
    for (std::size_t k = i; k < j; ++k) {
      if (all[k].second) twice_rank_sum += twice_mid;
    }
    i = j;
  }
  const double u = (static_cast<double>(twice_rank_sum) - static_cast<double>(n * (n + 1))) / 2.0;
  return u / (static_cast<double>(n) * static_cast<double>(m));
}

// Largest threshold keeping at least `tpr_target` of ID scores at or above it.
inline double threshold_at_tpr(std::span<const double> id, double tpr_target = 0.95) {
  if (id.empty()) throw Error("threshold: ID score set must be nonempty");
  std::vector<double> s(id.begin(), id.end());
  std::sort(s.begin(), s.end(), std::greater<>());
  const double n = static_cast<double>(s.size());
  for (std::size_t i = 0; i < s.size();) {
    std::size_t j = i;
    while (j < s.size() && s[j] == s[i]) ++j;
    if (static_cast<double>(j) / n >= tpr_target) return s[i];
    i = j;
  }
  return s.back();
}

inline double fpr_at_tpr(std::span<const double> id, std::span<const double> ood,
                         double tpr_target = 0.95) {
  detail::require_scores(id, ood, "fpr_at_tpr");
  const double tau = threshold_at_tpr(id, tpr_target);
  return static_cast<double>(detail::count_at_least(ood, tau)) /
         static_cast<double>(ood.size());
}

enum class Positive { kIn, kOut };

// Average precision: sum over distinct thresholds of (recall step) x precision.
inline double aupr(std::span<const double> id, std::span<const double> ood,
                   Positive positive = Positive::kIn) {
  detail::require_scores(id, ood, "aupr");
  std::vector<std::pair<double, bool>> all;
  if (positive == Positive::kIn) {
    for (double v : id) all.emplace_back(v, true);
    for (double v : ood) all.emplace_back(v, false);
  } else {
    for (double v : ood) all.emplace_back(-v, true);
    for (double v : id) all.emplace_back(-v, false);
  }
  const double positives = static_cast<double>(positive == Positive::kIn ? id.size() : ood.size());
  std::sort(all.begin(), all.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });
  double area = 0.0, prev_recall = 0.0;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].first == all[i].first) {
      tp += all[j].second ? 1 : 0;
      ++j;
    }
    const double recall = static_cast<double>(tp) / positives;
    const double precision = static_cast<double>(tp) / static_cast<double>(j);
    area += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return area;
}

struct EvalResult {
  std::string detector;
  std::string source;
  double fpr95 = 0.0;
  double auroc = 0.0;
  double aupr_in = 0.0;
  double aupr_out = 0.0;
  std::size_t n_id = 0;
  std::size_t n_ood = 0;
};

inline EvalResult evaluate(std::string detector, std::string source,
                           std::span<const double> id, std::span<const double> ood) {
  EvalResult r;
  r.detector = std::move(detector);
  r.source = std::move(source);
  r.fpr95 = fpr_at_tpr(id, ood, 0.95);
  r.auroc = auroc(id, ood);
  r.aupr_in = aupr(id, ood, Positive::kIn);
  r.aupr_out = aupr(id, ood, Positive::kOut);
  r.n_id = id.size();
  r.n_ood = ood.size();
  return r;
}

}  // namespace advood
