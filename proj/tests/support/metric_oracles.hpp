#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <vector>

#include "advood/rng.hpp"

// Brute-force references for the detection metrics.
namespace advood::oracle {

// Counts every (id, ood) pair; exact up to the final division.
inline double pairwise_auroc(const std::vector<double>& id, const std::vector<double>& ood) {
  std::uint64_t twice = 0;
  for (double a : id)
    for (double b : ood) twice += a > b ? 2 : (a == b ? 1 : 0);
  return static_cast<double>(twice) / (2.0 * static_cast<double>(id.size() * ood.size()));
}

inline double count_ge(const std::vector<double>& s, double t) {
  double c = 0;
  for (double v : s) c += v >= t ? 1 : 0;
  return c;
}

// Tries every observed score as a threshold and keeps the largest one
// reaching the target TPR.
inline double sweep_fpr(const std::vector<double>& id, const std::vector<double>& ood,
                        double target) {
  std::set<double> cand(id.begin(), id.end());
  cand.insert(ood.begin(), ood.end());
  double best = -INFINITY;
  for (double t : cand) {
    if (count_ge(id, t) / static_cast<double>(id.size()) >= target) best = std::max(best, t);
  }
  return count_ge(ood, best) / static_cast<double>(ood.size());
}

// Precision at every distinct threshold, integrated over recall increments.
inline double enumerate_aupr(const std::vector<double>& pos, const std::vector<double>& neg) {
  std::set<double, std::greater<>> cand(pos.begin(), pos.end());
  cand.insert(neg.begin(), neg.end());
  double area = 0.0, prev = 0.0;
  for (double t : cand) {
    const double tp = count_ge(pos, t), fp = count_ge(neg, t);
    const double recall = tp / static_cast<double>(pos.size());
    area += (recall - prev) * (tp / (tp + fp));
    prev = recall;
  }
  return area;
}

// Random score sets; `levels` > 0 quantizes to force ties.
inline std::vector<double> random_scores(Rng& rng, std::size_t n, double shift, int levels) {
  std::vector<double> v(n);
  for (double& x : v) {
    x = rng.normal(shift, 1.0);
    if (levels > 0) x = std::round(x * levels) / levels;
  }
  return v;
}

}  // namespace advood::oracle
