#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "advood/tensor.hpp"

// Straight-line reimplementations of the detector scoring rules. Plain
// vectors and loops only; no code shared with the library beyond Tensor.
namespace advood::oracle {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

inline Mat rows(const Tensor& t) {
  const std::size_t n = t.dim(0), w = t.size() / n;
  Mat m(n, Vec(w));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) m[i][j] = t[i * w + j];
  return m;
}

inline double lse(const Vec& v) {
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

inline Vec softmax(const Vec& v) {
  const double l = lse(v);
  Vec p(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) p[i] = std::exp(v[i] - l);
  return p;
}

inline double energy(const Vec& logits, double t = 1.0) {
  Vec s(logits);
  for (double& x : s) x /= t;
  return t * lse(s);
}

inline Vec matvec(const Mat& w, const Vec& x, const Vec& b) {
  Vec y(w.size());
  for (std::size_t o = 0; o < w.size(); ++o) {
    y[o] = b[o];
    for (std::size_t i = 0; i < x.size(); ++i) y[o] += w[o][i] * x[i];
  }
  return y;
}

inline double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline Vec unit(Vec v) {
  const double n = std::sqrt(dot(v, v));
  if (n > 0) for (double& x : v) x /= n;
  return v;
}

inline double percentile(Vec v, double p) {
  std::sort(v.begin(), v.end());
  const double rank = p / 100.0 * static_cast<double>(v.size() - 1);
  const auto i = static_cast<std::size_t>(rank);
  if (i + 1 >= v.size()) return v.back();
  return v[i] + (rank - static_cast<double>(i)) * (v[i + 1] - v[i]);
}

// Gauss-Jordan with partial pivoting.
inline Mat inverse(Mat a) {
  const std::size_t n = a.size();
  Mat inv(n, Vec(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) inv[i][i] = 1.0;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
    std::swap(a[c], a[piv]);
    std::swap(inv[c], inv[piv]);
    const double d = a[c][c];
    for (std::size_t j = 0; j < n; ++j) {
      a[c][j] /= d;
      inv[c][j] /= d;
    }
    for (std::size_t r = 0; r < n; ++r) {
      if (r == c) continue;
      const double f = a[r][c];
      for (std::size_t j = 0; j < n; ++j) {
        a[r][j] -= f * a[c][j];
        inv[r][j] -= f * inv[c][j];
      }
    }
  }
  return inv;
}

// Cyclic Jacobi. Returns eigenvalues and eigenvectors (columns of vecs).
inline void jacobi_eigen(Mat a, Vec& vals, Mat& vecs) {
  const std::size_t n = a.size();
  vecs.assign(n, Vec(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) vecs[i][i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = vecs[k][p], vkq = vecs[k][q];
          vecs[k][p] = c * vkp - s * vkq;
          vecs[k][q] = s * vkp + c * vkq;
        }
      }
    }
  }
  vals.resize(n);
  for (std::size_t i = 0; i < n; ++i) vals[i] = a[i][i];
}

inline Vec column_mean(const Mat& x) {
  Vec m(x[0].size(), 0.0);
  for (const Vec& r : x)
    for (std::size_t j = 0; j < r.size(); ++j) m[j] += r[j];
  for (double& v : m) v /= static_cast<double>(x.size());
  return m;
}

inline Mat add_ridge(Mat cov, double ridge) {
  double tr = 0.0;
  for (std::size_t i = 0; i < cov.size(); ++i) tr += cov[i][i];
  const double lambda = tr > 0 ? ridge * tr / static_cast<double>(cov.size()) : ridge;
  for (std::size_t i = 0; i < cov.size(); ++i) cov[i][i] += lambda;
  return cov;
}

inline double quad(const Vec& x, const Vec& mu, const Mat& p) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < x.size(); ++j) s += (x[i] - mu[i]) * p[i][j] * (x[j] - mu[j]);
  return s;
}

struct ClassGaussian {
  Mat means;
  Mat precision;
  Vec bg_mean;
  Mat bg_precision;
};

inline ClassGaussian fit_gaussian(const Mat& f, const std::vector<int>& y, int classes,
                                  double ridge) {
  const std::size_t d = f[0].size();
  ClassGaussian g;
  g.means.assign(static_cast<std::size_t>(classes), Vec(d, 0.0));
  std::vector<double> cnt(static_cast<std::size_t>(classes), 0.0);
  for (std::size_t i = 0; i < f.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) g.means[static_cast<std::size_t>(y[i])][j] += f[i][j];
    cnt[static_cast<std::size_t>(y[i])] += 1;
  }
  for (std::size_t k = 0; k < g.means.size(); ++k)
    for (double& v : g.means[k]) v /= cnt[k];
  Mat cov(d, Vec(d, 0.0)), cov0(d, Vec(d, 0.0));
  g.bg_mean = column_mean(f);
  for (std::size_t i = 0; i < f.size(); ++i) {
    const Vec& mu = g.means[static_cast<std::size_t>(y[i])];
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) {
        cov[a][b] += (f[i][a] - mu[a]) * (f[i][b] - mu[b]) / static_cast<double>(f.size());
        cov0[a][b] += (f[i][a] - g.bg_mean[a]) * (f[i][b] - g.bg_mean[b]) / static_cast<double>(f.size());
      }
  }
  g.precision = inverse(add_ridge(cov, ridge));
  g.bg_precision = inverse(add_ridge(cov0, ridge));
  return g;
}

inline double mds(const ClassGaussian& g, const Vec& x) {
  double best = INFINITY;
  for (const Vec& mu : g.means) best = std::min(best, quad(x, mu, g.precision));
  return -best;
}

inline double rmds(const ClassGaussian& g, const Vec& x) {
  double best = -INFINITY;
  for (const Vec& mu : g.means) {
    best = std::max(best, -quad(x, mu, g.precision) + quad(x, g.bg_mean, g.bg_precision));
  }
  return best;
}

inline double knn(const Mat& train, const Vec& x, std::size_t k) {
  Vec d;
  const Vec q = unit(x);
  for (const Vec& r : train) {
    const Vec b = unit(r);
    double s = 0.0;
    for (std::size_t j = 0; j < q.size(); ++j) s += (q[j] - b[j]) * (q[j] - b[j]);
    d.push_back(std::sqrt(s));
  }
  std::sort(d.begin(), d.end());
  return -d[k - 1];
}

inline double nnguide(const Mat& train, const Mat& train_logits, const Vec& x, const Vec& logits,
                      std::size_t k) {
  const Vec q = unit(x);
  Vec sims;
  for (std::size_t i = 0; i < train.size(); ++i) {
    sims.push_back(dot(q, unit(train[i])) * energy(train_logits[i]));
  }
  std::sort(sims.rbegin(), sims.rend());
  double s = 0.0;
  for (std::size_t i = 0; i < k; ++i) s += sims[i];
  return energy(logits) * s / static_cast<double>(k);
}

inline double react(const Mat& train, const Mat& w, const Vec& b, double p, Vec x) {
  for (std::size_t j = 0; j < x.size(); ++j) {
    Vec col;
    for (const Vec& r : train) col.push_back(r[j]);
    x[j] = std::min(x[j], percentile(col, p));
  }
  return energy(matvec(w, x, b));
}

inline double dice(const Mat& train, Mat w, const Vec& b, double p, const Vec& x) {
  const Vec mean = column_mean(train);
  Vec contrib;
  for (std::size_t o = 0; o < w.size(); ++o)
    for (std::size_t j = 0; j < mean.size(); ++j) contrib.push_back(w[o][j] * mean[j]);
  const double thr = percentile(contrib, p);
  for (std::size_t o = 0; o < w.size(); ++o)
    for (std::size_t j = 0; j < mean.size(); ++j)
      if (w[o][j] * mean[j] < thr) w[o][j] = 0.0;
  return energy(matvec(w, x, b));
}

inline double ash(const Mat& w, const Vec& b, double p, Vec x) {
  const double thr = percentile(x, p);
  const double before = std::accumulate(x.begin(), x.end(), 0.0);
  double after = 0.0;
  for (double v : x) after += v >= thr ? v : 0.0;
  for (double& v : x) v = v >= thr ? v * before / after : 0.0;
  return energy(matvec(w, x, b));
}

inline double scale(const Mat& w, const Vec& b, double p, Vec x) {
  const double thr = percentile(x, p);
  const double before = std::accumulate(x.begin(), x.end(), 0.0);
  double after = 0.0;
  for (double v : x) after += v >= thr ? v : 0.0;
  for (double& v : x) v *= std::exp(before / after);
  return energy(matvec(w, x, b));
}

inline double gen(const Vec& logits, double gamma, std::size_t m) {
  Vec p = softmax(logits);
  std::sort(p.rbegin(), p.rend());
  double s = 0.0;
  for (std::size_t i = 0; i < std::min(m, p.size()); ++i) {
    s += std::pow(p[i], gamma) * std::pow(1.0 - p[i], gamma);
  }
  return -s;
}

inline double klm(const Mat& train_logits, const Vec& logits) {
  const std::size_t c = logits.size();
  Mat tpl(c, Vec(c, 0.0));
  Vec cnt(c, 0.0);
  for (const Vec& l : train_logits) {
    const auto k = static_cast<std::size_t>(std::max_element(l.begin(), l.end()) - l.begin());
    const Vec p = softmax(l);
    for (std::size_t j = 0; j < c; ++j) tpl[k][j] += p[j];
    cnt[k] += 1;
  }
  const Vec p = softmax(logits);
  double best = INFINITY;
  for (std::size_t k = 0; k < c; ++k) {
    if (cnt[k] == 0) continue;
    double kl = 0.0;
    for (std::size_t j = 0; j < c; ++j) kl += p[j] * std::log(p[j] / (tpl[k][j] / cnt[k]));
    best = std::min(best, kl);
  }
  return -best;
}

inline double vim(const Mat& train, const Mat& train_logits, std::size_t principal, const Vec& x,
                  const Vec& logits) {
  const std::size_t d = x.size();
  const Vec u = column_mean(train);
  Mat cov(d, Vec(d, 0.0));
  for (const Vec& r : train)
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b)
        cov[a][b] += (r[a] - u[a]) * (r[b] - u[b]) / static_cast<double>(train.size());
  Vec vals;
  Mat vecs;
  jacobi_eigen(cov, vals, vecs);
  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return vals[a] < vals[b]; });
  auto residual = [&](const Vec& v) {
    double s = 0.0;
    for (std::size_t r = 0; r < d - principal; ++r) {
      double proj = 0.0;
      for (std::size_t j = 0; j < d; ++j) proj += vecs[j][order[r]] * (v[j] - u[j]);
      s += proj * proj;
    }
    return std::sqrt(s);
  };
  double mean_norm = 0.0, mean_max = 0.0;
  for (std::size_t i = 0; i < train.size(); ++i) {
    mean_norm += residual(train[i]) / static_cast<double>(train.size());
    mean_max += *std::max_element(train_logits[i].begin(), train_logits[i].end()) /
                static_cast<double>(train.size());
  }
  const double alpha = mean_norm > 0 ? mean_max / mean_norm : 0.0;
  return -alpha * residual(x) + lse(logits);
}

// block: [C][HW] for one sample.
inline Vec gram(const Mat& block, int p) {
  const std::size_t c = block.size();
  Mat pw(block);
  for (Vec& r : pw)
    for (double& v : r) v = std::pow(v, p);
  Vec g(c * c);
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < pw[i].size(); ++k) s += pw[i][k] * pw[j][k];
      g[i * c + j] = p == 1 ? s : std::copysign(std::pow(std::abs(s), 1.0 / p), s);
    }
  return g;
}

inline Mat sample_block(const Tensor& t, std::size_t n) {
  const std::size_t c = t.dim(1), hw = t.dim(2) * t.dim(3);
  Mat m(c, Vec(hw));
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t k = 0; k < hw; ++k) m[i][k] = t[(n * c + i) * hw + k];
  return m;
}

// bounds[layer][order index][class] = {lo, hi}. Per predicted class of the
// train samples, or over all of them when the class is never predicted.
struct GramFit {
  std::vector<std::vector<std::vector<std::pair<Vec, Vec>>>> bounds;
};

inline GramFit gram_fit(const std::vector<Tensor>& blocks, const std::vector<int>& pred,
                        std::size_t classes, const std::vector<int>& orders) {
  std::vector<char> seen(classes, 0);
  for (int k : pred) seen[static_cast<std::size_t>(k)] = 1;
  GramFit f;
  for (const Tensor& blk : blocks) {
    auto& layer = f.bounds.emplace_back();
    const std::size_t c = blk.dim(1);
    for (std::size_t o = 0; o < orders.size(); ++o) {
      const std::pair<Vec, Vec> empty{Vec(c * c, INFINITY), Vec(c * c, -INFINITY)};
      std::vector<std::pair<Vec, Vec>> per_class(classes, empty);
      std::pair<Vec, Vec> all = empty;
      auto widen = [](std::pair<Vec, Vec>& b, const Vec& g) {
        for (std::size_t j = 0; j < g.size(); ++j) {
          b.first[j] = std::min(b.first[j], g[j]);
          b.second[j] = std::max(b.second[j], g[j]);
        }
      };
      for (std::size_t i = 0; i < pred.size(); ++i) {
        const Vec g = gram(sample_block(blk, i), orders[o]);
        widen(per_class[static_cast<std::size_t>(pred[i])], g);
        widen(all, g);
      }
      for (std::size_t k = 0; k < classes; ++k) {
        if (!seen[k]) per_class[k] = all;
      }
      layer.push_back(std::move(per_class));
    }
  }
  return f;
}

// Sum over layers and orders of the mean normalized out-of-bound deviation,
// negated.
inline double gram_score(const GramFit& fit, const std::vector<Tensor>& blocks, std::size_t n,
                         int pred, const std::vector<int>& orders) {
  double total = 0.0;
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    for (std::size_t o = 0; o < orders.size(); ++o) {
      const Vec g = gram(sample_block(blocks[l], n), orders[o]);
      const auto& [lo, hi] = fit.bounds[l][o][static_cast<std::size_t>(pred)];
      double dev = 0.0;
      for (std::size_t j = 0; j < g.size(); ++j) {
        if (g[j] < lo[j]) dev += (lo[j] - g[j]) / (std::abs(lo[j]) + 1e-6);
        if (g[j] > hi[j]) dev += (g[j] - hi[j]) / (std::abs(hi[j]) + 1e-6);
      }
      total += dev / static_cast<double>(g.size());
    }
  }
  return -total;
}

// ODIN on an affine model z = W x + b over flattened inputs.
inline double odin(const Mat& w, const Vec& b, const Vec& x, double t, double eps) {
  Vec z = matvec(w, x, b);
  for (double& v : z) v /= t;
  const Vec p = softmax(z);
  const auto k = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
  Vec xt(x);
  for (std::size_t i = 0; i < x.size(); ++i) {
    double g = 0.0;  // d(-log p_k)/dx_i
    for (std::size_t o = 0; o < w.size(); ++o) g += (p[o] - (o == k ? 1.0 : 0.0)) * w[o][i] / t;
    xt[i] -= eps * (g > 0 ? 1.0 : (g < 0 ? -1.0 : 0.0));
  }
  Vec z2 = matvec(w, xt, b);
  for (double& v : z2) v /= t;
  const Vec p2 = softmax(z2);
  return *std::max_element(p2.begin(), p2.end());
}

}  // namespace advood::oracle
