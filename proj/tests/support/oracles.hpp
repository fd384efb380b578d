#pragma once

// Test-only reference implementations. None of these share code with the
// library beyond plain Eigen types.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Central differences, step h per coordinate.
inline Vec fd_gradient(const std::function<double(const Vec&)>& f, const Vec& x, double h = 1e-5) {
  Vec g(x.size());
  Vec xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double orig = xp[i];
    xp[i] = orig + h;
    const double fp = f(xp);
    xp[i] = orig - h;
    const double fm = f(xp);
    xp[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline double rel_error(const Vec& a, const Vec& b) {
  const double scale = std::max({a.norm(), b.norm(), 1e-8});
  return (a - b).norm() / scale;
}

// Euclidean projection onto the probability simplex (sort-based).
inline Vec project_simplex(const Vec& v) {
  std::vector<double> u(v.data(), v.data() + v.size());
  std::sort(u.begin(), u.end(), std::greater<>());
  double cumsum = 0.0, theta = 0.0;
  for (std::size_t k = 0; k < u.size(); ++k) {
    cumsum += u[k];
    const double t = (cumsum - 1.0) / static_cast<double>(k + 1);
    if (u[k] - t > 0.0) theta = t;
  }
  Vec out(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) out[i] = std::max(v[i] - theta, 0.0);
  return out;
}

// min w^T B w over the simplex by accelerated projected gradient.
inline double min_norm_projected_gradient(const Mat& gram, int iterations = 200000) {
  const Eigen::Index m = gram.rows();
  const double lipschitz = 2.0 * std::max(Eigen::SelfAdjointEigenSolver<Mat>(gram).eigenvalues().maxCoeff(), 1e-12);
  Vec w = Vec::Constant(m, 1.0 / static_cast<double>(m));
  Vec y = w;
  double t = 1.0;
  double best = w.dot(gram * w);
  for (int it = 0; it < iterations; ++it) {
    const Vec next = project_simplex(y - (2.0 * gram * y) / lipschitz);
    const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    y = next + ((t - 1.0) / tn) * (next - w);
    w = next;
    t = tn;
    best = std::min(best, w.dot(gram * w));
  }
  return best;
}

// Exhaustive grid over the simplex (M <= 3).
inline double min_norm_grid(const Mat& gram, double step = 1e-3) {
  const Eigen::Index m = gram.rows();
  const int n = static_cast<int>(std::lround(1.0 / step));
  double best = INFINITY;
  Vec w(m);
  if (m == 1) return gram(0, 0);
  if (m == 2) {
    for (int i = 0; i <= n; ++i) {
      w << i * step, 1.0 - i * step;
      best = std::min(best, w.dot(gram * w));
    }
    return best;
  }
  for (int i = 0; i <= n; ++i) {
    for (int j = 0; i + j <= n; ++j) {
      w << i * step, j * step, 1.0 - (i + j) * step;
      best = std::min(best, w.dot(gram * w));
    }
  }
  return best;
}

// Full stable sort by descending score, ties by ascending index; masked
// items removed.
inline std::vector<unsigned> naive_topk(const std::vector<double>& scores, const std::vector<unsigned>& masked,
                                        std::size_t k) {
  std::vector<unsigned> idx;
  for (unsigned i = 0; i < scores.size(); ++i) {
    if (std::find(masked.begin(), masked.end(), i) == masked.end()) idx.push_back(i);
  }
  std::stable_sort(idx.begin(), idx.end(), [&](unsigned a, unsigned b) { return scores[a] > scores[b]; });
  if (idx.size() > k) idx.resize(k);
  return idx;
}

inline bool contains(const std::vector<unsigned>& v, unsigned x) { return std::find(v.begin(), v.end(), x) != v.end(); }

inline double naive_recall(const std::vector<unsigned>& top, const std::vector<unsigned>& rel) {
  double hits = 0;
  for (unsigned i : top) hits += contains(rel, i) ? 1.0 : 0.0;
  return hits / static_cast<double>(rel.size());
}

inline double naive_ndcg(const std::vector<unsigned>& top, const std::vector<unsigned>& rel, std::size_t k) {
  double dcg = 0, idcg = 0;
  for (std::size_t r = 0; r < top.size(); ++r) {
    if (contains(rel, top[r])) dcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  }
  for (std::size_t r = 0; r < std::min(k, rel.size()); ++r) idcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  return dcg / idcg;
}

inline double naive_hr(const std::vector<unsigned>& top, const std::vector<unsigned>& rel) {
  for (unsigned i : top) {
    if (contains(rel, i)) return 1.0;
  }
  return 0.0;
}

inline Mat random_atoms(std::mt19937_64& rng, int m, int dim) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Mat g(m, dim);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < dim; ++j) g(i, j) = normal(rng);
  }
  return g;
}

}  // namespace oracle
