#include "bifair/fairloss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace bifair {

std::vector<std::size_t> GroupLossVector::present_groups() const {
  std::vector<std::size_t> out;
  for (std::size_t n = 0; n < counts.size(); ++n) {
    if (counts[n] > 0) out.push_back(n);
  }
  return out;
}

GroupLossVector group_losses_from_pairs(std::span<const double> pair_losses,
                                        std::span<const Index> group_of_pair, std::size_t num_groups) {
  if (pair_losses.size() != group_of_pair.size()) throw Error("group losses: pair/group length mismatch");
  GroupLossVector g;
  g.losses.assign(num_groups, 0.0);
  g.counts.assign(num_groups, 0);
  for (std::size_t p = 0; p < pair_losses.size(); ++p) {
    const Index n = group_of_pair[p];
    if (n >= num_groups) throw Error("group losses: group index out of range");
    g.losses[n] += pair_losses[p];
    ++g.counts[n];
  }
  for (std::size_t n = 0; n < num_groups; ++n) {
    if (g.counts[n] > 0) g.losses[n] /= static_cast<double>(g.counts[n]);
  }
  return g;
}

GroupLossVector group_loss_vector(const ProjectorParams& theta, const Matrix& z,
                                  const ItemLists& histories, const Batch& batch,
                                  std::size_t num_groups, const LossOptions& opts) {
  if (batch.size() == 0) throw Error("group_loss_vector: empty batch");
  if (batch.group_of_pair.size() != batch.size()) throw Error("group_loss_vector: batch lacks group labels");
  const auto pass = evaluate_batch(theta, z, histories, batch, opts, {}, false, false);
  return group_losses_from_pairs(pass.pair_losses, batch.group_of_pair, num_groups);
}

SoftmaxEntropy softmax_entropy(std::span<const double> losses) {
  SoftmaxEntropy out;
  const auto n = static_cast<Eigen::Index>(losses.size());
  out.p.resize(n);
  if (n == 0) return out;
  const double mx = *std::max_element(losses.begin(), losses.end());
  double sum = 0.0;
  for (Eigen::Index k = 0; k < n; ++k) {
    out.p[k] = std::exp(losses[k] - mx);
    sum += out.p[k];
  }
  out.p /= sum;
  const double log_sum = std::log(sum);
  for (Eigen::Index k = 0; k < n; ++k) {
    // log p_k = (L_k - max) - log(sum), finite even when p_k underflows.
    out.entropy -= out.p[k] * (losses[k] - mx - log_sum);
  }
  return out;
}

Vector entropy_coefficients(std::span<const double> losses) {
  const SoftmaxEntropy se = softmax_entropy(losses);
  double mean_loss = 0.0;
  for (std::size_t k = 0; k < losses.size(); ++k) mean_loss += se.p[static_cast<Eigen::Index>(k)] * losses[k];
  Vector c(se.p.size());
  for (std::size_t k = 0; k < losses.size(); ++k) {
    const auto kk = static_cast<Eigen::Index>(k);
    c[kk] = se.p[kk] * (mean_loss - losses[k]);
  }
  // All-equal losses: every difference is exactly zero.
  if (std::all_of(losses.begin(), losses.end(), [&](double l) { return l == losses.front(); })) c.setZero();
  return c;
}

Vector entropy_gradient(std::span<const Vector> group_grads, std::span<const double> losses) {
  if (group_grads.size() != losses.size() || group_grads.empty()) {
    throw Error("entropy_gradient: dimension mismatch");
  }
  const Vector c = entropy_coefficients(losses);
  Vector g = Vector::Zero(group_grads.front().size());
  for (std::size_t n = 0; n < group_grads.size(); ++n) {
    if (group_grads[n].size() != g.size()) throw Error("entropy_gradient: atoms differ in length");
    g += c[static_cast<Eigen::Index>(n)] * group_grads[n];
  }
  return g;
}

void GradientAtomSet::validate() const {
  const auto m = static_cast<Eigen::Index>(atoms.size());
  if (gram.rows() != m || gram.cols() != m) throw Error("atom set: gram shape mismatch");
  double scale = 1.0;
  for (const auto& a : atoms) scale = std::max(scale, a.squaredNorm());
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) {
      if (std::abs(gram(i, j) - gram(j, i)) > 1e-9 * scale) throw Error("atom set: gram not symmetric");
      if (std::abs(gram(i, j) - atoms[i].dot(atoms[j])) > 1e-9 * scale) {
        throw Error("atom set: gram inconsistent with atoms");
      }
    }
  }
  if (m > 0) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram);
    if (es.eigenvalues().minCoeff() < -1e-8 * scale) throw Error("atom set: gram not positive semidefinite");
  }
}

GradientAtomSet build_atom_set(std::span<const Vector> group_grads, const std::vector<bool>& present,
                               const Vector& entropy_grad, bool include_entropy) {
  if (present.size() != group_grads.size()) throw Error("build_atom_set: present mask length mismatch");
  GradientAtomSet set;
  for (std::size_t n = 0; n < group_grads.size(); ++n) {
    if (!present[n]) continue;
    if (!set.atoms.empty() && group_grads[n].size() != set.atoms.front().size()) {
      throw Error("build_atom_set: atoms differ in length");
    }
    set.atoms.push_back(group_grads[n]);
    set.roles.push_back(AtomRole::Group);
    set.group_index.push_back(n);
  }
  if (set.atoms.empty()) throw Error("build_atom_set: no present groups");
  if (include_entropy && entropy_grad.size() > 0 && !entropy_grad.isZero(0.0)) {
    if (entropy_grad.size() != set.atoms.front().size()) throw Error("build_atom_set: entropy atom length mismatch");
    set.atoms.push_back(-entropy_grad);
    set.roles.push_back(AtomRole::Entropy);
    set.group_index.push_back(std::numeric_limits<std::size_t>::max());
  }
  const auto m = static_cast<Eigen::Index>(set.atoms.size());
  set.gram.resize(m, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = i; j < m; ++j) {
      set.gram(i, j) = set.gram(j, i) = set.atoms[i].dot(set.atoms[j]);
    }
  }
  return set;
}

SimplexWeights frank_wolfe(const Matrix& gram, const FrankWolfeOptions& opts) {
  const Eigen::Index m = gram.rows();
  if (m == 0 || gram.cols() != m) throw Error("frank_wolfe: gram must be square and nonempty");
  if (opts.max_iterations == 0) throw Error("frank_wolfe: needs at least one iteration");
  SimplexWeights out;
  out.w = Vector::Constant(m, 1.0 / static_cast<double>(m));
  double obj = out.w.dot(gram * out.w);
  out.objective.push_back(obj);
  for (std::size_t t = 0; t < opts.max_iterations; ++t) {
    const Vector bw = gram * out.w;
    Eigen::Index v = 0;
    for (Eigen::Index k = 1; k < m; ++k) {
      if (bw[k] < bw[v]) v = k;
    }
    // Away vertex: the active atom with the largest bw.
    Eigen::Index a = -1;
    if (opts.away_steps) {
      for (Eigen::Index k = 0; k < m; ++k) {
        if (out.w[k] > 0.0 && (a < 0 || bw[k] > bw[a])) a = k;
      }
    }
    const double toward_gap = obj - bw[v];
    // The duality gap bounds the excess objective; relative to the starting
    // objective so that rescaling every atom leaves the iterates unchanged.
    if (toward_gap <= opts.gap_tolerance * out.objective.front()) break;
    const double away_gap = a >= 0 && out.w[a] < 1.0 ? bw[a] - obj : 0.0;
    ++out.iterations;
    const Vector previous = out.w;
    double gamma = 0.0;
    if (toward_gap >= away_gap) {
      // Line search along e_v - w: minimizes ||(1-g) w + g e_v||_B^2.
      const double den = obj - 2.0 * bw[v] + gram(v, v);
      gamma = den > 0.0 ? std::clamp(toward_gap / den, 0.0, 1.0) : 0.0;
      if (gamma > 0.0) {
        out.w *= 1.0 - gamma;
        out.w[v] += gamma;
      }
    } else {
      // Along w - e_a, up to the point where w_a reaches zero.
      const double max_gamma = out.w[a] / (1.0 - out.w[a]);
      const double den = obj - 2.0 * bw[a] + gram(a, a);
      gamma = den > 0.0 ? std::clamp(away_gap / den, 0.0, max_gamma) : 0.0;
      if (gamma > 0.0) {
        out.w *= 1.0 + gamma;
        out.w[a] -= gamma;
        if (gamma == max_gamma) out.w[a] = 0.0;
        out.w = out.w.cwiseMax(0.0);
      }
    }
    if (gamma == 0.0) {
      out.objective.push_back(obj);
      break;
    }
    out.w /= out.w.sum();
    const double next = out.w.dot(gram * out.w);
    if (next > obj) {
      // Only rounding can raise the objective after an exact line search;
      // the iterate has converged to working precision.
      out.w = previous;
      out.objective.push_back(obj);
      break;
    }
    out.objective.push_back(next);
    obj = next;
  }
  return out;
}

SimplexWeights frank_wolfe(const GradientAtomSet& atoms, std::size_t iterations, bool away_steps) {
  FrankWolfeOptions opts;
  opts.max_iterations = iterations;
  opts.away_steps = away_steps;
  return frank_wolfe(atoms.gram, opts);
}

std::string to_string(DirectionMode m) {
  return m == DirectionMode::AllAtoms ? "all_atoms" : "groups_renormalized";
}

DirectionMode direction_mode_from_string(const std::string& s) {
  if (s == "all_atoms") return DirectionMode::AllAtoms;
  if (s == "groups_renormalized") return DirectionMode::GroupsRenormalized;
  throw ConfigError("unknown direction mode '" + s + "'");
}

Vector direction_weights(const GradientAtomSet& atoms, const Vector& w, DirectionMode mode) {
  if (static_cast<std::size_t>(w.size()) != atoms.size()) throw Error("fair_direction: weight length mismatch");
  if (mode == DirectionMode::AllAtoms) return w;
  Vector out = w;
  double group_mass = 0.0;
  std::size_t group_atoms = 0;
  for (std::size_t m = 0; m < atoms.size(); ++m) {
    if (atoms.roles[m] == AtomRole::Entropy) {
      out[static_cast<Eigen::Index>(m)] = 0.0;
    } else {
      group_mass += out[static_cast<Eigen::Index>(m)];
      ++group_atoms;
    }
  }
  for (std::size_t m = 0; m < atoms.size(); ++m) {
    if (atoms.roles[m] == AtomRole::Entropy) continue;
    auto& x = out[static_cast<Eigen::Index>(m)];
    x = group_mass > 0.0 ? x / group_mass : 1.0 / static_cast<double>(group_atoms);
  }
  return out;
}

Vector fair_direction(const GradientAtomSet& atoms, const SimplexWeights& w, DirectionMode mode) {
  const Vector weights = direction_weights(atoms, w.w, mode);
  Vector d = Vector::Zero(atoms.atoms.front().size());
  for (std::size_t m = 0; m < atoms.size(); ++m) d += weights[static_cast<Eigen::Index>(m)] * atoms.atoms[m];
  return d;
}

}  // namespace bifair
