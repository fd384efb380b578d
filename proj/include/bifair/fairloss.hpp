#pragma once

#include <span>
#include <string>
#include <vector>

#include "bifair/common.hpp"
#include "bifair/recmodel.hpp"

namespace bifair {

struct GroupLossVector {
  std::vector<double> losses;       // mean loss per group; 0 where absent
  std::vector<std::size_t> counts;  // pairs per group in the batch

  std::size_t num_groups() const { return losses.size(); }
  bool present(std::size_t n) const { return counts[n] > 0; }
  std::vector<std::size_t> present_groups() const;
};

// Groups a batch's per-pair losses by the positive item's group.
GroupLossVector group_losses_from_pairs(std::span<const double> pair_losses,
                                        std::span<const Index> group_of_pair, std::size_t num_groups);

GroupLossVector group_loss_vector(const ProjectorParams& theta, const Matrix& z,
                                  const ItemLists& histories, const Batch& batch,
                                  std::size_t num_groups, const LossOptions& opts);

struct SoftmaxEntropy {
  Vector p;
  double entropy = 0.0;
};

SoftmaxEntropy softmax_entropy(std::span<const double> losses);

// c_n = p_n (sum_j p_j log p_j - log p_n), so that grad H_s = sum_n c_n grad l_n.
// Evaluated as p_n (sum_j p_j L_j - L_n), which is the same quantity and is
// exactly zero when all losses are equal.
Vector entropy_coefficients(std::span<const double> losses);

Vector entropy_gradient(std::span<const Vector> group_grads, std::span<const double> losses);

enum class AtomRole { Group, Entropy };

struct GradientAtomSet {
  std::vector<Vector> atoms;
  Matrix gram;
  std::vector<AtomRole> roles;
  std::vector<std::size_t> group_index;  // source group for Group atoms

  std::size_t size() const { return atoms.size(); }
  // Throws when the Gram matrix is asymmetric, inconsistent with the atoms, or
  // has an eigenvalue below -1e-8.
  void validate() const;
};

// Builds atoms from the present groups' gradients plus, optionally, the
// negated entropy gradient. The entropy atom is skipped when it is exactly
// zero (uniform losses), since a zero atom makes the min-norm point zero.
GradientAtomSet build_atom_set(std::span<const Vector> group_grads, const std::vector<bool>& present,
                               const Vector& entropy_grad, bool include_entropy);

struct SimplexWeights {
  Vector w;
  std::size_t iterations = 0;
  std::vector<double> objective;  // w^T B w after every iteration, starting with w_0
};

struct FrankWolfeOptions {
  std::size_t max_iterations = 50;
  // Stop once w^T B w - min_v (B w)_v falls below this times the initial
  // objective.
  double gap_tolerance = 1e-12;
  // Also consider moving weight away from the worst active atom, which
  // converges linearly where the plain toward step zig-zags.
  bool away_steps = true;
};

// Min-norm point of the atoms' convex hull. Starts uniform; each step moves
// toward the vertex minimizing v^T B w (lowest index on ties) with exact line
// search, or with away steps enabled, away from the active vertex maximizing
// it when that gap is larger.
SimplexWeights frank_wolfe(const Matrix& gram, const FrankWolfeOptions& opts = {});
SimplexWeights frank_wolfe(const GradientAtomSet& atoms, std::size_t iterations, bool away_steps = true);

enum class DirectionMode { AllAtoms, GroupsRenormalized };

std::string to_string(DirectionMode m);
DirectionMode direction_mode_from_string(const std::string& s);

// Effective per-atom weights for a direction mode: AllAtoms returns w;
// GroupsRenormalized zeroes the entropy atom and renormalizes the rest.
Vector direction_weights(const GradientAtomSet& atoms, const Vector& w, DirectionMode mode);

Vector fair_direction(const GradientAtomSet& atoms, const SimplexWeights& w,
                      DirectionMode mode = DirectionMode::AllAtoms);

}  // namespace bifair
