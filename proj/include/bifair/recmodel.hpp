#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bifair/common.hpp"
#include "bifair/embed.hpp"

namespace bifair {

enum class ProjectorKind { Linear, Mlp2 };
enum class ScoreKind { Cosine, Dot };

std::string to_string(ProjectorKind k);
ProjectorKind projector_kind_from_string(const std::string& s);

struct ProjectorShape {
  ProjectorKind kind = ProjectorKind::Linear;
  std::size_t d_sem = 0;
  std::size_t d_rec = 0;
  std::size_t hidden = 0;  // Mlp2 only
  bool bias = false;

  std::size_t num_params() const;
  void validate() const;
};

// Offsets of each parameter block inside the flat vector. Linear uses only
// w1/b1 (d_sem x d_rec); Mlp2 is z -> tanh(z W1 + b1) W2 + b2.
struct ParamLayout {
  std::size_t w1 = 0, b1 = 0, w2 = 0, b2 = 0, total = 0;
  std::size_t w1_rows = 0, w1_cols = 0, w2_rows = 0, w2_cols = 0;
  explicit ParamLayout(const ProjectorShape& s);
};

// Trainable projector. All entries live in one flat vector so that optimizer
// and finite-difference arithmetic work on the whole parameter set at once.
struct ProjectorParams {
  ProjectorShape shape;
  Vector values;

  static ProjectorParams zeros(const ProjectorShape& shape);
  // Weights ~ uniform(+-1/sqrt(fan_in)) per layer, biases zero.
  static ProjectorParams init(const ProjectorShape& shape, std::uint64_t seed);

  Eigen::Map<const Matrix> w1() const;
  Eigen::Map<const Matrix> w2() const;
  Eigen::Map<const Vector> b1() const;
  Eigen::Map<const Vector> b2() const;
  Eigen::Map<Matrix> w1();
  Eigen::Map<Matrix> w2();
  Eigen::Map<Vector> b1();
  Eigen::Map<Vector> b2();
};

Vector project(const ProjectorParams& theta, const Vector& z);
// Row-wise projection of a matrix of semantic vectors.
Matrix project_rows(const ProjectorParams& theta, const Matrix& z);

// cosine(e_u, e_i) / tau; a zero vector scores 0.
double score(const Vector& e_u, const Vector& e_i, double tau, ScoreKind kind = ScoreKind::Cosine);

struct LossOptions {
  double temperature = 0.1;
  ScoreKind score = ScoreKind::Cosine;
  Pooling pooling = Pooling::Mean;
};

struct Batch {
  std::vector<Index> users;
  std::vector<Index> positives;
  std::size_t num_negatives = 0;
  std::vector<Index> negatives;  // pair-major, num_negatives per pair
  std::vector<Index> group_of_pair;

  std::size_t size() const { return users.size(); }
  std::span<const Index> negatives_of(std::size_t pair) const {
    return {negatives.data() + pair * num_negatives, num_negatives};
  }
  void validate(std::size_t num_users, std::size_t num_items) const;
};

// Gradient over the rows of Z a batch touches (positives, negatives and the
// history items of its users). Rows not listed are implicitly zero.
struct ZGrad {
  std::vector<Index> rows;
  Matrix values;  // rows.size() x d_sem

  Vector flat() const;
  static ZGrad from_flat(std::vector<Index> rows, const Vector& flat, std::size_t dim);
  Matrix dense(std::size_t num_items) const;
};

// One forward pass plus any number of weighted backward passes. Slot s
// back-propagates sum_p weights[s][p] * loss_p.
struct BatchPass {
  std::vector<double> pair_losses;
  double mean_loss = 0.0;
  std::vector<Index> z_rows;
  std::vector<Vector> theta_grads;  // one per slot when requested
  std::vector<Matrix> z_grads;      // one per slot when requested
};

BatchPass evaluate_batch(const ProjectorParams& theta, const Matrix& z, const ItemLists& histories,
                         const Batch& batch, const LossOptions& opts,
                         std::span<const std::vector<double>> slot_weights, bool want_theta,
                         bool want_z);

double infonce_loss(const ProjectorParams& theta, const Matrix& z, const ItemLists& histories,
                    const Batch& batch, const LossOptions& opts);
Vector loss_grad_theta(const ProjectorParams& theta, const Matrix& z, const ItemLists& histories,
                       const Batch& batch, const LossOptions& opts);
ZGrad loss_grad_z(const ProjectorParams& theta, const Matrix& z, const ItemLists& histories,
                  const Batch& batch, const LossOptions& opts);

}  // namespace bifair
