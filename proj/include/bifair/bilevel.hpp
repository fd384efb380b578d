#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "bifair/common.hpp"
#include "bifair/dataio.hpp"
#include "bifair/embed.hpp"
#include "bifair/fairloss.hpp"
#include "bifair/recmodel.hpp"

namespace bifair {

enum class FairnessMode { Plain, BiFair, Reweight, GroupDro };
enum class InnerOptimizer { Sgd, Adam };
enum class Alternation { PerBatch, PerEpoch };

std::string to_string(FairnessMode m);
FairnessMode fairness_mode_from_string(const std::string& s);
std::string to_string(InnerOptimizer o);
InnerOptimizer inner_optimizer_from_string(const std::string& s);
std::string to_string(Alternation a);
Alternation alternation_from_string(const std::string& s);

struct TrainConfig {
  double inner_lr = 0.01;
  double outer_lr = 1e-3;
  std::optional<double> virtual_step;  // xi; defaults to inner_lr
  double fd_epsilon_scale = 0.01;
  std::size_t max_epochs = 500;
  std::size_t patience = 20;
  std::size_t batch_size = 4096;
  std::size_t num_negatives = 256;
  double temperature = 0.1;
  ScoreKind score = ScoreKind::Cosine;
  Pooling pooling = Pooling::Mean;

  ProjectorKind projector = ProjectorKind::Linear;
  std::size_t d_rec = 64;
  std::size_t hidden = 128;
  bool bias = false;

  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.1;
  double lr_decay_power = 0.9;

  FairnessMode fairness = FairnessMode::BiFair;
  DirectionMode direction = DirectionMode::AllAtoms;
  bool include_entropy = true;
  std::size_t fw_iterations = 50;
  bool fw_away_steps = true;
  double groupdro_step = 0.01;

  InnerOptimizer inner_optimizer = InnerOptimizer::Sgd;
  Alternation alternation = Alternation::PerBatch;
  bool train_z = true;
  bool separate = false;  // phase 1: theta with Z frozen; phase 2: Z with theta frozen
  bool stratified = true;
  bool exclude_history_negatives = false;
  std::size_t eval_k = 20;
  std::uint64_t seed = 0;

  double xi() const { return virtual_step.value_or(inner_lr); }
  LossOptions loss_options() const { return {temperature, score, pooling}; }
  ProjectorShape projector_shape(std::size_t d_sem) const;
  void validate() const;
};

nlohmann::ordered_json to_json(const TrainConfig& cfg);
// Missing keys keep their defaults; unknown keys raise ConfigError.
TrainConfig train_config_from_json(const nlohmann::json& j);

// Work counters for the gradient engine.
struct EvalCounters {
  std::size_t theta_evals = 0;
  std::size_t z_evals = 0;
  std::size_t forward_passes = 0;
};

struct GroupEval {
  std::vector<double> losses;       // mean loss per group, 0 where absent
  std::vector<std::size_t> counts;  // pairs per group
  std::vector<Vector> theta_grads;  // per group, when requested
  std::vector<Vector> z_grads;      // per group (flat touched rows), when requested
};

struct WeightedEval {
  std::vector<double> losses;
  std::vector<std::size_t> counts;
  Vector theta_grad;
  Vector z_grad;
};

// A batch objective split into per-group losses, viewed as a function of a
// flat theta with Z held fixed. Z-gradients are flat over a fixed row set.
class GroupedObjective {
 public:
  virtual ~GroupedObjective() = default;

  virtual std::size_t num_groups() const = 0;
  virtual std::size_t theta_dim() const = 0;
  virtual std::size_t z_dim() const = 0;
  // Pairs per group; fixed for the objective's lifetime.
  virtual std::vector<std::size_t> group_counts() const = 0;

  GroupEval group_gradients(const Vector& theta, bool want_theta, bool want_z);
  // Gradient of sum_n coeffs[n] * loss_n.
  WeightedEval weighted_gradient(const Vector& theta, std::span<const double> coeffs, bool want_theta,
                                 bool want_z);

  const EvalCounters& counters() const { return counters_; }
  void reset_counters() { counters_ = {}; }

 protected:
  virtual GroupEval do_group_gradients(const Vector& theta, bool want_theta, bool want_z) = 0;
  virtual WeightedEval do_weighted_gradient(const Vector& theta, std::span<const double> coeffs,
                                            bool want_theta, bool want_z) = 0;

 private:
  void count(bool want_theta, bool want_z);
  EvalCounters counters_;
};

// InfoNCE over one batch; group of a pair is the group of its positive item.
class InfoNceObjective : public GroupedObjective {
 public:
  InfoNceObjective(const ProjectorShape& shape, const Matrix& z, const ItemLists& histories, const Batch& batch,
                   std::size_t num_groups, const LossOptions& opts);

  std::size_t num_groups() const override { return num_groups_; }
  std::size_t theta_dim() const override { return shape_.num_params(); }
  std::size_t z_dim() const override { return rows_.size() * static_cast<std::size_t>(z_.cols()); }
  const std::vector<Index>& z_rows() const { return rows_; }
  std::vector<std::size_t> group_counts() const override { return counts_; }
  ZGrad to_zgrad(const Vector& flat) const;

 protected:
  GroupEval do_group_gradients(const Vector& theta, bool want_theta, bool want_z) override;
  WeightedEval do_weighted_gradient(const Vector& theta, std::span<const double> coeffs, bool want_theta,
                                    bool want_z) override;

 private:
  ProjectorParams params(const Vector& theta) const;

  ProjectorShape shape_;
  const Matrix& z_;
  const ItemLists& histories_;
  const Batch& batch_;
  std::size_t num_groups_;
  LossOptions opts_;
  std::vector<Index> rows_;
  std::vector<std::size_t> counts_;
};

struct FairnessRule {
  FairnessMode mode = FairnessMode::BiFair;
  DirectionMode direction = DirectionMode::AllAtoms;
  bool include_entropy = true;
  std::size_t fw_iterations = 50;
  bool fw_away_steps = true;
  std::vector<double> baseline_weights;  // reweight / groupdro, length N
  double groupdro_step = 0.01;
};

// Direction of one level: per-group coefficients a_n such that the update
// direction is sum_n a_n grad l_n.
struct LevelSolution {
  std::vector<double> coeffs;
  std::vector<double> losses;
  std::vector<std::size_t> counts;
  Vector theta_dir;
  Vector z_dir;
  std::optional<SimplexWeights> fw;
  std::vector<AtomRole> atom_roles;
  // Present groups whose gradient has a negative inner product with the
  // direction (bifair only).
  std::size_t constraint_violations = 0;
};

// Evaluates the level direction at theta. Under bifair the atoms are the
// present groups' gradients restricted to the requested blocks (theta, Z or
// both concatenated) plus the negated entropy gradient. When `update_dro` is
// set and the mode is groupdro, rule.baseline_weights is updated with this
// batch's losses before the direction is formed.
LevelSolution solve_level(GroupedObjective& obj, const Vector& theta, FairnessRule& rule, bool want_theta,
                          bool want_z, bool update_dro = false);

// (grad_z L_a(theta + eps v) - grad_z L_a(theta - eps v)) / (2 eps) with
// L_a = sum_n coeffs[n] loss_n.
Vector fd_second_order(GroupedObjective& obj, const Vector& theta, const Vector& v, std::span<const double> coeffs,
                       double eps);

struct Hypergradient {
  Vector z_grad;
  Vector virtual_theta;
  double epsilon = 0.0;
  LevelSolution virtual_level;
};

// theta is the current (post inner step) value. Costs two theta evaluations
// (at theta and theta') and three Z evaluations (theta', theta+, theta-).
Hypergradient outer_hypergradient(GroupedObjective& obj, const Vector& theta, FairnessRule& rule, double xi,
                                  double fd_epsilon_scale);

// theta - eta * d with d the level direction at theta.
ProjectorParams inner_step(const ProjectorParams& theta, const Matrix& z, const ItemLists& histories,
                           const Batch& batch, std::size_t num_groups, double eta, FairnessRule& rule,
                           const LossOptions& opts);

// Adam with decoupled weight decay over a flat vector.
class AdamW {
 public:
  AdamW(std::size_t dim, double beta1, double beta2, double eps, double weight_decay);
  void step(Vector& x, const Vector& grad, double lr);
  std::size_t steps() const { return t_; }

 private:
  Vector m_, v_;
  double b1_, b2_, eps_, wd_;
  std::size_t t_ = 0;
};

// Row-sparse AdamW over Z: only rows in the gradient have their moments
// advanced and their values decayed. Bias correction uses a global step.
class SparseRowAdamW {
 public:
  SparseRowAdamW(std::size_t rows, std::size_t cols, double beta1, double beta2, double eps, double weight_decay);
  void step(Matrix& z, const ZGrad& grad, double lr);
  std::size_t steps() const { return t_; }

 private:
  Matrix m_, v_;
  double b1_, b2_, eps_, wd_;
  std::size_t t_ = 0;
};

double polynomial_lr(double base, std::size_t iter, std::size_t max_iter, double power);

struct TrainPair {
  Index user;
  Index item;
};

// Mini-batch stream over the training pairs. Stratified mode tops every batch
// up to max(1, batch_size / (4N)) pairs per group from per-group reservoirs.
class BatchSampler {
 public:
  BatchSampler(const Dataset& ds, const GroupAssignment& groups, std::size_t batch_size,
               std::size_t num_negatives, bool stratified, bool exclude_history, std::uint64_t seed);

  std::vector<Batch> epoch();
  std::size_t batches_per_epoch() const;

 private:
  Index sample_negative(Index user, Index positive);
  Batch make_batch(std::vector<TrainPair> pairs);

  const Dataset& ds_;
  const GroupAssignment& groups_;
  std::size_t batch_size_;
  std::size_t num_negatives_;
  bool stratified_;
  bool exclude_history_;
  std::mt19937_64 rng_;
  std::vector<TrainPair> pairs_;
  std::vector<std::vector<TrainPair>> reservoirs_;
  std::vector<std::size_t> cursors_;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based, continuous across phases
  std::string phase;      // "joint", "theta" or "z"
  double train_loss = 0.0;
  double val_recall = 0.0;
  std::optional<double> val_cv;
  std::vector<double> group_losses;  // mean over batches where present
  std::vector<double> weights;       // mean inner-level group coefficients
  std::size_t theta_evals = 0;
  std::size_t z_evals = 0;
  std::size_t constraint_violations = 0;  // summed over inner-level solves
};

nlohmann::ordered_json to_json(const EpochRecord& r);

struct TrainedModel {
  ProjectorParams theta;
  SemanticMatrix z;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_recall = 0.0;
  std::string stop_reason;
  EvalCounters counters;
  std::size_t batches = 0;

  void validate() const;
};

double validation_recall(const ProjectorParams& theta, const Matrix& z, const Dataset& ds, std::size_t k,
                         const LossOptions& opts);

TrainedModel train(const Dataset& ds, const GroupAssignment& groups, const SemanticMatrix& z0,
                   const TrainConfig& cfg);

void save_checkpoint(const TrainedModel& model, const TrainConfig& cfg, const std::filesystem::path& dir);
// Restores theta, Z and history; `cfg` receives the stored training config.
TrainedModel load_checkpoint(const std::filesystem::path& dir, TrainConfig* cfg = nullptr);

}  // namespace bifair
