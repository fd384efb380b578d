#include "bifair/bilevel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "bifair/baselines.hpp"
#include "bifair/blob.hpp"
#include "bifair/evalmetrics.hpp"

namespace bifair {

using nlohmann::json;
using nlohmann::ordered_json;

std::string to_string(FairnessMode m) {
  switch (m) {
    case FairnessMode::Plain: return "plain";
    case FairnessMode::BiFair: return "bifair";
    case FairnessMode::Reweight: return "reweight";
    case FairnessMode::GroupDro: return "groupdro";
  }
  return "bifair";
}

FairnessMode fairness_mode_from_string(const std::string& s) {
  if (s == "plain") return FairnessMode::Plain;
  if (s == "bifair") return FairnessMode::BiFair;
  if (s == "reweight") return FairnessMode::Reweight;
  if (s == "groupdro") return FairnessMode::GroupDro;
  throw ConfigError("unknown fairness mode '" + s + "'");
}

std::string to_string(InnerOptimizer o) { return o == InnerOptimizer::Sgd ? "sgd" : "adam"; }

InnerOptimizer inner_optimizer_from_string(const std::string& s) {
  if (s == "sgd") return InnerOptimizer::Sgd;
  if (s == "adam") return InnerOptimizer::Adam;
  throw ConfigError("unknown inner optimizer '" + s + "'");
}

std::string to_string(Alternation a) { return a == Alternation::PerBatch ? "batch" : "epoch"; }

Alternation alternation_from_string(const std::string& s) {
  if (s == "batch") return Alternation::PerBatch;
  if (s == "epoch") return Alternation::PerEpoch;
  throw ConfigError("unknown alternation '" + s + "'");
}

ProjectorShape TrainConfig::projector_shape(std::size_t d_sem) const {
  ProjectorShape s;
  s.kind = projector;
  s.d_sem = d_sem;
  s.d_rec = d_rec;
  s.hidden = projector == ProjectorKind::Mlp2 ? hidden : 0;
  s.bias = bias;
  return s;
}

void TrainConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string(name) + " must be > 0");
  };
  auto at_least_one = [](std::size_t v, const char* name) {
    if (v < 1) throw ConfigError(std::string(name) + " must be >= 1");
  };
  positive(inner_lr, "inner_lr");
  positive(outer_lr, "outer_lr");
  if (virtual_step && (!(*virtual_step >= 0.0) || !std::isfinite(*virtual_step))) {
    throw ConfigError("virtual_step must be >= 0");
  }
  positive(fd_epsilon_scale, "fd_epsilon_scale");
  positive(temperature, "temperature");
  positive(adam_eps, "adam_eps");
  positive(groupdro_step, "groupdro_step");
  at_least_one(max_epochs, "max_epochs");
  at_least_one(patience, "patience");
  at_least_one(batch_size, "batch_size");
  at_least_one(num_negatives, "num_negatives");
  at_least_one(fw_iterations, "fw_iterations");
  at_least_one(eval_k, "eval_k");
  at_least_one(d_rec, "d_rec");
  if (projector == ProjectorKind::Mlp2) at_least_one(hidden, "hidden");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1 must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta2 must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (!(lr_decay_power >= 0.0)) throw ConfigError("lr_decay_power must be >= 0");
}

ordered_json to_json(const TrainConfig& c) {
  ordered_json j;
  j["inner_lr"] = c.inner_lr;
  j["outer_lr"] = c.outer_lr;
  j["virtual_step"] = c.xi();
  j["fd_epsilon_scale"] = c.fd_epsilon_scale;
  j["max_epochs"] = c.max_epochs;
  j["patience"] = c.patience;
  j["batch_size"] = c.batch_size;
  j["num_negatives"] = c.num_negatives;
  j["temperature"] = c.temperature;
  j["score"] = c.score == ScoreKind::Cosine ? "cosine" : "dot";
  j["pooling"] = c.pooling == Pooling::Mean ? "mean" : "sum";
  j["projector"] = to_string(c.projector);
  j["d_rec"] = c.d_rec;
  j["hidden"] = c.hidden;
  j["bias"] = c.bias;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["adam_eps"] = c.adam_eps;
  j["weight_decay"] = c.weight_decay;
  j["lr_decay_power"] = c.lr_decay_power;
  j["fairness"] = to_string(c.fairness);
  j["direction"] = to_string(c.direction);
  j["include_entropy"] = c.include_entropy;
  j["fw_iterations"] = c.fw_iterations;
  j["fw_away_steps"] = c.fw_away_steps;
  j["groupdro_step"] = c.groupdro_step;
  j["inner_optimizer"] = to_string(c.inner_optimizer);
  j["alternation"] = to_string(c.alternation);
  j["train_z"] = c.train_z;
  j["separate"] = c.separate;
  j["stratified"] = c.stratified;
  j["exclude_history_negatives"] = c.exclude_history_negatives;
  j["eval_k"] = c.eval_k;
  j["seed"] = c.seed;
  return j;
}

namespace {

template <typename T>
T get_as(const json& v, const std::string& key) {
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw ConfigError("train." + key + " has the wrong type");
  }
}

std::size_t get_count(const json& v, const std::string& key) {
  if (v.is_number_integer() && v.get<long long>() < 0) throw ConfigError(key + " must be >= 0");
  if (!v.is_number_unsigned() && !v.is_number_integer()) throw ConfigError("train." + key + " must be an integer");
  return v.get<std::size_t>();
}

}  // namespace

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  if (!j.is_object()) throw ConfigError("train config must be an object");
  for (const auto& [key, v] : j.items()) {
    if (key == "inner_lr") c.inner_lr = get_as<double>(v, key);
    else if (key == "outer_lr") c.outer_lr = get_as<double>(v, key);
    else if (key == "virtual_step") {
      if (!v.is_null()) c.virtual_step = get_as<double>(v, key);
    } else if (key == "fd_epsilon_scale") c.fd_epsilon_scale = get_as<double>(v, key);
    else if (key == "max_epochs") c.max_epochs = get_count(v, key);
    else if (key == "patience") c.patience = get_count(v, key);
    else if (key == "batch_size") c.batch_size = get_count(v, key);
    else if (key == "num_negatives") c.num_negatives = get_count(v, key);
    else if (key == "temperature") c.temperature = get_as<double>(v, key);
    else if (key == "score") {
      const auto s = get_as<std::string>(v, key);
      if (s != "cosine" && s != "dot") throw ConfigError("unknown score '" + s + "'");
      c.score = s == "cosine" ? ScoreKind::Cosine : ScoreKind::Dot;
    } else if (key == "pooling") {
      const auto s = get_as<std::string>(v, key);
      if (s != "mean" && s != "sum") throw ConfigError("unknown pooling '" + s + "'");
      c.pooling = s == "mean" ? Pooling::Mean : Pooling::Sum;
    } else if (key == "projector") c.projector = projector_kind_from_string(get_as<std::string>(v, key));
    else if (key == "d_rec") c.d_rec = get_count(v, key);
    else if (key == "hidden") c.hidden = get_count(v, key);
    else if (key == "bias") c.bias = get_as<bool>(v, key);
    else if (key == "beta1") c.beta1 = get_as<double>(v, key);
    else if (key == "beta2") c.beta2 = get_as<double>(v, key);
    else if (key == "adam_eps") c.adam_eps = get_as<double>(v, key);
    else if (key == "weight_decay") c.weight_decay = get_as<double>(v, key);
    else if (key == "lr_decay_power") c.lr_decay_power = get_as<double>(v, key);
    else if (key == "fairness") c.fairness = fairness_mode_from_string(get_as<std::string>(v, key));
    else if (key == "direction") c.direction = direction_mode_from_string(get_as<std::string>(v, key));
    else if (key == "include_entropy") c.include_entropy = get_as<bool>(v, key);
    else if (key == "fw_iterations") c.fw_iterations = get_count(v, key);
    else if (key == "fw_away_steps") c.fw_away_steps = get_as<bool>(v, key);
    else if (key == "groupdro_step") c.groupdro_step = get_as<double>(v, key);
    else if (key == "inner_optimizer") c.inner_optimizer = inner_optimizer_from_string(get_as<std::string>(v, key));
    else if (key == "alternation") c.alternation = alternation_from_string(get_as<std::string>(v, key));
    else if (key == "train_z") c.train_z = get_as<bool>(v, key);
    else if (key == "separate") c.separate = get_as<bool>(v, key);
    else if (key == "stratified") c.stratified = get_as<bool>(v, key);
    else if (key == "exclude_history_negatives") c.exclude_history_negatives = get_as<bool>(v, key);
    else if (key == "eval_k") c.eval_k = get_count(v, key);
    else if (key == "seed") c.seed = get_as<std::uint64_t>(v, key);
    else throw ConfigError("unknown train option '" + key + "'");
  }
  return c;
}

// ---------------------------------------------------------------------------
// Objectives

void GroupedObjective::count(bool want_theta, bool want_z) {
  ++counters_.forward_passes;
  if (want_theta) ++counters_.theta_evals;
  if (want_z) ++counters_.z_evals;
}

GroupEval GroupedObjective::group_gradients(const Vector& theta, bool want_theta, bool want_z) {
  count(want_theta, want_z);
  return do_group_gradients(theta, want_theta, want_z);
}

WeightedEval GroupedObjective::weighted_gradient(const Vector& theta, std::span<const double> coeffs,
                                                 bool want_theta, bool want_z) {
  if (coeffs.size() != num_groups()) throw Error("weighted_gradient: coefficient length mismatch");
  count(want_theta, want_z);
  return do_weighted_gradient(theta, coeffs, want_theta, want_z);
}

InfoNceObjective::InfoNceObjective(const ProjectorShape& shape, const Matrix& z, const ItemLists& histories,
                                   const Batch& batch, std::size_t num_groups, const LossOptions& opts)
    : shape_(shape), z_(z), histories_(histories), batch_(batch), num_groups_(num_groups), opts_(opts) {
  if (batch.size() == 0) throw Error("empty batch");
  if (batch.group_of_pair.size() != batch.size()) throw Error("objective: batch lacks group labels");
  counts_.assign(num_groups, 0);
  for (Index g : batch.group_of_pair) {
    if (g >= num_groups) throw Error("objective: group index out of range");
    ++counts_[g];
  }
  std::vector<Index> rows = batch.positives;
  rows.insert(rows.end(), batch.negatives.begin(), batch.negatives.end());
  for (Index u : batch.users) rows.insert(rows.end(), histories[u].begin(), histories[u].end());
  std::sort(rows.begin(), rows.end());
  rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
  rows_ = std::move(rows);
}

ProjectorParams InfoNceObjective::params(const Vector& theta) const {
  if (static_cast<std::size_t>(theta.size()) != shape_.num_params()) throw Error("objective: theta length mismatch");
  ProjectorParams p;
  p.shape = shape_;
  p.values = theta;
  return p;
}

ZGrad InfoNceObjective::to_zgrad(const Vector& flat) const {
  return ZGrad::from_flat(rows_, flat, static_cast<std::size_t>(z_.cols()));
}

namespace {

Vector flatten(const Matrix& m) { return Eigen::Map<const Vector>(m.data(), m.size()); }

}  // namespace

GroupEval InfoNceObjective::do_group_gradients(const Vector& theta, bool want_theta, bool want_z) {
  const std::size_t P = batch_.size();
  std::vector<std::vector<double>> slots;
  std::vector<std::size_t> slot_group;
  if (want_theta || want_z) {
    for (std::size_t n = 0; n < num_groups_; ++n) {
      if (counts_[n] == 0) continue;
      std::vector<double> w(P, 0.0);
      const double inv = 1.0 / static_cast<double>(counts_[n]);
      for (std::size_t p = 0; p < P; ++p) {
        if (batch_.group_of_pair[p] == n) w[p] = inv;
      }
      slots.push_back(std::move(w));
      slot_group.push_back(n);
    }
  }
  const auto pass = evaluate_batch(params(theta), z_, histories_, batch_, opts_, slots, want_theta, want_z);
  GroupEval out;
  const auto gl = group_losses_from_pairs(pass.pair_losses, batch_.group_of_pair, num_groups_);
  out.losses = gl.losses;
  out.counts = gl.counts;
  if (want_theta) out.theta_grads.assign(num_groups_, Vector::Zero(static_cast<Eigen::Index>(theta_dim())));
  if (want_z) {
    if (pass.z_rows != rows_) throw Error("objective: touched rows changed");
    out.z_grads.assign(num_groups_, Vector::Zero(static_cast<Eigen::Index>(z_dim())));
  }
  for (std::size_t s = 0; s < slot_group.size(); ++s) {
    if (want_theta) out.theta_grads[slot_group[s]] = pass.theta_grads[s];
    if (want_z) out.z_grads[slot_group[s]] = flatten(pass.z_grads[s]);
  }
  return out;
}

WeightedEval InfoNceObjective::do_weighted_gradient(const Vector& theta, std::span<const double> coeffs,
                                                    bool want_theta, bool want_z) {
  const std::size_t P = batch_.size();
  std::vector<std::vector<double>> slots;
  if (want_theta || want_z) {
    std::vector<double> w(P, 0.0);
    for (std::size_t p = 0; p < P; ++p) {
      const Index g = batch_.group_of_pair[p];
      w[p] = coeffs[g] / static_cast<double>(counts_[g]);
    }
    slots.push_back(std::move(w));
  }
  const auto pass = evaluate_batch(params(theta), z_, histories_, batch_, opts_, slots, want_theta, want_z);
  WeightedEval out;
  const auto gl = group_losses_from_pairs(pass.pair_losses, batch_.group_of_pair, num_groups_);
  out.losses = gl.losses;
  out.counts = gl.counts;
  if (want_theta) out.theta_grad = pass.theta_grads.front();
  if (want_z) {
    if (pass.z_rows != rows_) throw Error("objective: touched rows changed");
    out.z_grad = flatten(pass.z_grads.front());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Level directions

namespace {

Vector concat_blocks(const GroupEval& ge, std::size_t n, bool want_theta, bool want_z) {
  const Eigen::Index dt = want_theta ? ge.theta_grads[n].size() : 0;
  const Eigen::Index dz = want_z ? ge.z_grads[n].size() : 0;
  Vector v(dt + dz);
  if (want_theta) v.head(dt) = ge.theta_grads[n];
  if (want_z) v.tail(dz) = ge.z_grads[n];
  return v;
}

std::vector<double> fixed_coeffs(const FairnessRule& rule, const std::vector<std::size_t>& counts) {
  const std::size_t N = counts.size();
  std::vector<double> a(N, 0.0);
  const double total = static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
  switch (rule.mode) {
    case FairnessMode::Plain:
      for (std::size_t n = 0; n < N; ++n) a[n] = static_cast<double>(counts[n]) / total;
      break;
    case FairnessMode::Reweight: {
      // Per-sample importance weights w_{g(p)}, normalized over the batch.
      double mass = 0.0;
      for (std::size_t n = 0; n < N; ++n) mass += rule.baseline_weights[n] * static_cast<double>(counts[n]);
      for (std::size_t n = 0; n < N; ++n) a[n] = rule.baseline_weights[n] * static_cast<double>(counts[n]) / mass;
      break;
    }
    case FairnessMode::GroupDro:
      for (std::size_t n = 0; n < N; ++n) a[n] = counts[n] > 0 ? rule.baseline_weights[n] : 0.0;
      break;
    case FairnessMode::BiFair:
      throw Error("fixed_coeffs: bifair coefficients depend on gradients");
  }
  return a;
}

}  // namespace

LevelSolution solve_level(GroupedObjective& obj, const Vector& theta, FairnessRule& rule, bool want_theta,
                          bool want_z, bool update_dro) {
  const std::size_t N = obj.num_groups();
  if (rule.mode != FairnessMode::Plain && rule.mode != FairnessMode::BiFair && rule.baseline_weights.size() != N) {
    throw Error("solve_level: baseline weights length mismatch");
  }
  LevelSolution out;
  const bool dro_update = rule.mode == FairnessMode::GroupDro && update_dro;
  if (rule.mode != FairnessMode::BiFair && !dro_update) {
    // Coefficients depend only on group counts, so one weighted pass suffices.
    std::vector<double> a = fixed_coeffs(rule, obj.group_counts());
    auto we = obj.weighted_gradient(theta, a, want_theta, want_z);
    out.coeffs = std::move(a);
    out.losses = std::move(we.losses);
    out.counts = std::move(we.counts);
    out.theta_dir = std::move(we.theta_grad);
    out.z_dir = std::move(we.z_grad);
    return out;
  }

  const GroupEval ge = obj.group_gradients(theta, want_theta, want_z);
  out.losses = ge.losses;
  out.counts = ge.counts;
  std::vector<double> a(N, 0.0);
  if (rule.mode == FairnessMode::GroupDro) {
    GroupLossVector L{ge.losses, ge.counts};
    BaselineWeights w{rule.baseline_weights, "groupdro"};
    rule.baseline_weights = groupdro_update(w, L, rule.groupdro_step).w;
    a = fixed_coeffs(rule, ge.counts);
  } else {
    std::vector<Vector> grads(N);
    std::vector<bool> present(N, false);
    std::vector<std::size_t> present_idx;
    std::vector<double> present_losses;
    for (std::size_t n = 0; n < N; ++n) {
      grads[n] = concat_blocks(ge, n, want_theta, want_z);
      present[n] = ge.counts[n] > 0;
      if (present[n]) {
        present_idx.push_back(n);
        present_losses.push_back(ge.losses[n]);
      }
    }
    const Vector c_present = entropy_coefficients(present_losses);
    Vector c = Vector::Zero(static_cast<Eigen::Index>(N));
    Vector entropy_grad = Vector::Zero(grads.front().size());
    for (std::size_t k = 0; k < present_idx.size(); ++k) {
      c[static_cast<Eigen::Index>(present_idx[k])] = c_present[static_cast<Eigen::Index>(k)];
      entropy_grad += c_present[static_cast<Eigen::Index>(k)] * grads[present_idx[k]];
    }
    const GradientAtomSet atoms = build_atom_set(grads, present, entropy_grad, rule.include_entropy);
    FrankWolfeOptions fo;
    fo.max_iterations = rule.fw_iterations;
    fo.away_steps = rule.fw_away_steps;
    SimplexWeights fw = frank_wolfe(atoms.gram, fo);
    const Vector dw = direction_weights(atoms, fw.w, rule.direction);
    for (std::size_t m = 0; m < atoms.size(); ++m) {
      const double wm = dw[static_cast<Eigen::Index>(m)];
      if (atoms.roles[m] == AtomRole::Group) {
        a[atoms.group_index[m]] += wm;
      } else {
        // The entropy atom is -sum_n c_n grad l_n.
        for (std::size_t n = 0; n < N; ++n) a[n] -= wm * c[static_cast<Eigen::Index>(n)];
      }
    }
    const Vector support = atoms.gram * dw;
    const double dnorm2 = dw.dot(support);
    for (std::size_t m = 0; m < atoms.size(); ++m) {
      if (atoms.roles[m] == AtomRole::Group && dnorm2 > 0.0 && support[static_cast<Eigen::Index>(m)] < 0.0) {
        ++out.constraint_violations;
      }
    }
    out.fw = std::move(fw);
    out.atom_roles = atoms.roles;
  }
  if (want_theta) {
    out.theta_dir = Vector::Zero(static_cast<Eigen::Index>(obj.theta_dim()));
    for (std::size_t n = 0; n < N; ++n) out.theta_dir += a[n] * ge.theta_grads[n];
  }
  if (want_z) {
    out.z_dir = Vector::Zero(static_cast<Eigen::Index>(obj.z_dim()));
    for (std::size_t n = 0; n < N; ++n) out.z_dir += a[n] * ge.z_grads[n];
  }
  out.coeffs = std::move(a);
  return out;
}

Vector fd_second_order(GroupedObjective& obj, const Vector& theta, const Vector& v, std::span<const double> coeffs,
                       double eps) {
  if (!(eps > 0.0) || !std::isfinite(eps)) throw Error("fd_second_order: epsilon must be > 0");
  if (v.size() != theta.size()) throw Error("fd_second_order: direction length mismatch");
  const Vector plus = theta + eps * v;
  const Vector minus = theta - eps * v;
  const Vector gp = obj.weighted_gradient(plus, coeffs, false, true).z_grad;
  const Vector gm = obj.weighted_gradient(minus, coeffs, false, true).z_grad;
  return (gp - gm) / (2.0 * eps);
}

Hypergradient outer_hypergradient(GroupedObjective& obj, const Vector& theta, FairnessRule& rule, double xi,
                                  double fd_epsilon_scale) {
  if (!(fd_epsilon_scale > 0.0)) throw Error("fd_epsilon_scale must be > 0");
  if (!(xi >= 0.0)) throw Error("virtual step must be >= 0");
  Hypergradient out;
  if (xi == 0.0) {
    // First-order mode: theta' = theta and the correction vanishes.
    out.virtual_theta = theta;
    out.virtual_level = solve_level(obj, theta, rule, true, true);
    out.z_grad = out.virtual_level.z_dir;
    return out;
  }
  const LevelSolution at_theta = solve_level(obj, theta, rule, true, false);
  out.virtual_theta = theta - xi * at_theta.theta_dir;
  out.virtual_level = solve_level(obj, out.virtual_theta, rule, true, true);
  const Vector& g_theta = out.virtual_level.theta_dir;
  const double norm = g_theta.norm();
  out.epsilon = norm > 0.0 ? fd_epsilon_scale / norm : fd_epsilon_scale;
  const Vector fd = fd_second_order(obj, theta, g_theta, out.virtual_level.coeffs, out.epsilon);
  out.z_grad = out.virtual_level.z_dir - xi * fd;
  return out;
}

ProjectorParams inner_step(const ProjectorParams& theta, const Matrix& z, const ItemLists& histories,
                           const Batch& batch, std::size_t num_groups, double eta, FairnessRule& rule,
                           const LossOptions& opts) {
  if (batch.size() == 0) throw Error("empty batch");
  InfoNceObjective obj(theta.shape, z, histories, batch, num_groups, opts);
  const LevelSolution lvl = solve_level(obj, theta.values, rule, true, false, true);
  ProjectorParams next = theta;
  next.values -= eta * lvl.theta_dir;
  return next;
}

// ---------------------------------------------------------------------------
// Optimizers

AdamW::AdamW(std::size_t dim, double beta1, double beta2, double eps, double weight_decay)
    : m_(Vector::Zero(static_cast<Eigen::Index>(dim))),
      v_(Vector::Zero(static_cast<Eigen::Index>(dim))),
      b1_(beta1),
      b2_(beta2),
      eps_(eps),
      wd_(weight_decay) {}

void AdamW::step(Vector& x, const Vector& grad, double lr) {
  if (grad.size() != m_.size() || x.size() != m_.size()) throw Error("AdamW: dimension mismatch");
  ++t_;
  m_ = b1_ * m_ + (1.0 - b1_) * grad;
  v_ = b2_ * v_ + (1.0 - b2_) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  x *= 1.0 - lr * wd_;
  x.array() -= lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
}

SparseRowAdamW::SparseRowAdamW(std::size_t rows, std::size_t cols, double beta1, double beta2, double eps,
                               double weight_decay)
    : m_(Matrix::Zero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols))),
      v_(Matrix::Zero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols))),
      b1_(beta1),
      b2_(beta2),
      eps_(eps),
      wd_(weight_decay) {}

void SparseRowAdamW::step(Matrix& z, const ZGrad& grad, double lr) {
  if (z.rows() != m_.rows() || z.cols() != m_.cols() || grad.values.cols() != z.cols()) {
    throw Error("SparseRowAdamW: dimension mismatch");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < grad.rows.size(); ++k) {
    const Index r = grad.rows[k];
    const auto g = grad.values.row(static_cast<Eigen::Index>(k));
    m_.row(r) = b1_ * m_.row(r) + (1.0 - b1_) * g;
    v_.row(r) = b2_ * v_.row(r) + (1.0 - b2_) * g.cwiseProduct(g);
    z.row(r) *= 1.0 - lr * wd_;
    z.row(r).array() -= lr * (m_.row(r).array() / c1) / ((v_.row(r).array() / c2).sqrt() + eps_);
  }
}

double polynomial_lr(double base, std::size_t iter, std::size_t max_iter, double power) {
  if (max_iter == 0) return base;
  const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(max_iter);
  return base * std::pow(std::max(0.0, frac), power);
}

// ---------------------------------------------------------------------------
// Batching

BatchSampler::BatchSampler(const Dataset& ds, const GroupAssignment& groups, std::size_t batch_size,
                           std::size_t num_negatives, bool stratified, bool exclude_history, std::uint64_t seed)
    : ds_(ds),
      groups_(groups),
      batch_size_(batch_size),
      num_negatives_(num_negatives),
      stratified_(stratified),
      exclude_history_(exclude_history),
      rng_(seed) {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (ds.num_items < 2) throw Error("sampler: need at least two items for negatives");
  reservoirs_.resize(groups.num_groups);
  for (std::size_t u = 0; u < ds.num_users; ++u) {
    for (Index i : ds.train[u]) {
      pairs_.push_back({static_cast<Index>(u), i});
      reservoirs_[groups.group_of[i]].push_back({static_cast<Index>(u), i});
    }
  }
  if (pairs_.empty()) throw Error("sampler: no training pairs");
  for (auto& r : reservoirs_) std::shuffle(r.begin(), r.end(), rng_);
  cursors_.assign(groups.num_groups, 0);
}

std::size_t BatchSampler::batches_per_epoch() const { return (pairs_.size() + batch_size_ - 1) / batch_size_; }

Index BatchSampler::sample_negative(Index user, Index positive) {
  const auto n = static_cast<std::uint64_t>(ds_.num_items);
  auto draw = [&] {
    std::uniform_int_distribution<std::uint64_t> dist(0, n - 2);
    auto r = static_cast<Index>(dist(rng_));
    if (r >= positive) ++r;
    return r;
  };
  if (!exclude_history_) return draw();
  const auto& hist = ds_.train[user];
  for (int attempt = 0; attempt < 64; ++attempt) {
    const Index r = draw();
    if (!std::binary_search(hist.begin(), hist.end(), r)) return r;
  }
  return draw();
}

Batch BatchSampler::make_batch(std::vector<TrainPair> pairs) {
  Batch b;
  b.num_negatives = num_negatives_;
  b.users.reserve(pairs.size());
  b.positives.reserve(pairs.size());
  b.negatives.reserve(pairs.size() * num_negatives_);
  for (const auto& p : pairs) {
    b.users.push_back(p.user);
    b.positives.push_back(p.item);
    b.group_of_pair.push_back(groups_.group_of[p.item]);
    for (std::size_t k = 0; k < num_negatives_; ++k) b.negatives.push_back(sample_negative(p.user, p.item));
  }
  return b;
}

std::vector<Batch> BatchSampler::epoch() {
  std::shuffle(pairs_.begin(), pairs_.end(), rng_);
  const std::size_t N = groups_.num_groups;
  const std::size_t min_per = std::max<std::size_t>(1, batch_size_ / (4 * N));
  std::vector<Batch> out;
  for (std::size_t start = 0; start < pairs_.size(); start += batch_size_) {
    const std::size_t end = std::min(pairs_.size(), start + batch_size_);
    std::vector<TrainPair> chunk(pairs_.begin() + static_cast<std::ptrdiff_t>(start),
                                 pairs_.begin() + static_cast<std::ptrdiff_t>(end));
    if (stratified_) {
      std::vector<std::size_t> have(N, 0);
      for (const auto& p : chunk) ++have[groups_.group_of[p.item]];
      for (std::size_t n = 0; n < N; ++n) {
        auto& res = reservoirs_[n];
        if (res.empty()) continue;
        while (have[n] < min_per) {
          if (cursors_[n] == res.size()) {
            std::shuffle(res.begin(), res.end(), rng_);
            cursors_[n] = 0;
          }
          chunk.push_back(res[cursors_[n]++]);
          ++have[n];
        }
      }
    }
    out.push_back(make_batch(std::move(chunk)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

ordered_json to_json(const EpochRecord& r) {
  ordered_json j;
  j["epoch"] = r.epoch;
  j["phase"] = r.phase;
  j["train_loss"] = r.train_loss;
  j["val_recall"] = r.val_recall;
  j["val_cv"] = r.val_cv ? ordered_json(*r.val_cv) : ordered_json(nullptr);
  j["group_losses"] = r.group_losses;
  j["weights"] = r.weights;
  j["theta_evals"] = r.theta_evals;
  j["z_evals"] = r.z_evals;
  j["constraint_violations"] = r.constraint_violations;
  return j;
}

void TrainedModel::validate() const {
  if (history.empty()) throw Error("trained model: empty history");
  if (!theta.values.allFinite() || !z.z.allFinite()) throw Error("trained model: non-finite parameters");
}

double validation_recall(const ProjectorParams& theta, const Matrix& z, const Dataset& ds, std::size_t k,
                         const LossOptions& opts) {
  const auto ranking = rank_topk(theta, z, ds, k, MaskPolicy::Train, opts);
  return overall_metrics(ranking, ds.val).recall;
}

namespace {

struct ValResult {
  double recall = 0.0;
  std::optional<double> cv;
};

ValResult validate_epoch(const ProjectorParams& theta, const Matrix& z, const Dataset& ds,
                         const GroupAssignment& groups, std::size_t k, const LossOptions& opts) {
  const auto ranking = rank_topk(theta, z, ds, k, MaskPolicy::Train, opts);
  ValResult r;
  r.recall = overall_metrics(ranking, ds.val).recall;
  const auto util = group_utilities(ranking, ds.val, groups, MetricKind::Recall);
  const auto values = util.defined_values();
  if (values.size() >= 2) {
    try {
      r.cv = cv(values);
    } catch (const Error&) {
    }
  }
  return r;
}

struct EpochAccumulator {
  explicit EpochAccumulator(std::size_t n)
      : loss_sum(n, 0.0), loss_batches(n, 0), weight_sum(n, 0.0) {}

  void add(const LevelSolution& lvl) {
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t n = 0; n < lvl.losses.size(); ++n) {
      total += lvl.losses[n] * static_cast<double>(lvl.counts[n]);
      pairs += lvl.counts[n];
      if (lvl.counts[n] > 0) {
        loss_sum[n] += lvl.losses[n];
        ++loss_batches[n];
      }
      weight_sum[n] += lvl.coeffs[n];
    }
    const double mean = total / static_cast<double>(pairs);
    if (!std::isfinite(mean)) throw Error("training diverged: non-finite loss");
    violations += lvl.constraint_violations;
    batch_loss_sum += mean;
    ++batches;
  }

  std::vector<double> loss_sum;
  std::vector<std::size_t> loss_batches;
  std::vector<double> weight_sum;
  double batch_loss_sum = 0.0;
  std::size_t batches = 0;
  std::size_t violations = 0;
};

void add_counters(EvalCounters& into, const EvalCounters& c) {
  into.theta_evals += c.theta_evals;
  into.z_evals += c.z_evals;
  into.forward_passes += c.forward_passes;
}

struct Phase {
  std::string name;
  bool update_theta;
  bool update_z;
};

}  // namespace

TrainedModel train(const Dataset& ds, const GroupAssignment& groups, const SemanticMatrix& z0,
                   const TrainConfig& cfg) {
  cfg.validate();
  ds.validate();
  groups.validate(ds.num_items);
  z0.validate();
  if (z0.num_items() != ds.num_items) throw Error("train: Z row count differs from item count");
  const std::size_t N = groups.num_groups;
  const LossOptions opts = cfg.loss_options();
  const ProjectorShape shape = cfg.projector_shape(z0.dim());
  shape.validate();

  ProjectorParams theta = ProjectorParams::init(shape, derive_seed(cfg.seed, seed_role::kProjectorInit));
  Matrix z = z0.z;

  FairnessRule rule;
  rule.mode = cfg.fairness;
  rule.direction = cfg.direction;
  rule.include_entropy = cfg.include_entropy;
  rule.fw_iterations = cfg.fw_iterations;
  rule.fw_away_steps = cfg.fw_away_steps;
  rule.groupdro_step = cfg.groupdro_step;
  if (cfg.fairness == FairnessMode::Reweight) rule.baseline_weights = reweight_weights(groups, ds).w;
  if (cfg.fairness == FairnessMode::GroupDro) rule.baseline_weights.assign(N, 1.0 / static_cast<double>(N));

  BatchSampler sampler(ds, groups, cfg.batch_size, cfg.num_negatives, cfg.stratified,
                       cfg.exclude_history_negatives, derive_seed(cfg.seed, seed_role::kBatching));

  std::vector<Phase> phases;
  if (cfg.separate) {
    phases = {{"theta", true, false}, {"z", false, true}};
  } else {
    phases = {{"joint", true, cfg.train_z}};
  }

  TrainedModel model;
  model.theta = theta;
  model.z = z0;
  model.best_val_recall = -1.0;
  std::size_t epoch_no = 0;
  const std::size_t max_iter = cfg.max_epochs * sampler.batches_per_epoch();

  for (const Phase& phase : phases) {
    if (phase.name == "z") {
      // Continue from the phase-1 best checkpoint.
      theta = model.theta;
      z = model.z.z;
    }
    AdamW inner_adam(shape.num_params(), cfg.beta1, cfg.beta2, cfg.adam_eps, 0.0);
    SparseRowAdamW outer(ds.num_items, z0.dim(), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    std::size_t iter = 0;
    std::size_t since_best = 0;
    std::string stop = "max_epochs";
    for (std::size_t e = 0; e < cfg.max_epochs; ++e) {
      ++epoch_no;
      EpochAccumulator acc(N);
      EvalCounters epoch_counters;
      const std::vector<Batch> batches = sampler.epoch();
      const bool deferred_outer = phase.update_theta && phase.update_z && cfg.alternation == Alternation::PerEpoch;
      std::vector<double> lr_scales;
      for (const Batch& batch : batches) {
        const double scale = polynomial_lr(1.0, iter, max_iter, cfg.lr_decay_power);
        lr_scales.push_back(scale);
        InfoNceObjective obj(shape, z, ds.train, batch, N, opts);
        if (phase.update_theta) {
          const LevelSolution lvl = solve_level(obj, theta.values, rule, true, false, true);
          acc.add(lvl);
          if (cfg.inner_optimizer == InnerOptimizer::Sgd) {
            theta.values -= cfg.inner_lr * scale * lvl.theta_dir;
          } else {
            inner_adam.step(theta.values, lvl.theta_dir, cfg.inner_lr * scale);
          }
          if (!theta.values.allFinite()) throw Error("training diverged: non-finite projector parameters");
        }
        if (phase.update_z && !deferred_outer) {
          const double xi = phase.update_theta ? cfg.xi() : 0.0;
          const Hypergradient hg = outer_hypergradient(obj, theta.values, rule, xi, cfg.fd_epsilon_scale);
          if (!phase.update_theta) acc.add(hg.virtual_level);
          outer.step(z, obj.to_zgrad(hg.z_grad), cfg.outer_lr * scale);
          if (!z.allFinite()) throw Error("training diverged: non-finite representations");
        }
        add_counters(epoch_counters, obj.counters());
        ++iter;
        ++model.batches;
      }
      if (deferred_outer) {
        for (std::size_t b = 0; b < batches.size(); ++b) {
          InfoNceObjective obj(shape, z, ds.train, batches[b], N, opts);
          const Hypergradient hg = outer_hypergradient(obj, theta.values, rule, cfg.xi(), cfg.fd_epsilon_scale);
          outer.step(z, obj.to_zgrad(hg.z_grad), cfg.outer_lr * lr_scales[b]);
          if (!z.allFinite()) throw Error("training diverged: non-finite representations");
          add_counters(epoch_counters, obj.counters());
        }
      }
      add_counters(model.counters, epoch_counters);

      const ValResult val = validate_epoch(theta, z, ds, groups, cfg.eval_k, opts);
      EpochRecord rec;
      rec.epoch = epoch_no;
      rec.phase = phase.name;
      rec.train_loss = acc.batch_loss_sum / static_cast<double>(acc.batches);
      rec.val_recall = val.recall;
      rec.val_cv = val.cv;
      rec.group_losses.resize(N);
      rec.weights.resize(N);
      for (std::size_t n = 0; n < N; ++n) {
        rec.group_losses[n] = acc.loss_batches[n] ? acc.loss_sum[n] / static_cast<double>(acc.loss_batches[n]) : 0.0;
        rec.weights[n] = acc.weight_sum[n] / static_cast<double>(acc.batches);
      }
      rec.theta_evals = epoch_counters.theta_evals;
      rec.z_evals = epoch_counters.z_evals;
      rec.constraint_violations = acc.violations;
      model.history.push_back(rec);
      log_debug("epoch " + std::to_string(epoch_no) + " loss " + std::to_string(rec.train_loss) + " val_recall " +
                std::to_string(rec.val_recall));

      if (val.recall > model.best_val_recall) {
        model.best_val_recall = val.recall;
        model.best_epoch = epoch_no;
        model.theta = theta;
        model.z.z = z;
        since_best = 0;
      } else if (++since_best >= cfg.patience) {
        stop = "early_stopping";
        break;
      }
    }
    model.stop_reason = stop;
  }
  model.z.normalized = false;
  model.validate();
  return model;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const TrainedModel& model, const TrainConfig& cfg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  ordered_json m;
  m["format"] = "bifair-checkpoint";
  m["version"] = 1;
  m["projector"] = {{"kind", to_string(model.theta.shape.kind)},
                    {"d_sem", model.theta.shape.d_sem},
                    {"d_rec", model.theta.shape.d_rec},
                    {"hidden", model.theta.shape.hidden},
                    {"bias", model.theta.shape.bias}};
  m["num_items"] = model.z.num_items();
  m["epochs_run"] = model.history.size();
  m["best_epoch"] = model.best_epoch;
  m["best_val_recall"] = model.best_val_recall;
  m["stop_reason"] = model.stop_reason;
  m["counters"] = {{"batches", model.batches},
                   {"theta_evals", model.counters.theta_evals},
                   {"z_evals", model.counters.z_evals},
                   {"forward_passes", model.counters.forward_passes}};
  m["train"] = to_json(cfg);
  {
    std::ofstream out(dir / "model.json");
    if (!out) throw Error("cannot write " + (dir / "model.json").string());
    out << m.dump(2) << '\n';
  }
  Matrix theta_row = Eigen::Map<const Matrix>(model.theta.values.data(), 1, model.theta.values.size());
  write_blob(theta_row, dir / "theta.bin", BlobPrecision::Float64);
  write_blob(model.z.z, dir / "Z.bin", BlobPrecision::Float64);
  std::ofstream hist(dir / "history.jsonl");
  if (!hist) throw Error("cannot write " + (dir / "history.jsonl").string());
  for (const auto& r : model.history) hist << to_json(r).dump() << '\n';
}

TrainedModel load_checkpoint(const std::filesystem::path& dir, TrainConfig* cfg) {
  std::ifstream in(dir / "model.json");
  if (!in) throw Error("checkpoint: missing " + (dir / "model.json").string());
  json m;
  try {
    m = json::parse(in);
  } catch (const json::exception& e) {
    throw Error("checkpoint: malformed model.json: " + std::string(e.what()));
  }
  if (m.value("format", "") != "bifair-checkpoint") throw Error("checkpoint: unrecognized format");
  TrainedModel model;
  const auto& p = m.at("projector");
  ProjectorShape shape;
  shape.kind = projector_kind_from_string(p.at("kind").get<std::string>());
  shape.d_sem = p.at("d_sem").get<std::size_t>();
  shape.d_rec = p.at("d_rec").get<std::size_t>();
  shape.hidden = p.at("hidden").get<std::size_t>();
  shape.bias = p.at("bias").get<bool>();
  shape.validate();
  const Matrix theta_row = read_blob(dir / "theta.bin");
  if (static_cast<std::size_t>(theta_row.size()) != shape.num_params()) {
    throw Error("checkpoint: theta size does not match projector shape");
  }
  model.theta.shape = shape;
  model.theta.values = Eigen::Map<const Vector>(theta_row.data(), theta_row.size());
  model.z.z = read_blob(dir / "Z.bin");
  if (static_cast<std::size_t>(model.z.z.cols()) != shape.d_sem) throw Error("checkpoint: Z width mismatch");
  model.best_epoch = m.value("best_epoch", std::size_t{0});
  model.best_val_recall = m.value("best_val_recall", 0.0);
  model.stop_reason = m.value("stop_reason", "");
  if (m.contains("counters")) {
    const auto& c = m["counters"];
    model.batches = c.value("batches", std::size_t{0});
    model.counters.theta_evals = c.value("theta_evals", std::size_t{0});
    model.counters.z_evals = c.value("z_evals", std::size_t{0});
    model.counters.forward_passes = c.value("forward_passes", std::size_t{0});
  }
  if (cfg != nullptr) *cfg = train_config_from_json(m.at("train"));
  std::ifstream hist(dir / "history.jsonl");
  std::string line;
  while (std::getline(hist, line)) {
    if (line.empty()) continue;
    const json r = json::parse(line);
    EpochRecord rec;
    rec.epoch = r.at("epoch").get<std::size_t>();
    rec.phase = r.at("phase").get<std::string>();
    rec.train_loss = r.at("train_loss").get<double>();
    rec.val_recall = r.at("val_recall").get<double>();
    if (!r.at("val_cv").is_null()) rec.val_cv = r.at("val_cv").get<double>();
    rec.group_losses = r.at("group_losses").get<std::vector<double>>();
    rec.weights = r.at("weights").get<std::vector<double>>();
    rec.theta_evals = r.at("theta_evals").get<std::size_t>();
    rec.z_evals = r.at("z_evals").get<std::size_t>();
    rec.constraint_violations = r.value("constraint_violations", std::size_t{0});
    model.history.push_back(std::move(rec));
  }
  model.validate();
  return model;
}

}  // namespace bifair
