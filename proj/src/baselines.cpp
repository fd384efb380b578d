#include "bifair/baselines.hpp"

#include <cmath>
#include <numeric>

namespace bifair {

void BaselineWeights::validate() const {
  if (w.empty()) throw Error("baseline weights: empty");
  double sum = 0.0;
  for (double x : w) {
    if (!(x >= 0.0) || !std::isfinite(x)) throw Error("baseline weights: negative or non-finite entry");
    sum += x;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw Error("baseline weights: do not sum to 1");
}

BaselineWeights reweight_weights(const GroupAssignment& groups, const Dataset& ds) {
  groups.validate(ds.num_items);
  std::vector<double> counts(groups.num_groups, 0.0);
  for (const auto& items : ds.train) {
    for (Index i : items) counts[groups.group_of[i]] += 1.0;
  }
  BaselineWeights out;
  out.mode = "reweight";
  out.w.resize(groups.num_groups);
  double total = 0.0;
  for (std::size_t n = 0; n < counts.size(); ++n) {
    if (counts[n] == 0.0) throw Error("reweight: group '" + groups.labels[n] + "' has no training interactions");
    out.w[n] = 1.0 / counts[n];
    total += out.w[n];
  }
  for (double& x : out.w) x /= total;
  return out;
}

BaselineWeights groupdro_update(const BaselineWeights& w, const GroupLossVector& L, double step) {
  if (!(step > 0.0)) throw Error("groupdro step must be > 0");
  if (L.num_groups() != w.w.size()) throw Error("groupdro: loss vector length mismatch");
  BaselineWeights out = w;
  out.mode = "groupdro";
  double present_mass = 0.0;
  double max_loss = -INFINITY;
  for (std::size_t n = 0; n < w.w.size(); ++n) {
    if (!L.present(n)) continue;
    present_mass += w.w[n];
    max_loss = std::max(max_loss, L.losses[n]);
  }
  if (present_mass == 0.0) return out;
  // Shifting by the max loss leaves the normalized result unchanged.
  double updated = 0.0;
  for (std::size_t n = 0; n < w.w.size(); ++n) {
    if (!L.present(n)) continue;
    out.w[n] = w.w[n] * std::exp(step * (L.losses[n] - max_loss));
    updated += out.w[n];
  }
  for (std::size_t n = 0; n < w.w.size(); ++n) {
    if (L.present(n)) out.w[n] *= present_mass / updated;
  }
  return out;
}

TrainConfig baseline_config(TrainConfig cfg, FairnessMode mode, bool train_z) {
  if (mode == FairnessMode::BiFair) throw ConfigError("train_baseline: mode must be plain, reweight or groupdro");
  cfg.fairness = mode;
  cfg.train_z = train_z;
  return cfg;
}

TrainedModel train_baseline(const Dataset& ds, const GroupAssignment& groups, const SemanticMatrix& z0,
                            const TrainConfig& cfg, FairnessMode mode, bool train_z) {
  return train(ds, groups, z0, baseline_config(cfg, mode, train_z));
}

}  // namespace bifair
