#pragma once

#include <string>
#include <vector>

#include "bifair/bilevel.hpp"
#include "bifair/dataio.hpp"
#include "bifair/fairloss.hpp"

namespace bifair {

struct BaselineWeights {
  std::vector<double> w;  // on the simplex
  std::string mode;

  void validate() const;
};

// w_n proportional to 1 / (training interactions whose item is in group n).
BaselineWeights reweight_weights(const GroupAssignment& groups, const Dataset& ds);

// Exponentiated-gradient step w_n <- w_n exp(step L_n), renormalized over the
// groups present in L. Absent groups keep their weight.
BaselineWeights groupdro_update(const BaselineWeights& w, const GroupLossVector& L, double step);

// bilevel::train with the baseline direction. Z stays frozen unless
// cfg.train_z is set by the caller after `baseline_config`.
TrainConfig baseline_config(TrainConfig cfg, FairnessMode mode, bool train_z = false);
TrainedModel train_baseline(const Dataset& ds, const GroupAssignment& groups, const SemanticMatrix& z0,
                            const TrainConfig& cfg, FairnessMode mode, bool train_z = false);

}  // namespace bifair
