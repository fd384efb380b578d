#include "bifair/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include "bifair/embed.hpp"

namespace bifair {

void SyntheticConfig::validate() const {
  if (num_users == 0 || num_items < 2) throw ConfigError("synth: need users and at least two items");
  if (num_topics == 0 || d_sem == 0) throw ConfigError("synth: num_topics and d_sem must be >= 1");
  if (num_genres == 0 || num_genres > num_topics) throw ConfigError("synth: num_genres must be in [1, num_topics]");
  if (min_history == 0 || min_history > max_history) throw ConfigError("synth: need 1 <= min_history <= max_history");
  if (max_history + low_ratings > num_items) throw ConfigError("synth: histories exceed the item count");
  if (!(zipf_exponent >= 0.0) || !(popularity_weight >= 0.0) || !(preference_weight >= 0.0)) {
    throw ConfigError("synth: weights must be >= 0");
  }
}

std::string synthetic_user_key(std::size_t u) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "u%05zu", u);
  return buf;
}

std::string synthetic_item_key(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "i%05zu", i);
  return buf;
}

SyntheticData generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(derive_seed(cfg.seed, seed_role::kBenchmark));
  const Matrix centers = topic_centers(cfg.num_topics, cfg.d_sem, cfg.seed);

  std::vector<std::size_t> topic(cfg.num_items);
  for (std::size_t i = 0; i < cfg.num_items; ++i) {
    topic[i] = latent_topic_of(synthetic_item_key(i), cfg.num_topics, cfg.seed);
  }
  std::vector<std::size_t> rank(cfg.num_items);
  std::iota(rank.begin(), rank.end(), 0);
  std::shuffle(rank.begin(), rank.end(), rng);
  std::vector<double> log_pop(cfg.num_items);
  for (std::size_t i = 0; i < cfg.num_items; ++i) {
    log_pop[i] = -cfg.zipf_exponent * std::log(static_cast<double>(rank[i]) + 1.0);
  }

  SyntheticData out;
  for (std::size_t i = 0; i < cfg.num_items; ++i) {
    out.metadata.emplace_back(synthetic_item_key(i), "genre" + std::to_string(topic[i] % cfg.num_genres));
  }

  std::uniform_int_distribution<std::size_t> hist_len(cfg.min_history, cfg.max_history);
  std::uniform_int_distribution<std::size_t> pick_topic(0, cfg.num_topics - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> key(cfg.num_items);
  std::vector<std::size_t> order(cfg.num_items);
  std::int64_t clock = 1'600'000'000;
  for (std::size_t u = 0; u < cfg.num_users; ++u) {
    Vector pref = centers.row(static_cast<Eigen::Index>(pick_topic(rng))).transpose();
    if (unit(rng) < 0.5) pref += centers.row(static_cast<Eigen::Index>(pick_topic(rng))).transpose();
    pref.normalize();
    // Gumbel-top-k: a draw without replacement with p_i ~ pop^a exp(b cos).
    for (std::size_t i = 0; i < cfg.num_items; ++i) {
      const double affinity = centers.row(static_cast<Eigen::Index>(topic[i])).dot(pref);
      const double gumbel = -std::log(-std::log(std::max(unit(rng), 1e-300)));
      key[i] = cfg.popularity_weight * log_pop[i] + cfg.preference_weight * affinity + gumbel;
    }
    std::iota(order.begin(), order.end(), 0);
    const std::size_t h = hist_len(rng);
    const std::size_t take = h + cfg.low_ratings;
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                      [&key](std::size_t a, std::size_t b) { return key[a] != key[b] ? key[a] > key[b] : a < b; });
    for (std::size_t k = 0; k < take; ++k) {
      Interaction r;
      r.user = synthetic_user_key(u);
      r.item = synthetic_item_key(order[k]);
      // The weakest matches are the ones the user disliked.
      r.rating = k < h ? static_cast<double>(3 + static_cast<int>(unit(rng) * 3.0) % 3) : (unit(rng) < 0.5 ? 1.0 : 2.0);
      clock += 1 + static_cast<std::int64_t>(unit(rng) * 3600.0);
      r.timestamp = clock;
      out.raw.records.push_back(std::move(r));
    }
  }
  return out;
}

}  // namespace bifair
