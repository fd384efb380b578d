#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "bifair/common.hpp"
#include "bifair/dataio.hpp"

namespace bifair {

// Generator for a biased interaction log. Items carry a latent topic (shared
// with synth_embeddings through the same seed) and a genre = topic % genres.
struct SyntheticConfig {
  std::size_t num_users = 1000;
  std::size_t num_items = 600;
  std::size_t num_topics = 8;
  std::size_t num_genres = 4;
  std::size_t d_sem = 32;
  std::size_t min_history = 24;
  std::size_t max_history = 44;
  std::size_t low_ratings = 3;   // extra ratings below 3 per user
  double zipf_exponent = 0.8;    // item popularity ~ 1 / rank^s
  double popularity_weight = 1.0;
  double preference_weight = 4.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticData {
  RawInteractions raw;
  std::vector<std::pair<std::string, std::string>> metadata;  // item key, genre label
};

std::string synthetic_user_key(std::size_t u);
std::string synthetic_item_key(std::size_t i);

SyntheticData generate_synthetic(const SyntheticConfig& cfg);

}  // namespace bifair
