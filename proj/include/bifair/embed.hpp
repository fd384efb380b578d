#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "bifair/common.hpp"
#include "bifair/dataio.hpp"

namespace bifair {

struct SemanticMatrix {
  Matrix z;  // one row per item
  bool normalized = false;

  std::size_t num_items() const { return static_cast<std::size_t>(z.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(z.cols()); }
  void validate() const;
};

enum class Pooling { Mean, Sum };

struct SynthEmbedConfig {
  std::size_t d_sem = 32;
  std::size_t num_latent_topics = 8;
  // Indexed by group: per-coordinate standard deviation of the noise added
  // to an item's topic center.
  std::vector<double> group_noise_scale;
  std::uint64_t seed = 0;
  // Seed of the topic centers and item->topic draw; defaults to `seed`. Set it
  // to the generator's seed to align embeddings with synthetic interactions.
  std::optional<std::uint64_t> topic_seed;

  void validate(std::size_t num_groups) const;
};

// Reads either the text or the BIFE binary layout (detected by magic).
SemanticMatrix load_embeddings(const std::filesystem::path& path, std::size_t expected_items,
                               bool normalize);
void save_embeddings(const SemanticMatrix& m, const std::filesystem::path& path, bool binary = true);

void normalize_rows(Matrix& z);

// Shared latent structure, also used by the synthetic interaction generator:
// topic centers are unit vectors drawn from `seed`; an item's topic is a
// stable hash of its key and the seed.
Matrix topic_centers(std::size_t num_topics, std::size_t dim, std::uint64_t seed);
std::size_t latent_topic_of(const std::string& item_key, std::size_t num_topics, std::uint64_t seed);

SemanticMatrix synth_embeddings(const Dataset& ds, const GroupAssignment& groups,
                                const SynthEmbedConfig& cfg);

// Pooled user vector from the current rows of `z`.
Vector user_representation(const Matrix& z, std::span<const Index> history,
                           Pooling pooling = Pooling::Mean);

}  // namespace bifair
