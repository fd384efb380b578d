#include "bifair/embed.hpp"

#include <cmath>
#include <random>

#include "bifair/blob.hpp"

namespace bifair {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace

void SemanticMatrix::validate() const {
  if (z.cols() == 0) throw Error("embeddings: dimension 0");
  if (!z.allFinite()) throw Error("embeddings: non-finite values");
  if (normalized) {
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      const double n = z.row(r).norm();
      if (n != 0.0 && std::abs(n - 1.0) > 1e-6) throw Error("embeddings: row not unit norm");
    }
  }
}

void SynthEmbedConfig::validate(std::size_t num_groups) const {
  if (d_sem == 0) throw ConfigError("d_sem must be > 0");
  if (num_latent_topics == 0) throw ConfigError("num_latent_topics must be > 0");
  if (group_noise_scale.size() < num_groups) {
    throw ConfigError("group_noise_scale needs one entry per group");
  }
  for (double s : group_noise_scale) {
    if (!std::isfinite(s) || s < 0.0) throw ConfigError("group noise scales must be finite and >= 0");
  }
}

void normalize_rows(Matrix& z) {
  std::size_t zero_rows = 0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const double n = z.row(r).norm();
    if (n > 0.0) {
      z.row(r) /= n;
    } else {
      ++zero_rows;
    }
  }
  if (zero_rows > 0) log_warn(std::to_string(zero_rows) + " zero embedding row(s) left unnormalized");
}

SemanticMatrix load_embeddings(const std::filesystem::path& path, std::size_t expected_items,
                               bool normalize) {
  if (!std::filesystem::exists(path)) throw Error("embedding file not found: " + path.string());
  SemanticMatrix m;
  m.z = is_blob_file(path) ? read_blob(path) : read_text_matrix(path);
  if (static_cast<std::size_t>(m.z.rows()) != expected_items) {
    throw Error("row-count mismatch: expected " + std::to_string(expected_items) + " rows, found " +
                std::to_string(m.z.rows()));
  }
  if (m.z.cols() == 0) throw Error("embeddings: dimension 0");
  if (!m.z.allFinite()) throw Error("embeddings: non-finite values");
  if (normalize) {
    normalize_rows(m.z);
    m.normalized = true;
  }
  return m;
}

void save_embeddings(const SemanticMatrix& m, const std::filesystem::path& path, bool binary) {
  if (binary) {
    write_blob(m.z, path);
  } else {
    write_text_matrix(m.z, path);
  }
}

Matrix topic_centers(std::size_t num_topics, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(splitmix64(seed ^ 0x746f70696373ULL));
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix c(num_topics, dim);
  for (std::size_t t = 0; t < num_topics; ++t) {
    for (std::size_t k = 0; k < dim; ++k) c(t, k) = normal(rng);
  }
  normalize_rows(c);
  return c;
}

std::size_t latent_topic_of(const std::string& item_key, std::size_t num_topics, std::uint64_t seed) {
  return static_cast<std::size_t>(splitmix64(fnv1a(item_key) ^ splitmix64(seed)) % num_topics);
}

SemanticMatrix synth_embeddings(const Dataset& ds, const GroupAssignment& groups,
                                const SynthEmbedConfig& cfg) {
  cfg.validate(groups.num_groups);
  groups.validate(ds.num_items);
  const std::uint64_t topic_seed = cfg.topic_seed.value_or(cfg.seed);
  const Matrix centers = topic_centers(cfg.num_latent_topics, cfg.d_sem, topic_seed);
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  SemanticMatrix m;
  m.z.resize(ds.num_items, cfg.d_sem);
  for (std::size_t i = 0; i < ds.num_items; ++i) {
    const auto topic = latent_topic_of(ds.item_keys[i], cfg.num_latent_topics, topic_seed);
    const double scale = cfg.group_noise_scale[groups.group_of[i]];
    for (std::size_t k = 0; k < cfg.d_sem; ++k) {
      m.z(i, k) = centers(topic, k) + scale * normal(rng);
    }
  }
  normalize_rows(m.z);
  m.normalized = true;
  return m;
}

Vector user_representation(const Matrix& z, std::span<const Index> history, Pooling pooling) {
  if (history.empty()) throw Error("user_representation: empty history");
  Vector acc = Vector::Zero(z.cols());
  for (Index i : history) {
    if (i >= z.rows()) throw Error("user_representation: item index out of range");
    acc += z.row(i).transpose();
  }
  if (pooling == Pooling::Mean) acc /= static_cast<double>(history.size());
  return acc;
}

}  // namespace bifair
