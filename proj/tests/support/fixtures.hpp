#pragma once

#include <algorithm>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "bifair/dataio.hpp"
#include "bifair/embed.hpp"
#include "bifair/recmodel.hpp"

namespace fixture {

using bifair::Index;

// Dataset from explicit per-user lists. Keys are "u<k>" and "i<k>".
inline bifair::Dataset make_dataset(std::size_t num_items, bifair::ItemLists train, bifair::ItemLists val = {},
                                    bifair::ItemLists test = {}) {
  bifair::Dataset ds;
  ds.num_users = train.size();
  ds.num_items = num_items;
  val.resize(train.size());
  test.resize(train.size());
  for (auto* lists : {&train, &val, &test}) {
    for (auto& l : *lists) std::sort(l.begin(), l.end());
  }
  ds.train = std::move(train);
  ds.val = std::move(val);
  ds.test = std::move(test);
  for (std::size_t u = 0; u < ds.num_users; ++u) ds.user_keys.push_back("u" + std::to_string(u));
  for (std::size_t i = 0; i < num_items; ++i) ds.item_keys.push_back("i" + std::to_string(i));
  ds.rebuild_maps();
  return ds;
}

inline bifair::Matrix random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  bifair::Matrix m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) m(r, c) = normal(rng);
  }
  return m;
}

// Random histories (1..max_hist distinct items per user).
inline bifair::ItemLists random_histories(std::mt19937_64& rng, std::size_t users, std::size_t items,
                                          std::size_t max_hist) {
  bifair::ItemLists h(users);
  for (auto& l : h) {
    std::vector<Index> all(items);
    for (std::size_t i = 0; i < items; ++i) all[i] = static_cast<Index>(i);
    std::shuffle(all.begin(), all.end(), rng);
    const std::size_t k = 1 + rng() % std::min(max_hist, items);
    l.assign(all.begin(), all.begin() + static_cast<long>(k));
    std::sort(l.begin(), l.end());
  }
  return h;
}

// Random batch: pairs over random users, negatives distinct from the positive.
inline bifair::Batch random_batch(std::mt19937_64& rng, std::size_t users, std::size_t items, std::size_t pairs,
                                  std::size_t negatives, std::size_t groups = 1) {
  bifair::Batch b;
  b.num_negatives = negatives;
  for (std::size_t p = 0; p < pairs; ++p) {
    const auto u = static_cast<Index>(rng() % users);
    const auto pos = static_cast<Index>(rng() % items);
    b.users.push_back(u);
    b.positives.push_back(pos);
    b.group_of_pair.push_back(static_cast<Index>(pos % groups));
    for (std::size_t k = 0; k < negatives; ++k) {
      Index neg;
      do {
        neg = static_cast<Index>(rng() % items);
      } while (neg == pos);
      b.negatives.push_back(neg);
    }
  }
  return b;
}

inline bifair::ProjectorShape shape(bifair::ProjectorKind kind, std::size_t d_sem, std::size_t d_rec,
                                    std::size_t hidden = 0, bool bias = false) {
  bifair::ProjectorShape s;
  s.kind = kind;
  s.d_sem = d_sem;
  s.d_rec = d_rec;
  s.hidden = hidden;
  s.bias = bias;
  return s;
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("bifair_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace fixture
