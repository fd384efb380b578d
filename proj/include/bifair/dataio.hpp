#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "bifair/common.hpp"

namespace bifair {

struct Interaction {
  std::string user;
  std::string item;
  double rating = 0.0;
  std::optional<std::int64_t> timestamp;
};

struct RawInteractions {
  std::vector<Interaction> records;
  std::size_t malformed_lines = 0;
  // (user,item) repeats collapsed to the maximum rating.
  std::size_t duplicates_collapsed = 0;
};

struct InteractionFormat {
  char delimiter = ',';
};

struct PreprocessConfig {
  double min_rating = 3.0;
  std::size_t min_user_interactions = 20;
  std::array<double, 3> split_ratio{4.0, 3.0, 3.0};
  double top_pop_fraction = 0.1;
  std::uint64_t seed = 0;
  // Order each user's interactions by timestamp instead of shuffling.
  bool temporal_split = false;
  // Repeat user filtering and item pruning until nothing changes.
  bool fixpoint_filter = false;

  void validate() const;
};

struct Dataset {
  std::size_t num_users = 0;
  std::size_t num_items = 0;
  ItemLists train;
  ItemLists val;
  ItemLists test;
  std::vector<std::string> user_keys;  // index -> external key
  std::vector<std::string> item_keys;
  std::unordered_map<std::string, Index> user_map;  // external key -> index
  std::unordered_map<std::string, Index> item_map;
  PreprocessConfig config;

  std::size_t num_train_interactions() const;
  // Throws if any Dataset invariant is broken.
  void validate() const;
  void rebuild_maps();
};

struct GroupAssignment {
  std::size_t num_groups = 0;
  std::vector<Index> group_of;      // item -> group
  std::vector<std::string> labels;  // group -> label

  std::vector<Index> members(Index group) const;
  std::vector<std::size_t> sizes() const;
  void validate(std::size_t num_items) const;
};

RawInteractions parse_interactions(std::istream& in, const InteractionFormat& fmt = {});
RawInteractions load_interactions(const std::filesystem::path& path,
                                  const InteractionFormat& fmt = {});
void write_interactions(const RawInteractions& raw, const std::filesystem::path& path);

Dataset preprocess(const RawInteractions& raw, const PreprocessConfig& cfg);

GroupAssignment assign_popularity_groups(const Dataset& ds, double top_fraction);

// item key -> label; multi-label fields ("a|b") keep the first label.
using ItemMetadata = std::unordered_map<std::string, std::string>;

ItemMetadata parse_metadata(std::istream& in);
ItemMetadata load_metadata(const std::filesystem::path& path);
void write_metadata(const std::vector<std::pair<std::string, std::string>>& rows,
                    const std::filesystem::path& path);

GroupAssignment assign_attribute_groups(const ItemMetadata& metadata, const Dataset& ds);

// Directory layout: meta.json plus split_{train,val,test}.csv.
void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace bifair
