#include "bifair/dataio.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string_view>

#include "json.hpp"

namespace bifair {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::vector<std::string_view> split(std::string_view line, char delim) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(delim, start);
    if (pos == std::string_view::npos) {
      out.push_back(trim(line.substr(start)));
      break;
    }
    out.push_back(trim(line.substr(start, pos - start)));
    start = pos + 1;
  }
  return out;
}

std::optional<double> parse_double(std::string_view s) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

std::optional<std::int64_t> parse_int(std::string_view s) {
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

// Collapses repeated (user,item) records to the one with the highest rating,
// keeping the position of the first occurrence.
std::size_t collapse_duplicates(std::vector<Interaction>& records) {
  std::map<std::pair<std::string, std::string>, std::size_t> first;
  std::vector<Interaction> kept;
  kept.reserve(records.size());
  std::size_t collapsed = 0;
  for (auto& r : records) {
    auto key = std::make_pair(r.user, r.item);
    auto it = first.find(key);
    if (it == first.end()) {
      first.emplace(std::move(key), kept.size());
      kept.push_back(std::move(r));
      continue;
    }
    ++collapsed;
    auto& prev = kept[it->second];
    if (r.rating > prev.rating) {
      prev.rating = r.rating;
      prev.timestamp = r.timestamp;
    }
  }
  records = std::move(kept);
  return collapsed;
}

std::size_t floor_share(std::size_t n, double part, double total) {
  return static_cast<std::size_t>(std::floor(static_cast<double>(n) * part / total + 1e-9));
}

nlohmann::ordered_json config_to_json(const PreprocessConfig& cfg) {
  nlohmann::ordered_json j;
  j["min_rating"] = cfg.min_rating;
  j["min_user_interactions"] = cfg.min_user_interactions;
  j["split_ratio"] = cfg.split_ratio;
  j["top_pop_fraction"] = cfg.top_pop_fraction;
  j["seed"] = cfg.seed;
  j["temporal_split"] = cfg.temporal_split;
  j["fixpoint_filter"] = cfg.fixpoint_filter;
  return j;
}

PreprocessConfig config_from_json(const nlohmann::ordered_json& j) {
  PreprocessConfig cfg;
  cfg.min_rating = j.value("min_rating", cfg.min_rating);
  cfg.min_user_interactions = j.value("min_user_interactions", cfg.min_user_interactions);
  if (j.contains("split_ratio")) cfg.split_ratio = j["split_ratio"].get<std::array<double, 3>>();
  cfg.top_pop_fraction = j.value("top_pop_fraction", cfg.top_pop_fraction);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.temporal_split = j.value("temporal_split", cfg.temporal_split);
  cfg.fixpoint_filter = j.value("fixpoint_filter", cfg.fixpoint_filter);
  return cfg;
}

void write_split(const ItemLists& lists, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "user_idx,item_idx\n";
  for (std::size_t u = 0; u < lists.size(); ++u) {
    for (Index i : lists[u]) out << u << ',' << i << '\n';
  }
}

ItemLists read_split(const std::filesystem::path& path, std::size_t num_users) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  ItemLists lists(num_users);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto t = trim(line);
    if (t.empty() || (line_no == 1 && t.front() == 'u')) continue;
    auto fields = split(t, ',');
    auto u = fields.size() == 2 ? parse_int(fields[0]) : std::nullopt;
    auto i = fields.size() == 2 ? parse_int(fields[1]) : std::nullopt;
    if (!u || !i || *u < 0 || *i < 0 || static_cast<std::size_t>(*u) >= num_users) {
      throw Error(path.string() + ": malformed row at line " + std::to_string(line_no));
    }
    lists[*u].push_back(static_cast<Index>(*i));
  }
  for (auto& l : lists) std::sort(l.begin(), l.end());
  return lists;
}

}  // namespace

void PreprocessConfig::validate() const {
  if (!std::isfinite(min_rating)) throw ConfigError("min_rating must be finite");
  for (double r : split_ratio) {
    if (!(r > 0.0) || !std::isfinite(r)) throw ConfigError("split ratio entries must be > 0");
  }
  if (!(top_pop_fraction > 0.0 && top_pop_fraction <= 1.0)) {
    throw ConfigError("top_pop_fraction must be in (0, 1]");
  }
}

std::size_t Dataset::num_train_interactions() const {
  std::size_t n = 0;
  for (const auto& l : train) n += l.size();
  return n;
}

void Dataset::rebuild_maps() {
  user_map.clear();
  item_map.clear();
  for (std::size_t u = 0; u < user_keys.size(); ++u) user_map.emplace(user_keys[u], static_cast<Index>(u));
  for (std::size_t i = 0; i < item_keys.size(); ++i) item_map.emplace(item_keys[i], static_cast<Index>(i));
}

void Dataset::validate() const {
  if (train.size() != num_users || val.size() != num_users || test.size() != num_users) {
    throw Error("dataset: split list count differs from num_users");
  }
  std::vector<bool> in_train(num_items, false);
  auto check = [&](const ItemLists& lists, const char* name) {
    for (const auto& l : lists) {
      for (std::size_t k = 0; k < l.size(); ++k) {
        if (l[k] >= num_items) throw Error(std::string("dataset: item index out of range in ") + name);
        if (k > 0 && l[k] <= l[k - 1]) {
          throw Error(std::string("dataset: unsorted or duplicate pair in ") + name);
        }
      }
    }
  };
  check(train, "train");
  check(val, "val");
  check(test, "test");
  for (const auto& l : train) {
    if (l.empty()) throw Error("dataset: user without train items");
    for (Index i : l) in_train[i] = true;
  }
  for (const auto* lists : {&val, &test}) {
    for (const auto& l : *lists) {
      for (Index i : l) {
        if (!in_train[i]) throw Error("dataset: evaluation item absent from train");
      }
    }
  }
}

std::vector<Index> GroupAssignment::members(Index group) const {
  std::vector<Index> out;
  for (std::size_t i = 0; i < group_of.size(); ++i) {
    if (group_of[i] == group) out.push_back(static_cast<Index>(i));
  }
  return out;
}

std::vector<std::size_t> GroupAssignment::sizes() const {
  std::vector<std::size_t> out(num_groups, 0);
  for (Index g : group_of) ++out[g];
  return out;
}

void GroupAssignment::validate(std::size_t num_items) const {
  if (group_of.size() != num_items) throw Error("group assignment does not cover every item");
  if (labels.size() != num_groups) throw Error("group assignment label count mismatch");
  for (Index g : group_of) {
    if (g >= num_groups) throw Error("group index out of range");
  }
  for (std::size_t s : sizes()) {
    if (s == 0) throw Error("group assignment has an empty group");
  }
}

RawInteractions parse_interactions(std::istream& in, const InteractionFormat& fmt) {
  RawInteractions raw;
  std::string line;
  bool first_content_line = true;
  while (std::getline(in, line)) {
    auto t = trim(line);
    if (t.empty()) continue;
    auto fields = split(t, fmt.delimiter);
    const bool was_first = first_content_line;
    first_content_line = false;
    if (fields.size() < 3 || fields.size() > 4) {
      ++raw.malformed_lines;
      continue;
    }
    auto rating = parse_double(fields[2]);
    if (!rating) {
      // A non-numeric rating on the first line marks a header.
      if (!was_first) ++raw.malformed_lines;
      continue;
    }
    if (fields[0].empty() || fields[1].empty()) {
      ++raw.malformed_lines;
      continue;
    }
    Interaction rec{std::string(fields[0]), std::string(fields[1]), *rating, std::nullopt};
    if (fields.size() == 4 && !fields[3].empty()) {
      auto ts = parse_int(fields[3]);
      if (!ts) {
        ++raw.malformed_lines;
        continue;
      }
      rec.timestamp = *ts;
    }
    raw.records.push_back(std::move(rec));
  }
  raw.duplicates_collapsed = collapse_duplicates(raw.records);
  if (raw.records.empty()) throw Error("zero valid records");
  if (raw.malformed_lines > 0) {
    log_warn("skipped " + std::to_string(raw.malformed_lines) + " malformed interaction line(s)");
  }
  if (raw.duplicates_collapsed > 0) {
    log_warn("collapsed " + std::to_string(raw.duplicates_collapsed) +
             " duplicate (user,item) record(s) to their max rating");
  }
  return raw;
}

RawInteractions load_interactions(const std::filesystem::path& path, const InteractionFormat& fmt) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read interactions file " + path.string());
  return parse_interactions(in, fmt);
}

void write_interactions(const RawInteractions& raw, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "user,item,rating,timestamp\n";
  for (const auto& r : raw.records) {
    out << r.user << ',' << r.item << ',' << r.rating << ',';
    if (r.timestamp) out << *r.timestamp;
    out << '\n';
  }
}

Dataset preprocess(const RawInteractions& raw, const PreprocessConfig& cfg) {
  cfg.validate();
  if (raw.records.empty()) throw Error("preprocess: no interaction records");

  struct Entry {
    std::string item;
    double rating;
    std::int64_t timestamp;
  };
  // (1) rating filter, with duplicate collapse in case the caller built `raw` by hand.
  std::map<std::string, std::map<std::string, Entry>> by_user;
  for (const auto& r : raw.records) {
    if (r.rating < cfg.min_rating) continue;
    auto& items = by_user[r.user];
    auto [it, inserted] = items.emplace(r.item, Entry{r.item, r.rating, r.timestamp.value_or(0)});
    if (!inserted && r.rating > it->second.rating) it->second = Entry{r.item, r.rating, r.timestamp.value_or(0)};
  }

  // (2) drop light users.
  struct UserSplit {
    std::string key;
    std::vector<std::string> train, val, test;
  };
  std::vector<UserSplit> users;
  std::mt19937_64 rng(cfg.seed);
  const double total = cfg.split_ratio[0] + cfg.split_ratio[1] + cfg.split_ratio[2];
  for (auto& [user, items] : by_user) {
    if (items.size() < cfg.min_user_interactions) continue;
    std::vector<Entry> list;
    list.reserve(items.size());
    for (auto& [key, e] : items) list.push_back(e);
    // (3) per-user split; remainders go to train.
    if (cfg.temporal_split) {
      std::stable_sort(list.begin(), list.end(),
                       [](const Entry& a, const Entry& b) { return a.timestamp < b.timestamp; });
    } else {
      std::shuffle(list.begin(), list.end(), rng);
    }
    const std::size_t n = list.size();
    const std::size_t n_val = floor_share(n, cfg.split_ratio[1], total);
    const std::size_t n_test = floor_share(n, cfg.split_ratio[2], total);
    const std::size_t n_train = n - n_val - n_test;
    UserSplit s{user, {}, {}, {}};
    for (std::size_t k = 0; k < n; ++k) {
      auto& dst = k < n_train ? s.train : (k < n_train + n_val ? s.val : s.test);
      dst.push_back(list[k].item);
    }
    users.push_back(std::move(s));
  }

  // (4) prune evaluation items never seen in training.
  auto prune = [&users] {
    std::set<std::string> seen;
    for (const auto& u : users) seen.insert(u.train.begin(), u.train.end());
    for (auto& u : users) {
      auto unseen = [&seen](const std::string& i) { return !seen.count(i); };
      std::erase_if(u.val, unseen);
      std::erase_if(u.test, unseen);
    }
  };
  prune();
  if (cfg.fixpoint_filter) {
    while (true) {
      const auto before = users.size();
      std::erase_if(users, [&cfg](const UserSplit& u) {
        return u.train.size() + u.val.size() + u.test.size() < cfg.min_user_interactions;
      });
      if (users.size() == before) break;
      prune();
    }
  }
  if (users.empty()) throw Error("all users filtered out");

  // (5) dense ids, both in ascending key order.
  Dataset ds;
  ds.config = cfg;
  std::set<std::string> item_set;
  for (const auto& u : users) item_set.insert(u.train.begin(), u.train.end());
  ds.item_keys.assign(item_set.begin(), item_set.end());
  ds.num_items = ds.item_keys.size();
  ds.num_users = users.size();
  for (const auto& u : users) ds.user_keys.push_back(u.key);
  ds.rebuild_maps();
  auto to_indices = [&ds](const std::vector<std::string>& keys) {
    std::vector<Index> out;
    out.reserve(keys.size());
    for (const auto& k : keys) out.push_back(ds.item_map.at(k));
    std::sort(out.begin(), out.end());
    return out;
  };
  for (const auto& u : users) {
    ds.train.push_back(to_indices(u.train));
    ds.val.push_back(to_indices(u.val));
    ds.test.push_back(to_indices(u.test));
  }
  ds.validate();
  return ds;
}

GroupAssignment assign_popularity_groups(const Dataset& ds, double top_fraction) {
  if (!(top_fraction > 0.0 && top_fraction < 1.0)) {
    throw Error("popularity grouping needs 0 < top_fraction < 1");
  }
  std::vector<std::size_t> counts(ds.num_items, 0);
  for (const auto& l : ds.train) {
    for (Index i : l) ++counts[i];
  }
  std::vector<Index> order(ds.num_items);
  std::iota(order.begin(), order.end(), Index{0});
  std::sort(order.begin(), order.end(), [&counts](Index a, Index b) {
    return counts[a] != counts[b] ? counts[a] > counts[b] : a < b;
  });
  const auto head = static_cast<std::size_t>(
      std::ceil(top_fraction * static_cast<double>(ds.num_items) - 1e-9));
  if (head == 0 || head >= ds.num_items) {
    throw Error("popularity grouping would leave a group empty");
  }
  GroupAssignment g;
  g.num_groups = 2;
  g.labels = {"head", "tail"};
  g.group_of.assign(ds.num_items, 1);
  for (std::size_t k = 0; k < head; ++k) g.group_of[order[k]] = 0;
  return g;
}

ItemMetadata parse_metadata(std::istream& in) {
  ItemMetadata meta;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    auto t = trim(line);
    if (t.empty()) continue;
    auto fields = split(t, ',');
    if (first) {
      first = false;
      const auto head = lower(fields[0]);
      if (head == "item" || head == "item_id" || head == "item_key") continue;
    }
    if (fields[0].empty()) continue;
    std::string label = fields.size() > 1 ? std::string(trim(split(fields[1], '|')[0])) : "";
    if (label.empty()) label = "unknown";
    meta.emplace(std::string(fields[0]), std::move(label));
  }
  return meta;
}

ItemMetadata load_metadata(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read metadata file " + path.string());
  return parse_metadata(in);
}

void write_metadata(const std::vector<std::pair<std::string, std::string>>& rows,
                    const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "item,label\n";
  for (const auto& [item, label] : rows) out << item << ',' << label << '\n';
}

GroupAssignment assign_attribute_groups(const ItemMetadata& metadata, const Dataset& ds) {
  GroupAssignment g;
  std::unordered_map<std::string, Index> index_of;
  g.group_of.resize(ds.num_items);
  for (std::size_t i = 0; i < ds.num_items; ++i) {
    auto it = metadata.find(ds.item_keys[i]);
    const std::string& label = it == metadata.end() ? std::string("unknown") : it->second;
    auto [pos, inserted] = index_of.emplace(label, static_cast<Index>(g.labels.size()));
    if (inserted) g.labels.push_back(label);
    g.group_of[i] = pos->second;
  }
  g.num_groups = g.labels.size();
  if (g.num_groups == 1) log_warn("attribute grouping has a single group; fairness metrics are degenerate");
  return g;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json meta;
  meta["format"] = "bifair-dataset";
  meta["version"] = 1;
  meta["num_users"] = ds.num_users;
  meta["num_items"] = ds.num_items;
  meta["num_train"] = ds.num_train_interactions();
  meta["seed"] = ds.config.seed;
  meta["config"] = config_to_json(ds.config);
  meta["user_keys"] = ds.user_keys;
  meta["item_keys"] = ds.item_keys;
  std::ofstream out(dir / "meta.json");
  if (!out) throw Error("cannot write " + (dir / "meta.json").string());
  out << meta.dump(2) << '\n';
  write_split(ds.train, dir / "split_train.csv");
  write_split(ds.val, dir / "split_val.csv");
  write_split(ds.test, dir / "split_test.csv");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "meta.json");
  if (!in) throw Error("cannot read " + (dir / "meta.json").string());
  nlohmann::ordered_json meta;
  try {
    meta = nlohmann::ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error("meta.json: " + std::string(e.what()));
  }
  Dataset ds;
  ds.num_users = meta.at("num_users").get<std::size_t>();
  ds.num_items = meta.at("num_items").get<std::size_t>();
  ds.config = config_from_json(meta.at("config"));
  ds.user_keys = meta.at("user_keys").get<std::vector<std::string>>();
  ds.item_keys = meta.at("item_keys").get<std::vector<std::string>>();
  if (ds.user_keys.size() != ds.num_users || ds.item_keys.size() != ds.num_items) {
    throw Error("meta.json: id map sizes disagree with counts");
  }
  ds.rebuild_maps();
  ds.train = read_split(dir / "split_train.csv", ds.num_users);
  ds.val = read_split(dir / "split_val.csv", ds.num_users);
  ds.test = read_split(dir / "split_test.csv", ds.num_users);
  ds.validate();
  return ds;
}

}  // namespace bifair
