#include "bifair/evalmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace bifair {

std::string to_string(MetricKind k) {
  switch (k) {
    case MetricKind::Recall: return "recall";
    case MetricKind::Ndcg: return "ndcg";
    case MetricKind::Hr: return "hr";
  }
  return "recall";
}

MetricKind metric_kind_from_string(const std::string& s) {
  if (s == "recall") return MetricKind::Recall;
  if (s == "ndcg") return MetricKind::Ndcg;
  if (s == "hr") return MetricKind::Hr;
  throw ConfigError("unknown metric '" + s + "'");
}

std::string to_string(UtilityAveraging a) {
  return a == UtilityAveraging::ExcludeEmpty ? "exclude_empty" : "all_users";
}

UtilityAveraging utility_averaging_from_string(const std::string& s) {
  if (s == "exclude_empty") return UtilityAveraging::ExcludeEmpty;
  if (s == "all_users") return UtilityAveraging::AllUsers;
  throw ConfigError("unknown utility averaging '" + s + "'");
}

std::vector<Index> topk_from_scores(std::span<const double> scores, std::size_t k,
                                    std::span<const Index> masked) {
  std::vector<Index> cand;
  cand.reserve(scores.size());
  auto mask_it = masked.begin();
  for (std::size_t i = 0; i < scores.size(); ++i) {
    while (mask_it != masked.end() && *mask_it < i) ++mask_it;
    if (mask_it != masked.end() && *mask_it == i) continue;
    cand.push_back(static_cast<Index>(i));
  }
  const std::size_t n = std::min(k, cand.size());
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(n), cand.end(),
                    [&scores](Index a, Index b) { return scores[a] != scores[b] ? scores[a] > scores[b] : a < b; });
  cand.resize(n);
  return cand;
}

RankingResult rank_topk(const ProjectorParams& theta, const Matrix& z, const Dataset& ds, std::size_t k,
                        MaskPolicy mask, const LossOptions& opts) {
  if (!z.allFinite() || !theta.values.allFinite()) throw Error("rank_topk: model has non-finite entries");
  Matrix items = project_rows(theta, z);
  if (opts.score == ScoreKind::Cosine) {
    for (Eigen::Index r = 0; r < items.rows(); ++r) {
      const double n = items.row(r).norm();
      if (n > 0.0) items.row(r) /= n;
    }
  }
  RankingResult out;
  out.k = k;
  out.lists.resize(ds.num_users);
  constexpr std::size_t kChunk = 256;
  std::vector<Index> masked;
  for (std::size_t start = 0; start < ds.num_users; start += kChunk) {
    const std::size_t end = std::min(ds.num_users, start + kChunk);
    Matrix pooled(static_cast<Eigen::Index>(end - start), z.cols());
    for (std::size_t u = start; u < end; ++u) {
      pooled.row(static_cast<Eigen::Index>(u - start)) = user_representation(z, ds.train[u], opts.pooling).transpose();
    }
    Matrix users = project_rows(theta, pooled);
    if (opts.score == ScoreKind::Cosine) {
      for (Eigen::Index r = 0; r < users.rows(); ++r) {
        const double n = users.row(r).norm();
        if (n > 0.0) users.row(r) /= n;
      }
    }
    const Matrix scores = users * items.transpose() / opts.temperature;
    for (std::size_t u = start; u < end; ++u) {
      masked.clear();
      if (mask != MaskPolicy::None) masked = ds.train[u];
      if (mask == MaskPolicy::TrainVal) {
        masked.insert(masked.end(), ds.val[u].begin(), ds.val[u].end());
        std::sort(masked.begin(), masked.end());
      }
      const auto row = static_cast<Eigen::Index>(u - start);
      out.lists[u] = topk_from_scores({scores.row(row).data(), static_cast<std::size_t>(scores.cols())}, k, masked);
    }
  }
  return out;
}

namespace {

bool contains(std::span<const Index> sorted, Index x) { return std::binary_search(sorted.begin(), sorted.end(), x); }

double discount(std::size_t rank0) { return 1.0 / std::log2(static_cast<double>(rank0) + 2.0); }

double ideal_dcg(std::size_t n) {
  double s = 0.0;
  for (std::size_t r = 0; r < n; ++r) s += discount(r);
  return s;
}

}  // namespace

std::size_t hit_count(std::span<const Index> topk, std::span<const Index> relevant) {
  std::size_t hits = 0;
  for (Index i : topk) hits += contains(relevant, i) ? 1 : 0;
  return hits;
}

double recall_at_k(std::span<const Index> topk, std::span<const Index> relevant) {
  if (relevant.empty()) throw Error("recall_at_k: empty relevant set");
  return static_cast<double>(hit_count(topk, relevant)) / static_cast<double>(relevant.size());
}

double ndcg_at_k(std::span<const Index> topk, std::span<const Index> relevant, std::size_t k) {
  if (relevant.empty()) throw Error("ndcg_at_k: empty relevant set");
  if (k == 0) k = topk.size();
  double dcg = 0.0;
  for (std::size_t r = 0; r < topk.size(); ++r) {
    if (contains(relevant, topk[r])) dcg += discount(r);
  }
  const double idcg = ideal_dcg(std::min(k, relevant.size()));
  return idcg > 0.0 ? dcg / idcg : 0.0;
}

double hr_at_k(std::span<const Index> topk, std::span<const Index> relevant) {
  if (relevant.empty()) throw Error("hr_at_k: empty relevant set");
  return hit_count(topk, relevant) > 0 ? 1.0 : 0.0;
}

std::size_t group_hit_count(std::span<const Index> topk, std::span<const Index> relevant,
                            const GroupAssignment& groups, Index group) {
  std::size_t hits = 0;
  for (Index i : topk) hits += (groups.group_of[i] == group && contains(relevant, i)) ? 1 : 0;
  return hits;
}

std::optional<double> user_group_utility(std::span<const Index> topk, std::span<const Index> relevant,
                                         const GroupAssignment& groups, Index group, MetricKind metric,
                                         std::size_t k) {
  std::size_t rel_in_group = 0;
  for (Index i : relevant) rel_in_group += groups.group_of[i] == group ? 1 : 0;
  if (rel_in_group == 0) return std::nullopt;
  if (k == 0) k = topk.size();
  std::size_t hits = 0;
  double dcg = 0.0;
  for (std::size_t r = 0; r < topk.size(); ++r) {
    if (groups.group_of[topk[r]] == group && contains(relevant, topk[r])) {
      ++hits;
      dcg += discount(r);
    }
  }
  switch (metric) {
    case MetricKind::Recall: return static_cast<double>(hits) / static_cast<double>(rel_in_group);
    case MetricKind::Ndcg: return dcg / ideal_dcg(std::min(k, rel_in_group));
    case MetricKind::Hr: return hits > 0 ? 1.0 : 0.0;
  }
  return std::nullopt;
}

MetricSet overall_metrics(const RankingResult& ranking, const ItemLists& relevant) {
  MetricSet m;
  for (std::size_t u = 0; u < ranking.lists.size(); ++u) {
    if (relevant[u].empty()) continue;
    m.recall += recall_at_k(ranking.lists[u], relevant[u]);
    m.ndcg += ndcg_at_k(ranking.lists[u], relevant[u], ranking.k);
    m.hr += hr_at_k(ranking.lists[u], relevant[u]);
    ++m.users;
  }
  if (m.users > 0) {
    const auto n = static_cast<double>(m.users);
    m.recall /= n;
    m.ndcg /= n;
    m.hr /= n;
  }
  return m;
}

std::vector<double> UtilityVector::defined_values() const {
  std::vector<double> out;
  for (std::size_t n = 0; n < values.size(); ++n) {
    if (defined[n]) out.push_back(values[n]);
  }
  return out;
}

UtilityVector group_utilities(const RankingResult& ranking, const ItemLists& relevant,
                              const GroupAssignment& groups, MetricKind metric, UtilityAveraging averaging) {
  UtilityVector out;
  out.metric = metric;
  out.k = ranking.k;
  const std::size_t N = groups.num_groups;
  std::vector<double> sum(N, 0.0);
  std::vector<std::size_t> with_items(N, 0);
  std::size_t evaluated = 0;
  for (std::size_t u = 0; u < ranking.lists.size(); ++u) {
    if (relevant[u].empty()) continue;
    ++evaluated;
    for (std::size_t n = 0; n < N; ++n) {
      const auto val = user_group_utility(ranking.lists[u], relevant[u], groups, static_cast<Index>(n), metric, ranking.k);
      if (!val) continue;
      sum[n] += *val;
      ++with_items[n];
    }
  }
  out.values.assign(N, 0.0);
  out.defined.assign(N, false);
  out.users.assign(N, 0);
  for (std::size_t n = 0; n < N; ++n) {
    if (with_items[n] == 0) continue;
    out.users[n] = averaging == UtilityAveraging::ExcludeEmpty ? with_items[n] : evaluated;
    out.values[n] = sum[n] / static_cast<double>(out.users[n]);
    out.defined[n] = true;
  }
  return out;
}

std::optional<double> group_utility(const RankingResult& ranking, const ItemLists& relevant,
                                    const GroupAssignment& groups, Index group, MetricKind metric,
                                    UtilityAveraging averaging) {
  if (group >= groups.num_groups) throw Error("group_utility: group index out of range");
  const auto all = group_utilities(ranking, relevant, groups, metric, averaging);
  if (!all.defined[group]) return std::nullopt;
  return all.values[group];
}

double cv(std::span<const double> utilities) {
  if (utilities.size() < 2) throw Error("cv undefined: fewer than two group utilities");
  const double n = static_cast<double>(utilities.size());
  const double mean = std::accumulate(utilities.begin(), utilities.end(), 0.0) / n;
  if (!(mean > 0.0)) throw Error("cv undefined: mean utility is 0");
  double var = 0.0;
  for (double u : utilities) var += (u - mean) * (u - mean);
  return std::sqrt(var / n) / mean;
}

double min_bottom(std::span<const double> utilities, double fraction) {
  if (utilities.empty()) throw Error("min_bottom: no utilities");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw Error("min_bottom: fraction must be in (0, 1]");
  std::vector<double> sorted(utilities.begin(), utilities.end());
  std::sort(sorted.begin(), sorted.end());
  const auto take = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(sorted.size()) - 1e-9)));
  return std::accumulate(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(take), 0.0) /
         static_cast<double>(take);
}

bool epsilon_if(std::span<const double> utilities, double epsilon) {
  if (utilities.size() < 2) throw Error("epsilon_if: needs at least two utilities");
  if (!(epsilon > 0.0)) throw Error("epsilon_if: epsilon must be > 0");
  const auto [lo, hi] = std::minmax_element(utilities.begin(), utilities.end());
  return *hi - *lo <= epsilon;
}

GroupingSummary summarize_grouping(const RankingResult& ranking, const ItemLists& relevant,
                                   const NamedGrouping& grouping, const EvalOptions& opts) {
  GroupingSummary s;
  s.name = grouping.name;
  s.labels = grouping.groups.labels;
  s.utilities = group_utilities(ranking, relevant, grouping.groups, opts.utility_metric, opts.averaging);
  for (std::size_t n = 0; n < s.utilities.defined.size(); ++n) {
    if (!s.utilities.defined[n]) {
      s.warnings.push_back("group '" + s.labels[n] + "' has no evaluable users; excluded");
    }
  }
  const auto values = s.utilities.defined_values();
  try {
    s.cv = cv(values);
  } catch (const Error& e) {
    s.warnings.emplace_back(e.what());
  }
  if (!values.empty()) s.min_bottom = min_bottom(values, opts.bottom_fraction);
  for (double eps : opts.epsilons) {
    std::optional<bool> ok;
    if (values.size() >= 2) ok = epsilon_if(values, eps);
    s.epsilon_if.emplace_back(eps, ok);
  }
  return s;
}

EvaluationSummary evaluate(const ProjectorParams& theta, const Matrix& z, const Dataset& ds,
                           std::span<const NamedGrouping> groupings, const EvalOptions& opts,
                           const LossOptions& loss_opts, EvalSplit split) {
  if (opts.ks.empty()) throw ConfigError("eval: at least one cutoff K is required");
  EvaluationSummary out;
  out.split = split;
  const std::size_t kmax = *std::max_element(opts.ks.begin(), opts.ks.end());
  const MaskPolicy mask = split == EvalSplit::Test ? MaskPolicy::TrainVal : MaskPolicy::Train;
  const ItemLists& relevant = split == EvalSplit::Test ? ds.test : ds.val;
  const RankingResult full = rank_topk(theta, z, ds, kmax, mask, loss_opts);
  for (std::size_t k : opts.ks) {
    RankingResult cut;
    cut.k = k;
    cut.lists.reserve(full.lists.size());
    for (const auto& l : full.lists) cut.lists.emplace_back(l.begin(), l.begin() + static_cast<std::ptrdiff_t>(std::min(k, l.size())));
    CutoffSummary c;
    c.k = k;
    c.overall = overall_metrics(cut, relevant);
    for (const auto& g : groupings) c.groupings.push_back(summarize_grouping(cut, relevant, g, opts));
    out.cutoffs.push_back(std::move(c));
  }
  return out;
}

}  // namespace bifair
