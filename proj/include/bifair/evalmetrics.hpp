#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bifair/common.hpp"
#include "bifair/dataio.hpp"
#include "bifair/recmodel.hpp"

namespace bifair {

enum class MetricKind { Recall, Ndcg, Hr };
enum class MaskPolicy { None, Train, TrainVal };
// ExcludeEmpty drops users with no relevant item in the group from that
// group's average; AllUsers averages over every evaluated user.
enum class UtilityAveraging { ExcludeEmpty, AllUsers };
enum class EvalSplit { Val, Test };

std::string to_string(MetricKind k);
MetricKind metric_kind_from_string(const std::string& s);
std::string to_string(UtilityAveraging a);
UtilityAveraging utility_averaging_from_string(const std::string& s);

struct RankingResult {
  std::size_t k = 0;
  std::vector<std::vector<Index>> lists;  // per user, best first
};

// Indices of the k largest scores, ties broken by ascending index. `masked`
// must be sorted.
std::vector<Index> topk_from_scores(std::span<const double> scores, std::size_t k,
                                    std::span<const Index> masked = {});

// Scores every item for every user (all-ranking protocol).
RankingResult rank_topk(const ProjectorParams& theta, const Matrix& z, const Dataset& ds, std::size_t k,
                        MaskPolicy mask, const LossOptions& opts);

std::size_t hit_count(std::span<const Index> topk, std::span<const Index> relevant);
double recall_at_k(std::span<const Index> topk, std::span<const Index> relevant);
// `k` is the nominal cutoff used for the ideal DCG; defaults to topk.size().
double ndcg_at_k(std::span<const Index> topk, std::span<const Index> relevant, std::size_t k = 0);
double hr_at_k(std::span<const Index> topk, std::span<const Index> relevant);

std::size_t group_hit_count(std::span<const Index> topk, std::span<const Index> relevant,
                            const GroupAssignment& groups, Index group);

// Metric restricted to group `group`: relevant set is relevant ∩ G_n and only
// recommended items of G_n can hit. Empty when the restricted set is empty.
std::optional<double> user_group_utility(std::span<const Index> topk, std::span<const Index> relevant,
                                         const GroupAssignment& groups, Index group, MetricKind metric,
                                         std::size_t k);

struct MetricSet {
  double recall = 0.0;
  double ndcg = 0.0;
  double hr = 0.0;
  std::size_t users = 0;
};

// Mean over users with a nonempty relevant list.
MetricSet overall_metrics(const RankingResult& ranking, const ItemLists& relevant);

struct UtilityVector {
  std::vector<double> values;  // 0 where undefined
  std::vector<bool> defined;
  std::vector<std::size_t> users;  // users averaged per group
  MetricKind metric = MetricKind::Recall;
  std::size_t k = 0;

  std::vector<double> defined_values() const;
};

UtilityVector group_utilities(const RankingResult& ranking, const ItemLists& relevant,
                              const GroupAssignment& groups, MetricKind metric,
                              UtilityAveraging averaging = UtilityAveraging::ExcludeEmpty);

std::optional<double> group_utility(const RankingResult& ranking, const ItemLists& relevant,
                                    const GroupAssignment& groups, Index group, MetricKind metric,
                                    UtilityAveraging averaging = UtilityAveraging::ExcludeEmpty);

// Population standard deviation over mean. Throws when fewer than two values
// are given or the mean is not positive.
double cv(std::span<const double> utilities);
// Mean of the lowest ceil(fraction * n) values.
double min_bottom(std::span<const double> utilities, double fraction = 0.25);
// max - min <= epsilon (inclusive).
bool epsilon_if(std::span<const double> utilities, double epsilon);

struct EvalOptions {
  std::vector<std::size_t> ks{20};
  std::vector<double> epsilons{0.01, 0.05, 0.1};
  MetricKind utility_metric = MetricKind::Recall;
  UtilityAveraging averaging = UtilityAveraging::ExcludeEmpty;
  double bottom_fraction = 0.25;
};

struct NamedGrouping {
  std::string name;
  GroupAssignment groups;
};

struct GroupingSummary {
  std::string name;
  std::vector<std::string> labels;
  UtilityVector utilities;
  std::optional<double> cv;
  std::optional<double> min_bottom;
  std::vector<std::pair<double, std::optional<bool>>> epsilon_if;
  std::vector<std::string> warnings;
};

struct CutoffSummary {
  std::size_t k = 0;
  MetricSet overall;
  std::vector<GroupingSummary> groupings;
};

struct EvaluationSummary {
  EvalSplit split = EvalSplit::Test;
  std::vector<CutoffSummary> cutoffs;
};

GroupingSummary summarize_grouping(const RankingResult& ranking, const ItemLists& relevant,
                                   const NamedGrouping& grouping, const EvalOptions& opts);

EvaluationSummary evaluate(const ProjectorParams& theta, const Matrix& z, const Dataset& ds,
                           std::span<const NamedGrouping> groupings, const EvalOptions& opts,
                           const LossOptions& loss_opts, EvalSplit split = EvalSplit::Test);

}  // namespace bifair
