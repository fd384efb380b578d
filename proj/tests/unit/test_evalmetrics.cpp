#include <doctest.h>

#include <cmath>

#include "bifair/embed.hpp"
#include "bifair/evalmetrics.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace bifair;

namespace {

using IV = std::vector<Index>;

GroupAssignment two_groups(std::size_t items) {
  GroupAssignment g;
  g.num_groups = 2;
  g.labels = {"even", "odd"};
  for (std::size_t i = 0; i < items; ++i) g.group_of.push_back(static_cast<Index>(i % 2));
  return g;
}

struct RandomModel {
  Dataset ds;
  ProjectorParams theta;
  Matrix z;
};

RandomModel random_model(std::uint64_t seed, std::size_t users = 10, std::size_t items = 20) {
  std::mt19937_64 rng(seed);
  ItemLists train(users), val(users), test(users);
  for (std::size_t u = 0; u < users; ++u) {
    std::vector<Index> all;
    for (std::size_t i = 0; i < items; ++i) {
      if (i != u % items) all.push_back(static_cast<Index>(i));
    }
    std::shuffle(all.begin(), all.end(), rng);
    train[u] = {static_cast<Index>(u % items), all[0], all[1]};
    val[u] = {all[2]};
    test[u] = {all[3], all[4], all[5]};
  }
  for (std::size_t i = 0; i < items; ++i) train[i % users].push_back(static_cast<Index>(i));
  for (auto& t : train) {
    std::sort(t.begin(), t.end());
    t.erase(std::unique(t.begin(), t.end()), t.end());
  }
  // drop eval items that collided with the added train items
  for (std::size_t u = 0; u < users; ++u) {
    for (auto* l : {&val[u], &test[u]}) {
      l->erase(std::remove_if(l->begin(), l->end(),
                              [&](Index i) { return std::binary_search(train[u].begin(), train[u].end(), i); }),
               l->end());
    }
  }
  RandomModel m;
  m.ds = fixture::make_dataset(items, train, val, test);
  m.theta = ProjectorParams::init(fixture::shape(ProjectorKind::Linear, 5, 4), seed);
  m.z = fixture::random_matrix(rng, items, 5);
  return m;
}

}  // namespace

TEST_CASE("topk examples") {
  const std::vector<double> s{0.1, 0.9, 0.5};
  CHECK(topk_from_scores(s, 2) == IV{1, 2});
  const std::vector<double> flat(6, 0.3);
  CHECK(topk_from_scores(flat, 2) == IV{0, 1});
  const IV masked{1};
  CHECK(topk_from_scores(s, 2, masked) == IV{2, 0});
  CHECK(topk_from_scores(s, 10).size() == 3);
}

TEST_CASE("rank_topk matches a full-sort oracle") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto m = random_model(seed);
    const LossOptions opts;
    const auto r = rank_topk(m.theta, m.z, m.ds, 5, MaskPolicy::TrainVal, opts);
    const Matrix e = project_rows(m.theta, m.z);
    for (std::size_t u = 0; u < m.ds.num_users; ++u) {
      Vector zu = Vector::Zero(m.z.cols());
      for (Index i : m.ds.train[u]) zu += m.z.row(i).transpose();
      zu /= static_cast<double>(m.ds.train[u].size());
      const Vector eu = project(m.theta, zu);
      std::vector<double> scores;
      for (long i = 0; i < e.rows(); ++i) scores.push_back(score(eu, e.row(i).transpose(), opts.temperature));
      std::vector<unsigned> masked(m.ds.train[u].begin(), m.ds.train[u].end());
      masked.insert(masked.end(), m.ds.val[u].begin(), m.ds.val[u].end());
      const auto ref = oracle::naive_topk(scores, masked, 5);
      CHECK(r.lists[u] == IV(ref.begin(), ref.end()));
    }
  }
}

TEST_CASE("topk is invariant to a monotone transform") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> normal;
  for (int t = 0; t < 50; ++t) {
    std::vector<double> s(30);
    for (auto& v : s) v = normal(rng);
    s[7] = s[3];  // a tie
    std::vector<double> ex(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) ex[i] = std::exp(s[i]);
    CHECK(topk_from_scores(s, 10) == topk_from_scores(ex, 10));
  }
}

TEST_CASE("ranking metrics") {
  const IV perfect{4, 2, 9};
  const IV rel{2, 4};
  CHECK(recall_at_k(perfect, rel) == 1.0);
  CHECK(ndcg_at_k(perfect, rel) == doctest::Approx(1.0));
  CHECK(hr_at_k(perfect, rel) == 1.0);

  const IV top{0, 2};
  const IV ab{0, 1};
  CHECK(recall_at_k(top, ab) == 0.5);
  CHECK(hr_at_k(top, ab) == 1.0);
  CHECK(ndcg_at_k(top, ab, 2) == doctest::Approx(0.6131).epsilon(1e-4));
  CHECK(ndcg_at_k(top, ab, 2) == doctest::Approx(1.0 / (1.0 + 1.0 / std::log2(3.0))).epsilon(1e-12));

  const IV none{5, 6};
  CHECK(recall_at_k(none, ab) == 0.0);
  CHECK(ndcg_at_k(none, ab) == 0.0);
  CHECK(hr_at_k(none, ab) == 0.0);
}

TEST_CASE("ranking metrics match naive oracles and stay in [0, 1]") {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 200; ++t) {
    std::vector<unsigned> all(30);
    for (unsigned i = 0; i < 30; ++i) all[i] = i;
    std::shuffle(all.begin(), all.end(), rng);
    const std::size_t k = 1 + rng() % 10;
    const std::vector<unsigned> top(all.begin(), all.begin() + static_cast<long>(k));
    std::shuffle(all.begin(), all.end(), rng);
    std::vector<unsigned> rel(all.begin(), all.begin() + static_cast<long>(1 + rng() % 8));
    std::sort(rel.begin(), rel.end());
    const IV ti(top.begin(), top.end()), ri(rel.begin(), rel.end());
    CHECK(recall_at_k(ti, ri) == doctest::Approx(oracle::naive_recall(top, rel)));
    CHECK(ndcg_at_k(ti, ri, k) == doctest::Approx(oracle::naive_ndcg(top, rel, k)));
    CHECK(hr_at_k(ti, ri) == oracle::naive_hr(top, rel));
    for (double v : {recall_at_k(ti, ri), ndcg_at_k(ti, ri, k), hr_at_k(ti, ri)}) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    const auto g = two_groups(30);
    CHECK(group_hit_count(ti, ri, g, 0) + group_hit_count(ti, ri, g, 1) == hit_count(ti, ri));
  }
}

TEST_CASE("group utility") {
  RankingResult r;
  r.k = 2;
  r.lists = {{0, 1}, {2, 3}};
  const ItemLists rel{{0, 2}, {4}};
  const auto g = two_groups(6);
  // user 0 restricted to even items: relevant {0,2}, even hits {0} -> 0.5
  // user 1: relevant {4}, even hits none -> 0
  CHECK(*group_utility(r, rel, g, 0, MetricKind::Recall) == doctest::Approx(0.25));
  // odd group: nobody has odd relevant items
  CHECK_FALSE(group_utility(r, rel, g, 1, MetricKind::Recall).has_value());
  CHECK_FALSE(group_utility(r, rel, g, 1, MetricKind::Recall, UtilityAveraging::AllUsers).has_value());
  // user 1 has only odd relevant items: excluded by default, counted as 0 otherwise
  const ItemLists rel_odd{{0, 2}, {5}};
  CHECK(*group_utility(r, rel_odd, g, 0, MetricKind::Recall) == doctest::Approx(0.5));
  CHECK(*group_utility(r, rel_odd, g, 0, MetricKind::Recall, UtilityAveraging::AllUsers) == doctest::Approx(0.25));

  // two users with restricted recalls 1.0 and 0.0
  RankingResult r2;
  r2.k = 2;
  r2.lists = {{0, 1}, {3, 5}};
  const ItemLists rel2{{0}, {2}};
  CHECK(*group_utility(r2, rel2, g, 0, MetricKind::Recall) == doctest::Approx(0.5));

  GroupAssignment one;
  one.num_groups = 1;
  one.labels = {"all"};
  one.group_of.assign(6, 0);
  const auto overall = overall_metrics(r, rel);
  CHECK(*group_utility(r, rel, one, 0, MetricKind::Recall) == doctest::Approx(overall.recall));
  CHECK(*group_utility(r, rel, one, 0, MetricKind::Ndcg) == doctest::Approx(overall.ndcg));
  CHECK(*group_utility(r, rel, one, 0, MetricKind::Hr) == doctest::Approx(overall.hr));
}

TEST_CASE("cv, min_bottom and epsilon_if") {
  const std::vector<double> flat{0.3, 0.3, 0.3};
  CHECK(cv(flat) == 0.0);
  const std::vector<double> a{1.0, 3.0};
  CHECK(cv(a) == doctest::Approx(0.5));
  const std::vector<double> b{3.0, 1.0};
  CHECK(cv(b) == cv(a));
  const std::vector<double> scaled{7.0, 21.0};
  CHECK(cv(scaled) == doctest::Approx(cv(a)));
  CHECK_THROWS(cv(std::vector<double>{1.0}));
  CHECK_THROWS(cv(std::vector<double>{0.0, 0.0}));

  CHECK(min_bottom(std::vector<double>{0.4, 0.2}) == 0.2);
  CHECK(min_bottom(std::vector<double>{0.1, 0.2, 0.3, 0.4}) == doctest::Approx(0.1));
  CHECK(min_bottom(std::vector<double>{0.5, 0.1, 0.3, 0.2, 0.4}) == doctest::Approx(0.15));
  CHECK(min_bottom(std::vector<double>{1.0, 0.2, 0.6, 0.4, 0.8}) == doctest::Approx(2.0 * 0.15));

  CHECK(epsilon_if(flat, 1e-9));
  CHECK_FALSE(epsilon_if(std::vector<double>{0.1, 0.4}, 0.2));
  CHECK(epsilon_if(std::vector<double>{0.0, 0.5, 1.0}, 1.0));
  CHECK(epsilon_if(std::vector<double>{0.1, 0.25, 0.3}, 0.2 + 1e-12));
}

TEST_CASE("evaluate produces one summary per cutoff and grouping") {
  const auto m = random_model(3);
  EvalOptions o;
  o.ks = {3, 5};
  const std::vector<NamedGrouping> gs{{"parity", two_groups(m.ds.num_items)}};
  const auto s = evaluate(m.theta, m.z, m.ds, gs, o, {}, EvalSplit::Test);
  REQUIRE(s.cutoffs.size() == 2);
  for (const auto& c : s.cutoffs) {
    REQUIRE(c.groupings.size() == 1);
    CHECK(c.groupings[0].labels == std::vector<std::string>{"even", "odd"});
    CHECK(c.groupings[0].epsilon_if.size() == o.epsilons.size());
    CHECK(c.overall.recall >= 0.0);
    CHECK(c.overall.recall <= 1.0);
  }
  CHECK(s.cutoffs[0].overall.recall <= s.cutoffs[1].overall.recall + 1e-12);
}
