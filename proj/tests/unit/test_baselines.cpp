#include <doctest.h>

#include <cmath>

#include "bifair/baselines.hpp"
#include "fixtures.hpp"

using namespace bifair;

namespace {

GroupAssignment parity(std::size_t items) {
  GroupAssignment g;
  g.num_groups = 2;
  g.labels = {"even", "odd"};
  for (std::size_t i = 0; i < items; ++i) g.group_of.push_back(static_cast<Index>(i % 2));
  return g;
}

GroupLossVector losses(std::vector<double> l, std::vector<std::size_t> counts = {}) {
  GroupLossVector g;
  g.losses = std::move(l);
  g.counts = counts.empty() ? std::vector<std::size_t>(g.losses.size(), 1) : std::move(counts);
  return g;
}

// 30 users, 30 items; every user holds two even and two odd items.
struct Balanced {
  Dataset ds;
  GroupAssignment groups;
  SemanticMatrix z0;
};

Balanced balanced() {
  const std::size_t n = 30;
  ItemLists train(n), val(n), test(n);
  for (std::size_t u = 0; u < n; ++u) {
    const auto a = static_cast<Index>(u & ~std::size_t{1});
    const auto b = static_cast<Index>((u + 4) % n & ~std::size_t{1});
    train[u] = {a, static_cast<Index>(a + 1), b, static_cast<Index>(b + 1)};
    val[u] = {static_cast<Index>((u + 10) % n)};
    test[u] = {static_cast<Index>((u + 20) % n)};
  }
  Balanced t;
  t.ds = fixture::make_dataset(n, train, val, test);
  t.groups = parity(n);
  std::mt19937_64 rng(4);
  t.z0.z = fixture::random_matrix(rng, n, 6);
  return t;
}

TrainConfig small_config() {
  TrainConfig c;
  c.inner_lr = 0.05;
  c.max_epochs = 3;
  c.batch_size = 32;
  c.num_negatives = 4;
  c.d_rec = 4;
  c.eval_k = 5;
  c.seed = 9;
  return c;
}

}  // namespace

TEST_CASE("reweight weights") {
  // 10 users, each with nine group-0 items and one group-1 item: counts (90, 10)
  ItemLists train(10);
  for (auto& l : train) l = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  auto ds = fixture::make_dataset(10, train);
  GroupAssignment g;
  g.num_groups = 2;
  g.labels = {"a", "b"};
  g.group_of = {0, 0, 0, 0, 0, 0, 0, 0, 0, 1};
  const auto w = reweight_weights(g, ds);
  CHECK(w.w[0] == doctest::Approx(0.1));
  CHECK(w.w[1] == doctest::Approx(0.9));
  CHECK_NOTHROW(w.validate());

  GroupAssignment swapped = g;
  for (auto& x : swapped.group_of) x = 1 - x;
  const auto ws = reweight_weights(swapped, ds);
  CHECK(ws.w[0] == doctest::Approx(w.w[1]));
  CHECK(ws.w[1] == doctest::Approx(w.w[0]));

  const auto b = balanced();
  const auto u = reweight_weights(b.groups, b.ds);
  CHECK(u.w[0] == doctest::Approx(0.5));
  CHECK(u.w[1] == doctest::Approx(0.5));
}

TEST_CASE("reweight weights ignore uniform duplication") {
  ItemLists train{{0, 1, 2}, {1, 3}, {0, 4, 5}};
  const auto g = parity(6);
  const auto ds = fixture::make_dataset(6, train);
  ItemLists twice = train;
  twice.insert(twice.end(), train.begin(), train.end());
  const auto ds2 = fixture::make_dataset(6, twice);
  const auto a = reweight_weights(g, ds), b = reweight_weights(g, ds2);
  CHECK(a.w[0] == doctest::Approx(b.w[0]).epsilon(1e-14));
  CHECK(a.w[1] == doctest::Approx(b.w[1]).epsilon(1e-14));
}

TEST_CASE("groupdro update") {
  BaselineWeights w{{0.5, 0.5}, "groupdro"};
  const auto eq = groupdro_update(w, losses({1.3, 1.3}), 0.7);
  CHECK(eq.w[0] == doctest::Approx(0.5));
  const auto s = groupdro_update(w, losses({0.0, std::log(2.0)}), 1.0);
  CHECK(s.w[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
  CHECK(s.w[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));

  BaselineWeights three{{0.2, 0.3, 0.5}, "groupdro"};
  const auto a = groupdro_update(three, losses({0.4, 1.1, 0.2}), 0.3);
  const auto b = groupdro_update(three, losses({5.4, 6.1, 5.2}), 0.3);
  for (int n = 0; n < 3; ++n) CHECK(a.w[n] == doctest::Approx(b.w[n]).epsilon(1e-12));
  double sum = 0.0;
  for (double v : a.w) sum += v;
  CHECK(std::abs(sum - 1.0) <= 1e-12);

  const auto absent = groupdro_update(three, losses({0.4, 0.0, 0.9}, {3, 0, 2}), 1.0);
  CHECK(absent.w[1] == doctest::Approx(0.3));

  BaselineWeights it{{1.0 / 3, 1.0 / 3, 1.0 / 3}, "groupdro"};
  for (int k = 0; k < 100; ++k) it = groupdro_update(it, losses({0.2, 0.9, 0.5}), 0.5);
  CHECK(it.w[1] > 0.99);
}

TEST_CASE("plain baseline aliases bilevel plain with frozen Z") {
  const auto t = balanced();
  auto c = small_config();
  const auto base = train_baseline(t.ds, t.groups, t.z0, c, FairnessMode::Plain);
  auto direct = c;
  direct.fairness = FairnessMode::Plain;
  direct.train_z = false;
  const auto ref = train(t.ds, t.groups, t.z0, direct);
  REQUIRE(base.history.size() == ref.history.size());
  for (std::size_t e = 0; e < ref.history.size(); ++e) {
    CHECK(to_json(base.history[e]).dump() == to_json(ref.history[e]).dump());
  }
  CHECK(base.z.z == t.z0.z);
}

TEST_CASE("reweight with uniform frequencies equals plain") {
  const auto t = balanced();
  const auto c = small_config();
  const auto plain = train_baseline(t.ds, t.groups, t.z0, c, FairnessMode::Plain);
  const auto rw = train_baseline(t.ds, t.groups, t.z0, c, FairnessMode::Reweight);
  REQUIRE(plain.history.size() == rw.history.size());
  for (std::size_t e = 0; e < plain.history.size(); ++e) {
    CHECK(rw.history[e].train_loss == doctest::Approx(plain.history[e].train_loss).epsilon(1e-12));
    CHECK(rw.history[e].val_recall == plain.history[e].val_recall);
  }
  CHECK((rw.theta.values - plain.theta.values).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("baseline config") {
  const auto c = baseline_config(small_config(), FairnessMode::GroupDro);
  CHECK(c.fairness == FairnessMode::GroupDro);
  CHECK_FALSE(c.train_z);
  CHECK(baseline_config(small_config(), FairnessMode::Reweight, true).train_z);
  CHECK_THROWS(baseline_config(small_config(), FairnessMode::BiFair));
}
