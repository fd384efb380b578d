#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "bifair/bilevel.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"
#include "toys.hpp"

using namespace bifair;
using toy::Bilinear;
using toy::ScalarToy;

namespace {

FairnessRule plain_rule() {
  FairnessRule r;
  r.mode = FairnessMode::Plain;
  return r;
}

struct Toy {
  Dataset ds;
  GroupAssignment groups;
  SemanticMatrix z0;
};

Toy toy_problem(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t users = 30, items = 30;
  ItemLists train(users), val(users), test(users);
  for (std::size_t u = 0; u < users; ++u) {
    // user u always holds item u, so every item has a training interaction
    std::vector<Index> all;
    for (std::size_t i = 0; i < items; ++i) {
      if (i != u) all.push_back(static_cast<Index>(i));
    }
    std::shuffle(all.begin(), all.end(), rng);
    train[u].assign(all.begin(), all.begin() + 5);
    train[u].push_back(static_cast<Index>(u));
    val[u].assign(all.begin() + 5, all.begin() + 7);
    test[u].assign(all.begin() + 7, all.begin() + 9);
  }
  Toy t;
  t.ds = fixture::make_dataset(items, train, val, test);
  t.groups.num_groups = 2;
  t.groups.labels = {"a", "b"};
  for (std::size_t i = 0; i < items; ++i) t.groups.group_of.push_back(static_cast<Index>(i % 2));
  t.z0.z = fixture::random_matrix(rng, items, 6);
  return t;
}

TrainConfig toy_config() {
  TrainConfig c;
  c.inner_lr = 0.05;
  c.outer_lr = 0.01;
  c.max_epochs = 4;
  c.patience = 10;
  c.batch_size = 32;
  c.num_negatives = 4;
  c.d_rec = 4;
  c.eval_k = 5;
  c.seed = 3;
  return c;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("fd_second_order: zero direction and bilinear exactness") {
  std::mt19937_64 rng(1);
  const Matrix a = fixture::random_matrix(rng, 4, 3);
  Bilinear obj(a, fixture::random_matrix(rng, 3, 1).col(0));
  const Vector theta = fixture::random_matrix(rng, 4, 1).col(0);
  const std::vector<double> one{1.0};
  CHECK(fd_second_order(obj, theta, Vector::Zero(4), one, 0.01).isZero(0.0));
  const Vector v = fixture::random_matrix(rng, 4, 1).col(0);
  const Vector fd = fd_second_order(obj, theta, v, one, 0.01);
  CHECK((fd - a.transpose() * v).cwiseAbs().maxCoeff() <= 1e-6);
  CHECK_THROWS_AS(fd_second_order(obj, theta, v, one, 0.0), Error);
}

TEST_CASE("fd_second_order: second-order accuracy") {
  ScalarToy obj(0.7, 1.3, 0.9);
  Vector theta(1), v(1);
  theta << 0.4;
  v << 2.0;
  const std::vector<double> one{1.0};
  const double exact = (0.7 + 3 * 1.3 * 0.4 * 0.4) * 2.0;  // d/dtheta of dz, times v
  const double e1 = std::abs(fd_second_order(obj, theta, v, one, 0.02)[0] - exact);
  const double e2 = std::abs(fd_second_order(obj, theta, v, one, 0.01)[0] - exact);
  CHECK(e2 > 0.0);
  const double ratio = e1 / e2;
  CHECK(ratio >= 3.0);
  CHECK(ratio <= 5.0);
}

TEST_CASE("outer_hypergradient matches the one-step unroll on a scalar toy") {
  const double a = 0.8, b = 0.5, zv = 1.1, t0 = 0.6;
  for (double xi : {0.1, 0.01, 0.001}) {
    ScalarToy obj(a, b, zv);
    Vector theta(1);
    theta << t0;
    auto rule = plain_rule();
    const Hypergradient hg = outer_hypergradient(obj, theta, rule, xi, 0.01);
    // F(z) = L(theta - xi dL/dtheta(theta, z), z), differentiated exactly
    const double tp = t0 - xi * (a + 3 * b * t0 * t0) * zv;
    const double exact = (a * tp + b * tp * tp * tp) + (a + 3 * b * tp * tp) * zv * (-xi * (a + 3 * b * t0 * t0));
    CHECK(hg.virtual_theta[0] == doctest::Approx(tp).epsilon(1e-14));
    CHECK(std::abs(hg.z_grad[0] - exact) <= 1e-5);
  }
}

TEST_CASE("outer_hypergradient: xi = 0 is the plain Z gradient") {
  std::mt19937_64 rng(2);
  const auto shape = fixture::shape(ProjectorKind::Linear, 4, 3);
  const auto th = ProjectorParams::init(shape, 5);
  const Matrix z = fixture::random_matrix(rng, 9, 4);
  const auto hist = fixture::random_histories(rng, 3, 9, 3);
  const Batch b = fixture::random_batch(rng, 3, 9, 6, 2, 2);
  InfoNceObjective obj(shape, z, hist, b, 2, {});
  auto rule = plain_rule();
  const Hypergradient hg = outer_hypergradient(obj, th.values, rule, 0.0, 0.01);
  const ZGrad ref = loss_grad_z(th, z, hist, b, {});
  const ZGrad got = obj.to_zgrad(hg.z_grad);
  CHECK(got.rows == ref.rows);
  CHECK(got.rows == obj.z_rows());
  CHECK((got.dense(9) - ref.dense(9)).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK(obj.counters().theta_evals == 1);
  CHECK(obj.counters().z_evals == 1);
}

TEST_CASE("outer_hypergradient costs two theta and three Z evaluations") {
  std::mt19937_64 rng(3);
  const auto shape = fixture::shape(ProjectorKind::Mlp2, 4, 3, 5, true);
  const auto th = ProjectorParams::init(shape, 6);
  const Matrix z = fixture::random_matrix(rng, 12, 4);
  const auto hist = fixture::random_histories(rng, 4, 12, 3);
  const Batch b = fixture::random_batch(rng, 4, 12, 10, 3, 3);
  for (auto mode : {FairnessMode::Plain, FairnessMode::BiFair, FairnessMode::Reweight, FairnessMode::GroupDro}) {
    InfoNceObjective obj(shape, z, hist, b, 3, {});
    FairnessRule rule;
    rule.mode = mode;
    rule.baseline_weights = {0.2, 0.3, 0.5};
    const Hypergradient hg = outer_hypergradient(obj, th.values, rule, 0.01, 0.01);
    CHECK(obj.counters().theta_evals == 2);
    CHECK(obj.counters().z_evals == 3);
    CHECK(static_cast<std::size_t>(hg.z_grad.size()) == obj.z_dim());
    CHECK(hg.z_grad.allFinite());
  }
}

TEST_CASE("inner_step: flat losses, single group and empirical descent") {
  std::mt19937_64 rng(4);
  const auto shape = fixture::shape(ProjectorKind::Linear, 4, 3);
  const LossOptions opts;
  {
    // identical items: every score is equal, gradient vanishes
    Matrix z(5, 4);
    for (int r = 0; r < 5; ++r) z.row(r) << 0.1, 0.2, -0.3, 0.4;
    const auto th = ProjectorParams::init(shape, 1);
    const Batch b = fixture::random_batch(rng, 2, 5, 4, 2, 2);
    FairnessRule rule;
    const auto out = inner_step(th, z, ItemLists{{0}, {1, 2}}, b, 2, 0.1, rule, opts);
    CHECK((out.values - th.values).cwiseAbs().maxCoeff() <= 1e-12);
  }
  {
    const Matrix z = fixture::random_matrix(rng, 8, 4);
    const auto hist = fixture::random_histories(rng, 3, 8, 3);
    const auto th = ProjectorParams::init(shape, 2);
    const Batch b = fixture::random_batch(rng, 3, 8, 6, 2, 1);
    FairnessRule bifair;
    const auto a = inner_step(th, z, hist, b, 1, 0.1, bifair, opts);
    const Vector expect = th.values - 0.1 * loss_grad_theta(th, z, hist, b, opts);
    CHECK((a.values - expect).cwiseAbs().maxCoeff() <= 1e-12);
  }
  for (std::uint64_t s = 0; s < 20; ++s) {
    std::mt19937_64 r(100 + s);
    const Matrix z = fixture::random_matrix(r, 10, 4);
    const auto hist = fixture::random_histories(r, 4, 10, 3);
    const auto th = ProjectorParams::init(shape, s);
    Batch b = fixture::random_batch(r, 4, 10, 12, 3, 3);
    FairnessRule rule;
    auto max_loss = [&](const ProjectorParams& p) {
      const auto g = group_loss_vector(p, z, hist, b, 3, opts);
      double m = -1e300;
      for (std::size_t n = 0; n < 3; ++n) {
        if (g.present(n)) m = std::max(m, g.losses[n]);
      }
      return m;
    };
    const auto next = inner_step(th, z, hist, b, 3, 1e-3, rule, opts);
    CHECK(max_loss(next) <= max_loss(th) + 1e-9);
  }
}

TEST_CASE("optimizers and schedule") {
  CHECK(polynomial_lr(0.1, 0, 100, 0.9) == doctest::Approx(0.1));
  CHECK(polynomial_lr(0.1, 50, 100, 0.9) == doctest::Approx(0.1 * std::pow(0.5, 0.9)));
  CHECK(polynomial_lr(0.1, 100, 100, 0.9) >= 0.0);

  AdamW adam(2, 0.9, 0.999, 1e-8, 0.0);
  Vector x = Vector::Zero(2);
  Vector g(2);
  g << 1.0, -2.0;
  adam.step(x, g, 0.1);
  CHECK(x[0] == doctest::Approx(-0.1).epsilon(1e-6));
  CHECK(x[1] == doctest::Approx(0.1).epsilon(1e-6));

  SparseRowAdamW sparse(4, 2, 0.9, 0.999, 1e-8, 0.1);
  Matrix z = Matrix::Ones(4, 2);
  ZGrad zg;
  zg.rows = {1};
  zg.values = Matrix::Ones(1, 2);
  sparse.step(z, zg, 0.1);
  CHECK(z.row(0) == Matrix::Ones(1, 2));
  CHECK(z.row(2) == Matrix::Ones(1, 2));
  CHECK(z(1, 0) < 1.0);
}

TEST_CASE("train: plain first-order run drives the loss down on a toy") {
  auto t = toy_problem(1);
  auto c = toy_config();
  c.fairness = FairnessMode::Plain;
  c.virtual_step = 0.0;
  c.max_epochs = 60;
  c.patience = 1000;
  c.inner_lr = 0.2;
  c.outer_lr = 0.05;
  const auto m = train(t.ds, t.groups, t.z0, c);
  REQUIRE(m.history.size() == 60);
  CHECK(m.history.back().train_loss < m.history.front().train_loss);
}

TEST_CASE("train: early stopping returns the best checkpoint") {
  auto t = toy_problem(2);
  auto c = toy_config();
  c.inner_lr = 1e-300;
  c.outer_lr = 1e-300;
  c.patience = 1;
  const auto m = train(t.ds, t.groups, t.z0, c);
  CHECK(m.history.size() == 2);
  CHECK(m.best_epoch == 1);
  CHECK(m.stop_reason == "early_stopping");
}

TEST_CASE("train: determinism, best checkpoint and counters") {
  auto t = toy_problem(3);
  const auto c = toy_config();
  const auto a = train(t.ds, t.groups, t.z0, c);
  const auto b = train(t.ds, t.groups, t.z0, c);
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t e = 0; e < a.history.size(); ++e) CHECK(to_json(a.history[e]).dump() == to_json(b.history[e]).dump());
  CHECK(a.theta.values == b.theta.values);
  CHECK(a.z.z == b.z.z);
  double best = -1;
  for (const auto& h : a.history) best = std::max(best, h.val_recall);
  CHECK(a.best_val_recall == best);
  CHECK(validation_recall(a.theta, a.z.z, t.ds, c.eval_k, c.loss_options()) == doctest::Approx(best).epsilon(1e-12));
  // per batch: inner theta pass, then 2 theta + 3 Z in the outer update
  CHECK(a.counters.theta_evals == 3 * a.batches);
  CHECK(a.counters.z_evals == 3 * a.batches);
}

TEST_CASE("train: separate mode runs two phases") {
  auto t = toy_problem(4);
  auto c = toy_config();
  c.separate = true;
  c.max_epochs = 2;
  const auto m = train(t.ds, t.groups, t.z0, c);
  REQUIRE(m.history.size() == 4);
  CHECK(m.history[0].phase == "theta");
  CHECK(m.history[3].phase == "z");
  CHECK(m.history[3].epoch == 4);
}

TEST_CASE("checkpoint round trip") {
  auto t = toy_problem(5);
  const auto c = toy_config();
  const auto m = train(t.ds, t.groups, t.z0, c);
  const auto dir = fixture::scratch_dir("ckpt");
  save_checkpoint(m, c, dir);
  TrainConfig back;
  const auto r = load_checkpoint(dir, &back);
  CHECK(r.theta.values == m.theta.values);
  CHECK(r.z.z == m.z.z);
  CHECK(r.history.size() == m.history.size());
  CHECK(r.best_epoch == m.best_epoch);
  CHECK(to_json(back).dump() == to_json(c).dump());
  CHECK(std::filesystem::exists(dir / "history.jsonl"));
  save_checkpoint(r, back, dir / "again");
  CHECK(slurp(dir / "history.jsonl") == slurp(dir / "again" / "history.jsonl"));
}

TEST_CASE("train config json") {
  auto c = toy_config();
  c.fairness = FairnessMode::GroupDro;
  c.virtual_step = 0.003;
  const auto back = train_config_from_json(to_json(c));
  CHECK(to_json(back).dump() == to_json(c).dump());
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"no_such_key", 1}}), ConfigError);
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"inner_lr", -1.0}}).validate(), ConfigError);
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"patience", 0}}).validate(), ConfigError);
}
