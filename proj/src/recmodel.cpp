#include "bifair/recmodel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace bifair {

std::string to_string(ProjectorKind k) { return k == ProjectorKind::Linear ? "linear" : "mlp2"; }

ProjectorKind projector_kind_from_string(const std::string& s) {
  if (s == "linear") return ProjectorKind::Linear;
  if (s == "mlp2" || s == "mlp") return ProjectorKind::Mlp2;
  throw ConfigError("unknown projector kind '" + s + "'");
}

ParamLayout::ParamLayout(const ProjectorShape& s) {
  if (s.kind == ProjectorKind::Linear) {
    w1_rows = s.d_sem;
    w1_cols = s.d_rec;
  } else {
    w1_rows = s.d_sem;
    w1_cols = s.hidden;
    w2_rows = s.hidden;
    w2_cols = s.d_rec;
  }
  std::size_t off = 0;
  w1 = off;
  off += w1_rows * w1_cols;
  b1 = off;
  if (s.bias) off += w1_cols;
  w2 = off;
  off += w2_rows * w2_cols;
  b2 = off;
  if (s.bias && s.kind == ProjectorKind::Mlp2) off += w2_cols;
  total = off;
}

std::size_t ProjectorShape::num_params() const { return ParamLayout(*this).total; }

void ProjectorShape::validate() const {
  if (d_sem == 0 || d_rec == 0) throw ConfigError("projector dimensions must be > 0");
  if (kind == ProjectorKind::Mlp2 && hidden == 0) throw ConfigError("mlp2 projector needs hidden > 0");
}

ProjectorParams ProjectorParams::zeros(const ProjectorShape& shape) {
  shape.validate();
  return {shape, Vector::Zero(static_cast<Eigen::Index>(shape.num_params()))};
}

ProjectorParams ProjectorParams::init(const ProjectorShape& shape, std::uint64_t seed) {
  ProjectorParams p = zeros(shape);
  const ParamLayout lay(shape);
  std::mt19937_64 rng(seed);
  auto fill = [&](std::size_t off, std::size_t rows, std::size_t cols) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (std::size_t k = 0; k < rows * cols; ++k) p.values[static_cast<Eigen::Index>(off + k)] = dist(rng);
  };
  fill(lay.w1, lay.w1_rows, lay.w1_cols);
  if (shape.kind == ProjectorKind::Mlp2) fill(lay.w2, lay.w2_rows, lay.w2_cols);
  return p;
}

Eigen::Map<const Matrix> ProjectorParams::w1() const {
  const ParamLayout l(shape);
  return {values.data() + l.w1, static_cast<Eigen::Index>(l.w1_rows), static_cast<Eigen::Index>(l.w1_cols)};
}
Eigen::Map<const Matrix> ProjectorParams::w2() const {
  const ParamLayout l(shape);
  return {values.data() + l.w2, static_cast<Eigen::Index>(l.w2_rows), static_cast<Eigen::Index>(l.w2_cols)};
}
Eigen::Map<const Vector> ProjectorParams::b1() const {
  const ParamLayout l(shape);
  return {values.data() + l.b1, static_cast<Eigen::Index>(l.w2 - l.b1)};
}
Eigen::Map<const Vector> ProjectorParams::b2() const {
  const ParamLayout l(shape);
  return {values.data() + l.b2, static_cast<Eigen::Index>(l.total - l.b2)};
}
Eigen::Map<Matrix> ProjectorParams::w1() {
  const ParamLayout l(shape);
  return {values.data() + l.w1, static_cast<Eigen::Index>(l.w1_rows), static_cast<Eigen::Index>(l.w1_cols)};
}
Eigen::Map<Matrix> ProjectorParams::w2() {
  const ParamLayout l(shape);
  return {values.data() + l.w2, static_cast<Eigen::Index>(l.w2_rows), static_cast<Eigen::Index>(l.w2_cols)};
}
Eigen::Map<Vector> ProjectorParams::b1() {
  const ParamLayout l(shape);
  return {values.data() + l.b1, static_cast<Eigen::Index>(l.w2 - l.b1)};
}
Eigen::Map<Vector> ProjectorParams::b2() {
  const ParamLayout l(shape);
  return {values.data() + l.b2, static_cast<Eigen::Index>(l.total - l.b2)};
}

namespace {

struct ForwardCache {
  Matrix hidden;  // tanh activations, Mlp2 only
  Matrix out;
};

ForwardCache forward(const ProjectorParams& theta, const Matrix& x) {
  if (static_cast<std::size_t>(x.cols()) != theta.shape.d_sem) {
    throw Error("project: input has " + std::to_string(x.cols()) + " columns, projector expects " +
                std::to_string(theta.shape.d_sem));
  }
  ForwardCache c;
  if (theta.shape.kind == ProjectorKind::Linear) {
    c.out = x * theta.w1();
    if (theta.shape.bias) c.out.rowwise() += theta.b1().transpose();
    return c;
  }
  c.hidden = x * theta.w1();
  if (theta.shape.bias) c.hidden.rowwise() += theta.b1().transpose();
  c.hidden = c.hidden.array().tanh().matrix();
  c.out = c.hidden * theta.w2();
  if (theta.shape.bias) c.out.rowwise() += theta.b2().transpose();
  return c;
}

// Accumulates dL/dtheta into `grad` and returns dL/dx.
Matrix backward(const ProjectorParams& theta, const Matrix& x, const ForwardCache& c,
                const Matrix& d_out, Vector* grad) {
  const ParamLayout lay(theta.shape);
  if (theta.shape.kind == ProjectorKind::Linear) {
    if (grad) {
      Eigen::Map<Matrix>(grad->data() + lay.w1, x.cols(), d_out.cols()) += x.transpose() * d_out;
      if (theta.shape.bias) Eigen::Map<Vector>(grad->data() + lay.b1, d_out.cols()) += d_out.colwise().sum().transpose();
    }
    return d_out * theta.w1().transpose();
  }
  Matrix d_hidden = d_out * theta.w2().transpose();
  Matrix d_pre = (d_hidden.array() * (1.0 - c.hidden.array().square())).matrix();
  if (grad) {
    Eigen::Map<Matrix>(grad->data() + lay.w2, c.hidden.cols(), d_out.cols()) += c.hidden.transpose() * d_out;
    Eigen::Map<Matrix>(grad->data() + lay.w1, x.cols(), d_pre.cols()) += x.transpose() * d_pre;
    if (theta.shape.bias) {
      Eigen::Map<Vector>(grad->data() + lay.b2, d_out.cols()) += d_out.colwise().sum().transpose();
      Eigen::Map<Vector>(grad->data() + lay.b1, d_pre.cols()) += d_pre.colwise().sum().transpose();
    }
  }
  return d_pre * theta.w1().transpose();
}

std::vector<Index> sorted_unique(std::vector<Index> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

}  // namespace

Vector project(const ProjectorParams& theta, const Vector& z) {
  Matrix x = z.transpose();
  return forward(theta, x).out.row(0).transpose();
}

Matrix project_rows(const ProjectorParams& theta, const Matrix& z) { return forward(theta, z).out; }

double score(const Vector& e_u, const Vector& e_i, double tau, ScoreKind kind) {
  if (!(tau > 0.0)) throw Error("score: temperature must be > 0");
  if (e_u.size() != e_i.size()) throw Error("score: dimension mismatch");
  if (kind == ScoreKind::Dot) return e_u.dot(e_i) / tau;
  const double nu = e_u.norm();
  const double ni = e_i.norm();
  if (nu == 0.0 || ni == 0.0) {
    log_debug("score: zero vector, cosine taken as 0");
    return 0.0;
  }
  return e_u.dot(e_i) / (nu * ni * tau);
}

void Batch::validate(std::size_t num_users, std::size_t num_items) const {
  const std::size_t n = users.size();
  if (positives.size() != n || negatives.size() != n * num_negatives) {
    throw Error("batch: inconsistent array sizes");
  }
  if (!group_of_pair.empty() && group_of_pair.size() != n) throw Error("batch: group_of_pair size mismatch");
  for (std::size_t p = 0; p < n; ++p) {
    if (users[p] >= num_users || positives[p] >= num_items) throw Error("batch: index out of range");
    for (Index neg : negatives_of(p)) {
      if (neg >= num_items) throw Error("batch: negative out of range");
      if (neg == positives[p]) throw Error("batch: negative equals the positive item");
    }
  }
}

Vector ZGrad::flat() const {
  return Eigen::Map<const Vector>(values.data(), values.size());
}

ZGrad ZGrad::from_flat(std::vector<Index> rows, const Vector& flat, std::size_t dim) {
  ZGrad g;
  g.values = Eigen::Map<const Matrix>(flat.data(), static_cast<Eigen::Index>(rows.size()),
                                      static_cast<Eigen::Index>(dim));
  g.rows = std::move(rows);
  return g;
}

Matrix ZGrad::dense(std::size_t num_items) const {
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(num_items), values.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) out.row(rows[k]) = values.row(static_cast<Eigen::Index>(k));
  return out;
}

BatchPass evaluate_batch(const ProjectorParams& theta, const Matrix& z, const ItemLists& histories,
                         const Batch& batch, const LossOptions& opts,
                         std::span<const std::vector<double>> slot_weights, bool want_theta,
                         bool want_z) {
  const std::size_t P = batch.size();
  if (P == 0) throw Error("empty batch");
  if (!(opts.temperature > 0.0)) throw Error("temperature must be > 0");
  const double tau = opts.temperature;
  const std::size_t K1 = batch.num_negatives + 1;
  const auto num_items = static_cast<std::size_t>(z.rows());

  // Local indexing: candidates (positives + negatives) then unique users.
  std::vector<Index> cand = batch.positives;
  cand.insert(cand.end(), batch.negatives.begin(), batch.negatives.end());
  cand = sorted_unique(std::move(cand));
  const std::vector<Index> users = sorted_unique(batch.users);
  const auto C = static_cast<Eigen::Index>(cand.size());
  const auto U = static_cast<Eigen::Index>(users.size());
  std::vector<int> cand_pos(num_items, -1);
  for (Eigen::Index k = 0; k < C; ++k) cand_pos[cand[k]] = static_cast<int>(k);
  std::vector<Eigen::Index> pair_user(P);
  for (std::size_t p = 0; p < P; ++p) {
    pair_user[p] = std::lower_bound(users.begin(), users.end(), batch.users[p]) - users.begin();
  }

  Matrix x(C + U, z.cols());
  for (Eigen::Index k = 0; k < C; ++k) x.row(k) = z.row(cand[k]);
  for (Eigen::Index k = 0; k < U; ++k) {
    const auto& hist = histories.at(users[k]);
    x.row(C + k) = user_representation(z, hist, opts.pooling).transpose();
  }
  const ForwardCache fc = forward(theta, x);
  const Matrix& e = fc.out;

  // Unit rows for cosine scoring; zero rows stay zero.
  Matrix unit = e;
  Vector norms(e.rows());
  if (opts.score == ScoreKind::Cosine) {
    for (Eigen::Index r = 0; r < e.rows(); ++r) {
      norms[r] = e.row(r).norm();
      if (norms[r] > 0.0) {
        unit.row(r) /= norms[r];
      } else {
        unit.row(r).setZero();
      }
    }
  }
  const auto item_rows = unit.topRows(C);
  const auto user_rows = unit.bottomRows(U);
  const Matrix s = (user_rows * item_rows.transpose()) / tau;  // U x C

  BatchPass out;
  out.pair_losses.resize(P);
  Matrix q(P, K1);  // softmax over each pair's candidate list
  std::vector<Eigen::Index> cols(P * K1);
  double total = 0.0;
  for (std::size_t p = 0; p < P; ++p) {
    cols[p * K1] = cand_pos[batch.positives[p]];
    const auto negs = batch.negatives_of(p);
    for (std::size_t k = 0; k < negs.size(); ++k) cols[p * K1 + k + 1] = cand_pos[negs[k]];
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K1; ++k) mx = std::max(mx, s(pair_user[p], cols[p * K1 + k]));
    double sum = 0.0;
    for (std::size_t k = 0; k < K1; ++k) {
      q(p, k) = std::exp(s(pair_user[p], cols[p * K1 + k]) - mx);
      sum += q(p, k);
    }
    q.row(p) /= sum;
    out.pair_losses[p] = mx + std::log(sum) - s(pair_user[p], cols[p * K1]);
    total += out.pair_losses[p];
  }
  out.mean_loss = total / static_cast<double>(P);

  if (!want_theta && !want_z) return out;

  std::vector<int> row_pos;
  if (want_z) {
    std::vector<Index> rows = cand;
    for (Index u : users) rows.insert(rows.end(), histories[u].begin(), histories[u].end());
    out.z_rows = sorted_unique(std::move(rows));
    row_pos.assign(num_items, -1);
    for (std::size_t k = 0; k < out.z_rows.size(); ++k) row_pos[out.z_rows[k]] = static_cast<int>(k);
  }

  for (const auto& weights : slot_weights) {
    if (weights.size() != P) throw Error("evaluate_batch: slot weight length differs from batch size");
    Matrix ds = Matrix::Zero(U, C);
    for (std::size_t p = 0; p < P; ++p) {
      if (weights[p] == 0.0) continue;
      for (std::size_t k = 0; k < K1; ++k) {
        ds(pair_user[p], cols[p * K1 + k]) += weights[p] * (q(p, k) - (k == 0 ? 1.0 : 0.0));
      }
    }
    Matrix de(C + U, e.cols());
    if (opts.score == ScoreKind::Cosine) {
      de.topRows(C) = ds.transpose() * user_rows / tau;
      de.bottomRows(U) = ds * item_rows / tau;
      // Back through row normalization: dx = (dn - (dn . n) n) / |x|.
      for (Eigen::Index r = 0; r < de.rows(); ++r) {
        if (norms[r] > 0.0) {
          const double along = de.row(r).dot(unit.row(r));
          de.row(r) = (de.row(r) - along * unit.row(r)) / norms[r];
        } else {
          de.row(r).setZero();
        }
      }
    } else {
      de.topRows(C) = ds.transpose() * e.bottomRows(U) / tau;
      de.bottomRows(U) = ds * e.topRows(C) / tau;
    }

    Vector gtheta;
    if (want_theta) gtheta = Vector::Zero(theta.values.size());
    const Matrix dx = backward(theta, x, fc, de, want_theta ? &gtheta : nullptr);
    if (want_theta) out.theta_grads.push_back(std::move(gtheta));
    if (want_z) {
      Matrix gz = Matrix::Zero(static_cast<Eigen::Index>(out.z_rows.size()), z.cols());
      for (Eigen::Index k = 0; k < C; ++k) gz.row(row_pos[cand[k]]) += dx.row(k);
      for (Eigen::Index k = 0; k < U; ++k) {
        const auto& hist = histories[users[k]];
        const double factor = opts.pooling == Pooling::Mean ? 1.0 / static_cast<double>(hist.size()) : 1.0;
        for (Index h : hist) gz.row(row_pos[h]) += factor * dx.row(C + k);
      }
      out.z_grads.push_back(std::move(gz));
    }
  }
  return out;
}

namespace {
std::vector<double> mean_weights(std::size_t n) { return std::vector<double>(n, 1.0 / static_cast<double>(n)); }
}  // namespace

double infonce_loss(const ProjectorParams& theta, const Matrix& z, const ItemLists& histories,
                    const Batch& batch, const LossOptions& opts) {
  return evaluate_batch(theta, z, histories, batch, opts, {}, false, false).mean_loss;
}

Vector loss_grad_theta(const ProjectorParams& theta, const Matrix& z, const ItemLists& histories,
                       const Batch& batch, const LossOptions& opts) {
  if (batch.size() == 0) throw Error("empty batch");
  const std::vector<std::vector<double>> slots{mean_weights(batch.size())};
  return std::move(evaluate_batch(theta, z, histories, batch, opts, slots, true, false).theta_grads.front());
}

ZGrad loss_grad_z(const ProjectorParams& theta, const Matrix& z, const ItemLists& histories,
                  const Batch& batch, const LossOptions& opts) {
  if (batch.size() == 0) throw Error("empty batch");
  const std::vector<std::vector<double>> slots{mean_weights(batch.size())};
  auto pass = evaluate_batch(theta, z, histories, batch, opts, slots, false, true);
  return {std::move(pass.z_rows), std::move(pass.z_grads.front())};
}

}  // namespace bifair
