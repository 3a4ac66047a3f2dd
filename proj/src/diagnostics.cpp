#include "fedcir/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace fedcir {

namespace {

double xlogx(double x) { return x > 0.0 ? x * std::log(x) : 0.0; }

}  // namespace

DiscreteJoint::DiscreteJoint(int k, int x, int y, int z,
                             std::vector<double> probs)
    : k_(k), x_(x), y_(y), z_(z), p_(std::move(probs)) {
  if (k_ < 1 || x_ < 1 || y_ < 1 || z_ < 1)
    throw DataError("DiscreteJoint: alphabet sizes must be positive");
  if (p_.size() != static_cast<std::size_t>(k_) * x_ * y_ * z_)
    throw DataError("DiscreteJoint: table size does not match alphabets");
  double total = 0.0;
  for (const double v : p_) {
    if (!(v >= 0.0))
      throw DataError("DiscreteJoint: negative or NaN probability entry");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-12)
    throw DataError("DiscreteJoint: total mass " + std::to_string(total) +
                    " is not 1");
}

DiscreteJoint DiscreteJoint::over_kyz(int k, int y, int z,
                                      std::vector<double> probs) {
  return DiscreteJoint(k, 1, y, z, std::move(probs));
}

DiscreteJoint DiscreteJoint::over_kxyz(int k, int x, int y, int z,
                                       std::vector<double> probs) {
  return DiscreteJoint(k, x, y, z, std::move(probs));
}

double DiscreteJoint::p_k(int k) const {
  double s = 0.0;
  for (int x = 0; x < x_; ++x)
    for (int y = 0; y < y_; ++y)
      for (int z = 0; z < z_; ++z) s += prob(k, x, y, z);
  return s;
}

double DiscreteJoint::p_y(int y) const {
  double s = 0.0;
  for (int k = 0; k < k_; ++k)
    for (int x = 0; x < x_; ++x)
      for (int z = 0; z < z_; ++z) s += prob(k, x, y, z);
  return s;
}

double DiscreteJoint::p_ky(int k, int y) const {
  double s = 0.0;
  for (int x = 0; x < x_; ++x)
    for (int z = 0; z < z_; ++z) s += prob(k, x, y, z);
  return s;
}

double DiscreteJoint::p_yz(int y, int z) const {
  double s = 0.0;
  for (int k = 0; k < k_; ++k)
    for (int x = 0; x < x_; ++x) s += prob(k, x, y, z);
  return s;
}

double DiscreteJoint::p_z(int z) const {
  double s = 0.0;
  for (int k = 0; k < k_; ++k)
    for (int x = 0; x < x_; ++x)
      for (int y = 0; y < y_; ++y) s += prob(k, x, y, z);
  return s;
}

double DiscreteJoint::p_kyz_marginal(int k, int y, int z) const {
  double s = 0.0;
  for (int x = 0; x < x_; ++x) s += prob(k, x, y, z);
  return s;
}

double DiscreteJoint::p_kx(int k, int x) const {
  double s = 0.0;
  for (int y = 0; y < y_; ++y)
    for (int z = 0; z < z_; ++z) s += prob(k, x, y, z);
  return s;
}

double DiscreteJoint::p_kxy(int k, int x, int y) const {
  double s = 0.0;
  for (int z = 0; z < z_; ++z) s += prob(k, x, y, z);
  return s;
}

double DiscreteJoint::p_kxz(int k, int x, int z) const {
  double s = 0.0;
  for (int y = 0; y < y_; ++y) s += prob(k, x, y, z);
  return s;
}

double entropy_y(const DiscreteJoint& joint) {
  double h = 0.0;
  for (int y = 0; y < joint.y_size(); ++y) h -= xlogx(joint.p_y(y));
  return h;
}

double entropy_z(const DiscreteJoint& joint) {
  double h = 0.0;
  for (int z = 0; z < joint.z_size(); ++z) h -= xlogx(joint.p_z(z));
  return h;
}

double entropy_k(const DiscreteJoint& joint) {
  double h = 0.0;
  for (int k = 0; k < joint.k_size(); ++k) h -= xlogx(joint.p_k(k));
  return h;
}

double conditional_entropy_y_given_z(const DiscreteJoint& joint) {
  // H(Y|Z) = -sum_{y,z} p(y,z) log(p(y,z) / p(z))
  double h = 0.0;
  for (int z = 0; z < joint.z_size(); ++z) {
    const double pz = joint.p_z(z);
    if (pz <= 0.0) continue;
    for (int y = 0; y < joint.y_size(); ++y) {
      const double pyz = joint.p_yz(y, z);
      if (pyz <= 0.0) continue;
      h -= pyz * std::log(pyz / pz);
    }
  }
  return h;
}

double mutual_information(const DiscreteJoint& joint) {
  double mi = 0.0;
  for (int y = 0; y < joint.y_size(); ++y) {
    const double py = joint.p_y(y);
    if (py <= 0.0) continue;
    for (int z = 0; z < joint.z_size(); ++z) {
      const double pz = joint.p_z(z);
      const double pyz = joint.p_yz(y, z);
      if (pyz <= 0.0) continue;
      mi += pyz * std::log(pyz / (py * pz));
    }
  }
  return mi;
}

double conditional_mutual_information(const DiscreteJoint& joint) {
  // I(Z;K|Y) = sum_{k,y,z} p(k,y,z) log( p(z|k,y) / p(z|y) )
  double cmi = 0.0;
  for (int k = 0; k < joint.k_size(); ++k) {
    for (int y = 0; y < joint.y_size(); ++y) {
      const double pky = joint.p_ky(k, y);
      if (pky <= 0.0) continue;
      const double py = joint.p_y(y);
      for (int z = 0; z < joint.z_size(); ++z) {
        const double pkyz = joint.p_kyz_marginal(k, y, z);
        if (pkyz <= 0.0) continue;
        const double pz_ky = pkyz / pky;
        const double pz_y = joint.p_yz(y, z) / py;
        cmi += pkyz * std::log(pz_ky / pz_y);
      }
    }
  }
  return cmi;
}

PredictiveTable::PredictiveTable(int k, int z, int y, std::vector<double> probs)
    : k_(k), z_(z), y_(y), p_(std::move(probs)) {
  if (p_.size() != static_cast<std::size_t>(k_) * z_ * y_)
    throw DataError("PredictiveTable: table size does not match alphabets");
  for (int kk = 0; kk < k_; ++kk)
    for (int zz = 0; zz < z_; ++zz) {
      double row = 0.0;
      for (int yy = 0; yy < y_; ++yy) {
        const double v = prob(kk, zz, yy);
        if (!(v >= 0.0))
          throw DataError("PredictiveTable: negative entry in row (" +
                          std::to_string(kk) + ", " + std::to_string(zz) + ")");
        row += v;
      }
      if (std::abs(row - 1.0) > 1e-9)
        throw DataError("PredictiveTable: row (" + std::to_string(kk) + ", " +
                        std::to_string(zz) + ") sums to " + std::to_string(row));
    }
}

PredictiveTable PredictiveTable::uniform(int k, int z, int y) {
  return PredictiveTable(
      k, z, y,
      std::vector<double>(static_cast<std::size_t>(k) * z * y, 1.0 / y));
}

PredictiveTable PredictiveTable::from_joint_posterior(const DiscreteJoint& joint) {
  const int K = joint.k_size(), Z = joint.z_size(), Y = joint.y_size();
  std::vector<double> probs(static_cast<std::size_t>(K) * Z * Y);
  for (int z = 0; z < Z; ++z) {
    const double pz = joint.p_z(z);
    for (int y = 0; y < Y; ++y) {
      const double post = pz > 0.0 ? joint.p_yz(y, z) / pz : 1.0 / Y;
      for (int k = 0; k < K; ++k)
        probs[(static_cast<std::size_t>(k) * Z + z) * Y + y] = post;
    }
  }
  return PredictiveTable(K, Z, Y, std::move(probs));
}

BoundReport verify_prop1_bound(const DiscreteJoint& joint,
                               const PredictiveTable& p_hat) {
  if (p_hat.k_size() != joint.k_size() || p_hat.z_size() != joint.z_size() ||
      p_hat.y_size() != joint.y_size())
    throw DataError("verify_prop1_bound: alphabet mismatch");
  BoundReport report;
  report.lhs = conditional_entropy_y_given_z(joint);
  // rhs: sum_k p(k) sum_y p(y) sum_z p(z|y) [-log p_hat(y|k,z)]
  double rhs = 0.0;
  for (int k = 0; k < joint.k_size() && std::isfinite(rhs); ++k) {
    const double pk = joint.p_k(k);
    if (pk <= 0.0) continue;
    for (int y = 0; y < joint.y_size(); ++y) {
      for (int z = 0; z < joint.z_size(); ++z) {
        const double pyz = joint.p_yz(y, z);  // p(y) p(z|y)
        if (pyz <= 0.0) continue;
        const double q = p_hat.prob(k, z, y);
        if (q <= 0.0) {
          rhs = std::numeric_limits<double>::infinity();
          break;
        }
        rhs -= pk * pyz * std::log(q);
      }
    }
  }
  report.rhs = rhs;
  report.holds = report.lhs <= report.rhs + 1e-10;
  return report;
}

BoundReport verify_prop3_bound(const DiscreteJoint& joint) {
  BoundReport report;
  report.lhs = conditional_mutual_information(joint);
  double rhs = 0.0;
  for (int k = 0; k < joint.k_size() && std::isfinite(rhs); ++k) {
    for (int x = 0; x < joint.x_size() && std::isfinite(rhs); ++x) {
      const double pkx = joint.p_kx(k, x);
      if (pkx <= 0.0) continue;
      for (int y = 0; y < joint.y_size(); ++y) {
        const double pkxy = joint.p_kxy(k, x, y);
        if (pkxy <= 0.0) continue;
        const double py = joint.p_y(y);
        double kl = 0.0;
        for (int z = 0; z < joint.z_size(); ++z) {
          const double pz_kx = joint.p_kxz(k, x, z) / pkx;
          if (pz_kx <= 0.0) continue;
          const double pz_y = joint.p_yz(y, z) / py;
          if (pz_y <= 0.0) {
            kl = std::numeric_limits<double>::infinity();
            break;
          }
          kl += pz_kx * std::log(pz_kx / pz_y);
        }
        rhs += pkxy * kl;
        if (!std::isfinite(rhs)) break;
      }
    }
  }
  report.rhs = rhs;
  report.holds = report.lhs <= report.rhs + 1e-10;
  return report;
}

namespace {

std::vector<double> dirichlet_flat(Rng& rng, std::size_t n) {
  // symmetric Dirichlet(1) == normalized Exp(1) draws
  std::vector<double> p(n);
  double total = 0.0;
  for (double& v : p) total += (v = -std::log(rng.uniform_pos()));
  for (double& v : p) v /= total;
  return p;
}

int alphabet(Rng& rng, int max_size) { return 2 + rng.uniform_int(max_size - 1); }

}  // namespace

DiscreteJoint random_joint_kyz(Rng& rng, int max_size) {
  const int K = alphabet(rng, max_size);
  const int Y = alphabet(rng, max_size);
  const int Z = alphabet(rng, max_size);
  return DiscreteJoint::over_kyz(
      K, Y, Z, dirichlet_flat(rng, static_cast<std::size_t>(K) * Y * Z));
}

DiscreteJoint random_joint_kxyz_structured(Rng& rng, int max_size) {
  const int K = alphabet(rng, max_size);
  const int X = alphabet(rng, max_size);
  const int Y = alphabet(rng, max_size);
  const int Z = alphabet(rng, max_size);
  const std::vector<double> pkxy =
      dirichlet_flat(rng, static_cast<std::size_t>(K) * X * Y);
  std::vector<double> joint(static_cast<std::size_t>(K) * X * Y * Z);
  for (int k = 0; k < K; ++k)
    for (int x = 0; x < X; ++x) {
      const std::vector<double> pz_kx = dirichlet_flat(rng, Z);
      for (int y = 0; y < Y; ++y)
        for (int z = 0; z < Z; ++z)
          joint[((static_cast<std::size_t>(k) * X + x) * Y + y) * Z + z] =
              pkxy[(static_cast<std::size_t>(k) * X + x) * Y + y] * pz_kx[z];
    }
  return DiscreteJoint::over_kxyz(K, X, Y, Z, std::move(joint));
}

DiscreteJoint random_invariant_joint_kyz(Rng& rng, int max_size) {
  const int K = alphabet(rng, max_size);
  const int Y = alphabet(rng, max_size);
  const int Z = alphabet(rng, max_size);
  const std::vector<double> pky = dirichlet_flat(rng, static_cast<std::size_t>(K) * Y);
  std::vector<double> joint(static_cast<std::size_t>(K) * Y * Z);
  for (int y = 0; y < Y; ++y) {
    const std::vector<double> pz_y = dirichlet_flat(rng, Z);
    for (int k = 0; k < K; ++k)
      for (int z = 0; z < Z; ++z)
        joint[(static_cast<std::size_t>(k) * Y + y) * Z + z] =
            pky[static_cast<std::size_t>(k) * Y + y] * pz_y[z];
  }
  return DiscreteJoint::over_kyz(K, Y, Z, std::move(joint));
}

PredictiveTable random_predictive_table(Rng& rng, int k, int z, int y) {
  std::vector<double> probs(static_cast<std::size_t>(k) * z * y);
  for (int kk = 0; kk < k; ++kk)
    for (int zz = 0; zz < z; ++zz) {
      const std::vector<double> row = dirichlet_flat(rng, y);
      for (int yy = 0; yy < y; ++yy)
        probs[(static_cast<std::size_t>(kk) * z + zz) * y + yy] = row[yy];
    }
  return PredictiveTable(k, z, y, std::move(probs));
}

double max_conditional_gap(const DiscreteJoint& joint) {
  double gap = 0.0;
  for (int y = 0; y < joint.y_size(); ++y) {
    for (int k1 = 0; k1 < joint.k_size(); ++k1) {
      const double p1 = joint.p_ky(k1, y);
      if (p1 <= 0.0) continue;
      for (int k2 = k1 + 1; k2 < joint.k_size(); ++k2) {
        const double p2 = joint.p_ky(k2, y);
        if (p2 <= 0.0) continue;
        for (int z = 0; z < joint.z_size(); ++z) {
          const double d = std::abs(joint.p_kyz_marginal(k1, y, z) / p1 -
                                    joint.p_kyz_marginal(k2, y, z) / p2);
          gap = std::max(gap, d);
        }
      }
    }
  }
  return gap;
}

double pad_from_error(double err) { return 2.0 * (1.0 - 2.0 * err); }

PadReport proxy_a_distance(const Matrix& set_a, const Matrix& set_b, Rng& rng) {
  if (set_a.cols() < 4 || set_b.cols() < 4)
    throw DataError("proxy_a_distance: each set needs at least 4 samples");
  if (set_a.rows() != set_b.rows())
    throw DimensionError("proxy_a_distance: " + shape_str(set_a) + " vs " +
                         shape_str(set_b));
  const int d = static_cast<int>(set_a.rows());

  const auto split = [&rng](const Matrix& set, Matrix& train, Matrix& test) {
    std::vector<int> idx(set.cols());
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = static_cast<int>(idx.size()) - 1; i > 0; --i)
      std::swap(idx[i], idx[rng.uniform_int(i + 1)]);
    const int half = static_cast<int>(idx.size()) / 2;
    train.resize(set.rows(), half);
    test.resize(set.rows(), static_cast<Eigen::Index>(idx.size()) - half);
    for (int i = 0; i < half; ++i) train.col(i) = set.col(idx[i]);
    for (std::size_t i = half; i < idx.size(); ++i)
      test.col(static_cast<Eigen::Index>(i) - half) = set.col(idx[i]);
  };

  Matrix train_a, test_a, train_b, test_b;
  split(set_a, train_a, test_a);
  split(set_b, train_b, test_b);

  const Eigen::Index n_train = train_a.cols() + train_b.cols();
  Matrix X(d, n_train);
  X << train_a, train_b;
  Vector sign(n_train);  // -1 for set a, +1 for set b
  sign.head(train_a.cols()).setConstant(-1.0);
  sign.tail(train_b.cols()).setConstant(1.0);

  // standardize features on the training halves
  const Vector mean = X.rowwise().mean();
  Vector sd(d);
  for (int i = 0; i < d; ++i) {
    const double var =
        (X.row(i).array() - mean[i]).square().sum() / static_cast<double>(n_train);
    sd[i] = std::max(std::sqrt(var), 1e-8);
  }
  const Matrix Xs = ((X.colwise() - mean).array().colwise() / sd.array()).matrix();

  // L2-regularized logistic regression, full-batch gradient descent with a
  // Lipschitz-safe fixed step
  const double l2 = 1e-3;
  Vector w = Vector::Zero(d);
  double b = 0.0;
  const double lip =
      0.25 * (Xs.squaredNorm() / static_cast<double>(n_train) + 1.0) + l2;
  const double step = 1.0 / lip;
  for (int iter = 0; iter < 5000; ++iter) {
    const Vector margin = (Xs.transpose() * w).array() + b;
    // d/dm of mean log(1 + exp(-s m)) = -s * sigmoid(-s m) / n
    Vector coef(n_train);
    for (Eigen::Index j = 0; j < n_train; ++j)
      coef[j] = -sign[j] / (1.0 + std::exp(sign[j] * margin[j]));
    const Vector grad_w = Xs * coef / static_cast<double>(n_train) + l2 * w;
    const double grad_b = coef.sum() / static_cast<double>(n_train);
    w -= step * grad_w;
    b -= step * grad_b;
    if (std::sqrt(grad_w.squaredNorm() + grad_b * grad_b) < 1e-6) break;
  }

  const auto errors = [&](const Matrix& set, double label_sign) {
    int wrong = 0;
    for (Eigen::Index j = 0; j < set.cols(); ++j) {
      const Vector xs = ((set.col(j) - mean).array() / sd.array()).matrix();
      const double margin = w.dot(xs) + b;
      if (margin * label_sign <= 0.0) ++wrong;
    }
    return wrong;
  };
  const int wrong = errors(test_a, -1.0) + errors(test_b, 1.0);
  const double err = static_cast<double>(wrong) /
                     static_cast<double>(test_a.cols() + test_b.cols());

  PadReport report;
  report.err = err;
  report.pad = pad_from_error(err);
  return report;
}

double local_risk(const ModelParams& model, const Shard& shard, Rng& rng) {
  if (shard.inputs.cols() == 0)
    throw DataError("local_risk: empty shard for client " +
                    std::to_string(shard.client_id));
  const auto [mu, sigma] = encode_batch(model.encoder, shard.inputs);
  Matrix z(mu.rows(), mu.cols());
  for (Eigen::Index j = 0; j < mu.cols(); ++j)
    for (Eigen::Index i = 0; i < mu.rows(); ++i)
      z(i, j) = mu(i, j) + sigma(i, j) * rng.normal();
  const Matrix probs = classify_batch(model.classifier, z);
  double total = 0.0;
  for (Eigen::Index j = 0; j < probs.cols(); ++j)
    total += cross_entropy(probs.col(j), shard.labels[j]);
  return total / static_cast<double>(probs.cols());
}

}  // namespace fedcir
