#pragma once

#include <vector>

#include "fedcir/datagen.hpp"
#include "fedcir/models.hpp"

namespace fedcir {

// Exact finite joint over (k, x, y, z); x has size 1 when absent. All
// information quantities are in nats.
class DiscreteJoint {
 public:
  static DiscreteJoint over_kyz(int k, int y, int z, std::vector<double> probs);
  static DiscreteJoint over_kxyz(int k, int x, int y, int z,
                                 std::vector<double> probs);

  int k_size() const { return k_; }
  int x_size() const { return x_; }
  int y_size() const { return y_; }
  int z_size() const { return z_; }
  bool has_x() const { return x_ > 1; }

  double prob(int k, int x, int y, int z) const {
    return p_[((static_cast<std::size_t>(k) * x_ + x) * y_ + y) * z_ + z];
  }
  double prob_kyz(int k, int y, int z) const { return prob(k, 0, y, z); }

  // marginals, flattened over the requested axes
  double p_k(int k) const;
  double p_y(int y) const;
  double p_ky(int k, int y) const;
  double p_yz(int y, int z) const;
  double p_z(int z) const;
  double p_kyz_marginal(int k, int y, int z) const;  // sums out x
  double p_kx(int k, int x) const;
  double p_kxy(int k, int x, int y) const;
  double p_kxz(int k, int x, int z) const;

 private:
  DiscreteJoint(int k, int x, int y, int z, std::vector<double> probs);
  int k_, x_, y_, z_;
  std::vector<double> p_;
};

double entropy_y(const DiscreteJoint& joint);
double entropy_z(const DiscreteJoint& joint);
double entropy_k(const DiscreteJoint& joint);
double conditional_entropy_y_given_z(const DiscreteJoint& joint);

// I(Y;Z), exact summation, 0 log 0 := 0
double mutual_information(const DiscreteJoint& joint);

// I(Z;K|Y)
double conditional_mutual_information(const DiscreteJoint& joint);

// p_hat(y | k, z): row-stochastic in y for every (k, z)
class PredictiveTable {
 public:
  PredictiveTable(int k, int z, int y, std::vector<double> probs);
  static PredictiveTable uniform(int k, int z, int y);
  static PredictiveTable from_joint_posterior(const DiscreteJoint& joint);
  double prob(int k, int z, int y) const {
    return p_[(static_cast<std::size_t>(k) * z_ + z) * y_ + y];
  }
  int k_size() const { return k_; }
  int z_size() const { return z_; }
  int y_size() const { return y_; }

 private:
  int k_, z_, y_;
  std::vector<double> p_;
};

struct BoundReport {
  double lhs = 0.0;
  double rhs = 0.0;
  bool holds = false;
};

// lhs = H(Y|Z); rhs = sum_k p(k) E_{p(y)} E_{p(z|y)} [-log p_hat(y|k,z)]
// (the L_reg bound with q equal to the exact p(z|y))
BoundReport verify_prop1_bound(const DiscreteJoint& joint,
                               const PredictiveTable& p_hat);

// lhs = I(Z;K|Y); rhs = sum_k p(k) E_{p(x,y|k)} KL(p(z|k,x) || p(z|y))
// (the L_align bound with q equal to the exact p(z|y))
BoundReport verify_prop3_bound(const DiscreteJoint& joint);

// random-instance generators for the falsification sweeps; alphabet sizes
// are drawn from [2, max_size]
DiscreteJoint random_joint_kyz(Rng& rng, int max_size = 4);
// factored as p(k,x,y) * p(z|k,x): the paper's encoder structure, under which
// the Prop 3 chain is a theorem
DiscreteJoint random_joint_kxyz_structured(Rng& rng, int max_size = 4);
// p(k,y) * shared p(z|y): client-invariant by construction
DiscreteJoint random_invariant_joint_kyz(Rng& rng, int max_size = 4);
PredictiveTable random_predictive_table(Rng& rng, int k, int z, int y);

// largest |p(z|k,y) - p(z|k',y)| over pairs with p(k,y), p(k',y) > 0
double max_conditional_gap(const DiscreteJoint& joint);

struct PadReport {
  int a_id = -1;
  int b_id = -1;
  double err = 0.0;  // held-out discriminator error
  double pad = 0.0;  // 2 (1 - 2 err)
};

double pad_from_error(double err);

// Trains an L2-regularized logistic discriminator (full-batch gradient
// descent to grad-norm < 1e-6 or 5000 steps) on a 50/50 train/held-out split
// of each set; pad = 2(1 - 2 err) on the held-out halves. Columns are
// samples.
PadReport proxy_a_distance(const Matrix& set_a, const Matrix& set_b, Rng& rng);

// mean negative log predictive density over the shard with a single seeded
// z-sample per datum
double local_risk(const ModelParams& model, const Shard& shard, Rng& rng);

}  // namespace fedcir
