#pragma once

#include <string>
#include <utility>
#include <vector>

#include "fedcir/tape.hpp"

namespace fedcir {

// Shared latent labeling function: every domain draws samples from the same
// class means, so the covariate-shift premise (one global labeling function)
// holds by construction.
struct LatentTask {
  int class_count = 0;
  int input_dim = 0;
  Matrix class_means;  // input_dim x class_count, pairwise distinct columns
  double noise_scale = 0.0;
  std::uint64_t seed = 0;
};

LatentTask make_latent_task(int class_count, int input_dim, double class_sep,
                            double noise_scale, std::uint64_t seed);

// Invertible per-domain transform: x -> scale .* (R x) + bias with R built
// from a Givens rotation angle list (angle t acts on plane (p, p+1),
// p = t mod (dim-1)).
struct DomainSpec {
  Matrix rotation;
  Vector scale;
  Vector bias;
};

Matrix rotation_from_angles(int dim, const std::vector<double>& angles);
DomainSpec make_domain_spec(int dim, const std::vector<double>& angles,
                            const Vector& scale, const Vector& bias);

Vector apply_domain_shift(const DomainSpec& spec, const Vector& x);
Matrix apply_domain_shift(const DomainSpec& spec, const Matrix& X);
Vector invert_domain_shift(const DomainSpec& spec, const Vector& x);
Matrix invert_domain_shift(const DomainSpec& spec, const Matrix& X);

// samples: input_dim x n, labels balanced to within one per class
// (label of column i is i mod C), sample = class_mean[y] + noise.
std::pair<Matrix, VectorXi> make_base_dataset(const LatentTask& task, int n);

struct Shard {
  int client_id = 0;
  Matrix inputs;   // input_dim x n
  VectorXi labels;
  double weight = 0.0;  // p(k) = shard size / federation train size
};

// Per-class allocation proportions drawn from Dirichlet(beta); every index
// assigned exactly once; empty clients repaired by moving one sample from
// the largest shard.
std::vector<std::vector<int>> dirichlet_partition(const VectorXi& labels,
                                                  int n_clients, double beta,
                                                  Rng& rng);

enum class PartitionMode { FeatureShift, Dirichlet };

struct DataConfig {
  int class_count = 4;
  int input_dim = 8;
  int n_domains = 4;
  int samples_per_domain = 250;
  double noise_scale = 0.30;
  double class_sep = 2.0;
  double rotation_max = 1.2;   // |Givens angle| upper bound, radians
  double scale_min = 0.6;
  double scale_max = 1.6;
  double bias_max = 1.5;
  PartitionMode partition = PartitionMode::FeatureShift;
  int n_clients = 4;  // FeatureShift forces n_clients == n_domains
  double dirichlet_beta = 0.5;
};

struct Federation {
  LatentTask task;
  std::vector<DomainSpec> domains;
  std::vector<Shard> shards;      // sorted by client_id
  Matrix test_inputs;             // held-out mixed-domain set, never sharded
  VectorXi test_labels;
};

// Deterministic in (config, seed). Every fifth sample of each domain goes to
// the shared test pool (20%); the rest are sharded per the partition mode.
Federation build_federation(const DataConfig& cfg, std::uint64_t seed);

// versioned binary dataset file; round-trips bit-exactly
void save_dataset(const std::string& path, const Federation& fed,
                  const std::string& provenance);
Federation load_dataset(const std::string& path);

}  // namespace fedcir
