#pragma once

#include <optional>
#include <string>
#include <vector>

#include "fedcir/datagen.hpp"
#include "fedcir/models.hpp"

namespace fedcir {

enum class Variant { FedAvg, FedProx, FedReg, FedAlign, FedCiR };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);

struct FedConfig {
  int rounds = 100;        // T
  int local_steps = 20;    // E
  int gen_steps = 5;       // E_g
  int batch_size = 32;     // B
  double lr = 0.01;
  double gen_lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double lambda_reg = 0.5;
  double lambda_align = 1e-6;
  double prox_mu = 0.1;    // FedProx only
  double client_ratio = 1.0;
  int table_samples = 256;  // generator draws per class for the MLE table
  Variant variant = Variant::FedAvg;
  std::uint64_t seed = 1;

  void validate() const;
};

struct ClientState {
  Shard shard;
  ModelParams model;
};

struct ServerState {
  ModelParams model;
  GeneratorParams generator;
  ClassGaussianTable table;
  int round = 0;  // completed rounds
  // cumulative transfer/compute counters, monotone across rounds
  std::uint64_t bytes_up = 0;
  std::uint64_t bytes_down = 0;
  std::uint64_t scalar_muls = 0;
};

struct RoundMetrics {
  int round = 0;
  Variant variant = Variant::FedAvg;
  std::uint64_t seed = 0;
  double test_acc = 0.0;
  double mean_local_risk = 0.0;
  double mean_train_loss = 0.0;
  std::vector<double> client_losses;  // aligned with the active set
  std::vector<int> active_clients;
  std::uint64_t bytes_up = 0;
  std::uint64_t bytes_down = 0;
  std::uint64_t flops = 0;
};

// Variant- and warmup-masked regularizer weights. The first round runs with
// an empty table, so both weights collapse to zero there (warmup).
struct EffectiveWeights {
  double reg = 0.0;
  double align = 0.0;
  bool any() const { return reg > 0.0 || align > 0.0; }
};

EffectiveWeights effective_weights(const FedConfig& cfg, bool table_ready);
// true when the variant's own lambdas (ignoring warmup) require server-side
// generator training and a table refresh
bool server_generator_enabled(const FedConfig& cfg);

// subset of size max(1, floor(ratio * n)), uniform without replacement,
// returned in ascending id order
std::vector<int> sample_clients(const std::vector<int>& ids, double ratio,
                                Rng& rng);

struct LocalBatch {
  Matrix inputs;   // d_x x B
  VectorXi labels;
  Matrix eps_z;    // d_z x B, reparameterization noise
};

struct GenBatch {
  VectorXi labels;  // B uniform class draws
  Matrix eps;       // d_eps x B
};

struct LossParts {
  double total = 0.0;
  double fl = 0.0;
  double reg = 0.0;
  double align = 0.0;
};

// Per-batch local objective: L_fl + lambda_reg * L_reg + lambda_align *
// L_align, built on the tape so gradients for all model parameters are one
// backward() away. Generated representations flow through the local
// classifier only (the generator stays frozen on clients). Returns the loss
// breakdown; `loss` receives the tape root.
LossParts fedcir_local_loss(Tape& tape, const EncoderVars& enc,
                            const ClassifierVars& cls,
                            const GeneratorParams& generator,
                            const ClassGaussianTable& table,
                            const LocalBatch& batch,
                            const std::optional<GenBatch>& gen_batch,
                            double lambda_reg, double lambda_align, Var* loss);

struct LocalUpdateResult {
  ModelParams model;
  double mean_step_loss = 0.0;
  std::uint64_t scalar_muls = 0;
};

// E steps of mini-batch SGD with momentum and weight decay. Batches, eps and
// generator draws come from per-(client, round) substreams of the master
// seed, so client execution order can never change results.
LocalUpdateResult local_update(const ClientState& client,
                               const ModelParams& global_model,
                               const GeneratorParams& generator,
                               const ClassGaussianTable& table,
                               const FedConfig& cfg, int round);

// unweighted elementwise mean in ascending client-id order
ModelParams aggregate(const std::vector<std::pair<int, ModelParams>>& uploads);

struct GeneratorTrainResult {
  std::uint64_t scalar_muls = 0;
  std::vector<double> step_losses;
};

// L_g on one batch: -mean log of the probability-space ensemble of the
// (frozen) classifiers evaluated on generated representations
Var generator_ensemble_loss_graph(Tape& tape, const GeneratorVars& gen_vars,
                                  const std::vector<ClassifierParams>& classifiers,
                                  const std::vector<double>& weights,
                                  int class_count, const VectorXi& labels,
                                  const Matrix& eps);

// E_g steps on the ensemble-consensus loss: the probability-space mean of the
// uploaded classifiers' predictions on generated representations, before the
// log. Plain SGD; classifiers stay frozen.
GeneratorTrainResult train_generator(
    const std::vector<ClassifierParams>& classifiers,
    const std::vector<double>& weights, GeneratorParams& generator,
    const FedConfig& cfg, Rng& rng);

// m generator draws per class, summarized by fit_class_gaussians
ClassGaussianTable refresh_class_table(const GeneratorParams& generator,
                                       int samples_per_class, Rng& rng);

RoundMetrics run_round(ServerState& server, std::vector<ClientState>& clients,
                       const Matrix& test_inputs, const VectorXi& test_labels,
                       const FedConfig& cfg);

double test_accuracy(const ModelParams& model, const Matrix& inputs,
                     const VectorXi& labels);

}  // namespace fedcir
