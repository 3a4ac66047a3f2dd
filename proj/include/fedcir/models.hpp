#pragma once

#include <string>
#include <utility>
#include <vector>

#include "fedcir/numerics.hpp"
#include "fedcir/tape.hpp"

namespace fedcir {

// Variance floors: encoder sigma (post-exp) and the MLE table both clamp at
// kSigmaFloor so the closed-form KL never divides by a collapsed variance.
inline constexpr double kSigmaFloor = 1e-3;
// Raw scale-head outputs are clamped to [-kRawScaleClamp, kRawScaleClamp]
// before exp.
inline constexpr double kRawScaleClamp = 10.0;

struct AffineParams {
  Matrix W;  // out x in
  Matrix b;  // out x 1
};

// Probabilistic encoder: shared ReLU trunk, mean head and raw-scale head.
// sigma(x) = max(exp(clamp(raw, +-10)), kSigmaFloor), positive by construction.
struct EncoderParams {
  AffineParams trunk;
  AffineParams mean_head;
  AffineParams scale_head;
  int input_dim() const { return static_cast<int>(trunk.W.cols()); }
  int hidden_dim() const { return static_cast<int>(trunk.W.rows()); }
  int rep_dim() const { return static_cast<int>(mean_head.W.rows()); }
};

// Single affine layer followed by softmax.
struct ClassifierParams {
  AffineParams out;
  int rep_dim() const { return static_cast<int>(out.W.cols()); }
  int class_count() const { return static_cast<int>(out.W.rows()); }
};

// Conditional feature generator: concat(one_hot(y), eps) -> hidden ReLU -> z.
struct GeneratorParams {
  AffineParams hidden;
  AffineParams out;
  int class_count = 0;
  int noise_dim() const {
    return static_cast<int>(hidden.W.cols()) - class_count;
  }
  int rep_dim() const { return static_cast<int>(out.W.rows()); }
};

struct ModelParams {
  EncoderParams encoder;
  ClassifierParams classifier;
};

struct ClassGaussian {
  Vector mu;
  Vector sigma;
};

// Per-class diagonal Gaussian summary of the generator's output distribution.
struct ClassGaussianTable {
  std::vector<ClassGaussian> entries;
  bool empty() const { return entries.empty(); }
  int class_count() const { return static_cast<int>(entries.size()); }
  int rep_dim() const {
    return entries.empty() ? 0 : static_cast<int>(entries[0].mu.size());
  }
};

// ---- construction -------------------------------------------------------

struct ModelDims {
  int input_dim = 8;
  int hidden_dim = 32;
  int rep_dim = 8;
  int class_count = 4;
  int noise_dim = 8;
  int gen_hidden_dim = 32;
};

ModelParams init_model(const ModelDims& dims, Rng& rng);
GeneratorParams init_generator(const ModelDims& dims, Rng& rng);

// ---- plain (no-tape) forward passes --------------------------------------

std::pair<Vector, Vector> encode(const EncoderParams& enc, const Vector& x);
std::pair<Matrix, Matrix> encode_batch(const EncoderParams& enc, const Matrix& X);
// deterministic test-time representation (mean head only)
Matrix encode_mean(const EncoderParams& enc, const Matrix& X);

Vector reparameterize(const Vector& mu, const Vector& sigma, const Vector& eps);

Vector classify(const ClassifierParams& cls, const Vector& z);
Matrix classify_batch(const ClassifierParams& cls, const Matrix& Z);

Vector generate(const GeneratorParams& gen, int label, const Vector& eps);
Matrix generate_batch(const GeneratorParams& gen, const VectorXi& labels,
                      const Matrix& eps);

// Closed-form KL between diagonal Gaussians, summed over coordinates:
//   log(sg) - log(sl) + (sl^2 + (ml - mg)^2) / (2 sg^2) - 1/2
double kl_diag_gaussian(const Vector& mu_l, const Vector& sigma_l,
                        const Vector& mu_g, const Vector& sigma_g);

// Per-coordinate MLE: sample mean and population (divide-by-n) standard
// deviation, clamped below by kSigmaFloor. Throws DataError naming the first
// class with zero samples.
ClassGaussianTable fit_class_gaussians(
    const std::vector<std::vector<Vector>>& samples_by_class);

// ---- tape subgraphs -------------------------------------------------------

struct EncoderVars {
  Var trunk_W, trunk_b, mean_W, mean_b, scale_W, scale_b;
};
struct ClassifierVars {
  Var W, b;
};
struct GeneratorVars {
  Var hidden_W, hidden_b, out_W, out_b;
};
struct EncodedVars {
  Var mu, sigma;
};

EncoderVars register_encoder(Tape& t, const EncoderParams& enc);
ClassifierVars register_classifier(Tape& t, const ClassifierParams& cls);
GeneratorVars register_generator(Tape& t, const GeneratorParams& gen);

EncodedVars encode_graph(Tape& t, const EncoderVars& enc, const Matrix& X);
// z = mu + sigma .* eps; eps enters as a constant, so no gradient reaches it
Var reparameterize_graph(Tape& t, const EncodedVars& e, const Matrix& eps);
Var classify_graph(Tape& t, const ClassifierVars& cls, Var z);
Var generate_graph(Tape& t, const GeneratorVars& gen, const Matrix& input);

// mean over columns of -log(max(probs[label], kLogGuard))
Var cross_entropy_graph(Tape& t, Var probs, const VectorXi& labels);
// mean over columns of the per-sample KL against fixed per-sample targets
Var kl_graph(Tape& t, const EncodedVars& e, const Matrix& mu_g_cols,
             const Matrix& sigma_g_cols);

// one-hot(y) stacked over eps, one column per sample
Matrix generator_input(int class_count, const VectorXi& labels,
                       const Matrix& eps);

// ---- parameter plumbing ---------------------------------------------------

std::vector<Matrix*> tensor_list(ModelParams& m);
std::vector<const Matrix*> tensor_list(const ModelParams& m);
std::vector<Matrix*> tensor_list(GeneratorParams& g);
std::vector<const Matrix*> tensor_list(const GeneratorParams& g);

bool same_values(const ModelParams& a, const ModelParams& b);
bool same_values(const GeneratorParams& a, const GeneratorParams& b);

Vector flatten(const std::vector<const Matrix*>& tensors);
void unflatten(const Vector& flat, const std::vector<Matrix*>& tensors);

// ---- checkpoint file ------------------------------------------------------

struct CheckpointMeta {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string variant;
};

struct Checkpoint {
  ModelParams model;
  GeneratorParams generator;
  CheckpointMeta meta;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

std::size_t serialized_byte_size(const ModelParams& m);
std::size_t serialized_byte_size(const GeneratorParams& g);
std::size_t serialized_byte_size(const ClassGaussianTable& t);

}  // namespace fedcir
