#include "fedcir/fedproto.hpp"

#include <algorithm>
#include <cmath>

#include "fedcir/diagnostics.hpp"

namespace fedcir {

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::FedAvg: return "fedavg";
    case Variant::FedProx: return "fedprox";
    case Variant::FedReg: return "fedreg";
    case Variant::FedAlign: return "fedalign";
    case Variant::FedCiR: return "fedcir";
  }
  throw StateError("variant_name: unknown variant");
}

Variant variant_from_name(const std::string& name) {
  if (name == "fedavg") return Variant::FedAvg;
  if (name == "fedprox") return Variant::FedProx;
  if (name == "fedreg") return Variant::FedReg;
  if (name == "fedalign") return Variant::FedAlign;
  if (name == "fedcir") return Variant::FedCiR;
  throw ConfigError("unknown variant '" + name + "'");
}

void FedConfig::validate() const {
  if (rounds < 1) throw ConfigError("fed.rounds must be >= 1");
  if (local_steps < 1) throw ConfigError("fed.local_steps must be >= 1");
  if (gen_steps < 0) throw ConfigError("fed.gen_steps must be >= 0");
  if (batch_size < 1) throw ConfigError("fed.batch_size must be >= 1");
  if (lr <= 0.0) throw ConfigError("fed.lr must be > 0");
  if (gen_lr <= 0.0) throw ConfigError("fed.gen_lr must be > 0");
  if (momentum < 0.0 || momentum >= 1.0)
    throw ConfigError("fed.momentum must be in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("fed.weight_decay must be >= 0");
  if (lambda_reg < 0.0) throw ConfigError("fed.lambda_reg must be >= 0");
  if (lambda_align < 0.0) throw ConfigError("fed.lambda_align must be >= 0");
  if (prox_mu < 0.0) throw ConfigError("fed.prox_mu must be >= 0");
  if (client_ratio <= 0.0 || client_ratio > 1.0)
    throw ConfigError("fed.client_ratio must be in (0, 1]");
  if (table_samples < 1) throw ConfigError("fed.table_samples must be >= 1");
}

EffectiveWeights effective_weights(const FedConfig& cfg, bool table_ready) {
  EffectiveWeights w;
  if (!table_ready) return w;  // round-1 warmup: no generator, no table yet
  switch (cfg.variant) {
    case Variant::FedAvg:
    case Variant::FedProx:
      break;
    case Variant::FedReg:
      w.reg = cfg.lambda_reg;
      break;
    case Variant::FedAlign:
      w.align = cfg.lambda_align;
      break;
    case Variant::FedCiR:
      w.reg = cfg.lambda_reg;
      w.align = cfg.lambda_align;
      break;
  }
  return w;
}

bool server_generator_enabled(const FedConfig& cfg) {
  switch (cfg.variant) {
    case Variant::FedAvg:
    case Variant::FedProx:
      return false;
    case Variant::FedReg:
      return cfg.lambda_reg > 0.0;
    case Variant::FedAlign:
      return cfg.lambda_align > 0.0;
    case Variant::FedCiR:
      return cfg.lambda_reg > 0.0 || cfg.lambda_align > 0.0;
  }
  return false;
}

std::vector<int> sample_clients(const std::vector<int>& ids, double ratio,
                                Rng& rng) {
  if (ids.empty()) throw ConfigError("sample_clients: no clients");
  if (ratio <= 0.0 || ratio > 1.0)
    throw ConfigError("sample_clients: ratio must be in (0, 1]");
  const int m = std::max(
      1, static_cast<int>(std::floor(ratio * static_cast<double>(ids.size()))));
  std::vector<int> pool = ids;
  for (int i = 0; i < m; ++i) {
    const int j = i + rng.uniform_int(static_cast<int>(pool.size()) - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(m);
  std::sort(pool.begin(), pool.end());
  return pool;
}

LossParts fedcir_local_loss(Tape& tape, const EncoderVars& enc,
                            const ClassifierVars& cls,
                            const GeneratorParams& generator,
                            const ClassGaussianTable& table,
                            const LocalBatch& batch,
                            const std::optional<GenBatch>& gen_batch,
                            double lambda_reg, double lambda_align, Var* loss) {
  if ((lambda_reg > 0.0 || lambda_align > 0.0) && table.empty())
    throw StateError(
        "fedcir_local_loss: regularizers requested before the global "
        "representation table exists");
  if (lambda_reg > 0.0 && !gen_batch)
    throw StateError("fedcir_local_loss: lambda_reg > 0 needs a gen batch");

  LossParts parts;
  const EncodedVars encoded = encode_graph(tape, enc, batch.inputs);
  const Var z = reparameterize_graph(tape, encoded, batch.eps_z);
  const Var probs = classify_graph(tape, cls, z);
  Var total = cross_entropy_graph(tape, probs, batch.labels);
  parts.fl = tape.value(total)(0, 0);

  if (lambda_reg > 0.0) {
    // generated z is a constant here: the generator stays frozen on clients
    const Matrix z_gen = generate_batch(generator, gen_batch->labels, gen_batch->eps);
    const Var gen_probs = classify_graph(tape, cls, tape.constant(z_gen));
    const Var reg = cross_entropy_graph(tape, gen_probs, gen_batch->labels);
    parts.reg = tape.value(reg)(0, 0);
    total = tape.add(total, tape.scale(reg, lambda_reg));
  }

  if (lambda_align > 0.0) {
    const int d = table.rep_dim();
    Matrix mu_g(d, batch.labels.size()), sigma_g(d, batch.labels.size());
    for (Eigen::Index j = 0; j < batch.labels.size(); ++j) {
      const int y = batch.labels[j];
      if (y < 0 || y >= table.class_count())
        throw IndexError("fedcir_local_loss: label " + std::to_string(y) +
                         " missing from the class table");
      mu_g.col(j) = table.entries[y].mu;
      sigma_g.col(j) = table.entries[y].sigma;
    }
    const Var align = kl_graph(tape, encoded, mu_g, sigma_g);
    parts.align = tape.value(align)(0, 0);
    total = tape.add(total, tape.scale(align, lambda_align));
  }

  parts.total = tape.value(total)(0, 0);
  if (loss) *loss = total;
  return parts;
}

namespace {

// SGD with momentum and weight decay (decay folded into the gradient):
//   g' = g + wd * w;  v = momentum * v + g';  w -= lr * v
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<Matrix*> params, double lr, double momentum,
               double weight_decay)
      : params_(std::move(params)),
        lr_(lr),
        momentum_(momentum),
        weight_decay_(weight_decay) {
    velocity_.reserve(params_.size());
    for (const Matrix* p : params_)
      velocity_.emplace_back(Matrix::Zero(p->rows(), p->cols()));
  }

  // returns scalar multiplies spent
  std::uint64_t step(const std::vector<Matrix>& grads) {
    std::uint64_t muls = 0;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Matrix g = grads[i];
      if (weight_decay_ != 0.0) {
        g += weight_decay_ * (*params_[i]);
        muls += params_[i]->size();
      }
      if (momentum_ != 0.0) {
        velocity_[i] = momentum_ * velocity_[i] + g;
        muls += params_[i]->size();
      } else {
        velocity_[i] = g;
      }
      *params_[i] -= lr_ * velocity_[i];
      muls += params_[i]->size();
    }
    return muls;
  }

 private:
  std::vector<Matrix*> params_;
  std::vector<Matrix> velocity_;
  double lr_, momentum_, weight_decay_;
};

std::vector<Var> model_vars(const EncoderVars& e, const ClassifierVars& c) {
  return {e.trunk_W, e.trunk_b, e.mean_W, e.mean_b,
          e.scale_W, e.scale_b, c.W,      c.b};
}

}  // namespace

LocalUpdateResult local_update(const ClientState& client,
                               const ModelParams& global_model,
                               const GeneratorParams& generator,
                               const ClassGaussianTable& table,
                               const FedConfig& cfg, int round) {
  const Shard& shard = client.shard;
  if (shard.inputs.cols() == 0)
    throw DataError("local_update: client " + std::to_string(shard.client_id) +
                    " has an empty shard");

  const EffectiveWeights weights = effective_weights(cfg, !table.empty());
  const bool prox = cfg.variant == Variant::FedProx && cfg.prox_mu > 0.0;

  LocalUpdateResult result;
  result.model = global_model;
  const std::vector<Matrix*> params = tensor_list(result.model);
  const std::vector<const Matrix*> anchors = tensor_list(global_model);
  SgdOptimizer optim(params, cfg.lr, cfg.momentum, cfg.weight_decay);

  const auto uround = static_cast<std::uint64_t>(round);
  const auto uid = static_cast<std::uint64_t>(shard.client_id);
  Rng batch_rng = derive_rng(cfg.seed, "batch", uround, uid);
  Rng eps_rng = derive_rng(cfg.seed, "eps", uround, uid);
  Rng gen_rng = derive_rng(cfg.seed, "genlocal", uround, uid);

  const int B = cfg.batch_size;
  const int d_x = static_cast<int>(shard.inputs.rows());
  const int d_z = result.model.encoder.rep_dim();
  const int n = static_cast<int>(shard.inputs.cols());

  double loss_sum = 0.0;
  for (int step = 0; step < cfg.local_steps; ++step) {
    LocalBatch batch;
    batch.inputs.resize(d_x, B);
    batch.labels.resize(B);
    for (int j = 0; j < B; ++j) {
      const int idx = batch_rng.uniform_int(n);
      batch.inputs.col(j) = shard.inputs.col(idx);
      batch.labels[j] = shard.labels[idx];
    }
    batch.eps_z.resize(d_z, B);
    for (int i = 0; i < d_z; ++i)
      for (int j = 0; j < B; ++j) batch.eps_z(i, j) = eps_rng.normal();

    std::optional<GenBatch> gen_batch;
    if (weights.reg > 0.0) {
      GenBatch gb;
      gb.labels.resize(B);
      for (int j = 0; j < B; ++j)
        gb.labels[j] = gen_rng.uniform_int(generator.class_count);
      gb.eps.resize(generator.noise_dim(), B);
      for (int i = 0; i < gb.eps.rows(); ++i)
        for (int j = 0; j < B; ++j) gb.eps(i, j) = gen_rng.normal();
      gen_batch = std::move(gb);
    }

    Tape tape;
    const EncoderVars enc = register_encoder(tape, result.model.encoder);
    const ClassifierVars cls = register_classifier(tape, result.model.classifier);
    Var loss;
    const LossParts parts =
        fedcir_local_loss(tape, enc, cls, generator, table, batch, gen_batch,
                          weights.reg, weights.align, &loss);
    tape.backward(loss);

    double step_loss = parts.total;
    const std::vector<Var> vars = model_vars(enc, cls);
    std::vector<Matrix> grads;
    grads.reserve(vars.size());
    for (const Var v : vars) grads.push_back(tape.grad(v));
    result.scalar_muls += tape.mul_count();

    if (prox) {
      // (mu/2) ||w - w_global||^2 adds mu (w - w_global) to each gradient
      double sq_norm = 0.0;
      for (std::size_t i = 0; i < grads.size(); ++i) {
        const Matrix diff = *params[i] - *anchors[i];
        grads[i] += cfg.prox_mu * diff;
        sq_norm += diff.squaredNorm();
        result.scalar_muls += 2 * static_cast<std::uint64_t>(diff.size());
      }
      step_loss += 0.5 * cfg.prox_mu * sq_norm;
    }

    result.scalar_muls += optim.step(grads);
    loss_sum += step_loss;
  }
  result.mean_step_loss = loss_sum / cfg.local_steps;
  return result;
}

ModelParams aggregate(const std::vector<std::pair<int, ModelParams>>& uploads) {
  if (uploads.empty()) throw DataError("aggregate: no models");
  std::vector<const std::pair<int, ModelParams>*> order;
  order.reserve(uploads.size());
  for (const auto& u : uploads) order.push_back(&u);
  std::sort(order.begin(), order.end(),
            [](const auto* a, const auto* b) { return a->first < b->first; });

  ModelParams mean = order[0]->second;
  std::vector<Matrix*> acc = tensor_list(mean);
  for (std::size_t i = 1; i < order.size(); ++i) {
    const std::vector<const Matrix*> next = tensor_list(order[i]->second);
    if (next.size() != acc.size())
      throw DimensionError("aggregate: mismatched tensor counts");
    for (std::size_t t = 0; t < acc.size(); ++t) {
      if (next[t]->rows() != acc[t]->rows() || next[t]->cols() != acc[t]->cols())
        throw DimensionError("aggregate: tensor " + std::to_string(t) +
                             " shape " + shape_str(*next[t]) + " vs " +
                             shape_str(*acc[t]));
      *acc[t] += *next[t];
    }
  }
  const double inv = 1.0 / static_cast<double>(order.size());
  for (Matrix* t : acc) *t *= inv;
  return mean;
}

Var generator_ensemble_loss_graph(Tape& tape, const GeneratorVars& gen_vars,
                                  const std::vector<ClassifierParams>& classifiers,
                                  const std::vector<double>& weights,
                                  int class_count, const VectorXi& labels,
                                  const Matrix& eps) {
  const Var z = generate_graph(tape, gen_vars,
                               generator_input(class_count, labels, eps));
  // probability-space ensemble mean before the log; classifiers frozen
  Var ensemble;
  for (std::size_t k = 0; k < classifiers.size(); ++k) {
    const Var logits =
        tape.add_col(tape.matmul(tape.constant(classifiers[k].out.W), z),
                     tape.constant(classifiers[k].out.b));
    const Var probs = tape.scale(tape.softmax_cols(logits), weights[k]);
    ensemble = (k == 0) ? probs : tape.add(ensemble, probs);
  }
  return cross_entropy_graph(tape, ensemble, labels);
}

GeneratorTrainResult train_generator(
    const std::vector<ClassifierParams>& classifiers,
    const std::vector<double>& weights, GeneratorParams& generator,
    const FedConfig& cfg, Rng& rng) {
  if (classifiers.empty())
    throw StateError("train_generator: no uploaded classifiers");
  if (weights.size() != classifiers.size())
    throw DimensionError("train_generator: " + std::to_string(weights.size()) +
                         " weights for " + std::to_string(classifiers.size()) +
                         " classifiers");

  GeneratorTrainResult result;
  const int B = cfg.batch_size;
  const int C = generator.class_count;
  std::vector<Matrix*> params = tensor_list(generator);

  for (int step = 0; step < cfg.gen_steps; ++step) {
    VectorXi labels(B);
    for (int j = 0; j < B; ++j) labels[j] = rng.uniform_int(C);
    Matrix eps(generator.noise_dim(), B);
    for (Eigen::Index i = 0; i < eps.rows(); ++i)
      for (int j = 0; j < B; ++j) eps(i, j) = rng.normal();

    Tape tape;
    const GeneratorVars gen_vars = register_generator(tape, generator);
    const Var loss = generator_ensemble_loss_graph(tape, gen_vars, classifiers,
                                                   weights, C, labels, eps);
    result.step_losses.push_back(tape.value(loss)(0, 0));
    tape.backward(loss);

    // plain SGD on the generator only
    const Var vars[] = {gen_vars.hidden_W, gen_vars.hidden_b, gen_vars.out_W,
                        gen_vars.out_b};
    for (std::size_t i = 0; i < params.size(); ++i) {
      *params[i] -= cfg.gen_lr * tape.grad(vars[i]);
      result.scalar_muls += params[i]->size();
    }
    result.scalar_muls += tape.mul_count();
  }
  return result;
}

ClassGaussianTable refresh_class_table(const GeneratorParams& generator,
                                       int samples_per_class, Rng& rng) {
  std::vector<std::vector<Vector>> by_class(generator.class_count);
  for (int y = 0; y < generator.class_count; ++y) {
    VectorXi labels = VectorXi::Constant(samples_per_class, y);
    Matrix eps(generator.noise_dim(), samples_per_class);
    for (Eigen::Index i = 0; i < eps.rows(); ++i)
      for (int j = 0; j < samples_per_class; ++j) eps(i, j) = rng.normal();
    const Matrix z = generate_batch(generator, labels, eps);
    by_class[y].reserve(samples_per_class);
    for (int j = 0; j < samples_per_class; ++j)
      by_class[y].push_back(z.col(j));
  }
  return fit_class_gaussians(by_class);
}

double test_accuracy(const ModelParams& model, const Matrix& inputs,
                     const VectorXi& labels) {
  if (inputs.cols() == 0) throw DataError("test_accuracy: empty test set");
  const Matrix z = encode_mean(model.encoder, inputs);
  const Matrix probs = classify_batch(model.classifier, z);
  int hits = 0;
  for (Eigen::Index j = 0; j < probs.cols(); ++j) {
    Eigen::Index best;
    probs.col(j).maxCoeff(&best);
    if (static_cast<int>(best) == labels[j]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(probs.cols());
}

RoundMetrics run_round(ServerState& server, std::vector<ClientState>& clients,
                       const Matrix& test_inputs, const VectorXi& test_labels,
                       const FedConfig& cfg) {
  if (clients.empty()) throw ConfigError("run_round: no clients");
  const int round = server.round + 1;
  const auto uround = static_cast<std::uint64_t>(round);

  std::vector<int> ids;
  ids.reserve(clients.size());
  for (const auto& c : clients) ids.push_back(c.shard.client_id);
  Rng select_rng = derive_rng(cfg.seed, "select", uround);
  const std::vector<int> active = sample_clients(ids, cfg.client_ratio, select_rng);

  const EffectiveWeights weights = effective_weights(cfg, !server.table.empty());
  const std::size_t model_bytes = serialized_byte_size(server.model);
  std::size_t down_bytes = model_bytes;
  if (weights.reg > 0.0) down_bytes += serialized_byte_size(server.generator);
  if (weights.align > 0.0) down_bytes += serialized_byte_size(server.table);
  server.bytes_down += down_bytes * active.size();

  RoundMetrics metrics;
  metrics.round = round;
  metrics.variant = cfg.variant;
  metrics.seed = cfg.seed;
  metrics.active_clients = active;

  // local updates; independent given the per-(client, round) streams
  std::vector<std::pair<int, ModelParams>> uploads;
  uploads.reserve(active.size());
  double loss_sum = 0.0;
  for (const int id : active) {
    auto it = std::find_if(clients.begin(), clients.end(), [id](const auto& c) {
      return c.shard.client_id == id;
    });
    LocalUpdateResult local = local_update(*it, server.model, server.generator,
                                           server.table, cfg, round);
    it->model = local.model;
    metrics.client_losses.push_back(local.mean_step_loss);
    loss_sum += local.mean_step_loss;
    server.scalar_muls += local.scalar_muls;
    uploads.emplace_back(id, std::move(local.model));
  }
  metrics.mean_train_loss = loss_sum / static_cast<double>(active.size());
  server.bytes_up += model_bytes * active.size();

  // server side: generator consensus training + table refresh, then
  // aggregation (the freshly trained generator ships next round)
  if (server_generator_enabled(cfg)) {
    std::vector<ClassifierParams> classifiers;
    classifiers.reserve(uploads.size());
    for (const auto& [id, model] : uploads) classifiers.push_back(model.classifier);
    const std::vector<double> uniform(
        classifiers.size(), 1.0 / static_cast<double>(classifiers.size()));
    Rng gen_rng = derive_rng(cfg.seed, "genserver", uround);
    const GeneratorTrainResult gen_result = train_generator(
        classifiers, uniform, server.generator, cfg, gen_rng);
    server.scalar_muls += gen_result.scalar_muls;
    Rng table_rng = derive_rng(cfg.seed, "table", uround);
    server.table =
        refresh_class_table(server.generator, cfg.table_samples, table_rng);
    server.scalar_muls +=
        static_cast<std::uint64_t>(cfg.table_samples) *
        server.generator.class_count * server.generator.rep_dim();
  }

  server.model = aggregate(uploads);
  server.round = round;

  metrics.test_acc = test_accuracy(server.model, test_inputs, test_labels);
  double risk_sum = 0.0;
  for (const int id : active) {
    const auto it = std::find_if(clients.begin(), clients.end(),
                                 [id](const auto& c) {
                                   return c.shard.client_id == id;
                                 });
    Rng risk_rng = derive_rng(cfg.seed, "risk", uround, static_cast<std::uint64_t>(id));
    risk_sum += local_risk(server.model, it->shard, risk_rng);
  }
  metrics.mean_local_risk = risk_sum / static_cast<double>(active.size());
  metrics.bytes_up = server.bytes_up;
  metrics.bytes_down = server.bytes_down;
  metrics.flops = server.scalar_muls;
  return metrics;
}

}  // namespace fedcir
