#include "fedcir/selfcheck.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include "fedcir/diagnostics.hpp"
#include "fedcir/experiment.hpp"
#include "fedcir/fedproto.hpp"
#include "fedcir/models.hpp"
#include "fedcir/numerics.hpp"

namespace fedcir {

namespace {

double simpson(const std::function<double(double)>& f, double a, double b,
               int n) {
  // n must be even
  const double h = (b - a) / n;
  double s = f(a) + f(b);
  for (int i = 1; i < n; ++i) s += f(a + i * h) * (i % 2 == 1 ? 4.0 : 2.0);
  return s * h / 3.0;
}

}  // namespace

double kl_integration_1d(double mu_l, double sigma_l, double mu_g,
                         double sigma_g) {
  if (sigma_l <= 0.0 || sigma_g <= 0.0)
    throw NumericError("kl_integration_1d: nonpositive sigma");
  // log-space densities; q underflows long before p in the tails
  const double log_norm = 0.5 * std::log(2.0 * M_PI);
  const auto integrand = [&](double z) {
    const double tl = (z - mu_l) / sigma_l;
    const double log_p = -0.5 * tl * tl - std::log(sigma_l) - log_norm;
    const double p = std::exp(log_p);
    if (p <= 0.0) return 0.0;
    const double tg = (z - mu_g) / sigma_g;
    const double log_q = -0.5 * tg * tg - std::log(sigma_g) - log_norm;
    return p * (log_p - log_q);
  };
  const double a = mu_l - 14.0 * sigma_l;
  const double b = mu_l + 14.0 * sigma_l;
  double prev = simpson(integrand, a, b, 512);
  for (int n = 1024; n <= (1 << 17); n *= 2) {
    const double cur = simpson(integrand, a, b, n);
    if (std::abs(cur - prev) < 1e-10 * std::max(1.0, std::abs(cur))) return cur;
    prev = cur;
  }
  return prev;
}

bool kl_matches_integration(const KlFn& kl, Rng& rng, int cases, double tol,
                            double* max_err) {
  double worst = 0.0;
  for (int i = 0; i < cases; ++i) {
    const double mu_l = rng.uniform_range(-3.0, 3.0);
    const double mu_g = rng.uniform_range(-3.0, 3.0);
    const double sigma_l = rng.uniform_range(0.1, 5.0);
    const double sigma_g = rng.uniform_range(0.1, 5.0);
    Vector ml(1), sl(1), mg(1), sg(1);
    ml << mu_l;
    sl << sigma_l;
    mg << mu_g;
    sg << sigma_g;
    const double closed = kl(ml, sl, mg, sg);
    const double integrated = kl_integration_1d(mu_l, sigma_l, mu_g, sigma_g);
    worst = std::max(worst, std::abs(closed - integrated));
  }
  if (max_err) *max_err = worst;
  return worst < tol;
}

namespace {

// small shapes keep the finite-difference sweeps fast
ModelDims check_dims() {
  ModelDims dims;
  dims.input_dim = 4;
  dims.hidden_dim = 6;
  dims.rep_dim = 3;
  dims.class_count = 3;
  dims.noise_dim = 3;
  dims.gen_hidden_dim = 5;
  return dims;
}

struct CheckInstance {
  ModelDims dims = check_dims();
  LocalBatch batch;
  GenBatch gen_batch;
  GeneratorParams generator;
  ClassGaussianTable table;
  std::vector<ClassifierParams> classifiers;
  std::vector<double> ensemble_weights;
};

CheckInstance make_instance(std::uint64_t seed) {
  CheckInstance inst;
  Rng rng = derive_rng(seed, "check_instance");
  const int B = 4;
  inst.batch.inputs.resize(inst.dims.input_dim, B);
  for (Eigen::Index i = 0; i < inst.batch.inputs.size(); ++i)
    inst.batch.inputs.data()[i] = rng.normal();
  inst.batch.labels.resize(B);
  for (int j = 0; j < B; ++j)
    inst.batch.labels[j] = rng.uniform_int(inst.dims.class_count);
  inst.batch.eps_z.resize(inst.dims.rep_dim, B);
  for (Eigen::Index i = 0; i < inst.batch.eps_z.size(); ++i)
    inst.batch.eps_z.data()[i] = rng.normal();
  inst.gen_batch.labels.resize(B);
  for (int j = 0; j < B; ++j)
    inst.gen_batch.labels[j] = rng.uniform_int(inst.dims.class_count);
  inst.gen_batch.eps.resize(inst.dims.noise_dim, B);
  for (Eigen::Index i = 0; i < inst.gen_batch.eps.size(); ++i)
    inst.gen_batch.eps.data()[i] = rng.normal();
  Rng gen_rng = derive_rng(seed, "check_gen");
  inst.generator = init_generator(inst.dims, gen_rng);
  std::vector<std::vector<Vector>> by_class(inst.dims.class_count);
  for (int y = 0; y < inst.dims.class_count; ++y)
    for (int s = 0; s < 8; ++s) {
      Vector v(inst.dims.rep_dim);
      for (int i = 0; i < inst.dims.rep_dim; ++i) v[i] = rng.normal();
      by_class[y].push_back(v);
    }
  inst.table = fit_class_gaussians(by_class);
  for (int k = 0; k < 2; ++k) {
    Rng cls_rng = derive_rng(seed, "check_cls", k);
    inst.classifiers.push_back(init_model(inst.dims, cls_rng).classifier);
  }
  inst.ensemble_weights.assign(inst.classifiers.size(),
                               1.0 / inst.classifiers.size());
  return inst;
}

LossFn model_loss_fn(const CheckInstance& inst, double lreg, double lalign) {
  return [&inst, lreg, lalign](const Vector& flat, Vector* grad) {
    Rng throwaway(0);
    ModelParams m = init_model(inst.dims, throwaway);
    unflatten(flat, tensor_list(m));
    Tape tape;
    const EncoderVars enc = register_encoder(tape, m.encoder);
    const ClassifierVars cls = register_classifier(tape, m.classifier);
    Var loss;
    fedcir_local_loss(tape, enc, cls, inst.generator, inst.table, inst.batch,
                      inst.gen_batch, lreg, lalign, &loss);
    if (grad) {
      tape.backward(loss);
      const std::vector<Var> vars = {enc.trunk_W, enc.trunk_b, enc.mean_W,
                                     enc.mean_b,  enc.scale_W, enc.scale_b,
                                     cls.W,       cls.b};
      std::vector<Matrix> grads;
      std::vector<const Matrix*> ptrs;
      grads.reserve(vars.size());
      for (const Var v : vars) grads.push_back(tape.grad(v));
      for (const Matrix& g : grads) ptrs.push_back(&g);
      *grad = flatten(ptrs);
    }
    return tape.value(loss)(0, 0);
  };
}

// L_reg term in isolation: generated z through the local classifier
LossFn reg_term_fn(const CheckInstance& inst) {
  return [&inst](const Vector& flat, Vector* grad) {
    Rng throwaway(0);
    ModelParams m = init_model(inst.dims, throwaway);
    unflatten(flat, tensor_list(m));
    const Matrix z_gen = generate_batch(inst.generator, inst.gen_batch.labels,
                                        inst.gen_batch.eps);
    Tape tape;
    // encoder params are registered but do not feed this term; their
    // gradient entries stay zero, matching the finite differences
    const EncoderVars enc = register_encoder(tape, m.encoder);
    const ClassifierVars cls = register_classifier(tape, m.classifier);
    const Var probs = classify_graph(tape, cls, tape.constant(z_gen));
    const Var loss = cross_entropy_graph(tape, probs, inst.gen_batch.labels);
    if (grad) {
      tape.backward(loss);
      const std::vector<Var> vars = {enc.trunk_W, enc.trunk_b, enc.mean_W,
                                     enc.mean_b,  enc.scale_W, enc.scale_b,
                                     cls.W,       cls.b};
      std::vector<Matrix> grads;
      std::vector<const Matrix*> ptrs;
      for (const Var v : vars) grads.push_back(tape.grad(v));
      for (const Matrix& g : grads) ptrs.push_back(&g);
      *grad = flatten(ptrs);
    }
    return tape.value(loss)(0, 0);
  };
}

LossFn align_term_fn(const CheckInstance& inst) {
  return [&inst](const Vector& flat, Vector* grad) {
    Rng throwaway(0);
    ModelParams m = init_model(inst.dims, throwaway);
    unflatten(flat, tensor_list(m));
    Tape tape;
    const EncoderVars enc = register_encoder(tape, m.encoder);
    const ClassifierVars cls = register_classifier(tape, m.classifier);
    const EncodedVars enc_out = encode_graph(tape, enc, inst.batch.inputs);
    const int d = inst.table.rep_dim();
    Matrix mu_g(d, inst.batch.labels.size()), sigma_g(d, inst.batch.labels.size());
    for (Eigen::Index j = 0; j < inst.batch.labels.size(); ++j) {
      mu_g.col(j) = inst.table.entries[inst.batch.labels[j]].mu;
      sigma_g.col(j) = inst.table.entries[inst.batch.labels[j]].sigma;
    }
    const Var loss = kl_graph(tape, enc_out, mu_g, sigma_g);
    if (grad) {
      tape.backward(loss);
      const std::vector<Var> vars = {enc.trunk_W, enc.trunk_b, enc.mean_W,
                                     enc.mean_b,  enc.scale_W, enc.scale_b,
                                     cls.W,       cls.b};
      std::vector<Matrix> grads;
      std::vector<const Matrix*> ptrs;
      for (const Var v : vars) grads.push_back(tape.grad(v));
      for (const Matrix& g : grads) ptrs.push_back(&g);
      *grad = flatten(ptrs);
    }
    return tape.value(loss)(0, 0);
  };
}

LossFn generator_loss_fn(const CheckInstance& inst) {
  return [&inst](const Vector& flat, Vector* grad) {
    GeneratorParams g = inst.generator;
    unflatten(flat, tensor_list(g));
    Tape tape;
    const GeneratorVars vars = register_generator(tape, g);
    const Var loss = generator_ensemble_loss_graph(
        tape, vars, inst.classifiers, inst.ensemble_weights,
        inst.dims.class_count, inst.gen_batch.labels, inst.gen_batch.eps);
    if (grad) {
      tape.backward(loss);
      const Var list[] = {vars.hidden_W, vars.hidden_b, vars.out_W, vars.out_b};
      std::vector<Matrix> grads;
      std::vector<const Matrix*> ptrs;
      for (const Var v : list) grads.push_back(tape.grad(v));
      for (const Matrix& g2 : grads) ptrs.push_back(&g2);
      *grad = flatten(ptrs);
    }
    return tape.value(loss)(0, 0);
  };
}

LossFn kl_closed_form_fn(const CheckInstance& inst) {
  // params: [mu_l; sigma_l] against fixed targets; sigma stays near 1 at the
  // probe points used below
  const int d = inst.dims.rep_dim;
  Vector mu_g(d), sigma_g(d);
  Rng rng = derive_rng(99, "kl_targets");
  for (int i = 0; i < d; ++i) {
    mu_g[i] = rng.normal();
    sigma_g[i] = rng.uniform_range(0.5, 2.0);
  }
  return [d, mu_g, sigma_g](const Vector& flat, Vector* grad) {
    Tape tape;
    const Var mu = tape.param(flat.head(d));
    const Var sigma = tape.param(flat.tail(d));
    const EncodedVars enc_out{mu, sigma};
    const Var loss = kl_graph(tape, enc_out, mu_g, sigma_g);
    if (grad) {
      tape.backward(loss);
      grad->resize(2 * d);
      grad->head(d) = tape.grad(mu).col(0);
      grad->tail(d) = tape.grad(sigma).col(0);
    }
    return tape.value(loss)(0, 0);
  };
}

double worst_grad_check(const LossFn& fn, Eigen::Index n_params,
                        std::uint64_t seed, int points, double spread) {
  double worst = 0.0;
  for (int p = 0; p < points; ++p) {
    Rng rng = derive_rng(seed, "grad_point", p);
    Vector point(n_params);
    for (Eigen::Index i = 0; i < n_params; ++i)
      point[i] = spread * rng.normal();
    const GradCheckResult res = grad_check(fn, point, 1e-5);
    worst = std::max(worst, res.max_rel_err);
  }
  return worst;
}

Eigen::Index model_param_count(const ModelDims& dims) {
  Rng rng(0);
  const ModelParams m = init_model(dims, rng);
  return flatten(tensor_list(m)).size();
}

Eigen::Index generator_param_count(const ModelDims& dims) {
  Rng rng(0);
  const GeneratorParams g = init_generator(dims, rng);
  return flatten(tensor_list(g)).size();
}

ExperimentSpec reduction_spec() {
  ExperimentSpec spec;
  spec.data.class_count = 3;
  spec.data.input_dim = 4;
  spec.data.n_domains = 2;
  spec.data.samples_per_domain = 40;
  spec.fed.rounds = 5;
  spec.fed.local_steps = 3;
  spec.fed.batch_size = 8;
  spec.hidden_dim = 8;
  spec.rep_dim = 4;
  spec.noise_dim = 4;
  spec.gen_hidden_dim = 8;
  return spec;
}

}  // namespace

std::vector<CheckResult> run_selfcheck(std::ostream& os) {
  std::vector<CheckResult> results;
  const auto report = [&](const std::string& name, bool passed,
                          const std::string& detail) {
    os << (passed ? "[PASS] " : "[FAIL] ") << std::left << std::setw(32)
       << name << " " << detail << "\n";
    results.push_back({name, passed, detail});
  };
  const auto fmt_err = [](double v) {
    std::ostringstream ss;
    ss << std::scientific << std::setprecision(2) << v;
    return ss.str();
  };

  const CheckInstance inst = make_instance(2024);
  const Eigen::Index n_model = model_param_count(inst.dims);
  const Eigen::Index n_gen = generator_param_count(inst.dims);

  {
    const double err = worst_grad_check(model_loss_fn(inst, 0.0, 0.0), n_model,
                                        11, 10, 0.5);
    report("grad_fl_loss", err < 1e-4, "max rel err " + fmt_err(err));
  }
  {
    const double err = worst_grad_check(reg_term_fn(inst), n_model, 12, 10, 0.5);
    report("grad_reg_term", err < 1e-4, "max rel err " + fmt_err(err));
  }
  {
    const double err = worst_grad_check(align_term_fn(inst), n_model, 13, 10, 0.5);
    report("grad_align_term", err < 1e-4, "max rel err " + fmt_err(err));
  }
  {
    const double err = worst_grad_check(model_loss_fn(inst, 0.5, 0.1), n_model,
                                        14, 10, 0.5);
    report("grad_fedcir_objective", err < 1e-4, "max rel err " + fmt_err(err));
  }
  {
    const double err = worst_grad_check(generator_loss_fn(inst), n_gen, 15, 10, 0.5);
    report("grad_generator_loss", err < 1e-4, "max rel err " + fmt_err(err));
  }
  {
    // points centered at sigma ~= 1, mu ~= 0 so sigma stays positive
    const LossFn fn = kl_closed_form_fn(inst);
    double worst = 0.0;
    for (int p = 0; p < 10; ++p) {
      Rng rng = derive_rng(16, "kl_point", p);
      Vector point(2 * inst.dims.rep_dim);
      for (int i = 0; i < inst.dims.rep_dim; ++i) point[i] = 0.5 * rng.normal();
      for (int i = 0; i < inst.dims.rep_dim; ++i)
        point[inst.dims.rep_dim + i] = rng.uniform_range(0.4, 2.5);
      worst = std::max(worst, grad_check(fn, point, 1e-5).max_rel_err);
    }
    report("grad_kl_closed_form", worst < 1e-6, "max rel err " + fmt_err(worst));
  }
  {
    Rng rng = derive_rng(17, "softmax_shift");
    double worst = 0.0;
    for (int c = 0; c < 100; ++c) {
      Vector logits(5);
      for (int i = 0; i < 5; ++i) logits[i] = rng.uniform_range(-50.0, 50.0);
      const double shift = rng.uniform_range(-20.0, 20.0);
      const Vector a = softmax(logits);
      const Vector b = softmax((logits.array() + shift).matrix());
      worst = std::max(worst, (a - b).cwiseAbs().maxCoeff());
    }
    report("softmax_shift_invariance", worst < 1e-12, "max dev " + fmt_err(worst));
  }
  {
    Rng rng = derive_rng(18, "kl_integration");
    double worst = 0.0;
    const bool ok = kl_matches_integration(
        [](const Vector& ml, const Vector& sl, const Vector& mg,
           const Vector& sg) { return kl_diag_gaussian(ml, sl, mg, sg); },
        rng, 100, 1e-6, &worst);
    report("kl_vs_integration", ok, "max abs err " + fmt_err(worst));
  }
  {
    Rng rng = derive_rng(19, "prop1");
    int failures = 0;
    for (int i = 0; i < 10000; ++i) {
      const DiscreteJoint joint = random_joint_kyz(rng);
      const PredictiveTable p_hat = random_predictive_table(
          rng, joint.k_size(), joint.z_size(), joint.y_size());
      if (!verify_prop1_bound(joint, p_hat).holds) ++failures;
    }
    report("prop1_bound_sweep", failures == 0,
           std::to_string(failures) + " failures / 10000");
  }
  {
    Rng rng = derive_rng(20, "prop2");
    int failures = 0;
    for (int i = 0; i < 10000; ++i) {
      const DiscreteJoint joint = random_joint_kyz(rng);
      const bool cmi_zero = conditional_mutual_information(joint) < 1e-10;
      const bool invariant = max_conditional_gap(joint) < 1e-8;
      if (cmi_zero != invariant) ++failures;
    }
    for (int i = 0; i < 100; ++i) {
      const DiscreteJoint joint = random_invariant_joint_kyz(rng);
      const bool cmi_zero = conditional_mutual_information(joint) < 1e-10;
      const bool invariant = max_conditional_gap(joint) < 1e-8;
      if (!cmi_zero || !invariant) ++failures;
    }
    report("prop2_iff_equivalence", failures == 0,
           std::to_string(failures) + " failures / 10100");
  }
  {
    Rng rng = derive_rng(21, "prop3");
    int failures = 0;
    for (int i = 0; i < 10000; ++i) {
      const DiscreteJoint joint = random_joint_kxyz_structured(rng);
      if (!verify_prop3_bound(joint).holds) ++failures;
    }
    report("prop3_bound_sweep", failures == 0,
           std::to_string(failures) + " failures / 10000");
  }
  {
    ExperimentSpec spec = reduction_spec();
    spec.fed.variant = Variant::FedAvg;
    const RunResult avg = run_training(spec, Variant::FedAvg, 7);
    ExperimentSpec degenerate = reduction_spec();
    degenerate.fed.lambda_reg = 0.0;
    degenerate.fed.lambda_align = 0.0;
    degenerate.fed.gen_steps = 0;
    const RunResult cir = run_training(degenerate, Variant::FedCiR, 7);
    const bool ok = metrics_equal_ignoring_variant(avg.metrics, cir.metrics);
    report("reduction_fedcir_degenerate", ok,
           ok ? "bit-identical over 5 rounds" : "streams differ");
  }
  {
    ExperimentSpec spec = reduction_spec();
    const RunResult avg = run_training(spec, Variant::FedAvg, 7);
    ExperimentSpec prox_spec = reduction_spec();
    prox_spec.fed.prox_mu = 0.0;
    const RunResult prox = run_training(prox_spec, Variant::FedProx, 7);
    const bool ok = metrics_equal_ignoring_variant(avg.metrics, prox.metrics);
    report("reduction_fedprox_zero_mu", ok,
           ok ? "bit-identical over 5 rounds" : "streams differ");
  }
  {
    // upload order must not affect the aggregate
    Rng rng = derive_rng(23, "agg_order");
    ModelDims dims = check_dims();
    std::vector<std::pair<int, ModelParams>> uploads;
    for (int k = 0; k < 4; ++k) {
      Rng init = derive_rng(23, "agg_model", k);
      uploads.emplace_back(k, init_model(dims, init));
    }
    const ModelParams sorted_mean = aggregate(uploads);
    for (int i = static_cast<int>(uploads.size()) - 1; i > 0; --i)
      std::swap(uploads[i], uploads[rng.uniform_int(i + 1)]);
    const ModelParams shuffled_mean = aggregate(uploads);
    const bool ok = same_values(sorted_mean, shuffled_mean);
    report("aggregate_order_independence", ok,
           ok ? "bit-identical" : "averages differ");
  }

  return results;
}

}  // namespace fedcir
