#include "fedcir/models.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace fedcir {

namespace {

AffineParams init_affine(int out, int in, Rng& rng) {
  // Xavier-uniform; biases start at zero.
  const double bound = std::sqrt(6.0 / (in + out));
  AffineParams p;
  p.W.resize(out, in);
  for (int i = 0; i < out; ++i)
    for (int j = 0; j < in; ++j) p.W(i, j) = rng.uniform_range(-bound, bound);
  p.b = Matrix::Zero(out, 1);
  return p;
}

Matrix sigma_from_raw(const Matrix& raw) {
  return raw.cwiseMax(-kRawScaleClamp)
      .cwiseMin(kRawScaleClamp)
      .array()
      .exp()
      .matrix()
      .cwiseMax(kSigmaFloor);
}

}  // namespace

ModelParams init_model(const ModelDims& dims, Rng& rng) {
  ModelParams m;
  m.encoder.trunk = init_affine(dims.hidden_dim, dims.input_dim, rng);
  m.encoder.mean_head = init_affine(dims.rep_dim, dims.hidden_dim, rng);
  m.encoder.scale_head = init_affine(dims.rep_dim, dims.hidden_dim, rng);
  m.classifier.out = init_affine(dims.class_count, dims.rep_dim, rng);
  return m;
}

GeneratorParams init_generator(const ModelDims& dims, Rng& rng) {
  GeneratorParams g;
  g.hidden = init_affine(dims.gen_hidden_dim, dims.class_count + dims.noise_dim, rng);
  g.out = init_affine(dims.rep_dim, dims.gen_hidden_dim, rng);
  g.class_count = dims.class_count;
  return g;
}

std::pair<Matrix, Matrix> encode_batch(const EncoderParams& enc, const Matrix& X) {
  const Matrix h =
      affine_batch(enc.trunk.W, enc.trunk.b.col(0), X).cwiseMax(0.0);
  Matrix mu = affine_batch(enc.mean_head.W, enc.mean_head.b.col(0), h);
  Matrix sigma =
      sigma_from_raw(affine_batch(enc.scale_head.W, enc.scale_head.b.col(0), h));
  return {std::move(mu), std::move(sigma)};
}

std::pair<Vector, Vector> encode(const EncoderParams& enc, const Vector& x) {
  auto [mu, sigma] = encode_batch(enc, x);
  return {Vector(mu.col(0)), Vector(sigma.col(0))};
}

Matrix encode_mean(const EncoderParams& enc, const Matrix& X) {
  const Matrix h =
      affine_batch(enc.trunk.W, enc.trunk.b.col(0), X).cwiseMax(0.0);
  return affine_batch(enc.mean_head.W, enc.mean_head.b.col(0), h);
}

Vector reparameterize(const Vector& mu, const Vector& sigma, const Vector& eps) {
  if (mu.size() != sigma.size() || mu.size() != eps.size())
    throw DimensionError("reparameterize: sizes " + std::to_string(mu.size()) +
                         ", " + std::to_string(sigma.size()) + ", " +
                         std::to_string(eps.size()));
  return mu + sigma.cwiseProduct(eps);
}

Vector classify(const ClassifierParams& cls, const Vector& z) {
  return softmax(affine(cls.out.W, cls.out.b.col(0), z));
}

Matrix classify_batch(const ClassifierParams& cls, const Matrix& Z) {
  const Matrix logits = affine_batch(cls.out.W, cls.out.b.col(0), Z);
  Matrix probs(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j)
    probs.col(j) = softmax(logits.col(j));
  return probs;
}

Matrix generator_input(int class_count, const VectorXi& labels, const Matrix& eps) {
  if (labels.size() != eps.cols())
    throw DimensionError("generator_input: " + std::to_string(labels.size()) +
                         " labels vs " + shape_str(eps));
  Matrix input = Matrix::Zero(class_count + eps.rows(), eps.cols());
  for (Eigen::Index j = 0; j < labels.size(); ++j) {
    const int y = labels[j];
    if (y < 0 || y >= class_count)
      throw IndexError("generator_input: label " + std::to_string(y) +
                       " out of range for " + std::to_string(class_count) +
                       " classes");
    input(y, j) = 1.0;
    input.block(class_count, j, eps.rows(), 1) = eps.col(j);
  }
  return input;
}

Matrix generate_batch(const GeneratorParams& gen, const VectorXi& labels,
                      const Matrix& eps) {
  const Matrix input = generator_input(gen.class_count, labels, eps);
  const Matrix h =
      affine_batch(gen.hidden.W, gen.hidden.b.col(0), input).cwiseMax(0.0);
  return affine_batch(gen.out.W, gen.out.b.col(0), h);
}

Vector generate(const GeneratorParams& gen, int label, const Vector& eps) {
  VectorXi labels(1);
  labels[0] = label;
  return generate_batch(gen, labels, eps).col(0);
}

double kl_diag_gaussian(const Vector& mu_l, const Vector& sigma_l,
                        const Vector& mu_g, const Vector& sigma_g) {
  const auto n = mu_l.size();
  if (sigma_l.size() != n || mu_g.size() != n || sigma_g.size() != n)
    throw DimensionError("kl_diag_gaussian: mismatched sizes");
  if ((sigma_l.array() <= 0.0).any() || (sigma_g.array() <= 0.0).any())
    throw NumericError("kl_diag_gaussian: nonpositive sigma");
  const auto sl = sigma_l.array();
  const auto sg = sigma_g.array();
  const auto diff = (mu_l - mu_g).array();
  return (sg.log() - sl.log() + (sl.square() + diff.square()) / (2.0 * sg.square()) - 0.5)
      .sum();
}

ClassGaussianTable fit_class_gaussians(
    const std::vector<std::vector<Vector>>& samples_by_class) {
  ClassGaussianTable table;
  table.entries.reserve(samples_by_class.size());
  for (std::size_t y = 0; y < samples_by_class.size(); ++y) {
    const auto& samples = samples_by_class[y];
    if (samples.empty())
      throw DataError("fit_class_gaussians: no samples for class " +
                      std::to_string(y));
    const auto d = samples[0].size();
    Vector mean = Vector::Zero(d);
    for (const Vector& s : samples) {
      if (s.size() != d)
        throw DimensionError("fit_class_gaussians: inconsistent sample size");
      mean += s;
    }
    mean /= static_cast<double>(samples.size());
    Vector var = Vector::Zero(d);
    for (const Vector& s : samples) var += (s - mean).array().square().matrix();
    var /= static_cast<double>(samples.size());
    table.entries.push_back(
        {mean, var.array().sqrt().max(kSigmaFloor).matrix()});
  }
  return table;
}

// ---- tape subgraphs -------------------------------------------------------

EncoderVars register_encoder(Tape& t, const EncoderParams& enc) {
  return {t.param(enc.trunk.W),      t.param(enc.trunk.b),
          t.param(enc.mean_head.W),  t.param(enc.mean_head.b),
          t.param(enc.scale_head.W), t.param(enc.scale_head.b)};
}

ClassifierVars register_classifier(Tape& t, const ClassifierParams& cls) {
  return {t.param(cls.out.W), t.param(cls.out.b)};
}

GeneratorVars register_generator(Tape& t, const GeneratorParams& gen) {
  return {t.param(gen.hidden.W), t.param(gen.hidden.b), t.param(gen.out.W),
          t.param(gen.out.b)};
}

EncodedVars encode_graph(Tape& t, const EncoderVars& enc, const Matrix& X) {
  const Var h = t.relu(affine_graph(t, enc.trunk_W, enc.trunk_b, t.constant(X)));
  const Var mu = affine_graph(t, enc.mean_W, enc.mean_b, h);
  const Var raw = affine_graph(t, enc.scale_W, enc.scale_b, h);
  const Var sigma = t.clamp_min(
      t.exp(t.clamp(raw, -kRawScaleClamp, kRawScaleClamp)), kSigmaFloor);
  return {mu, sigma};
}

Var reparameterize_graph(Tape& t, const EncodedVars& e, const Matrix& eps) {
  return t.add(e.mu, t.cmul(e.sigma, t.constant(eps)));
}

Var classify_graph(Tape& t, const ClassifierVars& cls, Var z) {
  return t.softmax_cols(affine_graph(t, cls.W, cls.b, z));
}

Var generate_graph(Tape& t, const GeneratorVars& gen, const Matrix& input) {
  const Var h =
      t.relu(affine_graph(t, gen.hidden_W, gen.hidden_b, t.constant(input)));
  return affine_graph(t, gen.out_W, gen.out_b, h);
}

Var cross_entropy_graph(Tape& t, Var probs, const VectorXi& labels) {
  const Var picked = t.clamp_min(t.pick_cols(probs, labels), kLogGuard);
  return t.scale(t.sum_all(t.log(picked)),
                 -1.0 / static_cast<double>(labels.size()));
}

Var kl_graph(Tape& t, const EncodedVars& e, const Matrix& mu_g_cols,
             const Matrix& sigma_g_cols) {
  // copy the dimensions now: node pushes below may reallocate tape storage
  const Eigen::Index rows = t.value(e.mu).rows();
  const Eigen::Index cols = t.value(e.mu).cols();
  if (mu_g_cols.rows() != rows || mu_g_cols.cols() != cols)
    throw DimensionError("kl_graph: targets " + shape_str(mu_g_cols) + " vs " +
                         std::to_string(rows) + "x" + std::to_string(cols) +
                         " encoder output");
  if ((sigma_g_cols.array() <= 0.0).any())
    throw NumericError("kl_graph: nonpositive target sigma");
  const Matrix log_sg = sigma_g_cols.array().log().matrix();
  const Matrix inv_2sg2 =
      (0.5 / sigma_g_cols.array().square()).matrix();
  const Var quad = t.cmul(
      t.add(t.square(e.sigma), t.square(t.sub(e.mu, t.constant(mu_g_cols)))),
      t.constant(inv_2sg2));
  const Var per_coord = t.add_scalar(
      t.add(t.sub(t.constant(log_sg), t.log(e.sigma)), quad), -0.5);
  return t.scale(t.sum_all(per_coord), 1.0 / static_cast<double>(cols));
}

// ---- parameter plumbing ---------------------------------------------------

std::vector<Matrix*> tensor_list(ModelParams& m) {
  return {&m.encoder.trunk.W,      &m.encoder.trunk.b,
          &m.encoder.mean_head.W,  &m.encoder.mean_head.b,
          &m.encoder.scale_head.W, &m.encoder.scale_head.b,
          &m.classifier.out.W,     &m.classifier.out.b};
}

std::vector<const Matrix*> tensor_list(const ModelParams& m) {
  return {&m.encoder.trunk.W,      &m.encoder.trunk.b,
          &m.encoder.mean_head.W,  &m.encoder.mean_head.b,
          &m.encoder.scale_head.W, &m.encoder.scale_head.b,
          &m.classifier.out.W,     &m.classifier.out.b};
}

std::vector<Matrix*> tensor_list(GeneratorParams& g) {
  return {&g.hidden.W, &g.hidden.b, &g.out.W, &g.out.b};
}

std::vector<const Matrix*> tensor_list(const GeneratorParams& g) {
  return {&g.hidden.W, &g.hidden.b, &g.out.W, &g.out.b};
}

namespace {

bool same_tensors(const std::vector<const Matrix*>& a,
                  const std::vector<const Matrix*>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i]->rows() != b[i]->rows() || a[i]->cols() != b[i]->cols())
      return false;
    if (std::memcmp(a[i]->data(), b[i]->data(),
                    sizeof(double) * a[i]->size()) != 0)
      return false;
  }
  return true;
}

}  // namespace

bool same_values(const ModelParams& a, const ModelParams& b) {
  return same_tensors(tensor_list(a), tensor_list(b));
}

bool same_values(const GeneratorParams& a, const GeneratorParams& b) {
  return a.class_count == b.class_count &&
         same_tensors(tensor_list(a), tensor_list(b));
}

Vector flatten(const std::vector<const Matrix*>& tensors) {
  Eigen::Index total = 0;
  for (const Matrix* t : tensors) total += t->size();
  Vector flat(total);
  Eigen::Index at = 0;
  for (const Matrix* t : tensors) {
    flat.segment(at, t->size()) = Eigen::Map<const Vector>(t->data(), t->size());
    at += t->size();
  }
  return flat;
}

void unflatten(const Vector& flat, const std::vector<Matrix*>& tensors) {
  Eigen::Index total = 0;
  for (const Matrix* t : tensors) total += t->size();
  if (flat.size() != total)
    throw DimensionError("unflatten: " + std::to_string(flat.size()) +
                         " values for " + std::to_string(total) + " slots");
  Eigen::Index at = 0;
  for (Matrix* t : tensors) {
    Eigen::Map<Vector>(t->data(), t->size()) = flat.segment(at, t->size());
    at += t->size();
  }
}

// ---- checkpoint file ------------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'F', 'C', 'P', '1'};

void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw IoError("checkpoint: truncated read");
  return v;
}

void write_string(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is) {
  const std::uint64_t n = read_u64(is);
  if (n > (1u << 20)) throw IoError("checkpoint: implausible string length");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw IoError("checkpoint: truncated read");
  return s;
}

void write_matrix(std::ostream& os, const Matrix& m) {
  write_u64(os, static_cast<std::uint64_t>(m.rows()));
  write_u64(os, static_cast<std::uint64_t>(m.cols()));
  os.write(reinterpret_cast<const char*>(m.data()),
           static_cast<std::streamsize>(sizeof(double) * m.size()));
}

Matrix read_matrix(std::istream& is) {
  const auto rows = static_cast<Eigen::Index>(read_u64(is));
  const auto cols = static_cast<Eigen::Index>(read_u64(is));
  if (rows < 0 || cols < 0 || rows * cols > (1 << 26))
    throw IoError("checkpoint: implausible tensor shape");
  Matrix m(rows, cols);
  is.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(sizeof(double) * m.size()));
  if (!is) throw IoError("checkpoint: truncated read");
  return m;
}

std::size_t matrix_bytes(const Matrix& m) {
  return 2 * sizeof(std::uint64_t) + sizeof(double) * m.size();
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot open " + path + " for write");
  os.write(kCkptMagic, 4);
  // provenance header: tool version, config hash, master seed, variant
  write_string(os, std::string(kToolVersion));
  write_string(os, ckpt.meta.config_hash);
  write_u64(os, ckpt.meta.seed);
  write_string(os, ckpt.meta.variant);
  write_u64(os, static_cast<std::uint64_t>(ckpt.generator.class_count));
  for (const Matrix* m : tensor_list(ckpt.model)) write_matrix(os, *m);
  for (const Matrix* m : tensor_list(ckpt.generator)) write_matrix(os, *m);
  if (!os) throw IoError("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCkptMagic, 4) != 0)
    throw IoError("checkpoint: bad magic in " + path);
  Checkpoint ckpt;
  read_string(is);  // tool version, informational
  ckpt.meta.config_hash = read_string(is);
  ckpt.meta.seed = read_u64(is);
  ckpt.meta.variant = read_string(is);
  ckpt.generator.class_count = static_cast<int>(read_u64(is));
  for (Matrix* m : tensor_list(ckpt.model)) *m = read_matrix(is);
  for (Matrix* m : tensor_list(ckpt.generator)) *m = read_matrix(is);
  return ckpt;
}

std::size_t serialized_byte_size(const ModelParams& m) {
  std::size_t n = 0;
  for (const Matrix* t : tensor_list(m)) n += matrix_bytes(*t);
  return n;
}

std::size_t serialized_byte_size(const GeneratorParams& g) {
  std::size_t n = sizeof(std::uint64_t);
  for (const Matrix* t : tensor_list(g)) n += matrix_bytes(*t);
  return n;
}

std::size_t serialized_byte_size(const ClassGaussianTable& t) {
  std::size_t n = sizeof(std::uint64_t);
  for (const auto& e : t.entries)
    n += 2 * sizeof(std::uint64_t) + sizeof(double) * (e.mu.size() + e.sigma.size());
  return n;
}

}  // namespace fedcir
