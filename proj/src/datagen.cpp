#include "fedcir/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace fedcir {

LatentTask make_latent_task(int class_count, int input_dim, double class_sep,
                            double noise_scale, std::uint64_t seed) {
  if (class_count < 2) throw ConfigError("latent task: need >= 2 classes");
  if (input_dim < 2) throw ConfigError("latent task: need input_dim >= 2");
  LatentTask task;
  task.class_count = class_count;
  task.input_dim = input_dim;
  task.noise_scale = noise_scale;
  task.seed = seed;
  Rng rng = derive_rng(seed, "class_means");
  task.class_means.resize(input_dim, class_count);
  for (int c = 0; c < class_count; ++c)
    for (int i = 0; i < input_dim; ++i)
      task.class_means(i, c) = class_sep * rng.normal();
  for (int a = 0; a < class_count; ++a)
    for (int b = a + 1; b < class_count; ++b)
      if ((task.class_means.col(a) - task.class_means.col(b)).norm() < 1e-9)
        throw DataError("latent task: class means " + std::to_string(a) +
                        " and " + std::to_string(b) + " coincide");
  return task;
}

Matrix rotation_from_angles(int dim, const std::vector<double>& angles) {
  Matrix rot = Matrix::Identity(dim, dim);
  for (std::size_t t = 0; t < angles.size(); ++t) {
    const int p = static_cast<int>(t % static_cast<std::size_t>(dim - 1));
    const double c = std::cos(angles[t]);
    const double s = std::sin(angles[t]);
    Matrix givens = Matrix::Identity(dim, dim);
    givens(p, p) = c;
    givens(p, p + 1) = -s;
    givens(p + 1, p) = s;
    givens(p + 1, p + 1) = c;
    rot = givens * rot;
  }
  return rot;
}

DomainSpec make_domain_spec(int dim, const std::vector<double>& angles,
                            const Vector& scale, const Vector& bias) {
  if (scale.size() != dim || bias.size() != dim)
    throw DimensionError("domain spec: scale/bias must have dim " +
                         std::to_string(dim));
  if ((scale.array() <= 0.0).any())
    throw DataError("domain spec: scale coordinates must be positive");
  DomainSpec spec{rotation_from_angles(dim, angles), scale, bias};
  const double ortho_err =
      (spec.rotation.transpose() * spec.rotation - Matrix::Identity(dim, dim))
          .cwiseAbs()
          .maxCoeff();
  if (ortho_err > 1e-10)
    throw NumericError("domain spec: rotation not orthogonal, err " +
                       std::to_string(ortho_err));
  return spec;
}

Vector apply_domain_shift(const DomainSpec& spec, const Vector& x) {
  if (x.size() != spec.rotation.cols())
    throw DimensionError("apply_domain_shift: input " +
                         std::to_string(x.size()) + " vs rotation " +
                         shape_str(spec.rotation));
  return (spec.rotation * x).cwiseProduct(spec.scale) + spec.bias;
}

Matrix apply_domain_shift(const DomainSpec& spec, const Matrix& X) {
  if (X.rows() != spec.rotation.cols())
    throw DimensionError("apply_domain_shift: input " + shape_str(X) +
                         " vs rotation " + shape_str(spec.rotation));
  return ((spec.rotation * X).array().colwise() * spec.scale.array())
             .matrix()
             .colwise() +
         spec.bias;
}

Vector invert_domain_shift(const DomainSpec& spec, const Vector& x) {
  return spec.rotation.transpose() * (x - spec.bias).cwiseQuotient(spec.scale);
}

Matrix invert_domain_shift(const DomainSpec& spec, const Matrix& X) {
  return spec.rotation.transpose() *
         ((X.colwise() - spec.bias).array().colwise() / spec.scale.array())
             .matrix();
}

std::pair<Matrix, VectorXi> make_base_dataset(const LatentTask& task, int n) {
  if (n < task.class_count)
    throw ConfigError("make_base_dataset: n=" + std::to_string(n) +
                      " smaller than class count " +
                      std::to_string(task.class_count));
  Rng rng = derive_rng(task.seed, "base_samples");
  Matrix samples(task.input_dim, n);
  VectorXi labels(n);
  for (int i = 0; i < n; ++i) {
    const int y = i % task.class_count;
    labels[i] = y;
    for (int d = 0; d < task.input_dim; ++d)
      samples(d, i) = task.class_means(d, y) + task.noise_scale * rng.normal();
  }
  return {std::move(samples), std::move(labels)};
}

std::vector<std::vector<int>> dirichlet_partition(const VectorXi& labels,
                                                  int n_clients, double beta,
                                                  Rng& rng) {
  if (n_clients < 1) throw ConfigError("dirichlet_partition: n_clients < 1");
  if (beta <= 0.0) throw ConfigError("dirichlet_partition: beta must be > 0");
  if (labels.size() < n_clients)
    throw ConfigError("dirichlet_partition: fewer samples (" +
                      std::to_string(labels.size()) + ") than clients (" +
                      std::to_string(n_clients) + ")");

  const int n_classes = labels.size() == 0 ? 0 : labels.maxCoeff() + 1;
  std::vector<std::vector<int>> shards(n_clients);

  // Marsaglia-Tsang gamma sampler; the a<1 case uses the U^(1/a) boost.
  const auto gamma_draw = [&rng](double a) {
    double boost = 1.0;
    if (a < 1.0) {
      boost = std::pow(rng.uniform_pos(), 1.0 / a);
      a += 1.0;
    }
    const double d = a - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = rng.normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = rng.uniform_pos();
      if (u < 1.0 - 0.0331 * x * x * x * x) return boost * d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v)))
        return boost * d * v;
    }
  };

  for (int c = 0; c < n_classes; ++c) {
    std::vector<int> idx;
    for (int i = 0; i < labels.size(); ++i)
      if (labels[i] == c) idx.push_back(i);
    if (idx.empty()) continue;
    // shuffle class indices, then cut at cumulative Dirichlet proportions
    for (int i = static_cast<int>(idx.size()) - 1; i > 0; --i)
      std::swap(idx[i], idx[rng.uniform_int(i + 1)]);
    std::vector<double> prop(n_clients);
    double total = 0.0;
    for (double& p : prop) total += (p = gamma_draw(beta));
    double cum = 0.0;
    std::size_t start = 0;
    for (int k = 0; k < n_clients; ++k) {
      cum += prop[k] / total;
      const auto end = (k == n_clients - 1)
                           ? idx.size()
                           : static_cast<std::size_t>(std::min(
                                 cum * static_cast<double>(idx.size()),
                                 static_cast<double>(idx.size())));
      for (std::size_t i = start; i < end; ++i) shards[k].push_back(idx[i]);
      start = std::max(start, end);
    }
  }

  // empty-client repair: steal one sample from the largest shard
  for (int k = 0; k < n_clients; ++k) {
    while (shards[k].empty()) {
      auto largest = std::max_element(
          shards.begin(), shards.end(),
          [](const auto& a, const auto& b) { return a.size() < b.size(); });
      if (largest->size() <= 1)
        throw ConfigError("dirichlet_partition: cannot repair empty client");
      shards[k].push_back(largest->back());
      largest->pop_back();
    }
  }
  for (auto& s : shards) std::sort(s.begin(), s.end());
  return shards;
}

Federation build_federation(const DataConfig& cfg, std::uint64_t seed) {
  if (cfg.n_domains < 1) throw ConfigError("data: need at least one domain");
  if (cfg.samples_per_domain < 5 * cfg.class_count)
    throw ConfigError("data: samples_per_domain too small for the 20% split");
  int n_clients = cfg.n_clients;
  if (cfg.partition == PartitionMode::FeatureShift) {
    n_clients = cfg.n_domains;
  } else if (n_clients % cfg.n_domains != 0) {
    throw ConfigError("data: clients (" + std::to_string(n_clients) +
                      ") must be a multiple of domains (" +
                      std::to_string(cfg.n_domains) + ") for dirichlet mode");
  }

  Federation fed;
  fed.task = make_latent_task(cfg.class_count, cfg.input_dim, cfg.class_sep,
                              cfg.noise_scale, derive_seed(seed, "task"));

  const int clients_per_domain = n_clients / cfg.n_domains;
  std::vector<Matrix> test_blocks;
  std::vector<VectorXi> test_label_blocks;
  fed.shards.resize(n_clients);

  for (int d = 0; d < cfg.n_domains; ++d) {
    Rng spec_rng = derive_rng(seed, "domain", d);
    std::vector<double> angles(cfg.input_dim - 1);
    for (double& a : angles)
      a = spec_rng.uniform_range(-cfg.rotation_max, cfg.rotation_max);
    Vector scale(cfg.input_dim), bias(cfg.input_dim);
    for (int i = 0; i < cfg.input_dim; ++i) {
      scale[i] = std::exp(spec_rng.uniform_range(std::log(cfg.scale_min),
                                                 std::log(cfg.scale_max)));
      bias[i] = spec_rng.uniform_range(-cfg.bias_max, cfg.bias_max);
    }
    fed.domains.push_back(
        make_domain_spec(cfg.input_dim, angles, scale, bias));

    LatentTask domain_task = fed.task;
    domain_task.seed = derive_seed(seed, "base", d);
    auto [latent, labels] = make_base_dataset(domain_task, cfg.samples_per_domain);
    const Matrix shifted = apply_domain_shift(fed.domains.back(), latent);

    // every fifth sample -> shared mixed-domain test pool
    std::vector<int> train_idx, test_idx;
    for (int i = 0; i < cfg.samples_per_domain; ++i)
      (i % 5 == 4 ? test_idx : train_idx).push_back(i);

    Matrix test_block(cfg.input_dim, test_idx.size());
    VectorXi test_labels(test_idx.size());
    for (std::size_t i = 0; i < test_idx.size(); ++i) {
      test_block.col(i) = shifted.col(test_idx[i]);
      test_labels[i] = labels[test_idx[i]];
    }
    test_blocks.push_back(std::move(test_block));
    test_label_blocks.push_back(std::move(test_labels));

    VectorXi train_labels(train_idx.size());
    for (std::size_t i = 0; i < train_idx.size(); ++i)
      train_labels[i] = labels[train_idx[i]];

    std::vector<std::vector<int>> assignment;
    if (cfg.partition == PartitionMode::FeatureShift) {
      assignment.push_back(std::vector<int>(train_idx.size()));
      std::iota(assignment[0].begin(), assignment[0].end(), 0);
    } else {
      Rng part_rng = derive_rng(seed, "partition", d);
      assignment = dirichlet_partition(train_labels, clients_per_domain,
                                       cfg.dirichlet_beta, part_rng);
    }
    for (int j = 0; j < clients_per_domain; ++j) {
      const int client = d * clients_per_domain + j;
      Shard& shard = fed.shards[client];
      shard.client_id = client;
      shard.inputs.resize(cfg.input_dim, assignment[j].size());
      shard.labels.resize(assignment[j].size());
      for (std::size_t i = 0; i < assignment[j].size(); ++i) {
        shard.inputs.col(i) = shifted.col(train_idx[assignment[j][i]]);
        shard.labels[i] = train_labels[assignment[j][i]];
      }
    }
  }

  Eigen::Index test_total = 0, train_total = 0;
  for (const auto& b : test_blocks) test_total += b.cols();
  for (const auto& s : fed.shards) train_total += s.inputs.cols();
  fed.test_inputs.resize(cfg.input_dim, test_total);
  fed.test_labels.resize(test_total);
  Eigen::Index at = 0;
  for (std::size_t d = 0; d < test_blocks.size(); ++d) {
    fed.test_inputs.middleCols(at, test_blocks[d].cols()) = test_blocks[d];
    fed.test_labels.segment(at, test_label_blocks[d].size()) =
        test_label_blocks[d];
    at += test_blocks[d].cols();
  }
  for (auto& s : fed.shards)
    s.weight = static_cast<double>(s.inputs.cols()) /
               static_cast<double>(train_total);
  return fed;
}

// ---- dataset file ----------------------------------------------------------

namespace {

constexpr char kDataMagic[4] = {'F', 'D', 'T', '1'};

void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw IoError("dataset: truncated read");
  return v;
}
void write_f64(std::ostream& os, double v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
double read_f64(std::istream& is) {
  double v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw IoError("dataset: truncated read");
  return v;
}
void write_string(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
std::string read_string(std::istream& is) {
  const std::uint64_t n = read_u64(is);
  if (n > (1u << 20)) throw IoError("dataset: implausible string length");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw IoError("dataset: truncated read");
  return s;
}

// samples are stored row-major: one sample (column) at a time
void write_sample_block(std::ostream& os, const Matrix& X, const VectorXi& y) {
  write_u64(os, static_cast<std::uint64_t>(X.cols()));
  for (Eigen::Index j = 0; j < X.cols(); ++j)
    for (Eigen::Index i = 0; i < X.rows(); ++i) write_f64(os, X(i, j));
  for (Eigen::Index j = 0; j < y.size(); ++j)
    write_u64(os, static_cast<std::uint64_t>(y[j]));
}

void read_sample_block(std::istream& is, int dim, Matrix& X, VectorXi& y) {
  const auto n = static_cast<Eigen::Index>(read_u64(is));
  if (n < 0 || n > (1 << 26)) throw IoError("dataset: implausible sample count");
  X.resize(dim, n);
  y.resize(n);
  for (Eigen::Index j = 0; j < n; ++j)
    for (int i = 0; i < dim; ++i) X(i, j) = read_f64(is);
  for (Eigen::Index j = 0; j < n; ++j)
    y[j] = static_cast<int>(read_u64(is));
}

}  // namespace

void save_dataset(const std::string& path, const Federation& fed,
                  const std::string& provenance) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("dataset: cannot open " + path + " for write");
  os.write(kDataMagic, 4);
  write_string(os, provenance);
  write_u64(os, static_cast<std::uint64_t>(fed.task.class_count));
  write_u64(os, static_cast<std::uint64_t>(fed.task.input_dim));
  write_f64(os, fed.task.noise_scale);
  write_u64(os, fed.task.seed);
  for (Eigen::Index c = 0; c < fed.task.class_means.cols(); ++c)
    for (Eigen::Index i = 0; i < fed.task.class_means.rows(); ++i)
      write_f64(os, fed.task.class_means(i, c));
  write_u64(os, fed.domains.size());
  for (const DomainSpec& spec : fed.domains) {
    for (Eigen::Index j = 0; j < spec.rotation.cols(); ++j)
      for (Eigen::Index i = 0; i < spec.rotation.rows(); ++i)
        write_f64(os, spec.rotation(i, j));
    for (Eigen::Index i = 0; i < spec.scale.size(); ++i)
      write_f64(os, spec.scale[i]);
    for (Eigen::Index i = 0; i < spec.bias.size(); ++i)
      write_f64(os, spec.bias[i]);
  }
  write_u64(os, fed.shards.size());
  for (const Shard& s : fed.shards) {
    write_u64(os, static_cast<std::uint64_t>(s.client_id));
    write_f64(os, s.weight);
    write_sample_block(os, s.inputs, s.labels);
  }
  write_sample_block(os, fed.test_inputs, fed.test_labels);
  if (!os) throw IoError("dataset: write failed for " + path);
}

Federation load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("dataset: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kDataMagic, 4) != 0)
    throw IoError("dataset: bad magic in " + path);
  read_string(is);  // provenance, informational
  Federation fed;
  fed.task.class_count = static_cast<int>(read_u64(is));
  fed.task.input_dim = static_cast<int>(read_u64(is));
  fed.task.noise_scale = read_f64(is);
  fed.task.seed = read_u64(is);
  fed.task.class_means.resize(fed.task.input_dim, fed.task.class_count);
  for (Eigen::Index c = 0; c < fed.task.class_means.cols(); ++c)
    for (Eigen::Index i = 0; i < fed.task.class_means.rows(); ++i)
      fed.task.class_means(i, c) = read_f64(is);
  const auto n_domains = read_u64(is);
  const int dim = fed.task.input_dim;
  for (std::uint64_t d = 0; d < n_domains; ++d) {
    DomainSpec spec;
    spec.rotation.resize(dim, dim);
    for (int j = 0; j < dim; ++j)
      for (int i = 0; i < dim; ++i) spec.rotation(i, j) = read_f64(is);
    spec.scale.resize(dim);
    for (int i = 0; i < dim; ++i) spec.scale[i] = read_f64(is);
    spec.bias.resize(dim);
    for (int i = 0; i < dim; ++i) spec.bias[i] = read_f64(is);
    fed.domains.push_back(std::move(spec));
  }
  const auto n_shards = read_u64(is);
  for (std::uint64_t k = 0; k < n_shards; ++k) {
    Shard s;
    s.client_id = static_cast<int>(read_u64(is));
    s.weight = read_f64(is);
    read_sample_block(is, dim, s.inputs, s.labels);
    fed.shards.push_back(std::move(s));
  }
  read_sample_block(is, dim, fed.test_inputs, fed.test_labels);
  return fed;
}

}  // namespace fedcir
