#include "fedcir/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace fedcir {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

[[noreturn]] void fail(const std::string& origin, int line,
                       const std::string& message) {
  throw ConfigError(origin + ":" + std::to_string(line) + ": " + message);
}

double parse_double(const std::string& origin, int line, const std::string& key,
                    const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    fail(origin, line, "key '" + key + "': cannot parse '" + value +
                           "' as a number");
  }
}

long long parse_int(const std::string& origin, int line, const std::string& key,
                    const std::string& value) {
  long long v = 0;
  const auto [ptr, ec] =
      std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || ptr != value.data() + value.size())
    fail(origin, line, "key '" + key + "': cannot parse '" + value +
                           "' as an integer");
  return v;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void ExperimentSpec::validate() const {
  fed.validate();
  if (data.class_count < 2) throw ConfigError("data.classes must be >= 2");
  if (data.input_dim < 2) throw ConfigError("data.input_dim must be >= 2");
  if (data.n_domains < 1) throw ConfigError("data.domains must be >= 1");
  if (data.samples_per_domain < 5 * data.class_count)
    throw ConfigError("data.samples_per_domain must be >= 5 * data.classes");
  if (data.noise_scale < 0.0) throw ConfigError("data.noise_scale must be >= 0");
  if (data.class_sep <= 0.0) throw ConfigError("data.class_sep must be > 0");
  if (data.rotation_max < 0.0) throw ConfigError("data.rotation_max must be >= 0");
  if (data.scale_min <= 0.0 || data.scale_max < data.scale_min)
    throw ConfigError("data.scale_min/scale_max must satisfy 0 < min <= max");
  if (data.bias_max < 0.0) throw ConfigError("data.bias_max must be >= 0");
  if (data.n_clients < 1) throw ConfigError("data.clients must be >= 1");
  if (data.partition == PartitionMode::Dirichlet) {
    if (data.dirichlet_beta <= 0.0)
      throw ConfigError("data.dirichlet_beta must be > 0");
    if (data.n_clients % data.n_domains != 0)
      throw ConfigError("data.clients must be a multiple of data.domains");
  }
  if (hidden_dim < 1 || rep_dim < 1 || noise_dim < 1 || gen_hidden_dim < 1)
    throw ConfigError("model dimensions must be >= 1");
  if (variants.empty()) throw ConfigError("run.variants must not be empty");
  if (seeds.empty()) throw ConfigError("run.seeds must not be empty");
  if (out_dir.empty()) throw ConfigError("run.out must not be empty");
}

ExperimentSpec parse_config_text(const std::string& text,
                                 const std::string& origin) {
  ExperimentSpec spec;
  std::istringstream is(text);
  std::string raw;
  int line = 0;
  while (std::getline(is, raw)) {
    ++line;
    const std::size_t hash = raw.find('#');
    if (hash != std::string::npos) raw.erase(hash);
    const std::string entry = trim(raw);
    if (entry.empty()) continue;
    const std::size_t eq = entry.find('=');
    if (eq == std::string::npos)
      fail(origin, line, "expected 'key = value', got '" + entry + "'");
    const std::string key = trim(entry.substr(0, eq));
    const std::string value = trim(entry.substr(eq + 1));
    if (key.empty()) fail(origin, line, "empty key");
    if (value.empty()) fail(origin, line, "key '" + key + "' has no value");

    const auto num = [&] { return parse_double(origin, line, key, value); };
    const auto integer = [&] {
      return static_cast<int>(parse_int(origin, line, key, value));
    };

    if (key == "fed.rounds") spec.fed.rounds = integer();
    else if (key == "fed.local_steps") spec.fed.local_steps = integer();
    else if (key == "fed.gen_steps") spec.fed.gen_steps = integer();
    else if (key == "fed.batch_size") spec.fed.batch_size = integer();
    else if (key == "fed.lr") spec.fed.lr = num();
    else if (key == "fed.gen_lr") spec.fed.gen_lr = num();
    else if (key == "fed.momentum") spec.fed.momentum = num();
    else if (key == "fed.weight_decay") spec.fed.weight_decay = num();
    else if (key == "fed.lambda_reg") spec.fed.lambda_reg = num();
    else if (key == "fed.lambda_align") spec.fed.lambda_align = num();
    else if (key == "fed.prox_mu") spec.fed.prox_mu = num();
    else if (key == "fed.client_ratio") spec.fed.client_ratio = num();
    else if (key == "fed.table_samples") spec.fed.table_samples = integer();
    else if (key == "data.classes") spec.data.class_count = integer();
    else if (key == "data.input_dim") spec.data.input_dim = integer();
    else if (key == "data.domains") spec.data.n_domains = integer();
    else if (key == "data.samples_per_domain")
      spec.data.samples_per_domain = integer();
    else if (key == "data.noise_scale") spec.data.noise_scale = num();
    else if (key == "data.class_sep") spec.data.class_sep = num();
    else if (key == "data.rotation_max") spec.data.rotation_max = num();
    else if (key == "data.scale_min") spec.data.scale_min = num();
    else if (key == "data.scale_max") spec.data.scale_max = num();
    else if (key == "data.bias_max") spec.data.bias_max = num();
    else if (key == "data.partition") {
      if (value == "feature_shift") spec.data.partition = PartitionMode::FeatureShift;
      else if (value == "dirichlet") spec.data.partition = PartitionMode::Dirichlet;
      else fail(origin, line,
                "data.partition must be feature_shift or dirichlet, got '" +
                    value + "'");
    } else if (key == "data.clients") spec.data.n_clients = integer();
    else if (key == "data.dirichlet_beta") spec.data.dirichlet_beta = num();
    else if (key == "model.hidden") spec.hidden_dim = integer();
    else if (key == "model.rep_dim") spec.rep_dim = integer();
    else if (key == "model.noise_dim") spec.noise_dim = integer();
    else if (key == "model.gen_hidden") spec.gen_hidden_dim = integer();
    else if (key == "run.variants") {
      spec.variants.clear();
      for (const std::string& name : split_list(value)) {
        try {
          spec.variants.push_back(variant_from_name(name));
        } catch (const ConfigError& e) {
          fail(origin, line, e.what());
        }
      }
    } else if (key == "run.seeds") {
      spec.seeds.clear();
      for (const std::string& s : split_list(value))
        spec.seeds.push_back(
            static_cast<std::uint64_t>(parse_int(origin, line, key, s)));
    } else if (key == "run.out") {
      spec.out_dir = value;
    } else {
      fail(origin, line, "unknown key '" + key + "'");
    }
  }
  if (spec.data.partition == PartitionMode::FeatureShift)
    spec.data.n_clients = spec.data.n_domains;
  try {
    spec.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return spec;
}

ExperimentSpec parse_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("config: cannot open " + path);
  std::ostringstream buffer;
  buffer << is.rdbuf();
  return parse_config_text(buffer.str(), path);
}

std::string canonical_config(const ExperimentSpec& spec) {
  std::map<std::string, std::string> kv;
  kv["fed.rounds"] = std::to_string(spec.fed.rounds);
  kv["fed.local_steps"] = std::to_string(spec.fed.local_steps);
  kv["fed.gen_steps"] = std::to_string(spec.fed.gen_steps);
  kv["fed.batch_size"] = std::to_string(spec.fed.batch_size);
  kv["fed.lr"] = fmt_double(spec.fed.lr);
  kv["fed.gen_lr"] = fmt_double(spec.fed.gen_lr);
  kv["fed.momentum"] = fmt_double(spec.fed.momentum);
  kv["fed.weight_decay"] = fmt_double(spec.fed.weight_decay);
  kv["fed.lambda_reg"] = fmt_double(spec.fed.lambda_reg);
  kv["fed.lambda_align"] = fmt_double(spec.fed.lambda_align);
  kv["fed.prox_mu"] = fmt_double(spec.fed.prox_mu);
  kv["fed.client_ratio"] = fmt_double(spec.fed.client_ratio);
  kv["fed.table_samples"] = std::to_string(spec.fed.table_samples);
  kv["data.classes"] = std::to_string(spec.data.class_count);
  kv["data.input_dim"] = std::to_string(spec.data.input_dim);
  kv["data.domains"] = std::to_string(spec.data.n_domains);
  kv["data.samples_per_domain"] = std::to_string(spec.data.samples_per_domain);
  kv["data.noise_scale"] = fmt_double(spec.data.noise_scale);
  kv["data.class_sep"] = fmt_double(spec.data.class_sep);
  kv["data.rotation_max"] = fmt_double(spec.data.rotation_max);
  kv["data.scale_min"] = fmt_double(spec.data.scale_min);
  kv["data.scale_max"] = fmt_double(spec.data.scale_max);
  kv["data.bias_max"] = fmt_double(spec.data.bias_max);
  kv["data.partition"] = spec.data.partition == PartitionMode::FeatureShift
                             ? "feature_shift"
                             : "dirichlet";
  kv["data.clients"] = std::to_string(spec.data.n_clients);
  kv["data.dirichlet_beta"] = fmt_double(spec.data.dirichlet_beta);
  kv["model.hidden"] = std::to_string(spec.hidden_dim);
  kv["model.rep_dim"] = std::to_string(spec.rep_dim);
  kv["model.noise_dim"] = std::to_string(spec.noise_dim);
  kv["model.gen_hidden"] = std::to_string(spec.gen_hidden_dim);
  {
    std::string names;
    for (const Variant v : spec.variants) {
      if (!names.empty()) names += ",";
      names += variant_name(v);
    }
    kv["run.variants"] = names;
    std::string seeds;
    for (const std::uint64_t s : spec.seeds) {
      if (!seeds.empty()) seeds += ",";
      seeds += std::to_string(s);
    }
    kv["run.seeds"] = seeds;
    kv["run.out"] = spec.out_dir;
  }
  std::ostringstream os;
  for (const auto& [key, value] : kv) os << key << " = " << value << "\n";
  return os.str();
}

std::string config_hash(const ExperimentSpec& spec) {
  const std::string canon = canonical_config(spec);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char c : canon) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace fedcir
