#pragma once

#include <string>
#include <vector>

#include "fedcir/datagen.hpp"
#include "fedcir/fedproto.hpp"
#include "fedcir/models.hpp"

namespace fedcir {

// Full experiment description. Flat `key = value` config files with dotted
// section prefixes; unknown keys are rejected, unset keys take the defaults
// below (regularizer weights and optimizer settings follow the paper's
// published configuration).
struct ExperimentSpec {
  FedConfig fed;    // per-run fields (variant, seed) are filled per job
  DataConfig data;
  int hidden_dim = 32;
  int rep_dim = 8;
  int noise_dim = 8;
  int gen_hidden_dim = 32;
  std::vector<Variant> variants{Variant::FedAvg, Variant::FedCiR};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::string out_dir = "out";

  ModelDims model_dims() const {
    ModelDims dims;
    dims.input_dim = data.input_dim;
    dims.hidden_dim = hidden_dim;
    dims.rep_dim = rep_dim;
    dims.class_count = data.class_count;
    dims.noise_dim = noise_dim;
    dims.gen_hidden_dim = gen_hidden_dim;
    return dims;
  }

  void validate() const;
};

ExperimentSpec parse_config(const std::string& path);
ExperimentSpec parse_config_text(const std::string& text,
                                 const std::string& origin = "<string>");

// Sorted-key canonical form; parse(canonical(spec)) == spec.
std::string canonical_config(const ExperimentSpec& spec);

// FNV-1a over the canonical form, 16 hex digits.
std::string config_hash(const ExperimentSpec& spec);

}  // namespace fedcir
