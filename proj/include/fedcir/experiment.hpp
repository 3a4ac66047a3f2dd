#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "fedcir/config.hpp"
#include "fedcir/diagnostics.hpp"

namespace fedcir {

struct RunResult {
  Variant variant = Variant::FedAvg;
  std::uint64_t seed = 0;
  std::vector<RoundMetrics> metrics;
  Checkpoint checkpoint;  // final global model + generator
};

// Library path behind `run`: build the federation for (spec, seed),
// initialize parameters from the master seed and drive T rounds.
RunResult run_training(const ExperimentSpec& spec, Variant variant,
                       std::uint64_t seed);

// Numeric-column equality of two metrics streams (the variant label column
// necessarily differs in reduction-identity comparisons).
bool metrics_equal_ignoring_variant(const std::vector<RoundMetrics>& a,
                                    const std::vector<RoundMetrics>& b);

std::string metrics_csv(const ExperimentSpec& spec,
                        const std::vector<RoundMetrics>& rounds);

struct DiagOptions {
  std::string checkpoint_a;
  std::string checkpoint_b;
  std::string out_dir;
  bool raw_inputs = false;  // PAD on raw inputs instead of representations
};

// PAD + local-risk report for one model over the federation of (spec, seed).
struct DiagReport {
  std::vector<PadReport> client_pairs;  // all C(n,2) pairs
  std::vector<PadReport> global_rows;   // global mixture vs each client
  std::vector<double> risks;            // per client, ascending id
  double mean_global_pad = 0.0;
};

DiagReport run_diag_for_model(const ExperimentSpec& spec,
                              const ModelParams& model, std::uint64_t seed,
                              bool raw_inputs);

int cmd_run(const ExperimentSpec& spec);
int cmd_diag(const ExperimentSpec& spec, const DiagOptions& opts);
int cmd_selfcheck(std::ostream& os);

}  // namespace fedcir
