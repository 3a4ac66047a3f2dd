#include "fedcir/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "fedcir/selfcheck.hpp"

namespace fedcir {

namespace {

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string provenance_line(const ExperimentSpec& spec, std::uint64_t seed) {
  std::ostringstream os;
  os << "# " << kToolName << " " << kToolVersion << " config="
     << config_hash(spec) << " seed=" << seed << " warmup=1";
  return os.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for write");
  os << content;
  if (!os) throw IoError("write failed for " + path);
}

}  // namespace

RunResult run_training(const ExperimentSpec& spec, Variant variant,
                       std::uint64_t seed) {
  FedConfig cfg = spec.fed;
  cfg.variant = variant;
  cfg.seed = seed;
  cfg.validate();

  const Federation fed = build_federation(spec.data, seed);
  const ModelDims dims = spec.model_dims();

  Rng model_rng = derive_rng(seed, "init_model");
  Rng gen_rng = derive_rng(seed, "init_generator");
  ServerState server;
  server.model = init_model(dims, model_rng);
  server.generator = init_generator(dims, gen_rng);

  std::vector<ClientState> clients;
  clients.reserve(fed.shards.size());
  for (const Shard& shard : fed.shards)
    clients.push_back({shard, server.model});

  RunResult result;
  result.variant = variant;
  result.seed = seed;
  result.metrics.reserve(cfg.rounds);
  for (int t = 0; t < cfg.rounds; ++t)
    result.metrics.push_back(
        run_round(server, clients, fed.test_inputs, fed.test_labels, cfg));

  result.checkpoint.model = server.model;
  result.checkpoint.generator = server.generator;
  result.checkpoint.meta.config_hash = config_hash(spec);
  result.checkpoint.meta.seed = seed;
  result.checkpoint.meta.variant = variant_name(variant);
  return result;
}

bool metrics_equal_ignoring_variant(const std::vector<RoundMetrics>& a,
                                    const std::vector<RoundMetrics>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const RoundMetrics& x = a[i];
    const RoundMetrics& y = b[i];
    if (x.round != y.round || x.seed != y.seed) return false;
    if (x.test_acc != y.test_acc) return false;
    if (x.mean_local_risk != y.mean_local_risk) return false;
    if (x.mean_train_loss != y.mean_train_loss) return false;
    if (x.bytes_up != y.bytes_up || x.bytes_down != y.bytes_down) return false;
    if (x.flops != y.flops) return false;
    if (x.active_clients != y.active_clients) return false;
    if (x.client_losses != y.client_losses) return false;
  }
  return true;
}

std::string metrics_csv(const ExperimentSpec& spec,
                        const std::vector<RoundMetrics>& rounds) {
  std::ostringstream os;
  const std::uint64_t seed = rounds.empty() ? 0 : rounds.front().seed;
  os << provenance_line(spec, seed) << "\n";
  os << "round,variant,seed,test_acc,mean_local_risk,mean_train_loss,"
        "bytes_up,bytes_down,flops\n";
  for (const RoundMetrics& m : rounds) {
    os << m.round << "," << variant_name(m.variant) << "," << m.seed << ","
       << fmt17(m.test_acc) << "," << fmt17(m.mean_local_risk) << ","
       << fmt17(m.mean_train_loss) << "," << m.bytes_up << "," << m.bytes_down
       << "," << m.flops << "\n";
  }
  return os.str();
}

namespace {

int worker_count(std::size_t jobs) {
  if (const char* env = std::getenv("FEDCIR_WORKERS")) {
    const int n = std::atoi(env);
    if (n >= 1) return std::min<std::size_t>(n, jobs);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return static_cast<int>(std::min<std::size_t>(hw == 0 ? 1 : hw, jobs));
}

std::string metrics_path(const ExperimentSpec& spec, Variant v,
                         std::uint64_t seed) {
  return spec.out_dir + "/metrics_" + variant_name(v) + "_seed" +
         std::to_string(seed) + ".csv";
}

std::string checkpoint_path(const ExperimentSpec& spec, Variant v,
                            std::uint64_t seed) {
  return spec.out_dir + "/ckpt_" + variant_name(v) + "_seed" +
         std::to_string(seed) + ".bin";
}

}  // namespace

int cmd_run(const ExperimentSpec& spec) {
  spec.validate();
  std::error_code ec;
  std::filesystem::create_directories(spec.out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + spec.out_dir);

  // datasets first (one per seed, shared by all variants)
  for (const std::uint64_t seed : spec.seeds) {
    const Federation fed = build_federation(spec.data, seed);
    save_dataset(spec.out_dir + "/dataset_seed" + std::to_string(seed) + ".bin",
                 fed, provenance_line(spec, seed));
  }

  struct Job {
    Variant variant;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const Variant v : spec.variants)
    for (const std::uint64_t s : spec.seeds) jobs.push_back({v, s});

  // (variant, seed) -> final-round metrics, for the summary
  std::vector<RoundMetrics> finals(jobs.size());
  std::mutex failure_mutex;
  std::vector<std::string> failures;
  std::size_t next = 0;
  std::mutex next_mutex;

  const auto work = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard<std::mutex> lock(next_mutex);
        if (next >= jobs.size()) return;
        i = next++;
      }
      try {
        const RunResult run = run_training(spec, jobs[i].variant, jobs[i].seed);
        write_text_file(metrics_path(spec, jobs[i].variant, jobs[i].seed),
                        metrics_csv(spec, run.metrics));
        save_checkpoint(checkpoint_path(spec, jobs[i].variant, jobs[i].seed),
                        run.checkpoint);
        finals[i] = run.metrics.back();
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        failures.push_back(variant_name(jobs[i].variant) + " seed " +
                           std::to_string(jobs[i].seed) + ": " + e.what());
      }
    }
  };

  const int n_workers = worker_count(jobs.size());
  std::vector<std::thread> pool;
  for (int w = 1; w < n_workers; ++w) pool.emplace_back(work);
  work();
  for (std::thread& t : pool) t.join();

  if (!failures.empty()) {
    std::string all = "run failed:";
    for (const std::string& f : failures) all += "\n  " + f;
    throw StateError(all);
  }

  // summary: final-round mean +- std across seeds per variant
  std::ostringstream os;
  os << provenance_line(spec, spec.seeds.front()) << "\n";
  os << "variant,seeds,final_acc_mean,final_acc_std,final_risk_mean,"
        "final_risk_std\n";
  for (const Variant v : spec.variants) {
    std::vector<double> accs, risks;
    for (std::size_t i = 0; i < jobs.size(); ++i)
      if (jobs[i].variant == v) {
        accs.push_back(finals[i].test_acc);
        risks.push_back(finals[i].mean_local_risk);
      }
    const auto mean = [](const std::vector<double>& xs) {
      double s = 0.0;
      for (const double x : xs) s += x;
      return s / static_cast<double>(xs.size());
    };
    const auto sample_std = [&mean](const std::vector<double>& xs) {
      if (xs.size() < 2) return 0.0;
      const double m = mean(xs);
      double s = 0.0;
      for (const double x : xs) s += (x - m) * (x - m);
      return std::sqrt(s / static_cast<double>(xs.size() - 1));
    };
    os << variant_name(v) << "," << accs.size() << "," << fmt17(mean(accs))
       << "," << fmt17(sample_std(accs)) << "," << fmt17(mean(risks)) << ","
       << fmt17(sample_std(risks)) << "\n";
  }
  write_text_file(spec.out_dir + "/summary.csv", os.str());
  return 0;
}

DiagReport run_diag_for_model(const ExperimentSpec& spec,
                              const ModelParams& model, std::uint64_t seed,
                              bool raw_inputs) {
  const Federation fed = build_federation(spec.data, seed);
  const int n = static_cast<int>(fed.shards.size());

  // representation of each shard: mean-head output (or raw inputs)
  std::vector<Matrix> reps(n);
  for (int k = 0; k < n; ++k)
    reps[k] = raw_inputs ? fed.shards[k].inputs
                         : encode_mean(model.encoder, fed.shards[k].inputs);
  Eigen::Index total = 0;
  for (const Matrix& r : reps) total += r.cols();
  Matrix global(reps[0].rows(), total);
  Eigen::Index at = 0;
  for (const Matrix& r : reps) {
    global.middleCols(at, r.cols()) = r;
    at += r.cols();
  }

  const auto subsample = [](const Matrix& set, Eigen::Index m, Rng& rng) {
    std::vector<int> idx(set.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    for (Eigen::Index i = 0; i < m; ++i) {
      const int j =
          static_cast<int>(i) +
          rng.uniform_int(static_cast<int>(idx.size()) - static_cast<int>(i));
      std::swap(idx[i], idx[j]);
    }
    Matrix out(set.rows(), m);
    for (Eigen::Index i = 0; i < m; ++i) out.col(i) = set.col(idx[i]);
    return out;
  };

  DiagReport report;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      // balance the two sets so chance error stays at 1/2
      const Eigen::Index m = std::min(reps[i].cols(), reps[j].cols());
      Rng pick_rng = derive_rng(seed, "padpair_pick", i, j);
      const Matrix a = subsample(reps[i], m, pick_rng);
      const Matrix b = subsample(reps[j], m, pick_rng);
      Rng pad_rng = derive_rng(seed, "padpair", i, j);
      PadReport pad = proxy_a_distance(a, b, pad_rng);
      pad.a_id = fed.shards[i].client_id;
      pad.b_id = fed.shards[j].client_id;
      report.client_pairs.push_back(pad);
    }
  }
  double global_sum = 0.0;
  for (int k = 0; k < n; ++k) {
    Rng pick_rng = derive_rng(seed, "padglobal_pick", k);
    const Matrix sub = subsample(global, reps[k].cols(), pick_rng);
    Rng pad_rng = derive_rng(seed, "padglobal", k);
    PadReport pad = proxy_a_distance(sub, reps[k], pad_rng);
    pad.a_id = -1;
    pad.b_id = fed.shards[k].client_id;
    report.global_rows.push_back(pad);
    global_sum += pad.pad;
  }
  report.mean_global_pad = global_sum / n;

  for (int k = 0; k < n; ++k) {
    Rng risk_rng = derive_rng(seed, "diagrisk", k);
    report.risks.push_back(local_risk(model, fed.shards[k], risk_rng));
  }
  return report;
}

namespace {

std::string pad_csv(const ExperimentSpec& spec, std::uint64_t seed,
                    const DiagReport& report) {
  std::ostringstream os;
  os << provenance_line(spec, seed) << "\n";
  os << "pair_i,pair_j,err,pad\n";
  for (const PadReport& p : report.client_pairs)
    os << p.a_id << "," << p.b_id << "," << fmt17(p.err) << "," << fmt17(p.pad)
       << "\n";
  for (const PadReport& p : report.global_rows)
    os << "GLOBAL," << p.b_id << "," << fmt17(p.err) << "," << fmt17(p.pad)
       << "\n";
  return os.str();
}

}  // namespace

int cmd_diag(const ExperimentSpec& spec, const DiagOptions& opts) {
  const Checkpoint a = load_checkpoint(opts.checkpoint_a);
  const Checkpoint b = load_checkpoint(opts.checkpoint_b);
  if (a.meta.seed != b.meta.seed)
    throw ConfigError("diag: checkpoints trained on different seeds (" +
                      std::to_string(a.meta.seed) + " vs " +
                      std::to_string(b.meta.seed) + ")");
  const std::string out =
      opts.out_dir.empty() ? spec.out_dir : opts.out_dir;
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory " + out);

  const std::uint64_t seed = a.meta.seed;
  const DiagReport report_a =
      run_diag_for_model(spec, a.model, seed, opts.raw_inputs);
  const DiagReport report_b =
      run_diag_for_model(spec, b.model, seed, opts.raw_inputs);

  write_text_file(out + "/pad_a.csv", pad_csv(spec, seed, report_a));
  write_text_file(out + "/pad_b.csv", pad_csv(spec, seed, report_b));

  std::ostringstream risks;
  risks << provenance_line(spec, seed) << "\n";
  risks << "client,risk_a,risk_b\n";
  for (std::size_t k = 0; k < report_a.risks.size(); ++k)
    risks << k << "," << fmt17(report_a.risks[k]) << ","
          << fmt17(report_b.risks[k]) << "\n";
  write_text_file(out + "/risks.csv", risks.str());
  return 0;
}

int cmd_selfcheck(std::ostream& os) {
  const std::vector<CheckResult> results = run_selfcheck(os);
  int failed = 0;
  for (const CheckResult& r : results)
    if (!r.passed) ++failed;
  os << (failed == 0 ? "all checks passed"
                     : std::to_string(failed) + " check(s) failed")
     << "\n";
  return failed == 0 ? 0 : 1;
}

}  // namespace fedcir
