#include <cstring>
#include <iostream>
#include <string>
#include <vector>

#include "fedcir/experiment.hpp"

namespace {

constexpr const char* kUsage = R"(usage:
  fedcir run <config> [--seed S[,S...]] [--out DIR] [--variant V[,V...]]
  fedcir diag <config> --a <checkpoint> --b <checkpoint> [--out DIR] [--raw]
  fedcir selfcheck

exit codes: 0 ok, 1 check failure, 2 config error, 3 I/O error.
FEDCIR_WORKERS bounds the run worker pool.
)";

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const std::size_t comma = s.find(',', start);
    const std::string item = s.substr(
        start, comma == std::string::npos ? std::string::npos : comma - start);
    if (!item.empty()) out.push_back(item);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

std::string need_value(const std::vector<std::string>& args, std::size_t& i) {
  if (i + 1 >= args.size())
    throw fedcir::ConfigError("missing value after " + args[i]);
  return args[++i];
}

int dispatch(const std::vector<std::string>& args) {
  using namespace fedcir;
  if (args.empty()) {
    std::cerr << kUsage;
    return 2;
  }
  const std::string& command = args[0];

  if (command == "selfcheck") {
    return cmd_selfcheck(std::cout);
  }

  if (command == "run") {
    if (args.size() < 2) throw ConfigError("run: missing config path");
    ExperimentSpec spec = parse_config(args[1]);
    for (std::size_t i = 2; i < args.size(); ++i) {
      if (args[i] == "--seed") {
        spec.seeds.clear();
        for (const std::string& s : split_commas(need_value(args, i)))
          spec.seeds.push_back(std::stoull(s));
      } else if (args[i] == "--out") {
        spec.out_dir = need_value(args, i);
      } else if (args[i] == "--variant") {
        spec.variants.clear();
        for (const std::string& v : split_commas(need_value(args, i)))
          spec.variants.push_back(variant_from_name(v));
      } else {
        throw ConfigError("run: unknown option " + args[i]);
      }
    }
    spec.validate();
    return cmd_run(spec);
  }

  if (command == "diag") {
    if (args.size() < 2) throw ConfigError("diag: missing config path");
    ExperimentSpec spec = parse_config(args[1]);
    DiagOptions opts;
    for (std::size_t i = 2; i < args.size(); ++i) {
      if (args[i] == "--a") opts.checkpoint_a = need_value(args, i);
      else if (args[i] == "--b") opts.checkpoint_b = need_value(args, i);
      else if (args[i] == "--out") opts.out_dir = need_value(args, i);
      else if (args[i] == "--raw") opts.raw_inputs = true;
      else throw ConfigError("diag: unknown option " + args[i]);
    }
    if (opts.checkpoint_a.empty() || opts.checkpoint_b.empty())
      throw ConfigError("diag: both --a and --b checkpoints are required");
    return cmd_diag(spec, opts);
  }

  std::cerr << kUsage;
  throw fedcir::ConfigError("unknown command '" + command + "'");
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    return dispatch(args);
  } catch (const fedcir::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const fedcir::IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
