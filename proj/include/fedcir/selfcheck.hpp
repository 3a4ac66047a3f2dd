#pragma once

#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "fedcir/tape.hpp"

namespace fedcir {

// 1-D KL(N(mu_l, sigma_l) || N(mu_g, sigma_g)) by composite-Simpson
// integration of p log(p/q); independent of the closed form it checks.
double kl_integration_1d(double mu_l, double sigma_l, double mu_g,
                         double sigma_g);

using KlFn = std::function<double(const Vector&, const Vector&, const Vector&,
                                  const Vector&)>;

// Compares `kl` against the quadrature oracle on random 1-D Gaussian pairs
// with sigmas in [0.1, 5]. Exposed with a pluggable KL so a deliberately
// broken closed form is detectable (mutation test).
bool kl_matches_integration(const KlFn& kl, Rng& rng, int cases, double tol,
                            double* max_err = nullptr);

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

// Gradient checks for every training loss, the KL-vs-integration check,
// the Proposition 1-3 sweeps and the reduction identities. Prints one
// pass/fail line per check.
std::vector<CheckResult> run_selfcheck(std::ostream& os);

}  // namespace fedcir
