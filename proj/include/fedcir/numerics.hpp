#pragma once

#include <functional>

#include "fedcir/tape.hpp"

namespace fedcir {

// Arguments to log() are clamped to >= kLogGuard; perturbs losses by less
// than 1e-12 relative while keeping -log(0) out.
inline constexpr double kLogGuard = 1e-12;

Vector softmax(const Vector& logits);

// -log(max(probs[label], kLogGuard))
double cross_entropy(const Vector& probs, int label);

Vector affine(const Matrix& W, const Vector& b, const Vector& x);
Matrix affine_batch(const Matrix& W, const Vector& b, const Matrix& X);

// Loss callback contract: return f(point); when grad != nullptr also fill the
// analytic gradient (same length as point).
using LossFn = std::function<double(const Vector&, Vector*)>;

struct GradCheckResult {
  double max_rel_err = 0.0;
  int checked = 0;
  int skipped = 0;  // coordinates within a step of a kink
};

// Central differences (f(x+h) - f(x-h)) / 2h against the analytic gradient.
// Relative error denominator is max(|analytic|, |numeric|, 1e-8). A
// coordinate whose difference quotients at h and h/2 disagree by more than
// 1% sits on a kink (relu / clamp corner) and is skipped.
GradCheckResult grad_check(const LossFn& loss, const Vector& point, double step);

}  // namespace fedcir
