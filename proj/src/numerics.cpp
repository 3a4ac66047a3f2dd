#include "fedcir/numerics.hpp"

#include <cmath>

namespace fedcir {

Vector softmax(const Vector& logits) {
  if (logits.size() == 0) throw DimensionError("softmax: empty input");
  const Vector shifted = logits.array() - logits.maxCoeff();
  const Vector e = shifted.array().exp();
  return e / e.sum();
}

double cross_entropy(const Vector& probs, int label) {
  if (label < 0 || label >= probs.size())
    throw IndexError("cross_entropy: label " + std::to_string(label) +
                     " out of range for " + std::to_string(probs.size()) +
                     " classes");
  return -std::log(std::max(probs[label], kLogGuard));
}

Vector affine(const Matrix& W, const Vector& b, const Vector& x) {
  if (W.cols() != x.size())
    throw DimensionError("affine: weight " + shape_str(W) + " vs input " +
                         std::to_string(x.size()) + "x1");
  if (W.rows() != b.size())
    throw DimensionError("affine: weight " + shape_str(W) + " vs bias " +
                         std::to_string(b.size()) + "x1");
  return W * x + b;
}

Matrix affine_batch(const Matrix& W, const Vector& b, const Matrix& X) {
  if (W.cols() != X.rows())
    throw DimensionError("affine: weight " + shape_str(W) + " vs input " +
                         shape_str(X));
  if (W.rows() != b.size())
    throw DimensionError("affine: weight " + shape_str(W) + " vs bias " +
                         std::to_string(b.size()) + "x1");
  return (W * X).colwise() + b;
}

GradCheckResult grad_check(const LossFn& loss, const Vector& point,
                           double step) {
  if (step <= 0.0) throw NumericError("grad_check: step must be positive");
  Vector analytic(point.size());
  const double f0 = loss(point, &analytic);
  if (!std::isfinite(f0)) throw NumericError("grad_check: non-finite loss");

  const auto probe = [&](const Vector& x) {
    const double f = loss(x, nullptr);
    if (!std::isfinite(f))
      throw NumericError("grad_check: non-finite loss at probe point");
    return f;
  };

  GradCheckResult result;
  Vector x = point;
  for (Eigen::Index i = 0; i < point.size(); ++i) {
    const auto central = [&](double h) {
      x[i] = point[i] + h;
      const double fp = probe(x);
      x[i] = point[i] - h;
      const double fm = probe(x);
      x[i] = point[i];
      return (fp - fm) / (2.0 * h);
    };
    const double d1 = central(step);
    const double d2 = central(step / 2.0);
    const double disagreement =
        std::abs(d1 - d2) / std::max({std::abs(d1), std::abs(d2), 1e-8});
    if (disagreement > 1e-2) {
      ++result.skipped;
      continue;
    }
    const double a = analytic[i];
    const double rel =
        std::abs(a - d1) / std::max({std::abs(a), std::abs(d1), 1e-8});
    result.max_rel_err = std::max(result.max_rel_err, rel);
    ++result.checked;
  }
  return result;
}

}  // namespace fedcir
