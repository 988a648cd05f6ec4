#pragma once

#include <span>

namespace clda {

/// Additive smoothing applied before every logarithm.
inline constexpr double kLogEpsilon = 1e-12;

/// Kullback-Leibler divergence KL(p||q), natural log, smoothed by kLogEpsilon.
double kl_divergence(std::span<const double> p, std::span<const double> q);

/// Jensen-Shannon divergence, natural log; bounded by ln 2.
/// Rejects length mismatch, negative entries, and vectors not summing to 1.
double js_divergence(std::span<const double> p, std::span<const double> q);

/// Unchecked JS divergence that also writes dJS/dp into `grad_p` when non-empty.
double js_divergence_grad(std::span<const double> p, std::span<const double> q,
                          std::span<double> grad_p);

/// Shannon entropy, natural log.
double entropy(std::span<const double> p);

}  // namespace clda
