#include "clda/core/divergence.hpp"

#include <cmath>

#include "clda/core/types.hpp"

namespace clda {
namespace {

void check_distribution(std::span<const double> p, const char* what) {
    double sum = 0.0;
    for (double v : p) {
        if (!(v >= 0.0)) throw InvalidArgument(std::string(what) + ": negative or NaN entry");
        sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-6) throw InvalidArgument(std::string(what) + ": does not sum to 1");
}

}  // namespace

double kl_divergence(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw InvalidArgument("kl_divergence: length mismatch");
    double out = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
        const double pk = p[k] + kLogEpsilon;
        out += pk * std::log(pk / (q[k] + kLogEpsilon));
    }
    return out;
}

double js_divergence_grad(std::span<const double> p, std::span<const double> q, std::span<double> grad_p) {
    double out = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
        const double pk = p[k] + kLogEpsilon;
        const double qk = q[k] + kLogEpsilon;
        const double mk = 0.5 * (pk + qk);
        const double lp = std::log(pk / mk);
        out += 0.5 * (pk * lp + qk * std::log(qk / mk));
        if (!grad_p.empty()) grad_p[k] = 0.5 * lp;
    }
    return out;
}

double js_divergence(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw InvalidArgument("js_divergence: length mismatch");
    check_distribution(p, "js_divergence(p)");
    check_distribution(q, "js_divergence(q)");
    return js_divergence_grad(p, q, {});
}

double entropy(std::span<const double> p) {
    double h = 0.0;
    for (double v : p) h -= v * std::log(v + kLogEpsilon);
    return h;
}

}  // namespace clda
