#include "clda/core/types.hpp"

#include <cmath>

#include "clda/core/tensor.hpp"

namespace clda {

bool BBox::valid() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) && x2 > x1 &&
           y2 > y1;
}

void BoxDistribution::renormalize() {
    for (int s = 0; s < 4; ++s) {
        double* row = side(s);
        double sum = 0.0;
        for (int k = 0; k < bins; ++k) sum += row[k];
        if (sum <= 0.0) {
            for (int k = 0; k < bins; ++k) row[k] = 1.0 / bins;
            continue;
        }
        for (int k = 0; k < bins; ++k) row[k] /= sum;
    }
}

bool BoxDistribution::rows_normalized(double tol) const {
    if (static_cast<int>(probs.size()) != 4 * bins) return false;
    for (int s = 0; s < 4; ++s) {
        double sum = 0.0;
        for (int k = 0; k < bins; ++k) sum += side(s)[k];
        if (std::abs(sum - 1.0) > tol) return false;
    }
    return true;
}

DomainTag domain_from_string(const std::string& s) {
    if (s == "source") return DomainTag::Source;
    if (s == "target") return DomainTag::Target;
    throw InvalidArgument("unknown domain '" + s + "'");
}

bool respects_domain_contract(const Sample& s) {
    return s.labels.has_value() == (s.domain == DomainTag::Source);
}

std::string Tensor::shape_str() const {
    std::string out = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(shape[i]);
    }
    return out + ")";
}

}  // namespace clda
