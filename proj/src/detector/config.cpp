#include "clda/detector/config.hpp"

#include <sstream>

#include "clda/core/types.hpp"

namespace clda {

int DetectorConfig::num_anchors() const {
    int total = 0;
    for (int l = 0; l < num_levels(); ++l) total += grid_size(l) * grid_size(l);
    return total;
}

void DetectorConfig::validate() const {
    if (num_classes < 1) throw InvalidArgument("detector: num_classes must be >= 1");
    if (reg_max < 1) throw InvalidArgument("detector: reg_max must be >= 1");
    if (strides != std::array<int, 3>{8, 16, 32}) throw InvalidArgument("detector: strides must be (8,16,32)");
    if (input_size <= 0 || input_size % strides.back() != 0)
        throw InvalidArgument("detector: input size must be divisible by the largest stride");
    for (int w : backbone_widths)
        if (w < 1) throw InvalidArgument("detector: backbone widths must be positive");
    for (int w : head_widths)
        if (w < 1) throw InvalidArgument("detector: head widths must be positive");
    if (stem_width < 1) throw InvalidArgument("detector: stem width must be positive");
}

std::string DetectorConfig::describe() const {
    std::ostringstream os;
    os << "classes=" << num_classes << " reg_max=" << reg_max << " strides=" << strides[0] << "," << strides[1]
       << "," << strides[2] << " stem=" << stem_width << " backbone=" << backbone_widths[0] << ","
       << backbone_widths[1] << "," << backbone_widths[2] << "," << backbone_widths[3] << " head=" << head_widths[0]
       << "," << head_widths[1] << "," << head_widths[2] << " input=" << input_size;
    return os.str();
}

std::uint64_t DetectorConfig::hash() const {
    std::uint64_t h = 1469598103934665603ull;
    for (char c : describe()) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace clda
