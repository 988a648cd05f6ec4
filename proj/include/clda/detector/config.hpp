#pragma once

#include <array>
#include <cstdint>
#include <string>

namespace clda {

struct DetectorConfig {
    int num_classes = 3;
    int reg_max = 8;  // bins per side minus one
    std::array<int, 3> strides{8, 16, 32};
    int stem_width = 16;
    std::array<int, 4> backbone_widths{32, 64, 128, 256};
    std::array<int, 3> head_widths{32, 64, 64};
    int input_size = 256;

    int bins() const { return reg_max + 1; }
    int num_levels() const { return static_cast<int>(strides.size()); }
    int grid_size(int level) const { return input_size / strides[static_cast<std::size_t>(level)]; }
    int num_anchors() const;

    /// Throws InvalidArgument when an invariant is violated.
    void validate() const;
    /// Stable hash of every architecture-defining field.
    std::uint64_t hash() const;
    std::string describe() const;
};

}  // namespace clda
