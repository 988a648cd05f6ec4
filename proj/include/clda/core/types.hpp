#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace clda {

/// Raised when an operation's preconditions are violated by its inputs.
class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Axis-aligned box in corner form, pixel units.
struct BBox {
    double x1 = 0.0;
    double y1 = 0.0;
    double x2 = 0.0;
    double y2 = 0.0;

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return width() * height(); }
    double cx() const { return 0.5 * (x1 + x2); }
    double cy() const { return 0.5 * (y1 + y2); }

    /// x2 > x1, y2 > y1 and every coordinate finite.
    bool valid() const;

    friend bool operator==(const BBox&, const BBox&) = default;
};

struct LabeledBox {
    BBox box;
    int category = 0;
};

/// Per-side discrete offset distributions: 4 rows (left, top, right, bottom),
/// each of `bins` probabilities.
struct BoxDistribution {
    int bins = 0;
    std::vector<double> probs;  // row-major 4 x bins

    const double* side(int s) const { return probs.data() + static_cast<std::size_t>(s) * bins; }
    double* side(int s) { return probs.data() + static_cast<std::size_t>(s) * bins; }

    /// Rescales each row to sum to one.
    void renormalize();
    bool rows_normalized(double tol = 1e-6) const;
};

/// Location in the prediction grid that produced a detection.
struct AnchorRef {
    int level = 0;
    int index = 0;  // flat anchor index within the whole pyramid
};

struct Detection {
    BBox box;
    int category = 0;
    double confidence = 0.0;
    std::optional<BoxDistribution> box_distribution;
    std::optional<AnchorRef> source;
};

enum class DomainTag { Source, Target };

inline const char* to_string(DomainTag d) { return d == DomainTag::Source ? "source" : "target"; }
DomainTag domain_from_string(const std::string& s);

/// Dense H x W x 3 image, interleaved RGB, values in [0,1].
struct Image {
    int height = 0;
    int width = 0;
    std::vector<float> pixels;

    Image() = default;
    Image(int h, int w, float fill = 0.0f)
        : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {}

    float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    float at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
};

struct Sample {
    Image image;
    std::optional<std::vector<LabeledBox>> labels;
    DomainTag domain = DomainTag::Source;
    std::string id;
};

/// labels present iff the sample is from the source domain.
bool respects_domain_contract(const Sample& s);

}  // namespace clda
