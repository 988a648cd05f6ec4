#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "clda/core/types.hpp"

namespace clda {

inline constexpr int kNumShapeClasses = 3;
inline const char* const kShapeNames[kNumShapeClasses] = {"circle", "square", "triangle"};

struct SceneSpec {
    int canvas = 256;
    int min_objects = 1;
    int max_objects = 5;
    int num_classes = kNumShapeClasses;
    double min_size = 16.0;
    double max_size = 64.0;
    double max_overlap = 0.2;
    int placement_retries = 50;
    // background texture
    double background_low = 0.15;
    double background_high = 0.55;
    double texture_amplitude = 0.12;
    int texture_cells = 6;
    int clutter_strokes = 4;

    void validate() const;
};

struct DomainShiftSpec {
    double fog_beta = 0.0;
    double atmospheric_light = 0.8;
    double depth_base = 0.6;      // depth at the bottom edge
    double depth_gradient = 1.0;  // added towards the top edge
    double depth_noise = 0.3;     // amplitude of the low-frequency term
    int depth_cells = 4;
    double color_temperature = 0.0;  // >0 warms: red up, blue down
    double noise_sigma = 0.0;

    void validate() const;
};

struct Scene {
    Image image;
    std::vector<LabeledBox> boxes;
    int placement_failures = 0;
};

/// Deterministic scene: textured background plus non-overlapping filled
/// shapes with tight boxes.
Scene generate_scene(std::uint64_t seed, const SceneSpec& spec);

/// Anti-aliased coverage in [0,1] of a shape drawn into `box` (H x W).
std::vector<float> shape_coverage(int category, const BBox& box, int height, int width);

/// Smooth pseudo-depth: vertical ramp plus bilinear low-frequency noise.
std::vector<double> make_depth_field(std::uint64_t seed, int height, int width, const DomainShiftSpec& shift);

/// Atmospheric scattering I' = I t + A (1 - t), t = exp(-beta depth), then a
/// colour-temperature shift and clipped gaussian noise.
Image apply_domain_shift(const Image& image, const std::vector<double>& depth, const DomainShiftSpec& shift,
                         std::uint64_t noise_seed);

// ----------------------------------------------------------------- on disk

inline constexpr const char* kManifestHeader = "# clda-dataset-manifest v1";

enum class Split { Train, Eval };
inline const char* to_string(Split s) { return s == Split::Train ? "train" : "eval"; }
Split split_from_string(const std::string& s);

struct ManifestEntry {
    std::string image;  // relative to the dataset root
    std::string label;  // relative path, empty for hidden labels
    DomainTag domain = DomainTag::Source;
    Split split = Split::Train;
};

struct DatasetSpec {
    std::uint64_t seed = 1;
    int source_train = 800;
    int source_eval = 200;
    int target_train = 800;
    int target_eval = 200;
    SceneSpec scene;
    DomainShiftSpec shift = default_target_shift();

    static DomainShiftSpec default_target_shift();
};

struct GeneratedSample {
    Sample sample;
    Split split = Split::Train;
    int index = 0;
};

/// Reproducible from (spec.seed, spec) alone.
std::vector<GeneratedSample> generate_dataset(const DatasetSpec& spec);

/// Writes images (binary PPM), labels (`class cx cy w h`, normalised,
/// centre form) and the manifest. Target-train manifest rows carry NONE even
/// though their label files are written.
void write_dataset(const std::filesystem::path& root, const std::vector<GeneratedSample>& samples);

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& root);
void write_manifest(const std::filesystem::path& root, const std::vector<ManifestEntry>& entries);

/// Loads one entry. Labels are attached to source rows only.
Sample load_sample(const std::filesystem::path& root, const ManifestEntry& e);

/// Ground truth for evaluation; throws for rows whose labels are hidden.
std::vector<LabeledBox> load_eval_labels(const std::filesystem::path& root, const ManifestEntry& e);

std::vector<LabeledBox> read_labels(const std::filesystem::path& file, int width, int height);
void write_labels(const std::filesystem::path& file, const std::vector<LabeledBox>& boxes, int width, int height);

Image read_ppm(const std::filesystem::path& file);
void write_ppm(const std::filesystem::path& file, const Image& image);

/// Raised on malformed dataset files; carries the offending location.
class DatasetError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::vector<ManifestEntry> select(const std::vector<ManifestEntry>& entries, DomainTag domain, Split split);

}  // namespace clda
