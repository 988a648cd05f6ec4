#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "clda/data/synth.hpp"
#include "clda/detector/nms.hpp"
#include "clda/teacher_student/trainer.hpp"

namespace clda {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Every tunable of a run. Keys are `section.name`.
struct RunConfig {
    std::string name = "default";
    std::string data_dir;  // empty: <run root>/data
    std::string preset = "full";
    DatasetSpec data;
    TrainConfig train;
    PostprocessOptions eval_post = default_eval_post();
    double eval_iou = 0.5;
    int eval_batch = 16;
    int checkpoint_every = 500;

    static PostprocessOptions default_eval_post();

    /// Applies one `section.key = value` assignment.
    void set(const std::string& key, const std::string& value);
    std::string get(const std::string& key) const;
    /// Cross-field checks; throws ConfigError.
    void validate() const;

    /// Resolved config in the same format `load` reads.
    std::string dump() const;
    /// Key list with defaults and one-line descriptions.
    static std::string describe();

    static RunConfig load(const std::filesystem::path& file);
    /// Parses INI text; `origin` names the source in error messages.
    static RunConfig parse(const std::string& text, const std::string& origin = "<config>");
    void apply_override(const std::string& assignment);
};

struct ConfigKey {
    std::string key;
    std::string doc;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

const std::vector<ConfigKey>& config_keys();

}  // namespace clda
