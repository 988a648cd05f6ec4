#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clda/align/align.hpp"
#include "clda/core/types.hpp"
#include "clda/data/synth.hpp"
#include "clda/detector/assign.hpp"
#include "clda/detector/detector.hpp"
#include "clda/detector/nms.hpp"
#include "clda/dynaug/dynaug.hpp"
#include "clda/losses/sup_losses.hpp"
#include "clda/nn/layers.hpp"
#include "clda/uncertainty/uncertainty.hpp"

namespace clda {

struct EMAConfig {
    double decay = 0.999;
    void validate() const;
};

/// teacher <- a * teacher + (1 - a) * student over every parameter and every
/// normalisation statistic. Names and shapes must agree.
void ema_update(Detector& teacher, const Detector& student, double alpha);

enum class Phase { BurnIn, Adapt };
inline const char* to_string(Phase p) { return p == Phase::BurnIn ? "burn-in" : "adapt"; }

/// Component switches used for ablations.
struct Components {
    bool self_training = true;
    bool uncertainty = true;
    bool dynamic_aug = true;
    bool grl = true;
    bool contrastive = true;

    /// "full", "st", "st_uc", "st_uc_ca", "source_only"
    static Components preset(const std::string& name);
};

struct TrainConfig {
    DetectorConfig detector;
    std::uint64_t seed = 1;
    int batch_size = 4;  // per domain
    int burn_in_steps = 2000;
    int adapt_steps = 1000;

    double lr = 0.01;
    double lr_final_ratio = 0.05;
    int warmup_steps = 100;  // burn-in only
    double momentum = 0.937;
    double weight_decay = 5e-4;
    double max_grad_norm = 10.0;  // <= 0 disables clipping

    double ema_decay = 0.999;
    double lambda_distill = 1.0;
    double lambda_adv = 0.1;
    double lambda_ca = 0.1;
    double grl_lambda = 1.0;
    int grl_ramp_steps = 0;  // linear ramp of grl_lambda over the first adapt steps; 0 = constant
    int disc_hidden = 32;

    SupLossOptions sup;
    AssignOptions assign;
    Thresholds thresholds;
    DistillWeights distill;
    PostprocessOptions teacher_post;  // floor 0.05, NMS 0.65
    double ca_nms_iou = 0.65;
    /// Divide each (domain, stage, level) contrastive term by its number of
    /// batch instances so the loss scale does not track detection counts.
    bool ca_batch_mean = true;
    /// Source instances come from ground-truth boxes instead of student predictions.
    bool ca_source_from_labels = false;
    GainConfig gain;
    AugmentationPolicy augment;
    CAConfig ca;
    Components components;

    void validate() const;
};

/// One line of the loss-breakdown log.
struct StepRecord {
    int step = 0;
    Phase phase = Phase::BurnIn;
    bool finite = true;
    double l_sup = 0.0;
    double l_distill = 0.0;
    double l_adv = 0.0;
    double l_ca = 0.0;
    double total = 0.0;
    double gain = 1.0;
    double lr = 0.0;
    double grad_norm = 0.0;
    double temperature = 0.0;
    double divergence = 0.0;
    SupLossBreakdown sup;
    DistillBreakdown distill;
    int pseudo_positive = 0;
    int pseudo_uncertain = 0;
    int pseudo_negative = 0;
    int ca_instances = 0;

    std::string to_json() const;
};

struct TrainState {
    int step = 0;  // completed steps of the current phase
    Phase phase = Phase::BurnIn;
    std::uint64_t seed = 0;
};

/// Raw teacher predictions on weak target views: decode, floor, NMS; each
/// detection keeps its side distributions and source anchor.
std::vector<std::vector<Detection>> generate_pseudo_labels(const Detector& teacher, std::span<const Image> weak,
                                                           const PostprocessOptions& opt);

/// Compact in-memory image set (8-bit pixels).
class SampleStore {
public:
    static SampleStore load(const std::filesystem::path& root, const std::vector<ManifestEntry>& entries);
    static SampleStore from_samples(std::span<const Sample> samples);

    std::size_t size() const { return items_.size(); }
    bool empty() const { return items_.empty(); }
    Sample get(std::size_t i) const;
    std::vector<Sample> gather(std::span<const int> indices) const;

private:
    struct Item {
        int height = 0;
        int width = 0;
        std::vector<std::uint8_t> rgb;
        std::optional<std::vector<LabeledBox>> labels;
        DomainTag domain = DomainTag::Source;
        std::string id;
    };
    std::vector<Item> items_;
};

/// Stateless epoch-shuffled batch indices: indices(step) depends only on
/// (seed, stream, step).
class BatchSampler {
public:
    BatchSampler(int population, int batch, std::uint64_t seed, std::uint64_t stream);
    std::vector<int> indices(int step) const;

private:
    int n_, batch_;
    std::uint64_t seed_, stream_;
    mutable long cached_epoch_ = -1;
    mutable std::vector<int> perm_;
};

class Trainer {
public:
    explicit Trainer(TrainConfig cfg);

    /// Student, teacher (a copy) and discriminators from cfg.seed.
    void initialize();

    /// Supervised-only step on labelled source samples.
    StepRecord burn_in_step(std::span<const Sample> source);
    /// Copies the student into the teacher and enters the adapt phase.
    void finish_burn_in();
    /// Combined adaptation step.
    StepRecord train_step(std::span<const Sample> source, std::span<const Sample> target);

    double lr_at(Phase phase, int step) const;

    const TrainConfig& config() const { return cfg_; }
    TrainConfig& mutable_config() { return cfg_; }
    TrainState& state() { return state_; }
    const TrainState& state() const { return state_; }
    Detector& student() { return student_; }
    const Detector& student() const { return student_; }
    Detector& teacher() { return teacher_; }
    const Detector& teacher() const { return teacher_; }
    std::vector<Discriminator>& discriminators() { return discs_; }
    const std::vector<Discriminator>& discriminators() const { return discs_; }
    QueueBank& queues() { return queues_; }
    const QueueBank& queues() const { return queues_; }
    GainState& gain() { return gain_; }
    const GainState& gain() const { return gain_; }
    double& temperature() { return temperature_; }
    double temperature() const { return temperature_; }
    nn::Sgd& optimizer() { return opt_; }
    nn::Sgd& disc_optimizer() { return disc_opt_; }
    const nn::Sgd& optimizer() const { return opt_; }
    const nn::Sgd& disc_optimizer() const { return disc_opt_; }
    const std::vector<AnchorPoint>& anchors() const { return anchors_; }

    nn::ParamList disc_parameters();
    nn::ConstParamList disc_parameters() const;

private:
    std::mt19937_64 step_rng() const;

    TrainConfig cfg_;
    TrainState state_;
    Detector student_;
    Detector teacher_;
    std::vector<Discriminator> discs_;
    QueueBank queues_;
    GainState gain_;
    double temperature_;
    nn::Sgd opt_;
    nn::Sgd disc_opt_;
    std::vector<AnchorPoint> anchors_;
};

// ------------------------------------------------------------- checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Whole trainer state: both weight sets, discriminators, optimiser buffers,
/// queues, gain controller, temperature and step counters.
void save_checkpoint(const std::filesystem::path& file, const Trainer& trainer);

struct CheckpointInfo {
    std::uint32_t version = 0;
    std::uint64_t config_hash = 0;
    int step = 0;
    Phase phase = Phase::BurnIn;
};

CheckpointInfo read_checkpoint_info(const std::filesystem::path& file);

/// Restores into a trainer built with the same detector configuration;
/// rejects a config-hash mismatch.
void load_checkpoint(const std::filesystem::path& file, Trainer& trainer);

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace clda
