#include "clda/cli/pipeline.hpp"

#include <algorithm>

namespace clda {

namespace {
constexpr std::uint64_t kSourceStream = 101;
constexpr std::uint64_t kTargetStream = 103;
constexpr std::uint64_t kBurnInSourceStream = 107;
}  // namespace

void run_burn_in(Trainer& trainer, const SampleStore& source, const StepCallback& on_step) {
    if (trainer.state().phase != Phase::BurnIn) throw InvalidArgument("run_burn_in: trainer already adapted");
    const TrainConfig& cfg = trainer.config();
    if (cfg.burn_in_steps > 0 && source.empty()) throw InvalidArgument("run_burn_in: no source samples");
    if (cfg.burn_in_steps > 0) {
        BatchSampler sampler(static_cast<int>(source.size()), cfg.batch_size, cfg.seed, kBurnInSourceStream);
        while (trainer.state().step < cfg.burn_in_steps) {
            const std::vector<Sample> batch = source.gather(sampler.indices(trainer.state().step));
            const StepRecord rec = trainer.burn_in_step(batch);
            if (on_step && !on_step(rec)) return;
        }
    }
    trainer.finish_burn_in();
}

void run_adapt(Trainer& trainer, const SampleStore& source, const SampleStore& target, const StepCallback& on_step) {
    if (trainer.state().phase != Phase::Adapt) throw InvalidArgument("run_adapt: burn-in has not finished");
    const TrainConfig& cfg = trainer.config();
    if (cfg.adapt_steps == 0) return;
    if (source.empty() || target.empty()) throw InvalidArgument("run_adapt: both domains need samples");
    BatchSampler src(static_cast<int>(source.size()), cfg.batch_size, cfg.seed, kSourceStream);
    BatchSampler tgt(static_cast<int>(target.size()), cfg.batch_size, cfg.seed, kTargetStream);
    while (trainer.state().step < cfg.adapt_steps) {
        const int step = trainer.state().step;
        const std::vector<Sample> s = source.gather(src.indices(step));
        const std::vector<Sample> t = target.gather(tgt.indices(step));
        const StepRecord rec = trainer.train_step(s, t);
        if (on_step && !on_step(rec)) return;
    }
}

std::vector<std::vector<Detection>> predict(const Detector& model, const std::filesystem::path& data_root,
                                            const std::vector<ManifestEntry>& entries, const PostprocessOptions& post,
                                            int batch) {
    const DetectorConfig& cfg = model.config();
    const std::vector<AnchorPoint> anchors = make_anchors(cfg);
    std::vector<std::vector<Detection>> out;
    out.reserve(entries.size());
    for (std::size_t start = 0; start < entries.size(); start += static_cast<std::size_t>(batch)) {
        const std::size_t end = std::min(entries.size(), start + static_cast<std::size_t>(batch));
        std::vector<Image> images;
        for (std::size_t i = start; i < end; ++i) images.push_back(read_ppm(data_root / entries[i].image));
        const ForwardResult r = model.infer(images_to_tensor(images));
        for (std::size_t i = 0; i < images.size(); ++i)
            out.push_back(postprocess(gather_dense(r.levels, static_cast<int>(i), cfg), anchors, cfg.input_size, post));
    }
    return out;
}

EvalResult evaluate_model(const Detector& model, const std::filesystem::path& data_root,
                          const std::vector<ManifestEntry>& entries, const PostprocessOptions& post, double iou_thr,
                          int batch) {
    if (entries.empty()) throw InvalidArgument("evaluate_model: empty split");
    std::vector<std::vector<LabeledBox>> gts;
    for (const ManifestEntry& e : entries) gts.push_back(load_eval_labels(data_root, e));
    return evaluate(predict(model, data_root, entries, post, batch), gts, model.config().num_classes, iou_thr);
}

std::vector<std::string> class_names() { return {kShapeNames[0], kShapeNames[1], kShapeNames[2]}; }

}  // namespace clda
