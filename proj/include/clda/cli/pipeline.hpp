#pragma once

#include <filesystem>
#include <functional>
#include <vector>

#include "clda/cli/run_config.hpp"
#include "clda/eval/eval.hpp"
#include "clda/teacher_student/trainer.hpp"

namespace clda {

/// Called after every step; returning false stops the loop early.
using StepCallback = std::function<bool(const StepRecord&)>;

/// Runs burn-in steps from the trainer's current step up to
/// cfg.burn_in_steps, then hands the student over to the teacher.
void run_burn_in(Trainer& trainer, const SampleStore& source, const StepCallback& on_step = {});

/// Runs adaptation steps from the trainer's current step up to
/// cfg.adapt_steps.
void run_adapt(Trainer& trainer, const SampleStore& source, const SampleStore& target,
               const StepCallback& on_step = {});

/// Detections of `model` on every entry, batched.
std::vector<std::vector<Detection>> predict(const Detector& model, const std::filesystem::path& data_root,
                                            const std::vector<ManifestEntry>& entries, const PostprocessOptions& post,
                                            int batch);

/// mAP of `model` against the labelled entries of one split.
EvalResult evaluate_model(const Detector& model, const std::filesystem::path& data_root,
                          const std::vector<ManifestEntry>& entries, const PostprocessOptions& post, double iou_thr,
                          int batch);

std::vector<std::string> class_names();

}  // namespace clda
