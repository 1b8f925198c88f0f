#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "radloop/annotation_store.hpp"
#include "radloop/core_model.hpp"

namespace radloop::sim {

/// SplitMix64 step; used to derive independent seeds from a master seed.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

struct LabelTruth {
    bool present = false;
    std::optional<BoundingBox> box;
};

struct StudyTruth {
    ImagePayload image;
    std::vector<LabelTruth> labels;  // config label order
    std::uint64_t seed = 0;
};

/// Quadrant (left, top, right, bottom) reserved for label index `l`:
/// 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
BoundingBox label_quadrant(std::size_t l, const ModelConfig& cfg);

/// Clipped Gaussian background (mean 64, sd 16). Each label is present with
/// probability 1/2 and then draws one rectangle of side 8..20 strictly inside
/// its quadrant, brightened by 80. Deterministic in `seed`.
StudyTruth gen_synthetic_study(std::uint64_t seed, const ModelConfig& cfg);

/// Fully supervised examples (one per label) for a generated study.
std::vector<TrainingExample> supervised_examples(const StudyTruth& truth, const ModelConfig& cfg);

struct RadiologistProfile {
    std::string user_id;
    double correction_rate = 1.0;
    double box_jitter_sigma = 1.0;
    std::set<std::string> blind_spot;
    std::uint64_t rng_seed = 0;

    void validate(const ModelConfig& cfg) const;
};

struct PoolAdmission {
    PoolKind kind = PoolKind::TP;
    TrainingExample example;
};

enum class LabelOutcome { Accepted, Emitted, SuppressedBlind, SuppressedRate };

struct RadiologistOutcome {
    std::vector<CorrectionRecord> corrections;
    std::vector<PoolAdmission> admissions;
    std::vector<LabelOutcome> per_label;  // config label order
};

/// Applies one simulated reader to an inference result. Error cases are an
/// AI detection on an absent label (disabled), a miss on a present label
/// (added) and a detection whose box has IoU < 0.5 with the truth
/// (box-adjusted). Labels in the blind spot, and errors skipped with
/// probability 1 - correction_rate, are left untouched; untouched findings
/// are admitted to the reference pool as TP when detected, TN otherwise.
RadiologistOutcome simulate_radiologist(const RadiologistProfile& profile, const InferenceResult& result,
                                        const StudyTruth& truth, const ModelConfig& cfg, const std::string& study_id,
                                        const std::string& correction_prefix, std::mt19937_64& rng);

/// Truth box moved by rounded N(0, sigma) per edge, clipped to the image.
BoundingBox jitter_box(const BoundingBox& box, double sigma, int width, int height, std::mt19937_64& rng);

/// Mann-Whitney AUC with ties counted one half. Throws UndefinedMetric
/// unless both classes are present.
double auc(std::span<const double> scores, std::span<const int> labels);

}  // namespace radloop::sim
