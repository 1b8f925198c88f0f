#include "radloop/sim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "radloop/errors.hpp"

namespace radloop::sim {

namespace {

constexpr double kBackgroundMean = 64.0;
constexpr double kBackgroundSd = 16.0;
constexpr int kLesionBoost = 80;
constexpr int kMinSide = 8;
constexpr int kMaxSide = 20;
constexpr double kAcceptIou = 0.5;

std::uint8_t clip_pixel(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

BoundingBox label_quadrant(std::size_t l, const ModelConfig& cfg) {
    if (l > 3) throw InvalidInput("the synthetic generator supports at most four labels");
    const int half_w = cfg.width / 2, half_h = cfg.height / 2;
    const int left = (l % 2) * half_w, top = static_cast<int>(l / 2) * half_h;
    const int right = (l % 2) ? cfg.width - 1 : half_w - 1;
    const int bottom = (l / 2) ? cfg.height - 1 : half_h - 1;
    return BoundingBox::from_extent(left, top, right, bottom);
}

StudyTruth gen_synthetic_study(std::uint64_t seed, const ModelConfig& cfg) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(kBackgroundMean, kBackgroundSd);
    StudyTruth truth;
    truth.seed = seed;
    truth.image.width = cfg.width;
    truth.image.height = cfg.height;
    truth.image.pixels.resize(cfg.cells());
    for (auto& p : truth.image.pixels) p = clip_pixel(noise(rng));

    std::bernoulli_distribution coin(0.5);
    for (std::size_t l = 0; l < cfg.labels.size(); ++l) {
        LabelTruth lt;
        lt.present = coin(rng);
        if (lt.present) {
            const auto q = label_quadrant(l, cfg);
            const int q_w = q.right() - q.left() + 1, q_h = q.bottom() - q.top() + 1;
            // strictly inside: one pixel of quadrant left on every side
            const int max_w = std::min(kMaxSide, q_w - 2), max_h = std::min(kMaxSide, q_h - 2);
            const int w = std::uniform_int_distribution<int>(kMinSide, max_w)(rng);
            const int h = std::uniform_int_distribution<int>(kMinSide, max_h)(rng);
            const int left = std::uniform_int_distribution<int>(q.left() + 1, q.right() - w)(rng);
            const int top = std::uniform_int_distribution<int>(q.top() + 1, q.bottom() - h)(rng);
            lt.box = BoundingBox::from_extent(left, top, left + w - 1, top + h - 1);
            for (int r = top; r < top + h; ++r) {
                for (int c = left; c < left + w; ++c) {
                    auto& p = truth.image.pixels[static_cast<std::size_t>(r) * cfg.width + c];
                    p = clip_pixel(static_cast<double>(p) + kLesionBoost);
                }
            }
        }
        truth.labels.push_back(lt);
    }
    return truth;
}

std::vector<TrainingExample> supervised_examples(const StudyTruth& truth, const ModelConfig& cfg) {
    std::vector<TrainingExample> out;
    for (std::size_t l = 0; l < cfg.labels.size(); ++l) {
        const auto& lt = truth.labels[l];
        out.push_back(TrainingExample{truth.image, cfg.labels[l], lt.present ? 1 : 0, lt.box});
    }
    return out;
}

void RadiologistProfile::validate(const ModelConfig& cfg) const {
    if (!(correction_rate >= 0.0 && correction_rate <= 1.0)) throw InvalidInput("correction_rate must lie in [0,1]");
    if (!(box_jitter_sigma >= 0.0)) throw InvalidInput("box_jitter_sigma must be non-negative");
    for (const auto& l : blind_spot) {
        if (!cfg.has_label(l)) throw UnknownLabel(l);
    }
}

BoundingBox jitter_box(const BoundingBox& box, double sigma, int width, int height, std::mt19937_64& rng) {
    if (sigma <= 0.0) return box;
    std::normal_distribution<double> n(0.0, sigma);
    auto shift = [&](int v, int hi) { return std::clamp(static_cast<int>(std::lround(v + n(rng))), 0, hi); };
    int left = shift(box.left(), width - 1);
    int top = shift(box.top(), height - 1);
    int right = shift(box.right(), width - 1);
    int bottom = shift(box.bottom(), height - 1);
    if (left > right) std::swap(left, right);
    if (top > bottom) std::swap(top, bottom);
    return BoundingBox::from_extent(left, top, right, bottom);
}

RadiologistOutcome simulate_radiologist(const RadiologistProfile& profile, const InferenceResult& result,
                                        const StudyTruth& truth, const ModelConfig& cfg, const std::string& study_id,
                                        const std::string& correction_prefix, std::mt19937_64& rng) {
    RadiologistOutcome out;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t l = 0; l < cfg.labels.size(); ++l) {
        const auto& label = cfg.labels[l];
        const auto& f = result.findings.at(l);
        const auto& lt = truth.labels.at(l);
        const bool detected = f.detected(cfg.theta_det);

        std::optional<Disposition> error;
        if (detected && !lt.present) {
            error = Disposition::Disabled;
        } else if (!detected && lt.present) {
            error = Disposition::Added;
        } else if (detected && lt.present && (!f.box || iou(*f.box, *lt.box) < kAcceptIou)) {
            error = Disposition::BoxAdjusted;
        }

        LabelOutcome outcome = LabelOutcome::Accepted;
        if (error) {
            if (profile.blind_spot.count(label)) {
                outcome = LabelOutcome::SuppressedBlind;
            } else if (unit(rng) < profile.correction_rate) {
                outcome = LabelOutcome::Emitted;
            } else {
                outcome = LabelOutcome::SuppressedRate;
            }
        }
        out.per_label.push_back(outcome);

        if (outcome == LabelOutcome::Emitted) {
            CorrectionRecord rec;
            rec.correction_id = correction_prefix + "-" + label;
            rec.user_id = profile.user_id;
            rec.model = result.model;
            rec.model_version = result.model_version;
            rec.study_id = study_id;
            rec.label = label;
            rec.disposition = *error;
            if (*error != Disposition::Disabled) {
                rec.corrected_box = jitter_box(*lt.box, profile.box_jitter_sigma, cfg.width, cfg.height, rng);
            }
            rec.original_finding = f;
            rec.image = truth.image;
            out.corrections.push_back(std::move(rec));
            continue;
        }
        PoolAdmission admit;
        admit.kind = detected ? PoolKind::TP : PoolKind::TN;
        admit.example = TrainingExample{truth.image, label, detected ? 1 : 0, std::nullopt};
        out.admissions.push_back(std::move(admit));
    }
    return out;
}

double auc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw InvalidInput("scores and labels differ in length");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // average ranks over tie groups
    std::vector<double> rank(scores.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
        i = j + 1;
    }
    double pos = 0.0, neg = 0.0, rank_sum = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == 1) {
            pos += 1.0;
            rank_sum += rank[i];
        } else {
            neg += 1.0;
        }
    }
    if (pos == 0.0 || neg == 0.0) throw UndefinedMetric("AUC needs at least one positive and one negative");
    return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

}  // namespace radloop::sim
