#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "radloop/annotation_store.hpp"
#include "radloop/core_model.hpp"
#include "radloop/model_registry.hpp"

namespace radloop {

enum class ErrorKind { FP, FN, BoxFix };

const char* to_string(ErrorKind k);

struct Classification {
    ErrorKind kind = ErrorKind::BoxFix;
    std::string label;  // the label the training example targets
    std::optional<std::string> note;
};

/// FP for a disabled finding, FN for an added box or a relabel onto a label
/// scored below theta_det, BOX_FIX for a box adjustment. A relabel whose new
/// label was already detected is treated as a box fix on the new label.
/// `new_label_probability` is the model's score for a relabel's target label.
Classification classify_correction(const CorrectionRecord& rec, double theta_det,
                                   std::optional<double> new_label_probability = std::nullopt);

/// The retraining unit: one example derived from a correction plus a true
/// positive and a true negative from the reference pool, all for one label.
struct Triplet {
    std::string correction_id;
    TrainingExample erroneous;
    TrainingExample tp;
    TrainingExample tn;
    std::string label;
};

struct ClassifiedCorrection {
    CorrectionRecord record;
    Classification classification;
};

struct DeferredCorrection {
    std::string correction_id;
    std::string reason;
};

struct AssembledBatch {
    std::vector<Triplet> triplets;
    // BOX_FIX corrections train as single localization examples.
    std::vector<std::pair<std::string, TrainingExample>> localization;
    std::vector<DeferredCorrection> deferred;

    /// Triplet members then localization examples, in record order.
    std::vector<TrainingExample> examples() const;
    std::vector<std::string> consumed_ids() const;
};

using PoolLookup = std::function<std::optional<TrainingExample>(const std::string& label, PoolKind kind)>;

TrainingExample example_from_correction(const CorrectionRecord& rec, const Classification& cls);

AssembledBatch assemble_triplets(const std::vector<ClassifiedCorrection>& records, const PoolLookup& pool);

struct RetrainReport {
    std::string model;
    std::string owner;
    std::optional<long> new_version;
    std::vector<std::string> consumed;
    std::vector<DeferredCorrection> deferred;
    int epochs = 0;
    double loss_start = 0.0;
    double loss_end = 0.0;
    std::size_t triplets = 0;
    std::size_t localization_examples = 0;
    std::vector<std::string> notes;

    bool loss_regressed() const { return new_version.has_value() && loss_end > loss_start; }
};

Json to_json(const RetrainReport& r);

struct BatchPolicy {
    std::size_t n_batch = 4;
    std::chrono::milliseconds t_max = std::chrono::minutes(10);
};

enum class TriggerDecision { Fire, Wait };

TriggerDecision batch_trigger_policy(std::size_t pending_count, std::chrono::milliseconds oldest_age,
                                     const BatchPolicy& policy);

/// Turns a user's pending corrections into a new personalized version.
class RetrainingEngine {
public:
    /// `reports_root` receives retrain/<model>/<owner>/<version>.json; empty
    /// path disables report files.
    RetrainingEngine(ModelRegistry& registry, AnnotationStore& store, std::filesystem::path reports_root);

    /// Full batch: begin + run. No-op (no version) when nothing is pending.
    RetrainReport retrain_batch(const std::string& model, const std::string& owner,
                                std::optional<int> epochs = std::nullopt);

    /// Marks the lineage "retraining", creating it from base when missing.
    /// Throws Conflict if a job already holds it.
    void begin(const std::string& model, const std::string& owner);

    /// Trains and publishes; requires a prior begin(). Always leaves the
    /// lineage out of "retraining".
    RetrainReport run(const std::string& model, const std::string& owner, std::optional<int> epochs = std::nullopt);

private:
    ModelRegistry& registry_;
    AnnotationStore& store_;
    std::filesystem::path reports_root_;
};

}  // namespace radloop
