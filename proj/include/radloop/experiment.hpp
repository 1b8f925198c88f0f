#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "radloop/core_model.hpp"
#include "radloop/serialization.hpp"
#include "radloop/sim.hpp"
#include "radloop/swarm.hpp"

namespace radloop::sim {

inline constexpr const char* kArmIsolated = "isolated";
inline constexpr const char* kArmSwarm = "swarm";
inline constexpr const char* kArmCentralized = "centralized";
inline constexpr const char* kCentralOwner = "central";

struct ExperimentConfig {
    std::uint64_t seed = 20240521;
    std::string model = "cxr-lesion";
    int nodes = 4;
    int studies_per_node = 200;
    // studies each node reads before the batch policy is consulted
    int studies_per_step = 10;
    int test_size = 200;
    // swarm round after every `swarm_period` batch steps
    int swarm_period = 5;
    std::vector<std::string> arms{kArmIsolated, kArmSwarm, kArmCentralized};
    MergeSpec merge;
    ModelConfig model_config;
    // fully supervised studies used to seed version 0; 0 keeps the zero init
    int pretrain_studies = 24;
    int pretrain_epochs = 40;
    // empty: generated from the master seed (see default_profiles)
    std::vector<RadiologistProfile> profiles;

    /// Throws InvalidInput (unknown arm, bad counts, profile mismatch).
    void validate() const;

    /// node-1..node-N with rate 1 and jitter 1; node-1 never corrects lesion-b.
    std::vector<RadiologistProfile> default_profiles() const;
    std::vector<RadiologistProfile> effective_profiles() const;
};

Json to_json(const RadiologistProfile& p);
RadiologistProfile profile_from_json(const Json& j);
Json to_json(const ExperimentConfig& cfg);
ExperimentConfig experiment_config_from_json(const Json& j);

struct LabelMetrics {
    std::string label;
    std::optional<double> auc;  // unset when the test set has one class
    double mean_iou = 0.0;      // over test studies where the label is present
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

struct NodeMetrics {
    std::string node_id;
    long version = 0;
    std::vector<LabelMetrics> labels;
};

struct CorrectionCounts {
    std::string node_id;
    std::string label;
    std::size_t emitted = 0;
    std::size_t suppressed_blind = 0;
    std::size_t suppressed_rate = 0;

    std::size_t suppressed() const { return suppressed_blind + suppressed_rate; }
};

struct ArmReport {
    std::string arm;
    std::vector<NodeMetrics> nodes;  // "central" only for the centralized arm
    std::vector<CorrectionCounts> corrections;
    std::size_t batches = 0;
    std::size_t swarm_rounds = 0;
    // instrumented privacy counters; both must stay 0
    std::size_t cross_node_reads = 0;
    std::size_t swarm_round_store_reads = 0;

    double mean_auc() const;
    double mean_iou() const;
    /// AUC of `label` for `node_id`; the centralized arm answers for every node.
    std::optional<double> label_auc(const std::string& node_id, const std::string& label) const;
};

struct ExperimentReport {
    ExperimentConfig config;
    NodeMetrics base;
    std::vector<ArmReport> arms;

    const ArmReport& arm(const std::string& name) const;
    bool has_arm(const std::string& name) const;
};

Json to_json(const ExperimentReport& r);
ExperimentReport experiment_report_from_json(const Json& j);
std::string summary_table(const ExperimentReport& r);

inline constexpr double kSwarmVsIsolatedSlack = 0.01;
inline constexpr double kSwarmVsCentralTolerance = 0.05;

struct ClaimCheck {
    std::string name;
    bool pass = false;
    std::string detail;
};

/// swarm >= isolated - 0.01, |swarm - central| <= 0.05 (mean AUC), and for
/// every profiled blind spot a strictly higher swarm AUC on that label.
std::vector<ClaimCheck> check_swarm_claims(const ExperimentReport& r);

/// Trains the version-0 weights the arms start from.
ModelWeights pretrain_base(const ExperimentConfig& cfg);

/// Evaluates `weights` on the held-out test studies.
NodeMetrics evaluate(const ModelWeights& weights, const ModelConfig& cfg, const std::vector<StudyTruth>& test,
                     const std::string& node_id, long version);

std::vector<StudyTruth> test_set(const ExperimentConfig& cfg);

/// Runs every configured arm under `work_dir` (created; each arm gets its own
/// registry and per-site stores). Single-threaded and deterministic in the
/// master seed.
ExperimentReport run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& work_dir);

/// Per (node, label) emitted vs suppressed corrections for one arm.
std::vector<CorrectionCounts> blind_spot_report(const ExperimentReport& r, const std::string& arm = kArmIsolated);

}  // namespace radloop::sim
