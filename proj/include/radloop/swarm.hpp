#pragma once

#include <filesystem>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "radloop/core_model.hpp"
#include "radloop/model_registry.hpp"

namespace radloop {

enum class MergeMethod { Additive, Weighted };

const char* to_string(MergeMethod m);
MergeMethod merge_method_from_string(const std::string& text);

struct MergeSpec {
    MergeMethod method = MergeMethod::Additive;
    // Only meaningful for weighted merges; must be non-negative and sum to 1.
    std::optional<std::vector<double>> coefficients;
    // Empty selects every configured label.
    std::vector<std::string> layer_selector;
    bool include_bias = true;

    /// Throws InvalidInput. `k` is the number of weight sets being merged.
    void validate(const ModelConfig& cfg, std::size_t k) const;
};

Json to_json(const MergeSpec& spec);
MergeSpec merge_spec_from_json(const Json& j);

struct SwarmNode {
    std::string node_id;
    std::string model;
    long local_version = 0;
    std::size_t n_local = 0;
};

/// Uniform for additive; explicit or proportional to n_local for weighted,
/// falling back to uniform when every n_local is zero.
std::vector<double> resolve_coefficients(std::span<const SwarmNode> nodes, const MergeSpec& spec);

/// Convex combination of the selected label layers. Layers outside the
/// selector (and biases when include_bias is false) are copied from
/// weight_sets[0]. Summation runs in argument order.
ModelWeights merge(std::span<const ModelWeights> weight_sets, const MergeSpec& spec, const ModelConfig& cfg,
                   std::optional<std::vector<double>> coefficients = std::nullopt);

struct SwarmRoundResult {
    long round = 0;
    std::vector<SwarmNode> nodes;  // sorted by node_id
    std::vector<double> coefficients;
    std::vector<ModelVersionRecord> published;
};

/// Runs merge rounds over registry lineages. A round reads only registry
/// weights, computes the merge once in ascending node_id order, and publishes
/// the result to every participant as "swarm-learned" in one atomic step.
class SwarmCoordinator {
public:
    SwarmCoordinator(ModelRegistry& registry, std::filesystem::path reports_root);

    /// Throws Conflict when a participant is retraining, NotFound for an
    /// unknown model or lineage, InvalidInput for a bad spec or empty list.
    SwarmRoundResult run_swarm_round(const std::string& model, std::vector<std::string> node_ids,
                                     const MergeSpec& spec);

private:
    ModelRegistry& registry_;
    std::filesystem::path reports_root_;
    std::mutex round_mutex_;
};

}  // namespace radloop
