#include "radloop/swarm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "radloop/annotation_store.hpp"
#include "radloop/errors.hpp"

namespace radloop {

namespace fs = std::filesystem;

namespace {

constexpr double kCoefficientTolerance = 1e-9;

}  // namespace

const char* to_string(MergeMethod m) { return m == MergeMethod::Additive ? "additive" : "weighted"; }

MergeMethod merge_method_from_string(const std::string& text) {
    if (text == "additive") return MergeMethod::Additive;
    if (text == "weighted") return MergeMethod::Weighted;
    throw InvalidInput("unknown merge method '" + text + "'");
}

void MergeSpec::validate(const ModelConfig& cfg, std::size_t k) const {
    if (coefficients) {
        if (method != MergeMethod::Weighted) throw InvalidInput("explicit coefficients require the weighted method");
        if (coefficients->size() != k) {
            throw InvalidInput("expected " + std::to_string(k) + " coefficients, got " +
                               std::to_string(coefficients->size()));
        }
        double sum = 0.0;
        for (double a : *coefficients) {
            if (!std::isfinite(a) || a < 0.0) throw InvalidInput("coefficients must be non-negative");
            sum += a;
        }
        if (std::abs(sum - 1.0) > kCoefficientTolerance) throw InvalidInput("coefficients must sum to 1");
    }
    for (const auto& label : layer_selector) {
        if (!cfg.has_label(label)) throw UnknownLabel(label);
    }
}

Json to_json(const MergeSpec& spec) {
    Json j;
    j["method"] = to_string(spec.method);
    j["coefficients"] = spec.coefficients ? Json(*spec.coefficients) : Json(nullptr);
    // null selects every label
    j["layer_selector"] = spec.layer_selector.empty() ? Json(nullptr) : Json(spec.layer_selector);
    j["include_bias"] = spec.include_bias;
    return j;
}

MergeSpec merge_spec_from_json(const Json& j) {
    MergeSpec spec;
    if (j.contains("method")) spec.method = merge_method_from_string(require<std::string>(j, "method"));
    if (j.contains("coefficients") && !j["coefficients"].is_null()) {
        spec.coefficients = require<std::vector<double>>(j, "coefficients");
    }
    if (j.contains("layer_selector") && !j["layer_selector"].is_null()) {
        spec.layer_selector = require<std::vector<std::string>>(j, "layer_selector");
        if (spec.layer_selector.empty()) throw InvalidInput("layer_selector must name at least one label");
    }
    if (j.contains("include_bias")) spec.include_bias = require<bool>(j, "include_bias");
    return spec;
}

std::vector<double> resolve_coefficients(std::span<const SwarmNode> nodes, const MergeSpec& spec) {
    const std::size_t k = nodes.size();
    if (k == 0) return {};
    const std::vector<double> uniform(k, 1.0 / static_cast<double>(k));
    if (spec.method == MergeMethod::Additive) return uniform;
    if (spec.coefficients) return *spec.coefficients;
    double total = 0.0;
    for (const auto& n : nodes) total += static_cast<double>(n.n_local);
    if (total == 0.0) return uniform;
    std::vector<double> alpha;
    alpha.reserve(k);
    for (const auto& n : nodes) alpha.push_back(static_cast<double>(n.n_local) / total);
    return alpha;
}

ModelWeights merge(std::span<const ModelWeights> weight_sets, const MergeSpec& spec, const ModelConfig& cfg,
                   std::optional<std::vector<double>> coefficients) {
    if (weight_sets.empty()) throw InvalidInput("merge needs at least one weight set");
    for (const auto& w : weight_sets) w.validate(cfg);
    spec.validate(cfg, weight_sets.size());

    std::vector<double> alpha;
    if (coefficients) {
        MergeSpec check = spec;
        check.method = MergeMethod::Weighted;
        check.coefficients = *coefficients;
        check.validate(cfg, weight_sets.size());
        alpha = std::move(*coefficients);
    } else if (spec.method == MergeMethod::Additive) {
        alpha.assign(weight_sets.size(), 1.0 / static_cast<double>(weight_sets.size()));
    } else if (spec.coefficients) {
        alpha = *spec.coefficients;
    } else {
        throw InvalidInput("weighted merge without coefficients needs node counts; resolve them first");
    }

    std::vector<bool> selected(cfg.labels.size(), spec.layer_selector.empty());
    for (const auto& label : spec.layer_selector) selected[cfg.label_index(label)] = true;

    // w0 + sum a_k (w_k - w0): exact on identical inputs; clamped to the
    // per-cell input range so rounding never leaves the convex hull
    auto combine = [&](auto&& value_of) {
        const double base = value_of(0);
        double acc = 0.0, lo = base, hi = base;
        for (std::size_t k = 0; k < weight_sets.size(); ++k) {
            const double v = value_of(k);
            acc += alpha[k] * (v - base);
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        return std::clamp(base + acc, lo, hi);
    };

    ModelWeights out = weight_sets[0];
    for (std::size_t l = 0; l < cfg.labels.size(); ++l) {
        if (!selected[l]) continue;
        auto& dst = out.layers[l];
        for (std::size_t i = 0; i < dst.plane.values.size(); ++i) {
            dst.plane.values[i] = combine([&](std::size_t k) { return weight_sets[k].layers[l].plane.values[i]; });
        }
        if (spec.include_bias) dst.bias = combine([&](std::size_t k) { return weight_sets[k].layers[l].bias; });
    }
    return out;
}

SwarmCoordinator::SwarmCoordinator(ModelRegistry& registry, fs::path reports_root)
    : registry_(registry), reports_root_(std::move(reports_root)) {}

SwarmRoundResult SwarmCoordinator::run_swarm_round(const std::string& model, std::vector<std::string> node_ids,
                                                   const MergeSpec& spec) {
    if (node_ids.empty()) throw InvalidInput("a swarm round needs at least one node");
    std::sort(node_ids.begin(), node_ids.end());
    if (std::adjacent_find(node_ids.begin(), node_ids.end()) != node_ids.end()) {
        throw InvalidInput("duplicate node in swarm round");
    }
    std::lock_guard round_lock(round_mutex_);
    const ModelConfig cfg = registry_.config(model);

    SwarmRoundResult result;
    std::vector<ModelWeights> weight_sets;
    for (const auto& id : node_ids) {
        if (!registry_.has_lineage(model, id)) throw NotFound("node '" + id + "' has no lineage for " + model);
        if (registry_.status(model, id) == kStatusRetraining) {
            throw Conflict("node '" + id + "' is retraining; retry after its batch completes");
        }
        auto r = registry_.resolve(model, id);
        result.nodes.push_back(SwarmNode{id, model, r.record.version, registry_.corrections_since_merge(model, id)});
        weight_sets.push_back(*r.weights);
    }
    spec.validate(cfg, node_ids.size());
    result.coefficients = resolve_coefficients(result.nodes, spec);
    const ModelWeights merged = merge(weight_sets, spec, cfg, result.coefficients);

    Provenance prov;
    for (const auto& n : result.nodes) prov.merge_sources.push_back(VersionRef{n.node_id, n.local_version});
    std::vector<PublishRequest> requests;
    for (const auto& n : result.nodes) {
        requests.push_back(PublishRequest{model, n.node_id, merged, kStatusSwarmLearned,
                                          VersionRef{n.node_id, n.local_version}, prov, n.local_version});
    }
    result.published = registry_.publish_many(std::move(requests));

    const fs::path dir = reports_root_.empty() ? fs::path() : reports_root_ / "swarm" / model;
    long round = 1;
    if (!dir.empty() && fs::exists(dir)) {
        for (const auto& e : fs::directory_iterator(dir)) {
            if (e.path().extension() == ".json") ++round;
        }
    }
    result.round = round;
    if (!dir.empty()) {
        Json report;
        report["round"] = round;
        report["model"] = model;
        report["spec"] = to_json(spec);
        report["coefficients"] = result.coefficients;
        Json sources = Json::array();
        for (const auto& n : result.nodes) {
            Json s;
            s["node_id"] = n.node_id;
            s["version"] = n.local_version;
            s["n_local"] = n.n_local;
            sources.push_back(std::move(s));
        }
        report["sources"] = std::move(sources);
        Json out = Json::array();
        for (const auto& rec : result.published) out.push_back(to_json(rec));
        report["published"] = std::move(out);
        write_file_atomic(dir / ("round-" + std::to_string(round) + ".json"), report.dump(2));
    }
    return result;
}

}  // namespace radloop
