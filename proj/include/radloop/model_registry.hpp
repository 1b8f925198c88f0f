#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <utility>
#include <vector>

#include "radloop/clock.hpp"
#include "radloop/core_model.hpp"
#include "radloop/serialization.hpp"

namespace radloop {

inline constexpr const char* kBaseOwner = "base";

struct VersionRef {
    std::string owner;
    long version = 0;

    bool operator==(const VersionRef&) const = default;
};

struct Provenance {
    std::vector<std::string> corrections;
    std::vector<VersionRef> merge_sources;

    bool operator==(const Provenance&) const = default;
};

struct ModelVersionRecord {
    std::string model;
    std::string owner;
    long version = 0;
    std::string status = kStatusReady;
    std::optional<VersionRef> parent;
    Provenance provenance;
    std::string created_at;
    std::string weights_ref;  // relative to the registry root
};

Json to_json(const ModelVersionRecord& rec);
ModelVersionRecord version_record_from_json(const Json& j);

bool is_model_status(const std::string& s);
bool transition_allowed(const std::string& from, const std::string& to);

struct ResolvedModel {
    ModelVersionRecord record;
    std::shared_ptr<const ModelWeights> weights;
    ModelConfig config;
};

struct PublishRequest {
    std::string model;
    std::string owner;
    ModelWeights weights;
    std::string status = kStatusReady;
    std::optional<VersionRef> parent;
    Provenance provenance;
    // When set, the publish fails with Conflict unless the lineage's latest
    // version still equals this value.
    std::optional<long> expected_latest;
};

/// Versioned catalog of per-(model, owner) lineages.
///
/// Layout under `root`:
///   <model>/<owner>/<version>.json   weights plus config header
///   catalog.jsonl                    one ModelVersionRecord per line
///   status.jsonl                     lineage status changes
///
/// Weight files are written (temp + rename) before their catalog line, and a
/// record becomes visible in memory only after both, so resolve never sees a
/// version without weights. Readers take a shared lock; writers are
/// serialized per lineage.
class ModelRegistry {
public:
    explicit ModelRegistry(std::filesystem::path root, Clock clock = system_clock());

    ModelRegistry(const ModelRegistry&) = delete;
    ModelRegistry& operator=(const ModelRegistry&) = delete;

    ModelVersionRecord seed_base(const std::string& model, const ModelConfig& cfg, const ModelWeights& init);

    ModelVersionRecord publish(const std::string& model, const std::string& owner, const ModelWeights& weights,
                               const std::string& status, std::optional<VersionRef> parent, Provenance provenance);

    /// All-or-nothing publish across lineages. Rejects with Conflict when any
    /// target lineage is retraining or moved past `expected_latest`.
    std::vector<ModelVersionRecord> publish_many(std::vector<PublishRequest> requests);

    /// Omitted version resolves to the latest "ready" or "swarm-learned" one.
    ResolvedModel resolve(const std::string& model, const std::string& owner,
                          std::optional<long> version = std::nullopt) const;

    /// The user's own lineage when it exists, else the base lineage.
    ResolvedModel resolve_for_user(const std::string& model, const std::string& user,
                                   std::optional<long> version = std::nullopt) const;

    /// Creates the owner's lineage as version 0, a copy of the latest base
    /// version, when missing. Returns the lineage's latest record.
    ModelVersionRecord ensure_lineage(const std::string& model, const std::string& owner);

    /// Returns the previous status; throws Conflict on an illegal transition.
    std::string set_status(const std::string& model, const std::string& owner, const std::string& status);
    std::string status(const std::string& model, const std::string& owner) const;

    bool has_model(const std::string& model) const;
    bool has_lineage(const std::string& model, const std::string& owner) const;
    std::vector<std::string> models() const;
    std::vector<std::string> owners(const std::string& model) const;
    std::vector<ModelVersionRecord> versions(const std::string& model, const std::string& owner) const;
    long latest_version(const std::string& model, const std::string& owner) const;
    ModelConfig config(const std::string& model) const;

    /// Corrections trained into the lineage since its last swarm-learned
    /// version (or since the lineage started).
    std::size_t corrections_since_merge(const std::string& model, const std::string& owner) const;

    const std::filesystem::path& root() const { return root_; }

private:
    struct VersionEntry {
        ModelVersionRecord record;
        mutable std::shared_ptr<const ModelWeights> weights;  // loaded lazily
    };
    struct Lineage {
        std::string status = kStatusReady;
        std::map<long, VersionEntry> versions;
    };
    using Key = std::pair<std::string, std::string>;

    void load();
    std::mutex& writer_for(const Key& key);
    const Lineage& lineage(const Key& key) const;
    std::shared_ptr<const ModelWeights> weights_of(const VersionEntry& entry, const ModelConfig& cfg) const;
    std::string write_weights(const std::string& model, const std::string& owner, long version,
                              const ModelWeights& weights, const ModelConfig& cfg) const;
    ResolvedModel resolve_locked(const Key& key, std::optional<long> version) const;
    void append_status_event(const Key& key, const std::string& status);

    std::filesystem::path root_;
    Clock clock_;
    mutable std::shared_mutex state_mutex_;
    std::map<Key, Lineage> lineages_;
    std::map<std::string, ModelConfig> configs_;
    std::mutex writers_mutex_;
    std::map<Key, std::unique_ptr<std::mutex>> writers_;
    std::mutex catalog_mutex_;
};

}  // namespace radloop
