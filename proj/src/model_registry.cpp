#include "radloop/model_registry.hpp"

#include <algorithm>
#include <fstream>

#include "radloop/annotation_store.hpp"
#include "radloop/errors.hpp"

namespace radloop {

namespace fs = std::filesystem;

namespace {

std::mutex g_cache_mutex;

std::string lineage_name(const std::string& model, const std::string& owner) { return model + "/" + owner; }

}  // namespace

bool is_model_status(const std::string& s) {
    return s == kStatusReady || s == kStatusRetraining || s == kStatusSwarmLearned;
}

bool transition_allowed(const std::string& from, const std::string& to) {
    if (from == kStatusReady) return to == kStatusRetraining || to == kStatusSwarmLearned;
    if (from == kStatusRetraining) return to == kStatusReady;
    if (from == kStatusSwarmLearned) return to == kStatusRetraining || to == kStatusSwarmLearned;
    return false;
}

Json to_json(const ModelVersionRecord& rec) {
    Json j;
    j["model"] = rec.model;
    j["owner"] = rec.owner;
    j["version"] = rec.version;
    j["status"] = rec.status;
    if (rec.parent) {
        Json p;
        p["owner"] = rec.parent->owner;
        p["version"] = rec.parent->version;
        j["parent"] = std::move(p);
    } else {
        j["parent"] = nullptr;
    }
    Json prov = Json::array();
    for (const auto& id : rec.provenance.corrections) prov.push_back(id);
    for (const auto& src : rec.provenance.merge_sources) {
        Json s;
        s["owner"] = src.owner;
        s["version"] = src.version;
        prov.push_back(std::move(s));
    }
    j["provenance"] = std::move(prov);
    j["created_at"] = rec.created_at;
    j["weights_ref"] = rec.weights_ref;
    return j;
}

ModelVersionRecord version_record_from_json(const Json& j) {
    ModelVersionRecord rec;
    rec.model = require<std::string>(j, "model");
    rec.owner = require<std::string>(j, "owner");
    rec.version = require<long>(j, "version");
    rec.status = require<std::string>(j, "status");
    if (!j.at("parent").is_null()) {
        rec.parent = VersionRef{j["parent"].at("owner").get<std::string>(), j["parent"].at("version").get<long>()};
    }
    for (const auto& item : j.at("provenance")) {
        if (item.is_string()) {
            rec.provenance.corrections.push_back(item.get<std::string>());
        } else {
            rec.provenance.merge_sources.push_back(
                VersionRef{item.at("owner").get<std::string>(), item.at("version").get<long>()});
        }
    }
    rec.created_at = require<std::string>(j, "created_at");
    rec.weights_ref = require<std::string>(j, "weights_ref");
    return rec;
}

ModelRegistry::ModelRegistry(fs::path root, Clock clock) : root_(std::move(root)), clock_(std::move(clock)) {
    fs::create_directories(root_);
    load();
}

void ModelRegistry::load() {
    std::ifstream catalog(root_ / "catalog.jsonl");
    std::string line;
    while (std::getline(catalog, line)) {
        Json j = Json::parse(line, nullptr, false);
        if (j.is_discarded()) continue;
        auto rec = version_record_from_json(j);
        if (!fs::exists(root_ / rec.weights_ref)) continue;
        const Key key{rec.model, rec.owner};
        if (!configs_.count(rec.model)) {
            const Json header = Json::parse(read_file(root_ / rec.weights_ref));
            configs_[rec.model] = config_from_json(header.at("config"));
        }
        auto& lin = lineages_[key];
        if (rec.status != kStatusRetraining) lin.status = rec.status;
        lin.versions[rec.version] = VersionEntry{std::move(rec), nullptr};
    }
    std::ifstream status(root_ / "status.jsonl");
    while (std::getline(status, line)) {
        Json j = Json::parse(line, nullptr, false);
        if (j.is_discarded()) continue;
        const Key key{j.at("model").get<std::string>(), j.at("owner").get<std::string>()};
        auto it = lineages_.find(key);
        if (it != lineages_.end()) it->second.status = j.at("status").get<std::string>();
    }
    // No job survives a restart, so a lineage left mid-retraining serves again.
    for (auto& [key, lin] : lineages_) {
        if (lin.status == kStatusRetraining) lin.status = kStatusReady;
    }
}

std::mutex& ModelRegistry::writer_for(const Key& key) {
    std::lock_guard lock(writers_mutex_);
    auto& slot = writers_[key];
    if (!slot) slot = std::make_unique<std::mutex>();
    return *slot;
}

const ModelRegistry::Lineage& ModelRegistry::lineage(const Key& key) const {
    auto it = lineages_.find(key);
    if (it == lineages_.end()) throw NotFound("unknown lineage " + lineage_name(key.first, key.second));
    return it->second;
}

std::shared_ptr<const ModelWeights> ModelRegistry::weights_of(const VersionEntry& entry,
                                                              const ModelConfig& cfg) const {
    {
        std::lock_guard lock(g_cache_mutex);
        if (entry.weights) return entry.weights;
    }
    const Json doc = Json::parse(read_file(root_ / entry.record.weights_ref));
    auto loaded = std::make_shared<const ModelWeights>(weights_from_json(doc.at("layers"), cfg));
    std::lock_guard lock(g_cache_mutex);
    if (!entry.weights) entry.weights = std::move(loaded);
    return entry.weights;
}

std::string ModelRegistry::write_weights(const std::string& model, const std::string& owner, long version,
                                         const ModelWeights& weights, const ModelConfig& cfg) const {
    const fs::path rel = fs::path(model) / owner / (std::to_string(version) + ".json");
    Json doc;
    doc["model"] = model;
    doc["owner"] = owner;
    doc["version"] = version;
    doc["config"] = to_json(cfg);
    doc["layers"] = weights_to_json(weights, cfg);
    write_file_atomic(root_ / rel, doc.dump());
    return rel.generic_string();
}

void ModelRegistry::append_status_event(const Key& key, const std::string& status) {
    Json j;
    j["model"] = key.first;
    j["owner"] = key.second;
    j["status"] = status;
    j["at"] = format_timestamp(clock_());
    std::lock_guard lock(catalog_mutex_);
    append_line(root_ / "status.jsonl", j.dump());
}

ModelVersionRecord ModelRegistry::seed_base(const std::string& model, const ModelConfig& cfg,
                                            const ModelWeights& init) {
    check_path_component(model, "model");
    cfg.validate();
    init.validate(cfg);
    const Key key{model, kBaseOwner};
    std::lock_guard writer(writer_for(key));
    {
        std::shared_lock lock(state_mutex_);
        if (configs_.count(model)) throw Conflict("model '" + model + "' is already seeded");
    }
    ModelVersionRecord rec;
    rec.model = model;
    rec.owner = kBaseOwner;
    rec.version = 0;
    rec.status = kStatusReady;
    rec.created_at = format_timestamp(clock_());
    rec.weights_ref = write_weights(model, kBaseOwner, 0, init, cfg);
    {
        std::lock_guard lock(catalog_mutex_);
        append_line(root_ / "catalog.jsonl", to_json(rec).dump());
    }
    std::unique_lock lock(state_mutex_);
    configs_[model] = cfg;
    auto& lin = lineages_[key];
    lin.status = kStatusReady;
    lin.versions[0] = VersionEntry{rec, std::make_shared<const ModelWeights>(init)};
    return rec;
}

ModelVersionRecord ModelRegistry::publish(const std::string& model, const std::string& owner,
                                          const ModelWeights& weights, const std::string& status,
                                          std::optional<VersionRef> parent, Provenance provenance) {
    PublishRequest req{model, owner, weights, status, std::move(parent), std::move(provenance), std::nullopt};
    std::vector<PublishRequest> reqs;
    reqs.push_back(std::move(req));
    return publish_many(std::move(reqs)).front();
}

std::vector<ModelVersionRecord> ModelRegistry::publish_many(std::vector<PublishRequest> requests) {
    if (requests.empty()) return {};
    std::vector<Key> keys;
    for (const auto& r : requests) {
        check_path_component(r.model, "model");
        check_path_component(r.owner, "owner");
        if (!is_model_status(r.status)) throw InvalidInput("unknown model status '" + r.status + "'");
        keys.emplace_back(r.model, r.owner);
    }
    auto sorted = keys;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
        throw InvalidInput("a lineage appears twice in one publish");
    }
    std::vector<std::unique_lock<std::mutex>> held;
    for (const auto& k : sorted) held.emplace_back(writer_for(k));

    std::vector<ModelVersionRecord> records;
    std::vector<ModelConfig> cfgs;
    std::vector<std::string> previous;
    {
        std::shared_lock lock(state_mutex_);
        for (const auto& r : requests) {
            auto cfg_it = configs_.find(r.model);
            if (cfg_it == configs_.end()) throw NotFound("unknown model '" + r.model + "'");
            r.weights.validate(cfg_it->second);
            const Key key{r.model, r.owner};
            auto lin = lineages_.find(key);
            long next = 0;
            previous.push_back(lin != lineages_.end() ? lin->second.status : std::string());
            if (lin != lineages_.end()) {
                if (r.status == kStatusSwarmLearned && lin->second.status == kStatusRetraining) {
                    throw Conflict("lineage " + lineage_name(r.model, r.owner) + " is retraining");
                }
                next = lin->second.versions.rbegin()->first + 1;
                if (r.expected_latest && *r.expected_latest != next - 1) {
                    throw Conflict("lineage " + lineage_name(r.model, r.owner) + " moved to version " +
                                   std::to_string(next - 1));
                }
            } else if (r.owner == kBaseOwner) {
                throw NotFound("model '" + r.model + "' has no base lineage");
            }
            if (r.parent) {
                auto plin = lineages_.find(Key{r.model, r.parent->owner});
                if (plin == lineages_.end() || !plin->second.versions.count(r.parent->version)) {
                    throw NotFound("parent version " + std::to_string(r.parent->version) + " of " +
                                   lineage_name(r.model, r.parent->owner) + " does not exist");
                }
            }
            ModelVersionRecord rec;
            rec.model = r.model;
            rec.owner = r.owner;
            rec.version = next;
            rec.status = r.status;
            rec.parent = r.parent;
            rec.provenance = r.provenance;
            records.push_back(std::move(rec));
            cfgs.push_back(cfg_it->second);
        }
    }

    const std::string created = format_timestamp(clock_());
    for (std::size_t i = 0; i < records.size(); ++i) {
        records[i].created_at = created;
        records[i].weights_ref = write_weights(records[i].model, records[i].owner, records[i].version,
                                               requests[i].weights, cfgs[i]);
    }
    {
        std::string block;
        for (std::size_t i = 0; i < records.size(); ++i) {
            if (i) block += '\n';
            block += to_json(records[i]).dump();
        }
        std::lock_guard lock(catalog_mutex_);
        append_line(root_ / "catalog.jsonl", block);
    }
    // status log stays the full history, so replay on load ends in the right state
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (!previous[i].empty() && previous[i] != records[i].status) append_status_event(keys[i], records[i].status);
    }
    std::unique_lock lock(state_mutex_);
    for (std::size_t i = 0; i < records.size(); ++i) {
        auto& lin = lineages_[keys[i]];
        lin.status = records[i].status;
        lin.versions[records[i].version] =
            VersionEntry{records[i], std::make_shared<const ModelWeights>(std::move(requests[i].weights))};
    }
    return records;
}

ResolvedModel ModelRegistry::resolve_locked(const Key& key, std::optional<long> version) const {
    auto cfg_it = configs_.find(key.first);
    if (cfg_it == configs_.end()) throw NotFound("unknown model '" + key.first + "'");
    const auto& lin = lineage(key);
    const VersionEntry* entry = nullptr;
    if (version) {
        auto it = lin.versions.find(*version);
        if (it == lin.versions.end()) {
            throw NotFound("version " + std::to_string(*version) + " of " + lineage_name(key.first, key.second) +
                           " does not exist");
        }
        entry = &it->second;
    } else {
        for (auto it = lin.versions.rbegin(); it != lin.versions.rend(); ++it) {
            if (it->second.record.status != kStatusRetraining) {
                entry = &it->second;
                break;
            }
        }
        if (!entry) throw NotFound("no servable version of " + lineage_name(key.first, key.second));
    }
    return ResolvedModel{entry->record, weights_of(*entry, cfg_it->second), cfg_it->second};
}

ResolvedModel ModelRegistry::resolve(const std::string& model, const std::string& owner,
                                     std::optional<long> version) const {
    std::shared_lock lock(state_mutex_);
    return resolve_locked(Key{model, owner}, version);
}

ResolvedModel ModelRegistry::resolve_for_user(const std::string& model, const std::string& user,
                                              std::optional<long> version) const {
    std::shared_lock lock(state_mutex_);
    if (!configs_.count(model)) throw NotFound("unknown model '" + model + "'");
    const bool own = lineages_.count(Key{model, user}) > 0;
    return resolve_locked(Key{model, own ? user : kBaseOwner}, version);
}

ModelVersionRecord ModelRegistry::ensure_lineage(const std::string& model, const std::string& owner) {
    check_path_component(owner, "owner");
    const Key key{model, owner};
    {
        std::shared_lock lock(state_mutex_);
        auto it = lineages_.find(key);
        if (it != lineages_.end()) return it->second.versions.rbegin()->second.record;
    }
    const auto base = resolve(model, kBaseOwner);
    std::lock_guard writer(writer_for(key));
    {
        std::shared_lock lock(state_mutex_);
        auto it = lineages_.find(key);
        if (it != lineages_.end()) return it->second.versions.rbegin()->second.record;
    }
    ModelVersionRecord rec;
    rec.model = model;
    rec.owner = owner;
    rec.version = 0;
    rec.status = kStatusReady;
    rec.parent = VersionRef{kBaseOwner, base.record.version};
    rec.created_at = format_timestamp(clock_());
    rec.weights_ref = write_weights(model, owner, 0, *base.weights, base.config);
    {
        std::lock_guard lock(catalog_mutex_);
        append_line(root_ / "catalog.jsonl", to_json(rec).dump());
    }
    std::unique_lock lock(state_mutex_);
    auto& lin = lineages_[key];
    lin.status = kStatusReady;
    lin.versions[0] = VersionEntry{rec, base.weights};
    return rec;
}

std::string ModelRegistry::set_status(const std::string& model, const std::string& owner, const std::string& status) {
    if (!is_model_status(status)) throw InvalidInput("unknown model status '" + status + "'");
    const Key key{model, owner};
    std::lock_guard writer(writer_for(key));
    std::string previous;
    {
        std::shared_lock lock(state_mutex_);
        previous = lineage(key).status;
    }
    if (!transition_allowed(previous, status)) {
        throw Conflict("illegal status transition " + previous + " -> " + status + " for " +
                       lineage_name(model, owner));
    }
    append_status_event(key, status);
    std::unique_lock lock(state_mutex_);
    lineages_[key].status = status;
    return previous;
}

std::string ModelRegistry::status(const std::string& model, const std::string& owner) const {
    std::shared_lock lock(state_mutex_);
    return lineage(Key{model, owner}).status;
}

bool ModelRegistry::has_model(const std::string& model) const {
    std::shared_lock lock(state_mutex_);
    return configs_.count(model) > 0;
}

bool ModelRegistry::has_lineage(const std::string& model, const std::string& owner) const {
    std::shared_lock lock(state_mutex_);
    return lineages_.count(Key{model, owner}) > 0;
}

std::vector<std::string> ModelRegistry::models() const {
    std::shared_lock lock(state_mutex_);
    std::vector<std::string> out;
    for (const auto& [name, cfg] : configs_) out.push_back(name);
    return out;
}

std::vector<std::string> ModelRegistry::owners(const std::string& model) const {
    std::shared_lock lock(state_mutex_);
    std::vector<std::string> out;
    for (const auto& [key, lin] : lineages_) {
        if (key.first == model) out.push_back(key.second);
    }
    return out;
}

std::vector<ModelVersionRecord> ModelRegistry::versions(const std::string& model, const std::string& owner) const {
    std::shared_lock lock(state_mutex_);
    std::vector<ModelVersionRecord> out;
    for (const auto& [v, entry] : lineage(Key{model, owner}).versions) out.push_back(entry.record);
    return out;
}

long ModelRegistry::latest_version(const std::string& model, const std::string& owner) const {
    std::shared_lock lock(state_mutex_);
    return lineage(Key{model, owner}).versions.rbegin()->first;
}

ModelConfig ModelRegistry::config(const std::string& model) const {
    std::shared_lock lock(state_mutex_);
    auto it = configs_.find(model);
    if (it == configs_.end()) throw NotFound("unknown model '" + model + "'");
    return it->second;
}

std::size_t ModelRegistry::corrections_since_merge(const std::string& model, const std::string& owner) const {
    std::shared_lock lock(state_mutex_);
    const auto& lin = lineage(Key{model, owner});
    std::size_t n = 0;
    for (auto it = lin.versions.rbegin(); it != lin.versions.rend(); ++it) {
        if (it->second.record.status == kStatusSwarmLearned) break;
        n += it->second.record.provenance.corrections.size();
    }
    return n;
}

}  // namespace radloop
