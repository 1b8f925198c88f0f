#include "radloop/worklist.hpp"

#include <algorithm>
#include <cmath>

#include "radloop/annotation_store.hpp"
#include "radloop/errors.hpp"

namespace radloop {

const char* to_string(EntryState s) {
    switch (s) {
        case EntryState::Unread: return "unread";
        case EntryState::Assigned: return "assigned";
        case EntryState::Read: return "read";
    }
    return "unread";
}

EntryState entry_state_from_string(const std::string& text) {
    if (text == "unread") return EntryState::Unread;
    if (text == "assigned") return EntryState::Assigned;
    if (text == "read") return EntryState::Read;
    throw InvalidInput("unknown worklist state '" + text + "'");
}

Json to_json(const WorklistEntry& e) {
    Json j;
    j["study_id"] = e.study_id;
    j["accession_order"] = e.accession_order;
    j["modality"] = e.modality;
    j["priority"] = e.priority ? Json(*e.priority) : Json(nullptr);
    j["assigned_to"] = e.assigned_to ? Json(*e.assigned_to) : Json(nullptr);
    j["state"] = to_string(e.state);
    return j;
}

WorklistEntry worklist_entry_from_json(const Json& j) {
    WorklistEntry e;
    e.study_id = require<std::string>(j, "study_id");
    e.accession_order = require<long>(j, "accession_order");
    e.modality = require<std::string>(j, "modality");
    if (!j.at("priority").is_null()) e.priority = j["priority"].get<double>();
    if (!j.at("assigned_to").is_null()) e.assigned_to = j["assigned_to"].get<std::string>();
    e.state = entry_state_from_string(require<std::string>(j, "state"));
    return e;
}

double score(const InferenceResult& result, const PriorityPolicy& policy) {
    if (result.findings.empty()) return 0.0;
    if (!policy.label_weights) {
        double best = 0.0;
        for (const auto& f : result.findings) best = std::max(best, f.probability);
        return best;
    }
    const auto& w = *policy.label_weights;
    if (w.size() != result.findings.size()) throw InvalidInput("priority weights do not match the label count");
    double sum = 0.0, total = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (w[i] < 0.0) throw InvalidInput("priority weights must be non-negative");
        total += w[i];
        sum += w[i] * result.findings[i].probability;
    }
    if (std::abs(total - 1.0) > 1e-9) throw InvalidInput("priority weights must sum to 1");
    return std::clamp(sum, 0.0, 1.0);
}

std::vector<WorklistEntry> prioritize(std::vector<WorklistEntry> entries) {
    std::stable_sort(entries.begin(), entries.end(), [](const WorklistEntry& a, const WorklistEntry& b) {
        if (a.priority.has_value() != b.priority.has_value()) return a.priority.has_value();
        if (a.priority && *a.priority != *b.priority) return *a.priority > *b.priority;
        return a.accession_order < b.accession_order;
    });
    return entries;
}

std::vector<Assignment> assign(const std::vector<WorklistEntry>& entries, const std::vector<UserLoad>& users) {
    if (users.empty()) throw InvalidInput("assignment needs at least one user");
    std::vector<std::size_t> order(users.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return users[a].load < users[b].load; });

    std::vector<Assignment> out;
    std::size_t next = 0;
    for (const auto& e : prioritize(entries)) {
        if (e.state != EntryState::Unread) continue;
        out.push_back(Assignment{e.study_id, users[order[next]].user_id});
        next = (next + 1) % order.size();
    }
    return out;
}

Worklist::Worklist(std::filesystem::path snapshot_file) : file_(std::move(snapshot_file)) {
    if (file_.empty() || !std::filesystem::exists(file_)) return;
    const Json j = Json::parse(read_file(file_));
    for (const auto& item : j.at("entries")) entries_.push_back(worklist_entry_from_json(item));
    next_accession_ = j.value("next_accession", static_cast<long>(entries_.size()) + 1);
}

void Worklist::persist() const {
    if (file_.empty()) return;
    Json j;
    Json items = Json::array();
    for (const auto& e : entries_) items.push_back(to_json(e));
    j["entries"] = std::move(items);
    j["next_accession"] = next_accession_;
    write_file_atomic(file_, j.dump(2));
}

WorklistEntry& Worklist::entry(const std::string& study_id) {
    for (auto& e : entries_) {
        if (e.study_id == study_id) return e;
    }
    throw NotFound("unknown study '" + study_id + "'");
}

WorklistEntry Worklist::register_study(const std::string& study_id, const std::string& modality) {
    check_path_component(study_id, "study_id");
    std::lock_guard lock(mutex_);
    for (const auto& e : entries_) {
        if (e.study_id == study_id) throw Conflict("study '" + study_id + "' is already registered");
    }
    WorklistEntry e;
    e.study_id = study_id;
    e.accession_order = next_accession_++;
    e.modality = modality;
    entries_.push_back(e);
    persist();
    return e;
}

void Worklist::set_priority(const std::string& study_id, double priority) {
    if (!(priority >= 0.0 && priority <= 1.0)) throw InvalidInput("priority must lie in [0,1]");
    std::lock_guard lock(mutex_);
    entry(study_id).priority = priority;
    persist();
}

std::vector<Assignment> Worklist::assign_unread(const std::vector<std::string>& users) {
    std::lock_guard lock(mutex_);
    std::vector<UserLoad> loads;
    for (const auto& u : users) {
        std::size_t load = 0;
        for (const auto& e : entries_) {
            if (e.state == EntryState::Assigned && e.assigned_to == u) ++load;
        }
        loads.push_back({u, load});
    }
    auto result = assign(entries_, loads);
    for (const auto& a : result) {
        auto& e = entry(a.study_id);
        e.assigned_to = a.user_id;
        e.state = EntryState::Assigned;
    }
    persist();
    return result;
}

void Worklist::mark_read(const std::string& study_id) {
    std::lock_guard lock(mutex_);
    auto& e = entry(study_id);
    if (e.state != EntryState::Assigned) throw Conflict("study '" + study_id + "' is not assigned");
    e.state = EntryState::Read;
    persist();
}

std::vector<WorklistEntry> Worklist::snapshot() const {
    std::lock_guard lock(mutex_);
    return entries_;
}

std::vector<WorklistEntry> Worklist::prioritized() const { return prioritize(snapshot()); }

std::optional<WorklistEntry> Worklist::find(const std::string& study_id) const {
    std::lock_guard lock(mutex_);
    for (const auto& e : entries_) {
        if (e.study_id == study_id) return e;
    }
    return std::nullopt;
}

}  // namespace radloop
