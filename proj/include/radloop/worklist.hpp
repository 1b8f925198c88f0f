#pragma once

#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "radloop/core_model.hpp"
#include "radloop/serialization.hpp"

namespace radloop {

enum class EntryState { Unread, Assigned, Read };

const char* to_string(EntryState s);
EntryState entry_state_from_string(const std::string& text);

struct WorklistEntry {
    std::string study_id;
    long accession_order = 0;
    std::string modality;
    std::optional<double> priority;
    std::optional<std::string> assigned_to;
    EntryState state = EntryState::Unread;

    bool operator==(const WorklistEntry&) const = default;
};

Json to_json(const WorklistEntry& e);
WorklistEntry worklist_entry_from_json(const Json& j);

/// Max probability by default; a weighted policy uses per-label weights that
/// sum to 1, in the result's finding order.
struct PriorityPolicy {
    std::optional<std::vector<double>> label_weights;
};

double score(const InferenceResult& result, const PriorityPolicy& policy = {});

/// Scored entries by descending priority (ties by ascending accession), then
/// unscored entries in accession order.
std::vector<WorklistEntry> prioritize(std::vector<WorklistEntry> entries);

struct UserLoad {
    std::string user_id;
    std::size_t load = 0;
};

struct Assignment {
    std::string study_id;
    std::string user_id;
};

/// Round-robin over the prioritized unread entries, starting from the least
/// loaded user (ties broken by position in `users`).
std::vector<Assignment> assign(const std::vector<WorklistEntry>& entries, const std::vector<UserLoad>& users);

/// Single-writer worklist persisted as one JSON snapshot.
class Worklist {
public:
    /// Empty path keeps the worklist in memory only.
    explicit Worklist(std::filesystem::path snapshot_file = {});

    WorklistEntry register_study(const std::string& study_id, const std::string& modality);
    void set_priority(const std::string& study_id, double priority);
    std::vector<Assignment> assign_unread(const std::vector<std::string>& users);
    void mark_read(const std::string& study_id);

    std::vector<WorklistEntry> snapshot() const;
    std::vector<WorklistEntry> prioritized() const;
    std::optional<WorklistEntry> find(const std::string& study_id) const;

private:
    void persist() const;
    WorklistEntry& entry(const std::string& study_id);

    std::filesystem::path file_;
    mutable std::mutex mutex_;
    std::vector<WorklistEntry> entries_;
    long next_accession_ = 1;
};

}  // namespace radloop
