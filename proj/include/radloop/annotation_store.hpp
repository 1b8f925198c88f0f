#pragma once

#include <atomic>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "radloop/clock.hpp"
#include "radloop/core_model.hpp"
#include "radloop/serialization.hpp"

namespace radloop {

enum class Disposition { Disabled, Relabeled, BoxAdjusted, Added };

const char* to_string(Disposition d);
Disposition disposition_from_string(const std::string& text);

/// Overlay annotation; never touches the pixels of the study it annotates.
struct SrLiteAnnotation {
    std::string annotation_id;
    std::string study_id;
    // exactly one of the two author forms is set
    std::optional<std::string> author_user;
    std::optional<std::pair<std::string, long>> author_model;
    std::string label;
    BoundingBox box;
    std::string annotation_text;
    std::string created_at;
    bool enabled = true;

    void validate(int width, int height) const;
};

struct CorrectionRecord {
    std::string correction_id;
    std::string user_id;
    std::string model;
    long model_version = 0;
    std::string study_id;
    std::string label;
    Disposition disposition = Disposition::BoxAdjusted;
    std::optional<BoundingBox> corrected_box;
    std::optional<LabelFinding> original_finding;
    ImagePayload image;
    std::string received_at;
    std::optional<long> consumed_by_version;

    /// Throws InvalidInput naming the violated field.
    void validate() const;
};

Json to_json(const CorrectionRecord& rec);
CorrectionRecord correction_from_json(const Json& j);
Json to_json(const SrLiteAnnotation& a);
SrLiteAnnotation annotation_from_json(const Json& j);

enum class PoolKind { TP, TN };

struct MarkResult {
    std::size_t marked = 0;
    std::vector<std::string> skipped;  // already consumed or unknown
};

struct Deferral {
    std::string correction_id;
    std::string reason;
};

/// Append-only, file-backed store of corrections, SR-lite annotations and
/// the per-user reference pool. Layout under `root`:
///   corrections/<user>.jsonl           one CorrectionRecord per line
///   corrections/<user>.consumed.jsonl  {correction_id, consumed_by_version}
///   corrections/<user>.deferred.jsonl  terminal deferrals {correction_id, reason}
///   annotations/<study>.json           array of SrLiteAnnotation
///   pool/<user>.jsonl                  {user_id, label, kind, example}
/// Every line is flushed and fsync'ed before the call returns.
class AnnotationStore {
public:
    explicit AnnotationStore(std::filesystem::path root, Clock clock = system_clock());

    AnnotationStore(const AnnotationStore&) = delete;
    AnnotationStore& operator=(const AnnotationStore&) = delete;

    /// Idempotent on correction_id. Fills received_at when empty.
    std::string append_correction(CorrectionRecord rec);

    /// Unconsumed, non-deferred records for (user, model) in arrival order.
    std::vector<CorrectionRecord> pending_corrections(const std::string& user_id, const std::string& model) const;

    std::size_t pending_count(const std::string& user_id, const std::string& model) const;
    std::optional<std::string> oldest_pending_at(const std::string& user_id, const std::string& model) const;

    /// Users with at least one pending record for `model`.
    std::vector<std::string> users_with_pending(const std::string& model) const;

    MarkResult mark_consumed(const std::vector<std::string>& ids, long version);

    /// Permanently removes a record from the pending set (e.g. an undecodable
    /// payload) without touching the record itself.
    void record_deferral(const std::string& user_id, const Deferral& d);
    std::vector<Deferral> deferrals(const std::string& user_id) const;

    std::optional<CorrectionRecord> find(const std::string& correction_id) const;
    std::vector<CorrectionRecord> all_corrections(const std::string& user_id) const;

    void put_annotation(const SrLiteAnnotation& a, int width, int height);
    std::vector<SrLiteAnnotation> annotations(const std::string& study_id) const;

    void add_to_pool(const std::string& user_id, PoolKind kind, TrainingExample ex);
    /// Most recently added example of that kind for (user, label).
    std::optional<TrainingExample> pool_lookup(const std::string& user_id, const std::string& label,
                                               PoolKind kind) const;
    std::size_t pool_size(const std::string& user_id) const;

    /// Number of read operations served; used to prove that code paths such
    /// as swarm rounds never look at private data.
    std::size_t read_count() const { return reads_.load(); }

    const std::filesystem::path& root() const { return root_; }
    std::string now() const;

private:
    struct PoolEntry {
        std::string label;
        PoolKind kind;
        TrainingExample example;
    };
    struct UserLog {
        std::vector<CorrectionRecord> records;  // arrival order
        std::map<std::string, std::size_t> index;
        std::map<std::string, std::string> deferred;
        std::vector<Deferral> deferral_order;
        std::vector<PoolEntry> pool;
    };

    void load();
    UserLog& log_for(const std::string& user_id);
    const UserLog* find_log(const std::string& user_id) const;
    bool is_pending(const UserLog& log, const CorrectionRecord& rec) const;
    void note_read() const { ++reads_; }

    std::filesystem::path root_;
    Clock clock_;
    mutable std::mutex mutex_;
    std::map<std::string, UserLog> users_;
    std::map<std::string, std::string> owner_of_;  // correction_id -> user_id
    mutable std::atomic<std::size_t> reads_{0};
};

/// Appends one line and fsyncs. Creates parent directories.
void append_line(const std::filesystem::path& file, const std::string& line);

/// Writes via temp file + rename so readers never see partial content.
void write_file_atomic(const std::filesystem::path& file, const std::string& content);

std::string read_file(const std::filesystem::path& file);

/// File-name-safe check for ids used in paths.
void check_path_component(const std::string& value, const char* what);

}  // namespace radloop
