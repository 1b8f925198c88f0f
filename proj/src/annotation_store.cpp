#include "radloop/annotation_store.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "radloop/base64.hpp"
#include "radloop/errors.hpp"

namespace radloop {

namespace fs = std::filesystem;

const char* to_string(Disposition d) {
    switch (d) {
        case Disposition::Disabled: return "disabled";
        case Disposition::Relabeled: return "relabeled";
        case Disposition::BoxAdjusted: return "box-adjusted";
        case Disposition::Added: return "added";
    }
    return "box-adjusted";
}

Disposition disposition_from_string(const std::string& text) {
    if (text == "disabled") return Disposition::Disabled;
    if (text == "relabeled") return Disposition::Relabeled;
    if (text == "box-adjusted") return Disposition::BoxAdjusted;
    if (text == "added") return Disposition::Added;
    throw InvalidInput("unknown disposition '" + text + "'");
}

void check_path_component(const std::string& value, const char* what) {
    if (value.empty()) throw InvalidInput(std::string(what) + " must not be empty");
    if (value == "." || value == "..") throw InvalidInput(std::string(what) + " is not a valid identifier");
    for (char c : value) {
        const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '-' ||
                        c == '_' || c == '.';
        if (!ok) throw InvalidInput(std::string(what) + " contains an unsupported character");
    }
}

void SrLiteAnnotation::validate(int width, int height) const {
    if (annotation_id.empty()) throw InvalidInput("annotation_id must not be empty");
    check_path_component(study_id, "study_id");
    if (author_user.has_value() == author_model.has_value()) {
        throw InvalidInput("author must be exactly one of a user or a model");
    }
    box.validate(width, height);
}

void CorrectionRecord::validate() const {
    if (correction_id.empty()) throw InvalidInput("correction_id must not be empty");
    check_path_component(user_id, "user_id");
    if (model.empty()) throw InvalidInput("model must not be empty");
    if (model_version < 0) throw InvalidInput("modelVersion must be non-negative");
    if (study_id.empty()) throw InvalidInput("study_id must not be empty");
    if (label.empty()) throw InvalidInput("label must not be empty");
    // Pixel payloads are checked at the wire boundary and again at retraining
    // time, where an undecodable one becomes a deferral instead of an error.
    if (image.width <= 0 || image.height <= 0) throw InvalidInput("image: dimensions must be positive");
    switch (disposition) {
        case Disposition::Disabled:
            if (corrected_box) throw InvalidInput("corrected_box must be absent for a disabled record");
            break;
        case Disposition::BoxAdjusted:
        case Disposition::Added:
            if (!corrected_box) throw InvalidInput("corrected_box is required for this disposition");
            break;
        case Disposition::Relabeled:
            break;
    }
    if (corrected_box) {
        try {
            corrected_box->validate(image.width, image.height);
        } catch (const InvalidInput& e) {
            throw InvalidInput(std::string("corrected_box: ") + e.what());
        }
    }
}

Json to_json(const CorrectionRecord& rec) {
    Json j;
    j["correction_id"] = rec.correction_id;
    j["user_id"] = rec.user_id;
    j["model"] = rec.model;
    j["modelVersion"] = rec.model_version;
    j["study_id"] = rec.study_id;
    j["label"] = rec.label;
    j["disposition"] = to_string(rec.disposition);
    j["corrected_box"] = rec.corrected_box ? to_json(*rec.corrected_box) : Json(nullptr);
    j["original_finding"] = rec.original_finding ? to_json(*rec.original_finding) : Json(nullptr);
    j["image"] = to_json(rec.image);
    j["received_at"] = rec.received_at;
    j["consumed_by_version"] = rec.consumed_by_version ? Json(*rec.consumed_by_version) : Json(nullptr);
    return j;
}

CorrectionRecord correction_from_json(const Json& j) {
    CorrectionRecord rec;
    rec.correction_id = require<std::string>(j, "correction_id");
    rec.user_id = require<std::string>(j, "user_id");
    rec.model = require<std::string>(j, "model");
    rec.model_version = require<long>(j, "modelVersion");
    rec.study_id = require<std::string>(j, "study_id");
    rec.label = require<std::string>(j, "label");
    rec.disposition = disposition_from_string(require<std::string>(j, "disposition"));
    if (!j.at("corrected_box").is_null()) rec.corrected_box = box_from_json(j["corrected_box"]);
    if (!j.at("original_finding").is_null()) rec.original_finding = finding_from_json(j["original_finding"]);
    // Payloads are kept as received; a corrupt one is a retraining-time deferral.
    const auto& img = j.at("image");
    rec.image.width = require<int>(img, "width");
    rec.image.height = require<int>(img, "height");
    try {
        rec.image.pixels = base64::decode(require<std::string>(img, "image"));
    } catch (const InvalidInput&) {
        rec.image.pixels.clear();
    }
    rec.received_at = require<std::string>(j, "received_at");
    if (j.contains("consumed_by_version") && !j["consumed_by_version"].is_null()) {
        rec.consumed_by_version = j["consumed_by_version"].get<long>();
    }
    return rec;
}

Json to_json(const SrLiteAnnotation& a) {
    Json j;
    j["annotation_id"] = a.annotation_id;
    j["study_id"] = a.study_id;
    Json author;
    if (a.author_user) {
        author["user"] = *a.author_user;
    } else if (a.author_model) {
        author["model"] = a.author_model->first;
        author["modelVersion"] = a.author_model->second;
    }
    j["author"] = std::move(author);
    j["label"] = a.label;
    j["box"] = to_json(a.box);
    j["annotationText"] = a.annotation_text;
    j["created_at"] = a.created_at;
    j["enabled"] = a.enabled;
    return j;
}

SrLiteAnnotation annotation_from_json(const Json& j) {
    SrLiteAnnotation a;
    a.annotation_id = require<std::string>(j, "annotation_id");
    a.study_id = require<std::string>(j, "study_id");
    const auto& author = j.at("author");
    if (author.contains("user")) a.author_user = author["user"].get<std::string>();
    if (author.contains("model")) a.author_model = {author["model"].get<std::string>(), author["modelVersion"].get<long>()};
    a.label = require<std::string>(j, "label");
    a.box = box_from_json(j.at("box"));
    a.annotation_text = require<std::string>(j, "annotationText");
    a.created_at = require<std::string>(j, "created_at");
    a.enabled = require<bool>(j, "enabled");
    return a;
}

void append_line(const fs::path& file, const std::string& line) {
    fs::create_directories(file.parent_path());
    const int fd = ::open(file.c_str(), O_RDWR | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (fd < 0) throw std::runtime_error("cannot open " + file.string() + ": " + std::strerror(errno));
    std::string data;
    // terminate a torn tail left by a crash so this line stays parseable
    const off_t size = ::lseek(fd, 0, SEEK_END);
    char last = '\n';
    if (size > 0 && ::pread(fd, &last, 1, size - 1) == 1 && last != '\n') data.push_back('\n');
    data += line;
    data.push_back('\n');
    const char* p = data.data();
    std::size_t left = data.size();
    while (left > 0) {
        const ssize_t n = ::write(fd, p, left);
        if (n < 0) {
            if (errno == EINTR) continue;
            ::close(fd);
            throw std::runtime_error("write failed for " + file.string());
        }
        p += n;
        left -= static_cast<std::size_t>(n);
    }
    ::fsync(fd);
    ::close(fd);
}

void write_file_atomic(const fs::path& file, const std::string& content) {
    fs::create_directories(file.parent_path());
    const fs::path tmp = file.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out << content;
        out.flush();
        if (!out) throw std::runtime_error("write failed for " + tmp.string());
    }
    const int fd = ::open(tmp.c_str(), O_RDONLY | O_CLOEXEC);
    if (fd >= 0) {
        ::fsync(fd);
        ::close(fd);
    }
    fs::rename(tmp, file);
}

std::string read_file(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw NotFound("cannot read " + file.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

namespace {

template <typename Fn>
void for_each_line(const fs::path& file, Fn&& fn) {
    std::ifstream in(file);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        // A torn final line (crash mid-append) was never acknowledged.
        Json j = Json::parse(line, nullptr, false);
        if (j.is_discarded()) continue;
        fn(j);
    }
}

const char* kind_name(PoolKind k) { return k == PoolKind::TP ? "TP" : "TN"; }

}  // namespace

AnnotationStore::AnnotationStore(fs::path root, Clock clock) : root_(std::move(root)), clock_(std::move(clock)) {
    fs::create_directories(root_ / "corrections");
    fs::create_directories(root_ / "annotations");
    fs::create_directories(root_ / "pool");
    load();
}

std::string AnnotationStore::now() const { return format_timestamp(clock_()); }

void AnnotationStore::load() {
    for (const auto& entry : fs::directory_iterator(root_ / "corrections")) {
        const std::string name = entry.path().filename().string();
        if (name.size() < 7 || name.substr(name.size() - 6) != ".jsonl") continue;
        if (name.find(".consumed.") != std::string::npos || name.find(".deferred.") != std::string::npos) continue;
        const std::string user = name.substr(0, name.size() - 6);
        auto& log = users_[user];
        for_each_line(entry.path(), [&](const Json& j) {
            auto rec = correction_from_json(j);
            if (log.index.count(rec.correction_id)) return;
            log.index[rec.correction_id] = log.records.size();
            owner_of_[rec.correction_id] = user;
            log.records.push_back(std::move(rec));
        });
        for_each_line(root_ / "corrections" / (user + ".consumed.jsonl"), [&](const Json& j) {
            auto it = log.index.find(j.at("correction_id").get<std::string>());
            if (it != log.index.end() && !log.records[it->second].consumed_by_version) {
                log.records[it->second].consumed_by_version = j.at("consumed_by_version").get<long>();
            }
        });
        for_each_line(root_ / "corrections" / (user + ".deferred.jsonl"), [&](const Json& j) {
            Deferral d{j.at("correction_id").get<std::string>(), j.at("reason").get<std::string>()};
            if (log.deferred.emplace(d.correction_id, d.reason).second) log.deferral_order.push_back(d);
        });
    }
    for (const auto& entry : fs::directory_iterator(root_ / "pool")) {
        if (entry.path().extension() != ".jsonl") continue;
        const std::string user = entry.path().stem().string();
        auto& log = users_[user];
        for_each_line(entry.path(), [&](const Json& j) {
            const auto kind = j.at("kind").get<std::string>() == "TP" ? PoolKind::TP : PoolKind::TN;
            log.pool.push_back(PoolEntry{j.at("label").get<std::string>(), kind, example_from_json(j.at("example"))});
        });
    }
}

AnnotationStore::UserLog& AnnotationStore::log_for(const std::string& user_id) { return users_[user_id]; }

const AnnotationStore::UserLog* AnnotationStore::find_log(const std::string& user_id) const {
    auto it = users_.find(user_id);
    return it == users_.end() ? nullptr : &it->second;
}

bool AnnotationStore::is_pending(const UserLog& log, const CorrectionRecord& rec) const {
    return !rec.consumed_by_version && !log.deferred.count(rec.correction_id);
}

std::string AnnotationStore::append_correction(CorrectionRecord rec) {
    rec.consumed_by_version.reset();
    if (rec.received_at.empty()) rec.received_at = now();
    rec.validate();
    std::lock_guard lock(mutex_);
    auto& log = log_for(rec.user_id);
    if (log.index.count(rec.correction_id)) return rec.correction_id;
    if (owner_of_.count(rec.correction_id)) {
        throw InvalidInput("correction_id '" + rec.correction_id + "' already belongs to another user");
    }
    append_line(root_ / "corrections" / (rec.user_id + ".jsonl"), to_json(rec).dump());
    log.index[rec.correction_id] = log.records.size();
    owner_of_[rec.correction_id] = rec.user_id;
    log.records.push_back(std::move(rec));
    return log.records.back().correction_id;
}

std::vector<CorrectionRecord> AnnotationStore::pending_corrections(const std::string& user_id,
                                                                   const std::string& model) const {
    note_read();
    std::lock_guard lock(mutex_);
    std::vector<CorrectionRecord> out;
    const auto* log = find_log(user_id);
    if (!log) return out;
    for (const auto& rec : log->records) {
        if (rec.model == model && is_pending(*log, rec)) out.push_back(rec);
    }
    return out;
}

std::size_t AnnotationStore::pending_count(const std::string& user_id, const std::string& model) const {
    note_read();
    std::lock_guard lock(mutex_);
    const auto* log = find_log(user_id);
    if (!log) return 0;
    return static_cast<std::size_t>(std::count_if(log->records.begin(), log->records.end(), [&](const auto& rec) {
        return rec.model == model && is_pending(*log, rec);
    }));
}

std::optional<std::string> AnnotationStore::oldest_pending_at(const std::string& user_id,
                                                              const std::string& model) const {
    note_read();
    std::lock_guard lock(mutex_);
    const auto* log = find_log(user_id);
    if (!log) return std::nullopt;
    for (const auto& rec : log->records) {
        if (rec.model == model && is_pending(*log, rec)) return rec.received_at;
    }
    return std::nullopt;
}

std::vector<std::string> AnnotationStore::users_with_pending(const std::string& model) const {
    note_read();
    std::lock_guard lock(mutex_);
    std::vector<std::string> out;
    for (const auto& [user, log] : users_) {
        for (const auto& rec : log.records) {
            if (rec.model == model && is_pending(log, rec)) {
                out.push_back(user);
                break;
            }
        }
    }
    return out;
}

MarkResult AnnotationStore::mark_consumed(const std::vector<std::string>& ids, long version) {
    std::lock_guard lock(mutex_);
    MarkResult result;
    // Validate the whole batch before writing so the batch lands or not at all.
    std::map<std::string, std::vector<std::string>> lines_by_user;
    std::vector<std::pair<UserLog*, std::size_t>> targets;
    std::set<std::string> seen;
    for (const auto& id : ids) {
        auto owner = owner_of_.find(id);
        if (owner == owner_of_.end() || !seen.insert(id).second) {
            result.skipped.push_back(id);
            continue;
        }
        auto& log = users_.at(owner->second);
        const std::size_t idx = log.index.at(id);
        if (log.records[idx].consumed_by_version) {
            result.skipped.push_back(id);
            continue;
        }
        Json line;
        line["correction_id"] = id;
        line["consumed_by_version"] = version;
        lines_by_user[owner->second].push_back(line.dump());
        targets.emplace_back(&log, idx);
    }
    for (const auto& [user, lines] : lines_by_user) {
        std::string block;
        for (std::size_t i = 0; i < lines.size(); ++i) {
            if (i) block += '\n';
            block += lines[i];
        }
        append_line(root_ / "corrections" / (user + ".consumed.jsonl"), block);
    }
    for (auto [log, idx] : targets) log->records[idx].consumed_by_version = version;
    result.marked = targets.size();
    return result;
}

void AnnotationStore::record_deferral(const std::string& user_id, const Deferral& d) {
    std::lock_guard lock(mutex_);
    auto& log = log_for(user_id);
    if (!log.index.count(d.correction_id)) throw NotFound("unknown correction '" + d.correction_id + "'");
    if (log.deferred.count(d.correction_id)) return;
    Json line;
    line["correction_id"] = d.correction_id;
    line["reason"] = d.reason;
    append_line(root_ / "corrections" / (user_id + ".deferred.jsonl"), line.dump());
    log.deferred.emplace(d.correction_id, d.reason);
    log.deferral_order.push_back(d);
}

std::vector<Deferral> AnnotationStore::deferrals(const std::string& user_id) const {
    note_read();
    std::lock_guard lock(mutex_);
    const auto* log = find_log(user_id);
    return log ? log->deferral_order : std::vector<Deferral>{};
}

std::optional<CorrectionRecord> AnnotationStore::find(const std::string& correction_id) const {
    note_read();
    std::lock_guard lock(mutex_);
    auto owner = owner_of_.find(correction_id);
    if (owner == owner_of_.end()) return std::nullopt;
    const auto& log = users_.at(owner->second);
    return log.records[log.index.at(correction_id)];
}

std::vector<CorrectionRecord> AnnotationStore::all_corrections(const std::string& user_id) const {
    note_read();
    std::lock_guard lock(mutex_);
    const auto* log = find_log(user_id);
    return log ? log->records : std::vector<CorrectionRecord>{};
}

void AnnotationStore::put_annotation(const SrLiteAnnotation& a, int width, int height) {
    a.validate(width, height);
    std::lock_guard lock(mutex_);
    const fs::path file = root_ / "annotations" / (a.study_id + ".json");
    Json all = Json::array();
    if (fs::exists(file)) all = Json::parse(read_file(file));
    for (const auto& existing : all) {
        if (existing.at("annotation_id").get<std::string>() == a.annotation_id) return;
    }
    SrLiteAnnotation stored = a;
    if (stored.created_at.empty()) stored.created_at = now();
    all.push_back(to_json(stored));
    write_file_atomic(file, all.dump(2));
}

std::vector<SrLiteAnnotation> AnnotationStore::annotations(const std::string& study_id) const {
    note_read();
    check_path_component(study_id, "study_id");
    std::lock_guard lock(mutex_);
    std::vector<SrLiteAnnotation> out;
    const fs::path file = root_ / "annotations" / (study_id + ".json");
    if (!fs::exists(file)) return out;
    for (const auto& j : Json::parse(read_file(file))) out.push_back(annotation_from_json(j));
    return out;
}

void AnnotationStore::add_to_pool(const std::string& user_id, PoolKind kind, TrainingExample ex) {
    check_path_component(user_id, "user_id");
    if ((kind == PoolKind::TP) != (ex.y == 1)) throw InvalidInput("pool kind disagrees with the example's y");
    ex.image.validate();
    std::lock_guard lock(mutex_);
    Json line;
    line["user_id"] = user_id;
    line["label"] = ex.label;
    line["kind"] = kind_name(kind);
    line["example"] = to_json(ex);
    append_line(root_ / "pool" / (user_id + ".jsonl"), line.dump());
    auto& log = log_for(user_id);
    log.pool.push_back(PoolEntry{ex.label, kind, std::move(ex)});
}

std::optional<TrainingExample> AnnotationStore::pool_lookup(const std::string& user_id, const std::string& label,
                                                            PoolKind kind) const {
    note_read();
    std::lock_guard lock(mutex_);
    const auto* log = find_log(user_id);
    if (!log) return std::nullopt;
    for (auto it = log->pool.rbegin(); it != log->pool.rend(); ++it) {
        if (it->label == label && it->kind == kind) return it->example;
    }
    return std::nullopt;
}

std::size_t AnnotationStore::pool_size(const std::string& user_id) const {
    note_read();
    std::lock_guard lock(mutex_);
    const auto* log = find_log(user_id);
    return log ? log->pool.size() : 0;
}

}  // namespace radloop
