#include "radloop/retraining.hpp"

#include "radloop/errors.hpp"

namespace radloop {

const char* to_string(ErrorKind k) {
    switch (k) {
        case ErrorKind::FP: return "FP";
        case ErrorKind::FN: return "FN";
        case ErrorKind::BoxFix: return "BOX_FIX";
    }
    return "BOX_FIX";
}

Classification classify_correction(const CorrectionRecord& rec, double theta_det,
                                   std::optional<double> new_label_probability) {
    switch (rec.disposition) {
        case Disposition::Disabled: return {ErrorKind::FP, rec.label, std::nullopt};
        case Disposition::Added: return {ErrorKind::FN, rec.label, std::nullopt};
        case Disposition::BoxAdjusted: return {ErrorKind::BoxFix, rec.label, std::nullopt};
        case Disposition::Relabeled: break;
    }
    const bool new_detected = new_label_probability && *new_label_probability >= theta_det;
    if (!new_detected) return {ErrorKind::FN, rec.label, std::nullopt};
    Classification c{ErrorKind::BoxFix, rec.label, std::nullopt};
    if (rec.original_finding && rec.original_finding->detected(theta_det)) {
        c.note = "relabel " + rec.original_finding->label + " -> " + rec.label +
                 ": both labels detected, treated as a box fix on the new label";
    }
    return c;
}

TrainingExample example_from_correction(const CorrectionRecord& rec, const Classification& cls) {
    TrainingExample ex;
    ex.image = rec.image;
    ex.label = cls.label;
    ex.y = cls.kind == ErrorKind::FP ? 0 : 1;
    if (ex.y == 1) ex.box = rec.corrected_box;
    return ex;
}

std::vector<TrainingExample> AssembledBatch::examples() const {
    std::vector<TrainingExample> out;
    out.reserve(triplets.size() * 3 + localization.size());
    for (const auto& t : triplets) {
        out.push_back(t.erroneous);
        out.push_back(t.tp);
        out.push_back(t.tn);
    }
    for (const auto& [id, ex] : localization) out.push_back(ex);
    return out;
}

std::vector<std::string> AssembledBatch::consumed_ids() const {
    std::vector<std::string> ids;
    for (const auto& t : triplets) ids.push_back(t.correction_id);
    for (const auto& [id, ex] : localization) ids.push_back(id);
    return ids;
}

AssembledBatch assemble_triplets(const std::vector<ClassifiedCorrection>& records, const PoolLookup& pool) {
    AssembledBatch batch;
    for (const auto& [rec, cls] : records) {
        auto ex = example_from_correction(rec, cls);
        if (cls.kind == ErrorKind::BoxFix) {
            batch.localization.emplace_back(rec.correction_id, std::move(ex));
            continue;
        }
        auto tp = pool(cls.label, PoolKind::TP);
        auto tn = pool(cls.label, PoolKind::TN);
        if (!tp || !tn) {
            batch.deferred.push_back({rec.correction_id, "pool-miss"});
            continue;
        }
        batch.triplets.push_back(Triplet{rec.correction_id, std::move(ex), std::move(*tp), std::move(*tn), cls.label});
    }
    return batch;
}

Json to_json(const RetrainReport& r) {
    Json j;
    j["model"] = r.model;
    j["owner"] = r.owner;
    j["new_version"] = r.new_version ? Json(*r.new_version) : Json(nullptr);
    j["consumed"] = r.consumed;
    Json deferred = Json::array();
    for (const auto& d : r.deferred) {
        Json item;
        item["correction_id"] = d.correction_id;
        item["reason"] = d.reason;
        deferred.push_back(std::move(item));
    }
    j["deferred"] = std::move(deferred);
    j["epochs"] = r.epochs;
    j["loss_start"] = r.loss_start;
    j["loss_end"] = r.loss_end;
    j["loss_regressed"] = r.loss_regressed();
    j["triplets"] = r.triplets;
    j["localization_examples"] = r.localization_examples;
    j["notes"] = r.notes;
    return j;
}

TriggerDecision batch_trigger_policy(std::size_t pending_count, std::chrono::milliseconds oldest_age,
                                     const BatchPolicy& policy) {
    if (pending_count == 0) return TriggerDecision::Wait;
    if (pending_count >= policy.n_batch) return TriggerDecision::Fire;
    if (oldest_age >= policy.t_max) return TriggerDecision::Fire;
    return TriggerDecision::Wait;
}

RetrainingEngine::RetrainingEngine(ModelRegistry& registry, AnnotationStore& store, std::filesystem::path reports_root)
    : registry_(registry), store_(store), reports_root_(std::move(reports_root)) {}

RetrainReport RetrainingEngine::retrain_batch(const std::string& model, const std::string& owner,
                                              std::optional<int> epochs) {
    if (store_.pending_count(owner, model) == 0) {
        RetrainReport r;
        r.model = model;
        r.owner = owner;
        return r;
    }
    begin(model, owner);
    return run(model, owner, epochs);
}

void RetrainingEngine::begin(const std::string& model, const std::string& owner) {
    registry_.ensure_lineage(model, owner);
    registry_.set_status(model, owner, kStatusRetraining);
}

RetrainReport RetrainingEngine::run(const std::string& model, const std::string& owner, std::optional<int> epochs) {
    RetrainReport report;
    report.model = model;
    report.owner = owner;
    if (registry_.status(model, owner) != kStatusRetraining) {
        throw Conflict("lineage " + model + "/" + owner + " is not marked retraining");
    }
    try {
        const auto current = registry_.resolve(model, owner);
        const auto& cfg = current.config;
        report.epochs = epochs.value_or(cfg.epochs_default);
        if (report.epochs <= 0) throw InvalidInput("epochs must be positive");

        std::vector<ClassifiedCorrection> usable;
        for (auto& rec : store_.pending_corrections(owner, model)) {
            std::string bad;
            if (!cfg.has_label(rec.label)) {
                bad = "unknown-label";
            } else {
                try {
                    rec.image.validate();
                    if (rec.image.width != cfg.width || rec.image.height != cfg.height) bad = "bad-payload";
                } catch (const InvalidInput&) {
                    bad = "bad-payload";
                }
            }
            if (!bad.empty()) {
                store_.record_deferral(owner, Deferral{rec.correction_id, bad});
                report.deferred.push_back({rec.correction_id, bad});
                continue;
            }
            std::optional<double> new_score;
            if (rec.disposition == Disposition::Relabeled) {
                new_score = infer(*current.weights, rec.image, cfg).finding(rec.label).probability;
            }
            auto cls = classify_correction(rec, cfg.theta_det, new_score);
            if (cls.note) report.notes.push_back(rec.correction_id + ": " + *cls.note);
            usable.push_back({std::move(rec), std::move(cls)});
        }

        auto batch = assemble_triplets(usable, [&](const std::string& label, PoolKind kind) {
            return store_.pool_lookup(owner, label, kind);
        });
        for (auto& d : batch.deferred) report.deferred.push_back(d);
        report.triplets = batch.triplets.size();
        report.localization_examples = batch.localization.size();

        const auto examples = batch.examples();
        if (examples.empty()) {
            registry_.set_status(model, owner, kStatusReady);
            return report;
        }

        ModelWeights weights = *current.weights;
        report.loss_start = batch_loss(weights, examples, cfg);
        for (int e = 0; e < report.epochs; ++e) weights = sgd_step(weights, examples, cfg);
        report.loss_end = batch_loss(weights, examples, cfg);

        report.consumed = batch.consumed_ids();
        Provenance prov;
        prov.corrections = report.consumed;
        const auto rec = registry_.publish(model, owner, weights, kStatusReady,
                                           VersionRef{owner, current.record.version}, std::move(prov));
        report.new_version = rec.version;
        store_.mark_consumed(report.consumed, rec.version);

        if (!reports_root_.empty()) {
            write_file_atomic(reports_root_ / "retrain" / model / owner / (std::to_string(rec.version) + ".json"),
                              to_json(report).dump(2));
        }
        return report;
    } catch (...) {
        if (registry_.status(model, owner) == kStatusRetraining) registry_.set_status(model, owner, kStatusReady);
        throw;
    }
}

}  // namespace radloop
