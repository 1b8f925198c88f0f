#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <set>

#include "radloop/annotation_store.hpp"
#include "radloop/errors.hpp"
#include "radloop/model_registry.hpp"
#include "radloop/retraining.hpp"
#include "radloop/sim.hpp"
#include "support.hpp"

using namespace radloop;
using radloop::testing::TempDir;
using radloop::testing::uniform_image;

namespace {

using namespace std::chrono_literals;

Clock test_clock() { return logical_clock(parse_timestamp("2024-03-01T08:00:00.000Z"), 1000ms); }

LabelFinding finding(const std::string& label, double p) {
    LabelFinding f;
    f.label = label;
    f.probability = p;
    return f;
}

CorrectionRecord correction(const std::string& id, Disposition d, const std::string& label, const ImagePayload& img,
                            std::optional<BoundingBox> box = std::nullopt, double p = 0.5) {
    CorrectionRecord r;
    r.correction_id = id;
    r.user_id = "dr-a";
    r.model = "cxr";
    r.study_id = "s-" + id;
    r.label = label;
    r.disposition = d;
    r.corrected_box = box;
    r.original_finding = finding(label, p);
    r.image = img;
    return r;
}

sim::StudyTruth study_with(const ModelConfig& cfg, std::vector<bool> present, std::uint64_t from = 1) {
    for (std::uint64_t seed = from;; ++seed) {
        auto t = sim::gen_synthetic_study(seed, cfg);
        bool match = true;
        for (std::size_t l = 0; l < present.size(); ++l) match = match && t.labels[l].present == present[l];
        if (match) return t;
    }
}

// Snapshot of every catalog line, used to diff which lineages a call touched.
std::vector<std::string> catalog_lines(const std::filesystem::path& root) {
    std::vector<std::string> out;
    std::ifstream in(root / "catalog.jsonl");
    std::string line;
    while (std::getline(in, line)) out.push_back(line);
    return out;
}

struct Fixture {
    TempDir dir;
    ModelConfig cfg;
    ModelRegistry registry{dir.path() / "models", test_clock()};
    AnnotationStore store{dir.path() / "store", test_clock()};
    RetrainingEngine engine{registry, store, dir.path() / "reports"};

    Fixture() { registry.seed_base("cxr", cfg, ModelWeights::zeros(cfg)); }

    void pool_for(const std::string& label, std::size_t l) {
        std::vector<bool> tp(cfg.labels.size(), false), tn(cfg.labels.size(), false);
        tp[l] = true;
        const auto a = study_with(cfg, tp, 100);
        const auto b = study_with(cfg, tn, 200);
        store.add_to_pool("dr-a", PoolKind::TP, {a.image, label, 1, std::nullopt});
        store.add_to_pool("dr-a", PoolKind::TN, {b.image, label, 0, std::nullopt});
    }
};

}  // namespace

TEST_SUITE("retraining-engine") {
    TEST_CASE("classification rules") {
        const auto img = uniform_image(8, 8, 0);
        auto r = correction("c", Disposition::Disabled, "lesion-a", img, std::nullopt, 0.9);
        CHECK(classify_correction(r, 0.5).kind == ErrorKind::FP);
        r = correction("c", Disposition::Added, "lesion-a", img, BoundingBox::from_extent(0, 0, 2, 2), 0.1);
        CHECK(classify_correction(r, 0.5).kind == ErrorKind::FN);
        r = correction("c", Disposition::BoxAdjusted, "lesion-a", img, BoundingBox::from_extent(5, 0, 7, 2), 0.9);
        CHECK(classify_correction(r, 0.5).kind == ErrorKind::BoxFix);

        r = correction("c", Disposition::Relabeled, "lesion-b", img, BoundingBox::from_extent(0, 0, 2, 2));
        r.original_finding = finding("lesion-a", 0.9);
        auto c = classify_correction(r, 0.5, 0.2);
        CHECK(c.kind == ErrorKind::FN);
        CHECK(c.label == "lesion-b");
        c = classify_correction(r, 0.5, 0.8);
        CHECK(c.kind == ErrorKind::BoxFix);
        CHECK(c.label == "lesion-b");
        REQUIRE(c.note.has_value());
        CHECK(c.note->find("lesion-a -> lesion-b") != std::string::npos);
    }

    TEST_CASE("triplet assembly") {
        const auto img = uniform_image(8, 8, 3);
        const TrainingExample tp{uniform_image(8, 8, 1), "lesion-a", 1, std::nullopt};
        const TrainingExample tn{uniform_image(8, 8, 2), "lesion-a", 0, std::nullopt};
        auto pool_with = [&](bool has_tp, bool has_tn) -> PoolLookup {
            return [=](const std::string& label, PoolKind kind) -> std::optional<TrainingExample> {
                if (label != "lesion-a") return std::nullopt;
                if (kind == PoolKind::TP && has_tp) return tp;
                if (kind == PoolKind::TN && has_tn) return tn;
                return std::nullopt;
            };
        };

        auto empty = assemble_triplets({}, pool_with(true, true));
        CHECK(empty.triplets.empty());
        CHECK(empty.deferred.empty());

        const auto fn = correction("fn", Disposition::Added, "lesion-a", img, BoundingBox::from_extent(0, 0, 3, 3));
        auto one = assemble_triplets({{fn, classify_correction(fn, 0.5)}}, pool_with(true, true));
        REQUIRE(one.triplets.size() == 1);
        const auto& t = one.triplets[0];
        CHECK(t.erroneous.image.pixels == img.pixels);
        CHECK(t.erroneous.y == 1);
        CHECK(t.erroneous.box == BoundingBox::from_extent(0, 0, 3, 3));
        CHECK(t.tp.y == 1);
        CHECK(t.tn.y == 0);
        CHECK(t.tp.label == t.label);
        CHECK(t.tn.label == t.label);
        CHECK(t.erroneous.label == t.label);
        CHECK(one.examples().size() == 3);

        const auto fp = correction("fp", Disposition::Disabled, "lesion-a", img, std::nullopt, 0.9);
        auto miss = assemble_triplets({{fp, classify_correction(fp, 0.5)}}, pool_with(false, true));
        CHECK(miss.triplets.empty());
        REQUIRE(miss.deferred.size() == 1);
        CHECK(miss.deferred[0].reason == "pool-miss");

        const auto bf = correction("bf", Disposition::BoxAdjusted, "lesion-a", img, BoundingBox::from_extent(1, 1, 2, 2));
        auto loc = assemble_triplets({{bf, classify_correction(bf, 0.5)}}, pool_with(false, false));
        CHECK(loc.triplets.empty());
        REQUIRE(loc.localization.size() == 1);
        CHECK(loc.localization[0].second.y == 1);
        CHECK(loc.localization[0].second.box.has_value());
        CHECK(loc.consumed_ids() == std::vector<std::string>{"bf"});
    }

    TEST_CASE("batch trigger policy") {
        const BatchPolicy p;
        CHECK(batch_trigger_policy(4, 0ms, p) == TriggerDecision::Fire);
        CHECK(batch_trigger_policy(1, std::chrono::minutes(11), p) == TriggerDecision::Fire);
        CHECK(batch_trigger_policy(1, std::chrono::minutes(1), p) == TriggerDecision::Wait);
        CHECK(batch_trigger_policy(0, std::chrono::minutes(60), p) == TriggerDecision::Wait);
        const BatchPolicy sim{4, 0ms};
        CHECK(batch_trigger_policy(1, 0ms, sim) == TriggerDecision::Fire);
    }

    TEST_CASE("no pending corrections is a no-op") {
        Fixture f;
        const auto r = f.engine.retrain_batch("cxr", "dr-a");
        CHECK_FALSE(r.new_version.has_value());
        CHECK_FALSE(f.registry.has_lineage("cxr", "dr-a"));
    }

    TEST_CASE("one FN triplet publishes the next version and lowers the loss") {
        Fixture f;
        f.pool_for("lesion-a", 0);
        const auto t = study_with(f.cfg, {true, false, false}, 7);
        f.store.append_correction(correction("fn1", Disposition::Added, "lesion-a", t.image, t.labels[0].box, 0.5));
        const auto before = catalog_lines(f.registry.root());
        const auto untouched = f.registry.resolve("cxr", kBaseOwner);

        f.engine.begin("cxr", "dr-a");
        CHECK(f.registry.status("cxr", "dr-a") == kStatusRetraining);
        CHECK(f.registry.resolve("cxr", "dr-a").record.version == 0);
        const auto r = f.engine.run("cxr", "dr-a");

        REQUIRE(r.new_version.has_value());
        CHECK(*r.new_version == 1);
        CHECK(r.loss_end < r.loss_start);
        CHECK_FALSE(r.loss_regressed());
        CHECK(r.triplets == 1);
        CHECK(r.consumed == std::vector<std::string>{"fn1"});
        CHECK(r.deferred.empty());
        CHECK(f.registry.status("cxr", "dr-a") == kStatusReady);
        const auto now = f.registry.resolve("cxr", "dr-a");
        CHECK(now.record.version == 1);
        CHECK(now.record.parent == VersionRef{"dr-a", 0});
        CHECK(now.record.provenance.corrections == std::vector<std::string>{"fn1"});
        CHECK(f.store.find("fn1")->consumed_by_version == 1);
        CHECK(std::filesystem::exists(f.dir.path() / "reports" / "retrain" / "cxr" / "dr-a" / "1.json"));

        // only (cxr, dr-a) lines were added to the catalog
        const auto after = catalog_lines(f.registry.root());
        REQUIRE(after.size() > before.size());
        CHECK(std::equal(before.begin(), before.end(), after.begin()));
        for (std::size_t i = before.size(); i < after.size(); ++i) {
            const auto j = Json::parse(after[i]);
            CHECK(j["model"] == "cxr");
            CHECK(j["owner"] == "dr-a");
        }
        CHECK(f.registry.latest_version("cxr", kBaseOwner) == 0);
        CHECK(*f.registry.resolve("cxr", kBaseOwner).weights == *untouched.weights);

        // the new model scores the corrected study higher
        const auto p0 = infer(*untouched.weights, t.image, f.cfg).findings[0].probability;
        const auto p1 = infer(*now.weights, t.image, f.cfg).findings[0].probability;
        CHECK(p1 > p0);

        // nothing is trained twice
        CHECK_FALSE(f.engine.retrain_batch("cxr", "dr-a").new_version.has_value());
    }

    TEST_CASE("corrupt payload is deferred and the batch proceeds") {
        Fixture f;
        f.pool_for("lesion-a", 0);
        f.pool_for("lesion-b", 1);
        const auto t = study_with(f.cfg, {true, true, false}, 11);
        f.store.append_correction(correction("c1", Disposition::Added, "lesion-a", t.image, t.labels[0].box));
        f.store.append_correction(correction("c2", Disposition::Disabled, "lesion-c", t.image, std::nullopt, 0.8));
        auto broken = correction("c3", Disposition::Added, "lesion-b", t.image, t.labels[1].box);
        broken.image.pixels.resize(100);
        f.store.append_correction(broken);
        f.store.append_correction(correction("c4", Disposition::BoxAdjusted, "lesion-b", t.image, t.labels[1].box));
        f.store.append_correction(correction("c5", Disposition::Added, "lesion-b", t.image, t.labels[1].box));
        const auto pending = f.store.pending_corrections("dr-a", "cxr");
        REQUIRE(pending.size() == 5);

        // lesion-c has no pool yet: c2 waits for companions
        auto r = f.engine.retrain_batch("cxr", "dr-a");
        REQUIRE(r.new_version.has_value());
        std::set<std::string> consumed(r.consumed.begin(), r.consumed.end());
        std::set<std::string> deferred;
        for (const auto& d : r.deferred) deferred.insert(d.correction_id);
        CHECK(consumed == std::set<std::string>{"c1", "c4", "c5"});
        CHECK(deferred == std::set<std::string>{"c2", "c3"});
        // consumed and deferred partition the pending set
        std::set<std::string> all;
        for (const auto& p : pending) all.insert(p.correction_id);
        std::set<std::string> both = consumed;
        both.insert(deferred.begin(), deferred.end());
        CHECK(both == all);
        CHECK(consumed.size() + deferred.size() == all.size());
        CHECK(f.store.deferrals("dr-a").size() == 1);
        CHECK(f.store.deferrals("dr-a")[0].reason == "bad-payload");
        CHECK(f.store.pending_count("dr-a", "cxr") == 1);

        // once companions exist the waiting record is consumed
        f.pool_for("lesion-c", 2);
        r = f.engine.retrain_batch("cxr", "dr-a");
        REQUIRE(r.new_version.has_value());
        CHECK(r.consumed == std::vector<std::string>{"c2"});
        CHECK(f.store.pending_count("dr-a", "cxr") == 0);
    }

    TEST_CASE("all corrections deferred publishes nothing") {
        Fixture f;
        const auto t = study_with(f.cfg, {true, false, false}, 3);
        f.store.append_correction(correction("c1", Disposition::Added, "lesion-a", t.image, t.labels[0].box));
        auto unknown = correction("c2", Disposition::Disabled, "lesion-q", t.image);
        f.store.append_correction(unknown);
        const auto r = f.engine.retrain_batch("cxr", "dr-a");
        CHECK_FALSE(r.new_version.has_value());
        CHECK(r.deferred.size() == 2);
        CHECK(f.registry.latest_version("cxr", "dr-a") == 0);
        CHECK(f.registry.status("cxr", "dr-a") == kStatusReady);
        CHECK(f.store.deferrals("dr-a")[0].reason == "unknown-label");
    }

    TEST_CASE("a second job on the same lineage is rejected") {
        Fixture f;
        f.engine.begin("cxr", "dr-a");
        CHECK_THROWS_AS(f.engine.begin("cxr", "dr-a"), Conflict);
        CHECK_THROWS_AS(f.engine.run("cxr", "dr-b"), NotFound);
        f.registry.set_status("cxr", "dr-a", kStatusReady);
        CHECK_THROWS_AS(f.engine.run("cxr", "dr-a"), Conflict);
    }

    TEST_CASE("relabel is scored with the current model") {
        Fixture f;
        f.pool_for("lesion-b", 1);
        const auto t = study_with(f.cfg, {false, true, false}, 5);
        auto r = correction("r1", Disposition::Relabeled, "lesion-b", t.image, t.labels[1].box);
        r.original_finding = finding("lesion-a", 0.5);
        f.store.append_correction(r);
        // the zero model scores lesion-b at exactly theta: counted as detected, so a box fix
        const auto rep = f.engine.retrain_batch("cxr", "dr-a");
        CHECK(rep.localization_examples == 1);
        CHECK(rep.triplets == 0);
        CHECK(rep.notes.size() == 1);
    }

    TEST_CASE("report json") {
        RetrainReport r;
        r.model = "cxr";
        r.owner = "dr-a";
        r.new_version = 3;
        r.loss_start = 1.0;
        r.loss_end = 2.0;
        r.deferred = {{"c9", "pool-miss"}};
        const auto j = to_json(r);
        CHECK(j["loss_regressed"] == true);
        CHECK(j["deferred"][0]["reason"] == "pool-miss");
        CHECK(j["new_version"] == 3);
    }
}
