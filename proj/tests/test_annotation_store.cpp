#include <doctest.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <thread>

#include "radloop/annotation_store.hpp"
#include "radloop/errors.hpp"
#include "support.hpp"

using namespace radloop;
using radloop::testing::TempDir;
using radloop::testing::uniform_image;

namespace {

Clock test_clock() {
    return logical_clock(parse_timestamp("2024-03-01T08:00:00.000Z"), std::chrono::milliseconds(1000));
}

CorrectionRecord record(const std::string& id, const std::string& user = "dr-a",
                        Disposition d = Disposition::Disabled) {
    CorrectionRecord r;
    r.correction_id = id;
    r.user_id = user;
    r.model = "cxr";
    r.model_version = 0;
    r.study_id = "study-" + id;
    r.label = "lesion-a";
    r.disposition = d;
    if (d != Disposition::Disabled) r.corrected_box = BoundingBox::from_extent(1, 1, 4, 4);
    r.image = uniform_image(8, 8, 17);
    r.image.pixels[5] = 200;
    return r;
}

std::size_t checksum(const std::vector<std::uint8_t>& px) {
    std::size_t h = 1469598103934665603ULL;
    for (auto b : px) h = (h ^ b) * 1099511628211ULL;
    return h;
}

std::vector<std::string> ids_of(const std::vector<CorrectionRecord>& rs) {
    std::vector<std::string> out;
    for (const auto& r : rs) out.push_back(r.correction_id);
    return out;
}

}  // namespace

TEST_SUITE("annotation-store") {
    TEST_CASE("append is idempotent and counts pending") {
        TempDir dir;
        AnnotationStore store(dir.path(), test_clock());
        CHECK(store.pending_corrections("dr-a", "cxr").empty());
        CHECK(store.append_correction(record("c1")) == "c1");
        CHECK(store.pending_count("dr-a", "cxr") == 1);
        CHECK(store.append_correction(record("c1")) == "c1");
        CHECK(store.pending_count("dr-a", "cxr") == 1);
        CHECK(store.pending_count("dr-b", "cxr") == 0);
        CHECK(store.pending_count("dr-a", "other") == 0);
        CHECK_THROWS_AS(store.append_correction(record("c1", "dr-b")), InvalidInput);
    }

    TEST_CASE("invariant violations name the field") {
        TempDir dir;
        AnnotationStore store(dir.path(), test_clock());
        auto r = record("c1");
        r.corrected_box = BoundingBox::from_extent(0, 0, 1, 1);
        CHECK_THROWS_WITH_AS(store.append_correction(r), doctest::Contains("corrected_box"), InvalidInput);
        r = record("c2", "dr-a", Disposition::Added);
        r.corrected_box.reset();
        CHECK_THROWS_WITH_AS(store.append_correction(r), doctest::Contains("corrected_box"), InvalidInput);
        r = record("c3", "dr-a", Disposition::BoxAdjusted);
        r.corrected_box = BoundingBox::from_extent(0, 0, 9, 9);
        CHECK_THROWS_WITH_AS(store.append_correction(r), doctest::Contains("corrected_box"), InvalidInput);
        r = record("");
        CHECK_THROWS_WITH_AS(store.append_correction(r), doctest::Contains("correction_id"), InvalidInput);
        r = record("c4");
        r.model_version = -1;
        CHECK_THROWS_WITH_AS(store.append_correction(r), doctest::Contains("modelVersion"), InvalidInput);
        r = record("c5", "../evil");
        CHECK_THROWS_AS(store.append_correction(r), InvalidInput);
        CHECK(store.pending_count("dr-a", "cxr") == 0);
    }

    TEST_CASE("pending keeps arrival order and drops consumed records") {
        TempDir dir;
        AnnotationStore store(dir.path(), test_clock());
        for (const auto* id : {"c3", "c1", "c2"}) store.append_correction(record(id));
        CHECK(ids_of(store.pending_corrections("dr-a", "cxr")) == std::vector<std::string>{"c3", "c1", "c2"});

        auto m = store.mark_consumed({"c3", "c2"}, 5);
        CHECK(m.marked == 2);
        CHECK(m.skipped.empty());
        CHECK(ids_of(store.pending_corrections("dr-a", "cxr")) == std::vector<std::string>{"c1"});
        CHECK(store.find("c3")->consumed_by_version == 5);

        m = store.mark_consumed({"c3", "c2"}, 6);
        CHECK(m.marked == 0);
        CHECK(m.skipped.size() == 2);
        CHECK(store.find("c3")->consumed_by_version == 5);
        CHECK(store.mark_consumed({}, 7).marked == 0);
        m = store.mark_consumed({"ghost", "c1", "c1"}, 8);
        CHECK(m.marked == 1);
        CHECK(m.skipped == std::vector<std::string>{"ghost", "c1"});
    }

    TEST_CASE("deferrals leave the pending set") {
        TempDir dir;
        AnnotationStore store(dir.path(), test_clock());
        store.append_correction(record("c1"));
        store.append_correction(record("c2"));
        store.record_deferral("dr-a", {"c1", "bad-payload"});
        CHECK(ids_of(store.pending_corrections("dr-a", "cxr")) == std::vector<std::string>{"c2"});
        REQUIRE(store.deferrals("dr-a").size() == 1);
        CHECK(store.deferrals("dr-a")[0].reason == "bad-payload");
        CHECK_THROWS_AS(store.record_deferral("dr-a", {"nope", "x"}), NotFound);
    }

    TEST_CASE("received_at and oldest pending come from the clock") {
        TempDir dir;
        AnnotationStore store(dir.path(), test_clock());
        store.append_correction(record("c1"));
        store.append_correction(record("c2"));
        CHECK(store.find("c1")->received_at == "2024-03-01T08:00:00.000Z");
        CHECK(store.oldest_pending_at("dr-a", "cxr") == std::optional<std::string>("2024-03-01T08:00:00.000Z"));
        store.mark_consumed({"c1"}, 1);
        CHECK(store.oldest_pending_at("dr-a", "cxr") == std::optional<std::string>("2024-03-01T08:00:01.000Z"));
        CHECK(store.users_with_pending("cxr") == std::vector<std::string>{"dr-a"});
    }

    TEST_CASE("restart reloads every acknowledged write") {
        TempDir dir;
        {
            AnnotationStore store(dir.path(), test_clock());
            store.append_correction(record("c1"));
            store.append_correction(record("c2", "dr-b", Disposition::Added));
            store.append_correction(record("c3"));
            store.mark_consumed({"c1"}, 3);
            store.record_deferral("dr-a", {"c3", "pool-miss-final"});
            store.add_to_pool("dr-a", PoolKind::TP, {uniform_image(8, 8, 1), "lesion-a", 1, std::nullopt});
        }
        AnnotationStore again(dir.path(), test_clock());
        CHECK(again.find("c1")->consumed_by_version == 3);
        CHECK(again.pending_count("dr-a", "cxr") == 0);
        CHECK(again.pending_count("dr-b", "cxr") == 1);
        CHECK(again.find("c2")->corrected_box == BoundingBox::from_extent(1, 1, 4, 4));
        CHECK(again.deferrals("dr-a").size() == 1);
        CHECK(again.pool_size("dr-a") == 1);
        CHECK(again.append_correction(record("c1")) == "c1");
        CHECK(again.pending_count("dr-a", "cxr") == 0);
    }

    TEST_CASE("a torn trailing line is ignored on load") {
        TempDir dir;
        {
            AnnotationStore store(dir.path(), test_clock());
            store.append_correction(record("c1"));
        }
        {
            std::ofstream out(dir.path() / "corrections" / "dr-a.jsonl", std::ios::app);
            out << "{\"correction_id\":\"c2\",\"us";
        }
        AnnotationStore again(dir.path(), test_clock());
        CHECK(again.pending_count("dr-a", "cxr") == 1);
        again.append_correction(record("c3"));
        AnnotationStore third(dir.path(), test_clock());
        CHECK(third.pending_count("dr-a", "cxr") == 2);
    }

    TEST_CASE("pool returns the most recent example of a kind") {
        TempDir dir;
        AnnotationStore store(dir.path(), test_clock());
        CHECK_FALSE(store.pool_lookup("dr-a", "lesion-a", PoolKind::TP).has_value());
        store.add_to_pool("dr-a", PoolKind::TN, {uniform_image(8, 8, 9), "lesion-a", 0, std::nullopt});
        CHECK_FALSE(store.pool_lookup("dr-a", "lesion-a", PoolKind::TP).has_value());
        store.add_to_pool("dr-a", PoolKind::TP, {uniform_image(8, 8, 1), "lesion-a", 1, std::nullopt});
        store.add_to_pool("dr-a", PoolKind::TP, {uniform_image(8, 8, 2), "lesion-a", 1, std::nullopt});
        store.add_to_pool("dr-a", PoolKind::TP, {uniform_image(8, 8, 3), "lesion-b", 1, std::nullopt});
        const auto tp = store.pool_lookup("dr-a", "lesion-a", PoolKind::TP);
        REQUIRE(tp.has_value());
        CHECK(tp->image.pixels[0] == 2);
        CHECK(tp->y == 1);
        CHECK(store.pool_lookup("dr-a", "lesion-a", PoolKind::TN)->y == 0);
        CHECK_FALSE(store.pool_lookup("dr-b", "lesion-a", PoolKind::TN).has_value());
        CHECK_THROWS_AS(store.add_to_pool("dr-a", PoolKind::TP, {uniform_image(8, 8, 1), "lesion-a", 0, std::nullopt}),
                        InvalidInput);
        CHECK(store.pool_size("dr-a") == 4);
    }

    TEST_CASE("annotations overlay without touching pixels") {
        TempDir dir;
        AnnotationStore store(dir.path(), test_clock());
        auto rec = record("c1", "dr-a", Disposition::BoxAdjusted);
        const auto before = checksum(rec.image.pixels);
        store.append_correction(rec);

        SrLiteAnnotation a;
        a.annotation_id = "a1";
        a.study_id = rec.study_id;
        a.author_user = "dr-a";
        a.label = "lesion-a";
        a.box = BoundingBox::from_extent(2, 2, 5, 5);
        a.annotation_text = "lesion-a";
        store.put_annotation(a, 8, 8);
        store.put_annotation(a, 8, 8);
        SrLiteAnnotation m = a;
        m.annotation_id = "a2";
        m.author_user.reset();
        m.author_model = std::make_pair(std::string("cxr"), 3L);
        m.enabled = false;
        store.put_annotation(m, 8, 8);
        store.mark_consumed({"c1"}, 1);

        const auto anns = store.annotations(rec.study_id);
        REQUIRE(anns.size() == 2);
        CHECK(anns[1].author_model->second == 3);
        CHECK_FALSE(anns[1].enabled);
        CHECK(checksum(store.find("c1")->image.pixels) == before);

        AnnotationStore again(dir.path(), test_clock());
        CHECK(checksum(again.find("c1")->image.pixels) == before);

        SrLiteAnnotation bad = a;
        bad.annotation_id = "a3";
        bad.author_model = std::make_pair(std::string("cxr"), 3L);
        CHECK_THROWS_AS(store.put_annotation(bad, 8, 8), InvalidInput);
        bad = a;
        bad.annotation_id = "a4";
        bad.box = BoundingBox::from_extent(0, 0, 8, 8);
        CHECK_THROWS_AS(store.put_annotation(bad, 8, 8), InvalidInput);
    }

    TEST_CASE("read counter tracks reads only") {
        TempDir dir;
        AnnotationStore store(dir.path(), test_clock());
        const auto r0 = store.read_count();
        store.append_correction(record("c1"));
        store.mark_consumed({"c1"}, 1);
        CHECK(store.read_count() == r0);
        (void)store.pending_count("dr-a", "cxr");
        (void)store.pool_lookup("dr-a", "lesion-a", PoolKind::TP);
        CHECK(store.read_count() == r0 + 2);
    }

    TEST_CASE("concurrent appenders lose nothing") {
        TempDir dir;
        AnnotationStore store(dir.path(), test_clock());
        std::vector<std::thread> threads;
        for (int t = 0; t < 4; ++t) {
            threads.emplace_back([&, t] {
                for (int i = 0; i < 25; ++i) {
                    const std::string id = "t" + std::to_string(t) + "-" + std::to_string(i);
                    store.append_correction(record(id, t % 2 ? "dr-a" : "dr-b"));
                    store.append_correction(record(id, t % 2 ? "dr-a" : "dr-b"));
                }
            });
        }
        for (auto& th : threads) th.join();
        CHECK(store.pending_count("dr-a", "cxr") == 50);
        CHECK(store.pending_count("dr-b", "cxr") == 50);
        AnnotationStore again(dir.path(), test_clock());
        CHECK(again.pending_count("dr-a", "cxr") + again.pending_count("dr-b", "cxr") == 100);
    }

    TEST_CASE("correction json round trip") {
        auto r = record("c1", "dr-a", Disposition::Relabeled);
        LabelFinding f;
        f.label = "lesion-b";
        f.probability = 0.75;
        f.box = BoundingBox::from_extent(0, 0, 2, 2);
        r.original_finding = f;
        r.received_at = "2024-03-01T08:00:00.000Z";
        r.consumed_by_version = 4;
        const auto j = to_json(r);
        CHECK(j["disposition"] == "relabeled");
        const auto back = correction_from_json(j);
        CHECK(to_json(back).dump() == j.dump());
        CHECK(back.image.pixels == r.image.pixels);
        CHECK_THROWS_AS(disposition_from_string("deleted"), InvalidInput);
    }
}
