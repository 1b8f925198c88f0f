#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <random>

#include "radloop/annotation_store.hpp"
#include "radloop/errors.hpp"
#include "radloop/model_registry.hpp"
#include "radloop/retraining.hpp"
#include "radloop/swarm.hpp"
#include "support.hpp"

using namespace radloop;
using radloop::testing::random_weights;
using radloop::testing::small_config;
using radloop::testing::TempDir;
using radloop::testing::uniform_image;

namespace {

using namespace std::chrono_literals;

Clock test_clock() { return logical_clock(parse_timestamp("2024-03-01T08:00:00.000Z"), 1000ms); }

bool bit_equal(const Plane& a, const Plane& b) {
    return a.values.size() == b.values.size() &&
           std::memcmp(a.values.data(), b.values.data(), a.values.size() * sizeof(double)) == 0;
}

bool bit_equal(const ModelWeights& a, const ModelWeights& b) {
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
        if (!bit_equal(a.layers[l].plane, b.layers[l].plane)) return false;
        if (std::memcmp(&a.layers[l].bias, &b.layers[l].bias, sizeof(double)) != 0) return false;
    }
    return a.layers.size() == b.layers.size();
}

std::vector<double> random_simplex(std::size_t k, std::mt19937_64& rng) {
    std::exponential_distribution<double> e(1.0);
    std::vector<double> a(k);
    double sum = 0.0;
    for (auto& v : a) sum += (v = e(rng));
    for (auto& v : a) v /= sum;
    // force the exact sum onto the last entry
    double head = 0.0;
    for (std::size_t i = 0; i + 1 < k; ++i) head += a[i];
    a.back() = std::max(0.0, 1.0 - head);
    return a;
}

MergeSpec weighted(std::vector<double> alpha) {
    MergeSpec s;
    s.method = MergeMethod::Weighted;
    s.coefficients = std::move(alpha);
    return s;
}

}  // namespace

TEST_SUITE("swarm-learning") {
    TEST_CASE("identical inputs are a fixed point") {
        const auto cfg = small_config();
        std::mt19937_64 rng(1);
        for (std::size_t k = 1; k <= 6; ++k) {
            const auto w = random_weights(cfg, rng, 2.0);
            const std::vector<ModelWeights> sets(k, w);
            CHECK(bit_equal(merge(sets, MergeSpec{}, cfg), w));
            CHECK(bit_equal(merge(sets, weighted(random_simplex(k, rng)), cfg), w));
        }
    }

    TEST_CASE("merged cells stay inside the convex hull") {
        const auto cfg = small_config();
        std::mt19937_64 rng(2);
        for (int trial = 0; trial < 40; ++trial) {
            const std::size_t k = 1 + trial % 5;
            std::vector<ModelWeights> sets;
            for (std::size_t i = 0; i < k; ++i) sets.push_back(random_weights(cfg, rng, std::pow(10.0, trial % 7 - 3)));
            const auto spec = trial % 2 ? weighted(random_simplex(k, rng)) : MergeSpec{};
            const auto out = merge(sets, spec, cfg);
            for (std::size_t l = 0; l < cfg.labels.size(); ++l) {
                for (std::size_t c = 0; c < cfg.cells(); ++c) {
                    double lo = sets[0].layers[l].plane.values[c], hi = lo;
                    for (const auto& s : sets) {
                        lo = std::min(lo, s.layers[l].plane.values[c]);
                        hi = std::max(hi, s.layers[l].plane.values[c]);
                    }
                    const double v = out.layers[l].plane.values[c];
                    if (v < lo || v > hi) FAIL("cell outside hull");
                }
            }
        }
    }

    TEST_CASE("weighted arithmetic") {
        const auto cfg = small_config();
        auto a = ModelWeights::zeros(cfg);
        auto b = ModelWeights::zeros(cfg);
        b.layers[0].plane.values[5] = 4.0;
        b.layers[0].bias = 4.0;
        const std::vector<ModelWeights> sets{a, b};
        const auto out = merge(sets, weighted({0.25, 0.75}), cfg);
        CHECK(out.layers[0].plane.values[5] == 3.0);
        CHECK(out.layers[0].bias == 3.0);
        CHECK(merge(sets, MergeSpec{}, cfg).layers[0].plane.values[5] == 2.0);

        auto no_bias = weighted({0.25, 0.75});
        no_bias.include_bias = false;
        CHECK(merge(sets, no_bias, cfg).layers[0].bias == 0.0);
    }

    TEST_CASE("layer selector isolates the other layers") {
        const auto cfg = small_config();
        std::mt19937_64 rng(3);
        const auto a = random_weights(cfg, rng, 1.0);
        auto b = random_weights(cfg, rng, 1.0);
        MergeSpec spec;
        spec.layer_selector = {"lesion-a"};
        const std::vector<ModelWeights> sets{a, b};
        const auto out = merge(sets, spec, cfg);
        CHECK(bit_equal(out.layers[1].plane, a.layers[1].plane));
        CHECK(bit_equal(out.layers[2].plane, a.layers[2].plane));
        CHECK(out.layers[1].bias == a.layers[1].bias);
        CHECK_FALSE(bit_equal(out.layers[0].plane, a.layers[0].plane));

        // editing b's unselected layers cannot move the selected one
        b.layers[1].plane.values[0] += 100.0;
        b.layers[2].bias -= 7.0;
        const std::vector<ModelWeights> sets2{a, b};
        const auto out2 = merge(sets2, spec, cfg);
        CHECK(bit_equal(out2.layers[0].plane, out.layers[0].plane));
        CHECK(bit_equal(out2.layers[1].plane, a.layers[1].plane));
    }

    TEST_CASE("uniform merge is order independent up to rounding") {
        const auto cfg = small_config();
        std::mt19937_64 rng(4);
        std::vector<ModelWeights> sets;
        for (int i = 0; i < 4; ++i) sets.push_back(random_weights(cfg, rng, 1.0));
        const auto ref = merge(sets, MergeSpec{}, cfg);
        std::sort(sets.begin(), sets.end(), [](const ModelWeights& x, const ModelWeights& y) {
            return x.layers[0].bias < y.layers[0].bias;
        });
        do {
            const auto out = merge(sets, MergeSpec{}, cfg);
            for (std::size_t l = 0; l < cfg.labels.size(); ++l) {
                for (std::size_t c = 0; c < cfg.cells(); ++c) {
                    if (std::abs(out.layers[l].plane.values[c] - ref.layers[l].plane.values[c]) > 1e-14) {
                        FAIL("permutation changed a cell");
                    }
                }
            }
        } while (std::next_permutation(sets.begin(), sets.end(), [](const ModelWeights& x, const ModelWeights& y) {
            return x.layers[0].bias < y.layers[0].bias;
        }));
    }

    TEST_CASE("merge input errors") {
        const auto cfg = small_config();
        CHECK_THROWS_AS(merge(std::vector<ModelWeights>{}, MergeSpec{}, cfg), InvalidInput);
        auto other = cfg;
        other.width = 8;
        const std::vector<ModelWeights> mixed{ModelWeights::zeros(cfg), ModelWeights::zeros(other)};
        CHECK_THROWS_AS(merge(mixed, MergeSpec{}, cfg), InvalidInput);
        const std::vector<ModelWeights> two{ModelWeights::zeros(cfg), ModelWeights::zeros(cfg)};
        CHECK_THROWS_AS(merge(two, weighted({0.5, 0.6}), cfg), InvalidInput);
        CHECK_THROWS_AS(merge(two, weighted({1.0}), cfg), InvalidInput);
        CHECK_THROWS_AS(merge(two, weighted({1.5, -0.5}), cfg), InvalidInput);
        MergeSpec bad;
        bad.layer_selector = {"lesion-z"};
        CHECK_THROWS_AS(merge(two, bad, cfg), UnknownLabel);
        CHECK_THROWS_AS(merge_spec_from_json(Json{{"layer_selector", Json::array()}}), InvalidInput);
        CHECK_THROWS_AS(merge_spec_from_json(Json{{"method", "median"}}), InvalidInput);
        const auto spec = merge_spec_from_json(Json{{"method", "weighted"}, {"coefficients", {0.5, 0.5}}});
        CHECK(to_json(merge_spec_from_json(to_json(spec))).dump() == to_json(spec).dump());
    }

    TEST_CASE("coefficient resolution") {
        std::vector<SwarmNode> four(4);
        CHECK(resolve_coefficients(four, MergeSpec{}) == std::vector<double>(4, 0.25));
        MergeSpec w;
        w.method = MergeMethod::Weighted;
        std::vector<SwarmNode> two{{"a", "m", 1, 1}, {"b", "m", 1, 3}};
        CHECK(resolve_coefficients(two, w) == std::vector<double>{0.25, 0.75});
        two[0].n_local = two[1].n_local = 0;
        CHECK(resolve_coefficients(two, w) == std::vector<double>{0.5, 0.5});
        CHECK(resolve_coefficients(two, weighted({0.1, 0.9})) == std::vector<double>{0.1, 0.9});
    }

    TEST_CASE("swarm round publishes the mean to every node") {
        TempDir dir;
        const auto cfg = small_config();
        ModelRegistry reg(dir.path() / "models", test_clock());
        reg.seed_base("cxr", cfg, ModelWeights::zeros(cfg));
        auto wa = ModelWeights::zeros(cfg), wb = ModelWeights::zeros(cfg);
        std::fill(wa.layers[0].plane.values.begin(), wa.layers[0].plane.values.end(), 1.0);
        std::fill(wb.layers[0].plane.values.begin(), wb.layers[0].plane.values.end(), 3.0);
        reg.publish("cxr", "a", wa, kStatusReady, std::nullopt, {{"c1", "c2"}, {}});
        reg.publish("cxr", "b", wb, kStatusReady, std::nullopt, {{"c3"}, {}});
        CHECK(reg.corrections_since_merge("cxr", "a") == 2);

        SwarmCoordinator coord(reg, dir.path() / "reports");
        const auto res = coord.run_swarm_round("cxr", {"b", "a"}, MergeSpec{});
        REQUIRE(res.published.size() == 2);
        CHECK(res.round == 1);
        CHECK(res.nodes[0].node_id == "a");
        for (const auto& rec : res.published) {
            CHECK(rec.status == kStatusSwarmLearned);
            CHECK(rec.version == 1);
            CHECK(rec.provenance.merge_sources == std::vector<VersionRef>{{"a", 0}, {"b", 0}});
            const auto r = reg.resolve("cxr", rec.owner);
            CHECK(r.record.status == kStatusSwarmLearned);
            for (double v : r.weights->layers[0].plane.values) CHECK(v == 2.0);
            CHECK(reg.corrections_since_merge("cxr", rec.owner) == 0);
        }
        CHECK(std::filesystem::exists(dir.path() / "reports" / "swarm" / "cxr" / "round-1.json"));

        // merging the outputs again reproduces them
        const auto again = coord.run_swarm_round("cxr", {"a", "b"}, MergeSpec{});
        CHECK(again.round == 2);
        CHECK(bit_equal(*reg.resolve("cxr", "a", 2).weights, *reg.resolve("cxr", "a", 1).weights));
    }

    TEST_CASE("swarm round is order invariant bit for bit") {
        const auto cfg = small_config();
        std::mt19937_64 rng(6);
        std::vector<ModelWeights> ws;
        for (int i = 0; i < 4; ++i) ws.push_back(random_weights(cfg, rng, 1.0));
        std::vector<std::string> ids{"n1", "n2", "n3", "n4"};
        std::optional<ModelWeights> first;
        for (int trial = 0; trial < 5; ++trial) {
            TempDir dir;
            ModelRegistry reg(dir.path(), test_clock());
            reg.seed_base("cxr", cfg, ModelWeights::zeros(cfg));
            for (int i = 0; i < 4; ++i) reg.publish("cxr", ids[i], ws[i], kStatusReady, std::nullopt, {});
            auto order = ids;
            std::shuffle(order.begin(), order.end(), rng);
            SwarmCoordinator coord(reg, {});
            coord.run_swarm_round("cxr", order, MergeSpec{});
            const auto merged = *reg.resolve("cxr", "n3").weights;
            if (!first) first = merged;
            CHECK(bit_equal(merged, *first));
        }
    }

    TEST_CASE("single node round keeps its weights") {
        TempDir dir;
        const auto cfg = small_config();
        std::mt19937_64 rng(7);
        ModelRegistry reg(dir.path(), test_clock());
        reg.seed_base("cxr", cfg, ModelWeights::zeros(cfg));
        const auto w = random_weights(cfg, rng, 0.5);
        reg.publish("cxr", "solo", w, kStatusReady, std::nullopt, {});
        SwarmCoordinator coord(reg, {});
        const auto res = coord.run_swarm_round("cxr", {"solo"}, MergeSpec{});
        CHECK(res.published.at(0).version == 1);
        CHECK(res.published.at(0).status == kStatusSwarmLearned);
        CHECK(bit_equal(*reg.resolve("cxr", "solo").weights, w));
    }

    TEST_CASE("round during retraining is rejected everywhere") {
        TempDir dir;
        const auto cfg = small_config();
        ModelRegistry reg(dir.path(), test_clock());
        reg.seed_base("cxr", cfg, ModelWeights::zeros(cfg));
        reg.ensure_lineage("cxr", "a");
        reg.ensure_lineage("cxr", "b");
        reg.set_status("cxr", "b", kStatusRetraining);
        SwarmCoordinator coord(reg, dir.path() / "reports");
        CHECK_THROWS_AS(coord.run_swarm_round("cxr", {"a", "b"}, MergeSpec{}), Conflict);
        CHECK(reg.latest_version("cxr", "a") == 0);
        CHECK(reg.latest_version("cxr", "b") == 0);
        CHECK_FALSE(std::filesystem::exists(dir.path() / "reports" / "swarm"));
        CHECK_THROWS_AS(coord.run_swarm_round("cxr", {"a", "ghost"}, MergeSpec{}), NotFound);
        CHECK_THROWS_AS(coord.run_swarm_round("cxr", {"a", "a"}, MergeSpec{}), InvalidInput);
        CHECK_THROWS_AS(coord.run_swarm_round("cxr", {}, MergeSpec{}), InvalidInput);
        CHECK_THROWS_AS(coord.run_swarm_round("cxr", {"a"}, weighted({0.5, 0.5})), InvalidInput);
    }

    TEST_CASE("a round reads no private data") {
        TempDir dir;
        ModelConfig cfg;
        ModelRegistry reg(dir.path() / "models", test_clock());
        reg.seed_base("cxr", cfg, ModelWeights::zeros(cfg));
        std::vector<std::unique_ptr<AnnotationStore>> stores;
        for (const auto* user : {"a", "b"}) {
            stores.push_back(std::make_unique<AnnotationStore>(dir.path() / "sites" / user, test_clock()));
            auto& store = *stores.back();
            store.add_to_pool(user, PoolKind::TP, {uniform_image(64, 64, 200), "lesion-a", 1, std::nullopt});
            store.add_to_pool(user, PoolKind::TN, {uniform_image(64, 64, 10), "lesion-a", 0, std::nullopt});
            CorrectionRecord rec;
            rec.correction_id = std::string(user) + "-1";
            rec.user_id = user;
            rec.model = "cxr";
            rec.study_id = "s";
            rec.label = "lesion-a";
            rec.disposition = Disposition::Added;
            rec.corrected_box = BoundingBox::from_extent(3, 3, 20, 20);
            rec.image = uniform_image(64, 64, 120);
            store.append_correction(rec);
            RetrainingEngine(reg, store, {}).retrain_batch("cxr", user);
        }
        std::vector<std::size_t> before;
        for (const auto& s : stores) before.push_back(s->read_count());
        SwarmCoordinator coord(reg, dir.path() / "reports");
        coord.run_swarm_round("cxr", {"a", "b"}, MergeSpec{});
        for (std::size_t i = 0; i < stores.size(); ++i) CHECK(stores[i]->read_count() == before[i]);
    }
}
