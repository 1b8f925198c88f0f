#include "radloop/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <numeric>

#include "radloop/annotation_store.hpp"
#include "radloop/errors.hpp"
#include "radloop/model_registry.hpp"
#include "radloop/retraining.hpp"

namespace radloop::sim {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kTestSalt = 0x7e57;
constexpr std::uint64_t kPretrainSalt = 0xba5e;
constexpr std::uint64_t kProfileSalt = 0x9e0f;

// logical time keeps every timestamp in the run reproducible
constexpr std::chrono::milliseconds kClockStep{1000};

TimePoint clock_origin() { return parse_timestamp("2024-01-01T00:00:00.000Z"); }

std::uint64_t node_study_seed(std::uint64_t master, int node, int k) {
    return mix_seed(mix_seed(master, static_cast<std::uint64_t>(node) + 1), static_cast<std::uint64_t>(k));
}

bool known_arm(const std::string& a) { return a == kArmIsolated || a == kArmSwarm || a == kArmCentralized; }

std::string node_name(int i) { return "node-" + std::to_string(i + 1); }

}  // namespace

void ExperimentConfig::validate() const {
    model_config.validate();
    if (model_config.labels.size() > 4) throw InvalidInput("the synthetic generator supports at most four labels");
    check_path_component(model, "model");
    if (nodes < 1) throw InvalidInput("nodes must be >= 1");
    if (studies_per_node < 0) throw InvalidInput("studies_per_node must be >= 0");
    if (studies_per_step < 1) throw InvalidInput("studies_per_step must be >= 1");
    if (test_size < 1) throw InvalidInput("test_size must be >= 1");
    if (swarm_period < 1) throw InvalidInput("swarm_period must be >= 1");
    if (pretrain_studies < 0 || pretrain_epochs < 0) throw InvalidInput("pretrain counts must be >= 0");
    if (arms.empty()) throw InvalidInput("at least one arm is required");
    for (const auto& a : arms) {
        if (!known_arm(a)) throw InvalidInput("unknown arm '" + a + "'");
    }
    merge.validate(model_config, static_cast<std::size_t>(nodes));
    if (!profiles.empty() && profiles.size() != static_cast<std::size_t>(nodes)) {
        throw InvalidInput("expected " + std::to_string(nodes) + " profiles, got " + std::to_string(profiles.size()));
    }
    std::vector<std::string> ids;
    for (const auto& p : profiles) {
        check_path_component(p.user_id, "user_id");
        if (p.user_id == kCentralOwner || p.user_id == kBaseOwner) {
            throw InvalidInput("profile user_id '" + p.user_id + "' is reserved");
        }
        p.validate(model_config);
        ids.push_back(p.user_id);
    }
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw InvalidInput("duplicate profile user_id");
}

std::vector<RadiologistProfile> ExperimentConfig::default_profiles() const {
    std::vector<RadiologistProfile> out;
    for (int i = 0; i < nodes; ++i) {
        RadiologistProfile p;
        p.user_id = node_name(i);
        p.rng_seed = mix_seed(mix_seed(seed, kProfileSalt), static_cast<std::uint64_t>(i));
        if (i == 0 && model_config.labels.size() > 1) p.blind_spot.insert(model_config.labels[1]);
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<RadiologistProfile> ExperimentConfig::effective_profiles() const {
    return profiles.empty() ? default_profiles() : profiles;
}

Json to_json(const RadiologistProfile& p) {
    Json j;
    j["user_id"] = p.user_id;
    j["correction_rate"] = p.correction_rate;
    j["box_jitter_sigma"] = p.box_jitter_sigma;
    j["blind_spot"] = std::vector<std::string>(p.blind_spot.begin(), p.blind_spot.end());
    j["rng_seed"] = p.rng_seed;
    return j;
}

RadiologistProfile profile_from_json(const Json& j) {
    RadiologistProfile p;
    p.user_id = require<std::string>(j, "user_id");
    if (j.contains("correction_rate")) p.correction_rate = require<double>(j, "correction_rate");
    if (j.contains("box_jitter_sigma")) p.box_jitter_sigma = require<double>(j, "box_jitter_sigma");
    if (j.contains("blind_spot")) {
        const auto labels = require<std::vector<std::string>>(j, "blind_spot");
        p.blind_spot.insert(labels.begin(), labels.end());
    }
    if (j.contains("rng_seed")) p.rng_seed = require<std::uint64_t>(j, "rng_seed");
    return p;
}

Json to_json(const ExperimentConfig& cfg) {
    Json j;
    j["seed"] = cfg.seed;
    j["model"] = cfg.model;
    j["nodes"] = cfg.nodes;
    j["studies_per_node"] = cfg.studies_per_node;
    j["studies_per_step"] = cfg.studies_per_step;
    j["test_size"] = cfg.test_size;
    j["swarm_period"] = cfg.swarm_period;
    j["arms"] = cfg.arms;
    j["merge"] = to_json(cfg.merge);
    j["model_config"] = to_json(cfg.model_config);
    j["pretrain_studies"] = cfg.pretrain_studies;
    j["pretrain_epochs"] = cfg.pretrain_epochs;
    Json profiles = Json::array();
    for (const auto& p : cfg.effective_profiles()) profiles.push_back(to_json(p));
    j["profiles"] = std::move(profiles);
    return j;
}

ExperimentConfig experiment_config_from_json(const Json& j) {
    if (!j.is_object()) throw InvalidInput("experiment config must be an object");
    ExperimentConfig cfg;
    if (j.contains("seed")) cfg.seed = require<std::uint64_t>(j, "seed");
    if (j.contains("model")) cfg.model = require<std::string>(j, "model");
    if (j.contains("nodes")) cfg.nodes = require<int>(j, "nodes");
    if (j.contains("studies_per_node")) cfg.studies_per_node = require<int>(j, "studies_per_node");
    if (j.contains("studies_per_step")) cfg.studies_per_step = require<int>(j, "studies_per_step");
    if (j.contains("test_size")) cfg.test_size = require<int>(j, "test_size");
    if (j.contains("swarm_period")) cfg.swarm_period = require<int>(j, "swarm_period");
    if (j.contains("arms")) cfg.arms = require<std::vector<std::string>>(j, "arms");
    if (j.contains("merge")) cfg.merge = merge_spec_from_json(j["merge"]);
    if (j.contains("model_config")) cfg.model_config = config_from_json(j["model_config"]);
    if (j.contains("pretrain_studies")) cfg.pretrain_studies = require<int>(j, "pretrain_studies");
    if (j.contains("pretrain_epochs")) cfg.pretrain_epochs = require<int>(j, "pretrain_epochs");
    if (j.contains("profiles")) {
        if (!j["profiles"].is_array()) throw InvalidInput("field 'profiles' must be an array");
        for (const auto& p : j["profiles"]) cfg.profiles.push_back(profile_from_json(p));
    }
    cfg.validate();
    return cfg;
}

double ArmReport::mean_auc() const {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& node : nodes) {
        for (const auto& m : node.labels) {
            if (m.auc) {
                sum += *m.auc;
                ++n;
            }
        }
    }
    return n ? sum / static_cast<double>(n) : 0.0;
}

double ArmReport::mean_iou() const {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& node : nodes) {
        for (const auto& m : node.labels) {
            sum += m.mean_iou;
            ++n;
        }
    }
    return n ? sum / static_cast<double>(n) : 0.0;
}

std::optional<double> ArmReport::label_auc(const std::string& node_id, const std::string& label) const {
    for (const auto& node : nodes) {
        if (node.node_id != node_id && node.node_id != kCentralOwner) continue;
        for (const auto& m : node.labels) {
            if (m.label == label) return m.auc;
        }
    }
    throw NotFound("no metrics for " + node_id + "/" + label + " in arm " + arm);
}

const ArmReport& ExperimentReport::arm(const std::string& name) const {
    for (const auto& a : arms) {
        if (a.arm == name) return a;
    }
    throw NotFound("arm '" + name + "' was not run");
}

bool ExperimentReport::has_arm(const std::string& name) const {
    return std::any_of(arms.begin(), arms.end(), [&](const ArmReport& a) { return a.arm == name; });
}

namespace {

Json metrics_json(const NodeMetrics& n) {
    Json j;
    j["node_id"] = n.node_id;
    j["version"] = n.version;
    Json labels = Json::array();
    for (const auto& m : n.labels) {
        Json l;
        l["label"] = m.label;
        l["auc"] = m.auc ? Json(*m.auc) : Json(nullptr);
        l["mean_iou"] = m.mean_iou;
        l["counts"] = {{"tp", m.tp}, {"fp", m.fp}, {"fn", m.fn}, {"tn", m.tn}};
        labels.push_back(std::move(l));
    }
    j["labels"] = std::move(labels);
    return j;
}

std::string arm_definition(const std::string& arm) {
    if (arm == kArmIsolated) return "per-node personalization only";
    if (arm == kArmSwarm) return "per-node personalization plus a merge round every swarm_period batch steps";
    return "one model consuming every node's corrections";
}

}  // namespace

Json to_json(const ExperimentReport& r) {
    Json j;
    j["config"] = to_json(r.config);
    j["base"] = metrics_json(r.base);
    Json arms = Json::array();
    for (const auto& a : r.arms) {
        Json aj;
        aj["arm"] = a.arm;
        aj["definition"] = arm_definition(a.arm);
        aj["mean_auc"] = a.mean_auc();
        aj["mean_iou"] = a.mean_iou();
        aj["batches"] = a.batches;
        aj["swarm_rounds"] = a.swarm_rounds;
        aj["cross_node_reads"] = a.cross_node_reads;
        aj["swarm_round_store_reads"] = a.swarm_round_store_reads;
        Json nodes = Json::array();
        for (const auto& n : a.nodes) nodes.push_back(metrics_json(n));
        aj["nodes"] = std::move(nodes);
        Json counts = Json::array();
        for (const auto& c : a.corrections) {
            counts.push_back({{"node_id", c.node_id},
                              {"label", c.label},
                              {"emitted", c.emitted},
                              {"suppressed_blind", c.suppressed_blind},
                              {"suppressed_rate", c.suppressed_rate}});
        }
        aj["corrections"] = std::move(counts);
        arms.push_back(std::move(aj));
    }
    j["arms"] = std::move(arms);
    return j;
}

namespace {

NodeMetrics metrics_from_json(const Json& j) {
    NodeMetrics n;
    n.node_id = require<std::string>(j, "node_id");
    n.version = require<long>(j, "version");
    for (const auto& l : j.at("labels")) {
        LabelMetrics m;
        m.label = require<std::string>(l, "label");
        if (!l.at("auc").is_null()) m.auc = require<double>(l, "auc");
        m.mean_iou = require<double>(l, "mean_iou");
        const auto& c = l.at("counts");
        m.tp = require<std::size_t>(c, "tp");
        m.fp = require<std::size_t>(c, "fp");
        m.fn = require<std::size_t>(c, "fn");
        m.tn = require<std::size_t>(c, "tn");
        n.labels.push_back(std::move(m));
    }
    return n;
}

}  // namespace

ExperimentReport experiment_report_from_json(const Json& j) {
    if (!j.is_object() || !j.contains("config") || !j.contains("arms")) {
        throw InvalidInput("not an experiment report");
    }
    try {
        ExperimentReport r;
        r.config = experiment_config_from_json(j["config"]);
        r.base = metrics_from_json(j.at("base"));
        for (const auto& aj : j["arms"]) {
            ArmReport a;
            a.arm = require<std::string>(aj, "arm");
            a.batches = require<std::size_t>(aj, "batches");
            a.swarm_rounds = require<std::size_t>(aj, "swarm_rounds");
            a.cross_node_reads = require<std::size_t>(aj, "cross_node_reads");
            a.swarm_round_store_reads = require<std::size_t>(aj, "swarm_round_store_reads");
            for (const auto& n : aj.at("nodes")) a.nodes.push_back(metrics_from_json(n));
            for (const auto& c : aj.at("corrections")) {
                CorrectionCounts cc;
                cc.node_id = require<std::string>(c, "node_id");
                cc.label = require<std::string>(c, "label");
                cc.emitted = require<std::size_t>(c, "emitted");
                cc.suppressed_blind = require<std::size_t>(c, "suppressed_blind");
                cc.suppressed_rate = require<std::size_t>(c, "suppressed_rate");
                a.corrections.push_back(std::move(cc));
            }
            r.arms.push_back(std::move(a));
        }
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(std::string("malformed experiment report: ") + e.what());
    }
}

std::vector<ClaimCheck> check_swarm_claims(const ExperimentReport& r) {
    std::vector<ClaimCheck> out;
    char buf[256];
    const bool iso = r.has_arm(kArmIsolated), sw = r.has_arm(kArmSwarm), cen = r.has_arm(kArmCentralized);
    if (sw && iso) {
        const double s = r.arm(kArmSwarm).mean_auc(), i = r.arm(kArmIsolated).mean_auc();
        std::snprintf(buf, sizeof buf, "swarm %.4f vs isolated %.4f (slack %.2f)", s, i, kSwarmVsIsolatedSlack);
        out.push_back({"swarm >= isolated - slack", s >= i - kSwarmVsIsolatedSlack, buf});
    }
    if (sw && cen) {
        const double s = r.arm(kArmSwarm).mean_auc(), c = r.arm(kArmCentralized).mean_auc();
        std::snprintf(buf, sizeof buf, "swarm %.4f vs centralized %.4f (tolerance %.2f)", s, c,
                      kSwarmVsCentralTolerance);
        out.push_back({"swarm within tolerance of centralized", std::abs(s - c) <= kSwarmVsCentralTolerance, buf});
    }
    if (sw && iso) {
        for (const auto& p : r.config.effective_profiles()) {
            for (const auto& label : p.blind_spot) {
                const auto si = r.arm(kArmIsolated).label_auc(p.user_id, label);
                const auto ss = r.arm(kArmSwarm).label_auc(p.user_id, label);
                const bool pass = si && ss && *ss > *si;
                std::snprintf(buf, sizeof buf, "%s/%s swarm %.4f vs isolated %.4f", p.user_id.c_str(), label.c_str(),
                              ss.value_or(-1.0), si.value_or(-1.0));
                out.push_back({"blind spot " + p.user_id + "/" + label + " swarm > isolated", pass, buf});
            }
        }
    }
    return out;
}

std::string summary_table(const ExperimentReport& r) {
    std::string out;
    char line[256];
    std::snprintf(line, sizeof line, "%-12s %-8s %-10s %8s %8s %6s %6s %6s %6s\n", "arm", "node", "label", "auc",
                  "iou", "tp", "fp", "fn", "tn");
    out += line;
    auto rows = [&](const std::string& arm, const NodeMetrics& n) {
        for (const auto& m : n.labels) {
            char auc_text[32];
            if (m.auc) {
                std::snprintf(auc_text, sizeof auc_text, "%.4f", *m.auc);
            } else {
                std::snprintf(auc_text, sizeof auc_text, "n/a");
            }
            std::snprintf(line, sizeof line, "%-12s %-8s %-10s %8s %8.4f %6zu %6zu %6zu %6zu\n", arm.c_str(),
                          n.node_id.c_str(), m.label.c_str(), auc_text, m.mean_iou, m.tp, m.fp, m.fn, m.tn);
            out += line;
        }
    };
    rows("base", r.base);
    for (const auto& a : r.arms) {
        for (const auto& n : a.nodes) rows(a.arm, n);
    }
    out += "\n";
    std::snprintf(line, sizeof line, "%-12s %10s %10s %8s %8s\n", "arm", "mean_auc", "mean_iou", "batches", "rounds");
    out += line;
    for (const auto& a : r.arms) {
        std::snprintf(line, sizeof line, "%-12s %10.4f %10.4f %8zu %8zu\n", a.arm.c_str(), a.mean_auc(), a.mean_iou(),
                      a.batches, a.swarm_rounds);
        out += line;
    }
    return out;
}

ModelWeights pretrain_base(const ExperimentConfig& cfg) {
    const auto& mc = cfg.model_config;
    ModelWeights w = ModelWeights::zeros(mc);
    if (cfg.pretrain_studies == 0 || cfg.pretrain_epochs == 0) return w;
    std::vector<TrainingExample> examples;
    const std::uint64_t base_seed = mix_seed(cfg.seed, kPretrainSalt);
    for (int k = 0; k < cfg.pretrain_studies; ++k) {
        const auto truth = gen_synthetic_study(mix_seed(base_seed, static_cast<std::uint64_t>(k)), mc);
        for (auto& ex : supervised_examples(truth, mc)) examples.push_back(std::move(ex));
    }
    for (int e = 0; e < cfg.pretrain_epochs; ++e) w = sgd_step(w, examples, mc);
    return w;
}

std::vector<StudyTruth> test_set(const ExperimentConfig& cfg) {
    std::vector<StudyTruth> out;
    const std::uint64_t test_seed = mix_seed(cfg.seed, kTestSalt);
    for (int k = 0; k < cfg.test_size; ++k) {
        out.push_back(gen_synthetic_study(mix_seed(test_seed, static_cast<std::uint64_t>(k)), cfg.model_config));
    }
    return out;
}

NodeMetrics evaluate(const ModelWeights& weights, const ModelConfig& cfg, const std::vector<StudyTruth>& test,
                     const std::string& node_id, long version) {
    const std::size_t n_labels = cfg.labels.size();
    std::vector<std::vector<double>> scores(n_labels);
    std::vector<std::vector<int>> truth(n_labels);
    std::vector<double> iou_sum(n_labels, 0.0);
    std::vector<std::size_t> present(n_labels, 0);
    NodeMetrics out;
    out.node_id = node_id;
    out.version = version;
    out.labels.resize(n_labels);

    for (const auto& study : test) {
        const auto result = infer(weights, study.image, cfg);
        for (std::size_t l = 0; l < n_labels; ++l) {
            const auto& f = result.findings[l];
            const auto& lt = study.labels[l];
            scores[l].push_back(f.probability);
            truth[l].push_back(lt.present ? 1 : 0);
            auto& m = out.labels[l];
            const bool detected = f.detected(cfg.theta_det);
            if (detected && lt.present) ++m.tp;
            if (detected && !lt.present) ++m.fp;
            if (!detected && lt.present) ++m.fn;
            if (!detected && !lt.present) ++m.tn;
            if (lt.present) {
                ++present[l];
                if (detected && f.box) iou_sum[l] += iou(*f.box, *lt.box);
            }
        }
    }
    for (std::size_t l = 0; l < n_labels; ++l) {
        auto& m = out.labels[l];
        m.label = cfg.labels[l];
        try {
            m.auc = auc(scores[l], truth[l]);
        } catch (const UndefinedMetric&) {
            m.auc.reset();
        }
        m.mean_iou = present[l] ? iou_sum[l] / static_cast<double>(present[l]) : 0.0;
    }
    return out;
}

namespace {

struct Site {
    std::string node_id;
    std::unique_ptr<AnnotationStore> store;
    std::unique_ptr<RetrainingEngine> engine;
};

ArmReport run_arm(const ExperimentConfig& cfg, const std::string& arm, const ModelWeights& base,
                  const std::vector<StudyTruth>& test, const fs::path& dir) {
    const auto& mc = cfg.model_config;
    const auto profiles = cfg.effective_profiles();
    const bool central = arm == kArmCentralized;
    const bool swarm = arm == kArmSwarm;

    fs::remove_all(dir);
    ModelRegistry registry(dir / "registry", logical_clock(clock_origin(), kClockStep));
    registry.seed_base(cfg.model, mc, base);
    const fs::path reports = dir / "reports";

    // one private store per site; the centralized arm pools everything at one site
    std::vector<Site> sites;
    auto make_site = [&](const std::string& id) {
        Site s;
        s.node_id = id;
        s.store = std::make_unique<AnnotationStore>(dir / "sites" / id, logical_clock(clock_origin(), kClockStep));
        s.engine = std::make_unique<RetrainingEngine>(registry, *s.store, reports);
        registry.ensure_lineage(cfg.model, id);
        sites.push_back(std::move(s));
    };
    if (central) {
        make_site(kCentralOwner);
    } else {
        for (const auto& p : profiles) make_site(p.user_id);
    }
    SwarmCoordinator coordinator(registry, reports);

    ArmReport report;
    report.arm = arm;
    for (const auto& p : profiles) {
        for (const auto& label : mc.labels) report.corrections.push_back(CorrectionCounts{p.user_id, label});
    }

    std::vector<std::mt19937_64> rngs;
    for (const auto& p : profiles) rngs.emplace_back(p.rng_seed);

    auto total_reads = [&](std::size_t skip) {
        std::size_t n = 0;
        for (std::size_t s = 0; s < sites.size(); ++s) {
            if (s != skip) n += sites[s].store->read_count();
        }
        return n;
    };
    auto retrain = [&](Site& site) {
        // sim mode: T_max = 0, so any pending correction fires the batch
        if (site.store->pending_count(site.node_id, cfg.model) == 0) return;
        const auto r = site.engine->retrain_batch(cfg.model, site.node_id);
        if (r.new_version) ++report.batches;
    };

    const int steps = (cfg.studies_per_node + cfg.studies_per_step - 1) / cfg.studies_per_step;
    for (int step = 0; step < steps; ++step) {
        const int first = step * cfg.studies_per_step;
        const int last = std::min(cfg.studies_per_node, first + cfg.studies_per_step);
        for (std::size_t i = 0; i < profiles.size(); ++i) {
            const std::size_t site_index = central ? 0 : i;
            Site& site = sites[site_index];
            const std::size_t others_before = central ? 0 : total_reads(site_index);

            for (int k = first; k < last; ++k) {
                const auto truth = gen_synthetic_study(node_study_seed(cfg.seed, static_cast<int>(i), k), mc);
                const auto resolved = registry.resolve(cfg.model, site.node_id);
                auto result = infer(*resolved.weights, truth.image, mc);
                result.model = cfg.model;
                result.model_version = resolved.record.version;
                result.status = resolved.record.status;
                const std::string study_id = profiles[i].user_id + "-s" + std::to_string(k);
                auto outcome = simulate_radiologist(profiles[i], result, truth, mc, study_id, study_id, rngs[i]);
                for (std::size_t l = 0; l < mc.labels.size(); ++l) {
                    auto& c = report.corrections[i * mc.labels.size() + l];
                    switch (outcome.per_label[l]) {
                        case LabelOutcome::Emitted: ++c.emitted; break;
                        case LabelOutcome::SuppressedBlind: ++c.suppressed_blind; break;
                        case LabelOutcome::SuppressedRate: ++c.suppressed_rate; break;
                        case LabelOutcome::Accepted: break;
                    }
                }
                for (auto& rec : outcome.corrections) {
                    rec.user_id = site.node_id;
                    site.store->append_correction(std::move(rec));
                }
                for (auto& a : outcome.admissions) site.store->add_to_pool(site.node_id, a.kind, std::move(a.example));
            }
            if (!central) {
                retrain(site);
                report.cross_node_reads += total_reads(site_index) - others_before;
            }
        }
        if (central) retrain(sites[0]);

        if (swarm && (step + 1) % cfg.swarm_period == 0) {
            const std::size_t before = total_reads(sites.size());
            std::vector<std::string> ids;
            for (const auto& s : sites) ids.push_back(s.node_id);
            coordinator.run_swarm_round(cfg.model, ids, cfg.merge);
            ++report.swarm_rounds;
            report.swarm_round_store_reads += total_reads(sites.size()) - before;
        }
    }

    for (const auto& s : sites) {
        const auto resolved = registry.resolve(cfg.model, s.node_id);
        report.nodes.push_back(evaluate(*resolved.weights, mc, test, s.node_id, resolved.record.version));
    }
    return report;
}

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig& cfg, const fs::path& work_dir) {
    cfg.validate();
    ExperimentReport report;
    report.config = cfg;
    const auto base = pretrain_base(cfg);
    const auto test = test_set(cfg);
    report.base = evaluate(base, cfg.model_config, test, kBaseOwner, 0);
    for (const auto& arm : cfg.arms) report.arms.push_back(run_arm(cfg, arm, base, test, work_dir / arm));
    return report;
}

std::vector<CorrectionCounts> blind_spot_report(const ExperimentReport& r, const std::string& arm) {
    return r.arm(arm).corrections;
}

}  // namespace radloop::sim
