#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "radloop/annotation_store.hpp"
#include "radloop/api_service.hpp"
#include "radloop/clock.hpp"
#include "radloop/errors.hpp"
#include "radloop/experiment.hpp"
#include "radloop/model_registry.hpp"
#include "radloop/swarm.hpp"

namespace fs = std::filesystem;
using namespace radloop;

namespace {

// runs/<timestamp>/ with a name that sorts and survives any filesystem
std::string run_stamp() {
    std::string t = format_timestamp(std::chrono::system_clock::now());
    std::string out;
    for (char c : t) {
        if (c != '-' && c != ':') out += c;
    }
    return out;
}

std::string claims_text(const sim::ExperimentReport& report) {
    std::string out;
    for (const auto& c : sim::check_swarm_claims(report)) {
        out += (c.pass ? "PASS " : "FAIL ") + c.name + ": " + c.detail + "\n";
    }
    return out;
}

int cmd_serve(const std::optional<std::string>& config_file, const std::optional<std::string>& host,
              std::optional<int> port, const std::optional<std::string>& data_dir, std::optional<long> n_batch,
              std::optional<long> t_max_ms, bool sim_mode, bool lenient) {
    auto cfg = api::load_service_config(config_file ? std::optional<fs::path>(*config_file) : std::nullopt);
    if (host) cfg.host = *host;
    if (port) cfg.port = *port;
    if (data_dir) cfg.data_dir = *data_dir;
    if (n_batch) cfg.batch.n_batch = static_cast<std::size_t>(*n_batch);
    if (t_max_ms) cfg.batch.t_max = std::chrono::milliseconds(*t_max_ms);
    if (sim_mode) cfg.sim_mode = true;
    if (lenient) cfg.strict = false;
    api::ApiService service(cfg);
    api::serve(service);
    return 0;
}

int cmd_simulate(const std::optional<std::string>& config_file, std::optional<std::uint64_t> seed,
                 const std::string& runs_dir, const std::optional<std::string>& out_dir) {
    sim::ExperimentConfig cfg;
    if (config_file) {
        Json j;
        try {
            j = Json::parse(read_file(*config_file));
        } catch (const nlohmann::json::exception& e) {
            throw InvalidInput(*config_file + ": " + e.what());
        }
        cfg = sim::experiment_config_from_json(j);
    }
    if (seed) cfg.seed = *seed;
    cfg.validate();

    const fs::path dir = out_dir ? fs::path(*out_dir) : fs::path(runs_dir) / run_stamp();
    fs::create_directories(dir);
    const fs::path work = dir / "work";
    const auto report = sim::run_experiment(cfg, work);
    fs::remove_all(work);

    const std::string table = sim::summary_table(report) + "\n" + claims_text(report);
    write_file_atomic(dir / "report.json", to_json(report).dump(2) + "\n");
    write_file_atomic(dir / "summary.txt", table);
    std::cout << table << "report: " << (dir / "report.json").string() << "\n";
    return 0;
}

int cmd_merge(const std::string& data_dir, const std::string& model, const std::string& method,
              std::vector<std::string> nodes, const std::vector<std::string>& layers, bool no_bias) {
    ModelRegistry registry(fs::path(data_dir) / "registry");
    if (!registry.has_model(model)) throw NotFound("unknown model '" + model + "'");
    if (nodes.empty()) {
        for (const auto& o : registry.owners(model)) {
            if (o != kBaseOwner) nodes.push_back(o);
        }
    }
    MergeSpec spec;
    spec.method = merge_method_from_string(method);
    spec.layer_selector = layers;
    spec.include_bias = !no_bias;
    SwarmCoordinator swarm(registry, fs::path(data_dir) / "reports");
    const auto result = swarm.run_swarm_round(model, nodes, spec);
    Json out;
    out["round"] = result.round;
    out["coefficients"] = result.coefficients;
    Json published = Json::array();
    for (const auto& rec : result.published) published.push_back(to_json(rec));
    out["published"] = std::move(published);
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_report(const std::string& run_dir) {
    const fs::path file = fs::path(run_dir) / "report.json";
    if (!fs::exists(file)) throw NotFound("no report.json in " + run_dir);
    Json j;
    try {
        j = Json::parse(read_file(file));
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(file.string() + ": " + e.what());
    }
    const auto report = sim::experiment_report_from_json(j);
    std::cout << sim::summary_table(report) << "\n" << claims_text(report);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"radloop: human-in-the-loop radiology model service and simulator"};
    app.require_subcommand(1);

    auto* serve = app.add_subcommand("serve", "start the HTTP service");
    std::optional<std::string> serve_config, host, data_dir;
    std::optional<int> port;
    std::optional<long> n_batch, t_max_ms;
    bool sim_mode = false, lenient = false;
    serve->add_option("--config", serve_config, "service config JSON");
    serve->add_option("--host", host, "listen address");
    serve->add_option("--port", port, "listen port")->check(CLI::Range(0, 65535));
    serve->add_option("--data-dir", data_dir, "registry, stores and reports");
    serve->add_option("--n-batch", n_batch, "corrections per batch")->check(CLI::PositiveNumber);
    serve->add_option("--t-max-ms", t_max_ms, "oldest pending correction age that fires a batch")
        ->check(CLI::NonNegativeNumber);
    serve->add_flag("--sim-mode", sim_mode, "run batches inside the request that fires them");
    serve->add_flag("--lenient", lenient, "accept unknown fields and default image dimensions");

    auto* simulate = app.add_subcommand("simulate", "run the isolated/swarm/centralized experiment");
    std::optional<std::string> sim_config, out_dir;
    std::optional<std::uint64_t> seed;
    std::string runs_dir = "runs";
    simulate->add_option("--config", sim_config, "experiment config JSON");
    simulate->add_option("--seed", seed, "master seed");
    simulate->add_option("--runs-dir", runs_dir, "parent of runs/<timestamp>/");
    simulate->add_option("--out", out_dir, "exact output directory instead of a timestamped one");

    auto* merge = app.add_subcommand("merge", "run one swarm round over a data directory");
    std::string merge_dir = "data", model, method = "additive";
    std::vector<std::string> nodes, layers;
    bool no_bias = false;
    merge->add_option("--data-dir", merge_dir, "service data directory");
    merge->add_option("--model", model, "model name")->required();
    merge->add_option("--method", method, "additive or weighted")->check(CLI::IsMember({"additive", "weighted"}));
    merge->add_option("--nodes", nodes, "lineage owners (default: all personal lineages)")->delimiter(',');
    merge->add_option("--layers", layers, "labels to merge (default: all)")->delimiter(',');
    merge->add_flag("--no-bias", no_bias, "leave biases unmerged");

    auto* report = app.add_subcommand("report", "print the summary of a finished run");
    std::string run_dir;
    report->add_option("--run", run_dir, "run directory holding report.json")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*serve) return cmd_serve(serve_config, host, port, data_dir, n_batch, t_max_ms, sim_mode, lenient);
        if (*simulate) return cmd_simulate(sim_config, seed, runs_dir, out_dir);
        if (*merge) return cmd_merge(merge_dir, model, method, nodes, layers, no_bias);
        if (*report) return cmd_report(run_dir);
    } catch (const Error& e) {
        std::fprintf(stderr, "error (%s): %s\n", e.code(), e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
