#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "radloop/annotation_store.hpp"
#include "radloop/clock.hpp"
#include "radloop/model_registry.hpp"
#include "radloop/retraining.hpp"
#include "radloop/serialization.hpp"
#include "radloop/swarm.hpp"
#include "radloop/worklist.hpp"

namespace httplib {
class Server;
}

namespace radloop::api {

inline constexpr const char* kUserHeader = "X-User-Id";

/// Body of POST /model-update. The first twelve fields are the published
/// request schema, in its order; the rest are extensions.
struct ModelUpdateRequest {
    std::string annotation_text;
    std::string image;  // Base64
    std::string model;
    long model_version = 0;
    int x1 = 0, x2 = 0, x3 = 0, x4 = 0;
    int y1 = 0, y2 = 0, y3 = 0, y4 = 0;
    std::optional<int> width;
    std::optional<int> height;
    std::optional<std::string> disposition;
    std::optional<std::string> original_label;
    std::optional<std::string> study_id;

    BoundingBox box() const { return BoundingBox{x1, y1, x2, y2, x3, y3, x4, y4}; }
};

/// Body of GET /bounding-box (inference form).
struct InferenceRequest {
    std::string image;
    std::string model;
    std::optional<long> model_version;
    std::optional<int> width;
    std::optional<int> height;
};

// Strict parsing rejects unknown fields and requires width/height.
ModelUpdateRequest parse_model_update(const Json& j, bool strict);
InferenceRequest parse_inference(const Json& j, bool strict);
Json to_json(const ModelUpdateRequest& r);
Json to_json(const InferenceRequest& r);

Json envelope(Json data, const std::string& status);

/// Decodes the Base64 pixels and checks them against the dimensions.
ImagePayload decode_image(const std::string& base64, int width, int height);

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::filesystem::path data_dir = "data";
    BatchPolicy batch;
    // run batches inside the request that fires them (T_max = 0 semantics)
    bool sim_mode = false;
    bool strict = true;
    // model seeded with zero weights when the registry is empty; "" seeds nothing
    std::string default_model = "cxr-lesion";
    ModelConfig model_config;
    std::chrono::milliseconds tick = std::chrono::milliseconds(500);
};

Json to_json(const ServiceConfig& cfg);
/// Missing keys keep their defaults.
ServiceConfig service_config_from_json(const Json& j);
/// RADLOOP_HOST, RADLOOP_PORT, RADLOOP_DATA_DIR, RADLOOP_N_BATCH,
/// RADLOOP_T_MAX_MS, RADLOOP_SIM_MODE, RADLOOP_STRICT, RADLOOP_MODEL.
void apply_env_overrides(ServiceConfig& cfg);
ServiceConfig load_service_config(const std::optional<std::filesystem::path>& file);

struct Request {
    std::string method;
    std::string path;
    std::map<std::string, std::string> headers;  // names as sent
    std::string body;

    std::optional<std::string> header(const std::string& name) const;
};

struct Response {
    int status = 200;
    std::string body;

    Json json() const { return Json::parse(body); }
};

/// The HTTP surface over registry, store, retraining, swarm and worklist.
/// `handle` is transport-free; `bind` mounts it on an httplib server.
class ApiService {
public:
    explicit ApiService(ServiceConfig cfg, Clock clock = system_clock());
    ~ApiService();

    ApiService(const ApiService&) = delete;
    ApiService& operator=(const ApiService&) = delete;

    Response handle(const Request& req);
    void bind(httplib::Server& server);

    /// Blocks until no batch is queued or running.
    void wait_idle();
    /// One pass of the age trigger (the worker calls it every tick).
    std::size_t fire_aged_batches();

    ModelRegistry& registry() { return *registry_; }
    AnnotationStore& store() { return *store_; }
    Worklist& worklist() { return *worklist_; }
    const ServiceConfig& config() const { return cfg_; }
    std::vector<RetrainReport> batch_reports() const;

private:
    Response bounding_box_list(const Request& req);
    Response bounding_box_infer(const Request& req, const Json& body);
    Response model_update(const Request& req, const Json& body);
    Response worklist_get(const Request& req);
    Response worklist_post(const Request& req, const Json& body);
    Response worklist_assign(const Json& body);
    Response worklist_read(const std::string& study_id);
    Response swarm_merge(const Json& body);
    Response model_versions(const std::string& model, const Request& req);

    std::string owner_for(const std::string& model, const std::optional<std::string>& user) const;
    std::string display_status(const std::string& model, const std::string& owner,
                               const ModelVersionRecord& rec) const;
    // true when a batch was started for the lineage
    bool maybe_fire(const std::string& model, const std::string& user, bool count_trigger_only);
    void run_batch(const std::string& model, const std::string& user);
    void worker_loop();

    ServiceConfig cfg_;
    Clock clock_;
    std::unique_ptr<ModelRegistry> registry_;
    std::unique_ptr<AnnotationStore> store_;
    std::unique_ptr<Worklist> worklist_;
    std::unique_ptr<RetrainingEngine> engine_;
    std::unique_ptr<SwarmCoordinator> swarm_;
    std::mutex update_mutex_;  // serializes correction ids and pool admission

    mutable std::mutex jobs_mutex_;
    std::condition_variable jobs_cv_;
    std::condition_variable idle_cv_;
    std::deque<std::pair<std::string, std::string>> jobs_;
    bool running_job_ = false;
    bool stop_ = false;
    std::vector<RetrainReport> reports_;
    std::thread worker_;
};

/// Blocking listen on cfg.host:cfg.port until the server is stopped.
void serve(ApiService& service);

}  // namespace radloop::api
