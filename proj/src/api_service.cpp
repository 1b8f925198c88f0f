#include "radloop/api_service.hpp"

#include <httplib.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>

#include "radloop/base64.hpp"
#include "radloop/errors.hpp"

namespace radloop::api {

namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kUpdateFields{"annotationText", "image", "model", "modelVersion", "x1", "x2",
                                             "x3", "x4", "y1", "y2", "y3", "y4"};
const std::vector<std::string> kUpdateExtensions{"width", "height", "disposition", "originalLabel", "studyId"};
const std::vector<std::string> kInferenceFields{"image", "model", "modelVersion", "width", "height"};
const std::vector<std::string> kWorklistFields{"studyId", "modality", "image", "width", "height", "model", "priority"};

void check_object(const Json& j) {
    if (!j.is_object()) throw InvalidInput("request body must be a JSON object");
}

void reject_unknown(const Json& j, std::initializer_list<const std::vector<std::string>*> allowed) {
    for (const auto& [key, value] : j.items()) {
        bool known = false;
        for (const auto* list : allowed) known = known || std::find(list->begin(), list->end(), key) != list->end();
        if (!known) throw InvalidInput("unknown field '" + key + "'");
    }
}

// JSON numbers with an integral value; 3.0 is fine, 3.5 is not.
long integral(const Json& j, const char* field) {
    if (!j.contains(field)) throw InvalidInput(std::string("missing field '") + field + "'");
    const auto& v = j.at(field);
    if (v.is_number_integer()) {
        if (v.is_number_unsigned() && v.get<std::uint64_t>() > static_cast<std::uint64_t>(
                                                                   std::numeric_limits<long>::max())) {
            throw InvalidInput(std::string("field '") + field + "' is out of range");
        }
        return v.get<long>();
    }
    if (v.is_number_float()) {
        const double d = v.get<double>();
        if (!std::isfinite(d) || d != std::floor(d) || std::abs(d) > 1e15) {
            throw InvalidInput(std::string("field '") + field + "' must be an integer");
        }
        return static_cast<long>(d);
    }
    throw InvalidInput(std::string("field '") + field + "' has the wrong type");
}

int coordinate(const Json& j, const char* field) {
    const long v = integral(j, field);
    if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) {
        throw InvalidInput(std::string("field '") + field + "' is out of range");
    }
    return static_cast<int>(v);
}

Json error_body(const std::string& code, const std::string& reason) {
    Json e;
    e["error"] = code;
    e["reason"] = reason;
    return envelope(Json::array({e}), "error");
}

Response reply(int status, const Json& body) { return Response{status, body.dump()}; }

Response error_reply(int status, const std::string& code, const std::string& reason) {
    return reply(status, error_body(code, reason));
}

std::string trim(const std::string& s) {
    auto b = std::find_if_not(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
    auto e = std::find_if_not(s.rbegin(), s.rend(), [](unsigned char c) { return std::isspace(c); }).base();
    return b < e ? std::string(b, e) : std::string();
}

std::vector<std::string> split_path(const std::string& path) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (start <= path.size()) {
        const auto end = path.find('/', start);
        const auto part = path.substr(start, end == std::string::npos ? std::string::npos : end - start);
        if (!part.empty()) parts.push_back(part);
        if (end == std::string::npos) break;
        start = end + 1;
    }
    return parts;
}

std::string study_key(const ImagePayload& image) {
    // FNV-1a over dimensions and pixels
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&](std::uint8_t b) {
        h ^= b;
        h *= 1099511628211ull;
    };
    for (int v : {image.width, image.height}) {
        for (int s = 0; s < 32; s += 8) mix(static_cast<std::uint8_t>(v >> s));
    }
    for (auto b : image.pixels) mix(b);
    char buf[24];
    std::snprintf(buf, sizeof buf, "img-%016llx", static_cast<unsigned long long>(h));
    return buf;
}

int status_rank(const std::string& s) {
    if (s == kStatusRetraining) return 2;
    if (s == kStatusSwarmLearned) return 1;
    return 0;
}

std::optional<std::string> env(const char* name) {
    const char* v = std::getenv(name);
    if (!v) return std::nullopt;
    return std::string(v);
}

long env_long(const char* name, const std::string& text) {
    try {
        std::size_t used = 0;
        const long v = std::stol(text, &used);
        if (used != text.size()) throw std::invalid_argument(text);
        return v;
    } catch (const std::exception&) {
        throw InvalidInput(std::string(name) + " must be an integer, got '" + text + "'");
    }
}

bool env_bool(const char* name, const std::string& text) {
    if (text == "1" || text == "true" || text == "yes") return true;
    if (text == "0" || text == "false" || text == "no") return false;
    throw InvalidInput(std::string(name) + " must be a boolean, got '" + text + "'");
}

}  // namespace

ModelUpdateRequest parse_model_update(const Json& j, bool strict) {
    check_object(j);
    if (strict) reject_unknown(j, {&kUpdateFields, &kUpdateExtensions});
    ModelUpdateRequest r;
    r.annotation_text = require<std::string>(j, "annotationText");
    r.image = require<std::string>(j, "image");
    r.model = require<std::string>(j, "model");
    r.model_version = integral(j, "modelVersion");
    r.x1 = coordinate(j, "x1");
    r.x2 = coordinate(j, "x2");
    r.x3 = coordinate(j, "x3");
    r.x4 = coordinate(j, "x4");
    r.y1 = coordinate(j, "y1");
    r.y2 = coordinate(j, "y2");
    r.y3 = coordinate(j, "y3");
    r.y4 = coordinate(j, "y4");
    if (strict || j.contains("width")) r.width = coordinate(j, "width");
    if (strict || j.contains("height")) r.height = coordinate(j, "height");
    if (j.contains("disposition")) r.disposition = require<std::string>(j, "disposition");
    if (j.contains("originalLabel")) r.original_label = require<std::string>(j, "originalLabel");
    if (j.contains("studyId")) r.study_id = require<std::string>(j, "studyId");
    return r;
}

InferenceRequest parse_inference(const Json& j, bool strict) {
    check_object(j);
    if (strict) reject_unknown(j, {&kInferenceFields});
    InferenceRequest r;
    r.image = require<std::string>(j, "image");
    r.model = require<std::string>(j, "model");
    if (j.contains("modelVersion") && !j["modelVersion"].is_null()) r.model_version = integral(j, "modelVersion");
    if (strict || j.contains("width")) r.width = coordinate(j, "width");
    if (strict || j.contains("height")) r.height = coordinate(j, "height");
    return r;
}

Json to_json(const ModelUpdateRequest& r) {
    Json j;
    j["annotationText"] = r.annotation_text;
    j["image"] = r.image;
    j["model"] = r.model;
    j["modelVersion"] = r.model_version;
    j["x1"] = r.x1;
    j["x2"] = r.x2;
    j["x3"] = r.x3;
    j["x4"] = r.x4;
    j["y1"] = r.y1;
    j["y2"] = r.y2;
    j["y3"] = r.y3;
    j["y4"] = r.y4;
    if (r.width) j["width"] = *r.width;
    if (r.height) j["height"] = *r.height;
    if (r.disposition) j["disposition"] = *r.disposition;
    if (r.original_label) j["originalLabel"] = *r.original_label;
    if (r.study_id) j["studyId"] = *r.study_id;
    return j;
}

Json to_json(const InferenceRequest& r) {
    Json j;
    j["image"] = r.image;
    j["model"] = r.model;
    if (r.model_version) j["modelVersion"] = *r.model_version;
    if (r.width) j["width"] = *r.width;
    if (r.height) j["height"] = *r.height;
    return j;
}

Json envelope(Json data, const std::string& status) {
    Json j;
    j["data"] = data.is_array() ? std::move(data) : Json::array({std::move(data)});
    j["status"] = status;
    return j;
}

ImagePayload decode_image(const std::string& text, int width, int height) {
    ImagePayload image;
    image.width = width;
    image.height = height;
    try {
        image.pixels = base64::decode(text);
    } catch (const InvalidInput& e) {
        throw InvalidInput(std::string("image: ") + e.what());
    }
    if (width <= 0 || height <= 0 ||
        image.pixels.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height)) {
        throw InvalidInput("image: decoded " + std::to_string(image.pixels.size()) + " bytes, expected " +
                           std::to_string(width) + "x" + std::to_string(height));
    }
    image.validate();
    return image;
}

Json to_json(const ServiceConfig& cfg) {
    Json j;
    j["host"] = cfg.host;
    j["port"] = cfg.port;
    j["data_dir"] = cfg.data_dir.string();
    j["n_batch"] = cfg.batch.n_batch;
    j["t_max_ms"] = cfg.batch.t_max.count();
    j["sim_mode"] = cfg.sim_mode;
    j["strict"] = cfg.strict;
    j["default_model"] = cfg.default_model;
    j["model_config"] = radloop::to_json(cfg.model_config);
    j["tick_ms"] = cfg.tick.count();
    return j;
}

ServiceConfig service_config_from_json(const Json& j) {
    check_object(j);
    static const std::vector<std::string> keys{"host",   "port",          "data_dir",     "n_batch", "t_max_ms",
                                               "sim_mode", "strict", "default_model", "model_config", "tick_ms"};
    reject_unknown(j, {&keys});
    ServiceConfig cfg;
    if (j.contains("host")) cfg.host = require<std::string>(j, "host");
    if (j.contains("port")) cfg.port = require<int>(j, "port");
    if (j.contains("data_dir")) cfg.data_dir = require<std::string>(j, "data_dir");
    if (j.contains("n_batch")) cfg.batch.n_batch = require<std::size_t>(j, "n_batch");
    if (j.contains("t_max_ms")) cfg.batch.t_max = std::chrono::milliseconds(require<long>(j, "t_max_ms"));
    if (j.contains("sim_mode")) cfg.sim_mode = require<bool>(j, "sim_mode");
    if (j.contains("strict")) cfg.strict = require<bool>(j, "strict");
    if (j.contains("default_model")) cfg.default_model = require<std::string>(j, "default_model");
    if (j.contains("model_config")) cfg.model_config = config_from_json(j["model_config"]);
    if (j.contains("tick_ms")) cfg.tick = std::chrono::milliseconds(require<long>(j, "tick_ms"));
    return cfg;
}

void apply_env_overrides(ServiceConfig& cfg) {
    if (auto v = env("RADLOOP_HOST")) cfg.host = *v;
    if (auto v = env("RADLOOP_PORT")) cfg.port = static_cast<int>(env_long("RADLOOP_PORT", *v));
    if (auto v = env("RADLOOP_DATA_DIR")) cfg.data_dir = *v;
    if (auto v = env("RADLOOP_N_BATCH")) cfg.batch.n_batch = static_cast<std::size_t>(env_long("RADLOOP_N_BATCH", *v));
    if (auto v = env("RADLOOP_T_MAX_MS")) cfg.batch.t_max = std::chrono::milliseconds(env_long("RADLOOP_T_MAX_MS", *v));
    if (auto v = env("RADLOOP_SIM_MODE")) cfg.sim_mode = env_bool("RADLOOP_SIM_MODE", *v);
    if (auto v = env("RADLOOP_STRICT")) cfg.strict = env_bool("RADLOOP_STRICT", *v);
    if (auto v = env("RADLOOP_MODEL")) cfg.default_model = *v;
}

ServiceConfig load_service_config(const std::optional<fs::path>& file) {
    ServiceConfig cfg;
    if (file) {
        Json j;
        try {
            j = Json::parse(read_file(*file));
        } catch (const nlohmann::json::exception& e) {
            throw InvalidInput(file->string() + ": " + e.what());
        }
        cfg = service_config_from_json(j);
    }
    apply_env_overrides(cfg);
    if (cfg.port < 0 || cfg.port > 65535) throw InvalidInput("port must be in [0, 65535]");
    if (cfg.batch.n_batch == 0) throw InvalidInput("n_batch must be positive");
    if (cfg.batch.t_max.count() < 0) throw InvalidInput("t_max_ms must be non-negative");
    if (cfg.tick.count() <= 0) throw InvalidInput("tick_ms must be positive");
    cfg.model_config.validate();
    return cfg;
}

std::optional<std::string> Request::header(const std::string& name) const {
    for (const auto& [k, v] : headers) {
        if (k.size() == name.size() &&
            std::equal(k.begin(), k.end(), name.begin(),
                       [](char a, char b) { return std::tolower(static_cast<unsigned char>(a)) ==
                                                   std::tolower(static_cast<unsigned char>(b)); })) {
            return v;
        }
    }
    return std::nullopt;
}

ApiService::ApiService(ServiceConfig cfg, Clock clock) : cfg_(std::move(cfg)), clock_(std::move(clock)) {
    cfg_.model_config.validate();
    fs::create_directories(cfg_.data_dir);
    registry_ = std::make_unique<ModelRegistry>(cfg_.data_dir / "registry", clock_);
    store_ = std::make_unique<AnnotationStore>(cfg_.data_dir / "store", clock_);
    worklist_ = std::make_unique<Worklist>(cfg_.data_dir / "worklist.json");
    engine_ = std::make_unique<RetrainingEngine>(*registry_, *store_, cfg_.data_dir / "reports");
    swarm_ = std::make_unique<SwarmCoordinator>(*registry_, cfg_.data_dir / "reports");
    if (registry_->models().empty() && !cfg_.default_model.empty()) {
        registry_->seed_base(cfg_.default_model, cfg_.model_config, ModelWeights::zeros(cfg_.model_config));
    }
    if (!cfg_.sim_mode) worker_ = std::thread([this] { worker_loop(); });
}

ApiService::~ApiService() {
    {
        std::lock_guard lock(jobs_mutex_);
        stop_ = true;
    }
    jobs_cv_.notify_all();
    if (worker_.joinable()) worker_.join();
}

Response ApiService::handle(const Request& req) {
    try {
        const auto parts = split_path(req.path);
        const bool get = req.method == "GET";
        const bool post = req.method == "POST";
        auto body = [&]() {
            try {
                return Json::parse(req.body);
            } catch (const nlohmann::json::exception&) {
                throw InvalidInput("request body is not valid JSON");
            }
        };

        if (parts.size() == 1 && parts[0] == "health") {
            if (!get) return error_reply(405, "method-not-allowed", "use GET");
            Json j;
            j["status"] = "ok";
            return reply(200, j);
        }
        if (parts.size() == 1 && parts[0] == "bounding-box") {
            if (!get && !post) return error_reply(405, "method-not-allowed", "use GET or POST");
            if (trim(req.body).empty()) return bounding_box_list(req);
            return bounding_box_infer(req, body());
        }
        if (parts.size() == 1 && parts[0] == "model-update") {
            if (!post) return error_reply(405, "method-not-allowed", "use POST");
            if (!req.header(kUserHeader) || req.header(kUserHeader)->empty()) {
                return error_reply(401, "unauthorized", std::string("missing ") + kUserHeader + " header");
            }
            return model_update(req, body());
        }
        if (!parts.empty() && parts[0] == "worklist") {
            if (parts.size() == 1 && get) return worklist_get(req);
            if (parts.size() == 1 && post) return worklist_post(req, body());
            if (parts.size() == 2 && parts[1] == "assign" && post) return worklist_assign(body());
            if (parts.size() == 3 && parts[2] == "read" && post) return worklist_read(parts[1]);
            return error_reply(405, "method-not-allowed", req.method + " " + req.path);
        }
        if (parts.size() == 2 && parts[0] == "swarm" && parts[1] == "merge") {
            if (!post) return error_reply(405, "method-not-allowed", "use POST");
            return swarm_merge(body());
        }
        if (parts.size() == 3 && parts[0] == "models" && parts[2] == "versions") {
            if (!get) return error_reply(405, "method-not-allowed", "use GET");
            return model_versions(parts[1], req);
        }
        return error_reply(404, "not-found", "no route for " + req.method + " " + req.path);
    } catch (const NotFound& e) {
        return error_reply(404, e.code(), e.what());
    } catch (const Conflict& e) {
        return error_reply(409, e.code(), e.what());
    } catch (const Error& e) {
        return error_reply(400, e.code(), e.what());
    } catch (const std::exception& e) {
        return error_reply(500, "internal", e.what());
    }
}

std::string ApiService::owner_for(const std::string& model, const std::optional<std::string>& user) const {
    if (user && !user->empty() && registry_->has_lineage(model, *user)) return *user;
    return kBaseOwner;
}

std::string ApiService::display_status(const std::string& model, const std::string& owner,
                                       const ModelVersionRecord& rec) const {
    if (registry_->status(model, owner) == kStatusRetraining) return kStatusRetraining;
    return rec.status;
}

Response ApiService::bounding_box_list(const Request& req) {
    const auto user = req.header(kUserHeader);
    Json data = Json::array();
    std::string status = kStatusReady;
    for (const auto& model : registry_->models()) {
        const auto owner = owner_for(model, user);
        const auto resolved = registry_->resolve(model, owner);
        Json entry;
        entry["model"] = model;
        entry["version"] = std::to_string(resolved.record.version);
        data.push_back(std::move(entry));
        const auto s = display_status(model, owner, resolved.record);
        if (status_rank(s) > status_rank(status)) status = s;
    }
    return reply(200, envelope(std::move(data), status));
}

Response ApiService::bounding_box_infer(const Request& req, const Json& body) {
    const auto r = parse_inference(body, cfg_.strict);
    if (!registry_->has_model(r.model)) throw NotFound("unknown model '" + r.model + "'");
    const auto owner = owner_for(r.model, req.header(kUserHeader));
    const auto resolved = registry_->resolve(r.model, owner, r.model_version);
    const auto& cfg = resolved.config;
    const auto image = decode_image(r.image, r.width.value_or(cfg.width), r.height.value_or(cfg.height));
    const auto result = infer(*resolved.weights, image, cfg);
    const auto status = display_status(r.model, owner, resolved.record);

    Json data = Json::array();
    for (const auto& f : result.findings) {
        Json j;
        j["annotationText"] = f.label;
        j["probability"] = f.probability;
        if (f.box) {
            const Json box = radloop::to_json(*f.box);
            for (const auto& [k, v] : box.items()) j[k] = v;
        }
        j["model"] = r.model;
        j["modelVersion"] = std::to_string(resolved.record.version);
        j["status"] = status;
        data.push_back(std::move(j));
    }
    return reply(200, envelope(std::move(data), status));
}

Response ApiService::model_update(const Request& req, const Json& body) {
    const std::string user = *req.header(kUserHeader);
    check_path_component(user, kUserHeader);
    if (user == kBaseOwner) throw InvalidInput(std::string("user id '") + kBaseOwner + "' is reserved");
    const auto r = parse_model_update(body, cfg_.strict);
    if (!registry_->has_model(r.model)) throw NotFound("unknown model '" + r.model + "'");
    const ModelConfig cfg = registry_->config(r.model);
    cfg.label_index(r.annotation_text);
    if (r.original_label) cfg.label_index(*r.original_label);
    const Disposition disposition =
        r.disposition ? disposition_from_string(*r.disposition) : Disposition::BoxAdjusted;

    const auto image = decode_image(r.image, r.width.value_or(cfg.width), r.height.value_or(cfg.height));
    const BoundingBox box = r.box();
    try {
        box.validate(image.width, image.height);
    } catch (const InvalidInput& e) {
        throw InvalidInput(std::string("box: ") + e.what());
    }
    const auto seen = registry_->resolve(r.model, owner_for(r.model, user), r.model_version);
    const auto result = infer(*seen.weights, image, cfg);
    const std::string study = r.study_id.value_or(study_key(image));
    check_path_component(study, "studyId");

    {
        std::lock_guard lock(update_mutex_);
        registry_->ensure_lineage(r.model, user);
        const auto history = store_->all_corrections(user);
        const bool first_for_study = std::none_of(history.begin(), history.end(),
                                                  [&](const CorrectionRecord& c) { return c.study_id == study; });
        CorrectionRecord rec;
        rec.correction_id = "mu-" + user + "-" + std::to_string(history.size() + 1);
        rec.user_id = user;
        rec.model = r.model;
        rec.model_version = r.model_version;
        rec.study_id = study;
        rec.label = r.annotation_text;
        rec.disposition = disposition;
        if (disposition != Disposition::Disabled) rec.corrected_box = box;
        rec.original_finding = result.finding(r.original_label.value_or(r.annotation_text));
        rec.image = image;
        store_->append_correction(rec);

        // untouched findings of a newly submitted study count as accepted
        if (first_for_study) {
            for (const auto& f : result.findings) {
                if (f.label == r.annotation_text || (r.original_label && f.label == *r.original_label)) continue;
                TrainingExample ex;
                ex.image = image;
                ex.label = f.label;
                ex.y = f.detected(cfg.theta_det) ? 1 : 0;
                if (ex.y == 1) ex.box = f.box;
                store_->add_to_pool(user, ex.y == 1 ? PoolKind::TP : PoolKind::TN, std::move(ex));
            }
        }
    }

    const bool fired = maybe_fire(r.model, user, false);
    const auto current = registry_->resolve(r.model, user);
    Json entry;
    entry["model"] = r.model;
    entry["modelVersion"] = std::to_string(current.record.version);
    return reply(200, envelope(Json::array({entry}),
                               fired ? std::string(kStatusRetraining)
                                     : display_status(r.model, user, current.record)));
}

bool ApiService::maybe_fire(const std::string& model, const std::string& user, bool count_trigger_only) {
    const std::size_t pending = store_->pending_count(user, model);
    if (pending == 0) return false;
    std::chrono::milliseconds age{0};
    if (!count_trigger_only) {
        if (auto oldest = store_->oldest_pending_at(user, model)) {
            age = std::chrono::duration_cast<std::chrono::milliseconds>(clock_() - parse_timestamp(*oldest));
        }
    }
    if (batch_trigger_policy(pending, age, cfg_.batch) != TriggerDecision::Fire) return false;
    try {
        engine_->begin(model, user);
    } catch (const Conflict&) {
        return false;  // a batch is already running; it re-checks when done
    }
    if (cfg_.sim_mode) {
        run_batch(model, user);
    } else {
        {
            std::lock_guard lock(jobs_mutex_);
            jobs_.emplace_back(model, user);
        }
        jobs_cv_.notify_all();
    }
    return true;
}

void ApiService::run_batch(const std::string& model, const std::string& user) {
    try {
        auto report = engine_->run(model, user);
        std::lock_guard lock(jobs_mutex_);
        reports_.push_back(std::move(report));
    } catch (const std::exception& e) {
        std::fprintf(stderr, "retrain %s/%s failed: %s\n", model.c_str(), user.c_str(), e.what());
    }
}

void ApiService::worker_loop() {
    std::unique_lock lock(jobs_mutex_);
    while (true) {
        jobs_cv_.wait_for(lock, cfg_.tick, [&] { return stop_ || !jobs_.empty(); });
        if (!jobs_.empty()) {
            auto [model, user] = jobs_.front();
            jobs_.pop_front();
            running_job_ = true;
            lock.unlock();
            run_batch(model, user);
            // corrections that arrived during the batch
            maybe_fire(model, user, true);
            lock.lock();
            running_job_ = false;
            if (jobs_.empty()) idle_cv_.notify_all();
            continue;
        }
        if (stop_) break;
        lock.unlock();
        try {
            fire_aged_batches();
        } catch (const std::exception& e) {
            std::fprintf(stderr, "age trigger failed: %s\n", e.what());
        }
        lock.lock();
    }
    idle_cv_.notify_all();
}

std::size_t ApiService::fire_aged_batches() {
    std::size_t fired = 0;
    for (const auto& model : registry_->models()) {
        for (const auto& user : store_->users_with_pending(model)) {
            if (registry_->has_lineage(model, user) && registry_->status(model, user) == kStatusRetraining) continue;
            if (maybe_fire(model, user, false)) ++fired;
        }
    }
    return fired;
}

void ApiService::wait_idle() {
    std::unique_lock lock(jobs_mutex_);
    idle_cv_.wait(lock, [&] { return jobs_.empty() && !running_job_; });
}

std::vector<RetrainReport> ApiService::batch_reports() const {
    std::lock_guard lock(jobs_mutex_);
    return reports_;
}

Response ApiService::worklist_get(const Request&) {
    Json data = Json::array();
    for (const auto& e : worklist_->prioritized()) data.push_back(radloop::to_json(e));
    return reply(200, envelope(std::move(data), "ok"));
}

Response ApiService::worklist_post(const Request& req, const Json& body) {
    check_object(body);
    if (cfg_.strict) reject_unknown(body, {&kWorklistFields});
    const auto study = require<std::string>(body, "studyId");
    const auto modality = body.contains("modality") ? require<std::string>(body, "modality") : std::string("CR");

    std::optional<double> priority;
    if (body.contains("priority")) {
        priority = require<double>(body, "priority");
        if (!std::isfinite(*priority) || *priority < 0.0 || *priority > 1.0) {
            throw InvalidInput("priority must be in [0, 1]");
        }
    } else if (body.contains("image")) {
        const auto model = body.contains("model") ? require<std::string>(body, "model") : cfg_.default_model;
        if (!registry_->has_model(model)) throw NotFound("unknown model '" + model + "'");
        const auto resolved = registry_->resolve(model, owner_for(model, req.header(kUserHeader)));
        const auto& cfg = resolved.config;
        const int w = body.contains("width") ? coordinate(body, "width") : cfg.width;
        const int h = body.contains("height") ? coordinate(body, "height") : cfg.height;
        const auto image = decode_image(require<std::string>(body, "image"), w, h);
        priority = score(infer(*resolved.weights, image, cfg));
    }
    check_path_component(study, "studyId");
    worklist_->register_study(study, modality);
    if (priority) worklist_->set_priority(study, *priority);
    return reply(200, envelope(Json::array({radloop::to_json(*worklist_->find(study))}), "ok"));
}

Response ApiService::worklist_assign(const Json& body) {
    const auto users = require<std::vector<std::string>>(body, "users");
    Json data = Json::array();
    for (const auto& a : worklist_->assign_unread(users)) {
        Json j;
        j["study_id"] = a.study_id;
        j["user_id"] = a.user_id;
        data.push_back(std::move(j));
    }
    return reply(200, envelope(std::move(data), "ok"));
}

Response ApiService::worklist_read(const std::string& study_id) {
    worklist_->mark_read(study_id);
    return reply(200, envelope(Json::array({radloop::to_json(*worklist_->find(study_id))}), "ok"));
}

Response ApiService::swarm_merge(const Json& body) {
    check_object(body);
    const auto model = require<std::string>(body, "model");
    if (!registry_->has_model(model)) throw NotFound("unknown model '" + model + "'");
    std::vector<std::string> nodes;
    if (body.contains("nodes")) {
        nodes = require<std::vector<std::string>>(body, "nodes");
    } else {
        for (const auto& o : registry_->owners(model)) {
            if (o != kBaseOwner) nodes.push_back(o);
        }
    }
    const MergeSpec spec = body.contains("spec") ? merge_spec_from_json(body["spec"]) : MergeSpec{};
    const auto result = swarm_->run_swarm_round(model, nodes, spec);
    Json data = Json::array();
    for (const auto& rec : result.published) data.push_back(radloop::to_json(rec));
    return reply(200, envelope(std::move(data), kStatusSwarmLearned));
}

Response ApiService::model_versions(const std::string& model, const Request&) {
    if (!registry_->has_model(model)) throw NotFound("unknown model '" + model + "'");
    Json data = Json::array();
    for (const auto& owner : registry_->owners(model)) {
        for (const auto& rec : registry_->versions(model, owner)) data.push_back(radloop::to_json(rec));
    }
    return reply(200, envelope(std::move(data), "ok"));
}

void ApiService::bind(httplib::Server& server) {
    auto handler = [this](const httplib::Request& in, httplib::Response& out) {
        Request req;
        req.method = in.method;
        req.path = in.path;
        for (const auto& [k, v] : in.headers) req.headers.emplace(k, v);
        req.body = in.body;
        const auto res = handle(req);
        out.status = res.status;
        out.set_content(res.body, "application/json");
    };
    server.Get(".*", handler);
    server.Post(".*", handler);
}

void serve(ApiService& service) {
    httplib::Server server;
    service.bind(server);
    const auto& cfg = service.config();
    std::fprintf(stderr, "listening on %s:%d (data %s)\n", cfg.host.c_str(), cfg.port, cfg.data_dir.c_str());
    if (!server.listen(cfg.host, cfg.port)) {
        throw InvalidInput("cannot listen on " + cfg.host + ":" + std::to_string(cfg.port));
    }
}

}  // namespace radloop::api
