#include "radloop/serialization.hpp"

#include "radloop/base64.hpp"

namespace radloop {

Json to_json(const ModelConfig& cfg) {
    Json j;
    j["height"] = cfg.height;
    j["width"] = cfg.width;
    j["labels"] = cfg.labels;
    j["theta_det"] = cfg.theta_det;
    j["tau"] = cfg.tau;
    j["eta"] = cfg.eta;
    j["lambda_loc"] = cfg.lambda_loc;
    j["lambda_reg"] = cfg.lambda_reg;
    j["m_in"] = cfg.inside_margin();
    j["epochs_default"] = cfg.epochs_default;
    return j;
}

ModelConfig config_from_json(const Json& j) {
    ModelConfig cfg;
    if (!j.is_object()) throw InvalidInput("model config must be an object");
    if (j.contains("height")) cfg.height = require<int>(j, "height");
    if (j.contains("width")) cfg.width = require<int>(j, "width");
    if (j.contains("labels")) cfg.labels = require<std::vector<std::string>>(j, "labels");
    if (j.contains("theta_det")) cfg.theta_det = require<double>(j, "theta_det");
    if (j.contains("tau")) cfg.tau = require<double>(j, "tau");
    if (j.contains("eta")) cfg.eta = require<double>(j, "eta");
    if (j.contains("lambda_loc")) cfg.lambda_loc = require<double>(j, "lambda_loc");
    if (j.contains("lambda_reg")) cfg.lambda_reg = require<double>(j, "lambda_reg");
    if (j.contains("m_in") && !j["m_in"].is_null()) cfg.m_in = require<double>(j, "m_in");
    if (j.contains("epochs_default")) cfg.epochs_default = require<int>(j, "epochs_default");
    cfg.validate();
    return cfg;
}

Json to_json(const ImagePayload& image) {
    Json j;
    j["width"] = image.width;
    j["height"] = image.height;
    j["image"] = base64::encode(image.pixels);
    return j;
}

ImagePayload image_from_json(const Json& j) {
    ImagePayload img;
    img.width = require<int>(j, "width");
    img.height = require<int>(j, "height");
    img.pixels = base64::decode(require<std::string>(j, "image"));
    img.validate();
    return img;
}

Json to_json(const BoundingBox& b) {
    Json j;
    j["x1"] = b.x1;
    j["x2"] = b.x2;
    j["x3"] = b.x3;
    j["x4"] = b.x4;
    j["y1"] = b.y1;
    j["y2"] = b.y2;
    j["y3"] = b.y3;
    j["y4"] = b.y4;
    return j;
}

namespace {

int coordinate(const Json& j, const char* field) {
    const double v = require<double>(j, field);
    if (v != static_cast<double>(static_cast<int>(v))) {
        throw InvalidInput(std::string("field '") + field + "' must be an integer pixel coordinate");
    }
    return static_cast<int>(v);
}

}  // namespace

BoundingBox box_from_json(const Json& j) {
    BoundingBox b;
    b.x1 = coordinate(j, "x1");
    b.x2 = coordinate(j, "x2");
    b.x3 = coordinate(j, "x3");
    b.x4 = coordinate(j, "x4");
    b.y1 = coordinate(j, "y1");
    b.y2 = coordinate(j, "y2");
    b.y3 = coordinate(j, "y3");
    b.y4 = coordinate(j, "y4");
    return b;
}

Json to_json(const RleMask& mask) {
    Json runs = Json::array();
    for (auto [start, len] : mask.runs) runs.push_back(Json::array({start, len}));
    Json j;
    j["height"] = mask.height;
    j["width"] = mask.width;
    j["runs"] = std::move(runs);
    return j;
}

RleMask mask_from_json(const Json& j) {
    RleMask m;
    m.height = require<int>(j, "height");
    m.width = require<int>(j, "width");
    for (const auto& run : j.at("runs")) m.runs.emplace_back(run.at(0).get<int>(), run.at(1).get<int>());
    return m;
}

Json to_json(const LabelFinding& f) {
    Json j;
    j["label"] = f.label;
    j["probability"] = f.probability;
    j["box"] = f.box ? to_json(*f.box) : Json(nullptr);
    j["mask"] = f.mask ? to_json(*f.mask) : Json(nullptr);
    return j;
}

LabelFinding finding_from_json(const Json& j) {
    LabelFinding f;
    f.label = require<std::string>(j, "label");
    f.probability = require<double>(j, "probability");
    if (j.contains("box") && !j["box"].is_null()) f.box = box_from_json(j["box"]);
    if (j.contains("mask") && !j["mask"].is_null()) f.mask = mask_from_json(j["mask"]);
    return f;
}

Json to_json(const TrainingExample& ex) {
    Json j;
    j["image"] = to_json(ex.image);
    j["label"] = ex.label;
    j["y"] = ex.y;
    j["box"] = ex.box ? to_json(*ex.box) : Json(nullptr);
    return j;
}

TrainingExample example_from_json(const Json& j) {
    TrainingExample ex;
    ex.image = image_from_json(j.at("image"));
    ex.label = require<std::string>(j, "label");
    ex.y = require<int>(j, "y");
    if (j.contains("box") && !j["box"].is_null()) ex.box = box_from_json(j["box"]);
    return ex;
}

Json weights_to_json(const ModelWeights& weights, const ModelConfig& cfg) {
    Json layers = Json::array();
    for (std::size_t l = 0; l < weights.layers.size(); ++l) {
        const auto& layer = weights.layers[l];
        Json rows = Json::array();
        for (int r = 0; r < layer.plane.rows; ++r) {
            Json row = Json::array();
            for (int c = 0; c < layer.plane.cols; ++c) row.push_back(layer.plane(r, c));
            rows.push_back(std::move(row));
        }
        Json entry;
        entry["label"] = cfg.labels.at(l);
        entry["bias"] = layer.bias;
        entry["weights"] = std::move(rows);
        layers.push_back(std::move(entry));
    }
    return layers;
}

ModelWeights weights_from_json(const Json& j, const ModelConfig& cfg) {
    if (!j.is_array() || j.size() != cfg.labels.size()) throw InvalidInput("weight layers do not match labels");
    ModelWeights w = ModelWeights::zeros(cfg);
    for (std::size_t l = 0; l < cfg.labels.size(); ++l) {
        const auto& entry = j[l];
        if (require<std::string>(entry, "label") != cfg.labels[l]) throw InvalidInput("weight layer label order");
        w.layers[l].bias = require<double>(entry, "bias");
        const auto& rows = entry.at("weights");
        if (!rows.is_array() || static_cast<int>(rows.size()) != cfg.height) throw InvalidInput("weight plane rows");
        for (int r = 0; r < cfg.height; ++r) {
            const auto& row = rows[r];
            if (!row.is_array() || static_cast<int>(row.size()) != cfg.width) throw InvalidInput("weight plane cols");
            for (int c = 0; c < cfg.width; ++c) w.layers[l].plane(r, c) = row[c].get<double>();
        }
    }
    w.validate(cfg);
    return w;
}

}  // namespace radloop
