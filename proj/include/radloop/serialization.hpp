#pragma once

#include <json.hpp>

#include "radloop/core_model.hpp"
#include "radloop/errors.hpp"

namespace radloop {

// Insertion-ordered so files and wire bodies keep the field order they were
// written in.
using Json = nlohmann::ordered_json;

Json to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const Json& j);

/// {"width","height","image"} with the pixels as Base64.
Json to_json(const ImagePayload& image);
ImagePayload image_from_json(const Json& j);

/// x1,x2,x3,x4,y1,y2,y3,y4 in that order.
Json to_json(const BoundingBox& box);
BoundingBox box_from_json(const Json& j);

Json to_json(const RleMask& mask);
RleMask mask_from_json(const Json& j);

Json to_json(const LabelFinding& finding);
LabelFinding finding_from_json(const Json& j);

Json to_json(const TrainingExample& ex);
TrainingExample example_from_json(const Json& j);

/// Per-label nested row arrays plus bias.
Json weights_to_json(const ModelWeights& weights, const ModelConfig& cfg);
ModelWeights weights_from_json(const Json& j, const ModelConfig& cfg);

// Reads a value and reports the missing or mistyped field by name.
template <typename T>
T require(const Json& j, const char* field) {
    if (!j.is_object() || !j.contains(field)) throw InvalidInput(std::string("missing field '") + field + "'");
    try {
        return j.at(field).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw InvalidInput(std::string("field '") + field + "' has the wrong type");
    }
}

}  // namespace radloop
