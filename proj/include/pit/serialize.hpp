#pragma once

#include "pit/model.hpp"

#include "json.hpp"

namespace pit {

nlohmann::json to_json(const TransformerConfig& config);
TransformerConfig transformer_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const PIConfig& config);
PIConfig pi_config_from_json(const nlohmann::json& j);

} // namespace pit
