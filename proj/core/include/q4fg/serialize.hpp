#pragma once

#include <nlohmann/json.hpp>

#include "q4fg/model.hpp"
#include "q4fg/quant.hpp"
#include "q4fg/sparsity.hpp"

namespace q4fg {

using Json = nlohmann::json;

std::string to_string(Mapping m);
std::string to_string(Granularity g);
Mapping mapping_from_string(const std::string& s);
Granularity granularity_from_string(const std::string& s);

Json to_json(const QuantScheme& s);
QuantScheme scheme_from_json(const Json& j);

/// {"parts": [...], "weight": scheme, "activation": scheme}
Json to_json(const QuantStrategy& s);
QuantStrategy strategy_from_json(const Json& j);

Json to_json(const ModelConfig& c);
ModelConfig config_from_json(const Json& j);

/// Compact dump: object keys sorted, no insignificant whitespace.
std::string canonical_dump(const Json& j);

/// Reads a JSON file; throws std::runtime_error naming the path on failure.
Json read_json_file(const std::string& path);
void write_json_file(const std::string& path, const Json& j);

}  // namespace q4fg
