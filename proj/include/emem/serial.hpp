#pragma once

// JSON converters shared between the file loaders and the model serializer.

#include <string>

#include "emem/data_model.hpp"
#include "emem/tree.hpp"
#include "json.hpp"

namespace emem {

nlohmann::json instance_to_json(const Instance& instance);
Instance instance_from_json(const nlohmann::json& j, const std::string& ctx);

nlohmann::json tree_to_json(const Tree& tree);
Tree tree_from_json(const nlohmann::json& j, const std::string& ctx);

}  // namespace emem
