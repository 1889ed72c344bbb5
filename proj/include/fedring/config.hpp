#pragma once

#include <stdexcept>
#include <string>

#include <json.hpp>

#include "fedring/client.hpp"
#include "fedring/experiment.hpp"
#include "fedring/server.hpp"

namespace fedring::config {

/// Bad JSON, an unknown key or a value of the wrong type. The message names the key path.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// ServerConfig plus what the server process needs to build its first global.
struct ServerLaunch {
  server::ServerConfig server;
  ml::ModelConfig model;
  std::uint64_t init_seed = 0;
  /// Starts from this checkpoint instead of a fresh initialization when set.
  std::string initial_checkpoint;
  /// Optional validation hook data; the server reads nothing else.
  std::string validation_data_dir;
  data::PatchSpec inference_window{{48, 48, 48}, 0.5};
};

// Missing keys keep their defaults; unknown keys are rejected.
ServerLaunch server_from_json(const nlohmann::json& j);
client::ClientConfig client_from_json(const nlohmann::json& j);
/// Starts from default_plan(seed) when the plan gives a seed, default_plan(1) otherwise.
sim::ExperimentPlan plan_from_json(const nlohmann::json& j);

nlohmann::json to_json(const sim::ExperimentPlan& plan);

/// Throws ConfigError when the file is missing or is not valid JSON.
nlohmann::json read_json_file(const std::string& path);

}  // namespace fedring::config
