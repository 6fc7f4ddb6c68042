#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "tokmat/backbone.hpp"
#include "tokmat/maturation.hpp"
#include "tokmat/training.hpp"

namespace tokmat {

/// Everything one experiment needs. Written as a key = value document, one
/// setting per line, '#' starts a comment. Keys are dotted (backbone.dim,
/// train.lr, ...); see config_schema() for the full list.
struct RunConfig {
  BackboneConfig backbone;
  MaturationConfig maturation;
  LossConfig loss;
  TrainConfig train;
  Scalar radius = 1.0;
  std::string corpus;
  std::string out_dir = "run";
  std::uint64_t seed = 1;

  /// Cross-field checks on top of each section's own validate().
  void validate() const;
  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& message)
      : std::runtime_error(message), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

struct ConfigKey {
  std::string name;
  std::string type;  // int, float, bool, string, token
  std::string doc;
};

const std::vector<ConfigKey>& config_schema();

/// Sets one key from its textual value. Unknown keys and unparsable values
/// throw ConfigError.
void set_config_value(RunConfig& cfg, std::string_view key, std::string_view value);
std::string get_config_value(const RunConfig& cfg, std::string_view key);

RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::filesystem::path& path);
/// Every key, in schema order, as a document parse_config() reads back.
std::string format_config(const RunConfig& cfg);

nlohmann::json config_to_json(const RunConfig& cfg);
/// Flat object of dotted keys; unknown keys are rejected, missing keys keep defaults.
RunConfig config_from_json(const nlohmann::json& j);

}  // namespace tokmat
