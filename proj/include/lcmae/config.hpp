#pragma once

#include <string>
#include <vector>

#include "lcmae/trainer.hpp"

namespace lcmae {

/// Text config: one `key = value` per line, dotted keys for nested sections
/// (vit.dim, guidance.alpha, augment.crop_mode, probe.epochs), '#' starts a
/// comment. Unknown keys are rejected.
std::vector<std::string> config_keys();
std::string get_config_value(const TrainConfig& config, const std::string& key);
void set_config_value(TrainConfig& config, const std::string& key, const std::string& value);
/// "key=value" form used by --override.
void apply_override(TrainConfig& config, const std::string& assignment);

/// Every key in canonical order; doubles printed with 17 significant digits so
/// parse_config(dump_config(c)) == c.
std::string dump_config(const TrainConfig& config);
TrainConfig parse_config(const std::string& text, TrainConfig base = {});
TrainConfig load_config(const std::string& path);

}  // namespace lcmae
