#pragma once

#include <string>

#include "ctxr/trainer.hpp"

namespace ctxr {

// Flat key=value run configuration. Parsing rejects unknown keys; the
// canonical serialization uses a fixed key order and shortest round-trip
// number formatting, so parse -> serialize is a fixed point.
std::string serialize_config(const TrainConfig& cfg);
TrainConfig parse_config_text(const std::string& text);
TrainConfig load_config(const std::string& path);

}  // namespace ctxr
