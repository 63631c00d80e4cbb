// SPDX-License-Identifier: Apache-2.0
//
// JSON mappings for configuration structs. Readers reject unknown keys with
// ConfigError and fill absent keys from the struct defaults.
#pragma once

#include "bt/btimer.hpp"
#include "bt/nte.hpp"
#include "bt/scenegen.hpp"
#include "bt/supervision.hpp"

#include <json.hpp>

#include <initializer_list>
#include <string>

namespace bt {

using Json = nlohmann::json;

// Throws ConfigError naming the first key of j not in allowed.
void check_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where);

MotionMix motion_mix_from_string(const std::string& s);

void to_json(Json& j, const Cube& c);
void from_json(const Json& j, Cube& c);
void to_json(Json& j, const BackboneConfig& c);
void from_json(const Json& j, BackboneConfig& c);
void to_json(Json& j, const BTimerConfig& c);
void from_json(const Json& j, BTimerConfig& c);
void to_json(Json& j, const NteConfig& c);
void from_json(const Json& j, NteConfig& c);
void to_json(Json& j, const LossConfig& c);
void from_json(const Json& j, LossConfig& c);
void to_json(Json& j, const SceneGenConfig& c);
void from_json(const Json& j, SceneGenConfig& c);

} // namespace bt
