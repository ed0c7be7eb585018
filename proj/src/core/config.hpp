// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "data.hpp"
#include "eval.hpp"
#include "train.hpp"

namespace cdnet::config {

struct GradCheckConfig {
  model::Index raw_dim = 6;
  model::Index d = 8;
  model::Index cascade_steps = 3;
  int ways = 2;
  int shots = 2;
  int queries = 2;
  std::string reg_mode = "partial";
  model::Real eps = 1e-6;
  model::Real tol = 1e-5;
};

// Everything one CLI invocation needs. Sections mirror the dotted keys:
// seed, out_dir, data.*, model.*, train.*, eval.*, gradcheck.*.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "runs/default";
  data::DataConfig data;
  train::TrainConfig train;
  eval::EvalConfig eval;
  std::vector<int> ablate_shots = {1, 5};
  std::vector<bool> ablate_inits = {true};
  std::vector<std::string> ablate_variants;  // empty = all, in table order
  std::vector<int> sweep_js = {0, 1, 2, 3, 4, 5, 6};
  GradCheckConfig gradcheck;

  // Copies the master seed into every section.
  void propagate_seed();
  void validate() const;
};

struct FieldInfo {
  std::string key;
  std::string default_value;
  std::string doc;
};

// Every settable key with its default and description, in documentation order.
const std::vector<FieldInfo>& fields();

// Sets one dotted key from its string form. Unknown keys and empty values
// are ConfigErrors naming the key.
void set_field(RunConfig& cfg, std::string_view key, std::string_view value);
std::string get_field(const RunConfig& cfg, std::string_view key);

// Nested JSON object; absent keys keep their defaults, unknown keys are rejected.
RunConfig load_config(const std::filesystem::path& path);
void apply_json(RunConfig& cfg, const std::string& json_text);
std::string to_json(const RunConfig& cfg);

}  // namespace cdnet::config
