// Copyright (c) 2026 tagret authors
// SPDX-License-Identifier: Apache-2.0
//
// One JSON document drives every command: generator + model + train + eval
// sections plus an output directory. Unknown keys are rejected at every
// level. The resolved config written beside each run's outputs annotates
// every key with where its value came from (user, paper-appendix default, or
// toy-scale default) and is itself a loadable config.

#pragma once

#include <optional>
#include <string>

#include "tagret/backbone.hpp"
#include "tagret/synth_data.hpp"
#include "tagret/train_eval.hpp"

#include <json.hpp>

namespace tagret::cli {

struct RunConfig {
  synth::GeneratorConfig generator;
  model::BackboneConfig model_cfg;
  train::TrainConfig train_cfg;
  std::size_t eval_threads = 1;
  std::string out_dir = "runs/out";

  nlohmann::json user_keys;  // flattened dotted keys present in the source doc

  // fully-resolved document (loadable as a config again)
  nlohmann::json resolved() const;
  // dotted key -> "user" | "paper-appendix" | "toy-default"
  nlohmann::json provenance() const;
  void write_resolved(const std::string& dir) const;
};

struct Overrides {
  std::optional<uint64_t> seed;     // applies to generator and train seeds
  std::optional<std::string> out;
  std::optional<std::size_t> threads;
};

RunConfig parse_run_config(const nlohmann::json& doc, const Overrides& overrides);
// Reads the file, applies TAGRET_* environment overrides, then CLI overrides.
RunConfig load_run_config(const std::string& path, const Overrides& cli_overrides);
RunConfig default_run_config(const Overrides& cli_overrides);

}  // namespace tagret::cli
