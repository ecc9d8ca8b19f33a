// Copyright (c) 2026 tagret authors
// SPDX-License-Identifier: Apache-2.0
//
// Named trainable parameters and the single-file checkpoint format:
// 8-byte magic, u64 JSON length, JSON header (config + blob index), then all
// parameter values as little-endian float32 blobs.

#pragma once

#include <cstddef>
#include <deque>
#include <string>
#include <vector>

#include "tagret/mat.hpp"

#include <json.hpp>

namespace tagret {

struct Param {
  std::string name;
  Mat value;
  Mat grad;
  bool decay = true;      // participates in weight decay
  std::size_t index = 0;  // creation order, used by GradBuffer slots
};

class ParamStore {
 public:
  Param& create(const std::string& name, std::size_t rows, std::size_t cols,
                double init_std, Rng& rng, bool decay = true);
  Param& create_filled(const std::string& name, std::size_t rows, std::size_t cols,
                       double fill, bool decay = true);

  Param* find(const std::string& name);
  const Param* find(const std::string& name) const;
  Param& at(const std::string& name);

  std::vector<Param*> all();  // creation order
  std::vector<const Param*> all() const;
  std::size_t count() const { return params_.size(); }
  std::size_t scalar_count() const;

  void zero_grads();
  bool grads_finite() const;

 private:
  std::deque<Param> params_;
};

// Per-thread parameter-gradient accumulator. Worker threads write into their
// own buffer; buffers are reduced into the store in a fixed order so that
// results are deterministic for a fixed thread count.
class GradBuffer {
 public:
  explicit GradBuffer(const ParamStore& store);
  Mat& slot(const Param& p) { return slots_[p.index]; }
  void add_into(ParamStore& store) const;

 private:
  std::vector<Mat> slots_;
};

std::string serialize_checkpoint(const ParamStore& store, const nlohmann::json& config);
nlohmann::json checkpoint_config(const std::string& bytes);
// Fills matching names; throws DataError on missing names or shape mismatch.
void apply_checkpoint(const std::string& bytes, ParamStore& store);

void save_checkpoint_file(const std::string& path, const ParamStore& store,
                          const nlohmann::json& config);

}  // namespace tagret
