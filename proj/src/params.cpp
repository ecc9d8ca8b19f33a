// Copyright (c) 2026 tagret authors
// SPDX-License-Identifier: Apache-2.0

#include "tagret/params.hpp"

#include <cmath>

namespace tagret {

namespace {
constexpr char kMagic[8] = {'T', 'A', 'G', 'C', 'K', 'P', 'T', '1'};
}

Param& ParamStore::create(const std::string& name, std::size_t rows, std::size_t cols,
                          double init_std, Rng& rng, bool decay) {
  if (find(name)) throw ConfigError("duplicate parameter name: " + name);
  params_.emplace_back();
  Param& p = params_.back();
  p.name = name;
  p.value.resize(rows, cols);
  p.grad.resize(rows, cols, 0.0);
  p.decay = decay;
  p.index = params_.size() - 1;
  if (init_std != 0.0) fill_normal(p.value, rng, init_std);
  return p;
}

Param& ParamStore::create_filled(const std::string& name, std::size_t rows, std::size_t cols,
                                 double fill, bool decay) {
  if (find(name)) throw ConfigError("duplicate parameter name: " + name);
  params_.emplace_back();
  Param& p = params_.back();
  p.name = name;
  p.value.resize(rows, cols, fill);
  p.grad.resize(rows, cols, 0.0);
  p.decay = decay;
  p.index = params_.size() - 1;
  return p;
}

Param* ParamStore::find(const std::string& name) {
  for (Param& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

const Param* ParamStore::find(const std::string& name) const {
  for (const Param& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

Param& ParamStore::at(const std::string& name) {
  Param* p = find(name);
  if (!p) throw ConfigError("unknown parameter: " + name);
  return *p;
}

std::vector<Param*> ParamStore::all() {
  std::vector<Param*> out;
  out.reserve(params_.size());
  for (Param& p : params_) out.push_back(&p);
  return out;
}

std::vector<const Param*> ParamStore::all() const {
  std::vector<const Param*> out;
  out.reserve(params_.size());
  for (const Param& p : params_) out.push_back(&p);
  return out;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const Param& p : params_) n += p.value.size();
  return n;
}

void ParamStore::zero_grads() {
  for (Param& p : params_) p.grad.fill(0.0);
}

bool ParamStore::grads_finite() const {
  for (const Param& p : params_)
    if (!all_finite(p.grad)) return false;
  return true;
}

GradBuffer::GradBuffer(const ParamStore& store) {
  slots_.reserve(store.count());
  for (const Param* p : store.all()) slots_.emplace_back(p->value.rows(), p->value.cols(), 0.0);
}

void GradBuffer::add_into(ParamStore& store) const {
  for (Param* p : store.all()) {
    const Mat& s = slots_[p->index];
    for (std::size_t i = 0; i < s.size(); ++i) p->grad.at(i) += s.at(i);
  }
}

std::string serialize_checkpoint(const ParamStore& store, const nlohmann::json& config) {
  nlohmann::json index = nlohmann::json::array();
  std::string blob;
  for (const Param* p : store.all()) {
    index.push_back({{"name", p->name},
                     {"rows", p->value.rows()},
                     {"cols", p->value.cols()},
                     {"offset", blob.size()}});
    for (std::size_t i = 0; i < p->value.size(); ++i)
      append_f32le(blob, static_cast<float>(p->value.at(i)));
  }
  nlohmann::json header = {{"config", config}, {"params", index}};
  const std::string hj = header.dump();

  std::string out;
  out.append(kMagic, sizeof(kMagic));
  append_u64le(out, hj.size());
  out += hj;
  out += blob;
  return out;
}

namespace {

nlohmann::json parse_header(const std::string& bytes, std::size_t* blob_off) {
  if (bytes.size() < 16 || bytes.compare(0, 8, kMagic, 8) != 0)
    throw DataError("checkpoint: bad magic");
  const uint64_t jlen = read_u64le(bytes, 8);
  if (16 + jlen > bytes.size()) throw DataError("checkpoint: truncated header");
  nlohmann::json header = nlohmann::json::parse(bytes.substr(16, jlen));
  *blob_off = 16 + jlen;
  return header;
}

}  // namespace

nlohmann::json checkpoint_config(const std::string& bytes) {
  std::size_t blob_off = 0;
  return parse_header(bytes, &blob_off).at("config");
}

void apply_checkpoint(const std::string& bytes, ParamStore& store) {
  std::size_t blob_off = 0;
  nlohmann::json header = parse_header(bytes, &blob_off);
  for (const auto& e : header.at("params")) {
    const std::string name = e.at("name");
    Param* p = store.find(name);
    if (!p) throw DataError("checkpoint: unexpected parameter " + name);
    const std::size_t rows = e.at("rows"), cols = e.at("cols");
    if (rows != p->value.rows() || cols != p->value.cols())
      throw DataError("checkpoint: shape mismatch for " + name);
    const std::size_t off = blob_off + e.at("offset").get<std::size_t>();
    if (off + 4 * rows * cols > bytes.size()) throw DataError("checkpoint: truncated blob");
    for (std::size_t i = 0; i < rows * cols; ++i)
      p->value.at(i) = static_cast<double>(read_f32le(bytes, off + 4 * i));
  }
}

void save_checkpoint_file(const std::string& path, const ParamStore& store,
                          const nlohmann::json& config) {
  write_file(path, serialize_checkpoint(store, config));
}

}  // namespace tagret
