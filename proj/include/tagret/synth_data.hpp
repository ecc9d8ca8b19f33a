// Copyright (c) 2026 tagret authors
// SPDX-License-Identifier: Apache-2.0
//
// Procedural multi-view person dataset: colored attribute regions rendered
// under a ground (eye-level, full body) or aerial (top-down, foreshortened,
// low-res) layout, with view-agnostic templated token captions and
// identity-disjoint splits.
//
// Every random draw follows a documented recipe so tests can recompute it
// independently:
//   identity stream:  Rng(mix_seed(seed, kIdentityStreamTag)); candidate
//                     attribute vectors are drawn slot-by-slot with
//                     below(vocab[s]); the id_index-th *distinct* candidate
//                     is the identity.
//   caption stream:   Rng(caption_seed); keep_count = min_keep +
//                     below(A - min_keep + 1); Fisher-Yates shuffle of slot
//                     indices (i from A-1 down to 1, j = below(i+1)); emit
//                     the first keep_count slots in shuffled order.
//   noise stream:     Rng(mix_seed(noise_seed, kNoiseStreamTag)); per value,
//                     row-major, x += amplitude * (2*uniform() - 1).
// build_dataset derives per-sample seeds as
//   noise_seed   = mix_seed(seed, mix_seed(kNoiseStreamTag, sample_uid))
//   caption_seed = mix_seed(mix_seed(seed, kCaptionStreamTag),
//                           sample_uid * 1000003 + caption_idx)
// with sample_uid = id_index * images_per_identity + sample_slot.

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tagret/mat.hpp"

#include <json.hpp>

namespace tagret::synth {

inline constexpr uint64_t kIdentityStreamTag = 0xA1;
inline constexpr uint64_t kNoiseStreamTag = 0x4e4f;
inline constexpr uint64_t kCaptionStreamTag = 0x4341;

inline constexpr int kViewAerial = 0;
inline constexpr int kViewGround = 1;

enum class ViewRegime { AerialOnly, GroundOnly, Mixed };

std::string to_string(ViewRegime r);
ViewRegime view_regime_from_string(const std::string& s);

struct GeneratorConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t channels = 3;

  std::size_t attribute_slots = 8;                // A
  std::vector<std::size_t> slot_vocab_sizes;      // empty -> A slots of 6
  double caption_retention = 0.8;                 // minimum kept fraction
  std::size_t captions_per_image = 2;
  std::size_t t_max = 24;

  std::size_t train_identities = 100;
  std::size_t test_identities = 50;
  std::size_t train_id_start = 0;
  std::size_t test_id_start = SIZE_MAX;           // SIZE_MAX -> right after train
  std::size_t images_per_identity = 4;
  ViewRegime train_regime = ViewRegime::Mixed;
  ViewRegime test_regime = ViewRegime::Mixed;

  double noise_amplitude = 0.05;
  uint64_t seed = 0;

  std::vector<std::size_t> resolved_slot_vocab() const;
  std::size_t resolved_test_id_start() const;
  void validate() const;  // ConfigError on violation
};

GeneratorConfig generator_config_from_json(const nlohmann::json& j);
nlohmann::json generator_config_to_json(const GeneratorConfig& c);

struct IdentitySpec {
  int id_index = 0;
  std::vector<std::size_t> attributes;  // one value per slot
};

// Token id layout: 0=[PAD], 1=[SOS], 2=[EOS], then A slot markers, then the
// per-slot value tokens in slot order.
struct TokenVocab {
  explicit TokenVocab(const GeneratorConfig& cfg);

  std::size_t pad() const { return 0; }
  std::size_t sos() const { return 1; }
  std::size_t eos() const { return 2; }
  std::size_t slot_marker(std::size_t slot) const;
  std::size_t value_token(std::size_t slot, std::size_t value) const;
  std::size_t size() const { return names_.size(); }
  const std::string& name(std::size_t token) const { return names_.at(token); }
  nlohmann::json to_json() const;

 private:
  std::size_t slots_;
  std::vector<std::size_t> vocab_sizes_;
  std::vector<std::size_t> value_base_;
  std::vector<std::string> names_;
};

// Rendering layout, exposed so tests can inspect painted regions.
struct Rect {
  std::size_t r0, r1, c0, c1;  // half-open, in pixels
};

// (slot, rect) pairs in paint order for the given view. The shoes slot (2)
// appears only in the ground layout.
std::vector<std::pair<std::size_t, Rect>> painted_regions(int view, const GeneratorConfig& cfg);

inline constexpr std::size_t kShoeSlot = 2;
inline constexpr std::size_t kPaletteSize = 8;
// RGB palette for attribute values (channel values from {0.1, 0.9} mostly).
const double* palette_color(std::size_t value);  // -> double[3]
// View-correlated capture bias: high-altitude frames come out flatter and
// darker than eye-level CCTV frames, on top of the 2x resolution loss.
inline constexpr double kBackgroundAerial = 0.70;
inline constexpr double kBackgroundGround = 0.80;

// Operations ----------------------------------------------------------------

IdentitySpec generate_identity(uint64_t seed, std::size_t id_index, const GeneratorConfig& cfg);

std::vector<float> render_image(const IdentitySpec& identity, int view, uint64_t noise_seed,
                                const GeneratorConfig& cfg);

std::vector<int> compose_caption(const IdentitySpec& identity, uint64_t caption_seed,
                                 const GeneratorConfig& cfg);

struct ManifestRecord {
  std::size_t sample = 0;
  int id_index = 0;
  int view = 0;
  std::size_t image_offset = 0;                               // bytes into images.bin
  std::vector<std::pair<std::size_t, std::size_t>> captions;  // (byte offset, token count)
};

struct DatasetManifest {
  std::string split;
  uint64_t seed = 0;
  std::size_t n_records = 0;
  std::size_t n_identities = 0;
  std::size_t captions_per_image = 0;
  std::size_t height = 0, width = 0, channels = 0, t_max = 0;
  std::size_t aerial_count = 0, ground_count = 0;
  std::vector<ManifestRecord> records;
  nlohmann::json generator_config;
};

// Writes vocab.json plus train/ and test/ split directories under out_dir.
// Returns the two manifests (train, test).
std::pair<DatasetManifest, DatasetManifest> build_dataset(const GeneratorConfig& cfg,
                                                          const std::string& out_dir);

DatasetManifest load_manifest(const std::string& dataset_dir, const std::string& split);

struct Sample {
  std::vector<float> image;  // H*W*C, row-major, channel fastest
  std::vector<int> tokens;
  int view = 0;
  int id_index = 0;
};

// Read-only random access over one split; verifies sidecar checksums at open.
class DatasetReader {
 public:
  DatasetReader(const std::string& dataset_dir, const std::string& split);

  const DatasetManifest& manifest() const { return manifest_; }
  std::size_t size() const { return manifest_.n_records; }

  Sample sample(std::size_t record_idx, std::size_t caption_idx) const;
  std::vector<Sample> load_batch(const std::vector<std::size_t>& indices,
                                 std::size_t caption_idx = 0) const;

 private:
  DatasetManifest manifest_;
  std::string images_;
  std::string tokens_;
};

}  // namespace tagret::synth
