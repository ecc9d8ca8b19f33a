// Copyright (c) 2026 tagret authors
// SPDX-License-Identifier: Apache-2.0

#include "tagret/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>
#include <sstream>

namespace tagret::synth {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(ViewRegime r) {
  switch (r) {
    case ViewRegime::AerialOnly: return "aerial";
    case ViewRegime::GroundOnly: return "ground";
    case ViewRegime::Mixed: return "mixed";
  }
  return "mixed";
}

ViewRegime view_regime_from_string(const std::string& s) {
  if (s == "aerial") return ViewRegime::AerialOnly;
  if (s == "ground") return ViewRegime::GroundOnly;
  if (s == "mixed") return ViewRegime::Mixed;
  throw ConfigError("unknown view regime: " + s + " (expected aerial|ground|mixed)");
}

std::vector<std::size_t> GeneratorConfig::resolved_slot_vocab() const {
  if (!slot_vocab_sizes.empty()) return slot_vocab_sizes;
  return std::vector<std::size_t>(attribute_slots, 6);
}

std::size_t GeneratorConfig::resolved_test_id_start() const {
  return test_id_start == SIZE_MAX ? train_id_start + train_identities : test_id_start;
}

void GeneratorConfig::validate() const {
  if (height < 16 || width < 16 || height % 4 != 0 || width % 4 != 0)
    throw ConfigError("image size must be >= 16 and divisible by 4");
  if (channels != 3) throw ConfigError("renderer requires channels = 3");
  if (attribute_slots < 3)
    throw ConfigError("need at least 3 attribute slots (top, bottom, shoes)");
  const auto vocab = resolved_slot_vocab();
  if (vocab.size() != attribute_slots)
    throw ConfigError("slot_vocab_sizes length must equal attribute_slots");
  for (std::size_t v : vocab)
    if (v < 2 || v > kPaletteSize)
      throw ConfigError("per-slot vocabulary size must be in [2, " +
                        std::to_string(kPaletteSize) + "]");
  if (caption_retention <= 0.0 || caption_retention > 1.0)
    throw ConfigError("caption_retention must be in (0, 1]");
  if (captions_per_image < 1) throw ConfigError("captions_per_image must be >= 1");
  if (images_per_identity < 2) throw ConfigError("images_per_identity must be >= 2");
  if (t_max < 4) throw ConfigError("t_max too small for [SOS] token [EOS]");
  if (train_identities == 0 || test_identities == 0)
    throw ConfigError("both splits need at least one identity");

  const std::size_t tstart = resolved_test_id_start();
  const std::size_t train_end = train_id_start + train_identities;
  const std::size_t test_end = tstart + test_identities;
  const bool overlap = train_id_start < test_end && tstart < train_end;
  if (overlap) throw ConfigError("train and test identity ranges overlap");
}

GeneratorConfig generator_config_from_json(const json& j) {
  GeneratorConfig c;
  static const std::set<std::string> known = {
      "height", "width", "channels", "attribute_slots", "slot_vocab_sizes",
      "caption_retention", "captions_per_image", "t_max", "train_identities",
      "test_identities", "train_id_start", "test_id_start", "images_per_identity",
      "train_regime", "test_regime", "noise_amplitude", "seed"};
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw ConfigError("unknown generator config key: " + k);

  if (j.contains("height")) c.height = j["height"];
  if (j.contains("width")) c.width = j["width"];
  if (j.contains("channels")) c.channels = j["channels"];
  if (j.contains("attribute_slots")) c.attribute_slots = j["attribute_slots"];
  if (j.contains("slot_vocab_sizes"))
    c.slot_vocab_sizes = j["slot_vocab_sizes"].get<std::vector<std::size_t>>();
  if (j.contains("caption_retention")) c.caption_retention = j["caption_retention"];
  if (j.contains("captions_per_image")) c.captions_per_image = j["captions_per_image"];
  if (j.contains("t_max")) c.t_max = j["t_max"];
  if (j.contains("train_identities")) c.train_identities = j["train_identities"];
  if (j.contains("test_identities")) c.test_identities = j["test_identities"];
  if (j.contains("train_id_start")) c.train_id_start = j["train_id_start"];
  if (j.contains("test_id_start")) c.test_id_start = j["test_id_start"];
  if (j.contains("images_per_identity")) c.images_per_identity = j["images_per_identity"];
  if (j.contains("train_regime")) c.train_regime = view_regime_from_string(j["train_regime"]);
  if (j.contains("test_regime")) c.test_regime = view_regime_from_string(j["test_regime"]);
  if (j.contains("noise_amplitude")) c.noise_amplitude = j["noise_amplitude"];
  if (j.contains("seed")) c.seed = j["seed"];
  return c;
}

json generator_config_to_json(const GeneratorConfig& c) {
  return json{{"height", c.height},
              {"width", c.width},
              {"channels", c.channels},
              {"attribute_slots", c.attribute_slots},
              {"slot_vocab_sizes", c.resolved_slot_vocab()},
              {"caption_retention", c.caption_retention},
              {"captions_per_image", c.captions_per_image},
              {"t_max", c.t_max},
              {"train_identities", c.train_identities},
              {"test_identities", c.test_identities},
              {"train_id_start", c.train_id_start},
              {"test_id_start", c.resolved_test_id_start()},
              {"images_per_identity", c.images_per_identity},
              {"train_regime", to_string(c.train_regime)},
              {"test_regime", to_string(c.test_regime)},
              {"noise_amplitude", c.noise_amplitude},
              {"seed", c.seed}};
}

// --- vocabulary ---------------------------------------------------------------

namespace {
const char* kSlotNames[8] = {"top", "bottom", "shoes", "hat",
                             "bag", "hair",   "sleeve", "pattern"};

std::string slot_name(std::size_t s) {
  return s < 8 ? kSlotNames[s] : "slot" + std::to_string(s);
}
}  // namespace

TokenVocab::TokenVocab(const GeneratorConfig& cfg)
    : slots_(cfg.attribute_slots), vocab_sizes_(cfg.resolved_slot_vocab()) {
  names_ = {"[PAD]", "[SOS]", "[EOS]"};
  for (std::size_t s = 0; s < slots_; ++s) names_.push_back(slot_name(s) + ":");
  value_base_.resize(slots_);
  for (std::size_t s = 0; s < slots_; ++s) {
    value_base_[s] = names_.size();
    for (std::size_t v = 0; v < vocab_sizes_[s]; ++v)
      names_.push_back(slot_name(s) + "=" + std::to_string(v));
  }
}

std::size_t TokenVocab::slot_marker(std::size_t slot) const {
  if (slot >= slots_) throw ConfigError("slot_marker: slot out of range");
  return 3 + slot;
}

std::size_t TokenVocab::value_token(std::size_t slot, std::size_t value) const {
  if (slot >= slots_ || value >= vocab_sizes_[slot])
    throw ConfigError("value_token: out of range");
  return value_base_[slot] + value;
}

json TokenVocab::to_json() const {
  json tokens = json::array();
  for (const auto& n : names_) tokens.push_back(n);
  return json{{"size", names_.size()}, {"tokens", tokens}};
}

// --- identities ----------------------------------------------------------------

namespace {

double identity_capacity(const std::vector<std::size_t>& vocab) {
  double capacity = 1.0;
  for (std::size_t v : vocab) capacity *= static_cast<double>(v);
  return capacity;
}

// Walks the documented identity stream until `count` distinct attribute
// vectors have been produced; returns them in stream order.
std::vector<std::vector<std::size_t>> identity_stream(uint64_t seed,
                                                      const std::vector<std::size_t>& vocab,
                                                      std::size_t count) {
  if (static_cast<double>(count) > identity_capacity(vocab))
    throw ConfigError("identity capacity exhausted: vocabulary supports " +
                      std::to_string(static_cast<std::size_t>(identity_capacity(vocab))) +
                      " identities, requested " + std::to_string(count));
  Rng rng(mix_seed(seed, kIdentityStreamTag));
  std::set<std::vector<std::size_t>> seen;
  std::vector<std::vector<std::size_t>> out;
  std::vector<std::size_t> attrs(vocab.size());
  while (out.size() < count) {
    for (std::size_t s = 0; s < vocab.size(); ++s) attrs[s] = rng.below(vocab[s]);
    if (seen.insert(attrs).second) out.push_back(attrs);
  }
  return out;
}

}  // namespace

namespace {
// generate_identity and compose_caption accept any attribute space with >= 1
// slots; the 3-slot minimum only binds once the renderer is involved.
void validate_attribute_space(const GeneratorConfig& cfg) {
  if (cfg.attribute_slots < 1) throw ConfigError("need at least one attribute slot");
  const auto vocab = cfg.resolved_slot_vocab();
  if (vocab.size() != cfg.attribute_slots)
    throw ConfigError("slot_vocab_sizes length must equal attribute_slots");
  for (std::size_t v : vocab)
    if (v < 2) throw ConfigError("per-slot vocabulary size must be >= 2");
}
}  // namespace

IdentitySpec generate_identity(uint64_t seed, std::size_t id_index, const GeneratorConfig& cfg) {
  validate_attribute_space(cfg);
  auto stream = identity_stream(seed, cfg.resolved_slot_vocab(), id_index + 1);
  return IdentitySpec{static_cast<int>(id_index), std::move(stream.back())};
}

// --- rendering -------------------------------------------------------------------

namespace {
constexpr double kPalette[kPaletteSize][3] = {
    {0.9, 0.1, 0.1},  // red
    {0.1, 0.9, 0.1},  // green
    {0.1, 0.1, 0.9},  // blue
    {0.9, 0.9, 0.1},  // yellow
    {0.9, 0.1, 0.9},  // magenta
    {0.1, 0.9, 0.9},  // cyan
    {0.9, 0.5, 0.1},  // orange
    {0.5, 0.1, 0.9},  // violet
};

// layout in 32-grid units, scaled to the configured canvas
Rect scaled(const GeneratorConfig& cfg, std::size_t r0, std::size_t r1, std::size_t c0,
            std::size_t c1) {
  return Rect{r0 * cfg.height / 32, r1 * cfg.height / 32, c0 * cfg.width / 32,
              c1 * cfg.width / 32};
}
}  // namespace

const double* palette_color(std::size_t value) { return kPalette[value % kPaletteSize]; }

std::vector<std::pair<std::size_t, Rect>> painted_regions(int view, const GeneratorConfig& cfg) {
  const std::size_t A = cfg.attribute_slots;
  std::vector<std::pair<std::size_t, Rect>> out;
  auto put = [&](std::size_t slot, Rect r) {
    if (slot < A) out.emplace_back(slot, r);
  };
  if (view == kViewGround) {
    put(3, scaled(cfg, 0, 4, 12, 20));    // hat
    put(5, scaled(cfg, 4, 6, 12, 20));    // hair
    put(0, scaled(cfg, 6, 16, 8, 24));    // top
    put(7, scaled(cfg, 12, 15, 10, 13));  // pattern patch on the torso
    put(6, scaled(cfg, 8, 14, 24, 28));   // sleeve
    put(1, scaled(cfg, 16, 26, 10, 22));  // bottom
    put(2, scaled(cfg, 28, 32, 8, 24));   // shoes band, ground view only
    put(4, scaled(cfg, 10, 16, 0, 4));    // bag
  } else {
    // top-down: head area dominates, lower body foreshortened, no shoes
    put(3, scaled(cfg, 4, 12, 11, 21));
    put(5, scaled(cfg, 12, 15, 11, 21));
    put(0, scaled(cfg, 16, 26, 8, 24));
    put(7, scaled(cfg, 17, 20, 9, 12));
    put(6, scaled(cfg, 16, 22, 5, 8));
    put(1, scaled(cfg, 26, 29, 13, 19));
    put(4, scaled(cfg, 18, 24, 25, 29));
  }
  return out;
}

std::vector<float> render_image(const IdentitySpec& identity, int view, uint64_t noise_seed,
                                const GeneratorConfig& cfg) {
  if (view != kViewAerial && view != kViewGround)
    throw ConfigError("render_image: view must be 0 (aerial) or 1 (ground)");
  if (identity.attributes.size() != cfg.attribute_slots)
    throw ConfigError("render_image: attribute count mismatch");

  const std::size_t H = cfg.height, W = cfg.width, C = cfg.channels;
  std::vector<double> img(H * W * C,
                          view == kViewAerial ? kBackgroundAerial : kBackgroundGround);
  auto px = [&](std::size_t r, std::size_t c, std::size_t ch) -> double& {
    return img[(r * W + c) * C + ch];
  };

  for (const auto& [slot, rect] : painted_regions(view, cfg)) {
    const double* color = palette_color(identity.attributes[slot]);
    for (std::size_t r = rect.r0; r < rect.r1; ++r)
      for (std::size_t c = rect.c0; c < rect.c1; ++c)
        for (std::size_t ch = 0; ch < C; ++ch) px(r, c, ch) = color[ch];
  }

  if (view == kViewAerial) {
    // 2x box downsample then nearest upsample emulates the lower native
    // resolution of high-altitude captures
    std::vector<double> low(H / 2 * W / 2 * C);
    for (std::size_t r = 0; r < H / 2; ++r)
      for (std::size_t c = 0; c < W / 2; ++c)
        for (std::size_t ch = 0; ch < C; ++ch)
          low[(r * (W / 2) + c) * C + ch] =
              0.25 * (px(2 * r, 2 * c, ch) + px(2 * r, 2 * c + 1, ch) +
                      px(2 * r + 1, 2 * c, ch) + px(2 * r + 1, 2 * c + 1, ch));
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < W; ++c)
        for (std::size_t ch = 0; ch < C; ++ch)
          px(r, c, ch) = low[((r / 2) * (W / 2) + c / 2) * C + ch];
  }

  if (cfg.noise_amplitude > 0.0) {
    Rng rng(mix_seed(noise_seed, kNoiseStreamTag));
    for (double& v : img) {
      v += cfg.noise_amplitude * (2.0 * rng.uniform() - 1.0);
      v = std::min(1.0, std::max(0.0, v));
    }
  }

  std::vector<float> out(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) out[i] = static_cast<float>(img[i]);
  return out;
}

// --- captions -----------------------------------------------------------------------

std::vector<int> compose_caption(const IdentitySpec& identity, uint64_t caption_seed,
                                 const GeneratorConfig& cfg) {
  validate_attribute_space(cfg);
  if (identity.attributes.size() != cfg.attribute_slots)
    throw ConfigError("compose_caption: attribute count mismatch");
  const std::size_t A = cfg.attribute_slots;
  TokenVocab vocab(cfg);
  Rng rng(caption_seed);

  const std::size_t min_keep =
      static_cast<std::size_t>(std::ceil(cfg.caption_retention * static_cast<double>(A)));
  std::size_t keep = min_keep + rng.below(A - min_keep + 1);
  // never exceed the token budget: [SOS] + 2 per slot + [EOS]
  keep = std::min(keep, (cfg.t_max - 2) / 2);

  std::vector<std::size_t> order(A);
  for (std::size_t i = 0; i < A; ++i) order[i] = i;
  for (std::size_t i = A - 1; i >= 1; --i) std::swap(order[i], order[rng.below(i + 1)]);

  std::vector<int> tokens;
  tokens.push_back(static_cast<int>(vocab.sos()));
  for (std::size_t k = 0; k < keep; ++k) {
    const std::size_t slot = order[k];
    tokens.push_back(static_cast<int>(vocab.slot_marker(slot)));
    tokens.push_back(static_cast<int>(vocab.value_token(slot, identity.attributes[slot])));
  }
  tokens.push_back(static_cast<int>(vocab.eos()));
  return tokens;
}

// --- dataset build / load -------------------------------------------------------------

namespace {

int view_for(ViewRegime regime, std::size_t sample_slot) {
  switch (regime) {
    case ViewRegime::AerialOnly: return kViewAerial;
    case ViewRegime::GroundOnly: return kViewGround;
    case ViewRegime::Mixed: return sample_slot % 2 == 0 ? kViewAerial : kViewGround;
  }
  return kViewGround;
}

struct SplitPlan {
  std::string name;
  std::size_t id_start;
  std::size_t id_count;
  ViewRegime regime;
};

DatasetManifest write_split(const GeneratorConfig& cfg, const std::string& out_dir,
                            const SplitPlan& plan, std::size_t stream_lo,
                            const std::vector<std::vector<std::size_t>>& attrs) {
  const fs::path dir = fs::path(out_dir) / plan.name;
  fs::create_directories(dir);

  DatasetManifest m;
  m.split = plan.name;
  m.seed = cfg.seed;
  m.n_identities = plan.id_count;
  m.captions_per_image = cfg.captions_per_image;
  m.height = cfg.height;
  m.width = cfg.width;
  m.channels = cfg.channels;
  m.t_max = cfg.t_max;
  m.generator_config = generator_config_to_json(cfg);

  std::string images, tokens;
  std::size_t sample = 0;
  for (std::size_t i = 0; i < plan.id_count; ++i) {
    const std::size_t id_index = plan.id_start + i;
    const IdentitySpec ident{static_cast<int>(id_index), attrs.at(id_index - stream_lo)};
    for (std::size_t j = 0; j < cfg.images_per_identity; ++j) {
      const int view = view_for(plan.regime, j);
      const uint64_t sample_uid = id_index * cfg.images_per_identity + j;

      ManifestRecord rec;
      rec.sample = sample;
      rec.id_index = static_cast<int>(id_index);
      rec.view = view;
      rec.image_offset = images.size();

      const auto img = render_image(
          ident, view, mix_seed(cfg.seed, mix_seed(kNoiseStreamTag, sample_uid)), cfg);
      for (float v : img) append_f32le(images, v);

      for (std::size_t k = 0; k < cfg.captions_per_image; ++k) {
        const uint64_t cap_seed =
            mix_seed(mix_seed(cfg.seed, kCaptionStreamTag), sample_uid * 1000003ULL + k);
        const auto caps = compose_caption(ident, cap_seed, cfg);
        rec.captions.emplace_back(tokens.size(), caps.size());
        for (int t : caps) append_u32le(tokens, static_cast<uint32_t>(t));
      }

      if (view == kViewAerial)
        ++m.aerial_count;
      else
        ++m.ground_count;
      m.records.push_back(std::move(rec));
      ++sample;
    }
  }
  m.n_records = sample;

  std::ostringstream mf;
  json header{{"type", "header"},
              {"split", m.split},
              {"seed", m.seed},
              {"n_records", m.n_records},
              {"n_identities", m.n_identities},
              {"captions_per_image", m.captions_per_image},
              {"image_shape", {m.height, m.width, m.channels}},
              {"t_max", m.t_max},
              {"view_counts", {{"aerial", m.aerial_count}, {"ground", m.ground_count}}},
              {"generator_config", m.generator_config}};
  mf << header.dump() << "\n";
  for (const auto& rec : m.records) {
    json caps = json::array();
    for (const auto& [off, len] : rec.captions) caps.push_back({{"offset", off}, {"len", len}});
    json line{{"type", "record"},   {"sample", rec.sample},         {"id", rec.id_index},
              {"view", rec.view},   {"image_offset", rec.image_offset},
              {"captions", caps}};
    mf << line.dump() << "\n";
  }
  write_file((dir / "manifest.jsonl").string(), mf.str());

  write_file((dir / "images.bin").string(), images);
  write_file((dir / "images.json").string(),
             json{{"dtype", "f32le"},
                  {"count", m.n_records},
                  {"shape", {m.height, m.width, m.channels}},
                  {"checksum", "fnv1a64:" + fnv1a64_hex(images)}}
                 .dump(2));
  write_file((dir / "tokens.bin").string(), tokens);
  write_file((dir / "tokens.json").string(),
             json{{"dtype", "i32le"},
                  {"total_tokens", tokens.size() / 4},
                  {"checksum", "fnv1a64:" + fnv1a64_hex(tokens)}}
                 .dump(2));
  return m;
}

}  // namespace

std::pair<DatasetManifest, DatasetManifest> build_dataset(const GeneratorConfig& cfg,
                                                          const std::string& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir);

  const std::size_t test_start = cfg.resolved_test_id_start();
  const std::size_t hi =
      std::max(cfg.train_id_start + cfg.train_identities, test_start + cfg.test_identities);

  // one pass over the identity stream covers both splits
  const auto attrs = identity_stream(cfg.seed, cfg.resolved_slot_vocab(), hi);

  TokenVocab vocab(cfg);
  write_file((fs::path(out_dir) / "vocab.json").string(), vocab.to_json().dump(2));

  DatasetManifest train = write_split(
      cfg, out_dir, {"train", cfg.train_id_start, cfg.train_identities, cfg.train_regime}, 0,
      attrs);
  DatasetManifest test = write_split(
      cfg, out_dir, {"test", test_start, cfg.test_identities, cfg.test_regime}, 0, attrs);
  return {std::move(train), std::move(test)};
}

DatasetManifest load_manifest(const std::string& dataset_dir, const std::string& split) {
  const fs::path dir = fs::path(dataset_dir) / split;
  std::istringstream in(read_file((dir / "manifest.jsonl").string()));
  std::string line;
  if (!std::getline(in, line)) throw DataError("manifest.jsonl: empty file");
  json header = json::parse(line);
  if (header.value("type", "") != "header") throw DataError("manifest.jsonl: missing header line");

  DatasetManifest m;
  m.split = header.at("split");
  m.seed = header.at("seed");
  m.n_records = header.at("n_records");
  m.n_identities = header.at("n_identities");
  m.captions_per_image = header.at("captions_per_image");
  m.height = header.at("image_shape")[0];
  m.width = header.at("image_shape")[1];
  m.channels = header.at("image_shape")[2];
  m.t_max = header.at("t_max");
  m.aerial_count = header.at("view_counts").at("aerial");
  m.ground_count = header.at("view_counts").at("ground");
  m.generator_config = header.at("generator_config");

  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json rec = json::parse(line);
    ManifestRecord r;
    r.sample = rec.at("sample");
    r.id_index = rec.at("id");
    r.view = rec.at("view");
    r.image_offset = rec.at("image_offset");
    for (const auto& c : rec.at("captions"))
      r.captions.emplace_back(c.at("offset").get<std::size_t>(), c.at("len").get<std::size_t>());
    m.records.push_back(std::move(r));
  }
  if (m.records.size() != m.n_records)
    throw DataError("manifest.jsonl: record count does not match header");
  return m;
}

namespace {
void verify_checksum(const std::string& bytes, const std::string& sidecar_path) {
  json side = json::parse(read_file(sidecar_path));
  const std::string want = side.at("checksum");
  const std::string got = "fnv1a64:" + fnv1a64_hex(bytes);
  if (want != got)
    throw DataError("checksum mismatch for " + sidecar_path + ": expected " + want + ", got " +
                    got);
}
}  // namespace

DatasetReader::DatasetReader(const std::string& dataset_dir, const std::string& split)
    : manifest_(load_manifest(dataset_dir, split)) {
  const fs::path dir = fs::path(dataset_dir) / split;
  images_ = read_file((dir / "images.bin").string());
  tokens_ = read_file((dir / "tokens.bin").string());
  verify_checksum(images_, (dir / "images.json").string());
  verify_checksum(tokens_, (dir / "tokens.json").string());
}

Sample DatasetReader::sample(std::size_t record_idx, std::size_t caption_idx) const {
  if (record_idx >= manifest_.records.size())
    throw DataError("sample index out of range: " + std::to_string(record_idx));
  const ManifestRecord& rec = manifest_.records[record_idx];
  if (caption_idx >= rec.captions.size())
    throw DataError("caption index out of range: " + std::to_string(caption_idx));

  Sample s;
  s.view = rec.view;
  s.id_index = rec.id_index;

  const std::size_t n = manifest_.height * manifest_.width * manifest_.channels;
  s.image.resize(n);
  for (std::size_t i = 0; i < n; ++i) s.image[i] = read_f32le(images_, rec.image_offset + 4 * i);

  const auto& [off, len] = rec.captions[caption_idx];
  s.tokens.resize(len);
  for (std::size_t i = 0; i < len; ++i)
    s.tokens[i] = static_cast<int>(read_u32le(tokens_, off + 4 * i));
  return s;
}

std::vector<Sample> DatasetReader::load_batch(const std::vector<std::size_t>& indices,
                                              std::size_t caption_idx) const {
  std::vector<Sample> out;
  out.reserve(indices.size());
  for (std::size_t idx : indices) out.push_back(sample(idx, caption_idx));
  return out;
}

}  // namespace tagret::synth
