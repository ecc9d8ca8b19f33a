// Copyright (c) 2026 tagret authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <random>
#include <set>

#include "tagret/synth_data.hpp"

using namespace tagret;
using namespace tagret::synth;
namespace fs = std::filesystem;

namespace {

GeneratorConfig tiny_config() {
  GeneratorConfig cfg;
  cfg.train_identities = 10;
  cfg.test_identities = 5;
  cfg.images_per_identity = 2;
  cfg.noise_amplitude = 0.0;
  cfg.seed = 3;
  return cfg;
}

std::string temp_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("tagret_synth_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

// Independent re-derivation of the identity stream recipe, built directly on
// std::mt19937_64 and a local splitmix implementation.
std::vector<std::size_t> rederive_identity(uint64_t seed, std::size_t id_index,
                                           const std::vector<std::size_t>& vocab) {
  auto sm = [](uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  };
  std::mt19937_64 gen(sm(seed ^ sm(0xA1)));
  std::set<std::vector<std::size_t>> seen;
  std::vector<std::size_t> attrs(vocab.size());
  while (true) {
    for (std::size_t s = 0; s < vocab.size(); ++s) attrs[s] = gen() % vocab[s];
    if (seen.insert(attrs).second && seen.size() == id_index + 1) return attrs;
  }
}

}  // namespace

TEST_CASE("generate_identity: pigeonhole capacity error") {
  GeneratorConfig cfg;
  cfg.attribute_slots = 2;
  cfg.slot_vocab_sizes = {2, 2};
  for (std::size_t i = 0; i < 4; ++i) CHECK_NOTHROW(generate_identity(0, i, cfg));
  CHECK_THROWS_WITH_AS(generate_identity(0, 4, cfg), doctest::Contains("capacity"), ConfigError);
}

TEST_CASE("generate_identity: deterministic and unique") {
  GeneratorConfig cfg = tiny_config();
  auto a = generate_identity(11, 7, cfg);
  auto b = generate_identity(11, 7, cfg);
  CHECK(a.id_index == 7);
  CHECK(a.attributes == b.attributes);

  std::set<std::vector<std::size_t>> seen;
  for (std::size_t i = 0; i < 40; ++i)
    CHECK(seen.insert(generate_identity(11, i, cfg).attributes).second);
}

TEST_CASE("generate_identity: matches independently re-derived stream") {
  GeneratorConfig cfg;  // default: 8 slots of 6 values
  auto got = generate_identity(7, 3, cfg);
  CHECK(got.attributes == rederive_identity(7, 3, cfg.resolved_slot_vocab()));
}

TEST_CASE("render_image: views share attribute colors but differ in layout") {
  GeneratorConfig cfg = tiny_config();
  const IdentitySpec ident = generate_identity(5, 1, cfg);
  const auto ground = render_image(ident, kViewGround, 0, cfg);
  const auto aerial = render_image(ident, kViewAerial, 0, cfg);
  CHECK(ground != aerial);

  const double* top = palette_color(ident.attributes[0]);
  auto has_exact_color = [&](const std::vector<float>& img) {
    for (std::size_t p = 0; p < img.size(); p += 3)
      if (img[p] == static_cast<float>(top[0]) && img[p + 1] == static_cast<float>(top[1]) &&
          img[p + 2] == static_cast<float>(top[2]))
        return true;
    return false;
  };
  CHECK(has_exact_color(ground));
  CHECK(has_exact_color(aerial));
}

TEST_CASE("render_image: zero-noise renders are bit identical") {
  GeneratorConfig cfg = tiny_config();
  const IdentitySpec ident = generate_identity(5, 0, cfg);
  CHECK(render_image(ident, kViewGround, 42, cfg) == render_image(ident, kViewGround, 42, cfg));
  // and with noise, the noise_seed pins the result
  cfg.noise_amplitude = 0.05;
  CHECK(render_image(ident, kViewAerial, 42, cfg) == render_image(ident, kViewAerial, 42, cfg));
  CHECK(render_image(ident, kViewAerial, 42, cfg) != render_image(ident, kViewAerial, 43, cfg));
}

TEST_CASE("render_image: shoes band present on ground, absent from aerial") {
  GeneratorConfig cfg = tiny_config();
  // craft an identity whose shoe color differs from every other attribute
  IdentitySpec ident;
  ident.id_index = 0;
  ident.attributes = {0, 1, 5, 0, 1, 0, 1, 0};  // shoes = cyan, nothing else cyan
  const double* shoe = palette_color(5);

  const auto ground = render_image(ident, kViewGround, 0, cfg);
  const auto aerial = render_image(ident, kViewAerial, 0, cfg);

  // dominant color inside the ground shoes rect equals the shoe attribute
  Rect shoes{};
  bool found = false;
  for (const auto& [slot, rect] : painted_regions(kViewGround, cfg))
    if (slot == kShoeSlot) {
      shoes = rect;
      found = true;
    }
  REQUIRE(found);
  std::size_t hits = 0, total = 0;
  for (std::size_t r = shoes.r0; r < shoes.r1; ++r)
    for (std::size_t c = shoes.c0; c < shoes.c1; ++c) {
      const std::size_t p = (r * cfg.width + c) * 3;
      ++total;
      if (ground[p] == static_cast<float>(shoe[0]) && ground[p + 1] == static_cast<float>(shoe[1]) &&
          ground[p + 2] == static_cast<float>(shoe[2]))
        ++hits;
    }
  CHECK(hits == total);

  // aerial layout never paints the shoe slot
  for (const auto& [slot, rect] : painted_regions(kViewAerial, cfg)) CHECK(slot != kShoeSlot);
  // and no aerial pixel carries the exact shoe color
  for (std::size_t p = 0; p < aerial.size(); p += 3) {
    const bool match = aerial[p] == static_cast<float>(shoe[0]) &&
                       aerial[p + 1] == static_cast<float>(shoe[1]) &&
                       aerial[p + 2] == static_cast<float>(shoe[2]);
    CHECK_FALSE(match);
  }
}

TEST_CASE("compose_caption: tokens frame attributes, never contradict identity") {
  GeneratorConfig cfg = tiny_config();
  TokenVocab vocab(cfg);
  const IdentitySpec ident = generate_identity(9, 2, cfg);

  for (uint64_t cs = 0; cs < 200; ++cs) {
    const auto cap = compose_caption(ident, cs, cfg);
    REQUIRE(cap.size() >= 2);
    CHECK(cap.size() <= cfg.t_max);
    CHECK(cap.front() == static_cast<int>(vocab.sos()));
    CHECK(cap.back() == static_cast<int>(vocab.eos()));
    // interior alternates slot-marker, value; value always matches the identity
    std::size_t kept = 0;
    for (std::size_t i = 1; i + 1 < cap.size(); i += 2) {
      const std::size_t slot = static_cast<std::size_t>(cap[i]) - 3;
      REQUIRE(slot < cfg.attribute_slots);
      CHECK(cap[i + 1] == static_cast<int>(vocab.value_token(slot, ident.attributes[slot])));
      ++kept;
    }
    // >= 80% retention of 8 slots means at least 7 attributes per caption
    CHECK(kept >= 7);
    CHECK(kept <= cfg.attribute_slots);
  }
}

TEST_CASE("compose_caption: same identity yields same attribute set modulo dropout") {
  GeneratorConfig cfg = tiny_config();
  const IdentitySpec ident = generate_identity(1, 0, cfg);
  const auto a = compose_caption(ident, 10, cfg);
  const auto b = compose_caption(ident, 20, cfg);
  // token multisets may differ only by dropped slots, never by value
  std::map<int, int> slot_value_a, slot_value_b;
  for (std::size_t i = 1; i + 1 < a.size(); i += 2) slot_value_a[a[i]] = a[i + 1];
  for (std::size_t i = 1; i + 1 < b.size(); i += 2) slot_value_b[b[i]] = b[i + 1];
  for (const auto& [slot, val] : slot_value_a)
    if (slot_value_b.count(slot)) CHECK(slot_value_b[slot] == val);
}

TEST_CASE("build_dataset: spec example counts and disjoint splits") {
  GeneratorConfig cfg;
  cfg.train_identities = 100;
  cfg.test_identities = 50;
  cfg.images_per_identity = 4;
  cfg.noise_amplitude = 0.0;
  const std::string dir = temp_dir("counts");
  auto [train, test] = build_dataset(cfg, dir);

  CHECK(train.n_records == 400);
  CHECK(test.n_records == 200);

  std::set<int> train_ids, test_ids;
  for (const auto& r : train.records) train_ids.insert(r.id_index);
  for (const auto& r : test.records) test_ids.insert(r.id_index);
  CHECK(train_ids.size() == 100);
  CHECK(test_ids.size() == 50);
  for (int id : test_ids) CHECK(train_ids.count(id) == 0);

  // independent recount: manifest lines and the raw image payload size
  std::istringstream mf(read_file(dir + "/train/manifest.jsonl"));
  std::string line;
  std::size_t lines = 0;
  while (std::getline(mf, line))
    if (!line.empty()) ++lines;
  CHECK(lines == 401);  // header + one line per record
  const std::string images = read_file(dir + "/train/images.bin");
  CHECK(images.size() == 400 * cfg.height * cfg.width * cfg.channels * 4);

  // mixed regime: each identity has both views
  std::map<int, std::set<int>> views_by_id;
  for (const auto& r : train.records) views_by_id[r.id_index].insert(r.view);
  for (const auto& [id, views] : views_by_id) CHECK(views.size() == 2);
  fs::remove_all(dir);
}

TEST_CASE("build_dataset: aerial-only regime and range overlap error") {
  GeneratorConfig cfg = tiny_config();
  cfg.train_regime = ViewRegime::AerialOnly;
  const std::string dir = temp_dir("aonly");
  auto [train, test] = build_dataset(cfg, dir);
  for (const auto& r : train.records) CHECK(r.view == kViewAerial);
  CHECK(train.aerial_count == train.n_records);
  fs::remove_all(dir);

  GeneratorConfig bad = tiny_config();
  bad.test_id_start = 5;  // collides with train ids [0, 10)
  CHECK_THROWS_AS(build_dataset(bad, temp_dir("overlap")), ConfigError);
}

TEST_CASE("dataset reader: round trip, ordering, per-view counts") {
  GeneratorConfig cfg = tiny_config();
  cfg.noise_amplitude = 0.04;
  const std::string dir = temp_dir("reader");
  auto [train, test] = build_dataset(cfg, dir);

  DatasetReader reader(dir, "train");
  CHECK(reader.size() == train.n_records);

  // round trip equals a direct re-render with the documented seed derivation
  const auto& rec = train.records[3];
  const uint64_t sample_uid =
      static_cast<uint64_t>(rec.id_index) * cfg.images_per_identity + (3 % cfg.images_per_identity);
  const auto expect = render_image(generate_identity(cfg.seed, rec.id_index, cfg), rec.view,
                                   mix_seed(cfg.seed, mix_seed(kNoiseStreamTag, sample_uid)), cfg);
  const Sample got = reader.sample(3, 0);
  CHECK(got.image == expect);
  CHECK(got.id_index == rec.id_index);
  CHECK(got.view == rec.view);

  // ordering contract
  auto batch = reader.load_batch({2, 0});
  CHECK(batch.size() == 2);
  CHECK(batch[0].id_index == train.records[2].id_index);
  CHECK(batch[1].id_index == train.records[0].id_index);

  // full-manifest recount of views matches the header
  std::vector<std::size_t> all(reader.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  std::size_t aerial = 0, ground = 0;
  for (const auto& s : reader.load_batch(all)) (s.view == kViewAerial ? aerial : ground)++;
  CHECK(aerial == train.aerial_count);
  CHECK(ground == train.ground_count);

  CHECK_THROWS_AS(reader.sample(reader.size(), 0), DataError);
  CHECK_THROWS_AS(reader.sample(0, cfg.captions_per_image), DataError);
  fs::remove_all(dir);
}

TEST_CASE("dataset reader: corrupted payload fails the checksum") {
  GeneratorConfig cfg = tiny_config();
  const std::string dir = temp_dir("corrupt");
  build_dataset(cfg, dir);
  std::string images = read_file(dir + "/train/images.bin");
  images[17] = static_cast<char>(images[17] ^ 0x1);
  write_file(dir + "/train/images.bin", images);
  CHECK_THROWS_WITH_AS(DatasetReader(dir, "train"), doctest::Contains("checksum"), DataError);
  fs::remove_all(dir);
}

TEST_CASE("build_dataset: byte-identical across two runs with the same seed") {
  GeneratorConfig cfg = tiny_config();
  const std::string d1 = temp_dir("det1"), d2 = temp_dir("det2");
  build_dataset(cfg, d1);
  build_dataset(cfg, d2);
  for (const char* rel : {"/vocab.json", "/train/manifest.jsonl", "/train/images.bin",
                          "/train/tokens.bin", "/test/images.bin", "/test/tokens.bin"})
    CHECK(read_file(d1 + rel) == read_file(d2 + rel));
  fs::remove_all(d1);
  fs::remove_all(d2);
}
