// Copyright (c) 2026 tagret authors
// SPDX-License-Identifier: Apache-2.0
//
// tagret: dataset generation, training, evaluation, ablations, routing
// inspection, and gradient checking for the aerial-ground retrieval testbed.
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
// failure. Failures emit one machine-readable JSON record on stderr.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "tagret/run_config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tagret;

namespace {

struct GlobalArgs {
  std::string config_path;
  std::optional<uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> threads;
};

cli::RunConfig resolve_config(const GlobalArgs& g) {
  cli::Overrides ov{g.seed, g.out, g.threads};
  if (g.config_path.empty()) return cli::default_run_config(ov);
  return cli::load_run_config(g.config_path, ov);
}

std::string dataset_dir(const cli::RunConfig& rc) {
  return (fs::path(rc.out_dir) / "dataset").string();
}

// Builds the dataset if it is not already present at the expected path.
void ensure_dataset(const cli::RunConfig& rc) {
  const std::string dir = dataset_dir(rc);
  if (!fs::exists(fs::path(dir) / "train" / "manifest.jsonl"))
    synth::build_dataset(rc.generator, dir);
}

model::BackboneConfig model_config_for_training(const cli::RunConfig& rc,
                                                const synth::DatasetReader& data) {
  model::BackboneConfig mcfg = rc.model_cfg;
  if (mcfg.n_identities == 0) mcfg.n_identities = data.manifest().n_identities;
  const std::size_t vocab_needed = synth::TokenVocab(rc.generator).size();
  if (mcfg.vocab_size < vocab_needed)
    throw ConfigError("model vocab_size " + std::to_string(mcfg.vocab_size) +
                      " is smaller than the dataset vocabulary (" +
                      std::to_string(vocab_needed) + ")");
  mcfg.teacher_force_routing = rc.train_cfg.teacher_force_routing;
  return mcfg;
}

struct LoadedCheckpoint {
  model::Model model;
  json config;
};

LoadedCheckpoint load_model(const std::string& ckpt_path) {
  const std::string bytes = read_file(ckpt_path);
  json config = checkpoint_config(bytes);
  model::Model m = model::build_model(model::backbone_config_from_json(config.at("model")), 0);
  apply_checkpoint(bytes, m.store);
  return {std::move(m), std::move(config)};
}

std::optional<std::pair<int, int>> train_range_from(const json& ckpt_config) {
  if (!ckpt_config.contains("dataset")) return std::nullopt;
  const json& d = ckpt_config["dataset"];
  const int start = d.at("train_id_start");
  const int count = d.at("train_identities");
  return std::make_pair(start, start + count);
}

void print_metrics(const train::RetrievalMetrics& m) {
  auto row = [](const char* name, const train::MetricsSlice& s) {
    std::printf("%-16s %7.2f %7.2f %7.2f %7.2f  %6zu %8zu\n", name, s.r1, s.r5, s.r10, s.map,
                s.queries, s.gallery);
  };
  std::printf("%-16s %7s %7s %7s %7s  %6s %8s\n", "gallery slice", "R@1", "R@5", "R@10", "mAP",
              "query", "gallery");
  row("overall", m.overall);
  if (m.aerial_gallery.gallery > 0) row("aerial", m.aerial_gallery);
  if (m.ground_gallery.gallery > 0) row("ground", m.ground_gallery);
  if (m.router.overall >= 0.0)
    std::printf("router accuracy: aerial %.4f  ground %.4f  overall %.4f\n", m.router.aerial,
                m.router.ground, m.router.overall);
}

int cmd_gen_data(const GlobalArgs& g) {
  cli::RunConfig rc = resolve_config(g);
  const std::string dir = dataset_dir(rc);
  auto [train_m, test_m] = synth::build_dataset(rc.generator, dir);
  rc.write_resolved(dir);
  std::printf("dataset written to %s (train %zu records / test %zu records)\n", dir.c_str(),
              train_m.n_records, test_m.n_records);
  return 0;
}

int cmd_train(const GlobalArgs& g) {
  cli::RunConfig rc = resolve_config(g);
  ensure_dataset(rc);
  synth::DatasetReader data(dataset_dir(rc), "train");
  model::Model m = model::build_model(model_config_for_training(rc, data), rc.train_cfg.seed);
  rc.write_resolved(rc.out_dir);
  train::TrainResult r = train::train(m, data, rc.train_cfg, rc.out_dir);
  std::printf("trained %zu steps: loss %.4f -> %.4f\ncheckpoint: %s\nlog: %s\n", r.steps,
              r.first_loss, r.final_loss, r.checkpoint_path.c_str(), r.log_path.c_str());
  return 0;
}

int cmd_eval(const GlobalArgs& g, const std::string& ckpt, const std::string& data_dir,
             const std::string& split) {
  cli::RunConfig rc = resolve_config(g);
  LoadedCheckpoint loaded = load_model(ckpt);
  synth::DatasetReader data(data_dir, split);
  train::RetrievalMetrics metrics =
      train::evaluate(loaded.model, data, rc.eval_threads, train_range_from(loaded.config));
  print_metrics(metrics);

  const std::string out = g.out ? *g.out : (fs::path(ckpt).parent_path()).string();
  fs::create_directories(out);
  write_file((fs::path(out) / "metrics.csv").string(),
             train::metrics_csv_header() + "\n" + train::metrics_csv_row("eval", metrics) + "\n");
  write_file((fs::path(out) / "metrics.json").string(), metrics.to_json().dump(2));
  return 0;
}

int cmd_ablate(const GlobalArgs& g, const std::string& variants_path) {
  cli::RunConfig rc = resolve_config(g);
  std::vector<train::AblationVariant> variants =
      variants_path.empty()
          ? train::default_component_grid()
          : train::ablation_variants_from_json(json::parse(read_file(variants_path)));

  const std::string csv = (fs::path(rc.out_dir) / "ablation.csv").string();
  rc.write_resolved(rc.out_dir);
  auto rows = train::run_ablation(rc.generator, rc.model_cfg, rc.train_cfg, variants,
                                  (fs::path(rc.out_dir) / "ablation").string(), csv);
  std::printf("%s\n", train::metrics_csv_header().c_str());
  for (const auto& row : rows)
    std::printf("%s\n", train::metrics_csv_row(row.variant, row.metrics).c_str());
  std::printf("written: %s\n", csv.c_str());
  return 0;
}

int cmd_grad_check(const GlobalArgs& g) {
  cli::RunConfig rc = resolve_config(g);
  ensure_dataset(rc);
  synth::DatasetReader data(dataset_dir(rc), "train");
  model::Model m = model::build_model(model_config_for_training(rc, data), rc.train_cfg.seed);
  train::GradCheckResult r =
      train::grad_check(m, data, rc.train_cfg.loss, 4, 1e-5, 2, rc.train_cfg.seed);

  json report = {{"max_rel_err", r.max_rel_err},
                 {"worst_param", r.worst_param},
                 {"probes", r.probes},
                 {"routing_exclusion_ok", r.routing_exclusion_ok},
                 {"dead_params", r.dead_params}};
  const bool pass = r.max_rel_err < 1e-4 && r.routing_exclusion_ok && r.dead_params.empty();
  report["pass"] = pass;
  std::printf("%s\n", report.dump(2).c_str());
  if (!pass) throw NumericError("gradient check failed (max relative error " +
                                std::to_string(r.max_rel_err) + ")");
  return 0;
}

int cmd_inspect_routing(const GlobalArgs& g, const std::string& ckpt,
                        const std::string& data_dir, const std::string& split) {
  cli::RunConfig rc = resolve_config(g);
  LoadedCheckpoint loaded = load_model(ckpt);
  if (loaded.model.cfg.block_type != model::BlockType::HrMoe)
    throw ConfigError("inspect-routing: checkpoint has no hierarchical router");
  synth::DatasetReader data(data_dir, split);
  train::RoutingInspection ins = train::inspect_routing(loaded.model, data, rc.eval_threads);
  const std::string dump = ins.to_json().dump(2);
  std::printf("%s\n", dump.c_str());
  const std::string out = g.out ? *g.out : (fs::path(ckpt).parent_path()).string();
  fs::create_directories(out);
  write_file((fs::path(out) / "routing.json").string(), dump);
  return 0;
}

int cmd_dump_embeddings(const GlobalArgs& g, const std::string& ckpt,
                        const std::string& data_dir, const std::string& split) {
  cli::RunConfig rc = resolve_config(g);
  LoadedCheckpoint loaded = load_model(ckpt);
  synth::DatasetReader data(data_dir, split);
  const std::string out = g.out ? *g.out : (fs::path(ckpt).parent_path()).string();
  fs::create_directories(out);
  const std::string prefix = (fs::path(out) / ("embeddings_" + split)).string();
  train::dump_embeddings(loaded.model, data, prefix, rc.eval_threads);
  std::printf("embeddings written to %s.bin / %s.json\n", prefix.c_str(), prefix.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tagret: text-to-image retrieval across aerial and ground views"};
  app.require_subcommand(1);
  // let global flags appear after the subcommand name
  app.fallthrough();

  GlobalArgs g;
  app.add_option("--config", g.config_path, "run configuration JSON")->envname("TAGRET_CONFIG");
  uint64_t seed_val = 0;
  auto* seed_opt = app.add_option("--seed", seed_val, "override generator and train seeds");
  std::string out_val;
  auto* out_opt = app.add_option("--out", out_val, "override the output directory");
  std::size_t threads_val = 1;
  auto* threads_opt = app.add_option("--threads", threads_val, "worker threads");

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  auto* tr = app.add_subcommand("train", "train a model on the generated dataset");

  std::string ckpt, data_dir, split = "test", variants_path;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("checkpoint", ckpt, "checkpoint file")->required();
  ev->add_option("dataset", data_dir, "dataset directory")->required();
  ev->add_option("--split", split, "dataset split (default test)");

  auto* ab = app.add_subcommand("ablate", "train and evaluate the ablation grid");
  ab->add_option("--variants", variants_path, "variants JSON (defaults to the component grid)");

  auto* gc = app.add_subcommand("grad-check", "finite-difference gradient check");

  auto* ir = app.add_subcommand("inspect-routing", "router accuracy and expert usage");
  ir->add_option("checkpoint", ckpt, "checkpoint file")->required();
  ir->add_option("dataset", data_dir, "dataset directory")->required();
  ir->add_option("--split", split, "dataset split (default test)");

  auto* de = app.add_subcommand("dump-embeddings", "write v_cls embeddings with labels");
  de->add_option("checkpoint", ckpt, "checkpoint file")->required();
  de->add_option("dataset", data_dir, "dataset directory")->required();
  de->add_option("--split", split, "dataset split (default test)");

  CLI11_PARSE(app, argc, argv);

  if (*seed_opt) g.seed = seed_val;
  if (*out_opt) g.out = out_val;
  if (*threads_opt) g.threads = threads_val;

  try {
    if (gen->parsed()) return cmd_gen_data(g);
    if (tr->parsed()) return cmd_train(g);
    if (ev->parsed()) return cmd_eval(g, ckpt, data_dir, split);
    if (ab->parsed()) return cmd_ablate(g, variants_path);
    if (gc->parsed()) return cmd_grad_check(g);
    if (ir->parsed()) return cmd_inspect_routing(g, ckpt, data_dir, split);
    if (de->parsed()) return cmd_dump_embeddings(g, ckpt, data_dir, split);
  } catch (const ConfigError& e) {
    std::cerr << json{{"error", "config"}, {"message", e.what()}}.dump() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << json{{"error", "data"}, {"message", e.what()}}.dump() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << json{{"error", "numeric"}, {"message", e.what()}}.dump() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "internal"}, {"message", e.what()}}.dump() << "\n";
    return 1;
  }
  return 0;
}
