// Copyright (c) 2026 tagret authors
// SPDX-License-Identifier: Apache-2.0
//
// Training loop (AdamW, linear warmup + cosine decay), retrieval evaluation
// (caption queries against the image gallery, R@k and mAP), router-accuracy
// measurement, finite-difference gradient checking, the ablation runner, and
// embedding dumps.
//
// Threading: per-sample encoder work fans out over a fixed number of worker
// threads with per-thread gradient buffers reduced in thread order, so runs
// are reproducible for a fixed thread count and bit-identical single-threaded.

#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tagret/backbone.hpp"
#include "tagret/objectives.hpp"
#include "tagret/synth_data.hpp"

#include <json.hpp>

namespace tagret::train {

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr_init = 1e-6;
  double lr_peak = 1e-4;
  double lr_final = 5e-6;
  double warmup_fraction = 0.1;
  double weight_decay = 0.02;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  uint64_t seed = 0;
  std::size_t threads = 1;
  bool teacher_force_routing = false;  // routing mode: predicted | teacher-forced
  loss::LossConfig loss;

  void validate() const;
};

TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json train_config_to_json(const TrainConfig& c);

// Linear ramp lr_init -> lr_peak over the warmup fraction of total_steps,
// then cosine decay lr_peak -> lr_final.
double lr_schedule(std::size_t step, std::size_t total_steps, const TrainConfig& cfg);

class AdamW {
 public:
  AdamW(ParamStore& store, const TrainConfig& cfg);
  void step(double lr);

 private:
  ParamStore* store_;
  TrainConfig cfg_;
  std::vector<Mat> m_;
  std::vector<Mat> v_;
  std::size_t t_ = 0;
};

struct TrainResult {
  std::string checkpoint_path;
  std::string log_path;
  double first_loss = 0.0;
  double final_loss = 0.0;
  std::size_t steps = 0;
};

// Deterministic given (seed, config, dataset). Writes checkpoint.tagckpt and
// train_log.jsonl under out_dir; on a non-finite loss it saves the last good
// parameters plus a diagnostic record and rethrows.
TrainResult train(model::Model& m, const synth::DatasetReader& data, const TrainConfig& cfg,
                  const std::string& out_dir);

// Inference-time similarity: the mean of the global and local cosines.
double compute_similarity(const Mat& v_cls, const Mat& v_tse, const Mat& t_eos, const Mat& t_tse);

struct MetricsSlice {
  double r1 = 0.0, r5 = 0.0, r10 = 0.0, map = 0.0;  // percentages
  std::size_t queries = 0, gallery = 0;
};

struct RouterAccuracy {
  double aerial = -1.0, ground = -1.0, overall = -1.0;  // -1 when unmeasured
  std::size_t aerial_total = 0, ground_total = 0;
};

struct RetrievalMetrics {
  MetricsSlice overall;
  MetricsSlice aerial_gallery;
  MetricsSlice ground_gallery;
  RouterAccuracy router;
  nlohmann::json to_json() const;
};

struct EncodedGallery {
  Mat v_cls, v_tse, v_view;  // one row per record
  std::vector<int> ids, views;
  std::vector<int> router_pred;  // one entry per (record, MoE block)
  std::vector<int> router_gt;
};

struct EncodedQueries {
  Mat t_eos, t_tse;  // one row per (record, caption)
  std::vector<int> ids;
};

EncodedGallery encode_gallery(const model::Model& m, const synth::DatasetReader& data,
                              std::size_t threads = 1);
EncodedQueries encode_queries(const model::Model& m, const synth::DatasetReader& data,
                              std::size_t threads = 1);

// Mean |cos(v_cls, v_view)| over the gallery: the decoupling measure.
double mean_abs_cls_view_cosine(const EncodedGallery& gallery);

// Rank-based metrics from a scores matrix (queries x gallery). Equal scores
// keep gallery-index order (stable sort).
MetricsSlice metrics_from_scores(const Mat& scores, const std::vector<int>& query_ids,
                                 const std::vector<int>& gallery_ids);

// Every caption is one query against the full image gallery; ties order by
// gallery index. train_id_range, when given, asserts split disjointness.
RetrievalMetrics evaluate(const model::Model& m, const synth::DatasetReader& test,
                          std::size_t threads = 1,
                          std::optional<std::pair<int, int>> train_id_range = std::nullopt);

RouterAccuracy router_accuracy(const model::Model& m, const synth::DatasetReader& data,
                               std::size_t threads = 1);

// Expert-usage histogram (top-k selection counts per expert, split by
// ground-truth view) plus router accuracy over a dataset.
struct RoutingInspection {
  RouterAccuracy router;
  std::vector<std::vector<std::size_t>> usage_by_view;  // [view][expert]
  std::size_t tokens_routed = 0;
  nlohmann::json to_json() const;
};

RoutingInspection inspect_routing(const model::Model& m, const synth::DatasetReader& data,
                                  std::size_t threads = 1);

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  bool routing_exclusion_ok = false;    // image router grads vanish without L_view
  std::vector<std::string> dead_params;  // zero analytic gradient under the full loss
  std::size_t probes = 0;
};

GradCheckResult grad_check(model::Model& m, const synth::DatasetReader& data,
                           const loss::LossConfig& loss_cfg, std::size_t batch_size = 4,
                           double fd_epsilon = 1e-5, std::size_t probes_per_param = 2,
                           uint64_t seed = 0);

struct AblationVariant {
  std::string name;
  model::BlockType block = model::BlockType::HrMoe;
  bool view_loss = true;
  bool ortho_loss = true;
  std::optional<synth::ViewRegime> train_regime;
  std::optional<synth::ViewRegime> test_regime;
};

std::vector<AblationVariant> ablation_variants_from_json(const nlohmann::json& j);
// The six-row component grid: vit / vanilla moe / hr-moe, then hr-moe with
// each decoupling loss and with both.
std::vector<AblationVariant> default_component_grid();

struct AblationRow {
  std::string variant;
  RetrievalMetrics metrics;
  double step0_loss = 0.0;
  double step0_l_ga = 0.0;
};

// Trains and evaluates one model per variant with identical seeds and data
// (regenerating the dataset only when a variant overrides a view regime).
// Writes metrics CSV to csv_path and run artifacts under work_dir.
std::vector<AblationRow> run_ablation(const synth::GeneratorConfig& gen_cfg,
                                      const model::BackboneConfig& model_cfg,
                                      const TrainConfig& train_cfg,
                                      const std::vector<AblationVariant>& variants,
                                      const std::string& work_dir, const std::string& csv_path);

std::string metrics_csv_header();
std::string metrics_csv_row(const std::string& variant, const RetrievalMetrics& m);

// v_cls per record as float32 rows with an id/view JSON sidecar.
void dump_embeddings(const model::Model& m, const synth::DatasetReader& data,
                     const std::string& path_prefix, std::size_t threads = 1);

}  // namespace tagret::train
