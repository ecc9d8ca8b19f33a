// Copyright (c) 2026 tagret authors
// SPDX-License-Identifier: Apache-2.0

#include "tagret/train_eval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <sstream>
#include <thread>

namespace tagret::train {

namespace fs = std::filesystem;
using nlohmann::json;

// --- config -----------------------------------------------------------------

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("epochs must be >= 1");
  if (batch_size < 2) throw ConfigError("batch_size must be >= 2 for contrastive batches");
  if (!(lr_init > 0.0) || !(lr_peak > 0.0) || !(lr_final > 0.0))
    throw ConfigError("learning rates must be positive");
  if (lr_init > lr_peak) throw ConfigError("lr_init must not exceed lr_peak");
  if (lr_final > lr_peak) throw ConfigError("lr_final must not exceed lr_peak");
  if (warmup_fraction < 0.0 || warmup_fraction > 1.0)
    throw ConfigError("warmup_fraction must be in [0, 1]");
  if (threads == 0) throw ConfigError("threads must be >= 1");
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  static const std::vector<std::string> known = {
      "epochs",        "batch_size", "lr_init",     "lr_peak",       "lr_final",
      "warmup_fraction", "weight_decay", "adam_beta1", "adam_beta2", "adam_eps",
      "seed",          "threads",    "teacher_force_routing",        "lambda_id",
      "lambda_ortho",  "alpha",      "epsilon",     "view_loss",     "ortho_loss",
      "ortho_variant"};
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end())
      throw ConfigError("unknown train config key: " + k);

  if (j.contains("epochs")) c.epochs = j["epochs"];
  if (j.contains("batch_size")) c.batch_size = j["batch_size"];
  if (j.contains("lr_init")) c.lr_init = j["lr_init"];
  if (j.contains("lr_peak")) c.lr_peak = j["lr_peak"];
  if (j.contains("lr_final")) c.lr_final = j["lr_final"];
  if (j.contains("warmup_fraction")) c.warmup_fraction = j["warmup_fraction"];
  if (j.contains("weight_decay")) c.weight_decay = j["weight_decay"];
  if (j.contains("adam_beta1")) c.adam_beta1 = j["adam_beta1"];
  if (j.contains("adam_beta2")) c.adam_beta2 = j["adam_beta2"];
  if (j.contains("adam_eps")) c.adam_eps = j["adam_eps"];
  if (j.contains("seed")) c.seed = j["seed"];
  if (j.contains("threads")) c.threads = j["threads"];
  if (j.contains("teacher_force_routing")) c.teacher_force_routing = j["teacher_force_routing"];
  if (j.contains("lambda_id")) c.loss.lambda_id = j["lambda_id"];
  if (j.contains("lambda_ortho")) c.loss.lambda_ortho = j["lambda_ortho"];
  if (j.contains("alpha")) c.loss.alpha = j["alpha"];
  if (j.contains("epsilon")) c.loss.epsilon = j["epsilon"];
  if (j.contains("view_loss")) c.loss.view_loss_enabled = j["view_loss"];
  if (j.contains("ortho_loss")) c.loss.ortho_loss_enabled = j["ortho_loss"];
  if (j.contains("ortho_variant"))
    c.loss.ortho_variant = loss::ortho_variant_from_string(j["ortho_variant"]);
  return c;
}

json train_config_to_json(const TrainConfig& c) {
  return json{{"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"lr_init", c.lr_init},
              {"lr_peak", c.lr_peak},
              {"lr_final", c.lr_final},
              {"warmup_fraction", c.warmup_fraction},
              {"weight_decay", c.weight_decay},
              {"adam_beta1", c.adam_beta1},
              {"adam_beta2", c.adam_beta2},
              {"adam_eps", c.adam_eps},
              {"seed", c.seed},
              {"threads", c.threads},
              {"teacher_force_routing", c.teacher_force_routing},
              {"lambda_id", c.loss.lambda_id},
              {"lambda_ortho", c.loss.lambda_ortho},
              {"alpha", c.loss.alpha},
              {"epsilon", c.loss.epsilon},
              {"view_loss", c.loss.view_loss_enabled},
              {"ortho_loss", c.loss.ortho_loss_enabled},
              {"ortho_variant", loss::to_string(c.loss.ortho_variant)}};
}

double lr_schedule(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
  if (total_steps == 0) return cfg.lr_peak;
  if (step > total_steps) throw ConfigError("lr_schedule: step beyond total_steps");
  const std::size_t warmup =
      static_cast<std::size_t>(std::llround(cfg.warmup_fraction * double(total_steps)));
  if (step < warmup)
    return cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * double(step) / double(warmup);
  if (step >= total_steps) return cfg.lr_final;
  if (total_steps == warmup) return cfg.lr_peak;
  const double progress = double(step - warmup) / double(total_steps - warmup);
  constexpr double pi = 3.14159265358979323846;
  return cfg.lr_final + (cfg.lr_peak - cfg.lr_final) * 0.5 * (1.0 + std::cos(pi * progress));
}

// --- optimizer -------------------------------------------------------------------

AdamW::AdamW(ParamStore& store, const TrainConfig& cfg) : store_(&store), cfg_(cfg) {
  for (const Param* p : store.all()) {
    m_.emplace_back(p->value.rows(), p->value.cols(), 0.0);
    v_.emplace_back(p->value.rows(), p->value.cols(), 0.0);
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.adam_beta1, double(t_));
  const double bc2 = 1.0 - std::pow(cfg_.adam_beta2, double(t_));
  for (Param* p : store_->all()) {
    Mat& m = m_[p->index];
    Mat& v = v_[p->index];
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double grad = p->grad.at(i);
      m.at(i) = cfg_.adam_beta1 * m.at(i) + (1.0 - cfg_.adam_beta1) * grad;
      v.at(i) = cfg_.adam_beta2 * v.at(i) + (1.0 - cfg_.adam_beta2) * grad * grad;
      const double mhat = m.at(i) / bc1;
      const double vhat = v.at(i) / bc2;
      double update = mhat / (std::sqrt(vhat) + cfg_.adam_eps);
      if (p->decay) update += cfg_.weight_decay * p->value.at(i);
      p->value.at(i) -= lr * update;
    }
  }
}

// --- batched forward/backward ------------------------------------------------------

namespace {

struct SampleForward {
  std::unique_ptr<Graph> graph;
  model::VisualFeatures vf;
  model::TextFeatures tf;
};

void run_chunks(std::size_t n, std::size_t threads, const std::function<void(std::size_t, std::size_t, std::size_t)>& fn) {
  // fn(thread_idx, begin, end); chunks are contiguous so reductions in thread
  // order are deterministic for a fixed thread count
  threads = std::max<std::size_t>(1, std::min(threads, n == 0 ? 1 : n));
  if (threads == 1) {
    fn(0, 0, n);
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t per = (n + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t b = t * per, e = std::min(n, b + per);
    if (b >= e) break;
    pool.emplace_back([&fn, t, b, e] { fn(t, b, e); });
  }
  for (auto& th : pool) th.join();
}

struct StepOutcome {
  loss::LossReport report;
  std::vector<std::size_t> expert_usage;  // top-k selection counts per expert
  std::size_t router_hits = 0;
  std::size_t router_total = 0;
};

// Two-stage step: per-sample encoder graphs (parallel), a serial batch-loss
// graph over feature leaves, then per-sample seeded backward (parallel).
StepOutcome forward_backward(model::Model& m, const std::vector<synth::Sample>& samples,
                             const std::vector<int>& class_ids, const TrainConfig& cfg) {
  const std::size_t B = samples.size();
  const std::size_t threads = std::max<std::size_t>(1, cfg.threads);

  std::vector<SampleForward> fwd(B);
  std::vector<GradBuffer> bufs;
  bufs.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) bufs.emplace_back(m.store);

  run_chunks(B, threads, [&](std::size_t t, std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      fwd[i].graph = std::make_unique<Graph>();
      Graph& g = *fwd[i].graph;
      fwd[i].vf = model::encode_image(g, samples[i].image, m, samples[i].view, &bufs[t]);
      fwd[i].tf = model::encode_text(g, samples[i].tokens, m, &bufs[t]);
    }
  });

  // serial batch-loss graph over feature leaves
  Graph bg;
  loss::BatchFeatures batch;
  std::vector<Node*> cls_leaves(B), tse_leaves(B), view_leaves(B), teos_leaves(B),
      ttse_leaves(B);
  std::vector<std::vector<Node*>> gimg_leaves(B);
  {
    std::vector<Node*> cls_rows, tse_rows, view_rows, teos_rows, ttse_rows;
    for (std::size_t i = 0; i < B; ++i) {
      cls_leaves[i] = bg.leaf(fwd[i].vf.v_cls->val);
      tse_leaves[i] = bg.leaf(fwd[i].vf.v_tse->val);
      view_leaves[i] = bg.leaf(fwd[i].vf.v_view->val);
      teos_leaves[i] = bg.leaf(fwd[i].tf.t_eos->val);
      ttse_leaves[i] = bg.leaf(fwd[i].tf.t_tse->val);
      cls_rows.push_back(cls_leaves[i]);
      tse_rows.push_back(tse_leaves[i]);
      view_rows.push_back(view_leaves[i]);
      teos_rows.push_back(teos_leaves[i]);
      ttse_rows.push_back(ttse_leaves[i]);
      for (Node* gi : fwd[i].vf.g_img) {
        Node* leafn = bg.leaf(gi->val);
        gimg_leaves[i].push_back(leafn);
        batch.g_img.push_back(leafn);
        batch.g_img_labels.push_back(samples[i].view);
      }
    }
    batch.v_cls = bg.concat_rows(cls_rows);
    batch.v_tse = bg.concat_rows(tse_rows);
    batch.v_view = bg.concat_rows(view_rows);
    batch.t_eos = bg.concat_rows(teos_rows);
    batch.t_tse = bg.concat_rows(ttse_rows);
  }
  batch.ids = class_ids;
  for (const auto& s : samples) batch.views.push_back(s.view);

  loss::TotalLoss total = loss::total_loss(bg, batch, m, cfg.loss, nullptr);
  bg.backward(total.total);

  // stage C: push feature cotangents back through each sample graph
  run_chunks(B, threads, [&](std::size_t t, std::size_t b, std::size_t e) {
    (void)t;
    for (std::size_t i = b; i < e; ++i) {
      std::vector<std::pair<Node*, Mat>> seeds;
      auto push = [&seeds](Node* target, Node* leafn) {
        if (!leafn->grad.empty()) seeds.emplace_back(target, leafn->grad);
      };
      push(fwd[i].vf.v_cls, cls_leaves[i]);
      push(fwd[i].vf.v_tse, tse_leaves[i]);
      push(fwd[i].vf.v_view, view_leaves[i]);
      push(fwd[i].tf.t_eos, teos_leaves[i]);
      push(fwd[i].tf.t_tse, ttse_leaves[i]);
      for (std::size_t k = 0; k < gimg_leaves[i].size(); ++k)
        push(fwd[i].vf.g_img[k], gimg_leaves[i][k]);
      if (!seeds.empty()) fwd[i].graph->backward_seeded(seeds);
      fwd[i].graph.reset();  // free the tape as soon as the sample is done
    }
  });

  for (const GradBuffer& buf : bufs) buf.add_into(m.store);

  StepOutcome outcome;
  outcome.report = total.report;
  outcome.expert_usage.assign(m.cfg.moe.n_experts, 0);
  for (std::size_t i = 0; i < B; ++i)
    for (const moe::RoutingTrace& trace : fwd[i].vf.traces) {
      if (trace.z >= 0) {
        ++outcome.router_total;
        outcome.router_hits += trace.z == samples[i].view;
      }
      for (const moe::TokenRouting& tok : trace.tokens)
        for (std::size_t e : tok.selected) ++outcome.expert_usage[e];
    }
  return outcome;
}

}  // namespace

// --- training loop --------------------------------------------------------------

TrainResult train(model::Model& m, const synth::DatasetReader& data, const TrainConfig& cfg,
                  const std::string& out_dir) {
  cfg.validate();
  const synth::DatasetManifest& manifest = data.manifest();
  if (manifest.n_records == 0) throw DataError("train: empty dataset");
  if (m.cfg.n_identities != manifest.n_identities)
    throw ConfigError("train: model id-classifier size (" + std::to_string(m.cfg.n_identities) +
                      ") does not match dataset identities (" +
                      std::to_string(manifest.n_identities) + ")");
  m.cfg.teacher_force_routing = cfg.teacher_force_routing;

  const int id_base = manifest.generator_config.at("train_id_start");
  const std::size_t cpi = manifest.captions_per_image;

  fs::create_directories(out_dir);
  const std::string log_path = (fs::path(out_dir) / "train_log.jsonl").string();
  const std::string ckpt_path = (fs::path(out_dir) / "checkpoint.tagckpt").string();
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw DataError("train: cannot open log " + log_path);

  json ckpt_config = {{"model", model::backbone_config_to_json(m.cfg)},
                      {"train", train_config_to_json(cfg)},
                      {"dataset", manifest.generator_config}};

  const std::size_t N = manifest.n_records;
  const std::size_t B = std::min(cfg.batch_size, N);
  const std::size_t steps_per_epoch = std::max<std::size_t>(1, N / B);
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;

  AdamW opt(m.store, cfg);
  TrainResult result;
  result.checkpoint_path = ckpt_path;
  result.log_path = log_path;

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    // deterministic epoch stream: shuffle then per-position caption draws
    Rng erng(mix_seed(cfg.seed, mix_seed(0x54524149, epoch)));
    std::vector<std::size_t> order(N);
    for (std::size_t i = 0; i < N; ++i) order[i] = i;
    for (std::size_t i = N - 1; i >= 1; --i) std::swap(order[i], order[erng.below(i + 1)]);
    std::vector<std::size_t> cap(N);
    for (std::size_t i = 0; i < N; ++i) cap[i] = erng.below(cpi);

    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      std::vector<synth::Sample> samples;
      std::vector<int> class_ids;
      samples.reserve(B);
      for (std::size_t k = 0; k < B; ++k) {
        const std::size_t pos = s * B + k;
        samples.push_back(data.sample(order[pos], cap[pos]));
        class_ids.push_back(samples.back().id_index - id_base);
      }

      m.store.zero_grads();
      StepOutcome outcome;
      try {
        outcome = forward_backward(m, samples, class_ids, cfg);
        if (!m.store.grads_finite()) throw NumericError("train: non-finite gradients");
      } catch (const NumericError& e) {
        save_checkpoint_file(ckpt_path, m.store, ckpt_config);
        json diag = {{"error", "numeric"}, {"message", e.what()}, {"step", step}};
        write_file((fs::path(out_dir) / "abort.json").string(), diag.dump(2));
        log << diag.dump() << "\n";
        throw;
      }

      const double lr = lr_schedule(step, total_steps, cfg);
      opt.step(lr);

      json line = outcome.report.to_json();
      line["step"] = step;
      line["epoch"] = epoch;
      line["lr"] = lr;
      if (outcome.router_total > 0) {
        line["expert_usage"] = outcome.expert_usage;
        line["router_acc"] = double(outcome.router_hits) / double(outcome.router_total);
      }
      log << line.dump() << "\n";

      if (step == 0) result.first_loss = outcome.report.total;
      result.final_loss = outcome.report.total;
      ++step;
    }
  }
  result.steps = step;
  log.close();
  save_checkpoint_file(ckpt_path, m.store, ckpt_config);
  return result;
}

// --- evaluation -------------------------------------------------------------------

double compute_similarity(const Mat& v_cls, const Mat& v_tse, const Mat& t_eos,
                          const Mat& t_tse) {
  auto cosine = [](const Mat& a, const Mat& b) {
    const double na = l2norm(a), nb = l2norm(b);
    if (na == 0.0 || nb == 0.0) throw NumericError("compute_similarity: zero-norm feature");
    return dot(a, b) / (na * nb);
  };
  return 0.5 * (cosine(v_cls, t_eos) + cosine(v_tse, t_tse));
}

EncodedGallery encode_gallery(const model::Model& m, const synth::DatasetReader& data,
                              std::size_t threads) {
  const std::size_t n = data.size();
  const std::size_t d = m.cfg.d_joint;
  EncodedGallery out;
  out.v_cls.resize(n, d);
  out.v_tse.resize(n, d);
  out.v_view.resize(n, d);
  out.ids.resize(n);
  out.views.resize(n);
  const std::size_t blocks = m.cfg.block_type == model::BlockType::HrMoe
                                 ? m.cfg.moe_block_indices.size()
                                 : 0;
  out.router_pred.assign(n * blocks, -1);
  out.router_gt.assign(n * blocks, -1);

  run_chunks(n, threads, [&](std::size_t t, std::size_t b, std::size_t e) {
    (void)t;
    for (std::size_t i = b; i < e; ++i) {
      const synth::Sample s = data.sample(i, 0);
      Graph g;
      model::VisualFeatures vf = model::encode_image(g, s.image, m);
      for (std::size_t c = 0; c < d; ++c) {
        out.v_cls(i, c) = vf.v_cls->val(0, c);
        out.v_tse(i, c) = vf.v_tse->val(0, c);
        out.v_view(i, c) = vf.v_view->val(0, c);
      }
      out.ids[i] = s.id_index;
      out.views[i] = s.view;
      for (std::size_t k = 0; k < blocks; ++k) {
        out.router_pred[i * blocks + k] = vf.traces[k].z;
        out.router_gt[i * blocks + k] = s.view;
      }
    }
  });
  return out;
}

EncodedQueries encode_queries(const model::Model& m, const synth::DatasetReader& data,
                              std::size_t threads) {
  const std::size_t n = data.size();
  const std::size_t cpi = data.manifest().captions_per_image;
  const std::size_t d = m.cfg.d_joint;
  EncodedQueries out;
  out.t_eos.resize(n * cpi, d);
  out.t_tse.resize(n * cpi, d);
  out.ids.resize(n * cpi);

  run_chunks(n, threads, [&](std::size_t t, std::size_t b, std::size_t e) {
    (void)t;
    for (std::size_t i = b; i < e; ++i)
      for (std::size_t c = 0; c < cpi; ++c) {
        const synth::Sample s = data.sample(i, c);
        Graph g;
        model::TextFeatures tf = model::encode_text(g, s.tokens, m);
        const std::size_t row = i * cpi + c;
        for (std::size_t k = 0; k < d; ++k) {
          out.t_eos(row, k) = tf.t_eos->val(0, k);
          out.t_tse(row, k) = tf.t_tse->val(0, k);
        }
        out.ids[row] = s.id_index;
      }
  });
  return out;
}

double mean_abs_cls_view_cosine(const EncodedGallery& gallery) {
  const std::size_t n = gallery.v_cls.rows();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t c = 0; c < gallery.v_cls.cols(); ++c) {
      ab += gallery.v_cls(i, c) * gallery.v_view(i, c);
      aa += gallery.v_cls(i, c) * gallery.v_cls(i, c);
      bb += gallery.v_view(i, c) * gallery.v_view(i, c);
    }
    total += std::fabs(ab) / (std::sqrt(aa) * std::sqrt(bb));
  }
  return total / double(n);
}

namespace {

Mat l2_rows(const Mat& m) {
  Mat out = m;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double s = 0;
    for (std::size_t c = 0; c < m.cols(); ++c) s += m(r, c) * m(r, c);
    const double nrm = std::sqrt(s);
    if (nrm == 0.0) throw NumericError("evaluate: zero-norm feature at row " + std::to_string(r));
    for (std::size_t c = 0; c < m.cols(); ++c) out(r, c) /= nrm;
  }
  return out;
}

MetricsSlice ranked_metrics(const Mat& scores, const std::vector<int>& query_ids,
                            const std::vector<int>& gallery_ids,
                            const std::vector<std::size_t>& gallery_subset) {
  MetricsSlice slice;
  slice.queries = scores.rows();
  slice.gallery = gallery_subset.size();
  if (gallery_subset.empty() || scores.rows() == 0)
    throw DataError("evaluate: empty query or gallery set");

  double r1 = 0, r5 = 0, r10 = 0, map = 0;
  std::vector<std::size_t> order(gallery_subset.size());
  for (std::size_t q = 0; q < scores.rows(); ++q) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return scores(q, gallery_subset[a]) > scores(q, gallery_subset[b]);
    });

    std::size_t hits = 0, total_correct = 0;
    double ap = 0;
    bool in1 = false, in5 = false, in10 = false;
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
      const bool correct = gallery_ids[gallery_subset[order[rank]]] == query_ids[q];
      if (!correct) continue;
      ++hits;
      ++total_correct;
      ap += double(hits) / double(rank + 1);
      if (rank < 1) in1 = true;
      if (rank < 5) in5 = true;
      if (rank < 10) in10 = true;
    }
    if (total_correct == 0) continue;  // no positives for this query in the subset
    r1 += in1;
    r5 += in5;
    r10 += in10;
    map += ap / double(total_correct);
  }
  const double nq = double(scores.rows());
  slice.r1 = 100.0 * r1 / nq;
  slice.r5 = 100.0 * r5 / nq;
  slice.r10 = 100.0 * r10 / nq;
  slice.map = 100.0 * map / nq;
  return slice;
}

}  // namespace

MetricsSlice metrics_from_scores(const Mat& scores, const std::vector<int>& query_ids,
                                 const std::vector<int>& gallery_ids) {
  std::vector<std::size_t> all(gallery_ids.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return ranked_metrics(scores, query_ids, gallery_ids, all);
}

namespace {

RouterAccuracy router_from_counts(const std::vector<int>& pred, const std::vector<int>& gt) {
  RouterAccuracy acc;
  std::size_t a_hit = 0, g_hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (gt[i] == synth::kViewAerial) {
      ++acc.aerial_total;
      a_hit += pred[i] == gt[i];
    } else {
      ++acc.ground_total;
      g_hit += pred[i] == gt[i];
    }
  }
  if (acc.aerial_total > 0) acc.aerial = double(a_hit) / double(acc.aerial_total);
  if (acc.ground_total > 0) acc.ground = double(g_hit) / double(acc.ground_total);
  if (acc.aerial_total + acc.ground_total > 0)
    acc.overall = double(a_hit + g_hit) / double(acc.aerial_total + acc.ground_total);
  return acc;
}

}  // namespace

json RetrievalMetrics::to_json() const {
  auto slice = [](const MetricsSlice& s) {
    return json{{"r1", s.r1},           {"r5", s.r5},     {"r10", s.r10},
                {"map", s.map},         {"queries", s.queries}, {"gallery", s.gallery}};
  };
  return json{{"overall", slice(overall)},
              {"aerial_gallery", slice(aerial_gallery)},
              {"ground_gallery", slice(ground_gallery)},
              {"router_acc_aerial", router.aerial},
              {"router_acc_ground", router.ground},
              {"router_acc_overall", router.overall}};
}

RetrievalMetrics evaluate(const model::Model& m, const synth::DatasetReader& test,
                          std::size_t threads, std::optional<std::pair<int, int>> train_id_range) {
  if (train_id_range) {
    for (const auto& rec : test.manifest().records)
      if (rec.id_index >= train_id_range->first && rec.id_index < train_id_range->second)
        throw DataError("evaluate: test identity " + std::to_string(rec.id_index) +
                        " overlaps the training range");
  }

  const EncodedGallery gal = encode_gallery(m, test, threads);
  const EncodedQueries q = encode_queries(m, test, threads);

  // Eq. 17 as matrices over normalized features
  const Mat sim_global = matmul(l2_rows(q.t_eos), transpose(l2_rows(gal.v_cls)));
  const Mat sim_local = matmul(l2_rows(q.t_tse), transpose(l2_rows(gal.v_tse)));
  Mat scores(sim_global.rows(), sim_global.cols());
  for (std::size_t i = 0; i < scores.size(); ++i)
    scores.at(i) = 0.5 * (sim_global.at(i) + sim_local.at(i));

  std::vector<std::size_t> all, aerial, ground;
  for (std::size_t i = 0; i < gal.ids.size(); ++i) {
    all.push_back(i);
    (gal.views[i] == synth::kViewAerial ? aerial : ground).push_back(i);
  }

  RetrievalMetrics out;
  out.overall = ranked_metrics(scores, q.ids, gal.ids, all);
  if (!aerial.empty()) out.aerial_gallery = ranked_metrics(scores, q.ids, gal.ids, aerial);
  if (!ground.empty()) out.ground_gallery = ranked_metrics(scores, q.ids, gal.ids, ground);
  out.router = router_from_counts(gal.router_pred, gal.router_gt);
  return out;
}

RouterAccuracy router_accuracy(const model::Model& m, const synth::DatasetReader& data,
                               std::size_t threads) {
  const EncodedGallery gal = encode_gallery(m, data, threads);
  return router_from_counts(gal.router_pred, gal.router_gt);
}

json RoutingInspection::to_json() const {
  return json{{"router_acc_aerial", router.aerial},
              {"router_acc_ground", router.ground},
              {"router_acc_overall", router.overall},
              {"aerial_images", router.aerial_total},
              {"ground_images", router.ground_total},
              {"tokens_routed", tokens_routed},
              {"expert_usage",
               {{"aerial", usage_by_view.size() > 0 ? usage_by_view[0] : std::vector<std::size_t>{}},
                {"ground", usage_by_view.size() > 1 ? usage_by_view[1] : std::vector<std::size_t>{}}}}};
}

RoutingInspection inspect_routing(const model::Model& m, const synth::DatasetReader& data,
                                  std::size_t threads) {
  const std::size_t n = data.size();
  const std::size_t n_experts = m.cfg.moe.n_experts;
  RoutingInspection out;
  out.usage_by_view.assign(2, std::vector<std::size_t>(n_experts, 0));

  std::vector<int> pred, gt;
  const std::size_t workers = std::max<std::size_t>(1, threads);
  std::vector<RoutingInspection> partial(workers);
  for (auto& p : partial) p.usage_by_view.assign(2, std::vector<std::size_t>(n_experts, 0));
  std::vector<std::vector<int>> pred_parts(workers), gt_parts(workers);

  run_chunks(n, workers, [&](std::size_t t, std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const synth::Sample s = data.sample(i, 0);
      Graph g;
      model::VisualFeatures vf = model::encode_image(g, s.image, m);
      for (const moe::RoutingTrace& trace : vf.traces) {
        if (trace.z >= 0) {
          pred_parts[t].push_back(trace.z);
          gt_parts[t].push_back(s.view);
        }
        for (const moe::TokenRouting& tok : trace.tokens) {
          ++partial[t].tokens_routed;
          for (std::size_t ex : tok.selected) ++partial[t].usage_by_view[s.view][ex];
        }
      }
    }
  });

  for (std::size_t t = 0; t < workers; ++t) {
    out.tokens_routed += partial[t].tokens_routed;
    for (int v = 0; v < 2; ++v)
      for (std::size_t ex = 0; ex < n_experts; ++ex)
        out.usage_by_view[v][ex] += partial[t].usage_by_view[v][ex];
    pred.insert(pred.end(), pred_parts[t].begin(), pred_parts[t].end());
    gt.insert(gt.end(), gt_parts[t].begin(), gt_parts[t].end());
  }
  out.router = router_from_counts(pred, gt);
  return out;
}

// --- gradient checking ---------------------------------------------------------------

namespace {

std::vector<std::size_t> grad_check_batch_indices(const synth::DatasetReader& data,
                                                  std::size_t batch_size) {
  // prefer a batch containing both views so every expert group is exercised
  std::vector<std::size_t> idx;
  std::optional<std::size_t> first_aerial, first_ground;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const int v = data.manifest().records[i].view;
    if (v == synth::kViewAerial && !first_aerial) first_aerial = i;
    if (v == synth::kViewGround && !first_ground) first_ground = i;
  }
  if (first_aerial) idx.push_back(*first_aerial);
  if (first_ground) idx.push_back(*first_ground);
  for (std::size_t i = 0; i < data.size() && idx.size() < batch_size; ++i)
    if (std::find(idx.begin(), idx.end(), i) == idx.end()) idx.push_back(i);
  std::sort(idx.begin(), idx.end());
  return idx;
}

double batch_loss_value(model::Model& m, const std::vector<synth::Sample>& samples,
                        const std::vector<int>& class_ids, const loss::LossConfig& cfg) {
  Graph g;
  loss::BatchFeatures batch;
  std::vector<Node*> cls, tse, view, teos, ttse;
  for (const auto& s : samples) {
    model::VisualFeatures vf = model::encode_image(g, s.image, m, s.view);
    model::TextFeatures tf = model::encode_text(g, s.tokens, m);
    cls.push_back(vf.v_cls);
    tse.push_back(vf.v_tse);
    view.push_back(vf.v_view);
    teos.push_back(tf.t_eos);
    ttse.push_back(tf.t_tse);
    for (Node* gi : vf.g_img) {
      batch.g_img.push_back(gi);
      batch.g_img_labels.push_back(s.view);
    }
    batch.views.push_back(s.view);
  }
  batch.v_cls = g.concat_rows(cls);
  batch.v_tse = g.concat_rows(tse);
  batch.v_view = g.concat_rows(view);
  batch.t_eos = g.concat_rows(teos);
  batch.t_tse = g.concat_rows(ttse);
  batch.ids = class_ids;
  return loss::total_loss(g, batch, m, cfg).total->val(0, 0);
}

void batch_loss_backward(model::Model& m, const std::vector<synth::Sample>& samples,
                         const std::vector<int>& class_ids, const loss::LossConfig& cfg) {
  Graph g;
  loss::BatchFeatures batch;
  std::vector<Node*> cls, tse, view, teos, ttse;
  for (const auto& s : samples) {
    model::VisualFeatures vf = model::encode_image(g, s.image, m, s.view);
    model::TextFeatures tf = model::encode_text(g, s.tokens, m);
    cls.push_back(vf.v_cls);
    tse.push_back(vf.v_tse);
    view.push_back(vf.v_view);
    teos.push_back(tf.t_eos);
    ttse.push_back(tf.t_tse);
    for (Node* gi : vf.g_img) {
      batch.g_img.push_back(gi);
      batch.g_img_labels.push_back(s.view);
    }
    batch.views.push_back(s.view);
  }
  batch.v_cls = g.concat_rows(cls);
  batch.v_tse = g.concat_rows(tse);
  batch.v_view = g.concat_rows(view);
  batch.t_eos = g.concat_rows(teos);
  batch.t_tse = g.concat_rows(ttse);
  batch.ids = class_ids;
  loss::TotalLoss total = loss::total_loss(g, batch, m, cfg);
  g.backward(total.total);
}

}  // namespace

GradCheckResult grad_check(model::Model& m, const synth::DatasetReader& data,
                           const loss::LossConfig& loss_cfg, std::size_t batch_size,
                           double fd_epsilon, std::size_t probes_per_param, uint64_t seed) {
  const auto indices = grad_check_batch_indices(data, batch_size);
  const int id_base = data.manifest().generator_config.at("train_id_start");

  // force view-true masks so both expert groups are live even before the
  // router has learned anything; restored on exit
  const bool saved_tf = m.cfg.teacher_force_routing;
  m.cfg.teacher_force_routing = true;
  struct Restore {
    model::Model& m;
    bool saved;
    ~Restore() { m.cfg.teacher_force_routing = saved; }
  } restore{m, saved_tf};

  std::vector<synth::Sample> samples;
  std::vector<int> class_ids;
  for (std::size_t i : indices) {
    samples.push_back(data.sample(i, 0));
    class_ids.push_back(samples.back().id_index - id_base);
  }

  m.store.zero_grads();
  batch_loss_backward(m, samples, class_ids, loss_cfg);

  GradCheckResult result;
  Rng pick(mix_seed(seed, 0x47434b));
  for (Param* p : m.store.all()) {
    const bool discrete_only = p->name.find("r_img") != std::string::npos;
    bool any_nonzero = false;
    for (std::size_t i = 0; i < p->grad.size(); ++i) any_nonzero |= p->grad.at(i) != 0.0;
    if (!any_nonzero && !discrete_only) result.dead_params.push_back(p->name);

    for (std::size_t probe = 0; probe < probes_per_param; ++probe) {
      const std::size_t i = pick.below(p->value.size());
      const double save = p->value.at(i);
      p->value.at(i) = save + fd_epsilon;
      const double lp = batch_loss_value(m, samples, class_ids, loss_cfg);
      p->value.at(i) = save - fd_epsilon;
      const double lm = batch_loss_value(m, samples, class_ids, loss_cfg);
      p->value.at(i) = save;
      const double fd = (lp - lm) / (2.0 * fd_epsilon);
      const double an = p->grad.at(i);
      ++result.probes;
      if (std::fabs(fd - an) < 1e-9) continue;
      const double rel = std::fabs(fd - an) / std::max(1e-8, std::fabs(fd) + std::fabs(an));
      if (rel > result.max_rel_err) {
        result.max_rel_err = rel;
        result.worst_param = p->name;
      }
    }
  }

  // routing-path exclusion: without the view loss, the image-level router
  // reaches the objective only through the discrete argmax, so its analytic
  // gradient must vanish identically
  loss::LossConfig no_view = loss_cfg;
  no_view.view_loss_enabled = false;
  m.store.zero_grads();
  batch_loss_backward(m, samples, class_ids, no_view);
  result.routing_exclusion_ok = true;
  for (Param* p : m.store.all())
    if (p->name.find("r_img") != std::string::npos && l2norm(p->grad) != 0.0)
      result.routing_exclusion_ok = false;
  m.store.zero_grads();
  return result;
}

// --- ablations -----------------------------------------------------------------------

std::vector<AblationVariant> default_component_grid() {
  return {
      {"no1_vit", model::BlockType::Vit, false, false, std::nullopt, std::nullopt},
      {"no2_moe", model::BlockType::VanillaMoe, false, false, std::nullopt, std::nullopt},
      {"no3_hrmoe", model::BlockType::HrMoe, false, false, std::nullopt, std::nullopt},
      {"no4_hrmoe_view", model::BlockType::HrMoe, true, false, std::nullopt, std::nullopt},
      {"no5_hrmoe_ortho", model::BlockType::HrMoe, false, true, std::nullopt, std::nullopt},
      {"no6_full", model::BlockType::HrMoe, true, true, std::nullopt, std::nullopt},
  };
}

std::vector<AblationVariant> ablation_variants_from_json(const json& j) {
  std::vector<AblationVariant> out;
  for (const auto& v : j) {
    AblationVariant a;
    a.name = v.at("name");
    if (v.contains("block")) a.block = model::block_type_from_string(v["block"]);
    if (v.contains("view_loss")) a.view_loss = v["view_loss"];
    if (v.contains("ortho_loss")) a.ortho_loss = v["ortho_loss"];
    if (v.contains("train_regime"))
      a.train_regime = synth::view_regime_from_string(v["train_regime"]);
    if (v.contains("test_regime"))
      a.test_regime = synth::view_regime_from_string(v["test_regime"]);
    for (const auto& [k, val] : v.items())
      if (k != "name" && k != "block" && k != "view_loss" && k != "ortho_loss" &&
          k != "train_regime" && k != "test_regime")
        throw ConfigError("unknown ablation variant key: " + k);
    out.push_back(a);
  }
  if (out.empty()) throw ConfigError("ablation variant list is empty");
  return out;
}

std::string metrics_csv_header() {
  return "variant,R1,R5,R10,mAP,router_acc_aerial,router_acc_ground";
}

namespace {
std::string fmt(double v) {
  std::ostringstream ss;
  if (v < 0.0)
    ss << "nan";
  else
    ss << std::fixed << std::setprecision(4) << v;
  return ss.str();
}
}  // namespace

std::string metrics_csv_row(const std::string& variant, const RetrievalMetrics& m) {
  std::ostringstream ss;
  ss << variant << "," << fmt(m.overall.r1) << "," << fmt(m.overall.r5) << ","
     << fmt(m.overall.r10) << "," << fmt(m.overall.map) << "," << fmt(m.router.aerial) << ","
     << fmt(m.router.ground);
  return ss.str();
}

std::vector<AblationRow> run_ablation(const synth::GeneratorConfig& gen_cfg,
                                      const model::BackboneConfig& model_cfg,
                                      const TrainConfig& train_cfg,
                                      const std::vector<AblationVariant>& variants,
                                      const std::string& work_dir, const std::string& csv_path) {
  fs::create_directories(work_dir);
  std::vector<AblationRow> rows;
  std::ostringstream csv;
  csv << metrics_csv_header() << "\n";

  for (const AblationVariant& variant : variants) {
    synth::GeneratorConfig gcfg = gen_cfg;
    if (variant.train_regime) gcfg.train_regime = *variant.train_regime;
    if (variant.test_regime) gcfg.test_regime = *variant.test_regime;

    const std::string vdir = (fs::path(work_dir) / variant.name).string();
    const std::string data_dir = vdir + "/data";
    synth::build_dataset(gcfg, data_dir);
    synth::DatasetReader train_data(data_dir, "train");
    synth::DatasetReader test_data(data_dir, "test");

    model::BackboneConfig mcfg = model_cfg;
    mcfg.block_type = variant.block;
    mcfg.n_identities = train_data.manifest().n_identities;

    TrainConfig tcfg = train_cfg;
    tcfg.loss.view_loss_enabled = variant.view_loss && variant.block == model::BlockType::HrMoe;
    tcfg.loss.ortho_loss_enabled = variant.ortho_loss;
    if (variant.view_loss && variant.block != model::BlockType::HrMoe)
      throw ConfigError("ablation " + variant.name +
                        ": the view loss needs the HR-MoE image-level router");

    model::Model m = model::build_model(mcfg, tcfg.seed);
    TrainResult tr = train(m, train_data, tcfg, vdir);

    AblationRow row;
    row.variant = variant.name;
    const int tstart = train_data.manifest().generator_config.at("train_id_start");
    const int tcount = train_data.manifest().generator_config.at("train_identities");
    row.metrics = evaluate(m, test_data, tcfg.threads, std::make_pair(tstart, tstart + tcount));
    row.step0_loss = tr.first_loss;
    {
      std::istringstream log(read_file(tr.log_path));
      std::string first_line;
      std::getline(log, first_line);
      row.step0_l_ga = json::parse(first_line).at("l_ga");
    }
    rows.push_back(row);
    csv << metrics_csv_row(row.variant, row.metrics) << "\n";
  }

  write_file(csv_path, csv.str());
  return rows;
}

// --- embedding dumps --------------------------------------------------------------------

void dump_embeddings(const model::Model& m, const synth::DatasetReader& data,
                     const std::string& path_prefix, std::size_t threads) {
  const EncodedGallery gal = encode_gallery(m, data, threads);
  std::string blob;
  for (std::size_t i = 0; i < gal.v_cls.rows(); ++i)
    for (std::size_t c = 0; c < gal.v_cls.cols(); ++c)
      append_f32le(blob, static_cast<float>(gal.v_cls(i, c)));
  write_file(path_prefix + ".bin", blob);
  json side = {{"dtype", "f32le"},
               {"count", gal.v_cls.rows()},
               {"dim", gal.v_cls.cols()},
               {"checksum", "fnv1a64:" + fnv1a64_hex(blob)},
               {"ids", gal.ids},
               {"views", gal.views}};
  write_file(path_prefix + ".json", side.dump(2));
}

}  // namespace tagret::train
