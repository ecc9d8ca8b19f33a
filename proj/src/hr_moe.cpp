// Copyright (c) 2026 tagret authors
// SPDX-License-Identifier: Apache-2.0

#include "tagret/hr_moe.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace tagret::moe {

std::vector<std::size_t> ExpertPartition::aerial_set() const {
  std::vector<std::size_t> s;
  for (std::size_t j = 0; j < n_experts; ++j)
    if (in_aerial(j)) s.push_back(j);
  return s;
}

std::vector<std::size_t> ExpertPartition::ground_set() const {
  std::vector<std::size_t> s;
  for (std::size_t j = 0; j < n_experts; ++j)
    if (in_ground(j)) s.push_back(j);
  return s;
}

std::vector<std::size_t> ExpertPartition::shared_set() const {
  std::vector<std::size_t> s;
  for (std::size_t j = 0; j < n_experts; ++j)
    if (is_shared(j)) s.push_back(j);
  return s;
}

ExpertPartition make_partition(std::size_t n_experts, std::size_t aerial_only,
                               std::size_t ground_only) {
  if (n_experts == 0) throw ConfigError("make_partition: need at least one expert");
  if (aerial_only + ground_only >= n_experts)
    throw ConfigError("make_partition: expert groups must overlap (" +
                      std::to_string(aerial_only) + " aerial-only + " +
                      std::to_string(ground_only) + " ground-only leaves no shared expert of " +
                      std::to_string(n_experts) + ")");
  ExpertPartition p;
  p.n_experts = n_experts;
  p.aerial_end = n_experts - ground_only;
  p.ground_begin = aerial_only;
  return p;
}

MoeParams create_moe_params(ParamStore& store, const std::string& prefix, std::size_t d_model,
                            const MoeConfig& cfg, Rng& rng) {
  MoeParams p;
  p.r_img_w = &store.create(prefix + ".r_img.w", d_model, 2, 0.02, rng);
  p.r_img_b = &store.create_filled(prefix + ".r_img.b", 1, 2, 0.0, false);
  p.r_feat_w = &store.create(prefix + ".r_feat.w", d_model, cfg.n_experts, 0.02, rng);
  p.r_feat_b = &store.create_filled(prefix + ".r_feat.b", 1, cfg.n_experts, 0.0, false);
  for (std::size_t e = 0; e < cfg.n_experts; ++e) {
    const std::string ep = prefix + ".expert" + std::to_string(e);
    ExpertParams x;
    x.w1 = &store.create(ep + ".w1", d_model, cfg.d_hidden, 0.02, rng);
    x.b1 = &store.create_filled(ep + ".b1", 1, cfg.d_hidden, 0.0, false);
    x.w2 = &store.create(ep + ".w2", cfg.d_hidden, d_model, 0.02, rng);
    x.b2 = &store.create_filled(ep + ".b2", 1, d_model, 0.0, false);
    p.experts.push_back(x);
  }
  return p;
}

std::pair<Node*, int> route_image(Graph& g, Node* v_view, const MoeParams& params,
                                  GradBuffer* sink) {
  Node* logits =
      g.add_rowvec(g.matmul(v_view, g.param(*params.r_img_w, sink)), g.param(*params.r_img_b, sink));
  // softmax is monotone, so argmax over logits; ties go to the lower index
  const int z = logits->val(0, 1) > logits->val(0, 0) ? 1 : 0;
  return {logits, z};
}

Mat build_mask(int z, const ExpertPartition& partition) {
  if (z != 0 && z != 1) throw ConfigError("build_mask: z must be 0 or 1");
  Mat m(1, partition.n_experts, -std::numeric_limits<double>::infinity());
  for (std::size_t j = 0; j < partition.n_experts; ++j)
    if (partition.in_group(j, z)) m(0, j) = 0.0;
  return m;
}

namespace {

Mat allowed_rows_from_mask(const Mat& mask, std::size_t rows) {
  Mat allowed(rows, mask.cols());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < mask.cols(); ++c) allowed(r, c) = mask(0, c) == 0.0 ? 1.0 : 0.0;
  return allowed;
}

Node* feature_logits(Graph& g, Node* tokens, const MoeParams& params, GradBuffer* sink) {
  return g.add_rowvec(g.matmul(tokens, g.param(*params.r_feat_w, sink)),
                      g.param(*params.r_feat_b, sink));
}

Node* expert_forward(Graph& g, Node* tokens, const ExpertParams& e, GradBuffer* sink) {
  Node* h = g.gelu(g.add_rowvec(g.matmul(tokens, g.param(*e.w1, sink)), g.param(*e.b1, sink)));
  return g.add_rowvec(g.matmul(h, g.param(*e.w2, sink)), g.param(*e.b2, sink));
}

// Shared tail of both MoE paths: discrete top-k on P's values, renormalized
// weights as graph ops (gradients flow through the selected probabilities),
// then the weighted sum of expert outputs.
Node* combine_experts(Graph& g, Node* tokens, Node* probs, const MoeParams& params,
                      const MoeConfig& cfg, RoutingTrace* trace, GradBuffer* sink) {
  const std::size_t rows = probs->val.rows();
  const std::size_t n = cfg.n_experts;

  Mat selection(rows, n, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    std::vector<double> p(n);
    for (std::size_t j = 0; j < n; ++j) p[j] = probs->val(r, j);
    auto [idx, w] = select_topk(p, cfg.top_k);
    for (std::size_t j : idx) selection(r, j) = 1.0;
    if (trace) trace->tokens.push_back({std::move(p), std::move(idx), std::move(w)});
  }

  Node* p_sel = g.mul(probs, g.input(selection));
  Node* weights = g.div_colvec(p_sel, g.rowsum(p_sel));

  Node* out = nullptr;
  for (std::size_t e = 0; e < n; ++e) {
    Node* scaled = g.mul_colvec(expert_forward(g, tokens, params.experts[e], sink),
                                g.slice_cols(weights, e, 1));
    out = out ? g.add(out, scaled) : scaled;
  }
  return out;
}

}  // namespace

Node* route_feature(Graph& g, Node* feature, const MoeParams& params, const Mat& mask,
                    GradBuffer* sink) {
  Node* logits = feature_logits(g, feature, params, sink);
  return g.masked_softmax_rows(logits, allowed_rows_from_mask(mask, feature->val.rows()));
}

std::pair<std::vector<std::size_t>, std::vector<double>> select_topk(
    const std::vector<double>& probs, std::size_t k) {
  std::size_t positive = 0;
  for (double p : probs)
    if (p > 0.0) ++positive;
  if (k == 0 || k > positive)
    throw ConfigError("select_topk: k = " + std::to_string(k) + " exceeds the " +
                      std::to_string(positive) + " selectable experts");

  std::vector<std::size_t> order(probs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  order.resize(k);

  double total = 0.0;
  for (std::size_t i : order) total += probs[i];
  std::vector<double> weights;
  weights.reserve(k);
  for (std::size_t i : order) weights.push_back(probs[i] / total);
  return {std::move(order), std::move(weights)};
}

MoeForward moe_forward(Graph& g, Node* tokens, std::size_t view_row, const MoeParams& params,
                       const MoeConfig& cfg, std::optional<int> forced_view, GradBuffer* sink) {
  if (view_row >= tokens->val.rows()) throw ConfigError("moe_forward: view_row out of range");
  const ExpertPartition partition = cfg.partition();

  MoeForward result;
  auto [g_img, z] = route_image(g, g.slice_rows(tokens, view_row, 1), params, sink);
  result.g_img = g_img;
  result.trace.g_img = {g_img->val(0, 0), g_img->val(0, 1)};
  result.trace.z = z;
  result.trace.z_used = forced_view.value_or(z);

  Node* logits = feature_logits(g, tokens, params, sink);
  Node* probs;
  if (cfg.mask_enabled) {
    const Mat mask = build_mask(result.trace.z_used, partition);
    probs = g.masked_softmax_rows(logits, allowed_rows_from_mask(mask, tokens->val.rows()));
  } else {
    probs = g.softmax_rows(logits);
  }
  result.out = combine_experts(g, tokens, probs, params, cfg, &result.trace, sink);
  return result;
}

MoeForward vanilla_moe_forward(Graph& g, Node* tokens, const MoeParams& params,
                               const MoeConfig& cfg, GradBuffer* sink) {
  MoeForward result;
  Node* probs = g.softmax_rows(feature_logits(g, tokens, params, sink));
  result.out = combine_experts(g, tokens, probs, params, cfg, &result.trace, sink);
  return result;
}

}  // namespace tagret::moe
