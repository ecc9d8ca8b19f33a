// Copyright (c) 2026 tagret authors
// SPDX-License-Identifier: Apache-2.0
//
// Hierarchically-routed mixture of experts: an image-level router predicts
// the view from the view token, a mask restricts the expert pool to the
// matching view group (two groups with a shared overlap), and a feature-level
// router distributes every token over the allowed experts via top-k selection
// with renormalized weights. A plain (unmasked, single-router) MoE forward is
// kept as a separate code path for ablations and as the reduction oracle.

#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "tagret/graph.hpp"
#include "tagret/mat.hpp"
#include "tagret/params.hpp"

namespace tagret::moe {

// Expert groups over indices [0, n_experts): the lowest `aerial_only` indices
// are aerial-specific, the highest `ground_only` are ground-specific, and the
// middle band is shared by both groups.
struct ExpertPartition {
  std::size_t n_experts = 6;
  std::size_t aerial_end = 5;    // aerial group = [0, aerial_end)
  std::size_t ground_begin = 1;  // ground group = [ground_begin, n_experts)

  bool in_aerial(std::size_t j) const { return j < aerial_end; }
  bool in_ground(std::size_t j) const { return j >= ground_begin; }
  bool is_shared(std::size_t j) const { return in_aerial(j) && in_ground(j); }
  bool in_group(std::size_t j, int view) const { return view == 0 ? in_aerial(j) : in_ground(j); }

  std::vector<std::size_t> aerial_set() const;
  std::vector<std::size_t> ground_set() const;
  std::vector<std::size_t> shared_set() const;
};

// Zero overlap is a configuration error: the groups must share experts.
ExpertPartition make_partition(std::size_t n_experts, std::size_t aerial_only,
                               std::size_t ground_only);

struct MoeConfig {
  std::size_t n_experts = 6;
  std::size_t aerial_only_experts = 1;
  std::size_t ground_only_experts = 1;
  std::size_t top_k = 5;
  std::size_t d_hidden = 128;
  bool mask_enabled = true;  // false reduces HR-MoE to an unmasked MoE

  ExpertPartition partition() const {
    return make_partition(n_experts, aerial_only_experts, ground_only_experts);
  }
};

struct ExpertParams {
  Param* w1;
  Param* b1;
  Param* w2;
  Param* b2;
};

struct MoeParams {
  Param* r_img_w = nullptr;  // D -> 2
  Param* r_img_b = nullptr;
  Param* r_feat_w = nullptr;  // D -> N_e
  Param* r_feat_b = nullptr;
  std::vector<ExpertParams> experts;
};

MoeParams create_moe_params(ParamStore& store, const std::string& prefix, std::size_t d_model,
                            const MoeConfig& cfg, Rng& rng);

// Per-token routing decision kept for diagnostics.
struct TokenRouting {
  std::vector<double> probs;           // P, length N_e; masked entries exactly 0
  std::vector<std::size_t> selected;   // K indices, by descending probability
  std::vector<double> weights;         // renormalized, aligned with `selected`
};

struct RoutingTrace {
  std::array<double, 2> g_img{0.0, 0.0};
  int z = -1;       // router's own prediction (-1 when there is no image router)
  int z_used = -1;  // view that actually built the mask (teacher forcing may differ)
  std::vector<TokenRouting> tokens;
};

// Eq. 3-4: linear view logits from the view-token feature; argmax with
// ties resolved to the lowest index.
std::pair<Node*, int> route_image(Graph& g, Node* v_view, const MoeParams& params,
                                  GradBuffer* sink = nullptr);

// Eq. 7 as data: 0 for experts in the group selected by z, -inf otherwise.
Mat build_mask(int z, const ExpertPartition& partition);

// Eq. 5-6 for a single feature row (1 x D) -> 1 x N_e probabilities. Masked
// entries are excluded from the softmax and are exactly zero.
Node* route_feature(Graph& g, Node* feature, const MoeParams& params, const Mat& mask,
                    GradBuffer* sink = nullptr);

// Top-k over a probability vector; ties prefer the lower index; weights are
// the selected probabilities renormalized to sum 1.
std::pair<std::vector<std::size_t>, std::vector<double>> select_topk(
    const std::vector<double>& probs, std::size_t k);

struct MoeForward {
  Node* out = nullptr;    // same shape as the input token matrix
  Node* g_img = nullptr;  // 1 x 2 view logits (null for the vanilla path)
  RoutingTrace trace;
};

// Eq. 8 over a full token matrix. `view_row` locates the view token inside
// `tokens`; `forced_view`, when set, builds the mask from the ground-truth
// label while the trace still records the router's own prediction.
MoeForward moe_forward(Graph& g, Node* tokens, std::size_t view_row, const MoeParams& params,
                       const MoeConfig& cfg, std::optional<int> forced_view = std::nullopt,
                       GradBuffer* sink = nullptr);

// Single-router unmasked MoE (the "vanilla" ablation arm). Top-k runs over
// all experts; there is no image-level router and no view mask.
MoeForward vanilla_moe_forward(Graph& g, Node* tokens, const MoeParams& params,
                               const MoeConfig& cfg, GradBuffer* sink = nullptr);

}  // namespace tagret::moe
