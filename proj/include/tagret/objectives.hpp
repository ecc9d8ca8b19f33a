// Copyright (c) 2026 tagret authors
// SPDX-License-Identifier: Apache-2.0
//
// Training losses: global/local alignment (forward KL to the identity-label
// distribution plus reverse KL to its epsilon-smoothed form), the shared
// identity classifier, the view-classification loss on the image-level router
// logits, and the thresholded orthogonality penalty between the global and
// view features. The combined objective is L = L1 + L2 with
// L1 = L_GA + L_LA + lambda_id * L_id and L2 = L_view + lambda_ortho * L_ortho.

#pragma once

#include <string>
#include <vector>

#include "tagret/backbone.hpp"
#include "tagret/graph.hpp"

#include <json.hpp>

namespace tagret::loss {

enum class OrthoVariant { Verbatim, Hinge };

std::string to_string(OrthoVariant v);
OrthoVariant ortho_variant_from_string(const std::string& s);

struct LossConfig {
  double lambda_id = 0.5;
  double lambda_ortho = 100.0;
  double alpha = 0.1;
  double epsilon = 0.05;
  bool view_loss_enabled = true;
  bool ortho_loss_enabled = true;
  OrthoVariant ortho_variant = OrthoVariant::Verbatim;
  double temp_min = 1e-3;
  double temp_max = 1.0;
};

// Stacked per-batch feature nodes (each B x d_joint) plus routing logits.
struct BatchFeatures {
  Node* v_cls = nullptr;
  Node* v_tse = nullptr;
  Node* v_view = nullptr;
  Node* t_eos = nullptr;
  Node* t_tse = nullptr;
  std::vector<Node*> g_img;       // one 1x2 node per (sample, MoE block)
  std::vector<int> g_img_labels;  // ground-truth view per g_img entry
  std::vector<int> ids;           // identity-classifier class per sample
  std::vector<int> views;         // ground-truth view per sample
};

struct LossReport {
  double l_ga = 0.0;
  double l_la = 0.0;
  double l_id = 0.0;
  double l_view = 0.0;
  double l_ortho = 0.0;
  double l1 = 0.0;
  double l2 = 0.0;
  double total = 0.0;
  double temperature = 0.0;
  nlohmann::json to_json() const;
};

// cos(img_i, txt_j) / temperature; features are L2-normalized internally.
// temp must be a positive 1x1 node.
Node* similarity_matrix(Graph& g, Node* img, Node* txt, Node* temp);

// Row-stochastic identity-match target: q_ij = [id_i == id_j] / #matches(i).
Mat label_distribution(const std::vector<int>& ids);

Node* nitc_loss(Graph& g, Node* img, Node* txt, const std::vector<int>& ids, Node* temp);
Node* ritc_loss(Graph& g, Node* img, Node* txt, const std::vector<int>& ids, Node* temp,
                double epsilon);

Node* global_alignment(Graph& g, const BatchFeatures& batch, Node* temp, double epsilon);
Node* local_alignment(Graph& g, const BatchFeatures& batch, Node* temp, double epsilon);

// Mean cross-entropy of the shared linear classifier on both modalities.
// Throws DataError when an id falls outside the classifier range.
Node* id_loss(Graph& g, Node* v_cls, Node* t_eos, const std::vector<int>& ids, Param& w, Param& b,
              GradBuffer* sink = nullptr);

// Softmax cross-entropy of the stacked view logits against binary labels.
Node* view_loss(Graph& g, const std::vector<Node*>& g_img, const std::vector<int>& labels);

// Verbatim: mean min(|cos|, alpha) — zero gradient once |cos| > alpha.
// Hinge: mean max(|cos| - alpha, 0), selectable for ablation.
Node* ortho_loss(Graph& g, Node* v_cls, Node* v_view, double alpha,
                 OrthoVariant variant = OrthoVariant::Verbatim);

// Learnable temperature clamped to [temp_min, temp_max].
Node* clamped_temperature(Graph& g, Param& temperature, const LossConfig& cfg,
                          GradBuffer* sink = nullptr);

struct TotalLoss {
  Node* total = nullptr;
  LossReport report;
};

TotalLoss total_loss(Graph& g, const BatchFeatures& batch, model::Model& m, const LossConfig& cfg,
                     GradBuffer* sink = nullptr);

}  // namespace tagret::loss
