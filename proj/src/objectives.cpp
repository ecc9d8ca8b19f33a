// Copyright (c) 2026 tagret authors
// SPDX-License-Identifier: Apache-2.0

#include "tagret/objectives.hpp"

#include <cmath>

namespace tagret::loss {

std::string to_string(OrthoVariant v) {
  return v == OrthoVariant::Verbatim ? "verbatim" : "hinge";
}

OrthoVariant ortho_variant_from_string(const std::string& s) {
  if (s == "verbatim") return OrthoVariant::Verbatim;
  if (s == "hinge") return OrthoVariant::Hinge;
  throw ConfigError("unknown ortho variant: " + s + " (expected verbatim|hinge)");
}

nlohmann::json LossReport::to_json() const {
  return {{"l_ga", l_ga},       {"l_la", l_la}, {"l_id", l_id},   {"l_view", l_view},
          {"l_ortho", l_ortho}, {"l1", l1},     {"l2", l2},       {"l", total},
          {"temperature", temperature}};
}

Node* similarity_matrix(Graph& g, Node* img, Node* txt, Node* temp) {
  if (temp->val(0, 0) <= 0.0) throw NumericError("similarity_matrix: temperature must be > 0");
  Node* cosines = g.matmul(g.l2_normalize_rows(img), g.transpose(g.l2_normalize_rows(txt)));
  return g.mul_scalar_node(cosines, g.reciprocal(temp));
}

Mat label_distribution(const std::vector<int>& ids) {
  const std::size_t b = ids.size();
  Mat q(b, b, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t matches = 0;
    for (std::size_t j = 0; j < b; ++j)
      if (ids[j] == ids[i]) ++matches;
    for (std::size_t j = 0; j < b; ++j)
      if (ids[j] == ids[i]) q(i, j) = 1.0 / static_cast<double>(matches);
  }
  return q;
}

namespace {

// mean over rows of KL(q || softmax(sim)), with q constant
Node* forward_kl_rows(Graph& g, Node* sim, const Mat& q) {
  const std::size_t b = q.rows();
  double q_log_q = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i)
    if (q.at(i) > 0.0) q_log_q += q.at(i) * std::log(q.at(i));
  Node* cross = g.scale(g.sum(g.mul(g.input(q), g.logsoftmax_rows(sim))),
                        -1.0 / static_cast<double>(b));
  return g.add(cross, g.scalar(q_log_q / static_cast<double>(b)));
}

// mean over rows of KL(softmax(sim) || q_tilde), with q_tilde constant
Node* reverse_kl_rows(Graph& g, Node* sim, const Mat& q_tilde) {
  const std::size_t b = q_tilde.rows();
  Mat log_qt(b, b);
  for (std::size_t i = 0; i < q_tilde.size(); ++i) log_qt.at(i) = std::log(q_tilde.at(i));
  Node* p = g.softmax_rows(sim);
  Node* p_log_p = g.sum(g.mul(p, g.logsoftmax_rows(sim)));
  Node* p_log_q = g.sum(g.mul(p, g.input(log_qt)));
  return g.scale(g.sub(p_log_p, p_log_q), 1.0 / static_cast<double>(b));
}

}  // namespace

Node* nitc_loss(Graph& g, Node* img, Node* txt, const std::vector<int>& ids, Node* temp) {
  if (ids.size() != img->val.rows() || ids.size() != txt->val.rows())
    throw NumericError("nitc_loss: batch size mismatch");
  const Mat q = label_distribution(ids);
  Node* sim = similarity_matrix(g, img, txt, temp);
  Node* i2t = forward_kl_rows(g, sim, q);
  Node* t2i = forward_kl_rows(g, g.transpose(sim), q);
  return g.scale(g.add(i2t, t2i), 0.5);
}

Node* ritc_loss(Graph& g, Node* img, Node* txt, const std::vector<int>& ids, Node* temp,
                double epsilon) {
  if (epsilon <= 0.0) throw ConfigError("ritc_loss: epsilon must be > 0");
  const std::size_t b = ids.size();
  Mat q = label_distribution(ids);
  Mat q_tilde(b, b);
  for (std::size_t i = 0; i < q.size(); ++i)
    q_tilde.at(i) = (1.0 - epsilon) * q.at(i) + epsilon / static_cast<double>(b);
  Node* sim = similarity_matrix(g, img, txt, temp);
  Node* i2t = reverse_kl_rows(g, sim, q_tilde);
  Node* t2i = reverse_kl_rows(g, g.transpose(sim), q_tilde);
  return g.scale(g.add(i2t, t2i), 0.5);
}

Node* global_alignment(Graph& g, const BatchFeatures& batch, Node* temp, double epsilon) {
  return g.add(nitc_loss(g, batch.v_cls, batch.t_eos, batch.ids, temp),
               ritc_loss(g, batch.v_cls, batch.t_eos, batch.ids, temp, epsilon));
}

Node* local_alignment(Graph& g, const BatchFeatures& batch, Node* temp, double epsilon) {
  return g.add(nitc_loss(g, batch.v_tse, batch.t_tse, batch.ids, temp),
               ritc_loss(g, batch.v_tse, batch.t_tse, batch.ids, temp, epsilon));
}

namespace {

Node* cross_entropy_rows(Graph& g, Node* logits, const std::vector<int>& targets) {
  const std::size_t b = logits->val.rows();
  Mat onehot(b, logits->val.cols(), 0.0);
  for (std::size_t i = 0; i < b; ++i) onehot(i, static_cast<std::size_t>(targets[i])) = 1.0;
  return g.scale(g.sum(g.mul(g.input(onehot), g.logsoftmax_rows(logits))),
                 -1.0 / static_cast<double>(b));
}

}  // namespace

Node* id_loss(Graph& g, Node* v_cls, Node* t_eos, const std::vector<int>& ids, Param& w, Param& b,
              GradBuffer* sink) {
  const std::size_t n_classes = w.value.cols();
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= n_classes)
      throw DataError("id_loss: id " + std::to_string(id) + " outside classifier range [0, " +
                      std::to_string(n_classes) + ")");
  Node* wv = g.param(w, sink);
  Node* bv = g.param(b, sink);
  Node* img_ce = cross_entropy_rows(g, g.add_rowvec(g.matmul(v_cls, wv), bv), ids);
  Node* txt_ce = cross_entropy_rows(g, g.add_rowvec(g.matmul(t_eos, wv), bv), ids);
  return g.scale(g.add(img_ce, txt_ce), 0.5);
}

Node* view_loss(Graph& g, const std::vector<Node*>& g_img, const std::vector<int>& labels) {
  if (g_img.empty()) throw ConfigError("view_loss: no image-level router logits");
  if (g_img.size() != labels.size()) throw NumericError("view_loss: label count mismatch");
  for (int z : labels)
    if (z != 0 && z != 1) throw DataError("view_loss: labels must be binary");
  Node* stacked = g.concat_rows(g_img);
  return cross_entropy_rows(g, stacked, labels);
}

Node* ortho_loss(Graph& g, Node* v_cls, Node* v_view, double alpha, OrthoVariant variant) {
  if (alpha < 0.0) throw ConfigError("ortho_loss: alpha must be >= 0");
  Node* c = g.abs(g.rowwise_cosine(v_cls, v_view));
  Node* penalized = variant == OrthoVariant::Verbatim
                        ? g.min_const(c, alpha)
                        : g.clamp(g.affine(c, 1.0, -alpha), 0.0, 2.0);
  return g.mean(penalized);
}

Node* clamped_temperature(Graph& g, Param& temperature, const LossConfig& cfg, GradBuffer* sink) {
  return g.clamp(g.param(temperature, sink), cfg.temp_min, cfg.temp_max);
}

TotalLoss total_loss(Graph& g, const BatchFeatures& batch, model::Model& m, const LossConfig& cfg,
                     GradBuffer* sink) {
  if (batch.ids.empty()) throw NumericError("total_loss: empty batch");
  Node* temp = clamped_temperature(g, *m.temperature, cfg, sink);

  Node* l_ga = global_alignment(g, batch, temp, cfg.epsilon);
  Node* l_la = local_alignment(g, batch, temp, cfg.epsilon);

  Node* l1 = g.add(l_ga, l_la);
  Node* l_id = nullptr;
  if (cfg.lambda_id != 0.0) {
    if (!m.idcls_w) throw ConfigError("total_loss: id loss enabled but the model has no classifier");
    l_id = id_loss(g, batch.v_cls, batch.t_eos, batch.ids, *m.idcls_w, *m.idcls_b, sink);
    l1 = g.add(l1, g.scale(l_id, cfg.lambda_id));
  }

  Node* l_view = nullptr;
  Node* l2 = g.scalar(0.0);
  if (cfg.view_loss_enabled) {
    l_view = view_loss(g, batch.g_img, batch.g_img_labels);
    l2 = g.add(l2, l_view);
  }
  Node* l_ortho = nullptr;
  if (cfg.ortho_loss_enabled && cfg.lambda_ortho != 0.0) {
    l_ortho = ortho_loss(g, batch.v_cls, batch.v_view, cfg.alpha, cfg.ortho_variant);
    l2 = g.add(l2, g.scale(l_ortho, cfg.lambda_ortho));
  }

  TotalLoss out;
  out.total = g.add(l1, l2);
  out.report.l_ga = l_ga->val(0, 0);
  out.report.l_la = l_la->val(0, 0);
  out.report.l_id = l_id ? l_id->val(0, 0) : 0.0;
  out.report.l_view = l_view ? l_view->val(0, 0) : 0.0;
  out.report.l_ortho = l_ortho ? l_ortho->val(0, 0) : 0.0;
  out.report.l1 = l1->val(0, 0);
  out.report.l2 = l2->val(0, 0);
  out.report.total = out.total->val(0, 0);
  out.report.temperature = temp->val(0, 0);

  const struct {
    const char* name;
    double value;
  } components[] = {{"L_GA", out.report.l_ga},     {"L_LA", out.report.l_la},
                    {"L_id", out.report.l_id},     {"L_view", out.report.l_view},
                    {"L_ortho", out.report.l_ortho}, {"L", out.report.total}};
  for (const auto& c : components)
    if (!std::isfinite(c.value))
      throw NumericError(std::string("total_loss: non-finite component ") + c.name);
  return out;
}

}  // namespace tagret::loss
