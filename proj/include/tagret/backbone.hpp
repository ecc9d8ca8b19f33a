// Copyright (c) 2026 tagret authors
// SPDX-License-Identifier: Apache-2.0
//
// Dual encoders: a small pre-norm vision transformer over image patches with
// [CLS] and view tokens prepended (sequence layout [CLS, VIEW, patches...])
// and a text transformer over token sequences ([SOS] ... [EOS]). Configured
// blocks of the image encoder host an HR-MoE (or vanilla MoE) module in place
// of the MLP. Token-selection pooling (TSE) produces the local-alignment
// features v_tse / t_tse.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tagret/graph.hpp"
#include "tagret/hr_moe.hpp"
#include "tagret/mat.hpp"
#include "tagret/params.hpp"

#include <json.hpp>

namespace tagret::model {

enum class BlockType { Vit, VanillaMoe, HrMoe };

std::string to_string(BlockType t);
BlockType block_type_from_string(const std::string& s);

struct BackboneConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t channels = 3;

  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t img_blocks = 4;
  std::size_t text_blocks = 4;

  std::size_t vocab_size = 64;
  std::size_t t_max = 24;
  std::size_t d_joint = 64;

  double tse_rho = 0.3;
  bool text_causal = false;

  BlockType block_type = BlockType::HrMoe;
  std::vector<std::size_t> moe_block_indices = {2};  // 0-based image blocks
  moe::MoeConfig moe;
  bool teacher_force_routing = false;

  std::size_t n_identities = 0;  // id-classifier classes; 0 disables it
  double ln_eps = 1e-5;

  std::size_t patches_per_side() const { return image_size / patch_size; }
  std::size_t n_patches() const { return patches_per_side() * patches_per_side(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  bool block_hosts_moe(std::size_t block_idx) const;
  void validate() const;
};

BackboneConfig backbone_config_from_json(const nlohmann::json& j);
nlohmann::json backbone_config_to_json(const BackboneConfig& c);

struct AttnParams {
  Param *ln1_g, *ln1_b;
  Param *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
  Param *ln2_g, *ln2_b;
};

struct MlpParams {
  Param *w1, *b1, *w2, *b2;
};

struct BlockParams {
  AttnParams attn{};
  std::optional<MlpParams> mlp;
  std::optional<moe::MoeParams> moe_params;
};

struct EncoderParams {
  Param* patch_w = nullptr;  // image encoder only
  Param* patch_b = nullptr;
  Param* cls_emb = nullptr;
  Param* view_emb = nullptr;
  Param* tok_emb = nullptr;  // text encoder only
  Param* pos_emb = nullptr;
  std::vector<BlockParams> blocks;
  Param* lnf_g = nullptr;
  Param* lnf_b = nullptr;
  Param* proj = nullptr;  // d_model x d_joint, shared joint-space projection
  Param* tse_w = nullptr;
  Param* tse_b = nullptr;
};

struct Model {
  BackboneConfig cfg;
  ParamStore store;
  EncoderParams img;
  EncoderParams txt;
  Param* temperature = nullptr;
  Param* idcls_w = nullptr;
  Param* idcls_b = nullptr;
};

// Deterministic parameter creation; init draws come from Rng(seed) in a fixed
// creation order.
Model build_model(const BackboneConfig& cfg, uint64_t seed);

// Pure reshape: S_I rows of flattened patch pixels (row-major inside the
// patch, channel fastest). Throws on non-divisible image dimensions.
Mat patch_pixels(const std::vector<float>& image, const BackboneConfig& cfg);

// Linear patch projection plus positional embeddings -> S_I x d_model.
Node* patchify(Graph& g, const std::vector<float>& image, const Model& m,
               GradBuffer* sink = nullptr);

struct AttentionOut {
  Node* out;                 // L x d_model
  std::vector<Node*> probs;  // per-head L x L attention rows
};
AttentionOut multi_head_attention(Graph& g, Node* seq, const AttnParams& p, std::size_t n_heads,
                                  bool causal, GradBuffer* sink = nullptr);

struct BlockRun {
  const BackboneConfig* cfg;
  bool causal = false;
  std::optional<int> forced_view;  // teacher-forced mask when set
  GradBuffer* sink = nullptr;
  // filled in when the block hosts a MoE module
  std::vector<moe::RoutingTrace>* traces = nullptr;
  std::vector<Node*>* g_img = nullptr;
};
Node* transformer_block(Graph& g, Node* seq, const BlockParams& p, const BlockRun& run);

// Scores locals against the global token by cosine, keeps the top ceil(rho*L)
// tokens, softmax-weights them, and projects the pooled vector.
Node* tse_aggregate(Graph& g, Node* locals, Node* global_token, Param& tse_w, Param& tse_b,
                    double rho, GradBuffer* sink = nullptr);

struct VisualFeatures {
  Node* v_cls = nullptr;     // 1 x d_joint
  Node* v_locals = nullptr;  // S_I x d_model (post final norm, pre projection)
  Node* v_view = nullptr;    // 1 x d_joint
  Node* v_tse = nullptr;     // 1 x d_joint
  std::vector<Node*> g_img;  // one 1x2 logits node per MoE block
  std::vector<moe::RoutingTrace> traces;
};

// view_hint feeds teacher-forced routing only when the config enables it.
VisualFeatures encode_image(Graph& g, const std::vector<float>& image, const Model& m,
                            std::optional<int> view_hint = std::nullopt,
                            GradBuffer* sink = nullptr);

struct TextFeatures {
  Node* t_sos = nullptr;     // 1 x d_joint
  Node* t_locals = nullptr;  // (len-2) x d_model; eos row when there are no locals
  Node* t_eos = nullptr;     // 1 x d_joint
  Node* t_tse = nullptr;     // 1 x d_joint
  std::size_t length = 0;    // tokens actually encoded (through the end marker)
};

// Truncates at the first end marker; positions beyond it never enter the
// computation. Missing end marker or out-of-vocabulary ids raise DataError.
TextFeatures encode_text(Graph& g, const std::vector<int>& tokens, const Model& m,
                         GradBuffer* sink = nullptr);

}  // namespace tagret::model
