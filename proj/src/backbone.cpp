// Copyright (c) 2026 tagret authors
// SPDX-License-Identifier: Apache-2.0

#include "tagret/backbone.hpp"

#include <algorithm>
#include <cmath>

namespace tagret::model {

using nlohmann::json;

std::string to_string(BlockType t) {
  switch (t) {
    case BlockType::Vit: return "vit";
    case BlockType::VanillaMoe: return "moe";
    case BlockType::HrMoe: return "hrmoe";
  }
  return "hrmoe";
}

BlockType block_type_from_string(const std::string& s) {
  if (s == "vit") return BlockType::Vit;
  if (s == "moe") return BlockType::VanillaMoe;
  if (s == "hrmoe") return BlockType::HrMoe;
  throw ConfigError("unknown block type: " + s + " (expected vit|moe|hrmoe)");
}

bool BackboneConfig::block_hosts_moe(std::size_t block_idx) const {
  if (block_type == BlockType::Vit) return false;
  return std::find(moe_block_indices.begin(), moe_block_indices.end(), block_idx) !=
         moe_block_indices.end();
}

void BackboneConfig::validate() const {
  if (image_size % patch_size != 0)
    throw ConfigError("image_size must be divisible by patch_size");
  if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  if (img_blocks == 0 || text_blocks == 0) throw ConfigError("need at least one block");
  if (vocab_size < 3) throw ConfigError("vocab_size too small");
  if (t_max < 2) throw ConfigError("t_max must allow [SOS] and [EOS]");
  if (tse_rho <= 0.0 || tse_rho > 1.0) throw ConfigError("tse_rho must be in (0, 1]");
  if (block_type != BlockType::Vit) {
    if (moe_block_indices.empty())
      throw ConfigError("MoE block type needs at least one block index");
    for (std::size_t b : moe_block_indices)
      if (b >= img_blocks) throw ConfigError("moe_block_indices out of range");
    const moe::ExpertPartition part = moe.partition();
    const std::size_t aerial_size = part.aerial_set().size();
    const std::size_t ground_size = part.ground_set().size();
    const std::size_t allowed =
        block_type == BlockType::HrMoe ? std::min(aerial_size, ground_size) : moe.n_experts;
    if (moe.top_k == 0 || moe.top_k > allowed)
      throw ConfigError("top_k = " + std::to_string(moe.top_k) +
                        " exceeds the smallest allowed expert pool (" + std::to_string(allowed) +
                        ")");
  }
}

BackboneConfig backbone_config_from_json(const json& j) {
  BackboneConfig c;
  static const std::vector<std::string> known = {
      "image_size",   "patch_size",       "channels",       "d_model",
      "n_heads",      "d_ff",             "img_blocks",     "text_blocks",
      "vocab_size",   "t_max",            "d_joint",        "tse_rho",
      "text_causal",  "block_type",       "moe_block_indices", "teacher_force_routing",
      "n_identities", "n_experts",        "aerial_only_experts", "ground_only_experts",
      "top_k",        "expert_d_hidden"};
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end())
      throw ConfigError("unknown model config key: " + k);

  if (j.contains("image_size")) c.image_size = j["image_size"];
  if (j.contains("patch_size")) c.patch_size = j["patch_size"];
  if (j.contains("channels")) c.channels = j["channels"];
  if (j.contains("d_model")) c.d_model = j["d_model"];
  if (j.contains("n_heads")) c.n_heads = j["n_heads"];
  if (j.contains("d_ff")) c.d_ff = j["d_ff"];
  if (j.contains("img_blocks")) c.img_blocks = j["img_blocks"];
  if (j.contains("text_blocks")) c.text_blocks = j["text_blocks"];
  if (j.contains("vocab_size")) c.vocab_size = j["vocab_size"];
  if (j.contains("t_max")) c.t_max = j["t_max"];
  if (j.contains("d_joint")) c.d_joint = j["d_joint"];
  if (j.contains("tse_rho")) c.tse_rho = j["tse_rho"];
  if (j.contains("text_causal")) c.text_causal = j["text_causal"];
  if (j.contains("block_type")) c.block_type = block_type_from_string(j["block_type"]);
  if (j.contains("moe_block_indices"))
    c.moe_block_indices = j["moe_block_indices"].get<std::vector<std::size_t>>();
  if (j.contains("teacher_force_routing")) c.teacher_force_routing = j["teacher_force_routing"];
  if (j.contains("n_identities")) c.n_identities = j["n_identities"];
  if (j.contains("n_experts")) c.moe.n_experts = j["n_experts"];
  if (j.contains("aerial_only_experts")) c.moe.aerial_only_experts = j["aerial_only_experts"];
  if (j.contains("ground_only_experts")) c.moe.ground_only_experts = j["ground_only_experts"];
  if (j.contains("top_k")) c.moe.top_k = j["top_k"];
  if (j.contains("expert_d_hidden")) c.moe.d_hidden = j["expert_d_hidden"];
  return c;
}

json backbone_config_to_json(const BackboneConfig& c) {
  return json{{"image_size", c.image_size},
              {"patch_size", c.patch_size},
              {"channels", c.channels},
              {"d_model", c.d_model},
              {"n_heads", c.n_heads},
              {"d_ff", c.d_ff},
              {"img_blocks", c.img_blocks},
              {"text_blocks", c.text_blocks},
              {"vocab_size", c.vocab_size},
              {"t_max", c.t_max},
              {"d_joint", c.d_joint},
              {"tse_rho", c.tse_rho},
              {"text_causal", c.text_causal},
              {"block_type", to_string(c.block_type)},
              {"moe_block_indices", c.moe_block_indices},
              {"teacher_force_routing", c.teacher_force_routing},
              {"n_identities", c.n_identities},
              {"n_experts", c.moe.n_experts},
              {"aerial_only_experts", c.moe.aerial_only_experts},
              {"ground_only_experts", c.moe.ground_only_experts},
              {"top_k", c.moe.top_k},
              {"expert_d_hidden", c.moe.d_hidden}};
}

// --- parameter construction -----------------------------------------------------

namespace {

// Initialization scheme, fixed by calibration on the toy benchmark:
//  - weights at 0.02 keep the pre-norm blocks near-linear at the start;
//  - positional/token embeddings at 0.3 let layouts and token identity
//    survive row normalization;
//  - a strong [CLS] embedding (1.0) and a weak view embedding (0.05,
//    orthogonalized against [CLS]) make the view-token stream image-dominated
//    (the image-level router needs that) while keeping the initial
//    cls/view cosine small so the thresholded orthogonality loss starts
//    inside its active region on engaged seeds.
constexpr double kInitWeight = 0.02;
constexpr double kInitClsEmbed = 1.0;
constexpr double kInitPosEmbed = 0.3;
constexpr double kInitViewEmbed = 0.05;

AttnParams create_attn(ParamStore& s, const std::string& p, std::size_t d, Rng& rng) {
  AttnParams a;
  a.ln1_g = &s.create_filled(p + ".ln1.g", 1, d, 1.0, false);
  a.ln1_b = &s.create_filled(p + ".ln1.b", 1, d, 0.0, false);
  a.wq = &s.create(p + ".attn.wq", d, d, kInitWeight, rng);
  a.bq = &s.create_filled(p + ".attn.bq", 1, d, 0.0, false);
  a.wk = &s.create(p + ".attn.wk", d, d, kInitWeight, rng);
  a.bk = &s.create_filled(p + ".attn.bk", 1, d, 0.0, false);
  a.wv = &s.create(p + ".attn.wv", d, d, kInitWeight, rng);
  a.bv = &s.create_filled(p + ".attn.bv", 1, d, 0.0, false);
  a.wo = &s.create(p + ".attn.wo", d, d, kInitWeight, rng);
  a.bo = &s.create_filled(p + ".attn.bo", 1, d, 0.0, false);
  a.ln2_g = &s.create_filled(p + ".ln2.g", 1, d, 1.0, false);
  a.ln2_b = &s.create_filled(p + ".ln2.b", 1, d, 0.0, false);
  return a;
}

MlpParams create_mlp(ParamStore& s, const std::string& p, std::size_t d, std::size_t d_ff,
                     Rng& rng) {
  MlpParams m;
  m.w1 = &s.create(p + ".mlp.w1", d, d_ff, kInitWeight, rng);
  m.b1 = &s.create_filled(p + ".mlp.b1", 1, d_ff, 0.0, false);
  m.w2 = &s.create(p + ".mlp.w2", d_ff, d, kInitWeight, rng);
  m.b2 = &s.create_filled(p + ".mlp.b2", 1, d, 0.0, false);
  return m;
}

}  // namespace

Model build_model(const BackboneConfig& cfg, uint64_t seed) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  Rng rng(mix_seed(seed, 0x4d4f44454cULL));
  ParamStore& s = m.store;

  const std::size_t d = cfg.d_model;

  // image encoder
  m.img.patch_w = &s.create("img.patch.w", cfg.patch_dim(), d, kInitWeight, rng);
  m.img.patch_b = &s.create_filled("img.patch.b", 1, d, 0.0, false);
  // strong distinct directions keep the [CLS]/view residual streams apart at
  // initialization; the view embedding starts orthogonal to the [CLS] one
  m.img.cls_emb = &s.create("img.cls", 1, d, kInitClsEmbed, rng, false);
  m.img.view_emb = &s.create("img.view", 1, d, kInitViewEmbed, rng, false);
  {
    Mat& c = m.img.cls_emb->value;
    Mat& v = m.img.view_emb->value;
    const double scale = dot(c, v) / dot(c, c);
    for (std::size_t i = 0; i < v.size(); ++i) v.at(i) -= scale * c.at(i);
  }
  m.img.pos_emb = &s.create("img.pos", 2 + cfg.n_patches(), d, kInitPosEmbed, rng, false);
  for (std::size_t b = 0; b < cfg.img_blocks; ++b) {
    const std::string p = "img.blk" + std::to_string(b);
    BlockParams blk;
    blk.attn = create_attn(s, p, d, rng);
    if (cfg.block_hosts_moe(b))
      blk.moe_params = moe::create_moe_params(s, p + ".moe", d, cfg.moe, rng);
    else
      blk.mlp = create_mlp(s, p, d, cfg.d_ff, rng);
    m.img.blocks.push_back(blk);
  }
  m.img.lnf_g = &s.create_filled("img.lnf.g", 1, d, 1.0, false);
  m.img.lnf_b = &s.create_filled("img.lnf.b", 1, d, 0.0, false);
  // orthogonal projection preserves angles, so the initial cls/view cosine is
  // controlled by the token streams alone
  m.img.proj = &s.create_filled("img.proj", d, cfg.d_joint, 0.0);
  if (cfg.d_joint <= d)
    fill_orthogonal(m.img.proj->value, rng);
  else
    fill_normal(m.img.proj->value, rng, 1.0 / std::sqrt(double(d)));
  m.img.tse_w = &s.create("img.tse.w", d, cfg.d_joint, 1.0 / std::sqrt(double(d)), rng);
  m.img.tse_b = &s.create_filled("img.tse.b", 1, cfg.d_joint, 0.0, false);

  // text encoder
  m.txt.tok_emb = &s.create("txt.emb", cfg.vocab_size, d, kInitPosEmbed, rng, false);
  m.txt.pos_emb = &s.create("txt.pos", cfg.t_max, d, kInitPosEmbed, rng, false);
  for (std::size_t b = 0; b < cfg.text_blocks; ++b) {
    const std::string p = "txt.blk" + std::to_string(b);
    BlockParams blk;
    blk.attn = create_attn(s, p, d, rng);
    blk.mlp = create_mlp(s, p, d, cfg.d_ff, rng);
    m.txt.blocks.push_back(blk);
  }
  m.txt.lnf_g = &s.create_filled("txt.lnf.g", 1, d, 1.0, false);
  m.txt.lnf_b = &s.create_filled("txt.lnf.b", 1, d, 0.0, false);
  m.txt.proj = &s.create_filled("txt.proj", d, cfg.d_joint, 0.0);
  if (cfg.d_joint <= d)
    fill_orthogonal(m.txt.proj->value, rng);
  else
    fill_normal(m.txt.proj->value, rng, 1.0 / std::sqrt(double(d)));
  m.txt.tse_w = &s.create("txt.tse.w", d, cfg.d_joint, 1.0 / std::sqrt(double(d)), rng);
  m.txt.tse_b = &s.create_filled("txt.tse.b", 1, cfg.d_joint, 0.0, false);

  m.temperature = &s.create_filled("joint.temperature", 1, 1, 0.07, false);

  if (cfg.n_identities > 0) {
    m.idcls_w = &s.create("idcls.w", cfg.d_joint, cfg.n_identities, 0.02, rng);
    m.idcls_b = &s.create_filled("idcls.b", 1, cfg.n_identities, 0.0, false);
  }
  return m;
}

// --- forward pieces ------------------------------------------------------------

Mat patch_pixels(const std::vector<float>& image, const BackboneConfig& cfg) {
  const std::size_t H = cfg.image_size, W = cfg.image_size, C = cfg.channels,
                    P = cfg.patch_size;
  if (H % P != 0 || W % P != 0) throw ConfigError("patch_pixels: image not divisible by patch");
  if (image.size() != H * W * C) throw DataError("patch_pixels: image size mismatch");
  const std::size_t per_side = W / P;
  Mat out(cfg.n_patches(), cfg.patch_dim());
  for (std::size_t pr = 0; pr < per_side; ++pr)
    for (std::size_t pc = 0; pc < per_side; ++pc) {
      const std::size_t patch = pr * per_side + pc;
      std::size_t k = 0;
      for (std::size_t r = 0; r < P; ++r)
        for (std::size_t c = 0; c < P; ++c)
          for (std::size_t ch = 0; ch < C; ++ch)
            out(patch, k++) = static_cast<double>(
                image[((pr * P + r) * W + (pc * P + c)) * C + ch]);
    }
  return out;
}

Node* patchify(Graph& g, const std::vector<float>& image, const Model& m, GradBuffer* sink) {
  const BackboneConfig& cfg = m.cfg;
  Node* patches = g.input(patch_pixels(image, cfg));
  Node* projected =
      g.add_rowvec(g.matmul(patches, g.param(*m.img.patch_w, sink)), g.param(*m.img.patch_b, sink));
  Node* pos = g.slice_rows(g.param(*m.img.pos_emb, sink), 2, cfg.n_patches());
  return g.add(projected, pos);
}

AttentionOut multi_head_attention(Graph& g, Node* seq, const AttnParams& p, std::size_t n_heads,
                                  bool causal, GradBuffer* sink) {
  const std::size_t L = seq->val.rows();
  const std::size_t d = seq->val.cols();
  const std::size_t dk = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  Node* q = g.add_rowvec(g.matmul(seq, g.param(*p.wq, sink)), g.param(*p.bq, sink));
  Node* k = g.add_rowvec(g.matmul(seq, g.param(*p.wk, sink)), g.param(*p.bk, sink));
  Node* v = g.add_rowvec(g.matmul(seq, g.param(*p.wv, sink)), g.param(*p.bv, sink));

  Mat causal_allowed;
  if (causal) {
    causal_allowed.resize(L, L, 0.0);
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j <= i; ++j) causal_allowed(i, j) = 1.0;
  }

  AttentionOut out;
  std::vector<Node*> heads;
  for (std::size_t h = 0; h < n_heads; ++h) {
    Node* qh = g.slice_cols(q, h * dk, dk);
    Node* kh = g.slice_cols(k, h * dk, dk);
    Node* vh = g.slice_cols(v, h * dk, dk);
    Node* scores = g.scale(g.matmul(qh, g.transpose(kh)), scale);
    Node* attn = causal ? g.masked_softmax_rows(scores, causal_allowed) : g.softmax_rows(scores);
    out.probs.push_back(attn);
    heads.push_back(g.matmul(attn, vh));
  }
  Node* merged = g.concat_cols(heads);
  out.out = g.add_rowvec(g.matmul(merged, g.param(*p.wo, sink)), g.param(*p.bo, sink));
  return out;
}

namespace {

Node* layernorm_affine(Graph& g, Node* x, Param& gain, Param& bias, double eps,
                       GradBuffer* sink) {
  return g.add_rowvec(g.mul_rowvec(g.layernorm(x, eps), g.param(gain, sink)),
                      g.param(bias, sink));
}

}  // namespace

Node* transformer_block(Graph& g, Node* seq, const BlockParams& p, const BlockRun& run) {
  const BackboneConfig& cfg = *run.cfg;

  Node* normed = layernorm_affine(g, seq, *p.attn.ln1_g, *p.attn.ln1_b, cfg.ln_eps, run.sink);
  Node* attn = multi_head_attention(g, normed, p.attn, cfg.n_heads, run.causal, run.sink).out;
  Node* x = g.add(seq, attn);

  Node* normed2 = layernorm_affine(g, x, *p.attn.ln2_g, *p.attn.ln2_b, cfg.ln_eps, run.sink);
  Node* branch;
  if (p.moe_params) {
    if (cfg.block_type == BlockType::HrMoe) {
      moe::MoeForward fwd =
          moe::moe_forward(g, normed2, 1, *p.moe_params, cfg.moe, run.forced_view, run.sink);
      if (run.traces) run.traces->push_back(std::move(fwd.trace));
      if (run.g_img) run.g_img->push_back(fwd.g_img);
      branch = fwd.out;
    } else {
      moe::MoeForward fwd = moe::vanilla_moe_forward(g, normed2, *p.moe_params, cfg.moe, run.sink);
      if (run.traces) run.traces->push_back(std::move(fwd.trace));
      branch = fwd.out;
    }
  } else {
    const MlpParams& mp = *p.mlp;
    Node* h = g.gelu(g.add_rowvec(g.matmul(normed2, g.param(*mp.w1, run.sink)),
                                  g.param(*mp.b1, run.sink)));
    branch = g.add_rowvec(g.matmul(h, g.param(*mp.w2, run.sink)), g.param(*mp.b2, run.sink));
  }
  return g.add(x, branch);
}

Node* tse_aggregate(Graph& g, Node* locals, Node* global_token, Param& tse_w, Param& tse_b,
                    double rho, GradBuffer* sink) {
  const std::size_t L = locals->val.rows();
  if (L == 0) throw NumericError("tse_aggregate: need at least one local token");

  Node* scores = g.matmul(g.l2_normalize_rows(locals),
                          g.transpose(g.l2_normalize_rows(global_token)));  // L x 1

  std::size_t k = static_cast<std::size_t>(std::ceil(rho * static_cast<double>(L)));
  k = std::min(std::max<std::size_t>(k, 1), L);

  // top-k on score values; ties prefer the lower index
  std::vector<std::size_t> order(L);
  for (std::size_t i = 0; i < L; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores->val(a, 0) > scores->val(b, 0);
  });
  Mat allowed(1, L, 0.0);
  for (std::size_t i = 0; i < k; ++i) allowed(0, order[i]) = 1.0;

  Node* weights = g.masked_softmax_rows(g.transpose(scores), allowed);  // 1 x L
  Node* pooled = g.matmul(weights, locals);                             // 1 x d_model
  return g.add_rowvec(g.matmul(pooled, g.param(tse_w, sink)), g.param(tse_b, sink));
}

VisualFeatures encode_image(Graph& g, const std::vector<float>& image, const Model& m,
                            std::optional<int> view_hint, GradBuffer* sink) {
  const BackboneConfig& cfg = m.cfg;
  VisualFeatures out;

  Node* patches = patchify(g, image, m, sink);
  Node* cls = g.add(g.param(*m.img.cls_emb, sink), g.slice_rows(g.param(*m.img.pos_emb, sink), 0, 1));
  Node* view = g.add(g.param(*m.img.view_emb, sink), g.slice_rows(g.param(*m.img.pos_emb, sink), 1, 1));
  Node* seq = g.concat_rows({cls, view, patches});

  BlockRun run;
  run.cfg = &cfg;
  run.causal = false;
  run.sink = sink;
  run.traces = &out.traces;
  run.g_img = &out.g_img;
  if (cfg.teacher_force_routing && view_hint) run.forced_view = *view_hint;

  for (const BlockParams& blk : m.img.blocks) seq = transformer_block(g, seq, blk, run);

  Node* final_seq = layernorm_affine(g, seq, *m.img.lnf_g, *m.img.lnf_b, cfg.ln_eps, sink);
  Node* pre_cls = g.slice_rows(final_seq, 0, 1);
  Node* pre_view = g.slice_rows(final_seq, 1, 1);
  out.v_locals = g.slice_rows(final_seq, 2, cfg.n_patches());

  Node* proj = g.param(*m.img.proj, sink);
  out.v_cls = g.matmul(pre_cls, proj);
  out.v_view = g.matmul(pre_view, proj);
  out.v_tse = tse_aggregate(g, out.v_locals, pre_cls, *m.img.tse_w, *m.img.tse_b, cfg.tse_rho,
                            sink);
  return out;
}

TextFeatures encode_text(Graph& g, const std::vector<int>& tokens, const Model& m,
                         GradBuffer* sink) {
  const BackboneConfig& cfg = m.cfg;

  std::vector<std::size_t> ids;
  bool found_eos = false;
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size)
      throw DataError("encode_text: token id " + std::to_string(t) + " outside the vocabulary");
    ids.push_back(static_cast<std::size_t>(t));
    if (t == 2) {  // end marker; positions after it are padding and are dropped
      found_eos = true;
      break;
    }
  }
  if (!found_eos) throw DataError("encode_text: sequence has no end marker");
  if (ids.size() > cfg.t_max)
    throw DataError("encode_text: sequence longer than t_max");

  const std::size_t L = ids.size();
  Node* emb = g.rows_gather(g.param(*m.txt.tok_emb, sink), ids);
  Node* seq = g.add(emb, g.slice_rows(g.param(*m.txt.pos_emb, sink), 0, L));

  BlockRun run;
  run.cfg = &cfg;
  run.causal = cfg.text_causal;
  run.sink = sink;

  for (const BlockParams& blk : m.txt.blocks) seq = transformer_block(g, seq, blk, run);

  Node* final_seq = layernorm_affine(g, seq, *m.txt.lnf_g, *m.txt.lnf_b, cfg.ln_eps, sink);

  TextFeatures out;
  out.length = L;
  Node* pre_sos = g.slice_rows(final_seq, 0, 1);
  Node* pre_eos = g.slice_rows(final_seq, L - 1, 1);
  // locals sit strictly between the markers; degenerate [SOS, EOS] sequences
  // fall back to pooling the end marker itself
  out.t_locals = L > 2 ? g.slice_rows(final_seq, 1, L - 2) : pre_eos;

  Node* proj = g.param(*m.txt.proj, sink);
  out.t_sos = g.matmul(pre_sos, proj);
  out.t_eos = g.matmul(pre_eos, proj);
  out.t_tse = tse_aggregate(g, out.t_locals, pre_eos, *m.txt.tse_w, *m.txt.tse_b, cfg.tse_rho,
                            sink);
  return out;
}

}  // namespace tagret::model
