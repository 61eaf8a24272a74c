#pragma once

#include <string>
#include <vector>

#include "vlalign/backbone.hpp"

// Global/local projection heads, temporal-multiview merging, the
// report-weighted attention over radiograph tokens, and the two InfoNCE
// alignment losses.

namespace vlalign {

struct DegenerateBatchError : std::runtime_error {
  explicit DegenerateBatchError(const std::string& msg) : std::runtime_error(msg) {}
};

// 2-layer MLP, hidden width = output width, GELU in between.
struct Projector {
  Param *w1 = nullptr, *b1 = nullptr, *w2 = nullptr, *b2 = nullptr;
};

inline Projector make_projector(ParamStore& ps, std::uint64_t seed, const std::string& prefix,
                                long d_in, long d_out) {
  Projector p;
  p.w1 = &add_weight_matrix(ps, seed, prefix + ".w1", d_in, d_out, true);
  p.b1 = &add_tensor_param(ps, seed, prefix + ".b1", {d_out}, 0.0, true);
  p.w2 = &add_weight_matrix(ps, seed, prefix + ".w2", d_out, d_out, true);
  p.b2 = &add_tensor_param(ps, seed, prefix + ".b2", {d_out}, 0.0, true);
  return p;
}

inline NodePtr project(Graph& g, const Projector& p, const NodePtr& x) {
  NodePtr h = gelu(add_bias(matmul(x, g.param(*p.w1)), g.param(*p.b1)));
  return add_bias(matmul(h, g.param(*p.w2)), g.param(*p.b2));
}

struct AlignmentHead {
  Projector txt_global, txt_local, img_global, img_local;
  Param* log_tau_global = nullptr;  // scalar, trainable, clamped post-step
  double tau_attn = 0.1;
  double tau_local = 0.1;
  std::string local_pool = "mean";
  std::string local_attention = "text_query";
};

inline AlignmentHead make_alignment_head(ParamStore& ps, std::uint64_t seed, const ModelConfig& cfg) {
  AlignmentHead h;
  h.txt_global = make_projector(ps, seed, "proj.txt_global", cfg.d_language, cfg.d_global);
  h.txt_local = make_projector(ps, seed, "proj.txt_local", cfg.d_language, cfg.d_local);
  h.img_global = make_projector(ps, seed, "proj.img_global", cfg.d_vision, cfg.d_global);
  h.img_local = make_projector(ps, seed, "proj.img_local", cfg.d_vision, cfg.d_local);
  h.log_tau_global = &ps.add("temp.log_tau_global",
                             Tensor::scalar(std::log(cfg.tau_global_init)), true);
  h.tau_attn = cfg.tau_attn;
  h.tau_local = cfg.tau_local;
  h.local_pool = cfg.local_pool;
  h.local_attention = cfg.local_attention;
  return h;
}

constexpr double kLogTauMin = -4.605170185988091;  // ln 0.01
constexpr double kLogTauMax = 0.0;                 // ln 1

inline void clamp_log_tau(Param& p) {
  p.value[0] = std::clamp(p.value[0], kLogTauMin, kLogTauMax);
}

// Global (class-token) plus local (per-token) projections for one
// modality; rows are unit-normalized after projection.
struct EmbeddingBundle {
  NodePtr global;       // [B, d_global]
  NodePtr local;        // [B, L, d_local]; null when L == 0
  Tensor local_weight;  // [B, L]; per-token pooling weight, rows sum to 1
  std::string modality;
};

// Z_R[B,n,d_R] with true lengths (padded positions carry zero weight).
inline EmbeddingBundle project_text(Graph& g, const AlignmentHead& h, const NodePtr& z_r,
                                    const std::vector<long>& lengths, bool with_locals = true) {
  check_shape(z_r->value.rank() == 3, "project_text: expected [B,n,d]");
  long B = z_r->value.dim(0), n = z_r->value.dim(1), d = z_r->value.dim(2);
  EmbeddingBundle out;
  out.modality = "text";
  NodePtr cls = reshape(slice_seq(z_r, 0, 1), {B, d});
  out.global = l2norm_last(project(g, h.txt_global, cls));
  if (with_locals && n > 1) {
    out.local = l2norm_last(project(g, h.txt_local, slice_seq(z_r, 1, n - 1)));
    out.local_weight = Tensor({B, n - 1});
    for (long b = 0; b < B; ++b) {
      long len = lengths.empty() ? n : lengths[static_cast<std::size_t>(b)];
      long valid = std::max(1L, len - 1);
      for (long i = 0; i < n - 1; ++i)
        out.local_weight.at(b, i) = (i < valid) ? 1.0 / static_cast<double>(valid) : 0.0;
    }
  }
  return out;
}

// view_tokens[4B,m,d_I] in view-major order. The global path averages the
// four class tokens (always divided by 4, absent views included); locals
// concatenate in fixed order cf, cl, pf, pl to length 4(m-1).
inline EmbeddingBundle project_and_merge_image(Graph& g, const AlignmentHead& h,
                                               const NodePtr& view_tokens, long B,
                                               bool with_locals = true) {
  check_shape(view_tokens->value.rank() == 3 && view_tokens->value.dim(0) == 4 * B,
              "project_and_merge_image: expected [4B,m,d]");
  long m = view_tokens->value.dim(1), d = view_tokens->value.dim(2);
  std::vector<NodePtr> cls_parts, local_parts;
  for (int s = 0; s < 4; ++s) {
    NodePtr view = slice_batch(view_tokens, s * B, B);
    cls_parts.push_back(slice_seq(view, 0, 1));
    if (with_locals && m > 1) local_parts.push_back(slice_seq(view, 1, m - 1));
  }
  NodePtr cls_mean = scale(add(add(cls_parts[0], cls_parts[1]), add(cls_parts[2], cls_parts[3])), 0.25);
  EmbeddingBundle out;
  out.modality = "image";
  out.global = l2norm_last(project(g, h.img_global, reshape(cls_mean, {B, d})));
  if (!local_parts.empty()) {
    out.local = l2norm_last(project(g, h.img_local, concat_seq(local_parts)));
    long L = out.local->value.dim(1);
    out.local_weight = Tensor::full({B, L}, 1.0 / static_cast<double>(L));
  }
  return out;
}

// For each query token, softmax-weighted mixture of key tokens:
//   alpha_ij = softmax_j(<q_i, k_j> / tau); attended_i = normalize(sum_j alpha_ij k_j)
// key_mask, when given, is [B, Lk] additive (-1e30 drops a key).
inline NodePtr attend_tokens(Graph& g, const NodePtr& queries, const NodePtr& keys, double tau,
                             const Tensor* key_mask = nullptr) {
  check_shape(queries->value.rank() == 3 && keys->value.rank() == 3 &&
                  queries->value.dim(0) == keys->value.dim(0) &&
                  queries->value.dim(2) == keys->value.dim(2),
              "attend_tokens: incompatible shapes");
  check_shape(keys->value.dim(1) >= 1, "attend_tokens: no key tokens");
  NodePtr scores = scale(bmm_nt(queries, keys), 1.0 / tau);
  if (key_mask) scores = add_key_mask(scores, *key_mask, 1);
  return l2norm_last(bmm(softmax_last(scores), keys));
}

// Report-token-indexed attention over radiograph tokens (Attn(L_I, L_R)).
inline NodePtr local_attend(Graph& g, const NodePtr& l_img, const NodePtr& l_txt, double tau_attn) {
  return attend_tokens(g, l_txt, l_img, tau_attn);
}

// Symmetric InfoNCE over a [B,B] score matrix with diagonal positives:
// 0.5 * (CE over rows + CE over columns).
inline NodePtr info_nce_matrix(Graph& g, const NodePtr& scores) {
  (void)g;
  long B = scores->value.dim(0);
  if (B < 2) throw DegenerateBatchError("InfoNCE needs a batch of at least 2, got " + std::to_string(B));
  std::vector<long> diag(static_cast<std::size_t>(B));
  for (long i = 0; i < B; ++i) diag[static_cast<std::size_t>(i)] = i;
  NodePtr row_ce = cross_entropy_rows(scores, diag);
  NodePtr col_ce = cross_entropy_rows(transpose2d(scores), diag);
  return scale(add(row_ce, col_ce), 0.5);
}

// Eq-style global loss: cosine similarity matrix scaled by 1/tau_global.
// tau is the learnable scalar passed as its log so the scale stays
// positive; rows of both inputs must already be unit-normalized.
inline NodePtr info_nce_global(Graph& g, const NodePtr& g_img, const NodePtr& g_txt,
                               const NodePtr& log_tau) {
  check_shape(g_img->value.rank() == 2 && g_txt->value.rank() == 2 &&
                  g_img->value.same_shape(g_txt->value),
              "info_nce_global: expected matching [B,d] inputs");
  NodePtr sim = matmul(g_img, transpose2d(g_txt));
  NodePtr inv_tau = vexp(neg(log_tau));
  return info_nce_matrix(g, mul_scalar(sim, inv_tau));
}

inline NodePtr info_nce_global_fixed_tau(Graph& g, const NodePtr& g_img, const NodePtr& g_txt,
                                         double tau) {
  NodePtr sim = matmul(g_img, transpose2d(g_txt));
  return info_nce_matrix(g, scale(sim, 1.0 / tau));
}

// Local loss: pairwise score s(b, b') pools the per-token cosine between
// the attended key mixture and the query token itself, over all B x B
// sample pairs.
inline NodePtr info_nce_local(Graph& g, const EmbeddingBundle& img, const EmbeddingBundle& txt,
                              const AlignmentHead& h) {
  check_shape(img.local != nullptr && txt.local != nullptr, "info_nce_local: missing local tokens");
  long B = img.local->value.dim(0);
  if (B < 2) throw DegenerateBatchError("InfoNCE needs a batch of at least 2");
  bool text_query = h.local_attention == "text_query";
  const EmbeddingBundle& queries = text_query ? txt : img;
  const EmbeddingBundle& keys = text_query ? img : txt;

  // queries repeat per key sample, keys tile per query sample
  long Lq = queries.local->value.dim(1);
  NodePtr q_rep = repeat_batch(queries.local, B);  // pair q = bq * B + bk
  NodePtr k_rep = tile_batch(keys.local, B);

  Tensor key_mask;  // only text keys can contain padding
  const Tensor* mask_ptr = nullptr;
  if (!text_query) {
    long Lk = keys.local->value.dim(1);
    key_mask = Tensor({B * B, Lk});
    for (long q = 0; q < B * B; ++q)
      for (long i = 0; i < Lk; ++i)
        if (keys.local_weight.at(q % B, i) == 0.0) key_mask.at(q, i) = -1e30;
    mask_ptr = &key_mask;
  }
  NodePtr attended = attend_tokens(g, q_rep, k_rep, h.tau_attn, mask_ptr);

  NodePtr token_cos = sum_last(mul(attended, q_rep));  // [B*B, Lq]
  Tensor pool_w({B * B, Lq});
  for (long q = 0; q < B * B; ++q)
    for (long i = 0; i < Lq; ++i) pool_w.at(q, i) = queries.local_weight.at(q / B, i);

  NodePtr pair_scores;  // [B*B]
  if (h.local_pool == "lse") {
    Tensor drop({B * B, Lq});
    for (long q = 0; q < B * B; ++q)
      for (long i = 0; i < Lq; ++i)
        if (pool_w.at(q, i) == 0.0) drop.at(q, i) = -1e30;
    pair_scores = logsumexp_axis1(add(token_cos, g.constant(std::move(drop))));
  } else {
    pair_scores = sum_last(mul_const(token_cos, pool_w));
  }

  // rows index the query modality, columns the key modality
  NodePtr score_matrix = reshape(pair_scores, {B, B});
  return info_nce_matrix(g, scale(score_matrix, 1.0 / h.tau_local));
}

}  // namespace vlalign
