#pragma once

#include <string>
#include <vector>

#include "vlalign/alignment.hpp"
#include "vlalign/language_processor.hpp"
#include "vlalign/vision_encoder.hpp"

// Masked-record-modeling maintenance: the hybrid-embedding MLM loss and
// the masked-patch reconstruction MIM loss through a frozen decoder.

namespace vlalign {

struct MlmHead {
  Param* w_hyb_w = nullptr;  // d_global -> d_language
  Param* w_hyb_b = nullptr;
  Param* vocab_bias = nullptr;  // logits = Z @ token_embed^T + bias (embedding frozen, bias trainable)
};

inline MlmHead make_mlm_head(ParamStore& ps, std::uint64_t seed, const ModelConfig& cfg) {
  MlmHead h;
  h.w_hyb_w = &add_weight_matrix(ps, seed, "heads.mlm.w_hyb_w", cfg.d_global, cfg.d_language, true);
  h.w_hyb_b = &add_tensor_param(ps, seed, "heads.mlm.w_hyb_b", {cfg.d_language}, 0.0, true);
  h.vocab_bias = &add_tensor_param(ps, seed, "heads.mlm.vocab_bias", {cfg.vocab_size}, 0.0, true);
  return h;
}

struct MlmResult {
  NodePtr loss;       // scalar
  NodePtr logits;     // [n_masked, V]; null when n_masked == 0
  long n_masked = 0;  // 0 means the loss is the 0 constant and a warning applies
  std::vector<std::pair<long, long>> positions;  // (sample, token) pairs used
  std::vector<long> targets;

  double accuracy() const {
    if (n_masked == 0) return 0.0;
    long V = logits->value.dim(1), hits = 0;
    for (long r = 0; r < n_masked; ++r) {
      long best = 0;
      for (long k = 1; k < V; ++k)
        if (logits->value.at(r, k) > logits->value.at(r, best)) best = k;
      if (best == targets[static_cast<std::size_t>(r)]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(n_masked);
  }
};

// Hybrid embeddings: token embedding + W_hyb(G_I) added at every position,
// then the shared language tower, then the weight-tied vocabulary head on
// masked positions only. Mean cross-entropy; vision gradients flow
// through G_I.
inline MlmResult mlm_loss(Graph& g, const LanguageTower& tower, const MlmHead& head,
                          const std::vector<const TokenizedReport*>& masked_reports,
                          const NodePtr& g_img) {
  check_shape(g_img->value.rank() == 2 &&
                  g_img->value.dim(0) == static_cast<long>(masked_reports.size()),
              "mlm_loss: G_I batch mismatch");
  MlmResult res;
  PaddedBatch pb = pad_reports(masked_reports);
  for (long b = 0; b < pb.B; ++b) {
    const TokenizedReport* r = masked_reports[static_cast<std::size_t>(b)];
    for (std::size_t i = 0; i < r->mask_positions.size(); ++i) {
      res.positions.emplace_back(b, r->mask_positions[i]);
      res.targets.push_back(r->targets[i]);
    }
  }
  res.n_masked = static_cast<long>(res.positions.size());
  if (res.n_masked == 0) {
    res.loss = g.constant(Tensor::scalar(0.0));
    return res;
  }
  NodePtr injection = add_bias(matmul(g_img, g.param(*head.w_hyb_w)), g.param(*head.w_hyb_b));
  NodePtr enc = encode_report_batch(g, tower, pb, injection);
  NodePtr at_mask = gather_positions(enc, res.positions);  // [K, d]
  res.logits = add_bias(matmul(at_mask, transpose2d(g.param(*tower.token_embed))),
                        g.param(*head.vocab_bias));
  res.loss = cross_entropy_rows(res.logits, res.targets);
  return res;
}

struct ImageDecoder {
  Param *embed_w = nullptr, *embed_b = nullptr;  // d_vision -> decoder_dim
  Param* mask_token = nullptr;                   // 1 x decoder_dim
  Param* pos_embed = nullptr;                    // (P+1) x decoder_dim, sinusoidal
  std::vector<BlockParams> blocks;               // frozen, no adapters
  Param *ln_g = nullptr, *ln_b = nullptr;
  Param *head_w = nullptr, *head_b = nullptr;    // decoder_dim -> (patch*scale)^2
  long heads = 0;
};

// Light-weight ViT decoder, entirely frozen.
inline ImageDecoder make_image_decoder(ParamStore& ps, std::uint64_t seed, const ModelConfig& cfg) {
  ImageDecoder d;
  d.heads = cfg.decoder_heads;
  long dd = cfg.decoder_dim;
  long out_pp = (cfg.patch * cfg.mim_target_scale) * (cfg.patch * cfg.mim_target_scale);
  d.embed_w = &add_weight_matrix(ps, seed, "decoder.embed.w", cfg.d_vision, dd, false);
  d.embed_b = &add_tensor_param(ps, seed, "decoder.embed.b", {dd}, 0.0, false);
  d.mask_token = &add_tensor_param(ps, seed, "decoder.mask_token", {1, dd}, 0.02, false);
  d.pos_embed = &ps.add("decoder.pos_embed", sinusoidal_positions(cfg.n_patches() + 1, dd), false);
  for (long i = 0; i < cfg.decoder_blocks; ++i) {
    BlockParams blk = make_block(ps, seed, "decoder.block" + std::to_string(i), dd, cfg.decoder_heads,
                                 cfg.mlp_ratio, 1, /*with_adapters=*/false);
    d.blocks.push_back(blk);
  }
  d.ln_g = &ps.add("decoder.ln_f.gamma", Tensor::full({dd}, 1.0), false);
  d.ln_b = &add_tensor_param(ps, seed, "decoder.ln_f.beta", {dd}, 0.0, false);
  d.head_w = &add_weight_matrix(ps, seed, "decoder.head.w", dd, out_pp, false);
  d.head_b = &add_tensor_param(ps, seed, "decoder.head.b", {out_pp}, 0.0, false);
  return d;
}

struct MimResult {
  NodePtr loss;
  long n_masked = 0;
};

// Ground-truth pixels of the masked patches, at the configured target
// scale (scale 1 reconstructs at input resolution).
inline Tensor mim_targets(const Tensor& image, const PatchPartition& part, long patch, long scale) {
  Tensor src = image;
  if (scale > 1) src = bilinear_resize(image, image.dim(0) * scale, image.dim(1) * scale);
  Tensor patches = patchify(src, patch * scale);
  long K = static_cast<long>(part.masked_idx.size());
  Tensor out({K, patches.dim(1)});
  for (long i = 0; i < K; ++i)
    for (long k = 0; k < patches.dim(1); ++k)
      out.at(i, k) = patches.at(part.masked_idx[static_cast<std::size_t>(i)], k);
  return out;
}

// cf_tokens[B,m,d_vision] from the encoder (class token at row 0); the
// decoder sees encoder tokens at their patch positions and the frozen
// mask token elsewhere, restores pixels, and the MSE runs over masked
// patches only. Decoder parameters are frozen; gradients reach the
// encoder tokens.
inline MimResult mim_loss(Graph& g, const ImageDecoder& dec, const NodePtr& cf_tokens,
                          const std::vector<PatchPartition>& parts,
                          const std::vector<const Tensor*>& images, long patch, long scale) {
  long B = cf_tokens->value.dim(0), m = cf_tokens->value.dim(1);
  check_shape(static_cast<long>(parts.size()) == B && static_cast<long>(images.size()) == B,
              "mim_loss: batch mismatch");
  long P = static_cast<long>(parts[0].masked_idx.size() + parts[0].non_masked_idx.size());

  MimResult res;
  long total_masked = 0;
  for (const auto& p : parts) total_masked += static_cast<long>(p.masked_idx.size());
  res.n_masked = total_masked;
  if (total_masked == 0) {
    res.loss = g.constant(Tensor::scalar(0.0));
    return res;
  }

  NodePtr emb = add_bias(matmul(cf_tokens, g.param(*dec.embed_w)), g.param(*dec.embed_b));
  // sequence slot 0 = class token, slot p+1 = patch p
  std::vector<std::vector<long>> slots(static_cast<std::size_t>(B));
  for (long b = 0; b < B; ++b) {
    auto& s = slots[static_cast<std::size_t>(b)];
    s.push_back(0);
    for (long idx : parts[static_cast<std::size_t>(b)].non_masked_idx) s.push_back(idx + 1);
    check_shape(static_cast<long>(s.size()) == m, "mim_loss: partition does not match token count");
  }
  NodePtr seq = scatter_rows(emb, g.param(*dec.mask_token), slots, P + 1);
  std::vector<long> pos_ids(static_cast<std::size_t>(B * (P + 1)));
  for (long b = 0; b < B; ++b)
    for (long l = 0; l < P + 1; ++l) pos_ids[static_cast<std::size_t>(b * (P + 1) + l)] = l;
  seq = add(seq, embed(g.param(*dec.pos_embed), pos_ids, B, P + 1));
  for (const auto& blk : dec.blocks) seq = block_forward(g, seq, blk);
  seq = layer_norm(seq, g.param(*dec.ln_g), g.param(*dec.ln_b));

  std::vector<std::pair<long, long>> masked_slots;
  for (long b = 0; b < B; ++b)
    for (long idx : parts[static_cast<std::size_t>(b)].masked_idx) masked_slots.emplace_back(b, idx + 1);
  NodePtr pred = add_bias(matmul(gather_positions(seq, masked_slots), g.param(*dec.head_w)),
                          g.param(*dec.head_b));

  long out_pp = pred->value.dim(1);
  Tensor target({total_masked, out_pp});
  long row = 0;
  for (long b = 0; b < B; ++b) {
    Tensor t = mim_targets(*images[static_cast<std::size_t>(b)], parts[static_cast<std::size_t>(b)],
                           patch, scale);
    for (long i = 0; i < t.dim(0); ++i, ++row)
      for (long k = 0; k < out_pp; ++k) target.at(row, k) = t.at(i, k);
  }
  res.loss = mse_const(pred, target);
  return res;
}

}  // namespace vlalign
