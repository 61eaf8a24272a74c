#pragma once

#include <string>
#include <vector>

#include "vlalign/backbone.hpp"
#include "vlalign/records.hpp"

// Radiograph tokenization: patchify, 75% random masking, fixed sinusoidal
// positional embeddings plus learnable temporal-view embeddings, and the
// shared adapter-integrated vision tower (one pass per quaternion view).

namespace vlalign {

struct PatchPartition {
  std::vector<long> non_masked_idx;  // ascending patch indices, length m-1
  std::vector<long> masked_idx;      // ascending, length round(ratio * P)
};

// Row-major patch grid: image[H,W] -> [P, patch^2].
inline Tensor patchify(const Tensor& image, long patch) {
  check_shape(image.rank() == 2, "patchify: expected a 2-D grid");
  long H = image.dim(0), W = image.dim(1);
  check_shape(H % patch == 0 && W % patch == 0,
              "patchify: image " + image.shape_str() + " not divisible by patch " + std::to_string(patch));
  long gh = H / patch, gw = W / patch;
  Tensor out({gh * gw, patch * patch});
  for (long py = 0; py < gh; ++py)
    for (long px = 0; px < gw; ++px) {
      long p = py * gw + px;
      for (long y = 0; y < patch; ++y)
        for (long x = 0; x < patch; ++x)
          out.at(p, y * patch + x) = image.at(py * patch + y, px * patch + x);
    }
  return out;
}

inline Tensor unpatchify(const Tensor& patches, long H, long W, long patch) {
  check_shape(patches.rank() == 2 && patches.dim(1) == patch * patch, "unpatchify: bad patch tensor");
  long gh = H / patch, gw = W / patch;
  check_shape(patches.dim(0) == gh * gw, "unpatchify: patch count mismatch");
  Tensor img({H, W});
  for (long p = 0; p < patches.dim(0); ++p) {
    long py = p / gw, px = p % gw;
    for (long y = 0; y < patch; ++y)
      for (long x = 0; x < patch; ++x)
        img.at(py * patch + y, px * patch + x) = patches.at(p, y * patch + x);
  }
  return img;
}

// Uniformly random subset of exactly round(ratio * P) masked patches.
inline PatchPartition mask_patches(long P, double ratio, Rng& rng) {
  check_shape(ratio >= 0.0 && ratio < 1.0, "mask_patches: ratio must be in [0,1)");
  long n_mask = std::lround(ratio * static_cast<double>(P));
  PatchPartition part;
  part.masked_idx = rng.choose(P, n_mask);
  std::vector<bool> is_masked(static_cast<std::size_t>(P), false);
  for (long i : part.masked_idx) is_masked[static_cast<std::size_t>(i)] = true;
  for (long i = 0; i < P; ++i)
    if (!is_masked[static_cast<std::size_t>(i)]) part.non_masked_idx.push_back(i);
  return part;
}

// Fixed sinusoidal table over [positions x d]; row 0 serves the class token.
inline Tensor sinusoidal_positions(long n_pos, long d) {
  Tensor t({n_pos, d});
  for (long p = 0; p < n_pos; ++p)
    for (long k = 0; k < d; ++k) {
      double freq = std::pow(10000.0, -2.0 * static_cast<double>(k / 2) / static_cast<double>(d));
      t.at(p, k) = (k % 2 == 0) ? std::sin(p * freq) : std::cos(p * freq);
    }
  return t;
}

struct VisionTower {
  Param* patch_embed_w = nullptr;  // patch^2 x d, frozen
  Param* patch_embed_b = nullptr;  // d, frozen
  Param* cls_token = nullptr;      // 1 x d, frozen
  Param* pos_embed = nullptr;      // (P+1) x d, frozen (sinusoidal)
  Param* view_embed = nullptr;     // 4 x d, trainable (temporal-view)
  std::vector<BlockParams> blocks;
  Param *ln_f_g = nullptr, *ln_f_b = nullptr;
  long d = 0;
  long heads = 0;
  long patch = 0;
  long n_patches = 0;
};

inline VisionTower make_vision_tower(ParamStore& ps, std::uint64_t seed, const ModelConfig& cfg,
                                     bool with_adapters = true) {
  VisionTower t;
  t.d = cfg.d_vision;
  t.heads = cfg.heads_vision;
  t.patch = cfg.patch;
  t.n_patches = cfg.n_patches();
  t.patch_embed_w = &add_weight_matrix(ps, seed, "vision.patch_embed.w", cfg.patch * cfg.patch,
                                       cfg.d_vision, false);
  t.patch_embed_b = &add_tensor_param(ps, seed, "vision.patch_embed.b", {cfg.d_vision}, 0.0, false);
  t.cls_token = &add_tensor_param(ps, seed, "vision.cls_token", {1, cfg.d_vision}, 0.02, false);
  t.pos_embed = &ps.add("vision.pos_embed", sinusoidal_positions(t.n_patches + 1, cfg.d_vision), false);
  t.view_embed = &add_tensor_param(ps, seed, "vision.view_embed", {4, cfg.d_vision}, 0.02, true);
  for (long i = 0; i < cfg.blocks_vision; ++i)
    t.blocks.push_back(make_block(ps, seed, "vision.block" + std::to_string(i), cfg.d_vision,
                                  cfg.heads_vision, cfg.mlp_ratio, cfg.adapter_rank(cfg.d_vision),
                                  with_adapters));
  t.ln_f_g = &ps.add("vision.ln_f.gamma", Tensor::full({cfg.d_vision}, 1.0), false);
  t.ln_f_b = &add_tensor_param(ps, seed, "vision.ln_f.beta", {cfg.d_vision}, 0.0, false);
  return t;
}

// One view for one record, ready for a batched tower pass.
struct ViewInput {
  Tensor kept_patches;            // [m-1, patch^2]
  std::vector<long> kept_idx;     // ascending patch indices
  ViewTag tag = ViewTag::cf;
};

inline ViewInput make_view_input(const Tensor& image, const PatchPartition& part, long patch, ViewTag tag) {
  Tensor all = patchify(image, patch);
  long m1 = static_cast<long>(part.non_masked_idx.size());
  ViewInput v;
  v.kept_patches = Tensor({m1, all.dim(1)});
  for (long i = 0; i < m1; ++i)
    for (long k = 0; k < all.dim(1); ++k)
      v.kept_patches.at(i, k) = all.at(part.non_masked_idx[static_cast<std::size_t>(i)], k);
  v.kept_idx = part.non_masked_idx;
  v.tag = tag;
  return v;
}

// Encodes a batch of views through the shared tower. Token row 0 is the
// class token; rows 1.. follow kept_idx order. Positional rows are
// gathered per kept patch (patch i uses table row i+1); the temporal-view
// embedding of each view's tag is added to every token, class included.
inline NodePtr encode_view_batch(Graph& g, const VisionTower& t, const std::vector<ViewInput>& views) {
  check_shape(!views.empty(), "encode_view_batch: empty batch");
  long B = static_cast<long>(views.size());
  long m1 = static_cast<long>(views[0].kept_idx.size());
  long pp = t.patch * t.patch;
  Tensor patches({B, m1, pp});
  std::vector<long> pos_ids(static_cast<std::size_t>(B * (m1 + 1)));
  std::vector<long> tag_ids(static_cast<std::size_t>(B * (m1 + 1)));
  for (long b = 0; b < B; ++b) {
    const ViewInput& v = views[static_cast<std::size_t>(b)];
    check_shape(static_cast<long>(v.kept_idx.size()) == m1, "encode_view_batch: ragged partitions");
    for (long i = 0; i < m1; ++i)
      for (long k = 0; k < pp; ++k) patches.at(b, i, k) = v.kept_patches.at(i, k);
    pos_ids[static_cast<std::size_t>(b * (m1 + 1))] = 0;
    tag_ids[static_cast<std::size_t>(b * (m1 + 1))] = static_cast<long>(v.tag);
    for (long i = 0; i < m1; ++i) {
      pos_ids[static_cast<std::size_t>(b * (m1 + 1) + i + 1)] = v.kept_idx[static_cast<std::size_t>(i)] + 1;
      tag_ids[static_cast<std::size_t>(b * (m1 + 1) + i + 1)] = static_cast<long>(v.tag);
    }
  }
  NodePtr tok = add_bias(matmul(g.constant(std::move(patches)), g.param(*t.patch_embed_w)),
                         g.param(*t.patch_embed_b));
  // prepend the shared class token
  std::vector<long> cls_ids(static_cast<std::size_t>(B), 0);
  NodePtr cls = embed(g.param(*t.cls_token), cls_ids, B, 1);
  NodePtr x = concat_seq({cls, tok});
  x = add(x, embed(g.param(*t.pos_embed), pos_ids, B, m1 + 1));
  x = add(x, embed(g.param(*t.view_embed), tag_ids, B, m1 + 1));
  for (const auto& blk : t.blocks) x = block_forward(g, x, blk);
  return layer_norm(x, g.param(*t.ln_f_g), g.param(*t.ln_f_b));
}

// Encodes the four quaternion views of a record batch in a single tower
// pass, view-major order: view s of record b is batch row s*B + b of the
// returned [4B, m, d] tokens.
inline NodePtr encode_records(Graph& g, const VisionTower& t, const std::vector<const Record*>& batch,
                              const std::array<std::vector<PatchPartition>, 4>& parts) {
  std::vector<ViewInput> views;
  long B = static_cast<long>(batch.size());
  for (int s = 0; s < 4; ++s)
    for (long b = 0; b < B; ++b)
      views.push_back(make_view_input(batch[static_cast<std::size_t>(b)]->images[static_cast<std::size_t>(s)],
                                      parts[static_cast<std::size_t>(s)][static_cast<std::size_t>(b)],
                                      t.patch, static_cast<ViewTag>(s)));
  return encode_view_batch(g, t, views);
}

}  // namespace vlalign
