#pragma once

#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "vlalign/config.hpp"
#include "vlalign/core/ops.hpp"

// Transformer blocks shared by both towers. Base weights are frozen;
// each block carries two trainable bottleneck adapters: one after the
// self-attention sublayer, one in parallel to the FFN.

namespace vlalign {

inline Rng rng_for_param(std::uint64_t seed, const std::string& name) {
  std::uint64_t s = seed;
  for (unsigned char c : name) {
    s ^= c;
    s *= 0x100000001b3ULL;
  }
  splitmix64(s);
  return Rng(s);
}

inline Param& add_tensor_param(ParamStore& ps, std::uint64_t seed, const std::string& name,
                               std::vector<long> shape, real init_std, bool trainable) {
  if (ps.shape_only()) return ps.add(name, Tensor::shape_only(std::move(shape)), trainable);
  Rng rng = rng_for_param(seed, name);
  Tensor t = init_std == 0.0 ? Tensor::zeros(std::move(shape))
                             : Tensor::randn(std::move(shape), rng, init_std);
  return ps.add(name, std::move(t), trainable);
}

// Fan-scaled init keeps the randomly initialized frozen towers
// content-sensitive: each sublayer passes O(1) of its input through, so
// distinct inputs stay distinguishable after encoding.
inline real glorot_std(long fan_in, long fan_out) {
  return std::sqrt(2.0 / static_cast<real>(fan_in + fan_out));
}

inline Param& add_weight_matrix(ParamStore& ps, std::uint64_t seed, const std::string& name,
                                long fan_in, long fan_out, bool trainable) {
  return add_tensor_param(ps, seed, name, {fan_in, fan_out}, glorot_std(fan_in, fan_out), trainable);
}

struct AdapterParams {
  Param* down_w = nullptr;  // d x r
  Param* down_b = nullptr;  // r
  Param* up_w = nullptr;    // r x d
  Param* up_b = nullptr;    // d
};

// Down-projection gets a small random init, up-projection starts at zero
// so the adapter is an exact identity at initialization.
inline AdapterParams make_adapter(ParamStore& ps, std::uint64_t seed, const std::string& prefix,
                                  long d, long r, bool trainable = true) {
  AdapterParams a;
  a.down_w = &add_tensor_param(ps, seed, prefix + ".down_w", {d, r}, 0.02, trainable);
  a.down_b = &add_tensor_param(ps, seed, prefix + ".down_b", {r}, 0.0, trainable);
  a.up_w = &add_tensor_param(ps, seed, prefix + ".up_w", {r, d}, 0.0, trainable);
  a.up_b = &add_tensor_param(ps, seed, prefix + ".up_b", {d}, 0.0, trainable);
  return a;
}

// Up(GELU(Down(x))), the adapter's contribution without the residual copy.
inline NodePtr adapter_delta(Graph& g, const NodePtr& x, const AdapterParams& a) {
  long d_in = x->value.dim(x->value.rank() - 1);
  check_shape(a.down_w->value.dim(0) == d_in,
              "adapter: input dim " + std::to_string(d_in) + " does not match down_w rows " +
                  std::to_string(a.down_w->value.dim(0)));
  NodePtr h = add_bias(matmul(x, g.param(*a.down_w)), g.param(*a.down_b));
  h = gelu(h);
  return add_bias(matmul(h, g.param(*a.up_w)), g.param(*a.up_b));
}

// x + Up(GELU(Down(x)))
inline NodePtr adapter_forward(Graph& g, const NodePtr& x, const AdapterParams& a) {
  return add(x, adapter_delta(g, x, a));
}

struct BlockParams {
  Param *ln1_g, *ln1_b;
  Param *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
  Param *ln2_g, *ln2_b;
  Param *fc1_w, *fc1_b, *fc2_w, *fc2_b;
  AdapterParams post_attn;
  AdapterParams parallel_ffn;
  long heads = 1;
  bool has_adapters = true;
};

inline BlockParams make_block(ParamStore& ps, std::uint64_t seed, const std::string& prefix, long d,
                              long heads, long mlp_ratio, long adapter_rank, bool with_adapters) {
  BlockParams b;
  b.heads = heads;
  b.has_adapters = with_adapters;
  b.ln1_g = &ps.add(prefix + ".ln1.gamma", Tensor::full({d}, 1.0), false);
  b.ln1_b = &add_tensor_param(ps, seed, prefix + ".ln1.beta", {d}, 0.0, false);
  b.wq = &add_weight_matrix(ps, seed, prefix + ".attn.wq", d, d, false);
  b.bq = &add_tensor_param(ps, seed, prefix + ".attn.bq", {d}, 0.0, false);
  b.wk = &add_weight_matrix(ps, seed, prefix + ".attn.wk", d, d, false);
  b.bk = &add_tensor_param(ps, seed, prefix + ".attn.bk", {d}, 0.0, false);
  b.wv = &add_weight_matrix(ps, seed, prefix + ".attn.wv", d, d, false);
  b.bv = &add_tensor_param(ps, seed, prefix + ".attn.bv", {d}, 0.0, false);
  b.wo = &add_weight_matrix(ps, seed, prefix + ".attn.wo", d, d, false);
  b.bo = &add_tensor_param(ps, seed, prefix + ".attn.bo", {d}, 0.0, false);
  b.ln2_g = &ps.add(prefix + ".ln2.gamma", Tensor::full({d}, 1.0), false);
  b.ln2_b = &add_tensor_param(ps, seed, prefix + ".ln2.beta", {d}, 0.0, false);
  b.fc1_w = &add_weight_matrix(ps, seed, prefix + ".mlp.fc1_w", d, d * mlp_ratio, false);
  b.fc1_b = &add_tensor_param(ps, seed, prefix + ".mlp.fc1_b", {d * mlp_ratio}, 0.0, false);
  b.fc2_w = &add_weight_matrix(ps, seed, prefix + ".mlp.fc2_w", d * mlp_ratio, d, false);
  b.fc2_b = &add_tensor_param(ps, seed, prefix + ".mlp.fc2_b", {d}, 0.0, false);
  if (with_adapters) {
    b.post_attn = make_adapter(ps, seed, prefix + ".adapter_post_attn", d, adapter_rank);
    b.parallel_ffn = make_adapter(ps, seed, prefix + ".adapter_parallel_ffn", d, adapter_rank);
  }
  return b;
}

// Multi-head self-attention over x[B,L,d]; key_mask, when given, is a
// [B,L] additive mask (0 keep, -1e30 drop) applied to attention scores.
inline NodePtr msa_forward(Graph& g, const NodePtr& x, const BlockParams& blk,
                           const Tensor* key_mask = nullptr) {
  long d = x->value.dim(2);
  long H = blk.heads;
  long dh = d / H;
  NodePtr q = split_heads(add_bias(matmul(x, g.param(*blk.wq)), g.param(*blk.bq)), H);
  NodePtr k = split_heads(add_bias(matmul(x, g.param(*blk.wk)), g.param(*blk.bk)), H);
  NodePtr v = split_heads(add_bias(matmul(x, g.param(*blk.wv)), g.param(*blk.bv)), H);
  NodePtr scores = scale(bmm_nt(q, k), 1.0 / std::sqrt(static_cast<real>(dh)));
  if (key_mask) scores = add_key_mask(scores, *key_mask, H);
  NodePtr attn = softmax_last(scores);
  NodePtr ctx = merge_heads(bmm(attn, v), H);
  return add_bias(matmul(ctx, g.param(*blk.wo)), g.param(*blk.bo));
}

// Pre-norm block with adapter integration:
//   h   = x + PostAttnAdapter(MSA(LN1(x)))
//   out = h + FFN(LN2(h)) + ParallelAdapterDelta(LN2(h))
inline NodePtr block_forward(Graph& g, const NodePtr& x, const BlockParams& blk,
                             const Tensor* key_mask = nullptr) {
  check_shape(x->value.rank() == 3 && x->value.dim(1) >= 1, "block_forward: expected x[B,L>=1,d]");
  NodePtr attn_out = msa_forward(g, layer_norm(x, g.param(*blk.ln1_g), g.param(*blk.ln1_b)), blk, key_mask);
  if (blk.has_adapters) attn_out = adapter_forward(g, attn_out, blk.post_attn);
  NodePtr h = add(x, attn_out);

  NodePtr h_norm = layer_norm(h, g.param(*blk.ln2_g), g.param(*blk.ln2_b));
  NodePtr ffn = add_bias(matmul(gelu(add_bias(matmul(h_norm, g.param(*blk.fc1_w)), g.param(*blk.fc1_b))),
                                g.param(*blk.fc2_w)),
                         g.param(*blk.fc2_b));
  NodePtr out = add(h, ffn);
  if (blk.has_adapters) out = add(out, adapter_delta(g, h_norm, blk.parallel_ffn));
  return out;
}

// ---- checkpoint archive ----
// Single file: magic, manifest JSON (names, shapes, freeze flags, config
// hash), then raw little-endian float64 data in manifest order.

inline void save_checkpoint(const ParamStore& ps, const std::string& path,
                            const std::string& config_hash) {
  json manifest;
  manifest["config_hash"] = config_hash;
  manifest["params"] = json::array();
  for (const Param* p : ps.all()) {
    manifest["params"].push_back(
        {{"name", p->name}, {"shape", p->value.shape()}, {"trainable", p->trainable}});
  }
  std::string mstr = manifest.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  const char magic[9] = "VLACKPT1";
  out.write(magic, 8);
  std::uint64_t mlen = mstr.size();
  out.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
  out.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
  for (const Param* p : ps.all())
    out.write(reinterpret_cast<const char*>(p->value.data()),
              static_cast<std::streamsize>(p->value.numel() * sizeof(real)));
  if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

// Strict load: archive must carry exactly the store's parameters with
// matching shapes. Returns the archived config hash.
inline std::string load_checkpoint(ParamStore& ps, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "VLACKPT1", 8) != 0)
    throw std::runtime_error("bad checkpoint magic: " + path);
  std::uint64_t mlen = 0;
  in.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
  std::string mstr(mlen, '\0');
  in.read(mstr.data(), static_cast<std::streamsize>(mlen));
  json manifest = json::parse(mstr);
  const auto& plist = manifest.at("params");
  if (plist.size() != ps.size())
    throw std::runtime_error("checkpoint parameter count mismatch: archive has " +
                             std::to_string(plist.size()) + ", model has " + std::to_string(ps.size()));
  for (const auto& entry : plist) {
    std::string name = entry.at("name").get<std::string>();
    Param* p = ps.find(name);
    if (!p) throw std::runtime_error("checkpoint has unknown parameter: " + name);
    std::vector<long> shape = entry.at("shape").get<std::vector<long>>();
    if (shape != p->value.shape())
      throw std::runtime_error("checkpoint shape mismatch for " + name);
    in.read(reinterpret_cast<char*>(p->value.data()),
            static_cast<std::streamsize>(p->value.numel() * sizeof(real)));
    if (!in) throw std::runtime_error("checkpoint truncated at " + name);
  }
  return manifest.value("config_hash", std::string());
}

// Import hook for externally named backbone weights. The map file is a
// JSON object {external_name: internal_name}; only mapped entries are
// applied. Returns the internal names that were written.
inline std::vector<std::string> import_weights(ParamStore& ps, const std::string& archive_path,
                                               const std::string& name_map_path) {
  std::ifstream mapin(name_map_path);
  if (!mapin) throw std::runtime_error("cannot open name map: " + name_map_path);
  json name_map = json::parse(mapin);

  std::ifstream in(archive_path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open weight archive: " + archive_path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "VLACKPT1", 8) != 0)
    throw std::runtime_error("bad weight archive magic: " + archive_path);
  std::uint64_t mlen = 0;
  in.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
  std::string mstr(mlen, '\0');
  in.read(mstr.data(), static_cast<std::streamsize>(mlen));
  json manifest = json::parse(mstr);

  std::vector<std::string> applied;
  for (const auto& entry : manifest.at("params")) {
    std::string ext_name = entry.at("name").get<std::string>();
    std::vector<long> shape = entry.at("shape").get<std::vector<long>>();
    long numel = Tensor::numel_of(shape);
    auto it = name_map.find(ext_name);
    if (it == name_map.end()) {
      in.seekg(static_cast<std::streamoff>(numel * static_cast<long>(sizeof(real))), std::ios::cur);
      continue;
    }
    std::string internal = it->get<std::string>();
    Param* p = ps.find(internal);
    if (!p) throw std::runtime_error("name map targets unknown parameter: " + internal);
    if (shape != p->value.shape())
      throw std::runtime_error("imported shape mismatch for " + internal + " (from " + ext_name + ")");
    in.read(reinterpret_cast<char*>(p->value.data()),
            static_cast<std::streamsize>(numel * static_cast<long>(sizeof(real))));
    if (!in) throw std::runtime_error("weight archive truncated at " + ext_name);
    applied.push_back(internal);
  }
  return applied;
}

}  // namespace vlalign
