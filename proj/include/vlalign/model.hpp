#pragma once

#include <string>
#include <vector>

#include "vlalign/alignment.hpp"
#include "vlalign/language_processor.hpp"
#include "vlalign/masked_modeling.hpp"
#include "vlalign/vision_encoder.hpp"

// Dual-tower model: frozen vision/language backbones with trainable
// adapters, projection heads, MLM/MIM heads, and the learnable
// temperature. Parameter accounting runs over the named store.

namespace vlalign {

struct AccountingError : std::runtime_error {
  explicit AccountingError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DualTowerModel {
  ModelConfig cfg;
  ParamStore store;
  VisionTower vision;
  LanguageTower language;
  AlignmentHead align;
  MlmHead mlm;
  ImageDecoder decoder;
  bool with_adapters = true;
  std::uint64_t init_seed = 0;
};

// shape_only builds register every parameter without materializing data;
// good for accounting, unusable for forward passes.
inline DualTowerModel build_model(const ModelConfig& cfg, std::uint64_t seed,
                                  bool with_adapters = true, bool shape_only = false) {
  cfg.validate();
  DualTowerModel m;
  m.cfg = cfg;
  m.store = ParamStore(shape_only);
  m.with_adapters = with_adapters;
  m.init_seed = seed;
  m.vision = make_vision_tower(m.store, seed, cfg, with_adapters);
  m.language = make_language_tower(m.store, seed, cfg, with_adapters);
  m.align = make_alignment_head(m.store, seed, cfg);
  m.mlm = make_mlm_head(m.store, seed, cfg);
  m.decoder = make_image_decoder(m.store, seed, cfg);
  return m;
}

struct ParamAccounting {
  long trainable = 0;
  long frozen = 0;
  double fraction = 0.0;
};

namespace account_detail {

inline bool starts_with(const std::string& s, const std::string& p) {
  return s.size() >= p.size() && s.compare(0, p.size(), p) == 0;
}

// Expected freeze policy by name. Unclassifiable names are an error.
inline bool expected_trainable(const std::string& name) {
  if (name.find(".adapter_post_attn.") != std::string::npos ||
      name.find(".adapter_parallel_ffn.") != std::string::npos)
    return true;
  if (name == "vision.view_embed") return true;
  if (starts_with(name, "proj.") || starts_with(name, "heads.") || starts_with(name, "temp."))
    return true;
  if (starts_with(name, "vision.") || starts_with(name, "language.") || starts_with(name, "decoder."))
    return false;
  throw AccountingError("parameter not covered by the freeze policy: " + name);
}

}  // namespace account_detail

// Counts trainable vs frozen parameters and cross-checks every entry
// against the freeze policy, reporting the offending path on mismatch.
inline ParamAccounting account_parameters(const DualTowerModel& m) {
  ParamAccounting acc;
  for (const Param* p : m.store.all()) {
    bool expect = account_detail::expected_trainable(p->name);
    if (expect != p->trainable)
      throw AccountingError("freeze flag mismatch for " + p->name + ": flagged " +
                            (p->trainable ? "trainable" : "frozen") + ", policy says " +
                            (expect ? "trainable" : "frozen"));
    if (p->trainable) acc.trainable += p->value.declared_numel();
    else acc.frozen += p->value.declared_numel();
  }
  acc.fraction = static_cast<double>(acc.trainable) /
                 static_cast<double>(acc.trainable + acc.frozen);
  return acc;
}

// ---- shared forward paths ----

struct BatchEncoding {
  NodePtr vision_tokens;  // [4B, m, d_vision]
  EmbeddingBundle img;
  EmbeddingBundle txt;
  PaddedBatch padded_reports;
  long B = 0;
};

inline std::array<std::vector<PatchPartition>, 4> draw_partitions(long B, long P, double ratio,
                                                                  Rng& rng) {
  std::array<std::vector<PatchPartition>, 4> parts;
  for (int s = 0; s < 4; ++s) {
    parts[static_cast<std::size_t>(s)].reserve(static_cast<std::size_t>(B));
    for (long b = 0; b < B; ++b)
      parts[static_cast<std::size_t>(s)].push_back(mask_patches(P, ratio, rng));
  }
  return parts;
}

// Alignment-path forward: masked quaternion views through the vision
// tower, unmasked reports through the language tower, both projected.
// with_locals=false skips the per-token projections (global-only eval).
inline BatchEncoding encode_batch(Graph& g, DualTowerModel& m,
                                  const std::vector<const Record*>& batch,
                                  const std::array<std::vector<PatchPartition>, 4>& parts,
                                  bool with_locals = true) {
  BatchEncoding enc;
  enc.B = static_cast<long>(batch.size());
  enc.vision_tokens = encode_records(g, m.vision, batch, parts);
  enc.img = project_and_merge_image(g, m.align, enc.vision_tokens, enc.B, with_locals);

  std::vector<TokenizedReport> reports(batch.size());
  std::vector<const TokenizedReport*> report_ptrs;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    reports[i].ids = batch[i]->report_tokens;
    report_ptrs.push_back(&reports[i]);
  }
  enc.padded_reports = pad_reports(report_ptrs);
  NodePtr z_r = encode_report_batch(g, m.language, enc.padded_reports);
  enc.txt = project_text(g, m.align, z_r, enc.padded_reports.lengths, with_locals);
  return enc;
}

}  // namespace vlalign
