#pragma once

#include <cctype>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "vlalign/backbone.hpp"

// Report tokenization and the adapter-integrated language tower.

namespace vlalign {

// Reserved token ids, fixed across every vocabulary file.
constexpr long kClsId = 0;
constexpr long kMaskId = 1;
constexpr long kUnkId = 2;
constexpr long kPadId = 3;

class Vocab {
 public:
  Vocab() = default;

  explicit Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.size() < 4 || tokens_[0] != "[CLS]" || tokens_[1] != "[MASK]" ||
        tokens_[2] != "[UNK]" || tokens_[3] != "[PAD]")
      throw ConfigError("vocabulary must start with [CLS] [MASK] [UNK] [PAD]");
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_[tokens_[i]] = static_cast<long>(i);
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open vocabulary file: " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
      while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
      tokens.push_back(line);
    }
    return Vocab(std::move(tokens));
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write vocabulary file: " + path);
    for (const auto& t : tokens_) out << t << "\n";
  }

  long size() const { return static_cast<long>(tokens_.size()); }

  long lookup(const std::string& tok) const {
    auto it = index_.find(tok);
    return it == index_.end() ? kUnkId : it->second;
  }

  bool contains(const std::string& tok) const { return index_.count(tok) > 0; }

  const std::string& token(long id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  long period_id() const {
    auto it = index_.find(".");
    return it == index_.end() ? -1 : it->second;
  }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, long> index_;
};

struct TokenizedReport {
  std::vector<long> ids;             // position 0 is [CLS]
  std::vector<long> mask_positions;  // sorted, subset of {1..n-1}
  std::vector<long> targets;         // original ids at mask positions

  long n() const { return static_cast<long>(ids.size()); }
};

// Lowercased whitespace/punctuation split; words looked up whole,
// unknown words map to [UNK]. Punctuation marks are their own tokens.
inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    unsigned char c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!cur.empty()) words.push_back(cur), cur.clear();
    } else if (std::ispunct(c)) {
      if (!cur.empty()) words.push_back(cur), cur.clear();
      words.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) words.push_back(cur);
  return words;
}

inline TokenizedReport tokenize(const std::string& text, const Vocab& vocab, long truncate_len = 128) {
  TokenizedReport t;
  t.ids.push_back(kClsId);
  for (const auto& w : split_words(text)) {
    if (static_cast<long>(t.ids.size()) >= truncate_len) break;
    t.ids.push_back(vocab.lookup(w));
  }
  return t;
}

// Replace round(ratio * (n-1)) non-class positions with [MASK]; originals
// are kept as targets. The class token is never masked.
inline TokenizedReport mask_tokens(const TokenizedReport& t, double ratio, Rng& rng) {
  check_shape(ratio >= 0.0 && ratio < 1.0, "mask_tokens: ratio must be in [0,1)");
  TokenizedReport out = t;
  out.mask_positions.clear();
  out.targets.clear();
  long n = t.n();
  if (ratio == 0.0 || n < 2) return out;
  long k = std::lround(ratio * static_cast<double>(n - 1));
  std::vector<long> chosen = rng.choose(n - 1, k);
  for (long idx : chosen) {
    long pos = idx + 1;  // skip [CLS]
    out.mask_positions.push_back(pos);
    out.targets.push_back(t.ids[static_cast<std::size_t>(pos)]);
    out.ids[static_cast<std::size_t>(pos)] = kMaskId;
  }
  return out;
}

// ---- language tower ----

struct LanguageTower {
  Param* token_embed = nullptr;  // V x d, frozen; also the weight-tied MLM head
  Param* pos_embed = nullptr;    // max_len x d, frozen
  std::vector<BlockParams> blocks;
  Param *ln_f_g = nullptr, *ln_f_b = nullptr;
  long d = 0;
  long heads = 0;
  long max_len = 0;
};

inline LanguageTower make_language_tower(ParamStore& ps, std::uint64_t seed, const ModelConfig& cfg,
                                         bool with_adapters = true) {
  LanguageTower t;
  t.d = cfg.d_language;
  t.heads = cfg.heads_language;
  t.max_len = cfg.max_text_len;
  t.token_embed =
      &add_tensor_param(ps, seed, "language.token_embed", {cfg.vocab_size, cfg.d_language}, 0.02, false);
  t.pos_embed =
      &add_tensor_param(ps, seed, "language.pos_embed", {cfg.max_text_len, cfg.d_language}, 0.02, false);
  for (long i = 0; i < cfg.blocks_language; ++i)
    t.blocks.push_back(make_block(ps, seed, "language.block" + std::to_string(i), cfg.d_language,
                                  cfg.heads_language, cfg.mlp_ratio, cfg.adapter_rank(cfg.d_language),
                                  with_adapters));
  t.ln_f_g = &ps.add("language.ln_f.gamma", Tensor::full({cfg.d_language}, 1.0), false);
  t.ln_f_b = &add_tensor_param(ps, seed, "language.ln_f.beta", {cfg.d_language}, 0.0, false);
  return t;
}

// Pads a batch of reports to a common length with [PAD] and builds the
// additive key mask (-1e30 on pad positions).
struct PaddedBatch {
  std::vector<long> ids;  // B * L
  long B = 0;
  long L = 0;
  Tensor key_mask;              // [B, L]
  std::vector<long> lengths;    // true n per sample
};

inline PaddedBatch pad_reports(const std::vector<const TokenizedReport*>& reports) {
  PaddedBatch pb;
  pb.B = static_cast<long>(reports.size());
  for (const auto* r : reports) pb.L = std::max(pb.L, r->n());
  pb.key_mask = Tensor({pb.B, pb.L});
  pb.ids.assign(static_cast<std::size_t>(pb.B * pb.L), kPadId);
  for (long b = 0; b < pb.B; ++b) {
    long n = reports[static_cast<std::size_t>(b)]->n();
    pb.lengths.push_back(n);
    for (long l = 0; l < n; ++l)
      pb.ids[static_cast<std::size_t>(b * pb.L + l)] =
          reports[static_cast<std::size_t>(b)]->ids[static_cast<std::size_t>(l)];
    for (long l = n; l < pb.L; ++l) pb.key_mask.at(b, l) = -1e30;
  }
  return pb;
}

// Token + positional embeddings through the adapter-integrated blocks.
// `injection`, when given, is a [B, d] node added to every position
// (the hybrid-embedding path of the MLM loss).
inline NodePtr encode_report_batch(Graph& g, const LanguageTower& t, const PaddedBatch& pb,
                                   const NodePtr& injection = nullptr) {
  check_shape(pb.L <= t.max_len, "encode_report_batch: sequence exceeds positional table");
  for (long id : pb.ids)
    check_shape(id >= 0 && id < t.token_embed->value.dim(0), "encode_report_batch: token id out of range");
  NodePtr x = embed(g.param(*t.token_embed), pb.ids, pb.B, pb.L);
  std::vector<long> pos_ids(static_cast<std::size_t>(pb.B * pb.L));
  for (long b = 0; b < pb.B; ++b)
    for (long l = 0; l < pb.L; ++l) pos_ids[static_cast<std::size_t>(b * pb.L + l)] = l;
  x = add(x, embed(g.param(*t.pos_embed), pos_ids, pb.B, pb.L));
  if (injection) x = add_bcast_vec(x, injection);
  for (const auto& blk : t.blocks) x = block_forward(g, x, blk, &pb.key_mask);
  return layer_norm(x, g.param(*t.ln_f_g), g.param(*t.ln_f_b));
}

inline NodePtr encode_report(Graph& g, const LanguageTower& t, const TokenizedReport& r) {
  std::vector<const TokenizedReport*> one{&r};
  return encode_report_batch(g, t, pad_reports(one));
}

}  // namespace vlalign
