#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "vlalign/model.hpp"
#include "vlalign/records.hpp"

// Retrieval, zero-shot classification, and sentence-similarity protocols
// over frozen global embeddings. All paths are deterministic; similarity
// ties break by candidate index.

namespace vlalign {

struct ProtocolError : std::runtime_error {
  explicit ProtocolError(const std::string& msg) : std::runtime_error(msg) {}
};

struct EvalEmbeddings {
  Tensor image_global;  // [N, d_global], unit rows
  Tensor text_global;   // [N, d_global], unit rows
  std::vector<long> labels;
  std::vector<std::string> ids;
};

// No masking at evaluation time: every patch is kept, so each view runs
// with all P+1 tokens.
inline std::array<std::vector<PatchPartition>, 4> full_partitions(long B, long P) {
  PatchPartition full;
  for (long i = 0; i < P; ++i) full.non_masked_idx.push_back(i);
  std::array<std::vector<PatchPartition>, 4> parts;
  for (int s = 0; s < 4; ++s)
    parts[static_cast<std::size_t>(s)].assign(static_cast<std::size_t>(B), full);
  return parts;
}

inline EvalEmbeddings embed_for_eval(DualTowerModel& m, const std::vector<Record>& records,
                                     long chunk = 64) {
  EvalEmbeddings out;
  long N = static_cast<long>(records.size());
  out.image_global = Tensor({N, m.cfg.d_global});
  out.text_global = Tensor({N, m.cfg.d_global});
  for (const auto& r : records) {
    out.labels.push_back(r.label);
    out.ids.push_back(r.id);
  }
  for (long start = 0; start < N; start += chunk) {
    long B = std::min(chunk, N - start);
    std::vector<const Record*> batch;
    for (long b = 0; b < B; ++b) batch.push_back(&records[static_cast<std::size_t>(start + b)]);
    Graph g(/*no_grad=*/true);
    auto parts = full_partitions(B, m.cfg.n_patches());
    BatchEncoding enc = encode_batch(g, m, batch, parts, /*with_locals=*/false);
    for (long b = 0; b < B; ++b)
      for (long k = 0; k < m.cfg.d_global; ++k) {
        out.image_global.at(start + b, k) = enc.img.global->value.at(b, k);
        out.text_global.at(start + b, k) = enc.txt.global->value.at(b, k);
      }
  }
  return out;
}

// Unit-normalized text globals for free-standing texts (prompts,
// sentence pairs).
inline Tensor embed_texts(DualTowerModel& m, const std::vector<std::string>& texts,
                          const Vocab& vocab, long truncate_len, long chunk = 64) {
  long N = static_cast<long>(texts.size());
  Tensor out({N, m.cfg.d_global});
  for (long start = 0; start < N; start += chunk) {
    long B = std::min(chunk, N - start);
    std::vector<TokenizedReport> toks(static_cast<std::size_t>(B));
    std::vector<const TokenizedReport*> ptrs;
    for (long b = 0; b < B; ++b) {
      toks[static_cast<std::size_t>(b)] = tokenize(texts[static_cast<std::size_t>(start + b)], vocab, truncate_len);
      ptrs.push_back(&toks[static_cast<std::size_t>(b)]);
    }
    Graph g(/*no_grad=*/true);
    PaddedBatch pb = pad_reports(ptrs);
    NodePtr z = encode_report_batch(g, m.language, pb);
    EmbeddingBundle bundle = project_text(g, m.align, z, pb.lengths, /*with_locals=*/false);
    for (long b = 0; b < B; ++b)
      for (long k = 0; k < m.cfg.d_global; ++k) out.at(start + b, k) = bundle.global->value.at(b, k);
  }
  return out;
}

// ---- retrieval ----

// Top-k candidate indices for one query row, ties broken by index.
inline std::vector<long> rank_top_k(const Tensor& queries, long qi, const Tensor& cands, long k) {
  long Nc = cands.dim(0), d = cands.dim(1);
  std::vector<std::pair<double, long>> scored(static_cast<std::size_t>(Nc));
  for (long c = 0; c < Nc; ++c) {
    double s = 0.0;
    for (long j = 0; j < d; ++j) s += queries.at(qi, j) * cands.at(c, j);
    scored[static_cast<std::size_t>(c)] = {s, c};
  }
  long kk = std::min(k, Nc);
  std::partial_sort(scored.begin(), scored.begin() + kk, scored.end(),
                    [](const auto& a, const auto& b) {
                      if (a.first != b.first) return a.first > b.first;
                      return a.second < b.second;
                    });
  std::vector<long> top(static_cast<std::size_t>(kk));
  for (long i = 0; i < kk; ++i) top[static_cast<std::size_t>(i)] = scored[static_cast<std::size_t>(i)].second;
  return top;
}

// Mean over queries of the fraction of top-k candidates sharing the
// query's class.
inline double precision_at_k(const Tensor& queries, const std::vector<long>& query_labels,
                             const Tensor& cands, const std::vector<long>& cand_labels, long k) {
  if (cands.dim(0) == 0) throw ProtocolError("precision_at_k: empty candidate set");
  if (k > cands.dim(0)) throw ProtocolError("precision_at_k: k exceeds candidate count");
  long Nq = queries.dim(0);
  double acc = 0.0;
  for (long q = 0; q < Nq; ++q) {
    auto top = rank_top_k(queries, q, cands, k);
    long hits = 0;
    for (long c : top)
      if (cand_labels[static_cast<std::size_t>(c)] == query_labels[static_cast<std::size_t>(q)]) ++hits;
    acc += static_cast<double>(hits) / static_cast<double>(top.size());
  }
  return acc / static_cast<double>(Nq);
}

// ---- AUC (rank-based, average ranks on ties) ----

inline double auc_score(const std::vector<double>& scores, const std::vector<long>& labels) {
  long n = static_cast<long>(scores.size());
  check_shape(n == static_cast<long>(labels.size()), "auc_score: size mismatch");
  std::vector<long> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](long a, long b) {
    return scores[static_cast<std::size_t>(a)] < scores[static_cast<std::size_t>(b)];
  });
  std::vector<double> rank(static_cast<std::size_t>(n));
  long i = 0;
  while (i < n) {
    long j = i;
    while (j + 1 < n && scores[static_cast<std::size_t>(idx[static_cast<std::size_t>(j + 1)])] ==
                            scores[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])])
      ++j;
    double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (long t = i; t <= j; ++t) rank[static_cast<std::size_t>(idx[static_cast<std::size_t>(t)])] = avg;
    i = j + 1;
  }
  double pos_rank_sum = 0.0;
  long n_pos = 0;
  for (long t = 0; t < n; ++t)
    if (labels[static_cast<std::size_t>(t)] == 1) {
      pos_rank_sum += rank[static_cast<std::size_t>(t)];
      ++n_pos;
    }
  long n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw ProtocolError("auc_score: needs both classes");
  return (pos_rank_sum - static_cast<double>(n_pos) * (n_pos + 1) / 2.0) /
         (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// ---- threshold tuning ----

struct ThresholdReport {
  double cv_acc = 0.0;
  double cv_f1 = 0.0;
  double threshold = 0.0;  // grid argmax on the full set
  long grid_points = 0;
  long folds_used = 0;
  std::vector<std::string> warnings;
};

namespace eval_detail {

inline double acc_at(const std::vector<double>& s, const std::vector<long>& y, double thr) {
  long hits = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    if ((s[i] >= thr ? 1 : 0) == y[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(s.size());
}

inline double f1_at(const std::vector<double>& s, const std::vector<long>& y, double thr) {
  long tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    int pred = s[i] >= thr ? 1 : 0;
    if (pred == 1 && y[i] == 1) ++tp;
    if (pred == 1 && y[i] == 0) ++fp;
    if (pred == 0 && y[i] == 1) ++fn;
  }
  return tp == 0 ? 0.0 : 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
}

inline double best_grid_threshold(const std::vector<double>& s, const std::vector<long>& y,
                                  long grid_points, double step) {
  double best_thr = 0.0, best_acc = -1.0;
  for (long gi = 0; gi < grid_points; ++gi) {
    double thr = std::min(1.0, gi * step);
    double a = acc_at(s, y, thr);
    if (a > best_acc) {
      best_acc = a;
      best_thr = thr;
    }
  }
  return best_thr;
}

}  // namespace eval_detail

// Ten-fold cross-validation on a 201-point threshold grid (step 0.005 by
// default). Scores are min-max normalized over each tuning portion; the
// fold's best-accuracy threshold is applied to the held-out portion.
inline ThresholdReport tune_threshold(const std::vector<double>& scores,
                                      const std::vector<long>& labels, long folds = 10,
                                      double step = 0.005, std::uint64_t seed = 0) {
  long n = static_cast<long>(scores.size());
  if (n < folds) throw ProtocolError("tune_threshold: fewer samples than folds");
  ThresholdReport rep;
  rep.grid_points = std::lround(1.0 / step) + 1;

  std::vector<long> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  rng.shuffle(idx);

  double acc_sum = 0.0, f1_sum = 0.0;
  for (long f = 0; f < folds; ++f) {
    std::vector<double> tune_s, held_s;
    std::vector<long> tune_y, held_y;
    for (long i = 0; i < n; ++i) {
      bool held = (i % folds) == f;
      const double sc = scores[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
      const long lb = labels[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
      (held ? held_s : tune_s).push_back(sc);
      (held ? held_y : tune_y).push_back(lb);
    }
    bool single_class = std::all_of(held_y.begin(), held_y.end(), [&](long v) { return v == held_y[0]; });
    if (held_y.empty() || single_class) {
      rep.warnings.push_back("fold " + std::to_string(f) + " skipped: single-class held-out set");
      continue;
    }
    double lo = *std::min_element(tune_s.begin(), tune_s.end());
    double hi = *std::max_element(tune_s.begin(), tune_s.end());
    double span = hi - lo;
    auto norm = [&](double v) { return span > 0 ? (v - lo) / span : 0.5; };
    std::vector<double> tune_n, held_n;
    for (double v : tune_s) tune_n.push_back(norm(v));
    for (double v : held_s) held_n.push_back(norm(v));
    double thr = eval_detail::best_grid_threshold(tune_n, tune_y, rep.grid_points, step);
    acc_sum += eval_detail::acc_at(held_n, held_y, thr);
    f1_sum += eval_detail::f1_at(held_n, held_y, thr);
    ++rep.folds_used;
  }
  if (rep.folds_used > 0) {
    rep.cv_acc = acc_sum / static_cast<double>(rep.folds_used);
    rep.cv_f1 = f1_sum / static_cast<double>(rep.folds_used);
  }

  double lo = *std::min_element(scores.begin(), scores.end());
  double hi = *std::max_element(scores.begin(), scores.end());
  double span = hi - lo;
  std::vector<double> all_n;
  for (double v : scores) all_n.push_back(span > 0 ? (v - lo) / span : 0.5);
  rep.threshold = eval_detail::best_grid_threshold(all_n, labels, rep.grid_points, step);
  return rep;
}

// ---- zero-shot classification ----

// Class score of an image = mean cosine against the class's prompt
// embeddings. Multi-class predicts by argmax (ties to the lower class
// index); binary thresholds the score difference via tune_threshold.
inline json zero_shot_classify(const Tensor& image_globals, const std::vector<long>& labels,
                               const std::vector<Tensor>& class_prompt_embeds, long folds = 10,
                               double step = 0.005, std::uint64_t seed = 0) {
  long N = image_globals.dim(0), d = image_globals.dim(1);
  long C = static_cast<long>(class_prompt_embeds.size());
  if (C < 2) throw ProtocolError("zero_shot_classify: need at least 2 classes");
  for (const auto& t : class_prompt_embeds)
    if (t.dim(0) == 0) throw ProtocolError("zero_shot_classify: class with zero prompts");

  Tensor scores({N, C});
  for (long i = 0; i < N; ++i)
    for (long c = 0; c < C; ++c) {
      const Tensor& P = class_prompt_embeds[static_cast<std::size_t>(c)];
      double acc = 0.0;
      for (long p = 0; p < P.dim(0); ++p) {
        double dot = 0.0;
        for (long k = 0; k < d; ++k) dot += image_globals.at(i, k) * P.at(p, k);
        acc += dot;
      }
      scores.at(i, c) = acc / static_cast<double>(P.dim(0));
    }

  json rep;
  rep["n_items"] = N;
  rep["n_classes"] = C;
  if (C == 2) {
    std::vector<double> diff(static_cast<std::size_t>(N));
    for (long i = 0; i < N; ++i) diff[static_cast<std::size_t>(i)] = scores.at(i, 1) - scores.at(i, 0);
    ThresholdReport tr = tune_threshold(diff, labels, folds, step, seed);
    rep["task"] = "ZSHOT-BINARY";
    rep["acc"] = tr.cv_acc;
    rep["f1"] = tr.cv_f1;
    rep["auc"] = auc_score(diff, labels);
    rep["threshold"] = tr.threshold;
    rep["grid_points"] = tr.grid_points;
    rep["folds_used"] = tr.folds_used;
    if (!tr.warnings.empty()) rep["warnings"] = tr.warnings;
  } else {
    long hits = 0;
    std::vector<long> tp(static_cast<std::size_t>(C), 0), fp(static_cast<std::size_t>(C), 0),
        fn(static_cast<std::size_t>(C), 0), count(static_cast<std::size_t>(C), 0);
    for (long i = 0; i < N; ++i) {
      long pred = 0;
      for (long c = 1; c < C; ++c)
        if (scores.at(i, c) > scores.at(i, pred)) pred = c;
      long y = labels[static_cast<std::size_t>(i)];
      ++count[static_cast<std::size_t>(y)];
      if (pred == y) {
        ++hits;
        ++tp[static_cast<std::size_t>(y)];
      } else {
        ++fp[static_cast<std::size_t>(pred)];
        ++fn[static_cast<std::size_t>(y)];
      }
    }
    rep["task"] = "ZSHOT-MULTI";
    rep["acc"] = static_cast<double>(hits) / static_cast<double>(N);
    double f1_sum = 0.0;
    json per_class = json::array();
    for (long c = 0; c < C; ++c) {
      double denom = 2.0 * tp[static_cast<std::size_t>(c)] + fp[static_cast<std::size_t>(c)] +
                     fn[static_cast<std::size_t>(c)];
      double f1 = denom > 0 ? 2.0 * tp[static_cast<std::size_t>(c)] / denom : 0.0;
      f1_sum += f1;
      per_class.push_back({{"class", c},
                           {"support", count[static_cast<std::size_t>(c)]},
                           {"f1", f1}});
    }
    rep["macro_f1"] = f1_sum / static_cast<double>(C);
    rep["per_class"] = per_class;
  }
  return rep;
}

// ---- sentence similarity ----

struct SentencePair {
  std::string text_a, text_b;
  long label = 0;  // 1 = paraphrase, 0 = contradiction
};

inline json sentence_similarity(DualTowerModel& m, const std::vector<SentencePair>& pairs,
                                const Vocab& vocab, long truncate_len, long folds = 10,
                                double step = 0.005, std::uint64_t seed = 0) {
  if (pairs.empty()) throw ProtocolError("sentence_similarity: no pairs");
  std::vector<std::string> texts;
  for (const auto& p : pairs) {
    texts.push_back(p.text_a);
    texts.push_back(p.text_b);
  }
  Tensor emb = embed_texts(m, texts, vocab, truncate_len);
  long d = emb.dim(1);
  std::vector<double> scores;
  std::vector<long> labels;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    double dot = 0.0;
    for (long k = 0; k < d; ++k)
      dot += emb.at(static_cast<long>(2 * i), k) * emb.at(static_cast<long>(2 * i + 1), k);
    scores.push_back(dot);
    labels.push_back(pairs[i].label);
  }
  ThresholdReport tr = tune_threshold(scores, labels, folds, step, seed);
  json rep;
  rep["task"] = "SENT-SIM";
  rep["n_pairs"] = pairs.size();
  rep["acc"] = tr.cv_acc;
  rep["auc"] = auc_score(scores, labels);
  rep["threshold"] = tr.threshold;
  rep["grid_points"] = tr.grid_points;
  rep["folds_used"] = tr.folds_used;
  if (!tr.warnings.empty()) rep["warnings"] = tr.warnings;
  return rep;
}

// ---- retrieval report + validation scorer ----

inline json retrieval_report(const std::string& task, const Tensor& queries,
                             const std::vector<long>& qlabels, const Tensor& cands,
                             const std::vector<long>& clabels, const std::vector<long>& k_list) {
  json rep;
  rep["task"] = task;
  rep["n_queries"] = queries.dim(0);
  rep["n_candidates"] = cands.dim(0);
  json pk;
  for (long k : k_list)
    pk["P@" + std::to_string(k)] = precision_at_k(queries, qlabels, cands, clabels, k);
  rep["precision"] = pk;
  return rep;
}

// Paper-style one-line table: P@k columns in the given order.
inline std::string retrieval_table(const json& rep, const std::vector<long>& k_list) {
  std::ostringstream os;
  os << rep["task"].get<std::string>();
  for (long k : k_list) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.1f",
                  100.0 * rep["precision"]["P@" + std::to_string(k)].get<double>());
    os << "\t" << buf;
  }
  return os.str();
}

// Default validation score: text-to-image P@5 over the validation split.
// Records without a class label fall back to identity matching.
inline double text_to_image_p5(DualTowerModel& m, const std::vector<Record>& val) {
  if (val.empty()) return 0.0;
  EvalEmbeddings emb = embed_for_eval(m, val);
  std::vector<long> labels = emb.labels;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] < 0) labels[i] = 1000000 + static_cast<long>(i);
  long k = std::min<long>(5, emb.image_global.dim(0));
  return precision_at_k(emb.text_global, labels, emb.image_global, labels, k);
}

}  // namespace vlalign
