#include <catch2/catch_amalgamated.hpp>

#include "oracle.hpp"
#include "test_util.hpp"

using namespace vlalign;
using Catch::Approx;

namespace {

Tensor unit_rows(std::vector<long> shape, Rng& rng) {
  Tensor t = Tensor::randn(std::move(shape), rng);
  long d = t.dim(t.rank() - 1);
  long rows = t.numel() / d;
  for (long r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (long k = 0; k < d; ++k) ss += t[r * d + k] * t[r * d + k];
    for (long k = 0; k < d; ++k) t[r * d + k] /= std::sqrt(ss);
  }
  return t;
}

ModelConfig eval_cfg() {
  ModelConfig cfg = ModelConfig::toy(/*vocab=*/89);
  cfg.image_size = 16;
  cfg.patch = 8;
  cfg.d_vision = 16;
  cfg.heads_vision = 2;
  cfg.blocks_vision = 1;
  cfg.d_language = 16;
  cfg.heads_language = 2;
  cfg.blocks_language = 1;
  cfg.max_text_len = 32;
  cfg.decoder_dim = 8;
  cfg.decoder_blocks = 1;
  cfg.decoder_heads = 2;
  return cfg;
}

}  // namespace

TEST_CASE("precision_at_k basics") {
  SECTION("self-retrieval with distinct vectors is perfect at k=1") {
    Rng rng(3);
    Tensor emb = unit_rows({6, 8}, rng);
    std::vector<long> labels{0, 1, 2, 3, 4, 5};
    REQUIRE(precision_at_k(emb, labels, emb, labels, 1) == 1.0);
  }

  SECTION("three-query hand fixture") {
    // candidates on the axes, labels by axis; queries tilted toward known axes
    Tensor cands({4, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1, 0.7071067811865475, 0.7071067811865475, 0});
    std::vector<long> clabels{0, 1, 2, 0};
    Tensor queries({3, 3}, {0.9, 0.1, 0, 0.1, 0.9, 0, 0, 0.1, 0.9});
    std::vector<long> qlabels{0, 1, 2};
    // query 0: nearest = c0 (0.9), then c3 (~0.707): both label 0 -> 2/2
    // query 1: nearest = c1 (0.9), then c3 (~0.707): labels 1,0 -> 1/2
    // query 2: nearest = c2 (0.9), then c1 (0.1): labels 2,1 -> 1/2
    double expect = (1.0 + 0.5 + 0.5) / 3.0;
    REQUIRE(precision_at_k(queries, qlabels, cands, clabels, 2) == Approx(expect));
    REQUIRE(vloracle::precision_at_k_naive(queries, qlabels, cands, clabels, 2) == Approx(expect));
  }

  SECTION("errors") {
    Tensor q({1, 2}, {1, 0});
    Tensor none({0, 2});
    REQUIRE_THROWS_AS(precision_at_k(q, {0}, none, {}, 1), ProtocolError);
    Tensor c({2, 2}, {1, 0, 0, 1});
    REQUIRE_THROWS_AS(precision_at_k(q, {0}, c, {0, 1}, 5), ProtocolError);
  }
}

TEST_CASE("precision_at_k equals the naive oracle on random sets") {
  Rng rng(17);
  for (int trial = 0; trial < 5; ++trial) {
    long nq = 4 + static_cast<long>(rng.randint(4));
    long nc = 10 + static_cast<long>(rng.randint(10));  // <= 20 items
    Tensor q = unit_rows({nq, 6}, rng);
    Tensor c = unit_rows({nc, 6}, rng);
    std::vector<long> ql, cl;
    for (long i = 0; i < nq; ++i) ql.push_back(static_cast<long>(rng.randint(3)));
    for (long i = 0; i < nc; ++i) cl.push_back(static_cast<long>(rng.randint(3)));
    for (long k : {1L, 3L, 7L}) {
      REQUIRE(precision_at_k(q, ql, c, cl, k) == vloracle::precision_at_k_naive(q, ql, c, cl, k));
    }
  }
}

TEST_CASE("retrieval ties break by candidate index") {
  // two identical candidates with different labels: the lower index wins
  Tensor cands({3, 2}, {1, 0, 1, 0, 0, 1});
  std::vector<long> clabels{7, 8, 9};
  Tensor query({1, 2}, {1, 0});
  auto top = rank_top_k(query, 0, cands, 2);
  REQUIRE(top == std::vector<long>{0, 1});
  REQUIRE(precision_at_k(query, {7}, cands, clabels, 1) == 1.0);
  REQUIRE(precision_at_k(query, {8}, cands, clabels, 1) == 0.0);
}

TEST_CASE("random balanced embeddings reproduce chance-level retrieval precision") {
  // 8 balanced classes, 200 candidates per class
  double sum5 = 0, sum10 = 0, sum50 = 0;
  const int seeds = 100;
  for (int s = 0; s < seeds; ++s) {
    Rng rng(5000 + s);
    Tensor cands = unit_rows({1600, 16}, rng);
    Tensor queries = unit_rows({40, 16}, rng);
    std::vector<long> clabels, qlabels;
    for (long i = 0; i < 1600; ++i) clabels.push_back(i % 8);
    for (long i = 0; i < 40; ++i) qlabels.push_back(i % 8);
    sum5 += precision_at_k(queries, qlabels, cands, clabels, 5);
    sum10 += precision_at_k(queries, qlabels, cands, clabels, 10);
    sum50 += precision_at_k(queries, qlabels, cands, clabels, 50);
  }
  REQUIRE(sum5 / seeds == Approx(0.125).margin(0.01));
  REQUIRE(sum10 / seeds == Approx(0.125).margin(0.01));
  REQUIRE(sum50 / seeds == Approx(0.125).margin(0.01));

  // 5 balanced classes: chance is 0.20
  double sum5c = 0;
  for (int s = 0; s < seeds; ++s) {
    Rng rng(9000 + s);
    Tensor cands = unit_rows({1000, 16}, rng);
    Tensor queries = unit_rows({40, 16}, rng);
    std::vector<long> clabels, qlabels;
    for (long i = 0; i < 1000; ++i) clabels.push_back(i % 5);
    for (long i = 0; i < 40; ++i) qlabels.push_back(i % 5);
    sum5c += precision_at_k(queries, qlabels, cands, clabels, 5);
  }
  REQUIRE(sum5c / seeds == Approx(0.20).margin(0.01));
}

TEST_CASE("AUC matches the quadratic Mann-Whitney oracle including ties") {
  SECTION("score equal to label is a perfect separator") {
    std::vector<double> s{0, 1, 0, 1, 1, 0};
    std::vector<long> y{0, 1, 0, 1, 1, 0};
    REQUIRE(auc_score(s, y) == 1.0);
  }

  SECTION("random scores with ties, n <= 100") {
    Rng rng(23);
    for (int trial = 0; trial < 10; ++trial) {
      long n = 20 + static_cast<long>(rng.randint(81));
      std::vector<double> s;
      std::vector<long> y;
      bool pos = false, neg = false;
      for (long i = 0; i < n; ++i) {
        s.push_back(static_cast<double>(rng.randint(10)));  // heavy ties
        long label = rng.bernoulli(0.4) ? 1 : 0;
        y.push_back(label);
        (label ? pos : neg) = true;
      }
      if (!pos || !neg) continue;
      REQUIRE(auc_score(s, y) == Approx(vloracle::auc_naive(s, y)).margin(1e-12));
    }
  }

  SECTION("needs both classes") {
    REQUIRE_THROWS_AS(auc_score({0.5, 0.1}, {1, 1}), ProtocolError);
  }
}

TEST_CASE("threshold tuning: grid size, perfect separation, chance behavior") {
  SECTION("grid has exactly 201 points at step 0.005") {
    // two-level scores: every tuning fold normalizes them to exactly 0/1
    std::vector<double> s;
    std::vector<long> y;
    for (int i = 0; i < 40; ++i) {
      long label = i % 2;
      s.push_back(label ? 0.8 : 0.2);
      y.push_back(label);
    }
    ThresholdReport rep = tune_threshold(s, y, 10, 0.005, 0);
    REQUIRE(rep.grid_points == 201);
    REQUIRE(rep.folds_used + static_cast<long>(rep.warnings.size()) == 10);
    REQUIRE(rep.folds_used >= 8);
    REQUIRE(rep.cv_acc == 1.0);
    REQUIRE(rep.cv_f1 == 1.0);
  }

  SECTION("labels independent of scores give near-chance accuracy") {
    double acc_sum = 0.0;
    const int reps = 20;
    for (int r = 0; r < reps; ++r) {
      Rng rng(700 + r);
      std::vector<double> s;
      std::vector<long> y;
      for (int i = 0; i < 200; ++i) {
        s.push_back(rng.uniform());
        y.push_back(i % 2);
      }
      acc_sum += tune_threshold(s, y, 10, 0.005, r).cv_acc;
    }
    REQUIRE(acc_sum / reps == Approx(0.5).margin(0.05));
  }

  SECTION("single-class folds are skipped with a warning") {
    std::vector<double> s{0.1, 0.9, 0.2, 0.8, 0.15, 0.85, 0.1, 0.9, 0.2, 0.8};
    std::vector<long> y{0, 1, 0, 1, 0, 1, 0, 1, 0, 1};
    // 10 folds over 10 items: every held-out fold has a single item
    ThresholdReport rep = tune_threshold(s, y, 10, 0.005, 0);
    REQUIRE(rep.folds_used + static_cast<long>(rep.warnings.size()) == 10);
    REQUIRE(!rep.warnings.empty());
  }
}

TEST_CASE("zero-shot classification protocols") {
  SECTION("identical prompts across classes hit chance by tie-break") {
    Rng rng(41);
    Tensor imgs = unit_rows({30, 8}, rng);
    std::vector<long> labels;
    for (long i = 0; i < 30; ++i) labels.push_back(i % 3);
    Tensor prompt = unit_rows({2, 8}, rng);
    std::vector<Tensor> classes{prompt, prompt, prompt};
    json rep = zero_shot_classify(imgs, labels, classes);
    REQUIRE(rep["acc"].get<double>() == Approx(1.0 / 3.0));
  }

  SECTION("prompts equal to class centroids separate planted clusters") {
    Rng rng(43);
    Tensor centers = unit_rows({3, 8}, rng);
    Tensor imgs({30, 8});
    std::vector<long> labels;
    for (long i = 0; i < 30; ++i) {
      long c = i % 3;
      labels.push_back(c);
      for (long k = 0; k < 8; ++k) imgs.at(i, k) = centers.at(c, k) + 0.01 * rng.normal();
    }
    std::vector<Tensor> classes;
    for (long c = 0; c < 3; ++c) {
      Tensor p({1, 8});
      for (long k = 0; k < 8; ++k) p.at(0, k) = centers.at(c, k);
      classes.push_back(p);
    }
    json rep = zero_shot_classify(imgs, labels, classes);
    REQUIRE(rep["acc"].get<double>() == 1.0);
    REQUIRE(rep["macro_f1"].get<double>() == 1.0);
  }

  SECTION("binary path reports CV accuracy, F1 and AUC") {
    Rng rng(47);
    Tensor pos_dir = unit_rows({1, 8}, rng);
    Tensor imgs({40, 8});
    std::vector<long> labels;
    for (long i = 0; i < 40; ++i) {
      long y = i % 2;
      labels.push_back(y);
      for (long k = 0; k < 8; ++k)
        imgs.at(i, k) = (y ? 1.0 : -1.0) * pos_dir.at(0, k) + 0.05 * rng.normal();
    }
    Tensor neg_p({1, 8}), pos_p({1, 8});
    for (long k = 0; k < 8; ++k) {
      pos_p.at(0, k) = pos_dir.at(0, k);
      neg_p.at(0, k) = -pos_dir.at(0, k);
    }
    json rep = zero_shot_classify(imgs, labels, {neg_p, pos_p});
    REQUIRE(rep["task"] == "ZSHOT-BINARY");
    REQUIRE(rep["auc"].get<double>() == 1.0);
    REQUIRE(rep["acc"].get<double>() >= 0.95);
    REQUIRE(rep["grid_points"].get<long>() == 201);
  }

  SECTION("a class with zero prompts is a protocol error") {
    Rng rng(49);
    Tensor imgs = unit_rows({4, 8}, rng);
    std::vector<Tensor> classes{unit_rows({1, 8}, rng), Tensor({0, 8})};
    REQUIRE_THROWS_AS(zero_shot_classify(imgs, {0, 1, 0, 1}, classes), ProtocolError);
  }
}

TEST_CASE("similarity-scale invariance of rankings and metrics") {
  Rng rng(53);
  Tensor q = unit_rows({6, 8}, rng);
  Tensor c = unit_rows({15, 8}, rng);
  std::vector<long> ql, cl;
  for (long i = 0; i < 6; ++i) ql.push_back(i % 3);
  for (long i = 0; i < 15; ++i) cl.push_back(i % 3);

  Tensor q_scaled = q, c_scaled = c;
  for (long i = 0; i < q_scaled.numel(); ++i) q_scaled[i] *= 3.7;
  for (long i = 0; i < c_scaled.numel(); ++i) c_scaled[i] *= 0.2;

  for (long k : {1L, 5L, 10L})
    REQUIRE(precision_at_k(q, ql, c, cl, k) == precision_at_k(q_scaled, ql, c_scaled, cl, k));

  std::vector<double> scores, scaled;
  std::vector<long> labels;
  for (long i = 0; i < 15; ++i) {
    double dot = 0.0;
    for (long k = 0; k < 8; ++k) dot += q.at(0, k) * c.at(i, k);
    scores.push_back(dot);
    scaled.push_back(dot * 11.0);
    labels.push_back(i % 2);
  }
  REQUIRE(auc_score(scores, labels) == auc_score(scaled, labels));
}

TEST_CASE("embed_for_eval: full patches, determinism, chunking equivalence") {
  ModelConfig cfg = eval_cfg();
  DualTowerModel m = build_model(cfg, 61);
  Rng rng(63);
  SynthConfig sc;
  sc.image_size = 16;
  sc.truncate_len = 32;
  auto recs = make_synthetic_corpus(7, 3, rng, sc);

  // masked vs unmasked token counts: P+1 vs kept+1
  auto parts = full_partitions(1, cfg.n_patches());
  REQUIRE(static_cast<long>(parts[0][0].non_masked_idx.size()) == cfg.n_patches());
  REQUIRE(cfg.n_kept() < cfg.n_patches());

  EvalEmbeddings a = embed_for_eval(m, recs, 64);
  EvalEmbeddings b = embed_for_eval(m, recs, 64);
  REQUIRE(max_abs_diff(a.image_global, b.image_global) == 0.0);

  EvalEmbeddings c = embed_for_eval(m, recs, 2);
  REQUIRE(max_abs_diff(a.image_global, c.image_global) < 1e-9);
  REQUIRE(max_abs_diff(a.text_global, c.text_global) < 1e-9);

  // unit rows
  for (long i = 0; i < a.image_global.dim(0); ++i) {
    double ss = 0.0;
    for (long k = 0; k < a.image_global.dim(1); ++k) ss += a.image_global.at(i, k) * a.image_global.at(i, k);
    REQUIRE(std::sqrt(ss) == Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("sentence similarity on identical and separated pairs") {
  ModelConfig cfg = eval_cfg();
  DualTowerModel m = build_model(cfg, 67);
  Vocab vocab = make_synthetic_vocab(3);

  // identical sentences score cosine 1
  std::vector<std::string> texts{"finding0a is seen in the left lung zone ."};
  Tensor e = embed_texts(m, {texts[0], texts[0]}, vocab, 32);
  double dot = 0.0;
  for (long k = 0; k < e.dim(1); ++k) dot += e.at(0, k) * e.at(1, k);
  REQUIRE(dot == Approx(1.0).epsilon(1e-9));

  std::vector<SentencePair> pairs;
  for (int i = 0; i < 12; ++i) {
    SentencePair p;
    long ca = i % 3;
    p.text_a = synthetic_class_prompts(ca)[0];
    if (i % 2 == 0) {
      p.text_b = p.text_a;  // identical: paraphrase
      p.label = 1;
    } else {
      p.text_b = synthetic_class_prompts((ca + 1) % 3)[0];
      p.label = 0;
    }
    pairs.push_back(p);
  }
  json rep = sentence_similarity(m, pairs, vocab, 32, 4, 0.005, 0);
  // identical pairs score exactly 1, different ones strictly below
  REQUIRE(rep["auc"].get<double>() == 1.0);
  REQUIRE(rep["task"] == "SENT-SIM");
}

TEST_CASE("retrieval report carries the paper-style table layout") {
  Rng rng(71);
  Tensor q = unit_rows({4, 8}, rng), c = unit_rows({12, 8}, rng);
  std::vector<long> ql{0, 1, 0, 1}, cl;
  for (long i = 0; i < 12; ++i) cl.push_back(i % 2);
  json rep = retrieval_report("t2i", q, ql, c, cl, {5, 10});
  REQUIRE(rep["precision"].contains("P@5"));
  REQUIRE(rep["precision"].contains("P@10"));
  std::string table = retrieval_table(rep, {5, 10});
  REQUIRE_THAT(table, Catch::Matchers::StartsWith("t2i"));
}
