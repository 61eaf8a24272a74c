#include <catch2/catch_amalgamated.hpp>

#include "oracle.hpp"
#include "test_util.hpp"

using namespace vlalign;
using Catch::Approx;

namespace {

ModelConfig mm_cfg() {
  ModelConfig cfg = ModelConfig::toy(/*vocab=*/89);
  cfg.image_size = 16;
  cfg.patch = 8;
  cfg.d_vision = 8;
  cfg.heads_vision = 2;
  cfg.blocks_vision = 1;
  cfg.d_language = 8;
  cfg.heads_language = 2;
  cfg.blocks_language = 1;
  cfg.max_text_len = 16;
  cfg.d_global = 8;
  cfg.d_local = 8;
  cfg.decoder_dim = 8;
  cfg.decoder_blocks = 1;
  cfg.decoder_heads = 2;
  return cfg;
}

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

}  // namespace

TEST_CASE("mlm_loss: zero masked positions yields a zero loss") {
  ModelConfig cfg = mm_cfg();
  DualTowerModel m = build_model(cfg, 5);
  TokenizedReport t;
  t.ids = {0, 5, 6};
  Rng rng(1);
  TokenizedReport unmasked = mask_tokens(t, 0.0, rng);
  Graph g;
  Rng grng(2);
  NodePtr gi = g.constant(unit_rows({1, cfg.d_global}, grng));
  MlmResult res = mlm_loss(g, m.language, m.mlm, {&unmasked}, gi);
  REQUIRE(res.n_masked == 0);
  REQUIRE(res.loss->value[0] == 0.0);
}

TEST_CASE("mlm_loss matches a straight-line oracle on a fixed fixture") {
  ModelConfig cfg = mm_cfg();
  DualTowerModel m = build_model(cfg, 7);
  vltest::randomize_params(m.store,
                           {m.language.blocks[0].post_attn.up_w, m.language.blocks[0].parallel_ffn.up_w,
                            m.store.find("heads.mlm.vocab_bias")},
                           81);

  TokenizedReport masked;
  masked.ids = {0, kMaskId, 6, kMaskId};
  masked.mask_positions = {1, 3};
  masked.targets = {5, 9};

  Rng grng(3);
  Tensor gi_val = unit_rows({1, cfg.d_global}, grng);
  Graph g;
  MlmResult res = mlm_loss(g, m.language, m.mlm, {&masked}, g.constant(gi_val));
  REQUIRE(res.n_masked == 2);

  // oracle: hybrid embedding forward + tied vocabulary head + mean CE
  auto tok = vloracle::to_mat(m.store.get("language.token_embed").value);
  auto pos = vloracle::to_mat(m.store.get("language.pos_embed").value);
  auto whyb = vloracle::to_mat(m.store.get("heads.mlm.w_hyb_w").value);
  auto bhyb = vloracle::to_vec(m.store.get("heads.mlm.w_hyb_b").value);
  auto bias = vloracle::to_vec(m.store.get("heads.mlm.vocab_bias").value);
  std::vector<double> gvec = vloracle::to_vec(gi_val);
  std::vector<double> inject = vloracle::linear(gvec, whyb, bhyb);

  vloracle::Seq x;
  for (std::size_t i = 0; i < masked.ids.size(); ++i) {
    std::vector<double> row = tok[static_cast<std::size_t>(masked.ids[i])];
    for (std::size_t k = 0; k < row.size(); ++k) row[k] += pos[i][k] + inject[k];
    x.push_back(row);
  }
  auto blk = vloracle::load_block(m.store, "language.block0", cfg.heads_language, true);
  x = vloracle::block_forward(x, blk);
  auto lng = vloracle::to_vec(m.store.get("language.ln_f.gamma").value);
  auto lnb = vloracle::to_vec(m.store.get("language.ln_f.beta").value);
  for (auto& row : x) row = vloracle::layer_norm(row, lng, lnb);

  double ce = 0.0;
  for (std::size_t mi = 0; mi < masked.mask_positions.size(); ++mi) {
    const auto& z = x[static_cast<std::size_t>(masked.mask_positions[mi])];
    std::vector<double> logits(tok.size());
    for (std::size_t v = 0; v < tok.size(); ++v) {
      double dot = bias[v];
      for (std::size_t k = 0; k < z.size(); ++k) dot += z[k] * tok[v][k];
      logits[v] = dot;
    }
    double mx = logits[0];
    for (double l : logits) mx = std::max(mx, l);
    double sum = 0.0;
    for (double l : logits) sum += std::exp(l - mx);
    ce += mx + std::log(sum) - logits[static_cast<std::size_t>(masked.targets[mi])];
  }
  ce /= static_cast<double>(masked.mask_positions.size());
  REQUIRE(res.loss->value[0] == Approx(ce).epsilon(1e-12));
}

TEST_CASE("mlm gradients reach the vision adapters through the hybrid path") {
  ModelConfig cfg = mm_cfg();
  DualTowerModel m = build_model(cfg, 11);
  vltest::randomize_params(m.store,
                           {m.vision.blocks[0].post_attn.up_w, m.vision.blocks[0].post_attn.down_w,
                            m.vision.blocks[0].parallel_ffn.up_w, m.vision.blocks[0].parallel_ffn.down_w,
                            m.language.blocks[0].post_attn.up_w, m.language.blocks[0].post_attn.down_w},
                           91, 0.4);

  Rng rng(13);
  SynthConfig sc;
  sc.image_size = 16;
  sc.truncate_len = 8;
  auto recs = make_synthetic_corpus(2, 2, rng, sc);
  std::vector<const Record*> batch{&recs[0], &recs[1]};
  Rng prt(5);
  auto parts = draw_partitions(2, cfg.n_patches(), 0.5, prt);

  std::vector<TokenizedReport> masked(2);
  std::vector<const TokenizedReport*> mptr;
  Rng mrng(7);
  for (int i = 0; i < 2; ++i) {
    TokenizedReport plain;
    plain.ids = recs[static_cast<std::size_t>(i)].report_tokens;
    masked[static_cast<std::size_t>(i)] = mask_tokens(plain, 0.5, mrng);
    mptr.push_back(&masked[static_cast<std::size_t>(i)]);
  }

  auto build = [&](Graph& g) {
    BatchEncoding enc = encode_batch(g, m, batch, parts);
    return mlm_loss(g, m.language, m.mlm, mptr, enc.img.global).loss;
  };

  m.store.zero_grad();
  {
    Graph g;
    g.backward(build(g));
  }
  REQUIRE(m.store.get("vision.block0.adapter_post_attn.up_w").grad.max_abs() > 0.0);
  REQUIRE(m.store.get("heads.mlm.w_hyb_w").grad.max_abs() > 0.0);

  auto rep = vltest::fd_gradient_check(
      m.store,
      {m.store.find("heads.mlm.w_hyb_w"), m.store.find("vision.block0.adapter_post_attn.up_w"),
       m.store.find("heads.mlm.vocab_bias")},
      build, 1e-5, 24);
  INFO(rep.worst_param);
  REQUIRE(rep.max_rel_err < 1e-4);
}

TEST_CASE("mim_loss trivial values via a constant decoder head") {
  ModelConfig cfg = mm_cfg();
  DualTowerModel m = build_model(cfg, 17);

  // head_w = 0 so predictions equal head_b on every masked patch
  Tensor& hw = m.store.get("decoder.head.w").value;
  for (long i = 0; i < hw.numel(); ++i) hw[i] = 0.0;
  Tensor& hb = m.store.get("decoder.head.b").value;

  double level = 0.37;
  Tensor img = Tensor::full({16, 16}, level);
  PatchPartition part;
  part.non_masked_idx = {0, 3};
  part.masked_idx = {1, 2};

  Graph g;
  Rng trng(19);
  NodePtr cf_tokens = g.constant(Tensor::randn({1, 3, cfg.d_vision}, trng));

  SECTION("prediction equals target: zero loss") {
    for (long i = 0; i < hb.numel(); ++i) hb[i] = level;
    MimResult res = mim_loss(g, m.decoder, cf_tokens, {part}, {&img}, cfg.patch, 1);
    REQUIRE(res.n_masked == 2);
    REQUIRE(res.loss->value[0] == Approx(0.0).margin(1e-28));
  }

  SECTION("prediction offset by one: loss exactly one") {
    for (long i = 0; i < hb.numel(); ++i) hb[i] = level + 1.0;
    MimResult res = mim_loss(g, m.decoder, cf_tokens, {part}, {&img}, cfg.patch, 1);
    REQUIRE(res.loss->value[0] == Approx(1.0).epsilon(1e-12));
  }

  SECTION("empty masked set: zero loss with flag") {
    PatchPartition full;
    full.non_masked_idx = {0, 1, 2, 3};
    Graph g2;
    Rng trng2(19);
    NodePtr tokens = g2.constant(Tensor::randn({1, 5, cfg.d_vision}, trng2));
    MimResult res = mim_loss(g2, m.decoder, tokens, {full}, {&img}, cfg.patch, 1);
    REQUIRE(res.n_masked == 0);
    REQUIRE(res.loss->value[0] == 0.0);
  }
}

TEST_CASE("mim loss depends only on masked-patch targets") {
  ModelConfig cfg = mm_cfg();
  DualTowerModel m = build_model(cfg, 23);
  Rng rng(25);
  Tensor img = Tensor::uniform({16, 16}, rng, 0.0, 1.0);
  PatchPartition part;
  part.non_masked_idx = {0, 3};
  part.masked_idx = {1, 2};

  Graph g;
  Rng trng(27);
  Tensor tokens = Tensor::randn({1, 3, cfg.d_vision}, trng);
  double base = mim_loss(g, m.decoder, g.constant(tokens), {part}, {&img}, cfg.patch, 1).loss->value[0];

  // perturb pixels inside a non-masked patch (patch 0: rows 0..7, cols 0..7)
  Tensor perturbed = img;
  perturbed.at(2, 2) += 0.123;
  Graph g2;
  double same =
      mim_loss(g2, m.decoder, g2.constant(tokens), {part}, {&perturbed}, cfg.patch, 1).loss->value[0];
  REQUIRE(same == base);

  // perturb pixels inside a masked patch (patch 1: rows 0..7, cols 8..15)
  Tensor changed = img;
  changed.at(2, 10) += 0.123;
  Graph g3;
  double different =
      mim_loss(g3, m.decoder, g3.constant(tokens), {part}, {&changed}, cfg.patch, 1).loss->value[0];
  REQUIRE(different != base);
}

TEST_CASE("mim gradients flow into encoder adapters through the frozen decoder") {
  ModelConfig cfg = mm_cfg();
  DualTowerModel m = build_model(cfg, 29);
  vltest::randomize_params(m.store,
                           {m.vision.blocks[0].post_attn.up_w, m.vision.blocks[0].post_attn.down_w,
                            m.vision.blocks[0].parallel_ffn.up_w, m.vision.blocks[0].parallel_ffn.down_w},
                           51, 0.4);

  Rng rng(31);
  SynthConfig sc;
  sc.image_size = 16;
  auto recs = make_synthetic_corpus(2, 2, rng, sc);
  std::vector<const Record*> batch{&recs[0], &recs[1]};
  Rng prt(33);
  auto parts = draw_partitions(2, cfg.n_patches(), 0.5, prt);

  auto build = [&](Graph& g) {
    NodePtr tokens = encode_records(g, m.vision, batch, parts);
    NodePtr cf = slice_batch(tokens, 0, 2);
    std::vector<const Tensor*> imgs{&recs[0].image(ViewTag::cf), &recs[1].image(ViewTag::cf)};
    return mim_loss(g, m.decoder, cf, parts[0], imgs, cfg.patch, 1).loss;
  };

  m.store.zero_grad();
  {
    Graph g;
    g.backward(build(g));
  }
  REQUIRE(m.store.get("vision.block0.adapter_post_attn.up_w").grad.max_abs() > 0.0);
  // decoder stays gradient-free (frozen leaves collect nothing)
  REQUIRE(m.store.get("decoder.head.w").grad.max_abs() == 0.0);

  auto rep = vltest::fd_gradient_check(
      m.store,
      {m.store.find("vision.block0.adapter_post_attn.up_w"),
       m.store.find("vision.block0.adapter_parallel_ffn.down_w"), m.store.find("vision.view_embed")},
      build, 1e-5, 24);
  INFO(rep.worst_param);
  REQUIRE(rep.max_rel_err < 1e-4);
}

TEST_CASE("mim target scale of two reconstructs upsampled patches") {
  ModelConfig cfg = mm_cfg();
  cfg.mim_target_scale = 2;
  DualTowerModel m = build_model(cfg, 35);
  REQUIRE(m.store.get("decoder.head.w").value.dim(1) == (cfg.patch * 2) * (cfg.patch * 2));

  Rng rng(37);
  Tensor img = Tensor::uniform({16, 16}, rng, 0.0, 1.0);
  PatchPartition part;
  part.non_masked_idx = {0};
  part.masked_idx = {1, 2, 3};
  Tensor targets = mim_targets(img, part, cfg.patch, 2);
  REQUIRE(targets.shape() == std::vector<long>{3, 256});

  Graph g;
  Rng trng(39);
  NodePtr tokens = g.constant(Tensor::randn({1, 2, cfg.d_vision}, trng));
  MimResult res = mim_loss(g, m.decoder, tokens, {part}, {&img}, cfg.patch, 2);
  REQUIRE(std::isfinite(res.loss->value[0]));
}
