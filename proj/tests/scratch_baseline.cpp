// scratch: per-seed spread of the untrained-model retrieval baseline
#include <cstdio>

#include "test_util.hpp"

using namespace vlalign;

int main(int argc, char** argv) {
  double strength = argc > 1 ? std::atof(argv[1]) : 0.20;
  double noise = argc > 2 ? std::atof(argv[2]) : 0.30;
  int n_seeds = argc > 3 ? std::atoi(argv[3]) : 20;

  SynthConfig sc;
  sc.image_size = 32;
  sc.truncate_len = 32;
  sc.balanced = true;
  sc.pattern_strength = strength;
  sc.noise_strength = noise;

  double sum5 = 0, sum10 = 0, sum50 = 0, sq5 = 0;
  auto t0 = std::chrono::steady_clock::now();
  for (int s = 0; s < n_seeds; ++s) {
    DualTowerModel m = build_model(ModelConfig::toy(89), 3000 + static_cast<std::uint64_t>(s));
    Rng rc(4000 + static_cast<std::uint64_t>(s)), rq(4100 + static_cast<std::uint64_t>(s));
    auto cands = make_synthetic_corpus(1600, 8, rc, sc);
    auto queries = make_synthetic_corpus(80, 8, rq, sc);
    EvalEmbeddings ce = embed_for_eval(m, cands, 128);
    EvalEmbeddings qe = embed_for_eval(m, queries, 128);
    double p5 = precision_at_k(qe.text_global, qe.labels, ce.image_global, ce.labels, 5);
    double p10 = precision_at_k(qe.text_global, qe.labels, ce.image_global, ce.labels, 10);
    double p50 = precision_at_k(qe.text_global, qe.labels, ce.image_global, ce.labels, 50);
    sum5 += p5;
    sum10 += p10;
    sum50 += p50;
    sq5 += p5 * p5;
    std::printf("seed %2d  P@5=%.4f P@10=%.4f P@50=%.4f\n", s, p5, p10, p50);
  }
  double m5 = sum5 / n_seeds;
  double sd5 = std::sqrt(std::max(0.0, sq5 / n_seeds - m5 * m5));
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("strength=%.2f noise=%.2f mean P@5=%.4f sd=%.4f | P@10=%.4f P@50=%.4f | %.1fs total\n",
              strength, noise, m5, sd5, sum10 / n_seeds, sum50 / n_seeds, secs);
  return 0;
}
