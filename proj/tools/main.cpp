// Command-line surface: record construction, synthetic corpora, training,
// retrieval / zero-shot / sentence-similarity evaluation, and parameter
// accounting, all driven by a single JSON config with --set overrides.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "vlalign/vlalign.hpp"

namespace fs = std::filesystem;
using namespace vlalign;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUser = 2;
constexpr int kExitRuntime = 3;

RunConfig load_config_with_overrides(const std::string& path, const std::vector<std::string>& sets) {
  json j = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    in >> j;
  }
  for (const auto& s : sets) apply_override(j, s);
  RunConfig cfg;
  from_json_checked(j, cfg);
  cfg.validate();
  return cfg;
}

fs::path resolve_out_dir(const std::string& out_dir) {
  fs::path p(out_dir);
  const char* root = std::getenv("VLALIGN_OUT_ROOT");
  if (root && *root && p.is_relative()) p = fs::path(root) / p;
  return p;
}

// Every run directory is self-describing: resolved config plus its hash.
void write_resolved_config(const RunConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir);
  json j;
  j["config"] = to_json(cfg);
  j["config_hash"] = config_hash(cfg);
  std::ofstream out(dir / "config.json");
  out << j.dump(2) << "\n";
}

Vocab load_vocab_or_die(const RunConfig& cfg) {
  if (cfg.records.vocab_path.empty()) throw ConfigError("records.vocab_path is required");
  return Vocab::load(cfg.records.vocab_path);
}

DualTowerModel build_model_from_config(RunConfig cfg, const Vocab& vocab) {
  cfg.model.vocab_size = vocab.size();
  cfg.model.max_text_len = std::max(cfg.model.max_text_len, cfg.records.truncate_len);
  return build_model(cfg.model, cfg.seed);
}

struct SplitCorpus {
  std::vector<Record> train, val;
};

SplitCorpus split_train_val(std::vector<Record> all, double val_fraction, std::uint64_t seed) {
  Rng rng = Rng(seed).derive(77);
  std::vector<long> order(all.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<long>(i);
  rng.shuffle(order);
  long n_val = static_cast<long>(std::llround(val_fraction * static_cast<double>(all.size())));
  SplitCorpus out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    Record& r = all[static_cast<std::size_t>(order[i])];
    if (static_cast<long>(i) < n_val) out.val.push_back(std::move(r));
    else out.train.push_back(std::move(r));
  }
  return out;
}

int cmd_build_records(const std::string& config_path, const std::vector<std::string>& sets,
                      const std::string& manifest_path, const std::string& out_dir) {
  RunConfig cfg = load_config_with_overrides(config_path, sets);
  Vocab vocab = load_vocab_or_die(cfg);
  ManifestParse mp = parse_manifest_file(manifest_path);
  for (const auto& d : mp.diagnostics) std::cerr << "[build-records] rejected: " << d << "\n";

  fs::path manifest_dir = fs::path(manifest_path).parent_path();
  fs::path images_dir = cfg.records.images_dir.empty() ? manifest_dir / "images"
                                                       : fs::path(cfg.records.images_dir);
  ImageLoader loader = [&](const StudyMeta& m) {
    fs::path pgm = images_dir / (m.image_id + ".pgm");
    if (fs::exists(pgm)) return read_pgm16(pgm.string());
    fs::path raw = images_dir / (m.image_id + ".raw");
    if (fs::exists(raw)) return read_raw_f32(raw.string());
    throw std::runtime_error("image file not found for image_id " + m.image_id);
  };
  ReportReader reader = [&](const std::string& rel) {
    fs::path p(rel);
    if (p.is_relative()) p = manifest_dir / p;
    std::ifstream in(p);
    if (!in) throw std::runtime_error("cannot open report: " + p.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
  };

  BuildResult res = build_records(mp.rows, cfg.records, vocab, loader, reader);
  for (const auto& d : res.diagnostics) std::cerr << "[build-records] " << d << "\n";

  fs::path out = resolve_out_dir(out_dir);
  save_record_store(res.records, res.stats, out.string(), cfg.records.image_format);
  write_resolved_config(cfg, out);
  std::cout << "records: " << res.records.size() << "\n"
            << "frac_with_prior: " << res.stats.frac_with_prior << "\n"
            << "frac_with_lateral: " << res.stats.frac_with_lateral << "\n"
            << "store: " << out.string() << "\n";
  return kExitOk;
}

int cmd_make_synthetic(const std::string& config_path, const std::vector<std::string>& sets,
                       const std::string& out_dir, long n, long n_classes, bool balanced,
                       long sentsim_pairs) {
  RunConfig cfg = load_config_with_overrides(config_path, sets);
  SynthConfig sc;
  sc.image_size = cfg.model.image_size;
  sc.truncate_len = cfg.records.truncate_len;
  sc.balanced = balanced;
  Rng rng(cfg.seed);
  std::vector<Record> records = make_synthetic_corpus(n, n_classes, rng, sc);
  CorpusStats stats = compute_corpus_stats(records);

  fs::path out = resolve_out_dir(out_dir);
  save_record_store(records, stats, out.string(), cfg.records.image_format);
  Vocab vocab = make_synthetic_vocab(n_classes);
  vocab.save((out / "vocab.txt").string());

  json prompts;
  prompts["classes"] = json::array();
  for (long c = 0; c < n_classes; ++c)
    prompts["classes"].push_back({{"label", c}, {"prompts", synthetic_class_prompts(c)}});
  {
    std::ofstream pout(out / "prompts.json");
    pout << prompts.dump(2) << "\n";
  }

  if (sentsim_pairs > 0) {
    Rng prng = rng.derive(31);
    std::ofstream sout(out / "sentsim.jsonl");
    for (long i = 0; i < sentsim_pairs; ++i) {
      bool paraphrase = i % 2 == 0;
      long ca = static_cast<long>(prng.randint(static_cast<std::uint64_t>(n_classes)));
      long cb = ca;
      if (!paraphrase)
        cb = (ca + 1 + static_cast<long>(prng.randint(static_cast<std::uint64_t>(n_classes - 1)))) % n_classes;
      auto pa = synthetic_class_prompts(ca);
      auto pb = synthetic_class_prompts(cb);
      json line{{"text_a", pa[prng.randint(pa.size())]},
                {"text_b", pb[prng.randint(pb.size())]},
                {"label", paraphrase ? 1 : 0}};
      sout << line.dump() << "\n";
    }
  }
  write_resolved_config(cfg, out);
  std::cout << "records: " << records.size() << "\nstore: " << out.string() << "\n";
  return kExitOk;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& sets,
              const std::string& store_dir, const std::vector<std::string>& ablate, long max_steps) {
  RunConfig cfg = load_config_with_overrides(config_path, sets);
  for (const auto& a : ablate) {
    if (a == "temporal") cfg.train.ablate_temporal = true;
    else if (a == "multiview") cfg.train.ablate_multiview = true;
    else if (a == "local") cfg.train.ablate_local = true;
    else if (a == "mlm") cfg.train.ablate_mlm = true;
    else if (a == "mim") cfg.train.ablate_mim = true;
    else throw ConfigError("unknown ablation switch: " + a + " (temporal|multiview|local|mlm|mim)");
  }
  if (max_steps > 0) cfg.train.max_steps = max_steps;

  fs::path store = fs::path(store_dir);
  std::vector<Record> all = load_record_store(store.string());
  if (all.empty()) throw EmptyCorpusError("record store is empty: " + store.string());

  if (cfg.records.vocab_path.empty() && fs::exists(store / "vocab.txt"))
    cfg.records.vocab_path = (store / "vocab.txt").string();
  Vocab vocab = load_vocab_or_die(cfg);
  DualTowerModel model = build_model_from_config(cfg, vocab);

  SplitCorpus split = split_train_val(std::move(all), cfg.train.val_fraction, cfg.seed);
  fs::path out = resolve_out_dir(cfg.out_dir);
  fs::create_directories(out);
  write_resolved_config(cfg, out);

  std::vector<Record> val = split.val;
  ValidationScorer scorer = [&val](DualTowerModel& m) { return text_to_image_p5(m, val); };

  FitResult res = fit(model, split.train, cfg, scorer, out.string(), vocab.period_id());
  save_history(res.history, (out / "history.jsonl").string());
  {
    std::ofstream vout(out / "val_history.jsonl");
    for (const auto& [epoch, score] : res.val_scores)
      vout << json{{"epoch", epoch}, {"val_score", score}}.dump() << "\n";
  }
  save_checkpoint(model.store, (out / "last.ckpt").string(), config_hash(cfg));
  if (res.aborted) {
    std::cerr << "training aborted: " << res.abort_reason << " (partial history saved)\n";
    return kExitRuntime;
  }
  std::cout << "steps: " << res.steps_run << "\nbest_epoch: " << res.best_epoch
            << "\nbest_val: " << res.best_score << "\nout: " << out.string() << "\n";
  return kExitOk;
}

DualTowerModel load_eval_model(RunConfig& cfg, const Vocab& vocab, const std::string& checkpoint) {
  DualTowerModel model = build_model_from_config(cfg, vocab);
  if (!checkpoint.empty()) {
    if (!fs::exists(checkpoint)) throw ConfigError("checkpoint not found: " + checkpoint);
    load_checkpoint(model.store, checkpoint);
  }
  return model;
}

void emit_report(json rep, const RunConfig& cfg, const std::string& protocol_desc,
                 const std::string& out_file) {
  rep["protocol_hash"] = fnv1a_hex(protocol_desc);
  rep["config_hash"] = config_hash(cfg);
  std::string text = rep.dump(2) + "\n";
  if (out_file.empty()) {
    std::cout << text;
  } else {
    fs::path p = resolve_out_dir(out_file);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p);
    out << text;
    std::cout << "report: " << p.string() << "\n";
  }
}

int cmd_eval_retrieval(const std::string& config_path, const std::vector<std::string>& sets,
                       const std::string& task, const std::string& queries_dir,
                       const std::string& candidates_dir, const std::string& checkpoint,
                       const std::string& out_file) {
  RunConfig cfg = load_config_with_overrides(config_path, sets);
  if (task != "t2i" && task != "i2t" && task != "i2i")
    throw ConfigError("unknown retrieval task: " + task + " (t2i|i2t|i2i)");
  fs::path qdir(queries_dir), cdir(candidates_dir);
  if (cfg.records.vocab_path.empty() && fs::exists(cdir / "vocab.txt"))
    cfg.records.vocab_path = (cdir / "vocab.txt").string();
  Vocab vocab = load_vocab_or_die(cfg);
  DualTowerModel model = load_eval_model(cfg, vocab, checkpoint);

  std::vector<Record> queries = load_record_store(qdir.string());
  std::vector<Record> cands = load_record_store(cdir.string());
  EvalEmbeddings qe = embed_for_eval(model, queries, cfg.eval.eval_batch);
  EvalEmbeddings ce = embed_for_eval(model, cands, cfg.eval.eval_batch);

  const Tensor& qmat = task == "t2i" ? qe.text_global : qe.image_global;
  const Tensor& cmat = task == "i2t" ? ce.text_global : ce.image_global;
  json rep = retrieval_report(task, qmat, qe.labels, cmat, ce.labels, cfg.eval.k_list);
  rep["table"] = retrieval_table(rep, cfg.eval.k_list);
  emit_report(std::move(rep), cfg,
              "retrieval|" + task + "|" + queries_dir + "|" + candidates_dir + "|" +
                  json(cfg.eval.k_list).dump(),
              out_file);
  return kExitOk;
}

int cmd_eval_zeroshot(const std::string& config_path, const std::vector<std::string>& sets,
                      const std::string& images_dir, const std::string& prompts_path,
                      const std::string& checkpoint, const std::string& out_file) {
  RunConfig cfg = load_config_with_overrides(config_path, sets);
  fs::path idir(images_dir);
  if (cfg.records.vocab_path.empty() && fs::exists(idir / "vocab.txt"))
    cfg.records.vocab_path = (idir / "vocab.txt").string();
  Vocab vocab = load_vocab_or_die(cfg);
  DualTowerModel model = load_eval_model(cfg, vocab, checkpoint);

  std::ifstream pin(prompts_path);
  if (!pin) throw ConfigError("cannot open prompts file: " + prompts_path);
  json prompts = json::parse(pin);

  std::vector<Record> images = load_record_store(idir.string());
  EvalEmbeddings emb = embed_for_eval(model, images, cfg.eval.eval_batch);

  std::vector<Tensor> class_embeds;
  for (const auto& cls : prompts.at("classes")) {
    auto texts = cls.at("prompts").get<std::vector<std::string>>();
    if (texts.empty()) throw ProtocolError("class with zero prompts in " + prompts_path);
    class_embeds.push_back(embed_texts(model, texts, vocab, cfg.records.truncate_len));
  }
  json rep = zero_shot_classify(emb.image_global, emb.labels, class_embeds, cfg.eval.folds,
                                cfg.eval.threshold_step, cfg.seed);
  emit_report(std::move(rep), cfg, "zeroshot|" + images_dir + "|" + prompts_path, out_file);
  return kExitOk;
}

int cmd_eval_sentsim(const std::string& config_path, const std::vector<std::string>& sets,
                     const std::string& pairs_path, const std::string& checkpoint,
                     const std::string& out_file) {
  RunConfig cfg = load_config_with_overrides(config_path, sets);
  Vocab vocab = load_vocab_or_die(cfg);
  DualTowerModel model = load_eval_model(cfg, vocab, checkpoint);

  std::ifstream in(pairs_path);
  if (!in) throw ConfigError("cannot open pairs file: " + pairs_path);
  std::vector<SentencePair> pairs;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    pairs.push_back({j.at("text_a").get<std::string>(), j.at("text_b").get<std::string>(),
                     j.at("label").get<long>()});
  }
  json rep = sentence_similarity(model, pairs, vocab, cfg.records.truncate_len, cfg.eval.folds,
                                 cfg.eval.threshold_step, cfg.seed);
  emit_report(std::move(rep), cfg, "sentsim|" + pairs_path, out_file);
  return kExitOk;
}

int cmd_account_params(const std::string& config_path, const std::vector<std::string>& sets) {
  RunConfig cfg = load_config_with_overrides(config_path, sets);
  if (!cfg.records.vocab_path.empty()) {
    Vocab vocab = Vocab::load(cfg.records.vocab_path);
    cfg.model.vocab_size = vocab.size();
  }
  DualTowerModel model = build_model(cfg.model, cfg.seed, /*with_adapters=*/true, /*shape_only=*/true);
  ParamAccounting acc = account_parameters(model);
  json rep{{"trainable", acc.trainable},
           {"frozen", acc.frozen},
           {"total", acc.trainable + acc.frozen},
           {"fraction", acc.fraction},
           {"config_hash", config_hash(cfg)}};
  std::cout << rep.dump(2) << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parameter-efficient vision-language alignment over frozen masked-modeling towers"};
  app.require_subcommand(1);

  std::string config_path, manifest_path, out_dir, store_dir, task, queries_dir, candidates_dir;
  std::string prompts_path, pairs_path, checkpoint, out_file, images_dir;
  std::vector<std::string> sets, ablate;
  long n = 200, n_classes = 5, sentsim_pairs = 0, max_steps = -1;
  bool balanced = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file");
    sub->add_option("--set", sets, "override config entries, section.key=value")->take_all();
  };

  CLI::App* sc_build = app.add_subcommand("build-records", "assemble temporal-multiview records from a manifest");
  add_common(sc_build);
  sc_build->add_option("--manifest", manifest_path, "manifest file")->required();
  sc_build->add_option("--out", out_dir, "output record store directory")->required();

  CLI::App* sc_synth = app.add_subcommand("make-synthetic", "generate a synthetic record store");
  add_common(sc_synth);
  sc_synth->add_option("--out", out_dir)->required();
  sc_synth->add_option("--n", n, "number of records");
  sc_synth->add_option("--classes", n_classes, "number of latent classes");
  sc_synth->add_flag("--balanced", balanced, "exact round-robin class counts");
  sc_synth->add_option("--sentsim", sentsim_pairs, "also emit this many sentence pairs");

  CLI::App* sc_train = app.add_subcommand("train", "run alignment training");
  add_common(sc_train);
  sc_train->add_option("--store", store_dir, "record store directory")->required();
  sc_train->add_option("--ablate", ablate, "temporal|multiview|local|mlm|mim")->take_all();
  sc_train->add_option("--max-steps", max_steps, "stop after this many steps");

  CLI::App* sc_ret = app.add_subcommand("eval-retrieval", "retrieval precision at k");
  add_common(sc_ret);
  sc_ret->add_option("--task", task, "t2i|i2t|i2i")->required();
  sc_ret->add_option("--queries", queries_dir)->required();
  sc_ret->add_option("--candidates", candidates_dir)->required();
  sc_ret->add_option("--checkpoint", checkpoint);
  sc_ret->add_option("--out", out_file, "report file (stdout if omitted)");

  CLI::App* sc_zs = app.add_subcommand("eval-zeroshot", "prompt-based zero-shot classification");
  add_common(sc_zs);
  sc_zs->add_option("--images", images_dir)->required();
  sc_zs->add_option("--prompts", prompts_path)->required();
  sc_zs->add_option("--checkpoint", checkpoint);
  sc_zs->add_option("--out", out_file);

  CLI::App* sc_ss = app.add_subcommand("eval-sentsim", "sentence-similarity zero-shot classification");
  add_common(sc_ss);
  sc_ss->add_option("--pairs", pairs_path)->required();
  sc_ss->add_option("--checkpoint", checkpoint);
  sc_ss->add_option("--out", out_file);

  CLI::App* sc_acct = app.add_subcommand("account-params", "trainable/frozen parameter accounting");
  add_common(sc_acct);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUser;
  }

  try {
    if (sc_build->parsed()) return cmd_build_records(config_path, sets, manifest_path, out_dir);
    if (sc_synth->parsed())
      return cmd_make_synthetic(config_path, sets, out_dir, n, n_classes, balanced, sentsim_pairs);
    if (sc_train->parsed()) return cmd_train(config_path, sets, store_dir, ablate, max_steps);
    if (sc_ret->parsed())
      return cmd_eval_retrieval(config_path, sets, task, queries_dir, candidates_dir, checkpoint, out_file);
    if (sc_zs->parsed())
      return cmd_eval_zeroshot(config_path, sets, images_dir, prompts_path, checkpoint, out_file);
    if (sc_ss->parsed()) return cmd_eval_sentsim(config_path, sets, pairs_path, checkpoint, out_file);
    if (sc_acct->parsed()) return cmd_account_params(config_path, sets);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUser;
  } catch (const EmptyCorpusError& e) {
    std::cerr << "empty corpus: " << e.what() << "\n";
    return kExitUser;
  } catch (const ProtocolError& e) {
    std::cerr << "protocol error: " << e.what() << "\n";
    return kExitUser;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUser;
}
