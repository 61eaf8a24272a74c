#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace vlalign {

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

using json = nlohmann::ordered_json;

// FNV-1a 64-bit, used for config/protocol content hashes.
inline std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct RecordConfig {
  long input_size = 224;
  long resize_shorter = 256;
  long truncate_len = 128;
  std::string image_format = "pgm";  // pgm | raw
  std::string images_dir;
  std::string vocab_path;
};

struct AugmentConfig {
  double max_rotation_deg = 20.0;
  double max_shear_deg = 15.0;
  double max_translate_frac = 0.1;
  double scale_lo = 0.95;
  double scale_hi = 1.05;
  double brightness_lo = 0.8;
  double brightness_hi = 1.2;
  double contrast_lo = 0.8;
  double contrast_hi = 1.2;
  bool shuffle_sentences = true;

  static AugmentConfig identity() {
    AugmentConfig c;
    c.max_rotation_deg = 0.0;
    c.max_shear_deg = 0.0;
    c.max_translate_frac = 0.0;
    c.scale_lo = c.scale_hi = 1.0;
    c.brightness_lo = c.brightness_hi = 1.0;
    c.contrast_lo = c.contrast_hi = 1.0;
    c.shuffle_sentences = false;
    return c;
  }
};

struct ModelConfig {
  long image_size = 224;
  long patch = 16;
  long d_vision = 768;
  long blocks_vision = 12;
  long heads_vision = 12;
  long d_language = 768;
  long blocks_language = 12;
  long heads_language = 12;
  long mlp_ratio = 4;
  double adapter_ratio = 0.25;
  long vocab_size = 30522;
  long max_text_len = 128;
  long d_global = 128;
  long d_local = 128;
  long decoder_dim = 512;
  long decoder_blocks = 8;
  long decoder_heads = 8;
  long mim_target_scale = 1;
  double image_mask_ratio = 0.75;
  double report_mask_ratio = 0.5;
  double tau_attn = 0.1;
  double tau_local = 0.1;
  double tau_global_init = 0.07;
  std::string local_pool = "mean";              // mean | lse
  std::string local_attention = "text_query";   // text_query | image_query

  long n_patches() const { return (image_size / patch) * (image_size / patch); }
  long n_masked() const { return std::lround(image_mask_ratio * static_cast<double>(n_patches())); }
  long n_kept() const { return n_patches() - n_masked(); }  // m - 1
  long adapter_rank(long d) const {
    long r = std::lround(adapter_ratio * static_cast<double>(d));
    return r < 1 ? 1 : r;
  }

  void validate() const {
    if (image_size % patch != 0) throw ConfigError("model.image_size must be divisible by model.patch");
    if (d_vision % heads_vision != 0) throw ConfigError("model.d_vision must be divisible by model.heads_vision");
    if (d_language % heads_language != 0)
      throw ConfigError("model.d_language must be divisible by model.heads_language");
    if (decoder_dim % decoder_heads != 0)
      throw ConfigError("model.decoder_dim must be divisible by model.decoder_heads");
    if (image_mask_ratio < 0.0 || image_mask_ratio >= 1.0)
      throw ConfigError("model.image_mask_ratio must be in [0,1)");
    if (report_mask_ratio < 0.0 || report_mask_ratio >= 1.0)
      throw ConfigError("model.report_mask_ratio must be in [0,1)");
    if (adapter_ratio <= 0.0) throw ConfigError("model.adapter_ratio must be positive");
    if (mim_target_scale < 1) throw ConfigError("model.mim_target_scale must be >= 1");
    if (local_pool != "mean" && local_pool != "lse")
      throw ConfigError("model.local_pool must be 'mean' or 'lse'");
    if (local_attention != "text_query" && local_attention != "image_query")
      throw ConfigError("model.local_attention must be 'text_query' or 'image_query'");
    if (vocab_size < 5) throw ConfigError("model.vocab_size too small");
  }

  // Desk-scale configuration used across the test and example runs.
  static ModelConfig toy(long vocab) {
    ModelConfig c;
    c.image_size = 32;
    c.patch = 8;
    c.d_vision = 32;
    c.blocks_vision = 2;
    c.heads_vision = 4;
    c.d_language = 32;
    c.blocks_language = 2;
    c.heads_language = 4;
    c.vocab_size = vocab;
    c.max_text_len = 32;
    c.d_global = 128;
    c.d_local = 128;
    c.decoder_dim = 16;
    c.decoder_blocks = 1;
    c.decoder_heads = 2;
    return c;
  }

  // ViT-B + BERT-base shaped configuration (parameter accounting).
  static ModelConfig vit_b_bert_base() { return ModelConfig{}; }
};

struct LossWeights {
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double lambda3 = 1.0;
};

struct TrainConfig {
  long batch_size = 96;
  double peak_lr = 5.625e-5;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  long warmup_steps = 200;
  long max_epochs = 30;
  long patience = 10;
  long max_steps = -1;  // -1: derived from max_epochs
  double val_fraction = 0.2;
  bool ablate_temporal = false;
  bool ablate_multiview = false;
  bool ablate_local = false;
  bool ablate_mlm = false;
  bool ablate_mim = false;

  void validate() const {
    if (batch_size < 2) throw ConfigError("train.batch_size must be >= 2");
    if (peak_lr <= 0.0) throw ConfigError("train.peak_lr must be positive");
    if (patience > max_epochs) throw ConfigError("train.patience must be <= train.max_epochs");
    if (val_fraction < 0.0 || val_fraction >= 1.0) throw ConfigError("train.val_fraction must be in [0,1)");
  }
};

struct EvalConfig {
  std::vector<long> k_list = {5, 10, 50};
  long folds = 10;
  double threshold_step = 0.005;
  long eval_batch = 64;

  void validate() const {
    if (folds < 2) throw ConfigError("eval.folds must be >= 2");
    if (threshold_step <= 0.0 || threshold_step > 1.0) throw ConfigError("eval.threshold_step must be in (0,1]");
  }
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  RecordConfig records;
  AugmentConfig augment;
  ModelConfig model;
  LossWeights loss_weights;
  TrainConfig train;
  EvalConfig eval;

  void validate() const {
    model.validate();
    train.validate();
    eval.validate();
  }
};

// ---- JSON binding. Unknown keys are rejected with their path. ----

namespace cfg_detail {

class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("expected object at " + (path_.empty() ? "<root>" : path_));
  }

  template <typename T>
  void field(const char* key, T& out) {
    seen_.push_back(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->get<T>();
    } catch (const std::exception&) {
      throw ConfigError("bad value for " + join(key));
    }
  }

  json subobject(const char* key) {
    seen_.push_back(key);
    auto it = j_.find(key);
    return it == j_.end() ? json::object() : *it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      bool known = false;
      for (const auto& k : seen_)
        if (k == it.key()) known = true;
      if (!known) throw ConfigError("unknown config key: " + join(it.key().c_str()));
    }
  }

 private:
  std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json& j_;
  std::string path_;
  std::vector<std::string> seen_;
};

}  // namespace cfg_detail

inline void from_json_checked(const json& j, RecordConfig& c, const std::string& path) {
  cfg_detail::Reader r(j, path);
  r.field("input_size", c.input_size);
  r.field("resize_shorter", c.resize_shorter);
  r.field("truncate_len", c.truncate_len);
  r.field("image_format", c.image_format);
  r.field("images_dir", c.images_dir);
  r.field("vocab_path", c.vocab_path);
  r.finish();
}

inline void from_json_checked(const json& j, AugmentConfig& c, const std::string& path) {
  cfg_detail::Reader r(j, path);
  r.field("max_rotation_deg", c.max_rotation_deg);
  r.field("max_shear_deg", c.max_shear_deg);
  r.field("max_translate_frac", c.max_translate_frac);
  r.field("scale_lo", c.scale_lo);
  r.field("scale_hi", c.scale_hi);
  r.field("brightness_lo", c.brightness_lo);
  r.field("brightness_hi", c.brightness_hi);
  r.field("contrast_lo", c.contrast_lo);
  r.field("contrast_hi", c.contrast_hi);
  r.field("shuffle_sentences", c.shuffle_sentences);
  r.finish();
}

inline void from_json_checked(const json& j, ModelConfig& c, const std::string& path) {
  cfg_detail::Reader r(j, path);
  r.field("image_size", c.image_size);
  r.field("patch", c.patch);
  r.field("d_vision", c.d_vision);
  r.field("blocks_vision", c.blocks_vision);
  r.field("heads_vision", c.heads_vision);
  r.field("d_language", c.d_language);
  r.field("blocks_language", c.blocks_language);
  r.field("heads_language", c.heads_language);
  r.field("mlp_ratio", c.mlp_ratio);
  r.field("adapter_ratio", c.adapter_ratio);
  r.field("vocab_size", c.vocab_size);
  r.field("max_text_len", c.max_text_len);
  r.field("d_global", c.d_global);
  r.field("d_local", c.d_local);
  r.field("decoder_dim", c.decoder_dim);
  r.field("decoder_blocks", c.decoder_blocks);
  r.field("decoder_heads", c.decoder_heads);
  r.field("mim_target_scale", c.mim_target_scale);
  r.field("image_mask_ratio", c.image_mask_ratio);
  r.field("report_mask_ratio", c.report_mask_ratio);
  r.field("tau_attn", c.tau_attn);
  r.field("tau_local", c.tau_local);
  r.field("tau_global_init", c.tau_global_init);
  r.field("local_pool", c.local_pool);
  r.field("local_attention", c.local_attention);
  r.finish();
}

inline void from_json_checked(const json& j, LossWeights& c, const std::string& path) {
  cfg_detail::Reader r(j, path);
  r.field("lambda1", c.lambda1);
  r.field("lambda2", c.lambda2);
  r.field("lambda3", c.lambda3);
  r.finish();
}

inline void from_json_checked(const json& j, TrainConfig& c, const std::string& path) {
  cfg_detail::Reader r(j, path);
  r.field("batch_size", c.batch_size);
  r.field("peak_lr", c.peak_lr);
  r.field("weight_decay", c.weight_decay);
  r.field("beta1", c.beta1);
  r.field("beta2", c.beta2);
  r.field("adam_eps", c.adam_eps);
  r.field("warmup_steps", c.warmup_steps);
  r.field("max_epochs", c.max_epochs);
  r.field("patience", c.patience);
  r.field("max_steps", c.max_steps);
  r.field("val_fraction", c.val_fraction);
  r.field("ablate_temporal", c.ablate_temporal);
  r.field("ablate_multiview", c.ablate_multiview);
  r.field("ablate_local", c.ablate_local);
  r.field("ablate_mlm", c.ablate_mlm);
  r.field("ablate_mim", c.ablate_mim);
  r.finish();
}

inline void from_json_checked(const json& j, EvalConfig& c, const std::string& path) {
  cfg_detail::Reader r(j, path);
  r.field("k_list", c.k_list);
  r.field("folds", c.folds);
  r.field("threshold_step", c.threshold_step);
  r.field("eval_batch", c.eval_batch);
  r.finish();
}

inline void from_json_checked(const json& j, RunConfig& c, const std::string& path = "") {
  cfg_detail::Reader r(j, path);
  r.field("seed", c.seed);
  r.field("out_dir", c.out_dir);
  from_json_checked(r.subobject("records"), c.records, "records");
  from_json_checked(r.subobject("augment"), c.augment, "augment");
  from_json_checked(r.subobject("model"), c.model, "model");
  from_json_checked(r.subobject("loss_weights"), c.loss_weights, "loss_weights");
  from_json_checked(r.subobject("train"), c.train, "train");
  from_json_checked(r.subobject("eval"), c.eval, "eval");
  r.finish();
}

inline json to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  j["records"] = {{"input_size", c.records.input_size},
                  {"resize_shorter", c.records.resize_shorter},
                  {"truncate_len", c.records.truncate_len},
                  {"image_format", c.records.image_format},
                  {"images_dir", c.records.images_dir},
                  {"vocab_path", c.records.vocab_path}};
  j["augment"] = {{"max_rotation_deg", c.augment.max_rotation_deg},
                  {"max_shear_deg", c.augment.max_shear_deg},
                  {"max_translate_frac", c.augment.max_translate_frac},
                  {"scale_lo", c.augment.scale_lo},
                  {"scale_hi", c.augment.scale_hi},
                  {"brightness_lo", c.augment.brightness_lo},
                  {"brightness_hi", c.augment.brightness_hi},
                  {"contrast_lo", c.augment.contrast_lo},
                  {"contrast_hi", c.augment.contrast_hi},
                  {"shuffle_sentences", c.augment.shuffle_sentences}};
  j["model"] = {{"image_size", c.model.image_size},
                {"patch", c.model.patch},
                {"d_vision", c.model.d_vision},
                {"blocks_vision", c.model.blocks_vision},
                {"heads_vision", c.model.heads_vision},
                {"d_language", c.model.d_language},
                {"blocks_language", c.model.blocks_language},
                {"heads_language", c.model.heads_language},
                {"mlp_ratio", c.model.mlp_ratio},
                {"adapter_ratio", c.model.adapter_ratio},
                {"vocab_size", c.model.vocab_size},
                {"max_text_len", c.model.max_text_len},
                {"d_global", c.model.d_global},
                {"d_local", c.model.d_local},
                {"decoder_dim", c.model.decoder_dim},
                {"decoder_blocks", c.model.decoder_blocks},
                {"decoder_heads", c.model.decoder_heads},
                {"mim_target_scale", c.model.mim_target_scale},
                {"image_mask_ratio", c.model.image_mask_ratio},
                {"report_mask_ratio", c.model.report_mask_ratio},
                {"tau_attn", c.model.tau_attn},
                {"tau_local", c.model.tau_local},
                {"tau_global_init", c.model.tau_global_init},
                {"local_pool", c.model.local_pool},
                {"local_attention", c.model.local_attention}};
  j["loss_weights"] = {{"lambda1", c.loss_weights.lambda1},
                       {"lambda2", c.loss_weights.lambda2},
                       {"lambda3", c.loss_weights.lambda3}};
  j["train"] = {{"batch_size", c.train.batch_size},
                {"peak_lr", c.train.peak_lr},
                {"weight_decay", c.train.weight_decay},
                {"beta1", c.train.beta1},
                {"beta2", c.train.beta2},
                {"adam_eps", c.train.adam_eps},
                {"warmup_steps", c.train.warmup_steps},
                {"max_epochs", c.train.max_epochs},
                {"patience", c.train.patience},
                {"max_steps", c.train.max_steps},
                {"val_fraction", c.train.val_fraction},
                {"ablate_temporal", c.train.ablate_temporal},
                {"ablate_multiview", c.train.ablate_multiview},
                {"ablate_local", c.train.ablate_local},
                {"ablate_mlm", c.train.ablate_mlm},
                {"ablate_mim", c.train.ablate_mim}};
  j["eval"] = {{"k_list", c.eval.k_list},
               {"folds", c.eval.folds},
               {"threshold_step", c.eval.threshold_step},
               {"eval_batch", c.eval.eval_batch}};
  return j;
}

inline std::string config_hash(const RunConfig& c) { return fnv1a_hex(to_json(c).dump()); }

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  RunConfig c;
  from_json_checked(j, c);
  c.validate();
  return c;
}

// Applies a single "section.key=value" override onto a JSON config tree.
inline void apply_override(json& j, const std::string& spec) {
  auto eq = spec.find('=');
  if (eq == std::string::npos) throw ConfigError("override must be key=value: " + spec);
  std::string keypath = spec.substr(0, eq);
  std::string value = spec.substr(eq + 1);
  json* cur = &j;
  std::size_t start = 0;
  while (true) {
    auto dot = keypath.find('.', start);
    std::string key = keypath.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("bad override key: " + keypath);
    if (dot == std::string::npos) {
      json parsed;
      try {
        parsed = json::parse(value);
      } catch (...) {
        parsed = value;  // unquoted strings
      }
      (*cur)[key] = parsed;
      break;
    }
    cur = &(*cur)[key];
    start = dot + 1;
  }
}

}  // namespace vlalign
