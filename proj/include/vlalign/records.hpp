#pragma once

#include <array>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "vlalign/language_processor.hpp"

// Temporal-multiview record construction: manifest ingestion, prior-study
// linkage, augmentation, synthetic corpora, and the on-disk record store.

namespace vlalign {

enum class ViewTag : int { cf = 0, cl = 1, pf = 2, pl = 3 };
constexpr std::array<const char*, 4> kViewNames{"cf", "cl", "pf", "pl"};

enum class View { FRONTAL, LATERAL, OTHER };

struct StudyMeta {
  std::string subject_id;
  std::string study_id;
  std::string image_id;
  View view = View::OTHER;
  long date_days = 0;     // days since 1970-01-01
  double time_sec = 0.0;  // seconds within the day
  std::string report_path;

  double timestamp() const { return static_cast<double>(date_days) * 86400.0 + time_sec; }
};

struct Record {
  std::string id;
  std::array<Tensor, 4> images;  // H x W grids in [0,1]; zeros when absent
  std::array<bool, 4> present{false, false, false, false};
  std::vector<long> report_tokens;        // [CLS] first
  double time_interval_days = -1.0;       // < 0 means absent
  long label = -1;                        // synthetic class, -1 if unknown

  const Tensor& image(ViewTag v) const { return images[static_cast<std::size_t>(v)]; }
  Tensor& image(ViewTag v) { return images[static_cast<std::size_t>(v)]; }
  bool has(ViewTag v) const { return present[static_cast<std::size_t>(v)]; }
};

struct CorpusStats {
  long n_records = 0;
  double frac_with_prior = 0.0;
  double frac_with_lateral = 0.0;
  std::vector<double> interval_bin_edges;  // ascending; bin i = [e[i], e[i+1])
  std::vector<long> interval_counts;
};

struct EmptyCorpusError : std::runtime_error {
  explicit EmptyCorpusError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---- date/time ----

// days since 1970-01-01 (civil calendar)
inline long days_from_civil(long y, long m, long d) {
  y -= m <= 2;
  long era = (y >= 0 ? y : y - 399) / 400;
  long yoe = y - era * 400;
  long doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  long doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + doe - 719468;
}

inline std::optional<long> parse_study_date(const std::string& s) {
  if (s.size() != 8 || !std::all_of(s.begin(), s.end(), [](char c) { return std::isdigit((unsigned char)c); }))
    return std::nullopt;
  long y = std::stol(s.substr(0, 4));
  long m = std::stol(s.substr(4, 2));
  long d = std::stol(s.substr(6, 2));
  if (m < 1 || m > 12 || d < 1 || d > 31) return std::nullopt;
  return days_from_civil(y, m, d);
}

inline std::optional<double> parse_study_time(const std::string& s) {
  // HHMMSS or HHMMSS.ffff
  std::string intpart = s, frac;
  auto dot = s.find('.');
  if (dot != std::string::npos) {
    intpart = s.substr(0, dot);
    frac = s.substr(dot + 1);
  }
  if (intpart.size() != 6 ||
      !std::all_of(intpart.begin(), intpart.end(), [](char c) { return std::isdigit((unsigned char)c); }))
    return std::nullopt;
  if (!frac.empty() &&
      !std::all_of(frac.begin(), frac.end(), [](char c) { return std::isdigit((unsigned char)c); }))
    return std::nullopt;
  long hh = std::stol(intpart.substr(0, 2));
  long mm = std::stol(intpart.substr(2, 2));
  long ss = std::stol(intpart.substr(4, 2));
  if (hh > 23 || mm > 59 || ss > 60) return std::nullopt;
  double t = hh * 3600.0 + mm * 60.0 + ss;
  if (!frac.empty()) t += std::stod("0." + frac);
  return t;
}

// ---- manifest ----

struct ManifestParse {
  std::vector<StudyMeta> rows;
  std::vector<std::string> diagnostics;  // rejected rows, one message each
};

// Delimited text (comma or tab), header row required:
// subject_id,study_id,image_id,view,study_date,study_time,report_path
inline ManifestParse parse_manifest(std::istream& in) {
  ManifestParse out;
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("manifest is empty (missing header)");
  char delim = line.find('\t') != std::string::npos ? '\t' : ',';
  auto split = [delim](const std::string& s) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : s) {
      if (c == delim) {
        fields.push_back(cur);
        cur.clear();
      } else if (c != '\r') {
        cur.push_back(c);
      }
    }
    fields.push_back(cur);
    return fields;
  };
  const std::vector<std::string> expected{"subject_id", "study_id", "image_id", "view",
                                          "study_date", "study_time", "report_path"};
  auto header = split(line);
  for (const auto& col : expected)
    if (std::find(header.begin(), header.end(), col) == header.end())
      throw ConfigError("manifest missing column: " + col);
  std::vector<std::size_t> idx;
  for (const auto& col : expected)
    idx.push_back(static_cast<std::size_t>(
        std::find(header.begin(), header.end(), col) - header.begin()));

  long lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto fields = split(line);
    if (fields.size() < header.size()) {
      out.diagnostics.push_back("line " + std::to_string(lineno) + ": expected " +
                                std::to_string(header.size()) + " fields, got " +
                                std::to_string(fields.size()));
      continue;
    }
    StudyMeta m;
    m.subject_id = fields[idx[0]];
    m.study_id = fields[idx[1]];
    m.image_id = fields[idx[2]];
    std::string view = fields[idx[3]];
    if (view == "FRONTAL") m.view = View::FRONTAL;
    else if (view == "LATERAL") m.view = View::LATERAL;
    else m.view = View::OTHER;
    auto date = parse_study_date(fields[idx[4]]);
    auto time = parse_study_time(fields[idx[5]]);
    if (!date || !time) {
      out.diagnostics.push_back("line " + std::to_string(lineno) + ": malformed date/time '" +
                                fields[idx[4]] + " " + fields[idx[5]] + "'");
      continue;
    }
    m.date_days = *date;
    m.time_sec = *time;
    m.report_path = fields[idx[6]];
    out.rows.push_back(std::move(m));
  }
  return out;
}

inline ManifestParse parse_manifest_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open manifest: " + path);
  return parse_manifest(in);
}

// ---- image utilities ----

inline Tensor bilinear_resize(const Tensor& img, long H2, long W2) {
  long H = img.dim(0), W = img.dim(1);
  Tensor out({H2, W2});
  for (long y = 0; y < H2; ++y) {
    double sy = (static_cast<double>(y) + 0.5) * static_cast<double>(H) / static_cast<double>(H2) - 0.5;
    long y0 = static_cast<long>(std::floor(sy));
    double fy = sy - static_cast<double>(y0);
    long y0c = std::clamp(y0, 0L, H - 1), y1c = std::clamp(y0 + 1, 0L, H - 1);
    for (long x = 0; x < W2; ++x) {
      double sx = (static_cast<double>(x) + 0.5) * static_cast<double>(W) / static_cast<double>(W2) - 0.5;
      long x0 = static_cast<long>(std::floor(sx));
      double fx = sx - static_cast<double>(x0);
      long x0c = std::clamp(x0, 0L, W - 1), x1c = std::clamp(x0 + 1, 0L, W - 1);
      out.at(y, x) = (1 - fy) * ((1 - fx) * img.at(y0c, x0c) + fx * img.at(y0c, x1c)) +
                     fy * ((1 - fx) * img.at(y1c, x0c) + fx * img.at(y1c, x1c));
    }
  }
  return out;
}

inline Tensor center_crop(const Tensor& img, long size) {
  long H = img.dim(0), W = img.dim(1);
  check_shape(H >= size && W >= size, "center_crop: image smaller than crop");
  long oy = (H - size) / 2, ox = (W - size) / 2;
  Tensor out({size, size});
  for (long y = 0; y < size; ++y)
    for (long x = 0; x < size; ++x) out.at(y, x) = img.at(oy + y, ox + x);
  return out;
}

// Resize shorter edge, then center crop to the configured input size.
inline Tensor preprocess_image(const Tensor& img, const RecordConfig& cfg) {
  long H = img.dim(0), W = img.dim(1);
  if (H == cfg.input_size && W == cfg.input_size) return img;
  double scale = static_cast<double>(cfg.resize_shorter) / static_cast<double>(std::min(H, W));
  long H2 = std::max(cfg.input_size, static_cast<long>(std::lround(H * scale)));
  long W2 = std::max(cfg.input_size, static_cast<long>(std::lround(W * scale)));
  return center_crop(bilinear_resize(img, H2, W2), cfg.input_size);
}

// ---- build_records ----

using ImageLoader = std::function<Tensor(const StudyMeta&)>;
using ReportReader = std::function<std::string(const std::string&)>;

struct BuildResult {
  std::vector<Record> records;
  CorpusStats stats;
  std::vector<std::string> diagnostics;
};

inline std::vector<double> default_interval_bin_edges() {
  return {0, 1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 1e9};
}

inline CorpusStats compute_corpus_stats(const std::vector<Record>& records) {
  CorpusStats s;
  s.n_records = static_cast<long>(records.size());
  s.interval_bin_edges = default_interval_bin_edges();
  s.interval_counts.assign(s.interval_bin_edges.size() - 1, 0);
  long with_prior = 0, with_lateral = 0;
  for (const auto& r : records) {
    if (r.has(ViewTag::pf)) {
      ++with_prior;
      double t = std::max(0.0, r.time_interval_days);
      for (std::size_t i = 0; i + 1 < s.interval_bin_edges.size(); ++i)
        if (t >= s.interval_bin_edges[i] && t < s.interval_bin_edges[i + 1]) {
          ++s.interval_counts[i];
          break;
        }
    }
    if (r.has(ViewTag::cl)) ++with_lateral;
  }
  if (s.n_records > 0) {
    s.frac_with_prior = static_cast<double>(with_prior) / static_cast<double>(s.n_records);
    s.frac_with_lateral = static_cast<double>(with_lateral) / static_cast<double>(s.n_records);
  }
  return s;
}

// Groups manifest rows into studies, orders them per subject by
// (date, time, study_id), keeps one frontal (first by image_id) and one
// lateral if available, and links each study to the subject's most
// recent strictly-earlier retained study for the prior views.
inline BuildResult build_records(const std::vector<StudyMeta>& manifest, const RecordConfig& cfg,
                                 const Vocab& vocab, const ImageLoader& load_image,
                                 const ReportReader& read_report) {
  BuildResult out;

  struct Study {
    std::string subject, study;
    double ts = 0.0;
    const StudyMeta* frontal = nullptr;
    const StudyMeta* lateral = nullptr;
    std::string report_path;
  };
  std::map<std::pair<std::string, std::string>, Study> studies;
  for (const auto& row : manifest) {
    if (row.view == View::OTHER) continue;  // undefined views are excluded
    auto key = std::make_pair(row.subject_id, row.study_id);
    Study& st = studies[key];
    st.subject = row.subject_id;
    st.study = row.study_id;
    st.ts = row.timestamp();
    st.report_path = row.report_path;
    if (row.view == View::FRONTAL) {
      if (!st.frontal || row.image_id < st.frontal->image_id) st.frontal = &row;
    } else {
      if (!st.lateral || row.image_id < st.lateral->image_id) st.lateral = &row;
    }
  }

  // retained studies per subject, time-ordered (ties by study_id)
  std::map<std::string, std::vector<const Study*>> per_subject;
  for (auto& [key, st] : studies) {
    if (!st.frontal) {
      out.diagnostics.push_back("study " + st.subject + "/" + st.study + ": no frontal image, skipped");
      continue;
    }
    per_subject[st.subject].push_back(&st);
  }
  for (auto& [subject, vec] : per_subject)
    std::sort(vec.begin(), vec.end(), [](const Study* a, const Study* b) {
      if (a->ts != b->ts) return a->ts < b->ts;
      return a->study < b->study;
    });

  for (auto& [subject, vec] : per_subject) {
    for (std::size_t i = 0; i < vec.size(); ++i) {
      const Study* cur = vec[i];
      const Study* prior = i > 0 ? vec[i - 1] : nullptr;
      Record r;
      r.id = cur->subject + "_" + cur->study;
      for (auto& img : r.images) img = Tensor({cfg.input_size, cfg.input_size});
      try {
        r.image(ViewTag::cf) = preprocess_image(load_image(*cur->frontal), cfg);
        r.present[static_cast<std::size_t>(ViewTag::cf)] = true;
        if (cur->lateral) {
          r.image(ViewTag::cl) = preprocess_image(load_image(*cur->lateral), cfg);
          r.present[static_cast<std::size_t>(ViewTag::cl)] = true;
        }
        if (prior) {
          r.image(ViewTag::pf) = preprocess_image(load_image(*prior->frontal), cfg);
          r.present[static_cast<std::size_t>(ViewTag::pf)] = true;
          if (prior->lateral) {
            r.image(ViewTag::pl) = preprocess_image(load_image(*prior->lateral), cfg);
            r.present[static_cast<std::size_t>(ViewTag::pl)] = true;
          }
          r.time_interval_days = (cur->ts - prior->ts) / 86400.0;
        }
        r.report_tokens = tokenize(read_report(cur->report_path), vocab, cfg.truncate_len).ids;
      } catch (const std::exception& e) {
        out.diagnostics.push_back("study " + r.id + ": " + e.what() + ", skipped");
        continue;
      }
      out.records.push_back(std::move(r));
    }
  }

  if (out.records.empty()) throw EmptyCorpusError("record construction produced an empty corpus");
  std::sort(out.records.begin(), out.records.end(),
            [](const Record& a, const Record& b) { return a.id < b.id; });
  out.stats = compute_corpus_stats(out.records);
  return out;
}

// ---- augmentation ----

namespace aug_detail {

struct Affine {
  // forward mapping coefficients: [a b c; d e f]
  double a = 1, b = 0, c = 0, d = 0, e = 1, f = 0;

  bool is_identity() const {
    return a == 1 && b == 0 && c == 0 && d == 0 && e == 1 && f == 0;
  }

  Affine inverse() const {
    double det = a * e - b * d;
    Affine inv;
    inv.a = e / det;
    inv.b = -b / det;
    inv.d = -d / det;
    inv.e = a / det;
    inv.c = -(inv.a * c + inv.b * f);
    inv.f = -(inv.d * c + inv.e * f);
    return inv;
  }
};

inline Tensor warp_bilinear(const Tensor& img, const Affine& fwd) {
  long H = img.dim(0), W = img.dim(1);
  Affine inv = fwd.inverse();
  Tensor out({H, W});
  for (long y = 0; y < H; ++y)
    for (long x = 0; x < W; ++x) {
      double sx = inv.a * x + inv.b * y + inv.c;
      double sy = inv.d * x + inv.e * y + inv.f;
      long x0 = static_cast<long>(std::floor(sx));
      long y0 = static_cast<long>(std::floor(sy));
      double fx = sx - x0, fy = sy - y0;
      auto sample = [&](long yy, long xx) -> double {
        return (yy < 0 || yy >= H || xx < 0 || xx >= W) ? 0.0 : img.at(yy, xx);
      };
      out.at(y, x) = (1 - fy) * ((1 - fx) * sample(y0, x0) + fx * sample(y0, x0 + 1)) +
                     fy * ((1 - fx) * sample(y0 + 1, x0) + fx * sample(y0 + 1, x0 + 1));
    }
  return out;
}

}  // namespace aug_detail

// Random affine + brightness/contrast per present view, then a seeded
// sentence-level shuffle of the report tokens. Same seed, same output.
inline Record augment(const Record& rec, Rng& rng, const AugmentConfig& cfg, long period_token_id,
                      long truncate_len, std::vector<std::string>* warnings = nullptr) {
  Record out = rec;
  for (int v = 0; v < 4; ++v) {
    if (!rec.present[static_cast<std::size_t>(v)]) continue;
    const Tensor& img = rec.images[static_cast<std::size_t>(v)];
    if (img.max_abs() == 0.0) {
      if (warnings)
        warnings->push_back(std::string("degenerate all-zero view ") + kViewNames[static_cast<std::size_t>(v)]);
      continue;
    }
    double rot = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg) * M_PI / 180.0;
    double shear = rng.uniform(-cfg.max_shear_deg, cfg.max_shear_deg) * M_PI / 180.0;
    double tx = rng.uniform(-cfg.max_translate_frac, cfg.max_translate_frac) * img.dim(1);
    double ty = rng.uniform(-cfg.max_translate_frac, cfg.max_translate_frac) * img.dim(0);
    double sc = rng.uniform(cfg.scale_lo, cfg.scale_hi);
    double brightness = rng.uniform(cfg.brightness_lo, cfg.brightness_hi);
    double contrast = rng.uniform(cfg.contrast_lo, cfg.contrast_hi);

    Tensor work = img;
    bool geo_identity = rot == 0.0 && shear == 0.0 && tx == 0.0 && ty == 0.0 && sc == 1.0;
    if (!geo_identity) {
      double cx = (img.dim(1) - 1) / 2.0, cy = (img.dim(0) - 1) / 2.0;
      double cosr = std::cos(rot), sinr = std::sin(rot), tsh = std::tan(shear);
      // rotation * shear * scale about center, then translation
      aug_detail::Affine m;
      double r00 = cosr, r01 = -sinr, r10 = sinr, r11 = cosr;
      double s00 = 1.0, s01 = tsh, s10 = 0.0, s11 = 1.0;
      double a00 = (r00 * s00 + r01 * s10) * sc, a01 = (r00 * s01 + r01 * s11) * sc;
      double a10 = (r10 * s00 + r11 * s10) * sc, a11 = (r10 * s01 + r11 * s11) * sc;
      m.a = a00;
      m.b = a01;
      m.d = a10;
      m.e = a11;
      m.c = cx - a00 * cx - a01 * cy + tx;
      m.f = cy - a10 * cx - a11 * cy + ty;
      work = aug_detail::warp_bilinear(work, m);
    }
    if (brightness != 1.0) {
      for (long i = 0; i < work.numel(); ++i) work[i] *= brightness;
    }
    if (contrast != 1.0) {
      double mean = 0.0;
      for (long i = 0; i < work.numel(); ++i) mean += work[i];
      mean /= static_cast<double>(work.numel());
      for (long i = 0; i < work.numel(); ++i) work[i] = mean + (work[i] - mean) * contrast;
    }
    for (long i = 0; i < work.numel(); ++i) work[i] = std::clamp(work[i], 0.0, 1.0);
    out.images[static_cast<std::size_t>(v)] = std::move(work);
  }

  if (cfg.shuffle_sentences && out.report_tokens.size() > 1) {
    // sentences end after each period token; [CLS] stays in front
    std::vector<std::vector<long>> sentences;
    std::vector<long> cur;
    for (std::size_t i = 1; i < out.report_tokens.size(); ++i) {
      cur.push_back(out.report_tokens[i]);
      if (period_token_id >= 0 && out.report_tokens[i] == period_token_id) {
        sentences.push_back(std::move(cur));
        cur.clear();
      }
    }
    if (!cur.empty()) sentences.push_back(std::move(cur));
    if (sentences.size() > 1) {
      rng.shuffle(sentences);
      std::vector<long> ids{kClsId};
      for (const auto& s : sentences)
        for (long id : s) ids.push_back(id);
      if (static_cast<long>(ids.size()) > truncate_len) ids.resize(static_cast<std::size_t>(truncate_len));
      out.report_tokens = std::move(ids);
    }
  }
  return out;
}

// ---- synthetic corpus ----

struct SynthConfig {
  long image_size = 32;
  long truncate_len = 32;
  double pattern_strength = 0.35;
  double noise_strength = 0.30;
  double prior_frac = 0.75;
  double lateral_frac = 0.5;
  bool balanced = false;  // exact round-robin class assignment
};

constexpr long kMaxSyntheticClasses = 64;

inline const std::vector<std::string>& synthetic_filler_words() {
  static const std::vector<std::string> words{
      "the",  "is",     "are",   "seen",  "noted", "stable", "mild", "focal",
      "left", "right",  "upper", "lower", "lung",  "zone",   "with", "without",
      "chest", "study", "image", "again", "new",   "old",    "small", "large"};
  return words;
}

inline std::string synthetic_marker_word(long cls, long j) {
  return "finding" + std::to_string(cls) + static_cast<char>('a' + j);
}

inline Vocab make_synthetic_vocab(long n_classes) {
  if (n_classes > kMaxSyntheticClasses)
    throw ConfigError("n_classes " + std::to_string(n_classes) + " exceeds synthetic vocabulary capacity " +
                      std::to_string(kMaxSyntheticClasses));
  std::vector<std::string> tokens{"[CLS]", "[MASK]", "[UNK]", "[PAD]", "."};
  for (const auto& w : synthetic_filler_words()) tokens.push_back(w);
  for (long c = 0; c < n_classes; ++c)
    for (long j = 0; j < 3; ++j) tokens.push_back(synthetic_marker_word(c, j));
  return Vocab(std::move(tokens));
}

// Class-descriptive sentences; shared between report generation and the
// zero-shot prompt sets so the task is well-posed.
inline std::vector<std::string> synthetic_class_prompts(long cls) {
  const std::string m0 = synthetic_marker_word(cls, 0);
  const std::string m1 = synthetic_marker_word(cls, 1);
  const std::string m2 = synthetic_marker_word(cls, 2);
  return {
      m0 + " " + m1 + " is seen in the left lung zone with " + m2 + " .",
      "the study shows " + m0 + " " + m2 + " and stable " + m1 + " .",
  };
}

namespace synth_detail {

// Low-frequency planted pattern for (class, view family), unit RMS.
// Patterns depend only on the class index so that independently seeded
// corpora share class structure.
inline Tensor class_pattern(long cls, int family, long size) {
  std::uint64_t s = 0xC1A55000ULL + static_cast<std::uint64_t>(cls) * 2 + static_cast<std::uint64_t>(family);
  splitmix64(s);
  Rng rng(s);
  Tensor p({size, size});
  for (int k = 0; k < 3; ++k) {
    double amp = rng.normal();
    double fx = static_cast<double>(rng.randint(3) + (k == 0 ? 1 : 0));
    double fy = static_cast<double>(rng.randint(3) + (k == 0 ? 0 : 1));
    double phase = rng.uniform(0.0, 2.0 * M_PI);
    for (long y = 0; y < size; ++y)
      for (long x = 0; x < size; ++x)
        p.at(y, x) += amp * std::cos(2.0 * M_PI * (fx * x + fy * y) / static_cast<double>(size) + phase);
  }
  double rms = 0.0;
  for (long i = 0; i < p.numel(); ++i) rms += p[i] * p[i];
  rms = std::sqrt(rms / static_cast<double>(p.numel()));
  if (rms > 0)
    for (long i = 0; i < p.numel(); ++i) p[i] /= rms;
  return p;
}

inline Tensor synth_image(long cls, int family, const SynthConfig& cfg, Rng& rng) {
  Tensor img = class_pattern(cls, family, cfg.image_size);
  for (long i = 0; i < img.numel(); ++i) {
    double v = 0.5 + cfg.pattern_strength * img[i] + cfg.noise_strength * rng.normal();
    img[i] = std::clamp(v, 0.0, 1.0);
  }
  return img;
}

inline std::string synth_report(long cls, long n_classes, Rng& rng) {
  const auto& filler = synthetic_filler_words();
  auto prompts = synthetic_class_prompts(cls);
  std::ostringstream os;
  os << prompts[rng.randint(prompts.size())];
  os << " " << filler[rng.randint(filler.size())] << " " << filler[rng.randint(filler.size())] << " "
     << filler[rng.randint(filler.size())] << " .";
  os << " " << prompts[rng.randint(prompts.size())];
  (void)n_classes;
  return os.str();
}

}  // namespace synth_detail

// Desk-scale corpus with planted class structure. Roughly 75% of records
// carry a prior study and 50% a lateral view, mirroring the target
// corpus statistics.
inline std::vector<Record> make_synthetic_corpus(long n, long n_classes, Rng& rng,
                                                 const SynthConfig& cfg = SynthConfig()) {
  if (n_classes < 2) throw ConfigError("make_synthetic_corpus: n_classes must be >= 2");
  if (n < n_classes) throw ConfigError("make_synthetic_corpus: n must be >= n_classes");
  Vocab vocab = make_synthetic_vocab(n_classes);
  std::vector<Record> records;
  records.reserve(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) {
    long cls = cfg.balanced ? i % n_classes : static_cast<long>(rng.randint(static_cast<std::uint64_t>(n_classes)));
    Record r;
    r.id = "syn" + std::to_string(i);
    r.label = cls;
    for (auto& img : r.images) img = Tensor({cfg.image_size, cfg.image_size});
    r.image(ViewTag::cf) = synth_detail::synth_image(cls, 0, cfg, rng);
    r.present[static_cast<std::size_t>(ViewTag::cf)] = true;
    bool has_lateral = rng.bernoulli(cfg.lateral_frac);
    if (has_lateral) {
      r.image(ViewTag::cl) = synth_detail::synth_image(cls, 1, cfg, rng);
      r.present[static_cast<std::size_t>(ViewTag::cl)] = true;
    }
    if (rng.bernoulli(cfg.prior_frac)) {
      r.image(ViewTag::pf) = synth_detail::synth_image(cls, 0, cfg, rng);
      r.present[static_cast<std::size_t>(ViewTag::pf)] = true;
      if (rng.bernoulli(cfg.lateral_frac)) {
        r.image(ViewTag::pl) = synth_detail::synth_image(cls, 1, cfg, rng);
        r.present[static_cast<std::size_t>(ViewTag::pl)] = true;
      }
      r.time_interval_days = std::exp(rng.uniform(0.0, std::log(365.0)));
    }
    r.report_tokens = tokenize(synth_detail::synth_report(cls, n_classes, rng), vocab, cfg.truncate_len).ids;
    records.push_back(std::move(r));
  }
  return records;
}

// ---- PGM / raw image files ----

inline void write_pgm16(const Tensor& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write image: " + path);
  out << "P5\n" << img.dim(1) << " " << img.dim(0) << "\n65535\n";
  for (long i = 0; i < img.numel(); ++i) {
    double v = std::clamp(img[i], 0.0, 1.0);
    auto q = static_cast<std::uint16_t>(std::lround(v * 65535.0));
    unsigned char hi = static_cast<unsigned char>(q >> 8), lo = static_cast<unsigned char>(q & 0xff);
    out.put(static_cast<char>(hi));
    out.put(static_cast<char>(lo));
  }
}

inline Tensor read_pgm16(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open image: " + path);
  std::string magic;
  long w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P5" || w <= 0 || h <= 0) throw std::runtime_error("unsupported PGM: " + path);
  in.get();  // single whitespace after maxval
  Tensor img({h, w});
  if (maxval == 65535) {
    for (long i = 0; i < img.numel(); ++i) {
      int hi = in.get(), lo = in.get();
      img[i] = static_cast<double>((hi << 8) | lo) / 65535.0;
    }
  } else if (maxval == 255) {
    for (long i = 0; i < img.numel(); ++i) img[i] = static_cast<double>(in.get()) / 255.0;
  } else {
    throw std::runtime_error("unsupported PGM maxval in " + path);
  }
  if (!in) throw std::runtime_error("truncated PGM: " + path);
  return img;
}

inline void write_raw_f32(const Tensor& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write image: " + path);
  std::uint32_t dims[2] = {static_cast<std::uint32_t>(img.dim(0)), static_cast<std::uint32_t>(img.dim(1))};
  out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  for (long i = 0; i < img.numel(); ++i) {
    float f = static_cast<float>(img[i]);
    out.write(reinterpret_cast<const char*>(&f), sizeof(f));
  }
}

inline Tensor read_raw_f32(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open image: " + path);
  std::uint32_t dims[2];
  in.read(reinterpret_cast<char*>(dims), sizeof(dims));
  Tensor img({static_cast<long>(dims[0]), static_cast<long>(dims[1])});
  for (long i = 0; i < img.numel(); ++i) {
    float f = 0;
    in.read(reinterpret_cast<char*>(&f), sizeof(f));
    img[i] = f;
  }
  if (!in) throw std::runtime_error("truncated raw image: " + path);
  return img;
}

// ---- record store ----
// <dir>/store.json    image_format, image_size, n_records
// <dir>/index.jsonl   one record per line: id, presence, interval, label, tokens
// <dir>/images/       <id>_<tag>.(pgm|raw) for present views only
// <dir>/stats.json    corpus statistics

inline void save_record_store(const std::vector<Record>& records, const CorpusStats& stats,
                              const std::string& dir, const std::string& image_format = "pgm") {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  long size = records.empty() ? 0 : records.front().image(ViewTag::cf).dim(0);
  {
    json meta{{"image_format", image_format}, {"image_size", size}, {"n_records", records.size()}};
    std::ofstream out(fs::path(dir) / "store.json");
    out << meta.dump(2) << "\n";
  }
  {
    std::ofstream out(fs::path(dir) / "index.jsonl");
    for (const auto& r : records) {
      json line;
      line["id"] = r.id;
      line["present"] = {{"cf", r.has(ViewTag::cf)},
                         {"cl", r.has(ViewTag::cl)},
                         {"pf", r.has(ViewTag::pf)},
                         {"pl", r.has(ViewTag::pl)}};
      if (r.time_interval_days >= 0) line["interval_days"] = r.time_interval_days;
      else line["interval_days"] = nullptr;
      if (r.label >= 0) line["label"] = r.label;
      else line["label"] = nullptr;
      line["tokens"] = r.report_tokens;
      out << line.dump() << "\n";
    }
  }
  for (const auto& r : records)
    for (int v = 0; v < 4; ++v) {
      if (!r.present[static_cast<std::size_t>(v)]) continue;
      std::string name = r.id + "_" + kViewNames[static_cast<std::size_t>(v)];
      fs::path p = fs::path(dir) / "images" / name;
      if (image_format == "raw") write_raw_f32(r.images[static_cast<std::size_t>(v)], (p += ".raw").string());
      else write_pgm16(r.images[static_cast<std::size_t>(v)], (p += ".pgm").string());
    }
  {
    json s;
    s["n_records"] = stats.n_records;
    s["frac_with_prior"] = stats.frac_with_prior;
    s["frac_with_lateral"] = stats.frac_with_lateral;
    s["interval_bin_edges"] = stats.interval_bin_edges;
    s["interval_counts"] = stats.interval_counts;
    std::ofstream out(fs::path(dir) / "stats.json");
    out << s.dump(2) << "\n";
  }
}

inline std::vector<Record> load_record_store(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream metain(fs::path(dir) / "store.json");
  if (!metain) throw ConfigError("not a record store (missing store.json): " + dir);
  json meta = json::parse(metain);
  std::string format = meta.at("image_format").get<std::string>();
  long size = meta.at("image_size").get<long>();

  std::ifstream in(fs::path(dir) / "index.jsonl");
  if (!in) throw ConfigError("record store missing index.jsonl: " + dir);
  std::vector<Record> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    Record r;
    r.id = j.at("id").get<std::string>();
    const auto& pres = j.at("present");
    r.present = {pres.at("cf").get<bool>(), pres.at("cl").get<bool>(), pres.at("pf").get<bool>(),
                 pres.at("pl").get<bool>()};
    if (!j.at("interval_days").is_null()) r.time_interval_days = j.at("interval_days").get<double>();
    if (!j.at("label").is_null()) r.label = j.at("label").get<long>();
    r.report_tokens = j.at("tokens").get<std::vector<long>>();
    for (int v = 0; v < 4; ++v) {
      if (!r.present[static_cast<std::size_t>(v)]) {
        r.images[static_cast<std::size_t>(v)] = Tensor({size, size});
        continue;
      }
      std::string name = r.id + "_" + kViewNames[static_cast<std::size_t>(v)];
      fs::path p = fs::path(dir) / "images" / name;
      r.images[static_cast<std::size_t>(v)] =
          format == "raw" ? read_raw_f32((p += ".raw").string()) : read_pgm16((p += ".pgm").string());
    }
    records.push_back(std::move(r));
  }
  return records;
}

inline CorpusStats load_corpus_stats(const std::string& dir) {
  std::ifstream in(std::filesystem::path(dir) / "stats.json");
  if (!in) throw ConfigError("record store missing stats.json: " + dir);
  json j = json::parse(in);
  CorpusStats s;
  s.n_records = j.at("n_records").get<long>();
  s.frac_with_prior = j.at("frac_with_prior").get<double>();
  s.frac_with_lateral = j.at("frac_with_lateral").get<double>();
  s.interval_bin_edges = j.at("interval_bin_edges").get<std::vector<double>>();
  s.interval_counts = j.at("interval_counts").get<std::vector<long>>();
  return s;
}

}  // namespace vlalign
