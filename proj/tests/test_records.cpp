#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <set>
#include <sstream>

#include "test_util.hpp"

using namespace vlalign;
using Catch::Approx;

namespace {

// Deterministic image per image_id: constant gray level.
Tensor fake_image(const StudyMeta& m, long size = 32) {
  double level = 0.1 + 0.05 * static_cast<double>(m.image_id.back() - '0');
  return Tensor::full({size, size}, level);
}

RecordConfig small_record_config() {
  RecordConfig cfg;
  cfg.input_size = 32;
  cfg.resize_shorter = 36;
  cfg.truncate_len = 32;
  return cfg;
}

Vocab tiny_vocab() {
  return Vocab({"[CLS]", "[MASK]", "[UNK]", "[PAD]", ".", "the", "lungs", "are", "clear",
                "no", "change", "stable", "effusion"});
}

// 6-row, 3-subject fixture:
//   subject a: two frontal-only studies (second links to the first)
//   subject b: one study with frontal + lateral
//   subject c: two rows with undefined views (excluded entirely)
const char* kFixtureManifest =
    "subject_id,study_id,image_id,view,study_date,study_time,report_path\n"
    "a,s1,img1,FRONTAL,20230101,120000.0000,r1.txt\n"
    "a,s2,img2,FRONTAL,20230111,120000.0000,r2.txt\n"
    "b,s3,img3,FRONTAL,20230201,080000.0000,r3.txt\n"
    "b,s3,img4,LATERAL,20230201,080000.0000,r3.txt\n"
    "c,s4,img5,OTHER,20230301,090000.0000,r4.txt\n"
    "c,s4,img6,OTHER,20230301,091000.0000,r4.txt\n";

BuildResult build_fixture() {
  std::istringstream in(kFixtureManifest);
  ManifestParse mp = parse_manifest(in);
  REQUIRE(mp.rows.size() == 6);
  REQUIRE(mp.diagnostics.empty());
  return build_records(mp.rows, small_record_config(), tiny_vocab(),
                       [](const StudyMeta& m) { return fake_image(m); },
                       [](const std::string&) { return std::string("the lungs are clear ."); });
}

}  // namespace

TEST_CASE("manifest parsing validates header and rejects malformed rows") {
  std::istringstream missing("subject_id,study_id,image_id,view,study_date,study_time\n");
  REQUIRE_THROWS_WITH(parse_manifest(missing), Catch::Matchers::ContainsSubstring("report_path"));

  std::istringstream bad(
      "subject_id,study_id,image_id,view,study_date,study_time,report_path\n"
      "a,s1,i1,FRONTAL,2023011,120000,r.txt\n"    // 7-digit date
      "a,s2,i2,FRONTAL,20230102,12000,r.txt\n"    // 5-digit time
      "a,s3,i3,FRONTAL,20230103,120000.5,r.txt\n");
  ManifestParse mp = parse_manifest(bad);
  REQUIRE(mp.rows.size() == 1);
  REQUIRE(mp.diagnostics.size() == 2);
  REQUIRE_THAT(mp.diagnostics[0], Catch::Matchers::ContainsSubstring("malformed date/time"));
}

TEST_CASE("six-row fixture produces the hand-enumerated quaternions") {
  BuildResult res = build_fixture();

  REQUIRE(res.records.size() == 3);
  const Record& a1 = res.records[0];  // a_s1
  const Record& a2 = res.records[1];  // a_s2
  const Record& b1 = res.records[2];  // b_s3
  REQUIRE(a1.id == "a_s1");
  REQUIRE(a2.id == "a_s2");
  REQUIRE(b1.id == "b_s3");

  // subject a, study 1: frontal only, no prior
  REQUIRE(a1.present == std::array<bool, 4>{true, false, false, false});
  REQUIRE(a1.time_interval_days < 0);

  // subject a, study 2: prior frontal from study 1, 10 days earlier
  REQUIRE(a2.present == std::array<bool, 4>{true, false, true, false});
  REQUIRE(a2.time_interval_days == Approx(10.0));
  REQUIRE(max_abs_diff(a2.image(ViewTag::pf), a1.image(ViewTag::cf)) == 0.0);

  // subject b: frontal + lateral, single study
  REQUIRE(b1.present == std::array<bool, 4>{true, true, false, false});
  REQUIRE(b1.time_interval_days < 0);

  // zero-fill invariant on every absent view
  for (const Record& r : res.records)
    for (int v = 0; v < 4; ++v)
      if (!r.present[static_cast<std::size_t>(v)])
        REQUIRE(r.images[static_cast<std::size_t>(v)].max_abs() == 0.0);

  REQUIRE(res.stats.n_records == 3);
  REQUIRE(res.stats.frac_with_prior == Approx(1.0 / 3.0));
  REQUIRE(res.stats.frac_with_lateral == Approx(1.0 / 3.0));

  // stats consistency: frac * n equals the prior count
  long with_prior = 0;
  for (const Record& r : res.records)
    if (r.has(ViewTag::pf)) ++with_prior;
  REQUIRE(std::lround(res.stats.frac_with_prior * res.stats.n_records) == with_prior);

  // report tokens: [CLS] the lungs are clear .
  REQUIRE(a1.report_tokens == std::vector<long>{0, 5, 6, 7, 8, 4});
}

TEST_CASE("prior selection and ordering edge cases") {
  SECTION("multiple frontals in the prior study: first by image_id") {
    std::istringstream in(
        "subject_id,study_id,image_id,view,study_date,study_time,report_path\n"
        "a,s1,img9,FRONTAL,20230101,120000,r.txt\n"
        "a,s1,img2,FRONTAL,20230101,120000,r.txt\n"
        "a,s2,img5,FRONTAL,20230105,120000,r.txt\n");
    ManifestParse mp = parse_manifest(in);
    BuildResult res = build_records(mp.rows, small_record_config(), tiny_vocab(),
                                    [](const StudyMeta& m) { return fake_image(m); },
                                    [](const std::string&) { return std::string("stable ."); });
    REQUIRE(res.records.size() == 2);
    // img2 < img9 lexicographically, so both cf of s1 and pf of s2 use img2
    StudyMeta probe;
    probe.image_id = "img2";
    REQUIRE(max_abs_diff(res.records[1].image(ViewTag::pf), fake_image(probe)) == 0.0);
  }

  SECTION("timestamp ties break by study_id") {
    std::istringstream in(
        "subject_id,study_id,image_id,view,study_date,study_time,report_path\n"
        "a,sB,img1,FRONTAL,20230101,120000,r.txt\n"
        "a,sA,img2,FRONTAL,20230101,120000,r.txt\n");
    ManifestParse mp = parse_manifest(in);
    BuildResult res = build_records(mp.rows, small_record_config(), tiny_vocab(),
                                    [](const StudyMeta& m) { return fake_image(m); },
                                    [](const std::string&) { return std::string("stable ."); });
    REQUIRE(res.records.size() == 2);
    // sA sorts before sB, so sB carries a prior
    REQUIRE(res.records[0].id == "a_sA");
    REQUIRE_FALSE(res.records[0].has(ViewTag::pf));
    REQUIRE(res.records[1].id == "a_sB");
    REQUIRE(res.records[1].has(ViewTag::pf));
    REQUIRE(res.records[1].time_interval_days == Approx(0.0));
  }

  SECTION("empty corpus is an explicit error") {
    std::istringstream in(
        "subject_id,study_id,image_id,view,study_date,study_time,report_path\n"
        "a,s1,i1,OTHER,20230101,120000,r.txt\n");
    ManifestParse mp = parse_manifest(in);
    REQUIRE_THROWS_AS(build_records(mp.rows, small_record_config(), tiny_vocab(),
                                    [](const StudyMeta& m) { return fake_image(m); },
                                    [](const std::string&) { return std::string("x"); }),
                      EmptyCorpusError);
  }
}

TEST_CASE("linkage correctness against a brute-force oracle") {
  // Random manifest: 6 subjects, up to 6 studies each, frontal images
  // guaranteed for most studies, laterals and undefined views mixed in.
  Rng rng(404);
  std::vector<StudyMeta> rows;
  for (int subj = 0; subj < 6; ++subj) {
    long n_studies = 1 + static_cast<long>(rng.randint(6));
    for (long st = 0; st < n_studies; ++st) {
      StudyMeta m;
      m.subject_id = "p" + std::to_string(subj);
      m.study_id = "s" + std::to_string(st);
      m.image_id = "f" + std::to_string(subj * 100 + st);
      m.view = rng.bernoulli(0.8) ? View::FRONTAL : View::OTHER;
      m.date_days = 19000 + static_cast<long>(rng.randint(200));
      m.time_sec = static_cast<double>(rng.randint(86400));
      m.report_path = "r.txt";
      rows.push_back(m);
      if (rng.bernoulli(0.5)) {
        StudyMeta lat = m;
        lat.image_id = "l" + std::to_string(subj * 100 + st);
        lat.view = View::LATERAL;
        rows.push_back(lat);
      }
    }
  }
  BuildResult res = build_records(rows, small_record_config(), tiny_vocab(),
                                  [](const StudyMeta& m) { return fake_image(m); },
                                  [](const std::string&) { return std::string("stable ."); });

  // oracle: retained studies are those with a frontal row; the prior is
  // the latest strictly-earlier retained study of the same subject
  auto timestamp_of = [&](const std::string& subj, const std::string& study) {
    for (const auto& r : rows)
      if (r.subject_id == subj && r.study_id == study) return r.timestamp();
    return -1.0;
  };
  auto retained = [&](const std::string& subj, const std::string& study) {
    for (const auto& r : rows)
      if (r.subject_id == subj && r.study_id == study && r.view == View::FRONTAL) return true;
    return false;
  };
  REQUIRE(!res.records.empty());
  for (const Record& rec : res.records) {
    auto us = rec.id.find('_');
    std::string subj = rec.id.substr(0, us), study = rec.id.substr(us + 1);
    double ts = timestamp_of(subj, study);
    std::string best_study;
    double best_ts = -1.0;
    std::set<std::string> seen;
    for (const auto& r : rows) {
      if (r.subject_id != subj || r.study_id == study || !seen.insert(r.study_id).second) continue;
      if (!retained(subj, r.study_id)) continue;
      double pts = timestamp_of(subj, r.study_id);
      bool earlier = pts < ts || (pts == ts && r.study_id < study);
      if (earlier && (best_study.empty() || pts > best_ts || (pts == best_ts && r.study_id > best_study))) {
        best_study = r.study_id;
        best_ts = pts;
      }
    }
    REQUIRE(rec.has(ViewTag::pf) == !best_study.empty());
    if (rec.has(ViewTag::pf)) {
      REQUIRE(rec.time_interval_days >= 0.0);
      REQUIRE(rec.time_interval_days == Approx((ts - best_ts) / 86400.0));
    }
  }
}

TEST_CASE("augmentation contracts") {
  Rng gen(5);
  SynthConfig sc;
  sc.image_size = 32;
  auto records = make_synthetic_corpus(4, 2, gen, sc);
  Record rec = records[0];

  SECTION("identity config is bit-exact") {
    Rng rng(7);
    Record out = augment(rec, rng, AugmentConfig::identity(), 4, 32);
    for (int v = 0; v < 4; ++v)
      REQUIRE(max_abs_diff(out.images[static_cast<std::size_t>(v)],
                           rec.images[static_cast<std::size_t>(v)]) == 0.0);
    REQUIRE(out.report_tokens == rec.report_tokens);
  }

  SECTION("same seed twice gives identical outputs") {
    AugmentConfig cfg;
    Rng r1(7), r2(7);
    Record o1 = augment(rec, r1, cfg, 4, 32);
    Record o2 = augment(rec, r2, cfg, 4, 32);
    for (int v = 0; v < 4; ++v)
      REQUIRE(max_abs_diff(o1.images[static_cast<std::size_t>(v)],
                           o2.images[static_cast<std::size_t>(v)]) == 0.0);
    REQUIRE(o1.report_tokens == o2.report_tokens);
  }

  SECTION("pixels stay in [0,1] and absent views stay zero") {
    AugmentConfig cfg;
    Rng rng(9);
    Record out = augment(rec, rng, cfg, 4, 32);
    for (int v = 0; v < 4; ++v) {
      const Tensor& img = out.images[static_cast<std::size_t>(v)];
      if (!out.present[static_cast<std::size_t>(v)]) {
        REQUIRE(img.max_abs() == 0.0);
        continue;
      }
      for (long i = 0; i < img.numel(); ++i) REQUIRE((img[i] >= 0.0 && img[i] <= 1.0));
    }
  }

  SECTION("sentence shuffle is the seeded permutation of sentence segments") {
    // record with a degenerate (all-zero) cf view: no image draws consumed
    Record r;
    r.images = {Tensor({8, 8}), Tensor({8, 8}), Tensor({8, 8}), Tensor({8, 8})};
    r.present = {true, false, false, false};
    // [CLS] A A . B . C C C .   with '.' = 4
    r.report_tokens = {0, 10, 10, 4, 11, 4, 12, 12, 12, 4};

    AugmentConfig cfg = AugmentConfig::identity();
    cfg.shuffle_sentences = true;
    std::vector<std::string> warnings;
    Rng rng(3);
    Record out = augment(r, rng, cfg, 4, 32, &warnings);
    REQUIRE(warnings.size() == 1);

    // independent Fisher-Yates oracle over the three segments
    std::vector<std::vector<long>> segs{{10, 10, 4}, {11, 4}, {12, 12, 12, 4}};
    Rng oracle_rng(3);
    for (std::size_t i = segs.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(oracle_rng.randint(i));
      std::swap(segs[i - 1], segs[j]);
    }
    std::vector<long> expect{0};
    for (const auto& s : segs)
      for (long id : s) expect.push_back(id);
    REQUIRE(out.report_tokens == expect);

    // permutation preserves the token multiset
    std::vector<long> a = out.report_tokens, b = r.report_tokens;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    REQUIRE(a == b);
  }
}

TEST_CASE("synthetic corpus statistics and determinism") {
  SECTION("n equal to n_classes with balanced draw covers every class") {
    Rng rng(0);
    SynthConfig sc;
    sc.balanced = true;
    auto recs = make_synthetic_corpus(8, 8, rng, sc);
    REQUIRE(recs.size() == 8);
    std::set<long> classes;
    for (const auto& r : recs) classes.insert(r.label);
    REQUIRE(classes.size() == 8);
  }

  SECTION("frozen seed-0 statistics for n=200, 5 classes") {
    Rng rng(0);
    auto recs = make_synthetic_corpus(200, 5, rng);
    REQUIRE(recs.size() == 200);
    std::array<long, 5> counts{};
    long with_prior = 0;
    for (const auto& r : recs) {
      ++counts[static_cast<std::size_t>(r.label)];
      if (r.has(ViewTag::pf)) ++with_prior;
    }
    for (long c : counts) REQUIRE((c > 20 && c < 60));  // multinomial around 40
    double frac = static_cast<double>(with_prior) / 200.0;
    REQUIRE((frac >= 0.65 && frac <= 0.85));
    for (const auto& r : recs)
      for (int v = 0; v < 4; ++v)
        if (!r.present[static_cast<std::size_t>(v)])
          REQUIRE(r.images[static_cast<std::size_t>(v)].max_abs() == 0.0);
  }

  SECTION("determinism and capacity error") {
    Rng a(12), b(12);
    auto ra = make_synthetic_corpus(10, 3, a);
    auto rb = make_synthetic_corpus(10, 3, b);
    for (std::size_t i = 0; i < ra.size(); ++i) {
      REQUIRE(ra[i].report_tokens == rb[i].report_tokens);
      REQUIRE(ra[i].label == rb[i].label);
      REQUIRE(max_abs_diff(ra[i].image(ViewTag::cf), rb[i].image(ViewTag::cf)) == 0.0);
    }
    Rng c(0);
    REQUIRE_THROWS_AS(make_synthetic_corpus(200, 100, c), ConfigError);
    REQUIRE_THROWS_AS(make_synthetic_corpus(1, 2, c), ConfigError);
  }
}

TEST_CASE("record store round trip") {
  namespace fs = std::filesystem;
  Rng rng(21);
  SynthConfig sc;
  sc.image_size = 16;
  auto recs = make_synthetic_corpus(6, 3, rng, sc);
  CorpusStats stats = compute_corpus_stats(recs);

  for (const std::string& format : {std::string("pgm"), std::string("raw")}) {
    fs::path dir = fs::temp_directory_path() / ("vlalign_store_" + format);
    fs::remove_all(dir);
    save_record_store(recs, stats, dir.string(), format);
    auto loaded = load_record_store(dir.string());
    REQUIRE(loaded.size() == recs.size());
    double tol = format == "raw" ? 1e-7 : 1.0 / 65535.0;
    for (std::size_t i = 0; i < recs.size(); ++i) {
      REQUIRE(loaded[i].id == recs[i].id);
      REQUIRE(loaded[i].present == recs[i].present);
      REQUIRE(loaded[i].report_tokens == recs[i].report_tokens);
      REQUIRE(loaded[i].label == recs[i].label);
      for (int v = 0; v < 4; ++v)
        REQUIRE(max_abs_diff(loaded[i].images[static_cast<std::size_t>(v)],
                             recs[i].images[static_cast<std::size_t>(v)]) <= tol);
    }
    CorpusStats s2 = load_corpus_stats(dir.string());
    REQUIRE(s2.n_records == stats.n_records);
    REQUIRE(s2.frac_with_prior == Approx(stats.frac_with_prior));
    long bin_sum = 0;
    for (long c : s2.interval_counts) bin_sum += c;
    long with_prior = 0;
    for (const auto& r : recs)
      if (r.has(ViewTag::pf)) ++with_prior;
    REQUIRE(bin_sum == with_prior);
    fs::remove_all(dir);
  }
}

TEST_CASE("image preprocessing resizes shorter edge and center-crops") {
  RecordConfig cfg;
  cfg.input_size = 32;
  cfg.resize_shorter = 36;
  Tensor tall({60, 40});
  for (long i = 0; i < tall.numel(); ++i) tall[i] = static_cast<double>(i % 97) / 97.0;
  Tensor out = preprocess_image(tall, cfg);
  REQUIRE(out.shape() == std::vector<long>{32, 32});
  Tensor exact({32, 32});
  REQUIRE(max_abs_diff(preprocess_image(exact, cfg), exact) == 0.0);
}
