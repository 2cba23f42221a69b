#include "voxebm/pipeline.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <boost/math/distributions/students_t.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <unordered_set>
#include <utility>

#include "json.hpp"
#include "voxebm/rng.hpp"

namespace voxebm {

namespace fs = std::filesystem;
using Json = nlohmann::json;

namespace {

std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  if (in.bad()) throw std::runtime_error("failed reading " + path.string());
  return text;
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out << text;
  if (!out.flush()) throw std::runtime_error("failed writing " + path.string());
}

// ---------------------------------------------------------------- config

[[noreturn]] void config_fail(const std::string& msg) {
  throw ConfigError("config: " + msg);
}

void check_keys(const Json& obj, const char* where,
                std::initializer_list<std::string_view> allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end()) {
      config_fail("unknown key \"" + it.key() + "\" in " + where);
    }
  }
}

Json section(const Json& root, const char* key) {
  auto it = root.find(key);
  if (it == root.end()) return Json::object();
  if (!it->is_object()) config_fail(std::string(key) + " must be an object");
  return *it;
}

double num_field(const Json& obj, const char* where, const char* key,
                 double fallback) {
  auto it = obj.find(key);
  if (it == obj.end()) return fallback;
  if (!it->is_number()) config_fail(std::string(where) + "." + key + " must be a number");
  return it->get<double>();
}

int int_field(const Json& obj, const char* where, const char* key,
              int fallback) {
  auto it = obj.find(key);
  if (it == obj.end()) return fallback;
  if (!it->is_number_integer()) {
    config_fail(std::string(where) + "." + key + " must be an integer");
  }
  return it->get<int>();
}

bool bool_field(const Json& obj, const char* where, const char* key,
                bool fallback) {
  auto it = obj.find(key);
  if (it == obj.end()) return fallback;
  if (!it->is_boolean()) config_fail(std::string(where) + "." + key + " must be a boolean");
  return it->get<bool>();
}

}  // namespace

PipelineConfig config_from_json(const std::string& text) {
  const Json root = Json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (root.is_discarded()) config_fail("document is not valid JSON");
  if (!root.is_object()) config_fail("top level must be an object");
  check_keys(root, "top level",
             {"out_dir", "master_seed", "cohort", "split", "scorer",
              "occlusion", "ebm", "eval"});

  PipelineConfig cfg;
  auto seed_it = root.find("master_seed");
  if (seed_it == root.end()) config_fail("master_seed is required");
  if (!seed_it->is_number_unsigned() &&
      !(seed_it->is_number_integer() && seed_it->get<std::int64_t>() >= 0)) {
    config_fail("master_seed must be a non-negative integer");
  }
  cfg.master_seed = seed_it->get<std::uint64_t>();
  if (auto it = root.find("out_dir"); it != root.end()) {
    if (!it->is_string()) config_fail("out_dir must be a string");
    cfg.out_dir = it->get<std::string>();
  }

  const Json co = section(root, "cohort");
  check_keys(co, "cohort",
             {"dims", "regions", "per_class", "noise_sd", "label_noise",
              "effects", "pair_effects"});
  if (auto it = co.find("dims"); it != co.end()) {
    if (!it->is_array() || it->size() != 3) {
      config_fail("cohort.dims must be an array of three extents");
    }
    for (const Json& d : *it) {
      if (!d.is_number_integer()) config_fail("cohort.dims entries must be integers");
    }
    cfg.cohort.dims = Dims{(*it)[0].get<int>(), (*it)[1].get<int>(),
                           (*it)[2].get<int>()};
  }
  cfg.cohort.n_regions = int_field(co, "cohort", "regions", cfg.cohort.n_regions);
  cfg.cohort.n_per_class =
      int_field(co, "cohort", "per_class", cfg.cohort.n_per_class);
  cfg.cohort.noise_sd = num_field(co, "cohort", "noise_sd", cfg.cohort.noise_sd);
  cfg.cohort.label_noise =
      num_field(co, "cohort", "label_noise", cfg.cohort.label_noise);
  if (auto it = co.find("effects"); it != co.end()) {
    if (!it->is_array()) config_fail("cohort.effects must be an array");
    for (const Json& e : *it) {
      if (!e.is_object()) config_fail("cohort.effects entries must be objects");
      check_keys(e, "cohort.effects", {"region", "reduction"});
      RegionEffect re;
      re.region = int_field(e, "cohort.effects", "region", -1);
      re.reduction = num_field(e, "cohort.effects", "reduction", -1.0);
      cfg.cohort.effects.push_back(re);
    }
  }
  if (auto it = co.find("pair_effects"); it != co.end()) {
    if (!it->is_array()) config_fail("cohort.pair_effects must be an array");
    for (const Json& e : *it) {
      if (!e.is_object()) config_fail("cohort.pair_effects entries must be objects");
      check_keys(e, "cohort.pair_effects", {"region_a", "region_b", "reduction"});
      PairEffect pe;
      pe.region_a = int_field(e, "cohort.pair_effects", "region_a", -1);
      pe.region_b = int_field(e, "cohort.pair_effects", "region_b", -1);
      pe.reduction = num_field(e, "cohort.pair_effects", "reduction", -1.0);
      cfg.cohort.pair_effects.push_back(pe);
    }
  }

  const Json sp = section(root, "split");
  check_keys(sp, "split", {"test_fraction", "folds"});
  cfg.test_fraction = num_field(sp, "split", "test_fraction", cfg.test_fraction);
  cfg.folds = int_field(sp, "split", "folds", cfg.folds);

  const Json sc = section(root, "scorer");
  check_keys(sc, "scorer",
             {"channels", "glo_epochs", "loc_epochs", "learning_rate",
              "batch_size"});
  if (auto it = sc.find("channels"); it != sc.end()) {
    if (!it->is_array() || it->size() != 2 || !(*it)[0].is_number_integer() ||
        !(*it)[1].is_number_integer()) {
      config_fail("scorer.channels must be an array of two integers");
    }
    cfg.c1 = (*it)[0].get<int>();
    cfg.c2 = (*it)[1].get<int>();
  }
  cfg.glo_epochs = int_field(sc, "scorer", "glo_epochs", cfg.glo_epochs);
  cfg.loc_epochs = int_field(sc, "scorer", "loc_epochs", cfg.loc_epochs);
  cfg.scorer_learning_rate =
      num_field(sc, "scorer", "learning_rate", cfg.scorer_learning_rate);
  cfg.batch_size = int_field(sc, "scorer", "batch_size", cfg.batch_size);

  const Json oc = section(root, "occlusion");
  check_keys(oc, "occlusion",
             {"edge", "stride", "fill", "roi_edge", "rois", "absolute",
              "per_fold_rois"});
  cfg.occlusion.occlusion_edge =
      int_field(oc, "occlusion", "edge", cfg.occlusion.occlusion_edge);
  cfg.occlusion.stride = int_field(oc, "occlusion", "stride", cfg.occlusion.stride);
  cfg.occlusion.fill = num_field(oc, "occlusion", "fill", cfg.occlusion.fill);
  cfg.occlusion.roi_edge =
      int_field(oc, "occlusion", "roi_edge", cfg.occlusion.roi_edge);
  cfg.occlusion.top_k = int_field(oc, "occlusion", "rois", cfg.occlusion.top_k);
  cfg.absolute_group_map =
      bool_field(oc, "occlusion", "absolute", cfg.absolute_group_map);
  cfg.per_fold_rois =
      bool_field(oc, "occlusion", "per_fold_rois", cfg.per_fold_rois);

  const Json eb = section(root, "ebm");
  check_keys(eb, "ebm",
             {"rounds", "learning_rate", "bags", "max_leaves", "bins",
              "val_fraction", "patience", "pairs"});
  cfg.ebm.rounds = int_field(eb, "ebm", "rounds", cfg.ebm.rounds);
  cfg.ebm.learning_rate =
      num_field(eb, "ebm", "learning_rate", cfg.ebm.learning_rate);
  cfg.ebm.bags = int_field(eb, "ebm", "bags", cfg.ebm.bags);
  cfg.ebm.max_leaves = int_field(eb, "ebm", "max_leaves", cfg.ebm.max_leaves);
  cfg.ebm.max_bins = int_field(eb, "ebm", "bins", cfg.ebm.max_bins);
  cfg.ebm.val_fraction = num_field(eb, "ebm", "val_fraction", cfg.ebm.val_fraction);
  cfg.ebm.early_stop_patience =
      int_field(eb, "ebm", "patience", cfg.ebm.early_stop_patience);
  cfg.ebm_pairs = int_field(eb, "ebm", "pairs", cfg.ebm_pairs);

  const Json ev = section(root, "eval");
  check_keys(ev, "eval", {"bootstrap_reps", "threshold"});
  cfg.bootstrap_reps = int_field(ev, "eval", "bootstrap_reps", cfg.bootstrap_reps);
  cfg.threshold = num_field(ev, "eval", "threshold", cfg.threshold);

  validate_config(cfg);
  return cfg;
}

PipelineConfig load_pipeline_config(const std::string& path) {
  std::string text;
  try {
    text = read_text(path);
  } catch (const std::exception& e) {
    config_fail(e.what());
  }
  return config_from_json(text);
}

std::string config_to_json(const PipelineConfig& cfg) {
  Json effects = Json::array();
  for (const RegionEffect& e : cfg.cohort.effects) {
    effects.push_back({{"region", e.region}, {"reduction", e.reduction}});
  }
  Json pair_effects = Json::array();
  for (const PairEffect& p : cfg.cohort.pair_effects) {
    pair_effects.push_back({{"region_a", p.region_a},
                            {"region_b", p.region_b},
                            {"reduction", p.reduction}});
  }
  Json j;
  j["out_dir"] = cfg.out_dir;
  j["master_seed"] = cfg.master_seed;
  j["cohort"] = {{"dims", {cfg.cohort.dims.nx, cfg.cohort.dims.ny, cfg.cohort.dims.nz}},
                 {"regions", cfg.cohort.n_regions},
                 {"per_class", cfg.cohort.n_per_class},
                 {"noise_sd", cfg.cohort.noise_sd},
                 {"label_noise", cfg.cohort.label_noise},
                 {"effects", effects},
                 {"pair_effects", pair_effects}};
  j["split"] = {{"test_fraction", cfg.test_fraction}, {"folds", cfg.folds}};
  j["scorer"] = {{"channels", {cfg.c1, cfg.c2}},
                 {"glo_epochs", cfg.glo_epochs},
                 {"loc_epochs", cfg.loc_epochs},
                 {"learning_rate", cfg.scorer_learning_rate},
                 {"batch_size", cfg.batch_size}};
  j["occlusion"] = {{"edge", cfg.occlusion.occlusion_edge},
                    {"stride", cfg.occlusion.stride},
                    {"fill", cfg.occlusion.fill},
                    {"roi_edge", cfg.occlusion.roi_edge},
                    {"rois", cfg.occlusion.top_k},
                    {"absolute", cfg.absolute_group_map},
                    {"per_fold_rois", cfg.per_fold_rois}};
  j["ebm"] = {{"rounds", cfg.ebm.rounds},
              {"learning_rate", cfg.ebm.learning_rate},
              {"bags", cfg.ebm.bags},
              {"max_leaves", cfg.ebm.max_leaves},
              {"bins", cfg.ebm.max_bins},
              {"val_fraction", cfg.ebm.val_fraction},
              {"patience", cfg.ebm.early_stop_patience},
              {"pairs", cfg.ebm_pairs}};
  j["eval"] = {{"bootstrap_reps", cfg.bootstrap_reps},
               {"threshold", cfg.threshold}};
  return j.dump(2);
}

void validate_config(const PipelineConfig& c) {
  if (c.out_dir.empty()) config_fail("out_dir must not be empty");
  const Dims& d = c.cohort.dims;
  if (d.nx < 8 || d.ny < 8 || d.nz < 8) {
    config_fail("cohort.dims must be at least 8 per axis");
  }
  if (c.cohort.n_regions < 1) config_fail("cohort.regions must be >= 1");
  if (c.cohort.n_per_class < 1) config_fail("cohort.per_class must be >= 1");
  if (!(c.cohort.noise_sd >= 0.0)) config_fail("cohort.noise_sd must be >= 0");
  if (!(c.cohort.label_noise >= 0.0 && c.cohort.label_noise <= 1.0)) {
    config_fail("cohort.label_noise must lie in [0, 1]");
  }
  for (const RegionEffect& e : c.cohort.effects) {
    if (e.region < 0 || e.region >= c.cohort.n_regions) {
      config_fail("cohort.effects region id out of range");
    }
    if (!(e.reduction >= 0.0 && e.reduction <= 1.0)) {
      config_fail("cohort.effects reduction must lie in [0, 1]");
    }
  }
  for (const PairEffect& p : c.cohort.pair_effects) {
    if (p.region_a < 0 || p.region_a >= c.cohort.n_regions || p.region_b < 0 ||
        p.region_b >= c.cohort.n_regions || p.region_a == p.region_b) {
      config_fail("cohort.pair_effects needs two distinct region ids in range");
    }
    if (!(p.reduction >= 0.0 && p.reduction <= 1.0)) {
      config_fail("cohort.pair_effects reduction must lie in [0, 1]");
    }
  }
  if (!(c.test_fraction > 0.0 && c.test_fraction < 1.0)) {
    config_fail("split.test_fraction must lie in (0, 1)");
  }
  if (c.folds < 2) config_fail("split.folds must be >= 2");
  if (c.c1 < 1 || c.c2 < 1) config_fail("scorer.channels must be >= 1");
  if (c.glo_epochs < 0 || c.loc_epochs < 0) config_fail("scorer epochs must be >= 0");
  if (!(c.scorer_learning_rate > 0.0)) config_fail("scorer.learning_rate must be > 0");
  if (c.batch_size < 1) config_fail("scorer.batch_size must be >= 1");
  if (c.occlusion.occlusion_edge < 1) config_fail("occlusion.edge must be >= 1");
  if (c.occlusion.stride < 0) config_fail("occlusion.stride must be >= 0");
  // ROI patches feed the local scorers, whose two pooling stages need at
  // least 8 voxels per axis.
  if (c.occlusion.roi_edge < 8) config_fail("occlusion.roi_edge must be >= 8");
  if (c.occlusion.top_k < 1) config_fail("occlusion.rois must be >= 1");
  if (c.ebm.rounds < 0) config_fail("ebm.rounds must be >= 0");
  if (!(c.ebm.learning_rate > 0.0)) config_fail("ebm.learning_rate must be > 0");
  if (c.ebm.bags < 1) config_fail("ebm.bags must be >= 1");
  if (c.ebm.max_leaves < 2) config_fail("ebm.max_leaves must be >= 2");
  if (c.ebm.max_bins < 2) config_fail("ebm.bins must be >= 2");
  if (!(c.ebm.val_fraction >= 0.0 && c.ebm.val_fraction < 1.0)) {
    config_fail("ebm.val_fraction must lie in [0, 1)");
  }
  if (c.ebm.early_stop_patience < 1) config_fail("ebm.patience must be >= 1");
  if (c.ebm_pairs < 0) config_fail("ebm.pairs must be >= 0");
  if (c.bootstrap_reps < 1) config_fail("eval.bootstrap_reps must be >= 1");
  if (!(c.threshold > 0.0 && c.threshold < 1.0)) {
    config_fail("eval.threshold must lie in (0, 1)");
  }
}

// ---------------------------------------------------------------- hashing

std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256: digest failed");
  }
  std::string out;
  out.reserve(2 * len);
  static const char hex[] = "0123456789abcdef";
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 0xf]);
  }
  return out;
}

std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("sha256: cannot open " + path);
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr) throw std::runtime_error("sha256: context allocation failed");
  if (EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw std::runtime_error("sha256: init failed");
  }
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    if (EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount())) != 1) {
      EVP_MD_CTX_free(ctx);
      throw std::runtime_error("sha256: update failed");
    }
  }
  const bool read_error = in.bad();
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  const bool final_ok = EVP_DigestFinal_ex(ctx, md, &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (read_error) throw std::runtime_error("sha256: failed reading " + path);
  if (!final_ok) throw std::runtime_error("sha256: finalization failed");
  std::string out;
  out.reserve(2 * len);
  static const char hex[] = "0123456789abcdef";
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 0xf]);
  }
  return out;
}

// ---------------------------------------------------------------- stages

std::string subject_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "subj%03zu", index);
  return buf;
}

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::generate: return "generate";
    case Stage::split: return "split";
    case Stage::train_glo: return "train-glo";
    case Stage::occlude: return "occlude";
    case Stage::select_rois: return "select-rois";
    case Stage::train_loc: return "train-loc";
    case Stage::biomarkers: return "biomarkers";
    case Stage::fit_ebm: return "fit-ebm";
    case Stage::evaluate: return "evaluate";
    case Stage::compare: return "compare";
    case Stage::report: return "report";
  }
  return "?";
}

std::optional<Stage> stage_from_name(std::string_view name) {
  for (int i = 0; i < kStageCount; ++i) {
    const Stage s = static_cast<Stage>(i);
    if (name == stage_name(s)) return s;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------- split io

std::string split_to_json(const SplitInfo& split, double test_fraction) {
  Json test = Json::array();
  for (std::size_t i : split.test_idx) test.push_back(subject_id(i));
  Json folds = Json::array();
  for (const std::vector<std::size_t>& fold : split.folds) {
    Json members = Json::array();
    for (std::size_t local : fold) members.push_back(subject_id(split.opt_idx[local]));
    folds.push_back(members);
  }
  Json j;
  j["format"] = "split-plan";
  j["version"] = 1;
  j["test_fraction"] = test_fraction;
  j["folds"] = static_cast<int>(split.folds.size());
  j["test"] = test;
  j["fold_members"] = folds;
  return j.dump(2);
}

SplitInfo split_from_json(const std::string& text, std::size_t n_subjects,
                          int folds) {
  const Json j = Json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    throw std::runtime_error("split plan is not valid JSON");
  }
  if (j.value("format", "") != "split-plan" || j.value("version", 0) != 1) {
    throw std::runtime_error("not a version-1 split plan");
  }
  std::map<std::string, std::size_t> index_of;
  for (std::size_t i = 0; i < n_subjects; ++i) index_of[subject_id(i)] = i;
  // seen[i] counts appearances across test + folds; the plan must name
  // every subject exactly once or some stage saw a subject twice.
  std::vector<int> seen(n_subjects, 0);
  auto lookup = [&](const Json& id) {
    if (!id.is_string()) throw std::runtime_error("split plan ids must be strings");
    auto it = index_of.find(id.get<std::string>());
    if (it == index_of.end()) {
      throw std::runtime_error("split plan names unknown subject " +
                               id.get<std::string>());
    }
    ++seen[it->second];
    return it->second;
  };
  if (!j.contains("test") || !j["test"].is_array() || j["test"].empty()) {
    throw std::runtime_error("split plan is missing its test set");
  }
  if (!j.contains("fold_members") || !j["fold_members"].is_array()) {
    throw std::runtime_error("split plan is missing its folds");
  }
  if (static_cast<int>(j["fold_members"].size()) != folds) {
    throw std::runtime_error("split plan has " +
                             std::to_string(j["fold_members"].size()) +
                             " folds, configuration wants " +
                             std::to_string(folds));
  }
  SplitInfo s;
  for (const Json& id : j["test"]) s.test_idx.push_back(lookup(id));
  std::vector<std::vector<std::size_t>> fold_cohort(j["fold_members"].size());
  for (std::size_t f = 0; f < fold_cohort.size(); ++f) {
    const Json& members = j["fold_members"][f];
    if (!members.is_array() || members.empty()) {
      throw std::runtime_error("split plan fold " + std::to_string(f) +
                               " is empty");
    }
    for (const Json& id : members) fold_cohort[f].push_back(lookup(id));
  }
  for (std::size_t i = 0; i < n_subjects; ++i) {
    if (seen[i] != 1) {
      throw std::runtime_error("split plan lists subject " + subject_id(i) +
                               " " + std::to_string(seen[i]) +
                               " times; the test set and the folds must "
                               "partition the cohort");
    }
  }
  // Optimization set in ascending cohort order, then folds rebased onto it.
  std::vector<int> fold_of_cohort(n_subjects, -1);
  for (std::size_t f = 0; f < fold_cohort.size(); ++f) {
    for (std::size_t idx : fold_cohort[f]) fold_of_cohort[idx] = static_cast<int>(f);
  }
  for (std::size_t i = 0; i < n_subjects; ++i) {
    if (fold_of_cohort[i] >= 0) s.opt_idx.push_back(i);
  }
  std::map<std::size_t, std::size_t> local_of;
  for (std::size_t l = 0; l < s.opt_idx.size(); ++l) local_of[s.opt_idx[l]] = l;
  s.fold_of.resize(s.opt_idx.size());
  s.folds.resize(fold_cohort.size());
  for (std::size_t l = 0; l < s.opt_idx.size(); ++l) {
    const int f = fold_of_cohort[s.opt_idx[l]];
    s.fold_of[l] = f;
    s.folds[static_cast<std::size_t>(f)].push_back(l);
  }
  return s;
}

// ---------------------------------------------------------------- manifest

std::string manifest_to_json(const RunManifest& m) {
  Json config = Json::parse(m.config_json, nullptr, false);
  if (config.is_discarded()) {
    throw std::runtime_error("manifest holds an unparseable config snapshot");
  }
  Json protocol = Json::object();
  const ProtocolRecord& p = m.protocol;
  if (p.test_fraction >= 0.0) protocol["test_fraction"] = p.test_fraction;
  if (p.folds >= 0) protocol["folds"] = p.folds;
  if (p.rois >= 0) protocol["rois"] = p.rois;
  if (p.ebm_features >= 0) protocol["ebm_features"] = p.ebm_features;
  if (p.ebm_pairs >= 0) protocol["ebm_pairs"] = p.ebm_pairs;
  if (p.scorer_learning_rate >= 0.0) {
    protocol["scorer_learning_rate"] = p.scorer_learning_rate;
  }
  if (p.batch_size >= 0) protocol["batch_size"] = p.batch_size;
  Json stages = Json::array();
  for (const StageRecord& s : m.stages) {
    Json artifacts = Json::array();
    for (const ArtifactRecord& a : s.artifacts) {
      artifacts.push_back({{"path", a.path}, {"sha256", a.sha256}});
    }
    stages.push_back({{"name", s.name},
                      {"reused", s.reused},
                      {"seconds", s.seconds},
                      {"artifacts", artifacts}});
  }
  Json j;
  j["format"] = "run-manifest";
  j["version"] = 1;
  j["config"] = config;
  j["protocol"] = protocol;
  j["stages"] = stages;
  return j.dump(2);
}

RunManifest manifest_from_json(const std::string& text) {
  const Json j = Json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    throw std::runtime_error("manifest is not valid JSON");
  }
  if (j.value("format", "") != "run-manifest" || j.value("version", 0) != 1) {
    throw std::runtime_error("not a version-1 run manifest");
  }
  if (!j.contains("config") || !j.contains("stages") || !j["stages"].is_array()) {
    throw std::runtime_error("manifest is missing config or stages");
  }
  RunManifest m;
  m.config_json = j["config"].dump(2);
  const Json protocol = j.value("protocol", Json::object());
  m.protocol.test_fraction = protocol.value("test_fraction", -1.0);
  m.protocol.folds = protocol.value("folds", -1);
  m.protocol.rois = protocol.value("rois", -1);
  m.protocol.ebm_features = protocol.value("ebm_features", -1);
  m.protocol.ebm_pairs = protocol.value("ebm_pairs", -1);
  m.protocol.scorer_learning_rate = protocol.value("scorer_learning_rate", -1.0);
  m.protocol.batch_size = protocol.value("batch_size", -1);
  for (const Json& s : j["stages"]) {
    StageRecord rec;
    rec.name = s.value("name", "");
    rec.reused = s.value("reused", false);
    rec.seconds = s.value("seconds", 0.0);
    for (const Json& a : s.value("artifacts", Json::array())) {
      rec.artifacts.push_back({a.value("path", ""), a.value("sha256", "")});
    }
    if (rec.name.empty()) throw std::runtime_error("manifest stage without a name");
    m.stages.push_back(std::move(rec));
  }
  return m;
}

void write_manifest(const std::string& path, const RunManifest& m) {
  write_text(path, manifest_to_json(m) + "\n");
}

RunManifest read_manifest(const std::string& path) {
  return manifest_from_json(read_text(path));
}

// ------------------------------------------------------------- comparisons

namespace {

constexpr std::array<Metric, 4> kAllMetrics{Metric::Acc, Metric::Sen,
                                            Metric::Spe, Metric::Auc};

void check_same_subjects(const ModelScores& a, const ModelScores& b,
                         const std::vector<int>& labels) {
  if (a.ids != b.ids) {
    throw std::invalid_argument("compare: " + a.name + " and " + b.name +
                                " score different subject sets");
  }
  if (a.scores.size() != a.ids.size() || b.scores.size() != b.ids.size() ||
      labels.size() != a.ids.size()) {
    throw std::invalid_argument("compare: scores, ids and labels disagree on size");
  }
}

}  // namespace

std::vector<ComparisonRow> compare_held_out(const ModelScores& a,
                                            const ModelScores& b,
                                            const std::vector<int>& labels,
                                            int reps, std::uint64_t seed,
                                            double threshold) {
  check_same_subjects(a, b, labels);
  std::vector<ComparisonRow> rows;
  for (std::size_t mi = 0; mi < kAllMetrics.size(); ++mi) {
    const PairedBootstrapResult r =
        paired_bootstrap_diff(a.scores, b.scores, labels, kAllMetrics[mi], reps,
                              derive_seed(seed, "cmp-metric", mi), threshold);
    ComparisonRow row;
    row.model_a = a.name;
    row.model_b = b.name;
    row.split = "test";
    row.metric = kAllMetrics[mi];
    row.diff = r.diff;
    row.lo = r.lo;
    row.hi = r.hi;
    row.p = r.p;
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<ComparisonRow> compare_cv(
    const ModelScores& a, const ModelScores& b, const std::vector<int>& labels,
    const std::vector<std::vector<std::size_t>>& folds, double threshold) {
  check_same_subjects(a, b, labels);
  const std::size_t n = labels.size();
  if (folds.size() < 2) throw std::invalid_argument("compare: needs >= 2 folds");
  std::vector<int> seen(n, 0);
  for (const std::vector<std::size_t>& fold : folds) {
    if (fold.empty()) throw std::invalid_argument("compare: empty fold");
    for (std::size_t i : fold) {
      if (i >= n) throw std::invalid_argument("compare: fold index out of range");
      ++seen[i];
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (seen[i] != 1) {
      throw std::invalid_argument("compare: folds must partition the subjects");
    }
  }
  const int k = static_cast<int>(folds.size());
  const int n_test = static_cast<int>(
      std::llround(static_cast<double>(n) / static_cast<double>(k)));
  const int n_train = static_cast<int>(n) - n_test;
  if (n_train < 1) throw std::invalid_argument("compare: folds leave no training rows");

  std::vector<ComparisonRow> rows;
  for (const Metric m : kAllMetrics) {
    std::vector<double> diffs;
    diffs.reserve(folds.size());
    bool defined = true;
    for (const std::vector<std::size_t>& fold : folds) {
      std::vector<double> sa, sb;
      std::vector<int> sl;
      for (std::size_t i : fold) {
        sa.push_back(a.scores[i]);
        sb.push_back(b.scores[i]);
        sl.push_back(labels[i]);
      }
      const std::optional<double> va = metric_value(m, sa, sl, threshold);
      const std::optional<double> vb = metric_value(m, sb, sl, threshold);
      if (!va || !vb) {
        defined = false;
        break;
      }
      diffs.push_back(*va - *vb);
    }
    if (!defined) continue;
    const TTestResult tt = corrected_resampled_ttest(diffs, n_train, n_test);
    ComparisonRow row;
    row.model_a = a.name;
    row.model_b = b.name;
    row.split = "cv";
    row.metric = m;
    row.diff = tt.mean_diff;
    if (tt.degenerate) {
      row.lo = row.hi = tt.mean_diff;
    } else {
      double var = 0.0;
      for (double d : diffs) {
        var += (d - tt.mean_diff) * (d - tt.mean_diff);
      }
      var /= static_cast<double>(diffs.size() - 1);
      const double se =
          std::sqrt((1.0 / k + static_cast<double>(n_test) / n_train) * var);
      const boost::math::students_t dist(static_cast<double>(k - 1));
      const double tcrit = boost::math::quantile(dist, 0.975);
      row.lo = tt.mean_diff - tcrit * se;
      row.hi = tt.mean_diff + tcrit * se;
      row.p = tt.p;
      row.t = tt.t;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string comparison_csv(const std::vector<ComparisonRow>& rows) {
  std::string out = "model_a,model_b,split,metric,diff,lo,hi,p,t\n";
  for (const ComparisonRow& r : rows) {
    out += r.model_a + "," + r.model_b + "," + r.split + "," +
           metric_name(r.metric) + "," + fmt_g(r.diff) + "," + fmt_g(r.lo) +
           "," + fmt_g(r.hi) + ",";
    if (r.p) out += fmt_g(*r.p);
    out += ",";
    if (r.t) out += fmt_g(*r.t);
    out += "\n";
  }
  return out;
}

std::string comparison_json(const std::vector<ComparisonRow>& rows) {
  Json arr = Json::array();
  for (const ComparisonRow& r : rows) {
    Json row = {{"model_a", r.model_a}, {"model_b", r.model_b},
                {"split", r.split},     {"metric", metric_name(r.metric)},
                {"diff", r.diff},       {"lo", r.lo},
                {"hi", r.hi}};
    row["p"] = r.p ? Json(*r.p) : Json(nullptr);
    row["t"] = r.t ? Json(*r.t) : Json(nullptr);
    arr.push_back(std::move(row));
  }
  Json j;
  j["format"] = "model-comparison";
  j["version"] = 1;
  j["rows"] = arr;
  return j.dump(2);
}

// ------------------------------------------------------------- reporting

std::vector<std::pair<std::string, double>> nonzero_importance(
    const EbmModel& model, const TabularDataset& d) {
  std::vector<std::pair<std::string, double>> out;
  for (auto& term : global_importance(model, d)) {
    if (term.second != 0.0) out.push_back(std::move(term));
  }
  return out;
}

std::string shape_dump_json(const EbmModel& model) {
  Json mains = Json::array();
  for (const ShapeFunction& s : model.shapes) {
    const auto f = static_cast<std::size_t>(s.feature);
    mains.push_back({{"term", model.feature_names[f]},
                     {"cuts", model.bins.cuts[f]},
                     {"scores", s.scores}});
  }
  Json pairs = Json::array();
  for (const PairTerm& p : model.pairs) {
    const auto fi = static_cast<std::size_t>(p.fi);
    const auto fj = static_cast<std::size_t>(p.fj);
    pairs.push_back({{"term", model.feature_names[fi] + " × " + model.feature_names[fj]},
                     {"row_term", model.feature_names[fi]},
                     {"col_term", model.feature_names[fj]},
                     {"row_cuts", model.bins.cuts[fi]},
                     {"col_cuts", model.bins.cuts[fj]},
                     {"rows", model.bins.bin_count(p.fi)},
                     {"cols", model.bins.bin_count(p.fj)},
                     {"grid", p.grid}});
  }
  Json j;
  j["format"] = "ebm-shapes";
  j["version"] = 1;
  j["intercept"] = model.intercept;
  j["mains"] = mains;
  j["pairs"] = pairs;
  return j.dump(2);
}

// ------------------------------------------------------------- run driver

namespace {

enum class StageMode { reuse, compute, load_only };

struct RunState {
  PipelineConfig cfg;
  fs::path out;
  Atlas atlas;
  RegionMap rmap;
  Cohort cohort;
  SplitInfo split;
  std::vector<int> labels_opt, labels_test;
  std::vector<ConvScorer> glo;                // one per fold
  std::vector<Volume> group_maps;             // 1, or one per fold
  std::vector<RoiSet> roi_sets;               // matches group_maps
  std::vector<std::vector<ConvScorer>> loc;   // [roi rank][fold]
  BiomarkerTable dl_opt, dl_test, v_opt, v_test;
  std::vector<SelectedBiomarker> v_sel;
  EbmModel ebm_dl, ebm_v;
};

SynthConfig synth_cfg(const PipelineConfig& cfg) {
  SynthConfig s = cfg.cohort;
  s.seed = derive_seed(cfg.master_seed, "cohort");
  return s;
}

std::size_t cohort_size(const PipelineConfig& cfg) {
  return 2 * static_cast<std::size_t>(cfg.cohort.n_per_class);
}

std::vector<std::string> ids_of(const std::vector<std::size_t>& idx) {
  std::vector<std::string> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(subject_id(i));
  return out;
}

// Boundary guard: two id sets that must not share a subject.
void check_disjoint(const std::vector<std::size_t>& a,
                    const std::vector<std::size_t>& b, const char* what) {
  std::unordered_set<std::size_t> in_a(a.begin(), a.end());
  for (std::size_t i : b) {
    if (in_a.count(i) != 0) {
      throw std::runtime_error(std::string(what) + ": subject " +
                               subject_id(i) + " appears on both sides");
    }
  }
}

// Cohort indices of the subjects fold f's models train on.
std::vector<std::size_t> fold_train_cohort(const RunState& st, int f) {
  std::vector<std::size_t> out;
  for (std::size_t l = 0; l < st.split.opt_idx.size(); ++l) {
    if (st.split.fold_of[l] != f) out.push_back(st.split.opt_idx[l]);
  }
  return out;
}

std::vector<std::size_t> fold_cohort_members(const RunState& st, int f) {
  std::vector<std::size_t> out;
  for (std::size_t l : st.split.folds[static_cast<std::size_t>(f)]) {
    out.push_back(st.split.opt_idx[l]);
  }
  return out;
}

PatchSpec roi_patch(const RunState& st, int rank, int fold) {
  const RoiSet& set =
      st.roi_sets[st.cfg.per_fold_rois ? static_cast<std::size_t>(fold) : 0];
  return set.rois[static_cast<std::size_t>(rank)].patch;
}

void fill_split_labels(RunState& st) {
  st.labels_opt.clear();
  st.labels_test.clear();
  for (std::size_t i : st.split.opt_idx) st.labels_opt.push_back(st.cohort.labels[i]);
  for (std::size_t i : st.split.test_idx) st.labels_test.push_back(st.cohort.labels[i]);
}

TrainConfig scorer_train_cfg(const PipelineConfig& cfg, int epochs,
                             std::uint64_t seed) {
  TrainConfig tc;
  tc.learning_rate = cfg.scorer_learning_rate;
  tc.batch_size = cfg.batch_size;
  tc.epochs = epochs;
  tc.seed = seed;
  return tc;
}

// ---- generate ----

std::vector<std::string> generate_artifacts(const RunState& st) {
  std::vector<std::string> out{"cohort/manifest.csv"};
  for (std::size_t i = 0; i < cohort_size(st.cfg); ++i) {
    out.push_back("cohort/" + subject_id(i) + ".rv1");
  }
  return out;
}

void generate_compute(RunState& st) {
  const SynthConfig scfg = synth_cfg(st.cfg);
  st.atlas = make_atlas(scfg);
  st.rmap = region_map(st.atlas);
  st.cohort = make_cohort(scfg, st.atlas);
  write_cohort((st.out / "cohort").string(), st.cohort);
}

void generate_load(RunState& st) {
  const SynthConfig scfg = synth_cfg(st.cfg);
  st.atlas = make_atlas(scfg);
  st.rmap = region_map(st.atlas);
  st.cohort = read_cohort((st.out / "cohort").string());
  if (st.cohort.volumes.size() != cohort_size(st.cfg)) {
    throw std::runtime_error("stored cohort has " +
                             std::to_string(st.cohort.volumes.size()) +
                             " subjects, configuration wants " +
                             std::to_string(cohort_size(st.cfg)));
  }
}

// ---- split ----

void split_compute(RunState& st) {
  const PipelineConfig& cfg = st.cfg;
  const SplitPlan plan = stratified_split(st.cohort.labels, cfg.test_fraction,
                                          derive_seed(cfg.master_seed, "split"));
  SplitInfo s;
  s.test_idx = plan.members(1);
  s.opt_idx = plan.members(0);
  std::vector<int> labels_opt;
  for (std::size_t i : s.opt_idx) labels_opt.push_back(st.cohort.labels[i]);
  const SplitPlan kf =
      kfold_split(labels_opt, cfg.folds, derive_seed(cfg.master_seed, "folds"));
  s.fold_of.resize(s.opt_idx.size());
  s.folds.resize(static_cast<std::size_t>(cfg.folds));
  for (std::size_t l = 0; l < s.opt_idx.size(); ++l) {
    const int f = kf.part_of[l];
    s.fold_of[l] = f;
    s.folds[static_cast<std::size_t>(f)].push_back(l);
  }
  const std::string text = split_to_json(s, cfg.test_fraction);
  // The parser is also the boundary guard; running it on what was just
  // written proves the stored plan partitions the cohort.
  st.split = split_from_json(text, st.cohort.labels.size(), cfg.folds);
  write_text(st.out / "splits" / "split.json", text);
  fill_split_labels(st);
}

void split_load(RunState& st) {
  const std::string text = read_text(st.out / "splits" / "split.json");
  st.split = split_from_json(text, st.cohort.labels.size(), st.cfg.folds);
  fill_split_labels(st);
}

void split_protocol(const RunState& st, ProtocolRecord& p) {
  p.test_fraction = st.cfg.test_fraction;
  p.folds = static_cast<int>(st.split.folds.size());
}

// ---- train-glo ----

std::vector<std::string> glo_artifacts(const RunState& st) {
  std::vector<std::string> out;
  for (int f = 0; f < st.cfg.folds; ++f) {
    out.push_back("models/glo_fold" + std::to_string(f) + ".bin");
  }
  return out;
}

void glo_compute(RunState& st) {
  const PipelineConfig& cfg = st.cfg;
  fs::create_directories(st.out / "models");
  st.glo.clear();
  for (int f = 0; f < cfg.folds; ++f) {
    const std::vector<std::size_t> train = fold_train_cohort(st, f);
    check_disjoint(st.split.test_idx, train, "train-glo vs test split");
    check_disjoint(fold_cohort_members(st, f), train, "train-glo vs own fold");
    std::vector<Volume> vols;
    std::vector<int> labels;
    for (std::size_t i : train) {
      vols.push_back(st.cohort.volumes[i]);
      labels.push_back(st.cohort.labels[i]);
    }
    const ConvScorer init =
        make_scorer(cfg.c1, cfg.c2, derive_seed(cfg.master_seed, "glo-init",
                                                static_cast<std::uint64_t>(f)));
    const TrainConfig tc = scorer_train_cfg(
        cfg, cfg.glo_epochs,
        derive_seed(cfg.master_seed, "glo", static_cast<std::uint64_t>(f)));
    st.glo.push_back(train_scorer(init, vols, labels, tc).scorer);
    write_scorer((st.out / "models" / ("glo_fold" + std::to_string(f) + ".bin")).string(),
                 st.glo.back());
  }
}

void glo_load(RunState& st) {
  st.glo.clear();
  for (int f = 0; f < st.cfg.folds; ++f) {
    st.glo.push_back(read_scorer(
        (st.out / "models" / ("glo_fold" + std::to_string(f) + ".bin")).string()));
  }
}

void glo_protocol(const RunState& st, ProtocolRecord& p) {
  const TrainConfig tc = scorer_train_cfg(st.cfg, st.cfg.glo_epochs, 0);
  p.scorer_learning_rate = tc.learning_rate;
  p.batch_size = tc.batch_size;
}

// ---- occlude ----

std::vector<std::string> occlude_artifacts(const RunState& st) {
  std::vector<std::string> out;
  for (std::size_t i : st.split.opt_idx) {
    out.push_back("maps/" + subject_id(i) + ".rv1");
  }
  if (st.cfg.per_fold_rois) {
    for (int f = 0; f < st.cfg.folds; ++f) {
      out.push_back("maps/group_fold" + std::to_string(f) + ".rv1");
    }
  } else {
    out.push_back("maps/group.rv1");
  }
  return out;
}

void occlude_compute(RunState& st) {
  fs::create_directories(st.out / "maps");
  const std::size_t n_opt = st.split.opt_idx.size();
  std::vector<Volume> subj_maps(n_opt);
  for (std::size_t l = 0; l < n_opt; ++l) {
    const int f = st.split.fold_of[l];
    // The subject's map comes from the one fold model that never saw it.
    check_disjoint(fold_train_cohort(st, f), {st.split.opt_idx[l]},
                   "occlude vs scoring model's training set");
    subj_maps[l] = subject_occlusion_map(
        st.glo[static_cast<std::size_t>(f)],
        st.cohort.volumes[st.split.opt_idx[l]], st.cfg.occlusion);
    write_rv1((st.out / "maps" / (subject_id(st.split.opt_idx[l]) + ".rv1")).string(),
              subj_maps[l]);
  }
  st.group_maps.clear();
  if (st.cfg.per_fold_rois) {
    for (int f = 0; f < st.cfg.folds; ++f) {
      std::vector<Volume> outside;
      for (std::size_t l = 0; l < n_opt; ++l) {
        if (st.split.fold_of[l] != f) outside.push_back(subj_maps[l]);
      }
      st.group_maps.push_back(group_occlusion_map(outside, st.cfg.absolute_group_map));
      write_rv1((st.out / "maps" / ("group_fold" + std::to_string(f) + ".rv1")).string(),
                st.group_maps.back());
    }
  } else {
    st.group_maps.push_back(group_occlusion_map(subj_maps, st.cfg.absolute_group_map));
    write_rv1((st.out / "maps" / "group.rv1").string(), st.group_maps.back());
  }
}

void occlude_load(RunState& st) {
  st.group_maps.clear();
  if (st.cfg.per_fold_rois) {
    for (int f = 0; f < st.cfg.folds; ++f) {
      st.group_maps.push_back(read_rv1(
          (st.out / "maps" / ("group_fold" + std::to_string(f) + ".rv1")).string()));
    }
  } else {
    st.group_maps.push_back(read_rv1((st.out / "maps" / "group.rv1").string()));
  }
}

// ---- select-rois ----

std::vector<std::string> rois_artifacts(const RunState& st) {
  if (!st.cfg.per_fold_rois) return {"rois/rois.json"};
  std::vector<std::string> out;
  for (int f = 0; f < st.cfg.folds; ++f) {
    out.push_back("rois/rois_fold" + std::to_string(f) + ".json");
  }
  return out;
}

void rois_compute(RunState& st) {
  st.roi_sets.clear();
  const std::vector<std::string> paths = rois_artifacts(st);
  for (std::size_t g = 0; g < st.group_maps.size(); ++g) {
    st.roi_sets.push_back(rank_rois(st.group_maps[g], st.cfg.occlusion));
    write_text(st.out / paths[g], roi_set_to_json(st.roi_sets.back()) + "\n");
  }
}

void rois_load(RunState& st) {
  st.roi_sets.clear();
  for (const std::string& p : rois_artifacts(st)) {
    st.roi_sets.push_back(roi_set_from_json(read_text(st.out / p)));
    if (static_cast<int>(st.roi_sets.back().rois.size()) != st.cfg.occlusion.top_k) {
      throw std::runtime_error("stored ROI set in " + p + " has " +
                               std::to_string(st.roi_sets.back().rois.size()) +
                               " entries, configuration wants " +
                               std::to_string(st.cfg.occlusion.top_k));
    }
  }
}

void rois_protocol(const RunState& st, ProtocolRecord& p) {
  p.rois = static_cast<int>(st.roi_sets.front().rois.size());
}

// ---- train-loc ----

std::string loc_model_path(int rank, int fold) {
  return "models/loc_r" + std::to_string(rank + 1) + "_fold" +
         std::to_string(fold) + ".bin";
}

std::vector<std::string> loc_artifacts(const RunState& st) {
  std::vector<std::string> out;
  for (int r = 0; r < st.cfg.occlusion.top_k; ++r) {
    for (int f = 0; f < st.cfg.folds; ++f) out.push_back(loc_model_path(r, f));
  }
  return out;
}

void loc_compute(RunState& st) {
  const PipelineConfig& cfg = st.cfg;
  fs::create_directories(st.out / "models");
  st.loc.assign(static_cast<std::size_t>(cfg.occlusion.top_k), {});
  for (int r = 0; r < cfg.occlusion.top_k; ++r) {
    for (int f = 0; f < cfg.folds; ++f) {
      const std::vector<std::size_t> train = fold_train_cohort(st, f);
      check_disjoint(st.split.test_idx, train, "train-loc vs test split");
      std::vector<Volume> patches;
      std::vector<int> labels;
      const PatchSpec patch = roi_patch(st, r, f);
      for (std::size_t i : train) {
        patches.push_back(extract_patch(st.cohort.volumes[i], patch));
        labels.push_back(st.cohort.labels[i]);
      }
      const std::uint64_t tag =
          static_cast<std::uint64_t>(r) * static_cast<std::uint64_t>(cfg.folds) +
          static_cast<std::uint64_t>(f);
      const ConvScorer init =
          make_scorer(cfg.c1, cfg.c2, derive_seed(cfg.master_seed, "loc-init", tag));
      const TrainConfig tc = scorer_train_cfg(
          cfg, cfg.loc_epochs, derive_seed(cfg.master_seed, "loc", tag));
      st.loc[static_cast<std::size_t>(r)].push_back(
          train_scorer(init, patches, labels, tc).scorer);
      write_scorer((st.out / loc_model_path(r, f)).string(),
                   st.loc[static_cast<std::size_t>(r)].back());
    }
  }
}

void loc_load(RunState& st) {
  st.loc.assign(static_cast<std::size_t>(st.cfg.occlusion.top_k), {});
  for (int r = 0; r < st.cfg.occlusion.top_k; ++r) {
    for (int f = 0; f < st.cfg.folds; ++f) {
      st.loc[static_cast<std::size_t>(r)].push_back(
          read_scorer((st.out / loc_model_path(r, f)).string()));
    }
  }
}

// ---- biomarkers ----

const std::array<const char*, 9> kBiomarkerFiles = {
    "biomarkers/dl_opt.csv",  "biomarkers/dl_opt.json",
    "biomarkers/dl_test.csv", "biomarkers/dl_test.json",
    "biomarkers/v_opt.csv",   "biomarkers/v_opt.json",
    "biomarkers/v_test.csv",  "biomarkers/v_test.json",
    "biomarkers/v_selected.json"};

std::vector<std::string> biomarker_artifacts(const RunState&) {
  return {kBiomarkerFiles.begin(), kBiomarkerFiles.end()};
}

std::string roi_source(const RunState& st, int rank) {
  if (st.cfg.per_fold_rois) return "per-fold patches";
  const PatchSpec p = roi_patch(st, rank, 0);
  return "patch(" + std::to_string(p.x0) + "," + std::to_string(p.y0) + "," +
         std::to_string(p.z0) + ") edge " + std::to_string(p.sx);
}

void biomarkers_compute(RunState& st) {
  const PipelineConfig& cfg = st.cfg;
  fs::create_directories(st.out / "biomarkers");
  const int R = cfg.occlusion.top_k;
  const int K = cfg.folds;

  std::vector<std::string> names{"Glo"};
  std::vector<BiomarkerInfo> prov{{BiomarkerKind::dl_global, "glo-cnn"}};
  for (int r = 0; r < R; ++r) {
    names.push_back("ROI" + std::to_string(r + 1));
    prov.push_back({BiomarkerKind::dl_roi, roi_source(st, r)});
  }

  // Optimization rows carry out-of-fold probabilities: each subject is
  // scored by the models of its own fold, which trained without it.
  BiomarkerTable dl_opt;
  dl_opt.data.feature_names = names;
  dl_opt.data.labels = st.labels_opt;
  dl_opt.provenance = prov;
  for (std::size_t l = 0; l < st.split.opt_idx.size(); ++l) {
    const int f = st.split.fold_of[l];
    const Volume& v = st.cohort.volumes[st.split.opt_idx[l]];
    std::vector<double> row{forward(st.glo[static_cast<std::size_t>(f)], v)};
    for (int r = 0; r < R; ++r) {
      row.push_back(forward(st.loc[static_cast<std::size_t>(r)][static_cast<std::size_t>(f)],
                            extract_patch(v, roi_patch(st, r, f))));
    }
    dl_opt.data.features.push_back(std::move(row));
  }
  st.dl_opt = std::move(dl_opt);

  // Held-out rows average the fold models, the rule for unseen subjects.
  BiomarkerTable dl_test;
  dl_test.data.feature_names = names;
  dl_test.data.labels = st.labels_test;
  dl_test.provenance = prov;
  for (std::size_t i : st.split.test_idx) {
    const Volume& v = st.cohort.volumes[i];
    std::vector<double> row;
    double glo_mean = 0.0;
    for (int f = 0; f < K; ++f) glo_mean += forward(st.glo[static_cast<std::size_t>(f)], v);
    row.push_back(glo_mean / K);
    for (int r = 0; r < R; ++r) {
      double mean = 0.0;
      for (int f = 0; f < K; ++f) {
        mean += forward(st.loc[static_cast<std::size_t>(r)][static_cast<std::size_t>(f)],
                        extract_patch(v, roi_patch(st, r, f)));
      }
      row.push_back(mean / K);
    }
    dl_test.data.features.push_back(std::move(row));
  }
  st.dl_test = std::move(dl_test);

  // Volume arm: Welch selection sees only the optimization rows; the test
  // table is assembled afterwards from the already-chosen columns.
  std::vector<Volume> opt_vols, test_vols;
  std::vector<double> opt_icv, test_icv;
  for (std::size_t i : st.split.opt_idx) {
    opt_vols.push_back(st.cohort.volumes[i]);
    opt_icv.push_back(st.cohort.icv[i]);
  }
  for (std::size_t i : st.split.test_idx) {
    test_vols.push_back(st.cohort.volumes[i]);
    test_icv.push_back(st.cohort.icv[i]);
  }
  const BiomarkerTable v_full_opt =
      v_biomarker_table(opt_vols, st.labels_opt, opt_icv, st.rmap);
  st.v_sel = select_v_biomarkers(v_full_opt, st.labels_opt, cfg.features());
  std::vector<int> cols;
  for (const SelectedBiomarker& s : st.v_sel) cols.push_back(s.column);
  st.v_opt = take_columns(v_full_opt, cols);
  const BiomarkerTable v_full_test =
      v_biomarker_table(test_vols, st.labels_test, test_icv, st.rmap);
  st.v_test = take_columns(v_full_test, cols);

  write_biomarker_table((st.out / kBiomarkerFiles[0]).string(),
                        (st.out / kBiomarkerFiles[1]).string(), st.dl_opt);
  write_biomarker_table((st.out / kBiomarkerFiles[2]).string(),
                        (st.out / kBiomarkerFiles[3]).string(), st.dl_test);
  write_biomarker_table((st.out / kBiomarkerFiles[4]).string(),
                        (st.out / kBiomarkerFiles[5]).string(), st.v_opt);
  write_biomarker_table((st.out / kBiomarkerFiles[6]).string(),
                        (st.out / kBiomarkerFiles[7]).string(), st.v_test);
  Json selected = Json::array();
  for (const SelectedBiomarker& s : st.v_sel) {
    selected.push_back(
        {{"name", v_full_opt.data.feature_names[static_cast<std::size_t>(s.column)]},
         {"column", s.column},
         {"p_value", s.p_value}});
  }
  Json j;
  j["format"] = "v-selection";
  j["version"] = 1;
  j["columns"] = selected;
  write_text(st.out / kBiomarkerFiles[8], j.dump(2) + "\n");
}

void biomarkers_load(RunState& st) {
  st.dl_opt = read_biomarker_table((st.out / kBiomarkerFiles[0]).string(),
                                   (st.out / kBiomarkerFiles[1]).string());
  st.dl_test = read_biomarker_table((st.out / kBiomarkerFiles[2]).string(),
                                    (st.out / kBiomarkerFiles[3]).string());
  st.v_opt = read_biomarker_table((st.out / kBiomarkerFiles[4]).string(),
                                  (st.out / kBiomarkerFiles[5]).string());
  st.v_test = read_biomarker_table((st.out / kBiomarkerFiles[6]).string(),
                                   (st.out / kBiomarkerFiles[7]).string());
  const Json j = Json::parse(read_text(st.out / kBiomarkerFiles[8]), nullptr, false);
  if (j.is_discarded() || j.value("format", "") != "v-selection") {
    throw std::runtime_error("stored biomarker selection is not readable");
  }
  st.v_sel.clear();
  for (const Json& c : j.value("columns", Json::array())) {
    st.v_sel.push_back({c.value("column", -1), c.value("p_value", 1.0)});
  }
  // Stale-table guard: stored rows must line up with the current split.
  if (st.dl_opt.data.labels != st.labels_opt ||
      st.dl_test.data.labels != st.labels_test ||
      st.v_opt.data.labels != st.labels_opt ||
      st.v_test.data.labels != st.labels_test) {
    throw std::runtime_error("stored biomarker tables do not match the split");
  }
  const auto want = static_cast<std::size_t>(st.cfg.features());
  if (st.dl_opt.data.cols() != want || st.v_opt.data.cols() != want ||
      st.dl_test.data.cols() != want || st.v_test.data.cols() != want) {
    throw std::runtime_error("stored biomarker tables have the wrong width");
  }
}

void biomarkers_protocol(const RunState& st, ProtocolRecord& p) {
  p.ebm_features = static_cast<int>(st.dl_opt.data.cols());
}

// ---- fit-ebm ----

std::vector<std::string> ebm_artifacts(const RunState&) {
  return {"models/ebm_dl.json", "models/ebm_v.json"};
}

EbmModel fit_arm(const TabularDataset& d, const EbmConfig& ecfg, int pairs) {
  EbmModel m = fit_ebm(d, ecfg);
  const int nf = static_cast<int>(d.cols());
  const int k = std::min(pairs, nf * (nf - 1) / 2);
  if (k > 0) {
    std::vector<std::pair<int, int>> chosen;
    for (const PairCandidate& c : detect_pairs(d, m, k)) {
      chosen.emplace_back(c.i, c.j);
    }
    if (!chosen.empty()) m = add_pair_terms(d, m, chosen);
  }
  return m;
}

void fit_ebm_compute(RunState& st) {
  // Parity guard: the arms may differ only in what the columns contain.
  if (st.dl_opt.data.cols() != st.v_opt.data.cols()) {
    throw std::runtime_error("arms disagree on feature count: DL " +
                             std::to_string(st.dl_opt.data.cols()) + " vs V " +
                             std::to_string(st.v_opt.data.cols()));
  }
  EbmConfig ecfg = st.cfg.ebm;
  ecfg.seed = derive_seed(st.cfg.master_seed, "ebm");
  st.ebm_dl = fit_arm(st.dl_opt.data, ecfg, st.cfg.ebm_pairs);
  st.ebm_v = fit_arm(st.v_opt.data, ecfg, st.cfg.ebm_pairs);
  if (st.ebm_dl.pairs.size() != st.ebm_v.pairs.size()) {
    throw std::runtime_error("arms disagree on pair term count");
  }
  write_text(st.out / "models" / "ebm_dl.json", ebm_to_json(st.ebm_dl));
  write_text(st.out / "models" / "ebm_v.json", ebm_to_json(st.ebm_v));
}

void fit_ebm_load(RunState& st) {
  st.ebm_dl = ebm_from_json(read_text(st.out / "models" / "ebm_dl.json"));
  st.ebm_v = ebm_from_json(read_text(st.out / "models" / "ebm_v.json"));
}

void fit_ebm_protocol(const RunState& st, ProtocolRecord& p) {
  p.ebm_pairs = static_cast<int>(st.ebm_dl.pairs.size());
}

// ---- evaluate / compare / report ----

const std::array<const char*, 4> kModelNames = {"ebm_dl", "ebm_v", "glo_cnn",
                                                "glo_loc_ensemble"};

struct ScoreSet {
  std::array<std::vector<double>, 4> test, opt;
};

ScoreSet model_scores(const RunState& st) {
  ScoreSet ss;
  auto fill = [&st](std::array<std::vector<double>, 4>& out,
                    const BiomarkerTable& dl, const BiomarkerTable& v) {
    for (std::size_t i = 0; i < dl.data.features.size(); ++i) {
      const std::vector<double>& dl_row = dl.data.features[i];
      out[0].push_back(predict_proba(st.ebm_dl, dl_row));
      out[1].push_back(predict_proba(st.ebm_v, v.data.features[i]));
      out[2].push_back(dl_row[0]);
      out[3].push_back(ensemble_average(dl_row));
    }
  };
  fill(ss.test, st.dl_test, st.v_test);
  fill(ss.opt, st.dl_opt, st.v_opt);
  return ss;
}

std::vector<std::string> evaluate_artifacts(const RunState&) {
  std::vector<std::string> out{"reports/evaluation.csv", "reports/evaluation.json"};
  for (const char* name : kModelNames) {
    out.push_back("reports/roc_" + std::string(name) + ".csv");
  }
  return out;
}

void evaluate_compute(RunState& st) {
  const PipelineConfig& cfg = st.cfg;
  const ScoreSet ss = model_scores(st);
  std::string csv = eval_report_csv_header() + "\n";
  Json j;
  j["format"] = "evaluation";
  j["version"] = 1;
  for (std::size_t m = 0; m < kModelNames.size(); ++m) {
    EvalReport r = metrics(ss.test[m], st.labels_test, cfg.threshold);
    auto ci_for = [&](Metric metric, std::size_t mi) -> std::optional<MetricCi> {
      if (!metric_value(metric, ss.test[m], st.labels_test, cfg.threshold)) {
        return std::nullopt;
      }
      const BootstrapCi ci = bootstrap_ci(
          ss.test[m], st.labels_test, metric, cfg.bootstrap_reps,
          derive_seed(cfg.master_seed, "ci", m * 4 + mi), cfg.threshold);
      return MetricCi{ci.lo, ci.hi};
    };
    r.acc_ci = ci_for(Metric::Acc, 0);
    r.sen_ci = ci_for(Metric::Sen, 1);
    r.spe_ci = ci_for(Metric::Spe, 2);
    r.auc_ci = ci_for(Metric::Auc, 3);
    csv += eval_report_csv_row(kModelNames[m], r) + "\n";
    j["test"][kModelNames[m]] = Json::parse(eval_report_json(r));

    Json cv = Json::array();
    for (std::size_t f = 0; f < st.split.folds.size(); ++f) {
      std::vector<double> scores;
      std::vector<int> labels;
      for (std::size_t l : st.split.folds[f]) {
        scores.push_back(ss.opt[m][l]);
        labels.push_back(st.labels_opt[l]);
      }
      const EvalReport rf = metrics(scores, labels, cfg.threshold);
      Json row = {{"fold", f}, {"n", rf.n_test}, {"acc", rf.acc}};
      row["sen"] = rf.sen ? Json(*rf.sen) : Json(nullptr);
      row["spe"] = rf.spe ? Json(*rf.spe) : Json(nullptr);
      row["auc"] = rf.auc ? Json(*rf.auc) : Json(nullptr);
      cv.push_back(std::move(row));
    }
    j["cv"][kModelNames[m]] = cv;

    write_text(st.out / ("reports/roc_" + std::string(kModelNames[m]) + ".csv"),
               roc_csv(roc_points(ss.test[m], st.labels_test)));
  }
  write_text(st.out / "reports" / "evaluation.csv", csv);
  write_text(st.out / "reports" / "evaluation.json", j.dump(2) + "\n");
}

std::vector<std::string> compare_artifacts(const RunState&) {
  return {"reports/comparison.csv", "reports/comparison.json"};
}

void compare_compute(RunState& st) {
  const PipelineConfig& cfg = st.cfg;
  const ScoreSet ss = model_scores(st);
  const std::vector<std::string> test_ids = ids_of(st.split.test_idx);
  const std::vector<std::string> opt_ids = ids_of(st.split.opt_idx);
  // The three models under comparison; the ensemble is evaluated but has
  // no pairwise row of its own.
  const std::array<std::pair<std::size_t, std::size_t>, 3> pairs = {
      {{0, 1}, {0, 2}, {1, 2}}};
  std::vector<ComparisonRow> rows;
  for (std::size_t pi = 0; pi < pairs.size(); ++pi) {
    const auto [a, b] = pairs[pi];
    const ModelScores cv_a{kModelNames[a], opt_ids, ss.opt[a]};
    const ModelScores cv_b{kModelNames[b], opt_ids, ss.opt[b]};
    for (ComparisonRow& r :
         compare_cv(cv_a, cv_b, st.labels_opt, st.split.folds, cfg.threshold)) {
      rows.push_back(std::move(r));
    }
    const ModelScores te_a{kModelNames[a], test_ids, ss.test[a]};
    const ModelScores te_b{kModelNames[b], test_ids, ss.test[b]};
    for (ComparisonRow& r : compare_held_out(
             te_a, te_b, st.labels_test, cfg.bootstrap_reps,
             derive_seed(cfg.master_seed, "compare", pi), cfg.threshold)) {
      rows.push_back(std::move(r));
    }
  }
  write_text(st.out / "reports" / "comparison.csv", comparison_csv(rows));
  write_text(st.out / "reports" / "comparison.json", comparison_json(rows) + "\n");
}

std::vector<std::string> report_artifacts(const RunState&) {
  return {"reports/importance_ebm_dl.csv", "reports/importance_ebm_dl.json",
          "reports/shapes_ebm_dl.json",    "reports/importance_ebm_v.csv",
          "reports/importance_ebm_v.json", "reports/shapes_ebm_v.json"};
}

void report_compute(RunState& st) {
  const std::array<std::pair<const EbmModel*, const BiomarkerTable*>, 2> arms = {
      {{&st.ebm_dl, &st.dl_opt}, {&st.ebm_v, &st.v_opt}}};
  const std::array<const char*, 2> arm_names = {"ebm_dl", "ebm_v"};
  for (std::size_t a = 0; a < arms.size(); ++a) {
    const auto rows = nonzero_importance(*arms[a].first, arms[a].second->data);
    std::string csv = "term,mean_abs_contribution\n";
    Json terms = Json::array();
    for (const auto& [term, value] : rows) {
      csv += term + "," + fmt_g(value) + "\n";
      terms.push_back({{"term", term}, {"value", value}});
    }
    Json j;
    j["format"] = "importance";
    j["version"] = 1;
    j["model"] = arm_names[a];
    j["terms"] = terms;
    const std::string base = "reports/importance_" + std::string(arm_names[a]);
    write_text(st.out / (base + ".csv"), csv);
    write_text(st.out / (base + ".json"), j.dump(2) + "\n");
    write_text(st.out / ("reports/shapes_" + std::string(arm_names[a]) + ".json"),
               shape_dump_json(*arms[a].first) + "\n");
  }
}

// ---- driver ----

struct StageDef {
  Stage stage;
  std::function<std::vector<std::string>(const RunState&)> artifacts;
  std::function<void(RunState&)> compute;
  std::function<void(RunState&)> load;
  std::function<void(const RunState&, ProtocolRecord&)> protocol;  // or null
};

std::vector<StageDef> stage_defs() {
  auto nothing = [](RunState&) {};
  return {
      {Stage::generate, generate_artifacts, generate_compute, generate_load, nullptr},
      {Stage::split, [](const RunState&) { return std::vector<std::string>{"splits/split.json"}; },
       split_compute, split_load, split_protocol},
      {Stage::train_glo, glo_artifacts, glo_compute, glo_load, glo_protocol},
      {Stage::occlude, occlude_artifacts, occlude_compute, occlude_load, nullptr},
      {Stage::select_rois, rois_artifacts, rois_compute, rois_load, rois_protocol},
      {Stage::train_loc, loc_artifacts, loc_compute, loc_load, nullptr},
      {Stage::biomarkers, biomarker_artifacts, biomarkers_compute,
       biomarkers_load, biomarkers_protocol},
      {Stage::fit_ebm, ebm_artifacts, fit_ebm_compute, fit_ebm_load, fit_ebm_protocol},
      {Stage::evaluate, evaluate_artifacts, evaluate_compute, nothing, nullptr},
      {Stage::compare, compare_artifacts, compare_compute, nothing, nullptr},
      {Stage::report, report_artifacts, report_compute, nothing, nullptr},
  };
}

template <typename Fn>
void guarded(const char* stage, Fn&& fn) {
  try {
    fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

void run_one(RunState& st, RunManifest& man,
             const std::map<std::string, StageRecord>& prior, const StageDef& def,
             StageMode mode, const fs::path& manifest_path) {
  const char* name = stage_name(def.stage);
  std::vector<std::string> paths;
  guarded(name, [&] { paths = def.artifacts(st); });

  bool valid = false;
  const auto it = prior.find(name);
  if (it != prior.end() && it->second.artifacts.size() == paths.size()) {
    valid = true;
    for (std::size_t i = 0; i < paths.size() && valid; ++i) {
      const ArtifactRecord& a = it->second.artifacts[i];
      if (a.path != paths[i]) valid = false;
      else {
        const fs::path abs = st.out / a.path;
        valid = fs::exists(abs) && sha256_file(abs.string()) == a.sha256;
      }
    }
  }

  StageRecord rec;
  rec.name = name;
  if (mode == StageMode::load_only && !valid) {
    throw StageError(name,
                     "artifacts missing or stale; run this stage (or run-full) first");
  }
  if (valid && mode != StageMode::compute) {
    guarded(name, [&] { def.load(st); });
    rec.reused = true;
    rec.artifacts = it->second.artifacts;
  } else {
    const auto t0 = std::chrono::steady_clock::now();
    guarded(name, [&] { def.compute(st); });
    for (const std::string& p : paths) {
      const fs::path abs = st.out / p;
      if (!fs::exists(abs)) {
        throw StageError(name, "stage did not produce " + p);
      }
      rec.artifacts.push_back({p, sha256_file(abs.string())});
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                      .count();
  }
  if (def.protocol) def.protocol(st, man.protocol);
  man.stages.push_back(std::move(rec));
  write_manifest(manifest_path.string(), man);
}

}  // namespace

RunManifest run_pipeline(const PipelineConfig& cfg, Stage last,
                         bool require_prior) {
  validate_config(cfg);
  RunState st;
  st.cfg = cfg;
  st.out = cfg.out_dir;
  fs::create_directories(st.out);
  const std::string snapshot = config_to_json(cfg);

  std::map<std::string, StageRecord> prior;
  const fs::path manifest_path = st.out / "manifest.json";
  if (fs::exists(manifest_path)) {
    try {
      RunManifest old = read_manifest(manifest_path.string());
      // Artifacts are pure functions of the config; a different snapshot
      // invalidates everything at once.
      if (old.config_json == Json::parse(snapshot).dump(2)) {
        for (StageRecord& s : old.stages) prior[s.name] = std::move(s);
      }
    } catch (const std::exception&) {
      // unreadable manifest: recompute from scratch
    }
  }

  RunManifest man;
  man.config_json = snapshot;
  const std::vector<StageDef> defs = stage_defs();
  for (int i = 0; i <= static_cast<int>(last); ++i) {
    const StageMode mode =
        require_prior
            ? (i < static_cast<int>(last) ? StageMode::load_only : StageMode::compute)
            : StageMode::reuse;
    run_one(st, man, prior, defs[static_cast<std::size_t>(i)], mode, manifest_path);
  }
  return man;
}

RunManifest run_full(const PipelineConfig& cfg) {
  return run_pipeline(cfg, Stage::report, false);
}

}  // namespace voxebm
