#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "voxebm/biomarkers.hpp"
#include "voxebm/ebm.hpp"
#include "voxebm/eval_stats.hpp"
#include "voxebm/occlusion.hpp"
#include "voxebm/scorer.hpp"
#include "voxebm/synthgen.hpp"

namespace voxebm {

// Configuration problems (unreadable file, unknown keys, out-of-range
// values) are distinct from stage failures so the CLI can map them to
// exit code 2 instead of 3.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Failure inside a pipeline stage, tagged with the stage that raised it.
struct StageError : std::runtime_error {
  std::string stage;
  StageError(const std::string& stage_name, const std::string& message)
      : std::runtime_error("[" + stage_name + "] " + message),
        stage(stage_name) {}
};

// One run, one JSON document, nested sections per module. master_seed is
// the only required key; everything else has the defaults below. Every
// random stream derives from the master seed:
//   cohort            derive_seed(master, "cohort")
//   test split        derive_seed(master, "split")
//   CV folds          derive_seed(master, "folds")
//   Glo fold f        derive_seed(master, "glo-init", f)   weights
//                     derive_seed(master, "glo", f)        batch order
//   Loc ROI r fold f  derive_seed(master, "loc-init", r*folds + f)
//                     derive_seed(master, "loc", r*folds + f)
//   EBM (both arms)   derive_seed(master, "ebm") — shared on purpose, the
//                     arms must differ only in their feature tables
//   test-set CIs      derive_seed(master, "ci", model*4 + metric)
//   model comparisons derive_seed(master, "compare", pair), then
//                     derive_seed(that, "cmp-metric", metric) per metric
struct PipelineConfig {
  std::string out_dir = "run";
  std::uint64_t master_seed = 0;
  SynthConfig cohort;          // cohort.seed is ignored; derived instead
  double test_fraction = 0.1;  // stratified held-out share
  int folds = 5;
  int c1 = 8, c2 = 16;  // conv channel widths, Glo and Loc alike
  int glo_epochs = 30;
  int loc_epochs = 30;
  double scorer_learning_rate = 5e-4;
  int batch_size = 16;
  OcclusionConfig occlusion;       // occlusion.top_k is the ROI count
  bool absolute_group_map = true;  // rank ROIs on summed |impact|
  bool per_fold_rois = false;      // re-select ROIs per fold (see below)
  EbmConfig ebm;                   // ebm.seed is ignored; derived instead
  int ebm_pairs = 2;               // FAST pair terms added per arm
  int bootstrap_reps = 2000;
  double threshold = 0.5;

  // Features per EBM arm: Glo + one per ROI on the DL side, the same
  // count Welch-selected from {total, regions} on the volume side.
  int features() const { return occlusion.top_k + 1; }
};

// Parses and validates a config document / file. Unknown keys are errors:
// a silently ignored typo would change the protocol. Throws ConfigError.
PipelineConfig config_from_json(const std::string& text);
PipelineConfig load_pipeline_config(const std::string& path);

// Canonical snapshot (defaults filled in, keys sorted). Two configs are
// interchangeable for resume purposes iff their snapshots are equal.
std::string config_to_json(const PipelineConfig& cfg);

// Re-validates ranges after CLI flag overrides. Throws ConfigError.
void validate_config(const PipelineConfig& cfg);

// Lowercase hex SHA-256. The file overload streams and throws
// std::runtime_error when the file cannot be read.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::string& path);

// Subject ids as written to the cohort manifest ("subj000", ...).
std::string subject_id(std::size_t index);

// The fixed stage order of a full run. Single-verb CLI calls execute one
// stage and require everything before it to be reusable from disk.
enum class Stage {
  generate,
  split,
  train_glo,
  occlude,
  select_rois,
  train_loc,
  biomarkers,
  fit_ebm,
  evaluate,
  compare,
  report,
};
inline constexpr int kStageCount = 11;
const char* stage_name(Stage s);
std::optional<Stage> stage_from_name(std::string_view name);

// Test/optimization membership plus the fold assignment of the
// optimization subjects, all as cohort indices. fold_of and folds are
// local to opt_idx order (opt_idx is ascending).
struct SplitInfo {
  std::vector<std::size_t> test_idx;
  std::vector<std::size_t> opt_idx;
  std::vector<int> fold_of;                     // per opt-local subject
  std::vector<std::vector<std::size_t>> folds;  // opt-local indices
};

// Serialized by subject id so the file is auditable. split_from_json is
// the split-stage boundary guard: it throws std::runtime_error when the
// test set and the folds intersect, when a subject is missing or listed
// twice, when an id is unknown, or when the fold count differs.
std::string split_to_json(const SplitInfo& split, double test_fraction);
SplitInfo split_from_json(const std::string& text, std::size_t n_subjects,
                          int folds);

// One file either run produced, addressed relative to the run directory.
struct ArtifactRecord {
  std::string path;
  std::string sha256;
};

struct StageRecord {
  std::string name;
  bool reused = false;  // artifacts were hash-valid from a prior run
  double seconds = 0.0;
  std::vector<ArtifactRecord> artifacts;
};

// Protocol constants as the stages actually used them (not as requested):
// split and fold counts from the realized split, feature and pair counts
// from the fitted tables and models, optimizer constants from the train
// config handed to the scorers. Negative/unset fields mean the stage that
// records them has not run. Checking these against the configuration is
// the run's protocol audit.
struct ProtocolRecord {
  double test_fraction = -1.0;
  int folds = -1;
  int rois = -1;
  int ebm_features = -1;
  int ebm_pairs = -1;
  double scorer_learning_rate = -1.0;
  int batch_size = -1;
};

// Written to <out_dir>/manifest.json after every completed stage, so an
// interrupted run resumes from its last good stage. Stage timings vary
// between runs; artifact hashes and report bytes must not.
struct RunManifest {
  std::string config_json;  // canonical snapshot of the driving config
  ProtocolRecord protocol;
  std::vector<StageRecord> stages;
};

std::string manifest_to_json(const RunManifest& m);
RunManifest manifest_from_json(const std::string& text);
void write_manifest(const std::string& path, const RunManifest& m);
RunManifest read_manifest(const std::string& path);

// Runs stages generate..last in out_dir. A stage is reused instead of
// recomputed when the stored manifest carries the same config snapshot
// and every artifact of the stage still hash-matches; anything else is
// recomputed and the manifest rewritten. With require_prior=true (the
// single-verb CLI mode) the stages before `last` must be reusable as-is
// — nothing is recomputed but `last` itself — and a stale prerequisite
// is a StageError telling the caller which stage to run.
//
// The per-fold ROI variant (per_fold_rois) re-selects ROIs for fold f
// from the group map of the subjects outside fold f, so a fold's ROI
// placement never sees the subjects its local scorers are validated on.
RunManifest run_pipeline(const PipelineConfig& cfg, Stage last,
                         bool require_prior);
RunManifest run_full(const PipelineConfig& cfg);

// Named per-subject scores of one model on one evaluation set.
struct ModelScores {
  std::string name;
  std::vector<std::string> ids;
  std::vector<double> scores;
};

// One pairwise metric difference between two models.
struct ComparisonRow {
  std::string model_a, model_b;
  std::string split;  // "cv" or "test"
  Metric metric = Metric::Acc;
  double diff = 0.0;          // metric(A) - metric(B)
  double lo = 0.0, hi = 0.0;  // 95% CI of the difference
  std::optional<double> p;    // absent when the statistic is degenerate
  std::optional<double> t;    // corrected t statistic, cv rows only
};

// Held-out comparison: the paired bootstrap of metric(A) - metric(B) on a
// shared test set, one row per metric. The id vectors must match element
// by element (std::invalid_argument otherwise) — resampling is paired by
// subject, so the models must score the same subjects in the same order.
std::vector<ComparisonRow> compare_held_out(const ModelScores& a,
                                            const ModelScores& b,
                                            const std::vector<int>& labels,
                                            int reps, std::uint64_t seed,
                                            double threshold = 0.5);

// Cross-validation comparison: per-fold metric differences on out-of-fold
// predictions, tested with the corrected resampled t-test (n_test is the
// rounded mean fold size, n_train the rest). The CI comes from the same
// corrected standard error and the Student's t quantile; when the fold
// differences have zero variance the row is degenerate (p and t absent,
// CI collapsed onto the mean). Metrics undefined in any fold are skipped.
std::vector<ComparisonRow> compare_cv(
    const ModelScores& a, const ModelScores& b, const std::vector<int>& labels,
    const std::vector<std::vector<std::size_t>>& folds, double threshold = 0.5);

std::string comparison_csv(const std::vector<ComparisonRow>& rows);
std::string comparison_json(const std::vector<ComparisonRow>& rows);

// Global importance with zero-contribution terms dropped: a model boosted
// for zero rounds reports an empty list. Term names come straight from the
// feature table, pair terms as "A × B".
std::vector<std::pair<std::string, double>> nonzero_importance(
    const EbmModel& model, const TabularDataset& d);

// Every term's bin cut points and scores (pair terms: both axes plus the
// row-major grid), the data behind shape-function plots.
std::string shape_dump_json(const EbmModel& model);

}  // namespace voxebm
