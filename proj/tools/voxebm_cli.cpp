// Command-line front end. Each stage of the run is a verb; a verb expects
// everything before it to be reusable on disk and recomputes only itself,
// while run-full walks all stages and reuses whatever still hash-matches.
// Exit codes: 0 success, 2 configuration/usage error, 3 stage failure.
#include <cstdio>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "voxebm/pipeline.hpp"

namespace {

struct CliOverrides {
  std::string config_path;
  std::optional<std::string> out_dir;
  std::optional<std::uint64_t> master_seed;
  std::optional<double> test_fraction;
  std::optional<int> folds, glo_epochs, loc_epochs, rois, bootstrap_reps;
  bool per_fold_rois = false;
  bool signed_group_map = false;
};

void add_common_options(CLI::App* sub, CliOverrides& o) {
  sub->add_option("--config", o.config_path, "pipeline configuration (JSON)")
      ->required();
  sub->add_option("--out-dir", o.out_dir, "override the run directory");
  sub->add_option("--master-seed", o.master_seed, "override the master seed");
  sub->add_option("--test-fraction", o.test_fraction,
                  "override the held-out fraction");
  sub->add_option("--folds", o.folds, "override the fold count");
  sub->add_option("--glo-epochs", o.glo_epochs,
                  "override the whole-volume training epochs");
  sub->add_option("--loc-epochs", o.loc_epochs,
                  "override the patch training epochs");
  sub->add_option("--rois", o.rois, "override the ROI count");
  sub->add_option("--bootstrap-reps", o.bootstrap_reps,
                  "override the bootstrap repetitions");
  sub->add_flag("--per-fold-rois", o.per_fold_rois,
                "re-select ROIs per fold from fold-external maps");
  sub->add_flag("--signed-group-map", o.signed_group_map,
                "rank ROIs on the signed group map instead of |impact|");
}

voxebm::PipelineConfig effective_config(const CliOverrides& o) {
  voxebm::PipelineConfig cfg = voxebm::load_pipeline_config(o.config_path);
  if (o.out_dir) cfg.out_dir = *o.out_dir;
  if (o.master_seed) cfg.master_seed = *o.master_seed;
  if (o.test_fraction) cfg.test_fraction = *o.test_fraction;
  if (o.folds) cfg.folds = *o.folds;
  if (o.glo_epochs) cfg.glo_epochs = *o.glo_epochs;
  if (o.loc_epochs) cfg.loc_epochs = *o.loc_epochs;
  if (o.rois) cfg.occlusion.top_k = *o.rois;
  if (o.bootstrap_reps) cfg.bootstrap_reps = *o.bootstrap_reps;
  if (o.per_fold_rois) cfg.per_fold_rois = true;
  if (o.signed_group_map) cfg.absolute_group_map = false;
  voxebm::validate_config(cfg);
  return cfg;
}

void print_stages(const voxebm::RunManifest& man, const std::string& out_dir) {
  for (const voxebm::StageRecord& s : man.stages) {
    if (s.reused) {
      std::printf("%-12s reused\n", s.name.c_str());
    } else {
      std::printf("%-12s computed  %8.2f s  (%zu artifact%s)\n", s.name.c_str(),
                  s.seconds, s.artifacts.size(),
                  s.artifacts.size() == 1 ? "" : "s");
    }
  }
  std::printf("manifest     %s/manifest.json\n", out_dir.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Biomarker classification pipeline over synthetic 3D cohorts: "
      "whole-volume and per-ROI neural scorers feeding glass-box models, "
      "against a volume-biomarker baseline."};
  app.require_subcommand(1);

  CliOverrides o;
  const struct {
    const char* verb;
    const char* what;
  } verbs[] = {
      {"generate", "synthesize the cohort volumes"},
      {"split", "stratified held-out split and CV folds"},
      {"train-glo", "train the whole-volume scorers, one per fold"},
      {"occlude", "out-of-fold occlusion sensitivity maps"},
      {"select-rois", "rank ROI patches on the group map"},
      {"train-loc", "train the per-ROI patch scorers"},
      {"biomarkers", "assemble the DL and volume feature tables"},
      {"fit-ebm", "fit the glass-box model on each arm"},
      {"evaluate", "test-set metrics with bootstrap CIs"},
      {"compare", "pairwise model comparisons, CV and held-out"},
      {"report", "term importance and shape functions"},
      {"run-full", "run every stage in order"},
  };
  for (const auto& v : verbs) {
    add_common_options(app.add_subcommand(v.verb, v.what), o);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);  // --help and friends
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  const std::string verb = app.get_subcommands().front()->get_name();
  try {
    const voxebm::PipelineConfig cfg = effective_config(o);
    voxebm::RunManifest man;
    if (verb == "run-full") {
      man = voxebm::run_full(cfg);
    } else {
      const std::optional<voxebm::Stage> stage = voxebm::stage_from_name(verb);
      if (!stage) {
        std::fprintf(stderr, "unknown stage %s\n", verb.c_str());
        return 2;
      }
      man = voxebm::run_pipeline(cfg, *stage, /*require_prior=*/true);
    }
    print_stages(man, cfg.out_dir);
  } catch (const voxebm::ConfigError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 2;
  } catch (const voxebm::StageError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 3;
  }
  return 0;
}
