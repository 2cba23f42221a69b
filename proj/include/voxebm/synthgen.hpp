#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "voxebm/rng.hpp"
#include "voxebm/volume.hpp"

namespace voxebm {

// Single-region atrophy: positive subjects lose `reduction` of the region's
// intensity.
struct RegionEffect {
  int region = -1;
  double reduction = 0.0;  // fraction in [0, 1]
};

// Paired atrophy carrying label information only in the joint pattern.
// Every subject loses a random fraction of intensity in both regions, up
// to `reduction`: positives draw one magnitude shared by both sides, so
// the two regions stay equally bright; negatives draw two independent
// magnitudes, leaving a contrast between them. Each region's marginal
// loss distribution is uniform(0, reduction) for both classes, so no
// single region separates them on its own — and because the summed loss
// has the same support either way, neither does total gray matter.
struct PairEffect {
  int region_a = -1;
  int region_b = -1;
  double reduction = 0.0;  // maximum fractional loss per region
};

struct SynthConfig {
  Dims dims{30, 36, 30};
  int n_regions = 16;
  int n_per_class = 60;
  std::vector<RegionEffect> effects;
  std::vector<PairEffect> pair_effects;
  double noise_sd = 0.05;
  double label_noise = 0.0;  // chance a subject's phenotype opposes its label
  std::uint64_t seed = 0;
};

// Ellipsoidal head mask (semi-axes 0.45 of each extent) partitioned into
// n_regions Voronoi cells around seeded interior sites. region holds one
// entry per voxel: -1 outside the mask, else the region id.
struct Atlas {
  Dims dims;
  std::vector<int> region;
  int n_regions = 0;
  std::int64_t mask_voxels = 0;
  std::vector<std::int64_t> region_voxels;
};

Atlas make_atlas(const SynthConfig& cfg);

// Unordered pairs (a < b) of regions sharing at least one face.
std::vector<std::pair<int, int>> adjacent_regions(const Atlas& atlas);

// One subject volume: baseline 0.8 inside the mask scaled by a per-subject
// global factor U(0.9, 1.1), label-dependent regional reductions, Gaussian
// noise on mask voxels, everything clamped to [0, 1]. Background voxels
// stay exactly 0. Draw order: scale, the pair-effect magnitudes (one draw
// for a positive, two for a negative), then noise in voxel index order
// (skipped entirely when noise_sd = 0).
Volume sample_subject(const SynthConfig& cfg, const Atlas& atlas, int label,
                      Rng& rng);

struct Cohort {
  std::vector<Volume> volumes;
  std::vector<int> labels;
  std::vector<double> icv;  // mask voxel count x subject scale
  std::vector<std::uint64_t> subject_seeds;
};

// 2 * n_per_class subjects, label-0 block first. Subject i draws from an
// independent generator seeded by derive_seed(cfg.seed, "subject", i), so
// any subject can be regenerated in isolation.
Cohort make_cohort(const SynthConfig& cfg, const Atlas& atlas);

// Directory layout: subj000.rv1 ... plus manifest.csv (id, label, icv,
// seed). read_cohort restores exactly what write_cohort stored.
void write_cohort(const std::string& dir, const Cohort& cohort);
Cohort read_cohort(const std::string& dir);

}  // namespace voxebm
