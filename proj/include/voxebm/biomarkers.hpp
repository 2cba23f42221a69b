#pragma once

#include <functional>
#include <string>
#include <vector>

#include "voxebm/ebm.hpp"
#include "voxebm/synthgen.hpp"
#include "voxebm/volume.hpp"

namespace voxebm {

// Region labels stored as voxel scalars: 0 = background, regions 1..M.
// Names line up with ids, so names[0] belongs to region 1.
struct RegionMap {
  Volume labels;
  int n_regions = 0;
  std::vector<std::string> names;
};

// Lifts a generator atlas (-1 background, 0-based ids) into a RegionMap
// with ids 1..M and generated names "Region01", "Region02", ...
RegionMap region_map(const Atlas& atlas);

enum class BiomarkerKind { dl_global, dl_roi, volume };

// Where a biomarker column came from: a trained scorer or an atlas region.
struct BiomarkerInfo {
  BiomarkerKind kind = BiomarkerKind::volume;
  std::string source;
};

// Feature table handed to the EBM, with one provenance entry per column.
// Row order always equals cohort subject order.
struct BiomarkerTable {
  TabularDataset data;
  std::vector<BiomarkerInfo> provenance;
};

// A predictor maps one volume to the trained scorer's probability of the
// positive class; a trainer builds one from a training subset.
using VolumePredictor = std::function<double(const Volume&)>;
using ScorerTrainer = std::function<VolumePredictor(
    const std::vector<Volume>&, const std::vector<int>&)>;

// One out-of-fold DL-biomarker column plus the per-fold predictors that
// produced it (fold order preserved); the predictors also serve held-out
// subjects via fold_mean_predict and per-fold occlusion mapping.
struct OofColumn {
  std::vector<double> values;
  std::vector<VolumePredictor> models;
};

// Trains one scorer per fold on that fold's complement, then scores each
// subject with the model that never saw it. `folds` lists the test_cv
// subject indices of each fold and must partition 0..N-1 exactly; overlap,
// gaps, or out-of-range indices throw std::invalid_argument, as does a
// predictor value outside [0,1] (DL-biomarkers are probabilities).
OofColumn oof_dl_biomarkers(const std::vector<Volume>& volumes,
                            const std::vector<int>& labels,
                            const std::vector<std::vector<std::size_t>>& folds,
                            const ScorerTrainer& trainer);

// Mean probability across fold models: the rule for subjects outside the
// cross-validated cohort.
double fold_mean_predict(const std::vector<VolumePredictor>& models,
                         const Volume& v);

// Summed voxel values per region in region-id order, plus their total.
// The total accumulates the per-region sums in id order, so the partition
// identity total == sum(by_region) holds exactly.
struct RegionVolumes {
  std::vector<double> by_region;
  double total = 0.0;
};

// Sums v over each region of the map. Throws std::invalid_argument when
// dims differ or a label voxel is not an integer in 0..M.
RegionVolumes region_volumes(const Volume& v, const RegionMap& map);

// Divides every volume by the intracranial volume; icv must be positive.
std::vector<double> icv_correct(const std::vector<double>& volumes,
                                double icv);

// Two-sided Welch t-test p-value with Welch-Satterthwaite degrees of
// freedom. Needs at least two values per sample. When both samples have
// zero variance the statistic is undefined and the result is 1, which
// ranks such a column behind every separating one.
double welch_p_value(const std::vector<double>& a,
                     const std::vector<double>& b);

struct SelectedBiomarker {
  int column = -1;
  double p_value = 1.0;
};

// Ranks columns by Welch p-value between the two classes (ascending, ties
// broken lexicographically by column name) and returns the best top_k.
// Throws std::invalid_argument unless both classes are present and
// 1 <= top_k <= column count.
std::vector<SelectedBiomarker> select_v_biomarkers(
    const BiomarkerTable& table, const std::vector<int>& labels, int top_k);

// New table holding the given columns (in the given order) of `table`.
BiomarkerTable take_columns(const BiomarkerTable& table,
                            const std::vector<int>& columns);

// ICV-corrected volume biomarkers for a cohort: column 0 is "Total brain",
// then one column per region in id order.
BiomarkerTable v_biomarker_table(const std::vector<Volume>& volumes,
                                 const std::vector<int>& labels,
                                 const std::vector<double>& icv,
                                 const RegionMap& map);

// Mean of the probabilities; every value must lie in [0,1] and the vector
// overload rejects an empty list.
double ensemble_average(const std::vector<double>& probs);
double ensemble_average(double glo, const std::vector<double>& locs);

// CSV of label + feature columns, with a JSON sidecar carrying per-column
// provenance. Values round-trip bit-exactly. Reading validates that the
// sidecar's column names match the CSV header.
void write_biomarker_table(const std::string& csv_path,
                           const std::string& sidecar_path,
                           const BiomarkerTable& table);
BiomarkerTable read_biomarker_table(const std::string& csv_path,
                                    const std::string& sidecar_path);

}  // namespace voxebm
