#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace voxebm {

// Rows are subjects, columns are named features; labels are binary.
struct TabularDataset {
  std::vector<std::vector<double>> features;  // N rows of n values
  std::vector<int> labels;                    // N values in {0,1}
  std::vector<std::string> feature_names;     // n names

  std::size_t rows() const { return features.size(); }
  std::size_t cols() const { return feature_names.size(); }
};

// Throws std::invalid_argument on shape mismatch, non-finite features, bad
// labels, or (when required) fewer than 2 rows / single-class labels.
void validate_dataset(const TabularDataset& d, bool for_fitting);

// Per-feature strictly increasing cut points; values bin via the first cut
// >= x, so out-of-range queries land in the edge bins.
struct BinMap {
  std::vector<std::vector<double>> cuts;
  int bin_count(int feature) const {
    return static_cast<int>(cuts[static_cast<std::size_t>(feature)].size()) + 1;
  }
};

int bin_of(const std::vector<double>& cuts, double x);

// Quantile binning: cut points at the 1/B..(B-1)/B linear-interpolation
// quantiles with duplicates collapsed; features with at most max_bins
// distinct values instead get midpoint cuts (one bin per distinct value).
BinMap fit_bins(const TabularDataset& d, int max_bins);

struct ShapeFunction {
  int feature = -1;
  std::vector<double> scores;  // one per bin, mean-centered after fitting
};

struct PairTerm {
  int fi = -1, fj = -1;        // fi < fj
  std::vector<double> grid;    // bin_count(fi) x bin_count(fj), row-major
};

struct EbmConfig {
  int rounds = 1000;
  double learning_rate = 0.01;
  int bags = 8;
  int max_leaves = 3;
  int max_bins = 32;
  // 15% internal stratified holdout for early stopping; patience in rounds.
  // Set val_fraction to 0 to boost on all rows with no early stop. When the
  // dataset is too small to carve a stratified holdout, early stopping is
  // disabled automatically (recorded in the fitted model).
  double val_fraction = 0.15;
  int early_stop_patience = 50;
  std::uint64_t seed = 0;
  bool trace_loss = false;  // record per-round training log-loss
};

// Additive logit-link model: score(x) = intercept + sum_j f_j(x_j)
// + sum f_ij(x_i, x_j), every term a bin lookup.
struct EbmModel {
  double intercept = 0.0;
  BinMap bins;
  std::vector<ShapeFunction> shapes;
  std::vector<PairTerm> pairs;
  std::vector<std::string> feature_names;
  EbmConfig config;
  int rounds_used = 0;       // mains boosting rounds after early stop
  int pair_rounds_used = 0;  // pair boosting rounds after early stop
  bool early_stop_active = false;
  bool early_stopped = false;
  std::vector<double> train_loss_trace;  // filled when config.trace_loss

  bool fitted() const { return !shapes.empty(); }
};

// Cyclic gradient boosting: every round visits features in index order and,
// for each, averages `bags` bootstrap-bagged depth-limited regression trees
// (<= max_leaves leaves) fit to the log-loss gradient, scaled by the
// learning rate. The intercept starts at the logit of the full-data base
// rate; after boosting each shape function is mean-centered under the
// full-data bin counts with the mass moved into the intercept.
EbmModel fit_ebm(const TabularDataset& d, const EbmConfig& cfg);

struct PairCandidate {
  int i = -1, j = -1;  // i < j
  double strength = 0.0;
};

// Residual interaction screening: for every unordered feature pair, the
// strength is the best squared-residual reduction achievable by a single
// axis-aligned 2x2 cut of the pair's binned residual grid. Strengths below
// 1e-12 are clamped to zero. Descending order, ties lexicographic.
std::vector<PairCandidate> detect_pairs(const TabularDataset& d,
                                        const EbmModel& model, int top_k);

// Boosts the listed pair grids against the frozen mains model with the same
// round/bag/learning-rate regime (seeds derived from the model's seed so
// mains and pair streams are independent). Mains stay bit-identical.
EbmModel add_pair_terms(const TabularDataset& d, const EbmModel& model,
                        const std::vector<std::pair<int, int>>& pairs);

double predict_score(const EbmModel& model, const std::vector<double>& x);
double predict_proba(const EbmModel& model, const std::vector<double>& x);

// Per-term additive contributions in fixed order (mains by feature index,
// then pairs); they sum to score - intercept exactly because predict_score
// accumulates in the same order.
std::vector<std::pair<std::string, double>> term_contributions(
    const EbmModel& model, const std::vector<double>& x);

// Mean absolute contribution per term over the dataset, descending; ties
// keep term order.
std::vector<std::pair<std::string, double>> global_importance(
    const EbmModel& model, const TabularDataset& d);

// Versioned JSON; numeric round-trip is bit-exact.
std::string ebm_to_json(const EbmModel& model);
EbmModel ebm_from_json(const std::string& text);

// Shared link helpers. The score is clamped to +-36 before the logistic so
// probabilities stay strictly inside (0,1).
double logistic_clamped(double score);
double logit(double p);
double log_loss(const std::vector<double>& probs, const std::vector<int>& labels);

}  // namespace voxebm
