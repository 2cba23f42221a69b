#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace voxebm {

struct MetricCi {
  double lo = 0.0, hi = 0.0;
};

// Point metrics for a binary classifier at a fixed threshold plus optional
// bootstrap CIs. SEN/SPE/AUC are absent when the label set makes them
// undefined (single-class input).
struct EvalReport {
  double acc = 0.0;
  std::optional<double> sen, spe, auc;
  std::optional<MetricCi> acc_ci, sen_ci, spe_ci, auc_ci;
  int n_test = 0;
  double threshold = 0.5;
};

enum class Metric { Acc, Sen, Spe, Auc };

const char* metric_name(Metric m);

// ACC = correct/N with "score > threshold" predicting positive;
// SEN = TP/(TP+FN); SPE = TN/(TN+FP); AUC by average-rank Mann-Whitney
// (ties get half credit), which matches O(N^2) pair counting exactly.
EvalReport metrics(const std::vector<double>& scores,
                   const std::vector<int>& labels, double threshold = 0.5);

std::optional<double> auc_rank(const std::vector<double>& scores,
                               const std::vector<int>& labels);

// Single-metric evaluation used by the bootstrap; returns nullopt when the
// metric is undefined on this sample.
std::optional<double> metric_value(Metric m, const std::vector<double>& scores,
                                   const std::vector<int>& labels,
                                   double threshold);

struct BootstrapCi {
  double lo = 0.0, hi = 0.0;
  int accepted = 0;   // always == reps on success
  int redraws = 0;    // degenerate single-class resamples that were rethrown
};

// Percentile bootstrap over (score, label) pairs: 2.5/97.5 linear-interpolated
// percentiles of `metric` across `reps` accepted resamples. Single-class
// resamples are redrawn; more than 10*reps total redraws is an error. Each
// resample draws from its own seed derived from (seed, index) so results do
// not depend on scheduling.
BootstrapCi bootstrap_ci(const std::vector<double>& scores,
                         const std::vector<int>& labels, Metric metric,
                         int reps, std::uint64_t seed, double threshold = 0.5);

// Linear-interpolation percentile of a pre-sorted sample, p in [0, 100].
double percentile_sorted(const std::vector<double>& sorted, double p);

struct TTestResult {
  double t = 0.0;
  double naive_t = 0.0;       // 1/k variance term only, for reference
  std::optional<double> p;    // two-sided; absent when variance is zero
  double mean_diff = 0.0;
  bool degenerate = false;    // zero variance across the k differences
};

// Corrected resampled t-test over k paired differences:
//   t = mean(d) / sqrt((1/k + n_test/n_train) * var(d)),
// var unbiased, p two-sided from Student's t with k-1 degrees of freedom.
// The n_test/n_train term widens the naive 1/k variance to account for
// overlapping training sets across resamples.
TTestResult corrected_resampled_ttest(const std::vector<double>& diffs,
                                      int n_train, int n_test);

struct PairedBootstrapResult {
  double diff = 0.0;          // metric(A) - metric(B) on the full sample
  double lo = 0.0, hi = 0.0;  // 95% CI of the resampled difference
  double p = 1.0;             // two-sided sign-flip p with add-one smoothing
  int redraws = 0;
};

// Paired comparison of two score vectors on one held-out set: both models are
// evaluated on the same resample so the difference distribution is paired.
PairedBootstrapResult paired_bootstrap_diff(
    const std::vector<double>& scores_a, const std::vector<double>& scores_b,
    const std::vector<int>& labels, Metric metric, int reps,
    std::uint64_t seed, double threshold = 0.5);

// Stratified partition of subject indices. holdout=true means two parts
// (0 = train, 1 = test); otherwise `parts` folds for cross-validation.
struct SplitPlan {
  std::vector<int> part_of;
  int parts = 0;
  bool holdout = false;
  std::vector<std::size_t> members(int part) const;
  std::vector<std::size_t> complement(int part) const;
};

// Per-class shuffled assignment. Test counts start at floor(class_n * f) and
// the global target round(N * f) (half-even) is met by giving the remaining
// seats to the classes with the largest fractional remainders. A class whose
// test count would be 0 or class_n is an error.
SplitPlan stratified_split(const std::vector<int>& labels,
                           double test_fraction, std::uint64_t seed);

// Stratified k-fold: per-class shuffle, then round-robin deal, so per-class
// fold sizes differ by at most one.
SplitPlan kfold_split(const std::vector<int>& labels, int k,
                      std::uint64_t seed);

struct RocPoint {
  double threshold = 0.0, fpr = 0.0, tpr = 0.0;
};

// ROC curve points from (+inf, 0, 0) down through each distinct score.
std::vector<RocPoint> roc_points(const std::vector<double>& scores,
                                 const std::vector<int>& labels);

std::string roc_csv(const std::vector<RocPoint>& points);

std::string eval_report_csv_header();
std::string eval_report_csv_row(const std::string& model_name,
                                const EvalReport& r);

// Compact JSON object; undefined metrics serialize as null.
std::string eval_report_json(const EvalReport& r);

}  // namespace voxebm
