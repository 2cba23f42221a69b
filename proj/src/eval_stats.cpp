#include "voxebm/eval_stats.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "json.hpp"
#include "voxebm/rng.hpp"

namespace voxebm {

namespace {

void check_scored_labels(const std::vector<double>& scores,
                         const std::vector<int>& labels) {
  if (scores.size() != labels.size()) {
    throw std::invalid_argument("scores/labels length mismatch");
  }
  if (scores.empty()) throw std::invalid_argument("empty evaluation set");
  for (int y : labels) {
    if (y != 0 && y != 1) throw std::invalid_argument("labels must be 0 or 1");
  }
  for (double s : scores) {
    if (!std::isfinite(s)) throw std::invalid_argument("non-finite score");
  }
}

}  // namespace

const char* metric_name(Metric m) {
  switch (m) {
    case Metric::Acc: return "ACC";
    case Metric::Sen: return "SEN";
    case Metric::Spe: return "SPE";
    case Metric::Auc: return "AUC";
  }
  return "?";
}

std::optional<double> auc_rank(const std::vector<double>& scores,
                               const std::vector<int>& labels) {
  std::size_t n_pos = 0, n_neg = 0;
  for (int y : labels) (y == 1 ? n_pos : n_neg)++;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] < scores[b];
  });

  // Average ranks over tie groups; rank sums of half-integers stay exact,
  // so this equals the O(N^2) pair count (ties at half credit) bit for bit.
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (std::size_t t = i; t <= j; ++t) {
      if (labels[order[t]] == 1) rank_sum_pos += avg_rank;
    }
    i = j + 1;
  }
  const double u = rank_sum_pos -
                   0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

std::optional<double> metric_value(Metric m, const std::vector<double>& scores,
                                   const std::vector<int>& labels,
                                   double threshold) {
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
  if (m != Metric::Auc) {
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const bool pred = scores[i] > threshold;
      if (labels[i] == 1) (pred ? tp : fn)++;
      else (pred ? fp : tn)++;
    }
  }
  switch (m) {
    case Metric::Acc:
      return static_cast<double>(tp + tn) / static_cast<double>(scores.size());
    case Metric::Sen:
      if (tp + fn == 0) return std::nullopt;
      return static_cast<double>(tp) / static_cast<double>(tp + fn);
    case Metric::Spe:
      if (tn + fp == 0) return std::nullopt;
      return static_cast<double>(tn) / static_cast<double>(tn + fp);
    case Metric::Auc:
      return auc_rank(scores, labels);
  }
  return std::nullopt;
}

EvalReport metrics(const std::vector<double>& scores,
                   const std::vector<int>& labels, double threshold) {
  check_scored_labels(scores, labels);
  EvalReport r;
  r.n_test = static_cast<int>(scores.size());
  r.threshold = threshold;
  r.acc = *metric_value(Metric::Acc, scores, labels, threshold);
  r.sen = metric_value(Metric::Sen, scores, labels, threshold);
  r.spe = metric_value(Metric::Spe, scores, labels, threshold);
  r.auc = metric_value(Metric::Auc, scores, labels, threshold);
  return r;
}

double percentile_sorted(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw std::invalid_argument("empty percentile sample");
  if (sorted.size() == 1) return sorted[0];
  const double rank = p / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  if (lo + 1 >= sorted.size()) return sorted.back();
  const double frac = rank - static_cast<double>(lo);
  return sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac;
}

namespace {

bool both_classes(const std::vector<int>& labels) {
  bool p = false, n = false;
  for (int y : labels) (y == 1 ? p : n) = true;
  return p && n;
}

}  // namespace

BootstrapCi bootstrap_ci(const std::vector<double>& scores,
                         const std::vector<int>& labels, Metric metric,
                         int reps, std::uint64_t seed, double threshold) {
  check_scored_labels(scores, labels);
  if (reps < 1) throw std::invalid_argument("bootstrap reps must be >= 1");
  if (!both_classes(labels)) {
    throw std::invalid_argument("bootstrap requires both classes in the input");
  }
  const std::size_t n = scores.size();
  const int redraw_cap = 10 * reps;

  std::vector<double> values;
  values.reserve(static_cast<std::size_t>(reps));
  std::vector<double> rs(n);
  std::vector<int> rl(n);
  int redraws = 0;
  for (int rep = 0; rep < reps; ++rep) {
    Rng rng(derive_seed(seed, "bootstrap", static_cast<std::uint64_t>(rep)));
    for (;;) {
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = static_cast<std::size_t>(rng.uniform_int(n));
        rs[i] = scores[j];
        rl[i] = labels[j];
      }
      if (both_classes(rl)) break;
      if (++redraws > redraw_cap) {
        throw std::runtime_error(
            "bootstrap redraw cap exceeded: input too imbalanced");
      }
    }
    values.push_back(*metric_value(metric, rs, rl, threshold));
  }
  std::sort(values.begin(), values.end());
  BootstrapCi out;
  out.lo = percentile_sorted(values, 2.5);
  out.hi = percentile_sorted(values, 97.5);
  out.accepted = reps;
  out.redraws = redraws;
  return out;
}

TTestResult corrected_resampled_ttest(const std::vector<double>& diffs,
                                      int n_train, int n_test) {
  const std::size_t k = diffs.size();
  if (k < 2) throw std::invalid_argument("need at least 2 paired differences");
  if (n_train <= 0 || n_test <= 0) {
    throw std::invalid_argument("n_train and n_test must be positive");
  }
  double mean = 0.0;
  for (double d : diffs) mean += d;
  mean /= static_cast<double>(k);
  double var = 0.0;
  for (double d : diffs) var += (d - mean) * (d - mean);
  var /= static_cast<double>(k - 1);

  TTestResult r;
  r.mean_diff = mean;
  if (var == 0.0) {
    r.degenerate = true;
    return r;  // t = 0, p absent; caller sees the direction in mean_diff
  }
  const double correction =
      1.0 / static_cast<double>(k) +
      static_cast<double>(n_test) / static_cast<double>(n_train);
  r.t = mean / std::sqrt(correction * var);
  r.naive_t = mean / std::sqrt(var / static_cast<double>(k));
  boost::math::students_t dist(static_cast<double>(k - 1));
  r.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
  return r;
}

PairedBootstrapResult paired_bootstrap_diff(
    const std::vector<double>& scores_a, const std::vector<double>& scores_b,
    const std::vector<int>& labels, Metric metric, int reps,
    std::uint64_t seed, double threshold) {
  check_scored_labels(scores_a, labels);
  check_scored_labels(scores_b, labels);
  if (reps < 1) throw std::invalid_argument("bootstrap reps must be >= 1");
  if (!both_classes(labels)) {
    throw std::invalid_argument("bootstrap requires both classes in the input");
  }
  const std::size_t n = labels.size();
  const int redraw_cap = 10 * reps;

  PairedBootstrapResult out;
  {
    auto a = metric_value(metric, scores_a, labels, threshold);
    auto b = metric_value(metric, scores_b, labels, threshold);
    out.diff = *a - *b;
  }

  std::vector<double> diffs;
  diffs.reserve(static_cast<std::size_t>(reps));
  std::vector<double> ra(n), rb(n);
  std::vector<int> rl(n);
  int redraws = 0;
  for (int rep = 0; rep < reps; ++rep) {
    Rng rng(derive_seed(seed, "paired-bootstrap", static_cast<std::uint64_t>(rep)));
    for (;;) {
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = static_cast<std::size_t>(rng.uniform_int(n));
        ra[i] = scores_a[j];
        rb[i] = scores_b[j];
        rl[i] = labels[j];
      }
      if (both_classes(rl)) break;
      if (++redraws > redraw_cap) {
        throw std::runtime_error(
            "bootstrap redraw cap exceeded: input too imbalanced");
      }
    }
    diffs.push_back(*metric_value(metric, ra, rl, threshold) -
                    *metric_value(metric, rb, rl, threshold));
  }
  std::vector<double> sorted = diffs;
  std::sort(sorted.begin(), sorted.end());
  out.lo = percentile_sorted(sorted, 2.5);
  out.hi = percentile_sorted(sorted, 97.5);

  // Two-sided resampling p with add-one smoothing so p never reaches 0.
  std::size_t le = 0, ge = 0;
  for (double d : diffs) {
    if (d <= 0.0) ++le;
    if (d >= 0.0) ++ge;
  }
  const double denom = static_cast<double>(reps) + 1.0;
  const double p_le = (static_cast<double>(le) + 1.0) / denom;
  const double p_ge = (static_cast<double>(ge) + 1.0) / denom;
  out.p = std::min(1.0, 2.0 * std::min(p_le, p_ge));
  out.redraws = redraws;
  return out;
}

std::vector<std::size_t> SplitPlan::members(int part) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < part_of.size(); ++i) {
    if (part_of[i] == part) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> SplitPlan::complement(int part) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < part_of.size(); ++i) {
    if (part_of[i] != part) out.push_back(i);
  }
  return out;
}

namespace {

std::vector<int> distinct_labels_sorted(const std::vector<int>& labels) {
  std::vector<int> classes = labels;
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  return classes;
}

}  // namespace

SplitPlan stratified_split(const std::vector<int>& labels,
                           double test_fraction, std::uint64_t seed) {
  if (labels.empty()) throw std::invalid_argument("empty label vector");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw std::invalid_argument("test_fraction must be in (0, 1)");
  }
  const std::vector<int> classes = distinct_labels_sorted(labels);

  struct ClassAlloc {
    int label;
    std::vector<std::size_t> ids;
    int target;
    double remainder;
  };
  std::vector<ClassAlloc> alloc;
  for (int c : classes) {
    ClassAlloc a;
    a.label = c;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == c) a.ids.push_back(i);
    }
    const double exact = static_cast<double>(a.ids.size()) * test_fraction;
    a.target = static_cast<int>(std::floor(exact));
    a.remainder = exact - std::floor(exact);
    alloc.push_back(std::move(a));
  }

  const int global_target = static_cast<int>(
      std::nearbyint(static_cast<double>(labels.size()) * test_fraction));
  int assigned = 0;
  for (const ClassAlloc& a : alloc) assigned += a.target;

  // Hand remaining test seats to the classes with the largest fractional
  // remainders (larger class breaks ties, then lower label).
  std::vector<std::size_t> order(alloc.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    if (alloc[x].remainder != alloc[y].remainder)
      return alloc[x].remainder > alloc[y].remainder;
    if (alloc[x].ids.size() != alloc[y].ids.size())
      return alloc[x].ids.size() > alloc[y].ids.size();
    return alloc[x].label < alloc[y].label;
  });
  for (std::size_t i = 0; assigned < global_target; ++i) {
    alloc[order[i % order.size()]].target += 1;
    ++assigned;
  }

  for (const ClassAlloc& a : alloc) {
    if (a.target <= 0) {
      throw std::invalid_argument("class " + std::to_string(a.label) +
                                  " too small to appear in the test split");
    }
    if (a.target >= static_cast<int>(a.ids.size())) {
      throw std::invalid_argument("class " + std::to_string(a.label) +
                                  " too small to appear in the train split");
    }
  }

  SplitPlan plan;
  plan.part_of.assign(labels.size(), 0);
  plan.parts = 2;
  plan.holdout = true;
  Rng rng(seed);
  for (ClassAlloc& a : alloc) {
    rng.shuffle(a.ids);
    for (int i = 0; i < a.target; ++i) plan.part_of[a.ids[static_cast<std::size_t>(i)]] = 1;
  }
  return plan;
}

SplitPlan kfold_split(const std::vector<int>& labels, int k,
                      std::uint64_t seed) {
  if (labels.empty()) throw std::invalid_argument("empty label vector");
  if (k < 2) throw std::invalid_argument("k must be >= 2");
  const std::vector<int> classes = distinct_labels_sorted(labels);

  SplitPlan plan;
  plan.part_of.assign(labels.size(), 0);
  plan.parts = k;
  plan.holdout = false;
  Rng rng(seed);
  for (int c : classes) {
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == c) ids.push_back(i);
    }
    if (static_cast<int>(ids.size()) < k) {
      throw std::invalid_argument("class " + std::to_string(c) +
                                  " has fewer members than folds");
    }
    rng.shuffle(ids);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      plan.part_of[ids[i]] = static_cast<int>(i % static_cast<std::size_t>(k));
    }
  }
  return plan;
}

std::vector<RocPoint> roc_points(const std::vector<double>& scores,
                                 const std::vector<int>& labels) {
  check_scored_labels(scores, labels);
  if (!both_classes(labels)) {
    throw std::invalid_argument("ROC requires both classes");
  }
  std::size_t n_pos = 0, n_neg = 0;
  for (int y : labels) (y == 1 ? n_pos : n_neg)++;

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];
  });

  std::vector<RocPoint> pts;
  pts.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  std::size_t tp = 0, fp = 0, i = 0;
  while (i < order.size()) {
    std::size_t j = i;  // consume the whole tie group at this threshold
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    for (std::size_t t = i; t <= j; ++t) {
      if (labels[order[t]] == 1) ++tp;
      else ++fp;
    }
    pts.push_back({scores[order[i]],
                   static_cast<double>(fp) / static_cast<double>(n_neg),
                   static_cast<double>(tp) / static_cast<double>(n_pos)});
    i = j + 1;
  }
  return pts;
}

namespace {

std::string fmt_opt(std::optional<double> v) {
  if (!v) return "";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", *v);
  return buf;
}

std::string fmt_ci(const std::optional<MetricCi>& ci) {
  if (!ci) return ",";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f,%.6f", ci->lo, ci->hi);
  return buf;
}

}  // namespace

std::string roc_csv(const std::vector<RocPoint>& points) {
  std::string out = "threshold,fpr,tpr\n";
  char buf[96];
  for (const RocPoint& p : points) {
    std::snprintf(buf, sizeof(buf), "%.10g,%.6f,%.6f\n", p.threshold, p.fpr,
                  p.tpr);
    out += buf;
  }
  return out;
}

std::string eval_report_csv_header() {
  return "model,n_test,threshold,acc,acc_lo,acc_hi,sen,sen_lo,sen_hi,"
         "spe,spe_lo,spe_hi,auc,auc_lo,auc_hi";
}

std::string eval_report_csv_row(const std::string& model_name,
                                const EvalReport& r) {
  std::string out = model_name;
  out += "," + std::to_string(r.n_test);
  char buf[32];
  std::snprintf(buf, sizeof(buf), ",%.6f,", r.threshold);
  out += buf;
  out += fmt_opt(r.acc) + "," + fmt_ci(r.acc_ci) + ",";
  out += fmt_opt(r.sen) + "," + fmt_ci(r.sen_ci) + ",";
  out += fmt_opt(r.spe) + "," + fmt_ci(r.spe_ci) + ",";
  out += fmt_opt(r.auc) + "," + fmt_ci(r.auc_ci);
  return out;
}

std::string eval_report_json(const EvalReport& r) {
  nlohmann::json j;
  j["n_test"] = r.n_test;
  j["threshold"] = r.threshold;
  auto put = [&j](const char* key, const std::optional<double>& v,
                  const std::optional<MetricCi>& ci) {
    j[key] = v ? nlohmann::json(*v) : nlohmann::json(nullptr);
    if (ci) j[std::string(key) + "_ci"] = {ci->lo, ci->hi};
  };
  put("acc", r.acc, r.acc_ci);
  put("sen", r.sen, r.sen_ci);
  put("spe", r.spe, r.spe_ci);
  put("auc", r.auc, r.auc_ci);
  return j.dump();
}

}  // namespace voxebm
