#include "doctest.h"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <vector>

#include "voxebm/eval_stats.hpp"
#include "voxebm/rng.hpp"

using namespace voxebm;

namespace {

// O(N^2) pair-counting AUC used as the oracle for the rank implementation.
double auc_pairs(const std::vector<double>& scores,
                 const std::vector<int>& labels) {
  double u = 0.0;
  std::size_t np = 0, nn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    ++np;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] == 1) continue;
      if (scores[i] > scores[j]) u += 1.0;
      else if (scores[i] == scores[j]) u += 0.5;
    }
  }
  for (int y : labels) if (y == 0) ++nn;
  return u / (static_cast<double>(np) * static_cast<double>(nn));
}

}  // namespace

TEST_SUITE("eval_stats") {

TEST_CASE("metrics: perfect separation scores 1.0 everywhere") {
  std::vector<double> scores{0.9, 0.8, 0.7, 0.3, 0.2, 0.1};
  std::vector<int> labels{1, 1, 1, 0, 0, 0};
  EvalReport r = metrics(scores, labels, 0.5);
  CHECK(r.acc == 1.0);
  CHECK(*r.sen == 1.0);
  CHECK(*r.spe == 1.0);
  CHECK(*r.auc == 1.0);
  CHECK(r.n_test == 6);
}

TEST_CASE("metrics: all-equal scores give AUC 0.5") {
  std::vector<double> scores(10, 0.4);
  std::vector<int> labels{1, 0, 1, 0, 1, 0, 1, 0, 1, 0};
  EvalReport r = metrics(scores, labels, 0.5);
  CHECK(*r.auc == 0.5);
}

TEST_CASE("metrics: confusion-matrix arithmetic on a mixed example") {
  //          scores         labels   pred(>0.5)
  std::vector<double> scores{0.9, 0.4, 0.6, 0.2, 0.7, 0.3};
  std::vector<int> labels   {1,   1,   0,   0,   1,   0};
  // TP=2 (0.9, 0.7), FN=1 (0.4), FP=1 (0.6), TN=2 (0.2, 0.3)
  EvalReport r = metrics(scores, labels, 0.5);
  CHECK(r.acc == doctest::Approx(4.0 / 6.0));
  CHECK(*r.sen == doctest::Approx(2.0 / 3.0));
  CHECK(*r.spe == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("metrics: single-class input reports SEN/SPE/AUC as undefined") {
  std::vector<double> scores{0.9, 0.8, 0.2};
  std::vector<int> labels{1, 1, 1};
  EvalReport r = metrics(scores, labels, 0.5);
  CHECK(r.sen.has_value());
  CHECK(!r.spe.has_value());
  CHECK(!r.auc.has_value());
}

TEST_CASE("AUC: rank implementation equals pair counting exactly at N=50") {
  Rng rng(2024);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> scores(50);
    std::vector<int> labels(50);
    for (int i = 0; i < 50; ++i) {
      // quantized scores so tie handling is exercised
      scores[i] = std::floor(rng.uniform01() * 10.0) / 10.0;
      labels[i] = rng.bernoulli(0.5) ? 1 : 0;
    }
    if (std::count(labels.begin(), labels.end(), 1) == 0) labels[0] = 1;
    if (std::count(labels.begin(), labels.end(), 0) == 0) labels[1] = 0;
    CHECK(*auc_rank(scores, labels) == auc_pairs(scores, labels));
  }
}

TEST_CASE("AUC: invariant under strictly increasing score transforms") {
  Rng rng(7);
  std::vector<double> scores(40);
  std::vector<int> labels(40);
  for (int i = 0; i < 40; ++i) {
    scores[i] = std::floor(rng.uniform01() * 8.0) / 8.0;
    labels[i] = i % 2;
  }
  double base = *auc_rank(scores, labels);
  std::vector<double> warped(40);
  for (int i = 0; i < 40; ++i)
    warped[i] = std::atan(scores[i]) + scores[i] * scores[i] * scores[i];
  CHECK(*auc_rank(warped, labels) == base);
}

TEST_CASE("percentile: linear interpolation on a small sorted sample") {
  std::vector<double> v{1.0, 2.0, 3.0, 4.0};
  CHECK(percentile_sorted(v, 0.0) == 1.0);
  CHECK(percentile_sorted(v, 100.0) == 4.0);
  CHECK(percentile_sorted(v, 50.0) == doctest::Approx(2.5));
  CHECK(percentile_sorted(v, 25.0) == doctest::Approx(1.75));
  // monotone in p, which makes CI lo <= median <= hi structural
  CHECK(percentile_sorted(v, 2.5) <= percentile_sorted(v, 50.0));
  CHECK(percentile_sorted(v, 50.0) <= percentile_sorted(v, 97.5));
}

TEST_CASE("bootstrap: unanimous correct predictions give a (1,1) ACC interval") {
  std::vector<double> scores{0.9, 0.9, 0.9, 0.1, 0.1, 0.1};
  std::vector<int> labels{1, 1, 1, 0, 0, 0};
  BootstrapCi ci = bootstrap_ci(scores, labels, Metric::Acc, 200, 5);
  CHECK(ci.lo == 1.0);
  CHECK(ci.hi == 1.0);
}

TEST_CASE("bootstrap: completes exactly the requested number of resamples") {
  std::vector<double> scores{0.9, 0.8, 0.4, 0.3, 0.6, 0.2};
  std::vector<int> labels{1, 1, 1, 0, 0, 0};
  BootstrapCi ci = bootstrap_ci(scores, labels, Metric::Auc, 100, 11);
  CHECK(ci.accepted == 100);
  CHECK(ci.lo >= 0.0);
  CHECK(ci.hi <= 1.0);
  CHECK(ci.lo <= ci.hi);
}

TEST_CASE("bootstrap: ACC interval endpoints match an exhaustive oracle at N=8") {
  // 8 subjects, 7 scored correctly at threshold 0.5 — that pattern keeps the
  // 2.5/97.5 quantiles far from resample-distribution atom boundaries, so a
  // 10k-rep empirical percentile sits on the oracle atom with wide margin.
  // The oracle enumerates all C(15,7)=6435 resample multisets with
  // multinomial weights and conditions on both classes appearing, mirroring
  // the redraw rule.
  std::vector<double> scores{0.9, 0.8, 0.7, 0.4, 0.3, 0.2, 0.15, 0.1};
  std::vector<int> labels{1, 1, 1, 1, 0, 0, 0, 0};

  const int n = 8;
  std::vector<double> atom_val;
  std::vector<double> atom_mass;
  std::array<int, 8> counts{};
  double fact[9];
  fact[0] = 1.0;
  for (int i = 1; i <= n; ++i) fact[i] = fact[i - 1] * i;

  std::function<void(int, int)> rec = [&](int slot, int remaining) {
    if (slot == n - 1) {
      counts[static_cast<std::size_t>(slot)] = remaining;
      bool has_pos = false, has_neg = false;
      double correct = 0.0, denom_perm = 1.0;
      for (int i = 0; i < n; ++i) {
        const int c = counts[static_cast<std::size_t>(i)];
        if (c == 0) continue;
        (labels[static_cast<std::size_t>(i)] == 1 ? has_pos : has_neg) = true;
        const bool pred = scores[static_cast<std::size_t>(i)] > 0.5;
        if ((pred ? 1 : 0) == labels[static_cast<std::size_t>(i)]) correct += c;
        denom_perm *= fact[c];
      }
      if (has_pos && has_neg) {
        atom_val.push_back(correct / n);
        atom_mass.push_back(fact[n] / denom_perm);  // / 8^8 applied via normalization
      }
      return;
    }
    for (int c = 0; c <= remaining; ++c) {
      counts[static_cast<std::size_t>(slot)] = c;
      rec(slot + 1, remaining - c);
    }
  };
  rec(0, n);

  // normalize the conditional distribution and take discrete quantiles
  double total = 0.0;
  for (double m : atom_mass) total += m;
  std::vector<std::size_t> order(atom_val.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return atom_val[a] < atom_val[b];
  });
  auto quantile = [&](double q) {
    double cum = 0.0;
    for (std::size_t idx : order) {
      cum += atom_mass[idx] / total;
      if (cum >= q) return atom_val[idx];
    }
    return atom_val[order.back()];
  };

  BootstrapCi ci = bootstrap_ci(scores, labels, Metric::Acc, 10000, 1);
  CHECK(std::abs(ci.lo - quantile(0.025)) <= 0.05);
  CHECK(std::abs(ci.hi - quantile(0.975)) <= 0.05);
}

TEST_CASE("bootstrap: exceeding the redraw cap is an error") {
  // Two subjects, one per class: half of all resamples are single-class.
  // With reps=1 the cap is 10 redraws; the seed is chosen so the derived
  // resample stream opens with 11 degenerate draws, which must throw
  // (deterministic because resampling is seeded).
  std::vector<double> scores{0.9, 0.1};
  std::vector<int> labels{1, 0};
  CHECK_THROWS_AS(bootstrap_ci(scores, labels, Metric::Acc, 1, 1878),
                  std::runtime_error);
  // sanity: most seeds accept quickly instead
  BootstrapCi ok = bootstrap_ci(scores, labels, Metric::Acc, 1, 1);
  CHECK(ok.accepted == 1);
}

TEST_CASE("bootstrap: single-class input is rejected up front") {
  std::vector<double> scores{0.9, 0.8, 0.7};
  std::vector<int> labels{1, 1, 1};
  CHECK_THROWS_AS(bootstrap_ci(scores, labels, Metric::Acc, 10, 1),
                  std::invalid_argument);
}

TEST_CASE("corrected t-test: all-zero differences take the degenerate branch") {
  TTestResult r = corrected_resampled_ttest(std::vector<double>(5, 0.0), 90, 10);
  CHECK(r.degenerate);
  CHECK(r.t == 0.0);
  CHECK(!r.p.has_value());
}

TEST_CASE("corrected t-test: unanimous direction is significant") {
  std::vector<double> diffs{1.001, 0.999, 1.0005, 0.9995, 1.0};
  TTestResult r = corrected_resampled_ttest(diffs, 90, 10);
  CHECK(r.t > 10.0);
  CHECK(*r.p < 0.01);
}

TEST_CASE("corrected t-test: k=10 worked example matches direct arithmetic") {
  std::vector<double> diffs{0.02, -0.01, 0.03, 0.00, 0.01,
                            0.02, -0.02, 0.01, 0.00, 0.03};
  const int n_train = 90, n_test = 10;  // ratio 1/9
  // direct spreadsheet-style evaluation
  double mean = 0.0;
  for (double d : diffs) mean += d;
  mean /= 10.0;
  double var = 0.0;
  for (double d : diffs) var += (d - mean) * (d - mean);
  var /= 9.0;
  const double expect_t = mean / std::sqrt((1.0 / 10.0 + 10.0 / 90.0) * var);

  TTestResult r = corrected_resampled_ttest(diffs, n_train, n_test);
  CHECK(r.t == doctest::Approx(expect_t).epsilon(1e-10));
  CHECK(r.p.has_value());
  CHECK(*r.p > 0.0);
  CHECK(*r.p < 1.0);
}

TEST_CASE("corrected t-test: correction strictly shrinks the naive statistic") {
  Rng rng(99);
  for (int trial = 0; trial < 25; ++trial) {
    std::vector<double> diffs(5 + static_cast<int>(rng.uniform_int(8)));
    for (double& d : diffs) d = rng.normal() * 0.05 + 0.01;
    TTestResult r = corrected_resampled_ttest(diffs, 90, 10);
    if (r.degenerate) continue;
    CHECK(std::abs(r.t) < std::abs(r.naive_t));
  }
}

TEST_CASE("paired bootstrap: identical models produce diff 0 and p = 1") {
  std::vector<double> s{0.9, 0.7, 0.4, 0.2, 0.8, 0.3};
  std::vector<int> y{1, 1, 0, 0, 1, 0};
  PairedBootstrapResult r = paired_bootstrap_diff(s, s, y, Metric::Acc, 100, 2);
  CHECK(r.diff == 0.0);
  CHECK(r.p == 1.0);
  CHECK(r.lo == 0.0);
  CHECK(r.hi == 0.0);
}

TEST_CASE("paired bootstrap: a clearly better model gets a small p") {
  Rng rng(31);
  std::vector<double> a, b;
  std::vector<int> y;
  for (int i = 0; i < 40; ++i) {
    const int label = i % 2;
    y.push_back(label);
    a.push_back(label == 1 ? 0.9 : 0.1);              // perfect
    b.push_back(rng.uniform01());                     // uninformative
  }
  PairedBootstrapResult r =
      paired_bootstrap_diff(a, b, y, Metric::Auc, 200, 17);
  CHECK(r.diff > 0.3);
  CHECK(r.p < 0.05);
  CHECK(r.lo > 0.0);
}

TEST_CASE("stratified split: 90+90 at fraction 0.1 yields 9+9 test subjects") {
  std::vector<int> labels;
  for (int i = 0; i < 90; ++i) labels.push_back(0);
  for (int i = 0; i < 90; ++i) labels.push_back(1);
  SplitPlan plan = stratified_split(labels, 0.1, 4);
  REQUIRE(plan.holdout);
  auto test = plan.members(1);
  int pos = 0, neg = 0;
  for (std::size_t id : test) (labels[id] == 1 ? pos : neg)++;
  CHECK(pos == 9);
  CHECK(neg == 9);
  CHECK(test.size() + plan.members(0).size() == labels.size());
}

TEST_CASE("stratified split: 520+335 at 0.1 follows the documented rounding") {
  std::vector<int> labels;
  for (int i = 0; i < 520; ++i) labels.push_back(0);
  for (int i = 0; i < 335; ++i) labels.push_back(1);
  SplitPlan plan = stratified_split(labels, 0.1, 8);
  auto test = plan.members(1);
  int pos = 0, neg = 0;
  for (std::size_t id : test) (labels[id] == 1 ? pos : neg)++;
  // floor targets 52 + 33, global target round(85.5) = 86, the extra seat
  // goes to the class with remainder 0.5
  CHECK(neg == 52);
  CHECK(pos == 34);
  CHECK(test.size() == 86);
}

TEST_CASE("stratified split: deterministic per seed, varies across seeds") {
  std::vector<int> labels;
  for (int i = 0; i < 60; ++i) labels.push_back(i % 2);
  SplitPlan a = stratified_split(labels, 0.2, 123);
  SplitPlan b = stratified_split(labels, 0.2, 123);
  CHECK(a.part_of == b.part_of);
  bool any_differs = false;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    if (stratified_split(labels, 0.2, seed).part_of != a.part_of) {
      any_differs = true;
      break;
    }
  }
  CHECK(any_differs);
}

TEST_CASE("stratified split: a class too small for the test side is an error") {
  std::vector<int> labels{0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1};
  // class 1 target at fraction 0.1 would be zero seats
  CHECK_THROWS_AS(stratified_split(labels, 0.1, 1), std::invalid_argument);
}

TEST_CASE("k-fold: 50+50 at k=5 gives five folds of 10+10") {
  std::vector<int> labels;
  for (int i = 0; i < 100; ++i) labels.push_back(i < 50 ? 0 : 1);
  SplitPlan plan = kfold_split(labels, 5, 9);
  REQUIRE(plan.parts == 5);
  for (int f = 0; f < 5; ++f) {
    auto fold = plan.members(f);
    int pos = 0, neg = 0;
    for (std::size_t id : fold) (labels[id] == 1 ? pos : neg)++;
    CHECK(pos == 10);
    CHECK(neg == 10);
  }
}

TEST_CASE("k-fold: folds partition the subjects") {
  std::vector<int> labels;
  for (int i = 0; i < 47; ++i) labels.push_back(i % 2);
  SplitPlan plan = kfold_split(labels, 4, 13);
  std::set<std::size_t> seen;
  for (int f = 0; f < 4; ++f) {
    for (std::size_t id : plan.members(f)) {
      CHECK(seen.insert(id).second);  // disjoint
    }
  }
  CHECK(seen.size() == labels.size());  // exhaustive
}

TEST_CASE("k-fold: per-class fold sizes differ by at most one (100 random vectors)") {
  Rng rng(55);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 20 + static_cast<int>(rng.uniform_int(40));
    const int k = 2 + static_cast<int>(rng.uniform_int(4));
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (int& y : labels) y = rng.bernoulli(0.4) ? 1 : 0;
    const auto n1 = std::count(labels.begin(), labels.end(), 1);
    const auto n0 = n - n1;
    if (n1 < k || n0 < k) continue;
    SplitPlan plan = kfold_split(labels, k, rng.next_u64());
    for (int cls = 0; cls <= 1; ++cls) {
      int mn = n, mx = 0;
      for (int f = 0; f < k; ++f) {
        int cnt = 0;
        for (std::size_t id : plan.members(f))
          if (labels[id] == cls) ++cnt;
        mn = std::min(mn, cnt);
        mx = std::max(mx, cnt);
      }
      CHECK(mx - mn <= 1);
    }
  }
}

TEST_CASE("k-fold: class smaller than k is an error") {
  std::vector<int> labels{0, 0, 0, 0, 0, 1, 1};
  CHECK_THROWS_AS(kfold_split(labels, 3, 1), std::invalid_argument);
}

TEST_CASE("roc: known four-point curve with a tie group") {
  std::vector<double> scores{0.9, 0.7, 0.7, 0.3};
  std::vector<int> labels{1, 1, 0, 0};
  auto pts = roc_points(scores, labels);
  REQUIRE(pts.size() == 4);
  CHECK(std::isinf(pts[0].threshold));
  CHECK(pts[0].fpr == 0.0);
  CHECK(pts[0].tpr == 0.0);
  CHECK(pts[1].threshold == 0.9);
  CHECK(pts[1].tpr == 0.5);
  CHECK(pts[1].fpr == 0.0);
  CHECK(pts[2].threshold == 0.7);
  CHECK(pts[2].tpr == 1.0);
  CHECK(pts[2].fpr == 0.5);
  CHECK(pts[3].threshold == 0.3);
  CHECK(pts[3].tpr == 1.0);
  CHECK(pts[3].fpr == 1.0);
  std::string csv = roc_csv(pts);
  CHECK(csv.find("threshold,fpr,tpr") == 0);
}

TEST_CASE("report serialization: CSV row and JSON carry undefined as empty/null") {
  EvalReport r;
  r.acc = 0.75;
  r.sen = 0.5;
  r.spe = std::nullopt;
  r.auc = 0.8;
  r.acc_ci = MetricCi{0.6, 0.9};
  r.n_test = 20;
  r.threshold = 0.5;
  std::string row = eval_report_csv_row("demo", r);
  CHECK(row.find("demo,20,") == 0);
  CHECK(row.find("0.750000") != std::string::npos);
  std::string js = eval_report_json(r);
  CHECK(js.find("\"spe\":null") != std::string::npos);
  CHECK(js.find("\"acc\":0.75") != std::string::npos);
  CHECK(js.find("\"acc_ci\":[0.6,0.9]") != std::string::npos);
}

}  // TEST_SUITE
