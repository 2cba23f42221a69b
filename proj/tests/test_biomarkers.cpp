#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "doctest.h"
#include "voxebm/biomarkers.hpp"
#include "voxebm/rng.hpp"
#include "voxebm/synthgen.hpp"
#include "voxebm/volume.hpp"

using voxebm::Atlas;
using voxebm::BiomarkerInfo;
using voxebm::BiomarkerKind;
using voxebm::BiomarkerTable;
using voxebm::Dims;
using voxebm::RegionMap;
using voxebm::Rng;
using voxebm::Volume;
using voxebm::VolumePredictor;

namespace {

Atlas tiny_atlas() {
  voxebm::SynthConfig cfg;
  cfg.dims = Dims{12, 14, 12};
  cfg.n_regions = 6;
  cfg.seed = 42;
  return voxebm::make_atlas(cfg);
}

Volume random_volume(const Dims& d, std::uint64_t seed) {
  Volume v(d);
  Rng rng(seed);
  for (std::size_t i = 0; i < static_cast<std::size_t>(v.size()); ++i)
    v.data()[i] = rng.uniform(0.0, 1.0);
  return v;
}

// direct Welch formula, kept separate from the library implementation
double welch_oracle(const std::vector<double>& a,
                    const std::vector<double>& b) {
  auto stats = [](const std::vector<double>& xs, double& m, double& v) {
    m = 0.0;
    for (double x : xs) m += x;
    m /= static_cast<double>(xs.size());
    v = 0.0;
    for (double x : xs) v += (x - m) * (x - m);
    v /= static_cast<double>(xs.size() - 1);
  };
  double ma, va, mb, vb;
  stats(a, ma, va);
  stats(b, mb, vb);
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  const double se2 = va / na + vb / nb;
  const double t = (ma - mb) / std::sqrt(se2);
  const double df = se2 * se2 / ((va / na) * (va / na) / (na - 1.0) +
                                 (vb / nb) * (vb / nb) / (nb - 1.0));
  boost::math::students_t dist(df);
  return 2.0 * boost::math::cdf(dist, -std::fabs(t));
}

// table with named constant columns, two rows per class
BiomarkerTable toy_table(const std::vector<std::string>& names,
                         const std::vector<std::vector<double>>& rows,
                         const std::vector<int>& labels) {
  BiomarkerTable t;
  t.data.feature_names = names;
  t.data.features = rows;
  t.data.labels = labels;
  for (const auto& n : names)
    t.provenance.push_back({BiomarkerKind::volume, n});
  return t;
}

}  // namespace

TEST_SUITE("biomarkers") {

TEST_CASE("region map lifts the atlas to 1-based labels with names") {
  const Atlas atlas = tiny_atlas();
  const RegionMap map = voxebm::region_map(atlas);
  CHECK(map.n_regions == 6);
  REQUIRE(map.names.size() == 6);
  CHECK(map.names.front() == "Region01");
  CHECK(map.names.back() == "Region06");
  for (std::size_t i = 0; i < atlas.region.size(); ++i) {
    const double lab = map.labels.data()[i];
    if (atlas.region[i] < 0)
      CHECK(lab == 0.0);
    else
      CHECK(lab == static_cast<double>(atlas.region[i] + 1));
  }
}

TEST_CASE("region volumes match a loop oracle and sum to the total") {
  const Atlas atlas = tiny_atlas();
  const RegionMap map = voxebm::region_map(atlas);

  // all-ones volume counts voxels per region
  Volume ones(atlas.dims);
  for (std::size_t i = 0; i < static_cast<std::size_t>(ones.size()); ++i)
    ones.data()[i] = 1.0;
  const auto counts = voxebm::region_volumes(ones, map);
  for (int r = 0; r < map.n_regions; ++r)
    CHECK(counts.by_region[static_cast<std::size_t>(r)] ==
          static_cast<double>(atlas.region_voxels[static_cast<std::size_t>(r)]));

  // random volume against an independent per-region accumulation
  const Volume v = random_volume(atlas.dims, 99);
  const auto got = voxebm::region_volumes(v, map);
  std::vector<double> want(6, 0.0);
  for (std::size_t i = 0; i < static_cast<std::size_t>(v.size()); ++i)
    if (atlas.region[i] >= 0)
      want[static_cast<std::size_t>(atlas.region[i])] += v.data()[i];
  for (int r = 0; r < 6; ++r)
    CHECK(got.by_region[static_cast<std::size_t>(r)] ==
          doctest::Approx(want[static_cast<std::size_t>(r)]).epsilon(1e-12));

  // partition identity is exact by construction
  double total = 0.0;
  for (double x : got.by_region) total += x;
  CHECK(got.total == total);
}

TEST_CASE("region volumes reject mismatched dims and junk labels") {
  const Atlas atlas = tiny_atlas();
  const RegionMap map = voxebm::region_map(atlas);
  CHECK_THROWS_AS(voxebm::region_volumes(Volume(Dims{8, 8, 8}), map),
                  std::invalid_argument);

  RegionMap broken = map;
  broken.labels.data()[0] = 2.5;  // not an integer id
  CHECK_THROWS_AS(voxebm::region_volumes(Volume(atlas.dims), broken),
                  std::invalid_argument);
  broken.labels.data()[0] = 7.0;  // beyond M
  CHECK_THROWS_AS(voxebm::region_volumes(Volume(atlas.dims), broken),
                  std::invalid_argument);
}

TEST_CASE("icv correction divides and validates") {
  const std::vector<double> vols{10.0, 20.0};
  const auto corrected = voxebm::icv_correct(vols, 40.0);
  CHECK(corrected[0] == 0.25);
  CHECK(corrected[1] == 0.5);
  CHECK(voxebm::icv_correct(vols, 1.0) == vols);
  const auto halved = voxebm::icv_correct(vols, 80.0);
  CHECK(halved[0] == corrected[0] / 2.0);
  CHECK(halved[1] == corrected[1] / 2.0);
  CHECK_THROWS_AS(voxebm::icv_correct(vols, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(voxebm::icv_correct(vols, -3.0), std::invalid_argument);
}

TEST_CASE("out-of-fold values come from the model that never saw the subject") {
  const Dims d{8, 8, 8};
  std::vector<Volume> vols;
  std::vector<int> labels;
  for (int i = 0; i < 50; ++i) {
    vols.push_back(Volume(d));
    labels.push_back(i % 2);
  }
  std::vector<std::vector<std::size_t>> folds(5);
  for (std::size_t i = 0; i < 50; ++i) folds[i % 5].push_back(i);

  // the predictor's constant value encodes which subjects were trained on,
  // so each fold's model is distinguishable
  std::vector<std::vector<std::size_t>> seen;
  auto trainer = [&](const std::vector<Volume>& tv,
                     const std::vector<int>&) -> VolumePredictor {
    const double tag =
        static_cast<double>(seen.size()) / 10.0 + 0.05;  // 0.05, 0.15, ...
    seen.push_back({tv.size()});
    return [tag](const Volume&) { return tag; };
  };

  const auto col = voxebm::oof_dl_biomarkers(vols, labels, folds, trainer);
  REQUIRE(col.values.size() == 50);
  REQUIRE(col.models.size() == 5);
  for (std::size_t f = 0; f < 5; ++f) {
    CHECK(seen[f][0] == 40);  // each model trained on the complement
    for (std::size_t i : folds[f])
      CHECK(col.values[i] == static_cast<double>(f) / 10.0 + 0.05);
  }
}

TEST_CASE("constant scorer gives a 0.5 column and fold means average") {
  const Dims d{8, 8, 8};
  std::vector<Volume> vols(10, Volume(d));
  std::vector<int> labels{0, 1, 0, 1, 0, 1, 0, 1, 0, 1};
  std::vector<std::vector<std::size_t>> folds{{0, 1}, {2, 3}, {4, 5}, {6, 7}, {8, 9}};
  auto trainer = [](const std::vector<Volume>&,
                    const std::vector<int>&) -> VolumePredictor {
    return [](const Volume&) { return 0.5; };
  };
  const auto col = voxebm::oof_dl_biomarkers(vols, labels, folds, trainer);
  for (double v : col.values) CHECK(v == 0.5);

  std::vector<VolumePredictor> models;
  for (double p : {0.2, 0.4, 0.6, 0.8, 1.0})
    models.push_back([p](const Volume&) { return p; });
  CHECK(voxebm::fold_mean_predict(models, Volume(d)) == doctest::Approx(0.6));
  CHECK_THROWS_AS(voxebm::fold_mean_predict({}, Volume(d)),
                  std::invalid_argument);
}

TEST_CASE("fold bookkeeping errors are hard errors") {
  const Dims d{8, 8, 8};
  std::vector<Volume> vols(6, Volume(d));
  std::vector<int> labels{0, 1, 0, 1, 0, 1};
  auto trainer = [](const std::vector<Volume>&,
                    const std::vector<int>&) -> VolumePredictor {
    return [](const Volume&) { return 0.5; };
  };
  using Folds = std::vector<std::vector<std::size_t>>;
  // subject 0 in two folds
  CHECK_THROWS_AS(voxebm::oof_dl_biomarkers(
                      vols, labels, Folds{{0, 1, 2}, {0, 3, 4}}, trainer),
                  std::invalid_argument);
  // subject 5 in no fold
  CHECK_THROWS_AS(voxebm::oof_dl_biomarkers(
                      vols, labels, Folds{{0, 1, 2}, {3, 4}}, trainer),
                  std::invalid_argument);
  // empty fold
  CHECK_THROWS_AS(voxebm::oof_dl_biomarkers(
                      vols, labels, Folds{{0, 1, 2, 3, 4, 5}, {}}, trainer),
                  std::invalid_argument);
  // out of range
  CHECK_THROWS_AS(voxebm::oof_dl_biomarkers(
                      vols, labels, Folds{{0, 1, 2}, {3, 4, 9}}, trainer),
                  std::invalid_argument);
  // single fold
  CHECK_THROWS_AS(voxebm::oof_dl_biomarkers(
                      vols, labels, Folds{{0, 1, 2, 3, 4, 5}}, trainer),
                  std::invalid_argument);
  // non-probability prediction
  auto bad = [](const std::vector<Volume>&,
                const std::vector<int>&) -> VolumePredictor {
    return [](const Volume&) { return 1.5; };
  };
  CHECK_THROWS_AS(
      voxebm::oof_dl_biomarkers(vols, labels, Folds{{0, 1, 2}, {3, 4, 5}}, bad),
      std::invalid_argument);
}

TEST_CASE("welch p-values match the direct formula") {
  Rng rng(7);
  std::vector<double> a, b;
  for (int i = 0; i < 40; ++i) a.push_back(rng.normal());
  for (int i = 0; i < 25; ++i) b.push_back(0.6 + 1.7 * rng.normal());
  CHECK(voxebm::welch_p_value(a, b) ==
        doctest::Approx(welch_oracle(a, b)).epsilon(1e-12));

  // strong planted separation: tiny p
  std::vector<double> lo, hi;
  for (int i = 0; i < 100; ++i) {
    lo.push_back(rng.normal());
    hi.push_back(5.0 + rng.normal());
  }
  CHECK(voxebm::welch_p_value(lo, hi) < 1e-30);

  // both constant: undefined, pinned to 1
  CHECK(voxebm::welch_p_value({1.0, 1.0, 1.0}, {1.0, 1.0}) == 1.0);
  CHECK(voxebm::welch_p_value({1.0, 1.0}, {2.0, 2.0}) == 1.0);

  CHECK_THROWS_AS(voxebm::welch_p_value({1.0}, {1.0, 2.0}),
                  std::invalid_argument);
}

TEST_CASE("selection ranks separating columns first, constants last") {
  Rng rng(11);
  std::vector<int> labels;
  std::vector<std::vector<double>> rows;
  for (int i = 0; i < 200; ++i) {
    const int y = i % 2;
    labels.push_back(y);
    // planted: means 0 vs 5, sd 1; noise: no class difference; flat: constant
    rows.push_back({5.0 * y + rng.normal(), rng.normal(), 3.0});
  }
  const auto t = toy_table({"planted", "noise", "flat"}, rows, labels);

  const auto top1 = voxebm::select_v_biomarkers(t, labels, 1);
  REQUIRE(top1.size() == 1);
  CHECK(top1[0].column == 0);
  CHECK(top1[0].p_value < 1e-30);

  const auto all = voxebm::select_v_biomarkers(t, labels, 3);
  CHECK(all[0].column == 0);
  CHECK(all[1].column == 1);
  CHECK(all[2].column == 2);  // p = 1 ranks behind everything
  CHECK(all[2].p_value == 1.0);
}

TEST_CASE("selection breaks p-value ties by column name") {
  std::vector<int> labels;
  std::vector<std::vector<double>> rows;
  Rng rng(3);
  for (int i = 0; i < 40; ++i) {
    labels.push_back(i % 2);
    const double x = rng.normal();
    rows.push_back({x, x});  // identical columns, identical p
  }
  const auto t = toy_table({"zeta", "alpha"}, rows, labels);
  const auto picked = voxebm::select_v_biomarkers(t, labels, 2);
  CHECK(t.data.feature_names[static_cast<std::size_t>(picked[0].column)] ==
        "alpha");
  CHECK(t.data.feature_names[static_cast<std::size_t>(picked[1].column)] ==
        "zeta");
}

TEST_CASE("adding a noise column never displaces a stronger one") {
  Rng rng(19);
  std::vector<int> labels;
  std::vector<std::vector<double>> rows;
  for (int i = 0; i < 120; ++i) {
    labels.push_back(i % 2);
    rows.push_back({2.0 * (i % 2) + rng.normal()});
  }
  auto base = toy_table({"planted"}, rows, labels);
  auto wider = base;
  wider.data.feature_names.push_back("noise");
  wider.provenance.push_back({BiomarkerKind::volume, "noise"});
  for (auto& row : wider.data.features) row.push_back(rng.normal());

  const auto before = voxebm::select_v_biomarkers(base, labels, 1);
  const auto after = voxebm::select_v_biomarkers(wider, labels, 1);
  CHECK(before[0].column == after[0].column);
  CHECK(before[0].p_value == after[0].p_value);
}

TEST_CASE("selection validates its inputs") {
  const auto t = toy_table({"a"}, {{1.0}, {2.0}}, {0, 1});
  CHECK_THROWS_AS(voxebm::select_v_biomarkers(t, {0, 1}, 0),
                  std::invalid_argument);
  CHECK_THROWS_AS(voxebm::select_v_biomarkers(t, {0, 1}, 2),
                  std::invalid_argument);
  CHECK_THROWS_AS(voxebm::select_v_biomarkers(t, {0, 0}, 1),
                  std::invalid_argument);
  CHECK_THROWS_AS(voxebm::select_v_biomarkers(t, {0}, 1),
                  std::invalid_argument);
}

TEST_CASE("take_columns keeps order, names and provenance") {
  const auto t = toy_table({"a", "b", "c"},
                           {{1.0, 2.0, 3.0}, {4.0, 5.0, 6.0}}, {0, 1});
  const auto picked = voxebm::take_columns(t, {2, 0});
  CHECK(picked.data.feature_names == std::vector<std::string>{"c", "a"});
  CHECK(picked.data.features[0] == std::vector<double>{3.0, 1.0});
  CHECK(picked.data.features[1] == std::vector<double>{6.0, 4.0});
  CHECK(picked.provenance[0].source == "c");
  CHECK(picked.data.labels == t.data.labels);
  CHECK_THROWS_AS(voxebm::take_columns(t, {3}), std::invalid_argument);
}

TEST_CASE("volume biomarker table is total-first, icv-corrected") {
  const Atlas atlas = tiny_atlas();
  const RegionMap map = voxebm::region_map(atlas);
  voxebm::SynthConfig cfg;
  cfg.dims = atlas.dims;
  cfg.n_regions = 6;
  cfg.n_per_class = 2;
  cfg.noise_sd = 0.0;
  cfg.seed = 42;
  const voxebm::Cohort cohort = voxebm::make_cohort(cfg, atlas);

  const auto t = voxebm::v_biomarker_table(cohort.volumes, cohort.labels,
                                           cohort.icv, map);
  CHECK(t.data.cols() == 7);
  CHECK(t.data.feature_names[0] == "Total brain");
  CHECK(t.data.feature_names[1] == "Region01");
  CHECK(t.provenance[0].kind == BiomarkerKind::volume);
  CHECK(t.data.labels == cohort.labels);
  for (std::size_t i = 0; i < cohort.volumes.size(); ++i) {
    const auto rv = voxebm::region_volumes(cohort.volumes[i], map);
    CHECK(t.data.features[i][0] ==
          doctest::Approx(rv.total / cohort.icv[i]).epsilon(1e-12));
    double sum = 0.0;
    for (std::size_t c = 1; c < 7; ++c) sum += t.data.features[i][c];
    CHECK(sum == doctest::Approx(t.data.features[i][0]).epsilon(1e-9));
  }
}

TEST_CASE("ensemble averaging is the plain mean with range checks") {
  CHECK(voxebm::ensemble_average(0.5, {0.5, 0.5}) == 0.5);
  CHECK(voxebm::ensemble_average(1.0, {0.0}) == 0.5);
  CHECK(voxebm::ensemble_average(0.9, {0.6, 0.3}) == doctest::Approx(0.6));
  CHECK(voxebm::ensemble_average(0.7, {}) == 0.7);
  CHECK_THROWS_AS(voxebm::ensemble_average(std::vector<double>{}),
                  std::invalid_argument);
  CHECK_THROWS_AS(voxebm::ensemble_average(1.2, {0.5}), std::invalid_argument);
  CHECK_THROWS_AS(voxebm::ensemble_average(0.5, {-0.1}), std::invalid_argument);
}

TEST_CASE("biomarker table round trips through csv plus sidecar") {
  BiomarkerTable t;
  t.data.feature_names = {"Glo", "ROI1", "Region01"};
  t.provenance = {{BiomarkerKind::dl_global, "glo"},
                  {BiomarkerKind::dl_roi, "1"},
                  {BiomarkerKind::volume, "1"}};
  Rng rng(5);
  for (int i = 0; i < 7; ++i) {
    t.data.labels.push_back(i % 2);
    t.data.features.push_back(
        {rng.uniform01(), rng.uniform01(), rng.uniform(0.0, 100.0)});
  }

  const std::string csv = "biomarkers_tmp.csv";
  const std::string side = "biomarkers_tmp.json";
  voxebm::write_biomarker_table(csv, side, t);
  const BiomarkerTable back = voxebm::read_biomarker_table(csv, side);
  CHECK(back.data.feature_names == t.data.feature_names);
  CHECK(back.data.labels == t.data.labels);
  REQUIRE(back.data.features.size() == t.data.features.size());
  for (std::size_t i = 0; i < t.data.rows(); ++i)
    CHECK(back.data.features[i] == t.data.features[i]);  // bit-exact
  REQUIRE(back.provenance.size() == 3);
  CHECK(back.provenance[0].kind == BiomarkerKind::dl_global);
  CHECK(back.provenance[1].kind == BiomarkerKind::dl_roi);
  CHECK(back.provenance[2].source == "1");

  // sidecar/csv disagreement is an error
  BiomarkerTable renamed = t;
  renamed.data.feature_names[0] = "Other";
  voxebm::write_biomarker_table("biomarkers_tmp2.csv", "biomarkers_tmp2.json",
                                renamed);
  CHECK_THROWS_AS(voxebm::read_biomarker_table(csv, "biomarkers_tmp2.json"),
                  std::runtime_error);
  CHECK_THROWS_AS(voxebm::read_biomarker_table("no_such.csv", side),
                  std::runtime_error);

  std::filesystem::remove(csv);
  std::filesystem::remove(side);
  std::filesystem::remove("biomarkers_tmp2.csv");
  std::filesystem::remove("biomarkers_tmp2.json");
}

}  // TEST_SUITE
