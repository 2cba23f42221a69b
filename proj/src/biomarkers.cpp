#include "voxebm/biomarkers.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <boost/math/distributions/students_t.hpp>

#include "json.hpp"

namespace voxebm {

namespace {

std::string region_name(int id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "Region%02d", id);
  return buf;
}

// sample mean and unbiased variance in one pass
void mean_var(const std::vector<double>& xs, double& mean, double& var) {
  double s = 0.0;
  for (double x : xs) s += x;
  mean = s / static_cast<double>(xs.size());
  double q = 0.0;
  for (double x : xs) q += (x - mean) * (x - mean);
  var = q / static_cast<double>(xs.size() - 1);
}

std::string kind_name(BiomarkerKind k) {
  switch (k) {
    case BiomarkerKind::dl_global: return "dl-global";
    case BiomarkerKind::dl_roi: return "dl-roi";
    case BiomarkerKind::volume: return "volume";
  }
  throw std::logic_error("unreachable biomarker kind");
}

BiomarkerKind kind_from_name(const std::string& s) {
  if (s == "dl-global") return BiomarkerKind::dl_global;
  if (s == "dl-roi") return BiomarkerKind::dl_roi;
  if (s == "volume") return BiomarkerKind::volume;
  throw std::runtime_error("unknown biomarker kind: " + s);
}

}  // namespace

RegionMap region_map(const Atlas& atlas) {
  RegionMap map;
  map.labels = Volume(atlas.dims);
  for (std::size_t i = 0; i < atlas.region.size(); ++i) {
    const int r = atlas.region[i];
    map.labels.data()[i] = r < 0 ? 0.0 : static_cast<double>(r + 1);
  }
  map.n_regions = atlas.n_regions;
  for (int id = 1; id <= atlas.n_regions; ++id)
    map.names.push_back(region_name(id));
  return map;
}

OofColumn oof_dl_biomarkers(const std::vector<Volume>& volumes,
                            const std::vector<int>& labels,
                            const std::vector<std::vector<std::size_t>>& folds,
                            const ScorerTrainer& trainer) {
  const std::size_t n = volumes.size();
  if (labels.size() != n)
    throw std::invalid_argument("labels do not match the cohort size");
  if (folds.size() < 2)
    throw std::invalid_argument("cross-validation needs at least 2 folds");

  // every subject in exactly one test_cv, or the folds leak
  std::vector<int> fold_of(n, -1);
  for (std::size_t f = 0; f < folds.size(); ++f) {
    if (folds[f].empty())
      throw std::invalid_argument("fold " + std::to_string(f) + " is empty");
    for (std::size_t i : folds[f]) {
      if (i >= n)
        throw std::invalid_argument("fold subject index out of range");
      if (fold_of[i] != -1)
        throw std::invalid_argument(
            "subject " + std::to_string(i) + " appears in two folds");
      fold_of[i] = static_cast<int>(f);
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    if (fold_of[i] == -1)
      throw std::invalid_argument(
          "subject " + std::to_string(i) + " is in no fold");

  OofColumn out;
  out.values.assign(n, 0.0);
  for (std::size_t f = 0; f < folds.size(); ++f) {
    std::vector<Volume> train_v;
    std::vector<int> train_y;
    for (std::size_t i = 0; i < n; ++i) {
      if (fold_of[i] == static_cast<int>(f)) continue;
      train_v.push_back(volumes[i]);
      train_y.push_back(labels[i]);
    }
    VolumePredictor model = trainer(train_v, train_y);
    for (std::size_t i : folds[f]) {
      const double p = model(volumes[i]);
      if (!(p >= 0.0 && p <= 1.0))
        throw std::invalid_argument(
            "predictor returned a non-probability: " + std::to_string(p));
      out.values[i] = p;
    }
    out.models.push_back(std::move(model));
  }
  return out;
}

double fold_mean_predict(const std::vector<VolumePredictor>& models,
                         const Volume& v) {
  if (models.empty())
    throw std::invalid_argument("no fold models to average");
  double s = 0.0;
  for (const auto& m : models) s += m(v);
  return s / static_cast<double>(models.size());
}

RegionVolumes region_volumes(const Volume& v, const RegionMap& map) {
  if (!(v.dims() == map.labels.dims()))
    throw std::invalid_argument("volume and region map dims differ");
  RegionVolumes out;
  out.by_region.assign(static_cast<std::size_t>(map.n_regions), 0.0);
  for (std::size_t i = 0; i < static_cast<std::size_t>(v.size()); ++i) {
    const double raw = map.labels.data()[i];
    const int id = static_cast<int>(raw);
    if (static_cast<double>(id) != raw || id < 0 || id > map.n_regions)
      throw std::invalid_argument("region label is not an id in 0..M");
    if (id > 0) out.by_region[static_cast<std::size_t>(id - 1)] += v.data()[i];
  }
  for (double r : out.by_region) out.total += r;
  return out;
}

std::vector<double> icv_correct(const std::vector<double>& volumes,
                                double icv) {
  if (!(icv > 0.0))
    throw std::invalid_argument("icv must be positive");
  std::vector<double> out(volumes);
  for (double& x : out) x /= icv;
  return out;
}

double welch_p_value(const std::vector<double>& a,
                     const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2)
    throw std::invalid_argument("welch test needs at least 2 values per side");
  double ma, va, mb, vb;
  mean_var(a, ma, va);
  mean_var(b, mb, vb);
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  const double sa = va / na, sb = vb / nb;
  if (sa + sb == 0.0) return 1.0;  // both samples constant: undefined, rank last
  const double t = (ma - mb) / std::sqrt(sa + sb);
  const double df =
      (sa + sb) * (sa + sb) /
      (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
  const boost::math::students_t dist(df);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(t)));
}

std::vector<SelectedBiomarker> select_v_biomarkers(
    const BiomarkerTable& table, const std::vector<int>& labels, int top_k) {
  const std::size_t n = table.data.rows();
  if (labels.size() != n)
    throw std::invalid_argument("labels do not match the table rows");
  const int cols = static_cast<int>(table.data.cols());
  if (top_k < 1 || top_k > cols)
    throw std::invalid_argument("top_k must lie in 1..column count");
  bool has0 = false, has1 = false;
  for (int y : labels) (y == 0 ? has0 : has1) = true;
  if (!has0 || !has1)
    throw std::invalid_argument("selection needs both classes present");

  std::vector<SelectedBiomarker> ranked;
  for (int c = 0; c < cols; ++c) {
    std::vector<double> neg, pos;
    for (std::size_t i = 0; i < n; ++i)
      (labels[i] == 0 ? neg : pos)
          .push_back(table.data.features[i][static_cast<std::size_t>(c)]);
    ranked.push_back({c, welch_p_value(neg, pos)});
  }
  std::sort(ranked.begin(), ranked.end(),
            [&](const SelectedBiomarker& x, const SelectedBiomarker& y) {
              if (x.p_value != y.p_value) return x.p_value < y.p_value;
              return table.data.feature_names[static_cast<std::size_t>(
                         x.column)] <
                     table.data.feature_names[static_cast<std::size_t>(
                         y.column)];
            });
  ranked.resize(static_cast<std::size_t>(top_k));
  return ranked;
}

BiomarkerTable take_columns(const BiomarkerTable& table,
                            const std::vector<int>& columns) {
  BiomarkerTable out;
  out.data.labels = table.data.labels;
  for (int c : columns) {
    if (c < 0 || c >= static_cast<int>(table.data.cols()))
      throw std::invalid_argument("column index out of range");
    out.data.feature_names.push_back(
        table.data.feature_names[static_cast<std::size_t>(c)]);
    out.provenance.push_back(table.provenance[static_cast<std::size_t>(c)]);
  }
  out.data.features.reserve(table.data.rows());
  for (const auto& row : table.data.features) {
    std::vector<double> r;
    for (int c : columns) r.push_back(row[static_cast<std::size_t>(c)]);
    out.data.features.push_back(std::move(r));
  }
  return out;
}

BiomarkerTable v_biomarker_table(const std::vector<Volume>& volumes,
                                 const std::vector<int>& labels,
                                 const std::vector<double>& icv,
                                 const RegionMap& map) {
  const std::size_t n = volumes.size();
  if (labels.size() != n || icv.size() != n)
    throw std::invalid_argument("cohort fields differ in length");
  BiomarkerTable t;
  t.data.labels = labels;
  t.data.feature_names.push_back("Total brain");
  t.provenance.push_back({BiomarkerKind::volume, "all"});
  for (int id = 1; id <= map.n_regions; ++id) {
    t.data.feature_names.push_back(map.names[static_cast<std::size_t>(id - 1)]);
    t.provenance.push_back({BiomarkerKind::volume, std::to_string(id)});
  }
  for (std::size_t i = 0; i < n; ++i) {
    const RegionVolumes rv = region_volumes(volumes[i], map);
    std::vector<double> row;
    row.push_back(rv.total);
    for (double r : rv.by_region) row.push_back(r);
    t.data.features.push_back(icv_correct(row, icv[i]));
  }
  return t;
}

double ensemble_average(const std::vector<double>& probs) {
  if (probs.empty())
    throw std::invalid_argument("cannot average an empty ensemble");
  double s = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0 && p <= 1.0))
      throw std::invalid_argument("ensemble member is not a probability");
    s += p;
  }
  return s / static_cast<double>(probs.size());
}

double ensemble_average(double glo, const std::vector<double>& locs) {
  std::vector<double> all;
  all.push_back(glo);
  all.insert(all.end(), locs.begin(), locs.end());
  return ensemble_average(all);
}

void write_biomarker_table(const std::string& csv_path,
                           const std::string& sidecar_path,
                           const BiomarkerTable& table) {
  if (table.provenance.size() != table.data.cols())
    throw std::invalid_argument("provenance does not match the columns");
  std::ofstream csv(csv_path);
  if (!csv) throw std::runtime_error("cannot open for writing: " + csv_path);
  csv << "label";
  for (const auto& name : table.data.feature_names) csv << "," << name;
  csv << "\n";
  char buf[64];
  for (std::size_t i = 0; i < table.data.rows(); ++i) {
    csv << table.data.labels[i];
    for (double x : table.data.features[i]) {
      std::snprintf(buf, sizeof buf, "%.17g", x);
      csv << "," << buf;
    }
    csv << "\n";
  }
  csv.flush();
  if (!csv) throw std::runtime_error("failed writing " + csv_path);

  nlohmann::json j;
  j["format"] = "biomarker-table";
  j["version"] = 1;
  nlohmann::json cols = nlohmann::json::array();
  for (std::size_t c = 0; c < table.provenance.size(); ++c) {
    nlohmann::json col;
    col["name"] = table.data.feature_names[c];
    col["kind"] = kind_name(table.provenance[c].kind);
    col["source"] = table.provenance[c].source;
    cols.push_back(col);
  }
  j["columns"] = cols;
  std::ofstream side(sidecar_path);
  if (!side)
    throw std::runtime_error("cannot open for writing: " + sidecar_path);
  side << j.dump(2) << "\n";
  side.flush();
  if (!side) throw std::runtime_error("failed writing " + sidecar_path);
}

BiomarkerTable read_biomarker_table(const std::string& csv_path,
                                    const std::string& sidecar_path) {
  std::ifstream csv(csv_path);
  if (!csv) throw std::runtime_error("cannot open for reading: " + csv_path);
  std::string line;
  if (!std::getline(csv, line))
    throw std::runtime_error("empty biomarker csv: " + csv_path);

  BiomarkerTable table;
  {
    std::istringstream header(line);
    std::string cell;
    if (!std::getline(header, cell, ',') || cell != "label")
      throw std::runtime_error("biomarker csv must start with a label column");
    while (std::getline(header, cell, ','))
      table.data.feature_names.push_back(cell);
  }
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    if (!std::getline(row, cell, ','))
      throw std::runtime_error("short biomarker csv row");
    table.data.labels.push_back(std::stoi(cell));
    std::vector<double> values;
    while (std::getline(row, cell, ',')) values.push_back(std::stod(cell));
    if (values.size() != table.data.cols())
      throw std::runtime_error("biomarker csv row width mismatch");
    table.data.features.push_back(std::move(values));
  }

  std::ifstream side(sidecar_path);
  if (!side)
    throw std::runtime_error("cannot open for reading: " + sidecar_path);
  nlohmann::json j;
  try {
    side >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("bad biomarker sidecar: " + std::string(e.what()));
  }
  if (j.value("format", "") != "biomarker-table" || j.value("version", 0) != 1)
    throw std::runtime_error("not a biomarker-table sidecar: " + sidecar_path);
  const auto& cols = j.at("columns");
  if (cols.size() != table.data.cols())
    throw std::runtime_error("sidecar column count differs from csv");
  for (std::size_t c = 0; c < cols.size(); ++c) {
    if (cols[c].at("name").get<std::string>() != table.data.feature_names[c])
      throw std::runtime_error("sidecar column name differs from csv header");
    table.provenance.push_back(
        {kind_from_name(cols[c].at("kind").get<std::string>()),
         cols[c].at("source").get<std::string>()});
  }
  return table;
}

}  // namespace voxebm
