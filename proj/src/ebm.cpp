#include "voxebm/ebm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

#include "json.hpp"
#include "voxebm/eval_stats.hpp"
#include "voxebm/rng.hpp"

namespace voxebm {

double logistic_clamped(double score) {
  const double s = std::clamp(score, -36.0, 36.0);
  return 1.0 / (1.0 + std::exp(-s));
}

double logit(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    throw std::invalid_argument("logit argument must be in (0,1)");
  }
  return std::log(p / (1.0 - p));
}

double log_loss(const std::vector<double>& probs,
                const std::vector<int>& labels) {
  if (probs.size() != labels.size() || probs.empty()) {
    throw std::invalid_argument("log_loss: bad input lengths");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    sum -= labels[i] == 1 ? std::log(probs[i]) : std::log(1.0 - probs[i]);
  }
  return sum / static_cast<double>(probs.size());
}

void validate_dataset(const TabularDataset& d, bool for_fitting) {
  if (d.feature_names.empty()) throw std::invalid_argument("no features");
  if (d.features.size() != d.labels.size()) {
    throw std::invalid_argument("feature row count != label count");
  }
  for (const auto& row : d.features) {
    if (row.size() != d.feature_names.size()) {
      throw std::invalid_argument("feature row arity mismatch");
    }
    for (double v : row) {
      if (!std::isfinite(v)) throw std::invalid_argument("non-finite feature");
    }
  }
  for (int y : d.labels) {
    if (y != 0 && y != 1) throw std::invalid_argument("labels must be 0 or 1");
  }
  if (for_fitting) {
    if (d.rows() < 2) throw std::invalid_argument("need at least 2 rows to fit");
    const auto pos = std::count(d.labels.begin(), d.labels.end(), 1);
    if (pos == 0 || pos == static_cast<long>(d.labels.size())) {
      throw std::invalid_argument("fitting needs both classes present");
    }
  }
}

int bin_of(const std::vector<double>& cuts, double x) {
  return static_cast<int>(
      std::lower_bound(cuts.begin(), cuts.end(), x) - cuts.begin());
}

BinMap fit_bins(const TabularDataset& d, int max_bins) {
  validate_dataset(d, false);
  if (d.rows() == 0) throw std::invalid_argument("empty dataset");
  if (max_bins < 2) throw std::invalid_argument("max_bins must be >= 2");

  BinMap map;
  map.cuts.resize(d.cols());
  std::vector<double> vals(d.rows());
  for (std::size_t j = 0; j < d.cols(); ++j) {
    for (std::size_t i = 0; i < d.rows(); ++i) vals[i] = d.features[i][j];
    std::sort(vals.begin(), vals.end());
    std::vector<double> distinct = vals;
    distinct.erase(std::unique(distinct.begin(), distinct.end()),
                   distinct.end());

    std::vector<double>& cuts = map.cuts[j];
    if (distinct.size() <= static_cast<std::size_t>(max_bins)) {
      // one bin per distinct value: cut at midpoints
      for (std::size_t k = 0; k + 1 < distinct.size(); ++k) {
        cuts.push_back(0.5 * (distinct[k] + distinct[k + 1]));
      }
    } else {
      // quantile cuts with duplicates collapsed
      for (int q = 1; q < max_bins; ++q) {
        const double pos = static_cast<double>(q) /
                           static_cast<double>(max_bins) *
                           static_cast<double>(vals.size() - 1);
        const auto lo = static_cast<std::size_t>(std::floor(pos));
        const double frac = pos - static_cast<double>(lo);
        const double c = lo + 1 < vals.size()
                             ? vals[lo] * (1.0 - frac) + vals[lo + 1] * frac
                             : vals.back();
        if (cuts.empty() || c > cuts.back()) cuts.push_back(c);
      }
    }
  }
  return map;
}

namespace {

double sse_term(double s, double c) { return c > 0.0 ? s * s / c : 0.0; }

// Greedy range-split regression tree over a binned axis; returns the leaf
// mean for every bin. Splits stop when no cut improves SSE by > 1e-12.
std::vector<double> fit_tree_1d(const std::vector<double>& S,
                                const std::vector<double>& C, int max_leaves) {
  struct Leaf {
    int lo, hi;
    double s, c;
  };
  const int nb = static_cast<int>(S.size());
  std::vector<Leaf> leaves;
  {
    double s = 0.0, c = 0.0;
    for (int b = 0; b < nb; ++b) {
      s += S[static_cast<std::size_t>(b)];
      c += C[static_cast<std::size_t>(b)];
    }
    leaves.push_back({0, nb, s, c});
  }
  while (static_cast<int>(leaves.size()) < max_leaves) {
    double best_gain = 1e-12;
    std::size_t best_leaf = 0;
    int best_cut = -1;
    double best_sl = 0.0, best_cl = 0.0;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
      const Leaf& L = leaves[li];
      double sl = 0.0, cl = 0.0;
      for (int cut = L.lo + 1; cut < L.hi; ++cut) {
        sl += S[static_cast<std::size_t>(cut - 1)];
        cl += C[static_cast<std::size_t>(cut - 1)];
        const double gain =
            sse_term(sl, cl) + sse_term(L.s - sl, L.c - cl) - sse_term(L.s, L.c);
        if (gain > best_gain) {
          best_gain = gain;
          best_leaf = li;
          best_cut = cut;
          best_sl = sl;
          best_cl = cl;
        }
      }
    }
    if (best_cut < 0) break;
    Leaf& L = leaves[best_leaf];
    const Leaf right{best_cut, L.hi, L.s - best_sl, L.c - best_cl};
    L.hi = best_cut;
    L.s = best_sl;
    L.c = best_cl;
    leaves.push_back(right);
  }
  std::vector<double> v(static_cast<std::size_t>(nb), 0.0);
  for (const Leaf& L : leaves) {
    const double val = L.c > 0.0 ? L.s / L.c : 0.0;
    for (int b = L.lo; b < L.hi; ++b) v[static_cast<std::size_t>(b)] = val;
  }
  return v;
}

// Prefix-summed grid for O(1) rectangle sums.
struct GridSums {
  int ni = 0, nj = 0;
  std::vector<double> ps;  // (ni+1) x (nj+1)
  void build(const std::vector<double>& g, int ni_, int nj_) {
    ni = ni_;
    nj = nj_;
    ps.assign(static_cast<std::size_t>(ni + 1) * (nj + 1), 0.0);
    for (int i = 0; i < ni; ++i) {
      for (int j = 0; j < nj; ++j) {
        at(i + 1, j + 1) = g[static_cast<std::size_t>(i) * nj + j] +
                           at(i, j + 1) + at(i + 1, j) - at(i, j);
      }
    }
  }
  double& at(int i, int j) {
    return ps[static_cast<std::size_t>(i) * (nj + 1) + j];
  }
  double at(int i, int j) const {
    return ps[static_cast<std::size_t>(i) * (nj + 1) + j];
  }
  double rect(int i0, int i1, int j0, int j1) const {  // half-open
    return at(i1, j1) - at(i0, j1) - at(i1, j0) + at(i0, j0);
  }
};

// Greedy rectangle-split regression tree over a 2D binned grid.
std::vector<double> fit_tree_2d(const std::vector<double>& S,
                                const std::vector<double>& C, int ni, int nj,
                                int max_leaves) {
  GridSums gs, gc;
  gs.build(S, ni, nj);
  gc.build(C, ni, nj);
  struct Rect {
    int i0, i1, j0, j1;
  };
  std::vector<Rect> leaves{{0, ni, 0, nj}};
  while (static_cast<int>(leaves.size()) < max_leaves) {
    double best_gain = 1e-12;
    std::size_t best_leaf = 0;
    int best_axis = -1, best_cut = -1;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
      const Rect& r = leaves[li];
      const double s = gs.rect(r.i0, r.i1, r.j0, r.j1);
      const double c = gc.rect(r.i0, r.i1, r.j0, r.j1);
      const double base = sse_term(s, c);
      for (int cut = r.i0 + 1; cut < r.i1; ++cut) {
        const double sl = gs.rect(r.i0, cut, r.j0, r.j1);
        const double cl = gc.rect(r.i0, cut, r.j0, r.j1);
        const double gain = sse_term(sl, cl) + sse_term(s - sl, c - cl) - base;
        if (gain > best_gain) {
          best_gain = gain;
          best_leaf = li;
          best_axis = 0;
          best_cut = cut;
        }
      }
      for (int cut = r.j0 + 1; cut < r.j1; ++cut) {
        const double sl = gs.rect(r.i0, r.i1, r.j0, cut);
        const double cl = gc.rect(r.i0, r.i1, r.j0, cut);
        const double gain = sse_term(sl, cl) + sse_term(s - sl, c - cl) - base;
        if (gain > best_gain) {
          best_gain = gain;
          best_leaf = li;
          best_axis = 1;
          best_cut = cut;
        }
      }
    }
    if (best_cut < 0) break;
    Rect& r = leaves[best_leaf];
    Rect right = r;
    if (best_axis == 0) {
      right.i0 = best_cut;
      r.i1 = best_cut;
    } else {
      right.j0 = best_cut;
      r.j1 = best_cut;
    }
    leaves.push_back(right);
  }
  std::vector<double> v(static_cast<std::size_t>(ni) * nj, 0.0);
  for (const Rect& r : leaves) {
    const double s = gs.rect(r.i0, r.i1, r.j0, r.j1);
    const double c = gc.rect(r.i0, r.i1, r.j0, r.j1);
    const double val = c > 0.0 ? s / c : 0.0;
    for (int i = r.i0; i < r.i1; ++i) {
      for (int j = r.j0; j < r.j1; ++j) {
        v[static_cast<std::size_t>(i) * nj + j] = val;
      }
    }
  }
  return v;
}

// bins per feature column over all rows
std::vector<std::vector<int>> bin_columns(const TabularDataset& d,
                                          const BinMap& map) {
  std::vector<std::vector<int>> cols(d.cols(), std::vector<int>(d.rows()));
  for (std::size_t j = 0; j < d.cols(); ++j) {
    for (std::size_t i = 0; i < d.rows(); ++i) {
      cols[j][i] = bin_of(map.cuts[j], d.features[i][j]);
    }
  }
  return cols;
}

void check_config(const EbmConfig& cfg) {
  if (cfg.rounds < 0) throw std::invalid_argument("rounds must be >= 0");
  if (cfg.bags < 1) throw std::invalid_argument("bags must be >= 1");
  if (cfg.max_leaves < 2) throw std::invalid_argument("max_leaves must be >= 2");
  if (cfg.max_bins < 2) throw std::invalid_argument("max_bins must be >= 2");
  if (!(cfg.learning_rate > 0.0)) {
    throw std::invalid_argument("learning_rate must be > 0");
  }
  if (cfg.val_fraction < 0.0 || cfg.val_fraction >= 1.0) {
    throw std::invalid_argument("val_fraction must be in [0, 1)");
  }
  if (cfg.early_stop_patience < 1) {
    throw std::invalid_argument("early_stop_patience must be >= 1");
  }
}

}  // namespace

EbmModel fit_ebm(const TabularDataset& d, const EbmConfig& cfg) {
  validate_dataset(d, true);
  check_config(cfg);

  EbmModel m;
  m.feature_names = d.feature_names;
  m.config = cfg;
  m.bins = fit_bins(d, cfg.max_bins);

  const std::size_t n = d.cols();
  const std::size_t N = d.rows();

  double ybar = 0.0;
  for (int y : d.labels) ybar += y;
  ybar /= static_cast<double>(N);
  m.intercept = logit(ybar);

  m.shapes.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    m.shapes[j].feature = static_cast<int>(j);
    m.shapes[j].scores.assign(
        static_cast<std::size_t>(m.bins.bin_count(static_cast<int>(j))), 0.0);
  }
  if (cfg.rounds == 0) return m;  // all-zero shapes, base-rate intercept

  // internal holdout for early stopping, skipped when infeasible
  std::vector<std::size_t> boost_rows, val_rows;
  if (cfg.val_fraction > 0.0) {
    try {
      SplitPlan plan = stratified_split(d.labels, cfg.val_fraction,
                                        derive_seed(cfg.seed, "ebm-val"));
      boost_rows = plan.members(0);
      val_rows = plan.members(1);
      m.early_stop_active = true;
    } catch (const std::invalid_argument&) {
      boost_rows.clear();
    }
  }
  if (!m.early_stop_active) {
    boost_rows.resize(N);
    std::iota(boost_rows.begin(), boost_rows.end(), std::size_t{0});
  }

  const auto col_bins = bin_columns(d, m.bins);
  const std::size_t nb_rows = boost_rows.size();

  // per-row state on the boosted portion (and the holdout)
  std::vector<double> score_b(nb_rows, m.intercept);
  std::vector<int> y_b(nb_rows);
  std::vector<std::vector<int>> bin_b(n, std::vector<int>(nb_rows));
  for (std::size_t t = 0; t < nb_rows; ++t) {
    y_b[t] = d.labels[boost_rows[t]];
    for (std::size_t j = 0; j < n; ++j) bin_b[j][t] = col_bins[j][boost_rows[t]];
  }
  std::vector<double> score_v(val_rows.size(), m.intercept);
  std::vector<int> y_v(val_rows.size());
  std::vector<std::vector<int>> bin_v(n, std::vector<int>(val_rows.size()));
  for (std::size_t t = 0; t < val_rows.size(); ++t) {
    y_v[t] = d.labels[val_rows[t]];
    for (std::size_t j = 0; j < n; ++j) bin_v[j][t] = col_bins[j][val_rows[t]];
  }

  Rng rng(derive_seed(cfg.seed, "ebm-boost"));
  std::vector<double> g(nb_rows), S, C, avg;
  std::vector<int> w(nb_rows);

  auto val_loss = [&]() {
    double sum = 0.0;
    for (std::size_t t = 0; t < val_rows.size(); ++t) {
      const double p = logistic_clamped(score_v[t]);
      sum -= y_v[t] == 1 ? std::log(p) : std::log(1.0 - p);
    }
    return sum / static_cast<double>(val_rows.size());
  };

  // snapshot of the best-so-far shapes; round 0 is the intercept-only model
  std::vector<ShapeFunction> best_shapes = m.shapes;
  double best_vl = m.early_stop_active ? val_loss() : 0.0;
  int best_round = 0;
  int patience = 0;

  int round = 0;
  for (; round < cfg.rounds; ++round) {
    for (std::size_t j = 0; j < n; ++j) {
      const int nb = m.bins.bin_count(static_cast<int>(j));
      for (std::size_t t = 0; t < nb_rows; ++t) {
        g[t] = static_cast<double>(y_b[t]) - logistic_clamped(score_b[t]);
      }
      avg.assign(static_cast<std::size_t>(nb), 0.0);
      for (int k = 0; k < cfg.bags; ++k) {
        std::fill(w.begin(), w.end(), 0);
        for (std::size_t t = 0; t < nb_rows; ++t) {
          w[static_cast<std::size_t>(rng.uniform_int(nb_rows))]++;
        }
        S.assign(static_cast<std::size_t>(nb), 0.0);
        C.assign(static_cast<std::size_t>(nb), 0.0);
        for (std::size_t t = 0; t < nb_rows; ++t) {
          if (w[t] == 0) continue;
          const auto b = static_cast<std::size_t>(bin_b[j][t]);
          S[b] += static_cast<double>(w[t]) * g[t];
          C[b] += static_cast<double>(w[t]);
        }
        const std::vector<double> v = fit_tree_1d(S, C, cfg.max_leaves);
        for (int b = 0; b < nb; ++b) avg[static_cast<std::size_t>(b)] += v[static_cast<std::size_t>(b)];
      }
      for (int b = 0; b < nb; ++b) {
        avg[static_cast<std::size_t>(b)] *=
            cfg.learning_rate / static_cast<double>(cfg.bags);
        m.shapes[j].scores[static_cast<std::size_t>(b)] += avg[static_cast<std::size_t>(b)];
      }
      for (std::size_t t = 0; t < nb_rows; ++t) {
        score_b[t] += avg[static_cast<std::size_t>(bin_b[j][t])];
      }
      for (std::size_t t = 0; t < val_rows.size(); ++t) {
        score_v[t] += avg[static_cast<std::size_t>(bin_v[j][t])];
      }
    }
    if (cfg.trace_loss) {
      double sum = 0.0;
      for (std::size_t t = 0; t < nb_rows; ++t) {
        const double p = logistic_clamped(score_b[t]);
        sum -= y_b[t] == 1 ? std::log(p) : std::log(1.0 - p);
      }
      m.train_loss_trace.push_back(sum / static_cast<double>(nb_rows));
    }
    if (m.early_stop_active) {
      const double vl = val_loss();
      if (vl < best_vl - 1e-12) {
        best_vl = vl;
        best_shapes = m.shapes;
        best_round = round + 1;
        patience = 0;
      } else if (++patience >= cfg.early_stop_patience) {
        m.early_stopped = true;
        break;
      }
    }
  }
  if (m.early_stop_active) {
    m.shapes = std::move(best_shapes);
    m.rounds_used = best_round;
  } else {
    m.rounds_used = round;
  }

  // mean-center each shape under full-data bin counts, mass into intercept
  for (std::size_t j = 0; j < n; ++j) {
    const int nb = m.bins.bin_count(static_cast<int>(j));
    std::vector<double> cnt(static_cast<std::size_t>(nb), 0.0);
    for (std::size_t i = 0; i < N; ++i) cnt[static_cast<std::size_t>(col_bins[j][i])] += 1.0;
    double mean = 0.0;
    for (int b = 0; b < nb; ++b) {
      mean += cnt[static_cast<std::size_t>(b)] * m.shapes[j].scores[static_cast<std::size_t>(b)];
    }
    mean /= static_cast<double>(N);
    for (double& s : m.shapes[j].scores) s -= mean;
    m.intercept += mean;
  }
  return m;
}

std::vector<PairCandidate> detect_pairs(const TabularDataset& d,
                                        const EbmModel& model, int top_k) {
  validate_dataset(d, false);
  if (!model.fitted()) throw std::invalid_argument("model is not fitted");
  if (!model.pairs.empty()) {
    throw std::invalid_argument("pair detection expects a mains-only model");
  }
  if (d.cols() != model.feature_names.size()) {
    throw std::invalid_argument("dataset arity does not match model");
  }
  const int n = static_cast<int>(d.cols());
  const long max_pairs = static_cast<long>(n) * (n - 1) / 2;
  if (top_k < 0 || top_k > max_pairs) {
    throw std::invalid_argument("top_k out of range for feature count");
  }

  const auto col_bins = bin_columns(d, model.bins);
  std::vector<double> resid(d.rows());
  for (std::size_t i = 0; i < d.rows(); ++i) {
    resid[i] = static_cast<double>(d.labels[i]) -
               predict_proba(model, d.features[i]);
  }

  std::vector<PairCandidate> cands;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const int ni = model.bins.bin_count(i);
      const int nj = model.bins.bin_count(j);
      std::vector<double> S(static_cast<std::size_t>(ni) * nj, 0.0);
      std::vector<double> C(static_cast<std::size_t>(ni) * nj, 0.0);
      for (std::size_t t = 0; t < d.rows(); ++t) {
        const auto cell = static_cast<std::size_t>(col_bins[static_cast<std::size_t>(i)][t]) * nj +
                          static_cast<std::size_t>(col_bins[static_cast<std::size_t>(j)][t]);
        S[cell] += resid[t];
        C[cell] += 1.0;
      }
      GridSums gs, gc;
      gs.build(S, ni, nj);
      gc.build(C, ni, nj);
      const double s_all = gs.rect(0, ni, 0, nj);
      const double c_all = gc.rect(0, ni, 0, nj);
      const double base = sse_term(s_all, c_all);
      double best = 0.0;
      for (int ci = 1; ci < ni; ++ci) {
        for (int cj = 1; cj < nj; ++cj) {
          double red = -base;
          red += sse_term(gs.rect(0, ci, 0, cj), gc.rect(0, ci, 0, cj));
          red += sse_term(gs.rect(0, ci, cj, nj), gc.rect(0, ci, cj, nj));
          red += sse_term(gs.rect(ci, ni, 0, cj), gc.rect(ci, ni, 0, cj));
          red += sse_term(gs.rect(ci, ni, cj, nj), gc.rect(ci, ni, cj, nj));
          best = std::max(best, red);
        }
      }
      if (best < 1e-12) best = 0.0;
      cands.push_back({i, j, best});
    }
  }
  std::sort(cands.begin(), cands.end(),
            [](const PairCandidate& a, const PairCandidate& b) {
              if (a.strength != b.strength) return a.strength > b.strength;
              if (a.i != b.i) return a.i < b.i;
              return a.j < b.j;
            });
  cands.resize(static_cast<std::size_t>(top_k));
  return cands;
}

EbmModel add_pair_terms(const TabularDataset& d, const EbmModel& model,
                        const std::vector<std::pair<int, int>>& pairs) {
  validate_dataset(d, true);
  if (!model.fitted()) throw std::invalid_argument("model is not fitted");
  if (d.cols() != model.feature_names.size()) {
    throw std::invalid_argument("dataset arity does not match model");
  }
  EbmModel m = model;
  if (pairs.empty()) return m;

  const int n = static_cast<int>(d.cols());
  std::set<std::pair<int, int>> seen;
  for (const PairTerm& p : model.pairs) seen.insert({p.fi, p.fj});
  for (auto [i, j] : pairs) {
    if (i == j || i < 0 || j < 0 || i >= n || j >= n) {
      throw std::invalid_argument("invalid pair feature indices");
    }
    if (i > j) std::swap(i, j);
    if (!seen.insert({i, j}).second) {
      throw std::invalid_argument("duplicate pair term");
    }
  }

  const EbmConfig& cfg = m.config;
  const std::size_t N = d.rows();
  const std::size_t np = pairs.size();

  // normalized (fi < fj) grids appended after the existing terms
  const std::size_t first_new = m.pairs.size();
  for (auto [i, j] : pairs) {
    if (i > j) std::swap(i, j);
    PairTerm t;
    t.fi = i;
    t.fj = j;
    t.grid.assign(static_cast<std::size_t>(m.bins.bin_count(i)) *
                      static_cast<std::size_t>(m.bins.bin_count(j)),
                  0.0);
    m.pairs.push_back(std::move(t));
  }
  if (cfg.rounds == 0) return m;

  std::vector<std::size_t> boost_rows, val_rows;
  bool early = false;
  if (cfg.val_fraction > 0.0) {
    try {
      SplitPlan plan = stratified_split(d.labels, cfg.val_fraction,
                                        derive_seed(cfg.seed, "ebm-pair-val"));
      boost_rows = plan.members(0);
      val_rows = plan.members(1);
      early = true;
    } catch (const std::invalid_argument&) {
      boost_rows.clear();
    }
  }
  if (!early) {
    boost_rows.resize(N);
    std::iota(boost_rows.begin(), boost_rows.end(), std::size_t{0});
  }

  const auto col_bins = bin_columns(d, m.bins);
  const std::size_t nb_rows = boost_rows.size();

  // frozen-terms score (mains plus any pre-existing pairs), then evolving
  // contributions of the new grids on top
  auto frozen_score = [&](std::size_t row) {
    return predict_score(model, d.features[row]);
  };
  std::vector<double> score_b(nb_rows), score_v(val_rows.size());
  std::vector<int> y_b(nb_rows), y_v(val_rows.size());
  for (std::size_t t = 0; t < nb_rows; ++t) {
    score_b[t] = frozen_score(boost_rows[t]);
    y_b[t] = d.labels[boost_rows[t]];
  }
  for (std::size_t t = 0; t < val_rows.size(); ++t) {
    score_v[t] = frozen_score(val_rows[t]);
    y_v[t] = d.labels[val_rows[t]];
  }
  // per-pair cell index of each row
  std::vector<std::vector<std::size_t>> cell_b(np), cell_v(np);
  for (std::size_t p = 0; p < np; ++p) {
    const PairTerm& t = m.pairs[first_new + p];
    const int nj = m.bins.bin_count(t.fj);
    cell_b[p].resize(nb_rows);
    for (std::size_t r = 0; r < nb_rows; ++r) {
      cell_b[p][r] = static_cast<std::size_t>(col_bins[static_cast<std::size_t>(t.fi)][boost_rows[r]]) * nj +
                     static_cast<std::size_t>(col_bins[static_cast<std::size_t>(t.fj)][boost_rows[r]]);
    }
    cell_v[p].resize(val_rows.size());
    for (std::size_t r = 0; r < val_rows.size(); ++r) {
      cell_v[p][r] = static_cast<std::size_t>(col_bins[static_cast<std::size_t>(t.fi)][val_rows[r]]) * nj +
                     static_cast<std::size_t>(col_bins[static_cast<std::size_t>(t.fj)][val_rows[r]]);
    }
  }

  Rng rng(derive_seed(cfg.seed, "ebm-pair-boost"));
  std::vector<double> g(nb_rows), S, C, avg;
  std::vector<int> w(nb_rows);

  auto val_loss = [&]() {
    double sum = 0.0;
    for (std::size_t t = 0; t < val_rows.size(); ++t) {
      const double p = logistic_clamped(score_v[t]);
      sum -= y_v[t] == 1 ? std::log(p) : std::log(1.0 - p);
    }
    return sum / static_cast<double>(val_rows.size());
  };

  auto snapshot_grids = [&]() {
    std::vector<std::vector<double>> out;
    for (std::size_t p = 0; p < np; ++p) out.push_back(m.pairs[first_new + p].grid);
    return out;
  };
  std::vector<std::vector<double>> best_grids = snapshot_grids();
  double best_vl = early ? val_loss() : 0.0;
  int best_round = 0;
  int patience = 0;

  int round = 0;
  for (; round < cfg.rounds; ++round) {
    for (std::size_t p = 0; p < np; ++p) {
      PairTerm& term = m.pairs[first_new + p];
      const int ni = m.bins.bin_count(term.fi);
      const int nj = m.bins.bin_count(term.fj);
      const std::size_t cells = static_cast<std::size_t>(ni) * nj;
      for (std::size_t t = 0; t < nb_rows; ++t) {
        g[t] = static_cast<double>(y_b[t]) - logistic_clamped(score_b[t]);
      }
      avg.assign(cells, 0.0);
      for (int k = 0; k < cfg.bags; ++k) {
        std::fill(w.begin(), w.end(), 0);
        for (std::size_t t = 0; t < nb_rows; ++t) {
          w[static_cast<std::size_t>(rng.uniform_int(nb_rows))]++;
        }
        S.assign(cells, 0.0);
        C.assign(cells, 0.0);
        for (std::size_t t = 0; t < nb_rows; ++t) {
          if (w[t] == 0) continue;
          S[cell_b[p][t]] += static_cast<double>(w[t]) * g[t];
          C[cell_b[p][t]] += static_cast<double>(w[t]);
        }
        const std::vector<double> v = fit_tree_2d(S, C, ni, nj, cfg.max_leaves);
        for (std::size_t cidx = 0; cidx < cells; ++cidx) avg[cidx] += v[cidx];
      }
      for (std::size_t cidx = 0; cidx < cells; ++cidx) {
        avg[cidx] *= cfg.learning_rate / static_cast<double>(cfg.bags);
        term.grid[cidx] += avg[cidx];
      }
      for (std::size_t t = 0; t < nb_rows; ++t) score_b[t] += avg[cell_b[p][t]];
      for (std::size_t t = 0; t < val_rows.size(); ++t) score_v[t] += avg[cell_v[p][t]];
    }
    if (early) {
      const double vl = val_loss();
      if (vl < best_vl - 1e-12) {
        best_vl = vl;
        best_grids = snapshot_grids();
        best_round = round + 1;
        patience = 0;
      } else if (++patience >= cfg.early_stop_patience) {
        break;
      }
    }
  }
  if (early) {
    for (std::size_t p = 0; p < np; ++p) {
      m.pairs[first_new + p].grid = std::move(best_grids[p]);
    }
    m.pair_rounds_used = best_round;
  } else {
    m.pair_rounds_used = round;
  }

  // center each new grid under the full-data joint bin counts
  for (std::size_t p = 0; p < np; ++p) {
    PairTerm& term = m.pairs[first_new + p];
    const int nj = m.bins.bin_count(term.fj);
    std::vector<double> cnt(term.grid.size(), 0.0);
    for (std::size_t i = 0; i < N; ++i) {
      cnt[static_cast<std::size_t>(col_bins[static_cast<std::size_t>(term.fi)][i]) * nj +
          static_cast<std::size_t>(col_bins[static_cast<std::size_t>(term.fj)][i])] += 1.0;
    }
    double mean = 0.0;
    for (std::size_t cidx = 0; cidx < term.grid.size(); ++cidx) {
      mean += cnt[cidx] * term.grid[cidx];
    }
    mean /= static_cast<double>(N);
    for (double& v : term.grid) v -= mean;
    m.intercept += mean;
  }
  return m;
}

namespace {

void check_query(const EbmModel& m, const std::vector<double>& x) {
  if (!m.fitted()) throw std::invalid_argument("model is not fitted");
  if (x.size() != m.feature_names.size()) {
    throw std::invalid_argument("query arity does not match model");
  }
  for (double v : x) {
    if (!std::isfinite(v)) throw std::invalid_argument("non-finite query value");
  }
}

}  // namespace

double predict_score(const EbmModel& model, const std::vector<double>& x) {
  check_query(model, x);
  double score = model.intercept;
  for (const ShapeFunction& f : model.shapes) {
    const auto j = static_cast<std::size_t>(f.feature);
    score += f.scores[static_cast<std::size_t>(bin_of(model.bins.cuts[j], x[j]))];
  }
  for (const PairTerm& p : model.pairs) {
    const int bi = bin_of(model.bins.cuts[static_cast<std::size_t>(p.fi)],
                          x[static_cast<std::size_t>(p.fi)]);
    const int bj = bin_of(model.bins.cuts[static_cast<std::size_t>(p.fj)],
                          x[static_cast<std::size_t>(p.fj)]);
    score += p.grid[static_cast<std::size_t>(bi) * model.bins.bin_count(p.fj) + bj];
  }
  return score;
}

double predict_proba(const EbmModel& model, const std::vector<double>& x) {
  return logistic_clamped(predict_score(model, x));
}

std::vector<std::pair<std::string, double>> term_contributions(
    const EbmModel& model, const std::vector<double>& x) {
  check_query(model, x);
  std::vector<std::pair<std::string, double>> out;
  for (const ShapeFunction& f : model.shapes) {
    const auto j = static_cast<std::size_t>(f.feature);
    out.emplace_back(
        model.feature_names[j],
        f.scores[static_cast<std::size_t>(bin_of(model.bins.cuts[j], x[j]))]);
  }
  for (const PairTerm& p : model.pairs) {
    const int bi = bin_of(model.bins.cuts[static_cast<std::size_t>(p.fi)],
                          x[static_cast<std::size_t>(p.fi)]);
    const int bj = bin_of(model.bins.cuts[static_cast<std::size_t>(p.fj)],
                          x[static_cast<std::size_t>(p.fj)]);
    out.emplace_back(model.feature_names[static_cast<std::size_t>(p.fi)] + " × " +
                         model.feature_names[static_cast<std::size_t>(p.fj)],
                     p.grid[static_cast<std::size_t>(bi) * model.bins.bin_count(p.fj) + bj]);
  }
  return out;
}

std::vector<std::pair<std::string, double>> global_importance(
    const EbmModel& model, const TabularDataset& d) {
  validate_dataset(d, false);
  if (!model.fitted()) throw std::invalid_argument("model is not fitted");
  if (d.rows() == 0) throw std::invalid_argument("empty dataset");
  std::vector<std::pair<std::string, double>> acc;
  for (std::size_t i = 0; i < d.rows(); ++i) {
    const auto contribs = term_contributions(model, d.features[i]);
    if (acc.empty()) {
      for (const auto& [name, c] : contribs) acc.emplace_back(name, std::abs(c));
    } else {
      for (std::size_t t = 0; t < contribs.size(); ++t) {
        acc[t].second += std::abs(contribs[t].second);
      }
    }
  }
  for (auto& [name, v] : acc) v /= static_cast<double>(d.rows());
  std::stable_sort(acc.begin(), acc.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  return acc;
}

std::string ebm_to_json(const EbmModel& m) {
  nlohmann::json j;
  j["format"] = "ebm-model";
  j["version"] = 1;
  j["intercept"] = m.intercept;
  j["feature_names"] = m.feature_names;
  j["cuts"] = m.bins.cuts;
  nlohmann::json shapes = nlohmann::json::array();
  for (const ShapeFunction& f : m.shapes) {
    shapes.push_back({{"feature", f.feature}, {"scores", f.scores}});
  }
  j["shapes"] = shapes;
  nlohmann::json pairs = nlohmann::json::array();
  for (const PairTerm& p : m.pairs) {
    pairs.push_back({{"fi", p.fi}, {"fj", p.fj}, {"grid", p.grid}});
  }
  j["pairs"] = pairs;
  j["config"] = {{"rounds", m.config.rounds},
                 {"learning_rate", m.config.learning_rate},
                 {"bags", m.config.bags},
                 {"max_leaves", m.config.max_leaves},
                 {"max_bins", m.config.max_bins},
                 {"val_fraction", m.config.val_fraction},
                 {"early_stop_patience", m.config.early_stop_patience},
                 {"seed", m.config.seed},
                 {"trace_loss", m.config.trace_loss}};
  j["rounds_used"] = m.rounds_used;
  j["pair_rounds_used"] = m.pair_rounds_used;
  j["early_stop_active"] = m.early_stop_active;
  j["early_stopped"] = m.early_stopped;
  if (!m.train_loss_trace.empty()) j["train_loss_trace"] = m.train_loss_trace;
  return j.dump();
}

EbmModel ebm_from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  if (j.value("format", "") != "ebm-model" || j.value("version", 0) != 1) {
    throw std::invalid_argument("not a version-1 ebm-model document");
  }
  EbmModel m;
  m.intercept = j.at("intercept").get<double>();
  m.feature_names = j.at("feature_names").get<std::vector<std::string>>();
  m.bins.cuts = j.at("cuts").get<std::vector<std::vector<double>>>();
  for (const auto& js : j.at("shapes")) {
    ShapeFunction f;
    f.feature = js.at("feature").get<int>();
    f.scores = js.at("scores").get<std::vector<double>>();
    m.shapes.push_back(std::move(f));
  }
  for (const auto& jp : j.at("pairs")) {
    PairTerm p;
    p.fi = jp.at("fi").get<int>();
    p.fj = jp.at("fj").get<int>();
    p.grid = jp.at("grid").get<std::vector<double>>();
    m.pairs.push_back(std::move(p));
  }
  const auto& jc = j.at("config");
  m.config.rounds = jc.at("rounds").get<int>();
  m.config.learning_rate = jc.at("learning_rate").get<double>();
  m.config.bags = jc.at("bags").get<int>();
  m.config.max_leaves = jc.at("max_leaves").get<int>();
  m.config.max_bins = jc.at("max_bins").get<int>();
  m.config.val_fraction = jc.at("val_fraction").get<double>();
  m.config.early_stop_patience = jc.at("early_stop_patience").get<int>();
  m.config.seed = jc.at("seed").get<std::uint64_t>();
  m.config.trace_loss = jc.at("trace_loss").get<bool>();
  m.rounds_used = j.at("rounds_used").get<int>();
  m.pair_rounds_used = j.at("pair_rounds_used").get<int>();
  m.early_stop_active = j.at("early_stop_active").get<bool>();
  m.early_stopped = j.at("early_stopped").get<bool>();
  if (j.contains("train_loss_trace")) {
    m.train_loss_trace = j.at("train_loss_trace").get<std::vector<double>>();
  }
  return m;
}

}  // namespace voxebm
