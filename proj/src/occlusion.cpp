#include "voxebm/occlusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "json.hpp"

namespace voxebm {

namespace {

// The three per-axis origin lists of one sweep, validated against dims.
struct SweepGrid {
  std::vector<int> xs, ys, zs;
  Dims coarse_dims() const {
    return Dims{static_cast<int>(xs.size()), static_cast<int>(ys.size()),
                static_cast<int>(zs.size())};
  }
};

SweepGrid sweep_grid(const Dims& dims, int edge, int stride) {
  if (edge < 1) throw std::invalid_argument("patch edge must be positive");
  if (edge > dims.nx || edge > dims.ny || edge > dims.nz) {
    throw std::invalid_argument(
        "patch edge " + std::to_string(edge) + " exceeds volume dims " +
        std::to_string(dims.nx) + "x" + std::to_string(dims.ny) + "x" +
        std::to_string(dims.nz));
  }
  return SweepGrid{sweep_positions(dims.nx, edge, stride),
                   sweep_positions(dims.ny, edge, stride),
                   sweep_positions(dims.nz, edge, stride)};
}

}  // namespace

int effective_stride(const OcclusionConfig& cfg) {
  if (cfg.stride < 0) throw std::invalid_argument("stride must not be negative");
  if (cfg.stride > 0) return cfg.stride;
  return std::max(1, cfg.occlusion_edge / 2);
}

std::vector<int> sweep_positions(int extent, int edge, int stride) {
  if (extent < 1 || edge < 1 || edge > extent) {
    throw std::invalid_argument("sweep_positions: edge must fit in extent");
  }
  if (stride < 1) throw std::invalid_argument("sweep_positions: stride must be >= 1");
  std::vector<int> out;
  for (int p = 0; p + edge <= extent; p += stride) out.push_back(p);
  if (out.back() != extent - edge) out.push_back(extent - edge);
  return out;
}

Volume occlusion_impacts(const VolumeScorer& scorer, const Volume& v,
                         const OcclusionConfig& cfg) {
  if (!scorer) throw std::invalid_argument("occlusion_impacts: empty scorer");
  const int e = cfg.occlusion_edge;
  const SweepGrid g = sweep_grid(v.dims(), e, effective_stride(cfg));
  const double base = scorer(v);
  Volume coarse(g.coarse_dims());
  for (std::size_t iz = 0; iz < g.zs.size(); ++iz)
    for (std::size_t iy = 0; iy < g.ys.size(); ++iy)
      for (std::size_t ix = 0; ix < g.xs.size(); ++ix) {
        const PatchSpec patch{g.xs[ix], g.ys[iy], g.zs[iz], e, e, e};
        coarse(static_cast<int>(ix), static_cast<int>(iy),
               static_cast<int>(iz)) =
            base - scorer(occlude(v, patch, cfg.fill));
      }
  return coarse;
}

Volume occlusion_impacts(const ConvScorer& s, const Volume& v,
                         const OcclusionConfig& cfg) {
  const int e = cfg.occlusion_edge;
  const SweepGrid g = sweep_grid(v.dims(), e, effective_stride(cfg));
  ActivationCache cache;
  const double base = forward_cached(s, v, cache);
  Volume coarse(g.coarse_dims());
  for (std::size_t iz = 0; iz < g.zs.size(); ++iz)
    for (std::size_t iy = 0; iy < g.ys.size(); ++iy)
      for (std::size_t ix = 0; ix < g.xs.size(); ++ix) {
        const PatchSpec patch{g.xs[ix], g.ys[iy], g.zs[iz], e, e, e};
        coarse(static_cast<int>(ix), static_cast<int>(iy),
               static_cast<int>(iz)) =
            base - forward_occluded(s, v, cache, patch, cfg.fill);
      }
  return coarse;
}

Volume subject_occlusion_map(const VolumeScorer& scorer, const Volume& v,
                             const OcclusionConfig& cfg) {
  return resample(occlusion_impacts(scorer, v, cfg), v.dims());
}

Volume subject_occlusion_map(const ConvScorer& s, const Volume& v,
                             const OcclusionConfig& cfg) {
  return resample(occlusion_impacts(s, v, cfg), v.dims());
}

Volume group_occlusion_map(const std::vector<Volume>& maps, bool absolute) {
  if (maps.empty()) {
    throw std::invalid_argument("group_occlusion_map: no maps given");
  }
  const auto prep = [absolute](const Volume& m) {
    if (!absolute) return m;
    Volume a = m;
    for (double& x : a.data()) x = std::fabs(x);
    return a;
  };
  Volume out = prep(maps[0]);
  for (std::size_t i = 1; i < maps.size(); ++i) {
    out = accumulate(out, prep(maps[i]));
  }
  return out;
}

RoiSet rank_rois(const Volume& group_map, const OcclusionConfig& cfg) {
  if (cfg.top_k < 1) throw std::invalid_argument("rank_rois: top_k must be >= 1");
  const int e = cfg.roi_edge;
  const SweepGrid g = sweep_grid(group_map.dims(), e, effective_stride(cfg));
  std::vector<RankedRoi> all;
  all.reserve(g.xs.size() * g.ys.size() * g.zs.size());
  for (const int z : g.zs)
    for (const int y : g.ys)
      for (const int x : g.xs) {
        RankedRoi r;
        r.patch = PatchSpec{x, y, z, e, e, e};
        r.total_weight = patch_total_weight(group_map, r.patch);
        all.push_back(r);
      }
  if (static_cast<std::size_t>(cfg.top_k) > all.size()) {
    throw std::invalid_argument(
        "rank_rois: top_k " + std::to_string(cfg.top_k) + " exceeds the " +
        std::to_string(all.size()) + " candidate positions");
  }
  std::sort(all.begin(), all.end(), [](const RankedRoi& a, const RankedRoi& b) {
    if (a.total_weight != b.total_weight) return a.total_weight > b.total_weight;
    return std::tie(a.patch.x0, a.patch.y0, a.patch.z0) <
           std::tie(b.patch.x0, b.patch.y0, b.patch.z0);
  });
  all.resize(cfg.top_k);
  for (std::size_t i = 0; i < all.size(); ++i) {
    all[i].rank = static_cast<int>(i) + 1;
    all[i].name = "ROI" + std::to_string(i + 1);
  }
  return RoiSet{std::move(all)};
}

std::vector<Volume> extract_roi_cohort(const std::vector<Volume>& cohort,
                                       const PatchSpec& roi) {
  std::vector<Volume> out;
  out.reserve(cohort.size());
  for (const Volume& v : cohort) out.push_back(extract_patch(v, roi));
  return out;
}

std::string roi_set_to_json(const RoiSet& set) {
  nlohmann::json arr = nlohmann::json::array();
  for (const RankedRoi& r : set.rois) {
    arr.push_back({{"origin", {r.patch.x0, r.patch.y0, r.patch.z0}},
                   {"size", {r.patch.sx, r.patch.sy, r.patch.sz}},
                   {"weight", r.total_weight},
                   {"rank", r.rank},
                   {"name", r.name}});
  }
  const nlohmann::json j{
      {"format", "roi-set"}, {"version", 1}, {"rois", std::move(arr)}};
  return j.dump(2);
}

RoiSet roi_set_from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  if (j.value("format", "") != "roi-set" || j.value("version", 0) != 1) {
    throw std::invalid_argument("not a version-1 roi-set document");
  }
  RoiSet set;
  for (const auto& jr : j.at("rois")) {
    RankedRoi r;
    const auto& o = jr.at("origin");
    const auto& s = jr.at("size");
    r.patch = PatchSpec{o.at(0).get<int>(), o.at(1).get<int>(),
                        o.at(2).get<int>(), s.at(0).get<int>(),
                        s.at(1).get<int>(), s.at(2).get<int>()};
    r.total_weight = jr.at("weight").get<double>();
    r.rank = jr.at("rank").get<int>();
    r.name = jr.at("name").get<std::string>();
    set.rois.push_back(std::move(r));
  }
  return set;
}

}  // namespace voxebm
