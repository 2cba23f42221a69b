#pragma once

#include <functional>
#include <string>
#include <vector>

#include "voxebm/scorer.hpp"
#include "voxebm/volume.hpp"

namespace voxebm {

// Sweep and ranking settings. Edges are cubic; defaults suit the small
// synthetic volumes this project works at, and scale with the data when
// overridden. stride = 0 means "half the occlusion edge".
struct OcclusionConfig {
  int occlusion_edge = 4;  // edge of the patch slid across the volume
  int stride = 0;          // sweep step along each axis
  double fill = 0.0;       // value written into the occluded patch
  // ROI edge stays at the smallest extent the conv scorer accepts, since
  // the ranked patches feed straight into local scorer training.
  int roi_edge = 8;
  int top_k = 10;  // number of ROIs rank_rois keeps
};

int effective_stride(const OcclusionConfig& cfg);

// Patch origins along one axis: 0, stride, 2*stride, ... plus a final
// origin clamped so the last patch touches the far edge (no duplicate when
// the stride lands there exactly).
std::vector<int> sweep_positions(int extent, int edge, int stride);

// Any callable mapping a volume to a score; the map generation below is
// agnostic to where the score comes from.
using VolumeScorer = std::function<double(const Volume&)>;

// Impact of occluding each sweep position: score(v) - score(occluded v),
// laid out as a coarse grid with one voxel per (x, y, z) sweep origin.
// The baseline score is evaluated once. Positive impact means the region
// supports a higher score.
Volume occlusion_impacts(const VolumeScorer& scorer, const Volume& v,
                         const OcclusionConfig& cfg);

// Same sweep evaluated through the scorer's cached forward pass, which
// recomputes only the activations each patch can reach. Bit-identical to
// the generic overload called with forward(s, .).
Volume occlusion_impacts(const ConvScorer& s, const Volume& v,
                         const OcclusionConfig& cfg);

// Coarse impact grid resampled to v.dims(). The resample treats the sweep
// origins as evenly spaced even though the clamped final origin may sit
// closer to its neighbour; keeping that fiction makes the output stable
// for golden-file comparison.
Volume subject_occlusion_map(const VolumeScorer& scorer, const Volume& v,
                             const OcclusionConfig& cfg);
Volume subject_occlusion_map(const ConvScorer& s, const Volume& v,
                             const OcclusionConfig& cfg);

// Elementwise sum of per-subject maps. With absolute = true each map
// contributes |value| instead, so subjects whose impacts point in opposite
// directions reinforce rather than cancel.
Volume group_occlusion_map(const std::vector<Volume>& maps,
                           bool absolute = false);

struct RankedRoi {
  PatchSpec patch;
  double total_weight = 0.0;
  int rank = 0;  // 1-based
  std::string name;  // "ROI1", "ROI2", ... by rank
};

struct RoiSet {
  std::vector<RankedRoi> rois;
};

// Scores every roi_edge^3 patch on the sweep grid by its total weight in
// the group map and keeps the top_k. Sorted by descending weight; exact
// ties break toward the lexicographically smaller origin. Overlapping
// ROIs are allowed.
RoiSet rank_rois(const Volume& group_map, const OcclusionConfig& cfg);

// Per-subject extraction of one ROI, preserving cohort order.
std::vector<Volume> extract_roi_cohort(const std::vector<Volume>& cohort,
                                       const PatchSpec& roi);

std::string roi_set_to_json(const RoiSet& set);
RoiSet roi_set_from_json(const std::string& text);

}  // namespace voxebm
