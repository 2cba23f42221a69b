#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace voxebm {

struct Dims {
  int nx = 0, ny = 0, nz = 0;
  std::int64_t total() const {
    return static_cast<std::int64_t>(nx) * ny * nz;
  }
  bool operator==(const Dims&) const = default;
};

struct PatchSpec {
  int x0 = 0, y0 = 0, z0 = 0;
  int sx = 0, sy = 0, sz = 0;
};

// Dense 3D scalar grid, row-major with x fastest. Values are validated to be
// finite at every construction-from-data boundary; the module's operations
// preserve finiteness structurally.
class Volume {
 public:
  Volume() = default;
  explicit Volume(const Dims& d, double fill = 0.0);
  static Volume from_data(const Dims& d, std::vector<double> data);

  const Dims& dims() const { return dims_; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }

  std::int64_t index(int x, int y, int z) const {
    return x + static_cast<std::int64_t>(dims_.nx) *
                   (y + static_cast<std::int64_t>(dims_.ny) * z);
  }
  double operator()(int x, int y, int z) const { return data_[index(x, y, z)]; }
  double& operator()(int x, int y, int z) { return data_[index(x, y, z)]; }

  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

 private:
  Dims dims_{};
  std::vector<double> data_;
};

// Throws std::out_of_range naming the violating axis.
void check_patch(const Dims& dims, const PatchSpec& p);

Volume extract_patch(const Volume& v, const PatchSpec& p);
Volume occlude(const Volume& v, const PatchSpec& p, double fill);

// Separable Catmull-Rom resampling with half-voxel grid alignment; sample
// coordinates and stencil indices clamp to the valid range.
Volume resample(const Volume& v, const Dims& target);

Volume accumulate(const Volume& acc, const Volume& v);
double patch_total_weight(const Volume& map, const PatchSpec& p);

// RV1 container: 16-byte header (magic "RVOL" + three little-endian uint32
// dims) followed by little-endian float64 voxels, x fastest.
void write_rv1(const std::string& path, const Volume& v);
Volume read_rv1(const std::string& path);

}  // namespace voxebm
