#include "voxebm/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "wire.hpp"

namespace voxebm {

namespace {

void check_dims(const Dims& d) {
  if (d.nx <= 0 || d.ny <= 0 || d.nz <= 0) {
    throw std::invalid_argument("volume dims must be positive, got " +
                                std::to_string(d.nx) + "x" +
                                std::to_string(d.ny) + "x" +
                                std::to_string(d.nz));
  }
}

}  // namespace

Volume::Volume(const Dims& d, double fill) {
  check_dims(d);
  if (!std::isfinite(fill)) throw std::invalid_argument("non-finite fill value");
  dims_ = d;
  data_.assign(static_cast<std::size_t>(d.total()), fill);
}

Volume Volume::from_data(const Dims& d, std::vector<double> data) {
  check_dims(d);
  if (static_cast<std::int64_t>(data.size()) != d.total()) {
    throw std::invalid_argument(
        "data length " + std::to_string(data.size()) +
        " does not match dims product " + std::to_string(d.total()));
  }
  for (double x : data) {
    if (!std::isfinite(x)) throw std::invalid_argument("non-finite voxel value");
  }
  Volume v;
  v.dims_ = d;
  v.data_ = std::move(data);
  return v;
}

void check_patch(const Dims& dims, const PatchSpec& p) {
  struct Axis {
    char name;
    int origin, size, dim;
  };
  const Axis axes[3] = {{'x', p.x0, p.sx, dims.nx},
                        {'y', p.y0, p.sy, dims.ny},
                        {'z', p.z0, p.sz, dims.nz}};
  for (const Axis& a : axes) {
    if (a.size <= 0) {
      throw std::invalid_argument(std::string("patch size must be positive on axis ") +
                                  a.name);
    }
    if (a.origin < 0 || a.origin + a.size > a.dim) {
      throw std::out_of_range(std::string("patch out of bounds on axis ") + a.name +
                              ": origin " + std::to_string(a.origin) + " size " +
                              std::to_string(a.size) + " dim " +
                              std::to_string(a.dim));
    }
  }
}

Volume extract_patch(const Volume& v, const PatchSpec& p) {
  check_patch(v.dims(), p);
  Volume out(Dims{p.sx, p.sy, p.sz});
  for (int k = 0; k < p.sz; ++k)
    for (int j = 0; j < p.sy; ++j)
      for (int i = 0; i < p.sx; ++i)
        out(i, j, k) = v(p.x0 + i, p.y0 + j, p.z0 + k);
  return out;
}

Volume occlude(const Volume& v, const PatchSpec& p, double fill) {
  check_patch(v.dims(), p);
  if (!std::isfinite(fill)) throw std::invalid_argument("non-finite fill value");
  Volume out = v;
  for (int k = 0; k < p.sz; ++k)
    for (int j = 0; j < p.sy; ++j)
      for (int i = 0; i < p.sx; ++i)
        out(p.x0 + i, p.y0 + j, p.z0 + k) = fill;
  return out;
}

// Catmull-Rom resample, one separable pass per axis. Output coordinate i
// maps to source coordinate (i + 0.5) * src/dst - 0.5, clamped to the valid
// range; the four stencil taps are clamped to the edges as well. At t = 0 the
// weights are (0, 1, 0, 0), so a pass over an unchanged axis copies exactly.
Volume resample(const Volume& v, const Dims& target) {
  check_dims(target);
  // Pass along x, then y, then z. Intermediate volumes mix the axes' sizes.
  const Dims d = v.dims();

  // x pass: (nx,ny,nz) -> (tx,ny,nz)
  Volume vx(Dims{target.nx, d.ny, d.nz});
  {
    // lines are (y,z) pairs; x stride 1; pitch between lines is nx (src) /
    // tx (dst) — strides differ between src and dst, so do it per line.
    const double scale = static_cast<double>(d.nx) / target.nx;
    for (int i = 0; i < target.nx; ++i) {
      double c = std::clamp((i + 0.5) * scale - 0.5, 0.0,
                            static_cast<double>(d.nx - 1));
      const int i1 = static_cast<int>(std::floor(c));
      const double t = c - i1;
      const int i0 = std::max(i1 - 1, 0);
      const int i2 = std::min(i1 + 1, d.nx - 1);
      const int i3 = std::min(i1 + 2, d.nx - 1);
      const double w0 = 0.5 * (-t + 2.0 * t * t - t * t * t);
      const double w1 = 0.5 * (2.0 - 5.0 * t * t + 3.0 * t * t * t);
      const double w2 = 0.5 * (t + 4.0 * t * t - 3.0 * t * t * t);
      const double w3 = 0.5 * (-t * t + t * t * t);
      for (int z = 0; z < d.nz; ++z)
        for (int y = 0; y < d.ny; ++y)
          vx(i, y, z) = w0 * v(i0, y, z) + w1 * v(i1, y, z) +
                        w2 * v(i2, y, z) + w3 * v(i3, y, z);
    }
  }

  // y pass: (tx,ny,nz) -> (tx,ty,nz)
  Volume vy(Dims{target.nx, target.ny, d.nz});
  {
    const double scale = static_cast<double>(d.ny) / target.ny;
    for (int j = 0; j < target.ny; ++j) {
      double c = std::clamp((j + 0.5) * scale - 0.5, 0.0,
                            static_cast<double>(d.ny - 1));
      const int j1 = static_cast<int>(std::floor(c));
      const double t = c - j1;
      const int j0 = std::max(j1 - 1, 0);
      const int j2 = std::min(j1 + 1, d.ny - 1);
      const int j3 = std::min(j1 + 2, d.ny - 1);
      const double w0 = 0.5 * (-t + 2.0 * t * t - t * t * t);
      const double w1 = 0.5 * (2.0 - 5.0 * t * t + 3.0 * t * t * t);
      const double w2 = 0.5 * (t + 4.0 * t * t - 3.0 * t * t * t);
      const double w3 = 0.5 * (-t * t + t * t * t);
      for (int z = 0; z < d.nz; ++z)
        for (int x = 0; x < target.nx; ++x)
          vy(x, j, z) = w0 * vx(x, j0, z) + w1 * vx(x, j1, z) +
                        w2 * vx(x, j2, z) + w3 * vx(x, j3, z);
    }
  }

  // z pass: (tx,ty,nz) -> (tx,ty,tz)
  Volume vz(Dims{target.nx, target.ny, target.nz});
  {
    const double scale = static_cast<double>(d.nz) / target.nz;
    for (int k = 0; k < target.nz; ++k) {
      double c = std::clamp((k + 0.5) * scale - 0.5, 0.0,
                            static_cast<double>(d.nz - 1));
      const int k1 = static_cast<int>(std::floor(c));
      const double t = c - k1;
      const int k0 = std::max(k1 - 1, 0);
      const int k2 = std::min(k1 + 1, d.nz - 1);
      const int k3 = std::min(k1 + 2, d.nz - 1);
      const double w0 = 0.5 * (-t + 2.0 * t * t - t * t * t);
      const double w1 = 0.5 * (2.0 - 5.0 * t * t + 3.0 * t * t * t);
      const double w2 = 0.5 * (t + 4.0 * t * t - 3.0 * t * t * t);
      const double w3 = 0.5 * (-t * t + t * t * t);
      for (int y = 0; y < target.ny; ++y)
        for (int x = 0; x < target.nx; ++x)
          vz(x, y, k) = w0 * vy(x, y, k0) + w1 * vy(x, y, k1) +
                        w2 * vy(x, y, k2) + w3 * vy(x, y, k3);
    }
  }
  return vz;
}

Volume accumulate(const Volume& acc, const Volume& v) {
  if (!(acc.dims() == v.dims())) {
    throw std::invalid_argument("accumulate: dimension mismatch");
  }
  Volume out = acc;
  const std::vector<double>& src = v.data();
  std::vector<double>& dst = out.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  return out;
}

double patch_total_weight(const Volume& map, const PatchSpec& p) {
  check_patch(map.dims(), p);
  double sum = 0.0;
  for (int k = 0; k < p.sz; ++k)
    for (int j = 0; j < p.sy; ++j)
      for (int i = 0; i < p.sx; ++i)
        sum += map(p.x0 + i, p.y0 + j, p.z0 + k);
  return sum;
}

void write_rv1(const std::string& path, const Volume& v) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os.write("RVOL", 4);
  wire::put_u32le(os, static_cast<std::uint32_t>(v.dims().nx));
  wire::put_u32le(os, static_cast<std::uint32_t>(v.dims().ny));
  wire::put_u32le(os, static_cast<std::uint32_t>(v.dims().nz));
  for (double x : v.data()) wire::put_f64le(os, x);
  if (!os) throw std::runtime_error("write failed: " + path);
}

Volume read_rv1(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open for reading: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "RVOL", 4) != 0) {
    throw std::runtime_error("bad RV1 magic in " + path);
  }
  Dims d;
  d.nx = static_cast<int>(wire::get_u32le(is));
  d.ny = static_cast<int>(wire::get_u32le(is));
  d.nz = static_cast<int>(wire::get_u32le(is));
  if (!is) throw std::runtime_error("truncated RV1 header in " + path);
  check_dims(d);
  const std::int64_t n = d.total();
  std::vector<unsigned char> raw(static_cast<std::size_t>(n) * 8);
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!is) throw std::runtime_error("truncated RV1 payload in " + path);
  std::vector<double> data(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) data[i] = wire::get_f64le(&raw[i * 8]);
  return Volume::from_data(d, std::move(data));
}

}  // namespace voxebm
