#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "voxebm/rng.hpp"
#include "voxebm/volume.hpp"

using voxebm::Dims;
using voxebm::PatchSpec;
using voxebm::Volume;

namespace {

// value = linear index, the layout probe used throughout.
Volume make_ramp(const Dims& d) {
  std::vector<double> data(static_cast<std::size_t>(d.total()));
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<double>(i);
  return Volume::from_data(d, std::move(data));
}

Volume make_random(const Dims& d, voxebm::Rng& rng, double lo = 0.0,
                   double hi = 1.0) {
  std::vector<double> data(static_cast<std::size_t>(d.total()));
  for (double& x : data) x = rng.uniform(lo, hi);
  return Volume::from_data(d, std::move(data));
}

double max_abs_diff(const Volume& a, const Volume& b) {
  REQUIRE(a.dims() == b.dims());
  double m = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace

TEST_SUITE("volume") {

TEST_CASE("extract_patch: full-volume patch is an identical copy") {
  Volume v = make_ramp({4, 4, 4});
  Volume p = extract_patch(v, {0, 0, 0, 4, 4, 4});
  CHECK(p.dims() == v.dims());
  CHECK(p.data() == v.data());
}

TEST_CASE("extract_patch: interior patch matches a nested-loop reader") {
  Volume v = make_ramp({4, 4, 4});
  PatchSpec p{1, 1, 1, 2, 2, 2};
  Volume out = extract_patch(v, p);
  REQUIRE(out.dims() == Dims{2, 2, 2});
  for (int k = 0; k < 2; ++k)
    for (int j = 0; j < 2; ++j)
      for (int i = 0; i < 2; ++i) {
        // independent index arithmetic, not Volume::index
        double expect = static_cast<double>((p.x0 + i) + 4 * ((p.y0 + j) + 4 * (p.z0 + k)));
        CHECK(out(i, j, k) == expect);
      }
}

TEST_CASE("extract_patch: out-of-bounds patch names the violating axis") {
  Volume v = make_ramp({4, 4, 4});
  CHECK_THROWS_AS(extract_patch(v, {3, 3, 3, 2, 2, 2}), std::out_of_range);
  try {
    extract_patch(v, {0, 3, 0, 2, 2, 2});
  } catch (const std::out_of_range& e) {
    CHECK(std::string(e.what()).find("axis y") != std::string::npos);
  }
}

TEST_CASE("occlude: zero fill on a zero field is a no-op") {
  Volume v({5, 5, 5}, 0.0);
  Volume out = occlude(v, {1, 1, 1, 3, 3, 3}, 0.0);
  CHECK(out.data() == v.data());
}

TEST_CASE("occlude: fill 0 over 2x2x2 of an all-ones 6^3 removes 8 from the sum") {
  Volume v({6, 6, 6}, 1.0);
  Volume out = occlude(v, {2, 2, 2, 2, 2, 2}, 0.0);
  double sum = 0.0;
  for (double x : out.data()) sum += x;
  CHECK(sum == 208.0);
  // voxels outside the patch are bit-identical
  CHECK(out(0, 0, 0) == 1.0);
  CHECK(out(5, 5, 5) == 1.0);
  CHECK(out(2, 2, 2) == 0.0);
  CHECK(out(3, 3, 3) == 0.0);
}

TEST_CASE("occlude: repeated occlusion with the same patch and fill is idempotent") {
  voxebm::Rng rng(11);
  Volume v = make_random({6, 5, 7}, rng);
  PatchSpec p{1, 0, 2, 3, 4, 3};
  Volume once = occlude(v, p, 0.25);
  Volume twice = occlude(once, p, 0.25);
  CHECK(once.data() == twice.data());
}

TEST_CASE("occlude then extract yields a constant patch (property)") {
  voxebm::Rng rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    Dims d{static_cast<int>(3 + rng.uniform_int(6)),
           static_cast<int>(3 + rng.uniform_int(6)),
           static_cast<int>(3 + rng.uniform_int(6))};
    Volume v = make_random(d, rng);
    PatchSpec p;
    p.sx = static_cast<int>(1 + rng.uniform_int(static_cast<std::uint64_t>(d.nx)));
    p.sy = static_cast<int>(1 + rng.uniform_int(static_cast<std::uint64_t>(d.ny)));
    p.sz = static_cast<int>(1 + rng.uniform_int(static_cast<std::uint64_t>(d.nz)));
    p.x0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(d.nx - p.sx + 1)));
    p.y0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(d.ny - p.sy + 1)));
    p.z0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(d.nz - p.sz + 1)));
    double fill = rng.uniform(-2.0, 2.0);
    Volume patch = extract_patch(occlude(v, p, fill), p);
    for (double x : patch.data()) CHECK(x == fill);
  }
}

TEST_CASE("resample: identity target reproduces the volume") {
  voxebm::Rng rng(7);
  Volume v = make_random({6, 7, 5}, rng);
  Volume out = resample(v, v.dims());
  CHECK(max_abs_diff(out, v) <= 1e-12);
}

TEST_CASE("resample: constants are reproduced at any target dims") {
  Volume v({4, 5, 6}, 3.5);
  for (Dims target : {Dims{4, 5, 6}, Dims{8, 10, 12}, Dims{2, 3, 2},
                      Dims{9, 1, 13}, Dims{1, 1, 1}}) {
    Volume out = resample(v, target);
    REQUIRE(out.dims() == target);
    for (double x : out.data()) CHECK(x == doctest::Approx(3.5).epsilon(1e-13));
  }
}

TEST_CASE("resample: 2x upsample of a linear x-ramp is exact on the interior") {
  // value = x coordinate; cubic interpolation reproduces linear functions
  // wherever the four-tap stencil stays in range.
  Dims d{8, 4, 4};
  std::vector<double> data(static_cast<std::size_t>(d.total()));
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x)
        data[static_cast<std::size_t>(x + d.nx * (y + d.ny * z))] = static_cast<double>(x);
  Volume v = Volume::from_data(d, std::move(data));

  Dims target{16, 4, 4};
  Volume out = resample(v, target);
  const double scale = static_cast<double>(d.nx) / target.nx;
  for (int x = 0; x < target.nx; ++x) {
    double c = (x + 0.5) * scale - 0.5;
    if (c < 0.0 || c > d.nx - 1) continue;       // coordinate clamp region
    int i1 = static_cast<int>(std::floor(c));
    if (i1 - 1 < 0 || i1 + 2 > d.nx - 1) continue;  // stencil clamp region
    for (int z = 0; z < 4; ++z)
      for (int y = 0; y < 4; ++y)
        CHECK(out(x, y, z) == doctest::Approx(c).epsilon(1e-9));
  }
}

TEST_CASE("resample: linear fields along each axis are exact where the stencil is interior") {
  voxebm::Rng rng(101);
  for (int axis = 0; axis < 3; ++axis) {
    Dims d{7, 9, 8};
    std::vector<double> data(static_cast<std::size_t>(d.total()));
    const double a = rng.uniform(-1.0, 1.0), b = rng.uniform(0.5, 2.0);
    for (int z = 0; z < d.nz; ++z)
      for (int y = 0; y < d.ny; ++y)
        for (int x = 0; x < d.nx; ++x) {
          int coord = axis == 0 ? x : axis == 1 ? y : z;
          data[static_cast<std::size_t>(x + d.nx * (y + d.ny * z))] = a + b * coord;
        }
    Volume v = Volume::from_data(d, std::move(data));

    Dims target{13, 5, 11};
    Volume out = resample(v, target);
    const int src_n = axis == 0 ? d.nx : axis == 1 ? d.ny : d.nz;
    const int dst_n = axis == 0 ? target.nx : axis == 1 ? target.ny : target.nz;
    const double scale = static_cast<double>(src_n) / dst_n;
    // Cross-axis passes see a constant line, which cubic weights reproduce
    // exactly, so only the varying axis needs the interior-stencil guard.
    for (int k = 0; k < target.nz; ++k)
      for (int j = 0; j < target.ny; ++j)
        for (int i = 0; i < target.nx; ++i) {
          int o = axis == 0 ? i : axis == 1 ? j : k;
          double c = (o + 0.5) * scale - 0.5;
          if (c < 1.0 || c > src_n - 3) continue;
          CHECK(out(i, j, k) == doctest::Approx(a + b * c).epsilon(1e-9));
        }
  }
}

TEST_CASE("accumulate: additive identity and doubling") {
  voxebm::Rng rng(3);
  Volume v = make_random({4, 4, 4}, rng);
  Volume zeros(v.dims(), 0.0);
  CHECK(accumulate(zeros, v).data() == v.data());
  Volume doubled = accumulate(v, v);
  for (std::int64_t i = 0; i < v.size(); ++i)
    CHECK(doubled.data()[i] == 2.0 * v.data()[i]);
}

TEST_CASE("accumulate: chained sum of five volumes equals a loop oracle exactly") {
  voxebm::Rng rng(5);
  Dims d{5, 6, 4};
  std::vector<Volume> vols;
  for (int i = 0; i < 5; ++i) vols.push_back(make_random(d, rng));
  Volume acc(d, 0.0);
  for (const Volume& v : vols) acc = accumulate(acc, v);
  for (std::int64_t i = 0; i < acc.size(); ++i) {
    double ref = 0.0;
    for (const Volume& v : vols) ref += v.data()[i];
    CHECK(acc.data()[i] == ref);
  }
}

TEST_CASE("accumulate: commutative and associative to 1e-12 on bounded inputs") {
  voxebm::Rng rng(9);
  Dims d{4, 5, 3};
  Volume a = make_random(d, rng), b = make_random(d, rng), c = make_random(d, rng);
  CHECK(max_abs_diff(accumulate(a, b), accumulate(b, a)) <= 1e-12);
  CHECK(max_abs_diff(accumulate(accumulate(a, b), c),
                     accumulate(a, accumulate(b, c))) <= 1e-12);
}

TEST_CASE("accumulate: dimension mismatch is an error") {
  Volume a({2, 2, 2}, 0.0), b({2, 2, 3}, 0.0);
  CHECK_THROWS_AS(accumulate(a, b), std::invalid_argument);
}

TEST_CASE("patch_total_weight: ones map over a 30^3 patch counts voxels") {
  Volume map({30, 30, 30}, 1.0);
  CHECK(patch_total_weight(map, {0, 0, 0, 30, 30, 30}) == 27000.0);
}

TEST_CASE("patch_total_weight: delta map inside the patch") {
  Volume map({8, 8, 8}, 0.0);
  map(3, 4, 5) = 5.0;
  CHECK(patch_total_weight(map, {2, 3, 4, 4, 4, 4}) == 5.0);
  CHECK(patch_total_weight(map, {0, 0, 0, 3, 3, 3}) == 0.0);
}

TEST_CASE("patch_total_weight: random map matches a loop oracle") {
  voxebm::Rng rng(13);
  Volume map = make_random({9, 7, 8}, rng, -1.0, 1.0);
  PatchSpec p{2, 1, 3, 5, 4, 4};
  double ref = 0.0;
  for (int k = p.z0; k < p.z0 + p.sz; ++k)
    for (int j = p.y0; j < p.y0 + p.sy; ++j)
      for (int i = p.x0; i < p.x0 + p.sx; ++i) ref += map(i, j, k);
  double got = patch_total_weight(map, p);
  CHECK(std::abs(got - ref) <= 1e-9 * std::max(1.0, std::abs(ref)));
}

TEST_CASE("operations do not mutate their inputs") {
  voxebm::Rng rng(21);
  Volume v = make_random({6, 6, 6}, rng);
  std::vector<double> before = v.data();
  PatchSpec p{1, 2, 0, 3, 2, 4};
  (void)extract_patch(v, p);
  (void)occlude(v, p, 0.5);
  (void)resample(v, {4, 9, 6});
  (void)accumulate(v, v);
  (void)patch_total_weight(v, p);
  CHECK(v.data() == before);
}

TEST_CASE("from_data validates length and finiteness") {
  CHECK_THROWS_AS(Volume::from_data({2, 2, 2}, std::vector<double>(7, 0.0)),
                  std::invalid_argument);
  std::vector<double> bad(8, 0.0);
  bad[3] = std::nan("");
  CHECK_THROWS_AS(Volume::from_data({2, 2, 2}, std::move(bad)),
                  std::invalid_argument);
}

TEST_CASE("rv1: write/read round-trip is bit-exact") {
  voxebm::Rng rng(17);
  Volume v = make_random({5, 4, 6}, rng, -3.0, 3.0);
  auto path = std::filesystem::temp_directory_path() / "voxebm_rv1_roundtrip.rv1";
  write_rv1(path.string(), v);
  Volume back = voxebm::read_rv1(path.string());
  CHECK(back.dims() == v.dims());
  CHECK(back.data() == v.data());
  // 16-byte header + 8 bytes per voxel
  CHECK(std::filesystem::file_size(path) ==
        16u + 8u * static_cast<std::uintmax_t>(v.size()));
  std::filesystem::remove(path);
}

TEST_CASE("rv1: corrupt magic and truncated payloads are rejected") {
  auto dir = std::filesystem::temp_directory_path();
  auto bad_magic = dir / "voxebm_rv1_badmagic.rv1";
  {
    std::FILE* f = std::fopen(bad_magic.string().c_str(), "wb");
    REQUIRE(f != nullptr);
    std::fwrite("NOPE", 1, 4, f);
    std::fclose(f);
  }
  CHECK_THROWS_AS(voxebm::read_rv1(bad_magic.string()), std::runtime_error);
  std::filesystem::remove(bad_magic);

  Volume v({3, 3, 3}, 1.0);
  auto truncated = dir / "voxebm_rv1_trunc.rv1";
  write_rv1(truncated.string(), v);
  std::filesystem::resize_file(truncated, 16 + 8 * 10);  // drop voxels
  CHECK_THROWS_AS(voxebm::read_rv1(truncated.string()), std::runtime_error);
  std::filesystem::remove(truncated);
}

}  // TEST_SUITE
