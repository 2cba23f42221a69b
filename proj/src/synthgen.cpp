#include "voxebm/synthgen.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace voxebm {

namespace {

void check_dims(const Dims& d) {
  if (d.nx < 8 || d.ny < 8 || d.nz < 8) {
    throw std::invalid_argument("cohort dims must be at least 8 per axis");
  }
}

void check_effects(const SynthConfig& cfg) {
  for (const RegionEffect& e : cfg.effects) {
    if (e.region < 0 || e.region >= cfg.n_regions) {
      throw std::invalid_argument("effect region id out of range");
    }
    if (!(e.reduction >= 0.0 && e.reduction <= 1.0)) {
      throw std::invalid_argument("effect reduction must lie in [0, 1]");
    }
  }
  for (const PairEffect& p : cfg.pair_effects) {
    if (p.region_a < 0 || p.region_a >= cfg.n_regions || p.region_b < 0 ||
        p.region_b >= cfg.n_regions || p.region_a == p.region_b) {
      throw std::invalid_argument("pair effect needs two distinct region ids");
    }
    if (!(p.reduction >= 0.0 && p.reduction <= 1.0)) {
      throw std::invalid_argument("pair reduction must lie in [0, 1]");
    }
  }
}

// subject id used for both the RV1 filename and the manifest
std::string subject_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "subj%03zu", i);
  return buf;
}

// draws one subject and reports the global scale used (needed for ICV)
Volume draw_subject(const SynthConfig& cfg, const Atlas& atlas, int label,
                    Rng& rng, double& scale_out) {
  if (label != 0 && label != 1) {
    throw std::invalid_argument("label must be 0 or 1");
  }
  if (!(atlas.dims == cfg.dims) || atlas.n_regions != cfg.n_regions) {
    throw std::invalid_argument("atlas does not match the config");
  }
  check_effects(cfg);
  if (!(cfg.noise_sd >= 0.0)) {
    throw std::invalid_argument("noise_sd must be non-negative");
  }

  const double scale = rng.uniform(0.9, 1.1);
  scale_out = scale;

  std::vector<double> mult(static_cast<std::size_t>(cfg.n_regions), 1.0);
  if (label == 1) {
    for (const RegionEffect& e : cfg.effects) {
      mult[static_cast<std::size_t>(e.region)] *= 1.0 - e.reduction;
    }
  }
  for (const PairEffect& p : cfg.pair_effects) {
    double loss_a = 0.0, loss_b = 0.0;
    if (label == 1) {
      loss_a = loss_b = rng.uniform01() * p.reduction;  // shared magnitude
    } else {
      loss_a = rng.uniform01() * p.reduction;  // independent magnitudes
      loss_b = rng.uniform01() * p.reduction;
    }
    mult[static_cast<std::size_t>(p.region_a)] *= 1.0 - loss_a;
    mult[static_cast<std::size_t>(p.region_b)] *= 1.0 - loss_b;
  }

  Volume v(cfg.dims);
  const Dims& d = cfg.dims;
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        const int r = atlas.region[static_cast<std::size_t>(v.index(x, y, z))];
        if (r < 0) continue;  // background stays exactly zero
        double val = 0.8 * scale * mult[static_cast<std::size_t>(r)];
        if (cfg.noise_sd > 0.0) val += cfg.noise_sd * rng.normal();
        v(x, y, z) = std::clamp(val, 0.0, 1.0);
      }
  return v;
}

}  // namespace

Atlas make_atlas(const SynthConfig& cfg) {
  check_dims(cfg.dims);
  if (cfg.n_regions < 2) {
    throw std::invalid_argument("need at least two regions");
  }
  const Dims& d = cfg.dims;
  Atlas atlas;
  atlas.dims = d;
  atlas.n_regions = cfg.n_regions;
  atlas.region.assign(static_cast<std::size_t>(d.total()), -1);

  // ellipsoidal head mask, semi-axes 0.45 of each extent
  const double cx = 0.5 * (d.nx - 1), cy = 0.5 * (d.ny - 1),
               cz = 0.5 * (d.nz - 1);
  const double ax = 0.45 * d.nx, ay = 0.45 * d.ny, az = 0.45 * d.nz;
  std::vector<std::int64_t> interior;
  std::int64_t idx = 0;
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x, ++idx) {
        const double ex = (x - cx) / ax, ey = (y - cy) / ay, ez = (z - cz) / az;
        if (ex * ex + ey * ey + ez * ez <= 1.0) interior.push_back(idx);
      }
  atlas.mask_voxels = static_cast<std::int64_t>(interior.size());
  if (static_cast<std::int64_t>(cfg.n_regions) > atlas.mask_voxels) {
    throw std::invalid_argument("more regions than interior voxels");
  }

  // distinct seeded sites, then nearest-site assignment (ties to the lower
  // region id so the partition is deterministic)
  Rng rng(derive_seed(cfg.seed, "atlas"));
  std::vector<std::int64_t> sites;
  std::set<std::int64_t> taken;
  while (sites.size() < static_cast<std::size_t>(cfg.n_regions)) {
    const std::int64_t pick = interior[static_cast<std::size_t>(
        rng.uniform_int(interior.size()))];
    if (taken.insert(pick).second) sites.push_back(pick);
  }
  const auto coords = [&d](std::int64_t i) {
    const int x = static_cast<int>(i % d.nx);
    const int y = static_cast<int>((i / d.nx) % d.ny);
    const int z = static_cast<int>(i / (static_cast<std::int64_t>(d.nx) * d.ny));
    return std::array<int, 3>{x, y, z};
  };
  atlas.region_voxels.assign(static_cast<std::size_t>(cfg.n_regions), 0);
  for (const std::int64_t vi : interior) {
    const auto [x, y, z] = coords(vi);
    int best = 0;
    std::int64_t best_d2 = -1;
    for (std::size_t s = 0; s < sites.size(); ++s) {
      const auto [sx, sy, sz] = coords(sites[s]);
      const std::int64_t dx = x - sx, dy = y - sy, dz = z - sz;
      const std::int64_t d2 = dx * dx + dy * dy + dz * dz;
      if (best_d2 < 0 || d2 < best_d2) {
        best_d2 = d2;
        best = static_cast<int>(s);
      }
    }
    atlas.region[static_cast<std::size_t>(vi)] = best;
    ++atlas.region_voxels[static_cast<std::size_t>(best)];
  }
  return atlas;
}

std::vector<std::pair<int, int>> adjacent_regions(const Atlas& atlas) {
  const Dims& d = atlas.dims;
  std::set<std::pair<int, int>> pairs;
  const auto at = [&](int x, int y, int z) {
    return atlas.region[static_cast<std::size_t>(
        x + static_cast<std::int64_t>(d.nx) * (y + static_cast<std::int64_t>(d.ny) * z))];
  };
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        const int r = at(x, y, z);
        if (r < 0) continue;
        // forward faces only; each unordered pair is seen once per contact
        const int nbr[3][3] = {{x + 1, y, z}, {x, y + 1, z}, {x, y, z + 1}};
        for (const auto& n : nbr) {
          if (n[0] >= d.nx || n[1] >= d.ny || n[2] >= d.nz) continue;
          const int q = at(n[0], n[1], n[2]);
          if (q < 0 || q == r) continue;
          pairs.insert({std::min(r, q), std::max(r, q)});
        }
      }
  return {pairs.begin(), pairs.end()};
}

Volume sample_subject(const SynthConfig& cfg, const Atlas& atlas, int label,
                      Rng& rng) {
  double scale = 0.0;
  return draw_subject(cfg, atlas, label, rng, scale);
}

Cohort make_cohort(const SynthConfig& cfg, const Atlas& atlas) {
  if (cfg.n_per_class < 1) {
    throw std::invalid_argument("need at least one subject per class");
  }
  if (!(cfg.label_noise >= 0.0 && cfg.label_noise <= 1.0)) {
    throw std::invalid_argument("label_noise must lie in [0, 1]");
  }
  const std::size_t n = static_cast<std::size_t>(cfg.n_per_class);
  Cohort cohort;
  cohort.volumes.reserve(2 * n);
  for (std::size_t i = 0; i < 2 * n; ++i) {
    const int label = i < n ? 0 : 1;
    const std::uint64_t sseed = derive_seed(cfg.seed, "subject", i);
    Rng rng(sseed);
    int planted = label;
    if (cfg.label_noise > 0.0 && rng.bernoulli(cfg.label_noise)) {
      planted = 1 - label;
    }
    double scale = 0.0;
    cohort.volumes.push_back(draw_subject(cfg, atlas, planted, rng, scale));
    cohort.labels.push_back(label);
    cohort.icv.push_back(static_cast<double>(atlas.mask_voxels) * scale);
    cohort.subject_seeds.push_back(sseed);
  }
  return cohort;
}

void write_cohort(const std::string& dir, const Cohort& cohort) {
  const std::size_t n = cohort.volumes.size();
  if (cohort.labels.size() != n || cohort.icv.size() != n ||
      cohort.subject_seeds.size() != n) {
    throw std::invalid_argument("cohort fields disagree on subject count");
  }
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir + "/manifest.csv");
  if (!manifest) {
    throw std::runtime_error("cannot open for writing: " + dir +
                             "/manifest.csv");
  }
  manifest << "id,label,icv,seed\n";
  for (std::size_t i = 0; i < n; ++i) {
    const std::string id = subject_id(i);
    char icv[32];
    std::snprintf(icv, sizeof icv, "%.17g", cohort.icv[i]);
    manifest << id << ',' << cohort.labels[i] << ',' << icv << ','
             << cohort.subject_seeds[i] << '\n';
    write_rv1(dir + "/" + id + ".rv1", cohort.volumes[i]);
  }
  if (!manifest.flush()) {
    throw std::runtime_error("failed writing manifest for " + dir);
  }
}

Cohort read_cohort(const std::string& dir) {
  std::ifstream manifest(dir + "/manifest.csv");
  if (!manifest) {
    throw std::runtime_error("cannot open for reading: " + dir +
                             "/manifest.csv");
  }
  std::string line;
  if (!std::getline(manifest, line) || line != "id,label,icv,seed") {
    throw std::runtime_error("bad manifest header in " + dir);
  }
  Cohort cohort;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string id, label, icv, seed;
    if (!std::getline(ss, id, ',') || !std::getline(ss, label, ',') ||
        !std::getline(ss, icv, ',') || !std::getline(ss, seed)) {
      throw std::runtime_error("bad manifest row in " + dir + ": " + line);
    }
    cohort.volumes.push_back(read_rv1(dir + "/" + id + ".rv1"));
    cohort.labels.push_back(std::stoi(label));
    cohort.icv.push_back(std::stod(icv));
    cohort.subject_seeds.push_back(std::stoull(seed));
  }
  return cohort;
}

}  // namespace voxebm
