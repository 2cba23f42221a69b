#include "voxebm/scorer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "json.hpp"
#include "voxebm/ebm.hpp"
#include "voxebm/rng.hpp"
#include "wire.hpp"

namespace voxebm {

namespace {

std::size_t vidx(const Dims& d, int x, int y, int z) {
  return static_cast<std::size_t>(x) +
         static_cast<std::size_t>(d.nx) *
             (static_cast<std::size_t>(y) +
              static_cast<std::size_t>(d.ny) * static_cast<std::size_t>(z));
}

Dims pooled(const Dims& d) {  // ceil-mode 2x2x2
  return {(d.nx + 1) / 2, (d.ny + 1) / 2, (d.nz + 1) / 2};
}

void check_scorer(const ConvScorer& s) {
  const auto c1 = static_cast<std::size_t>(s.c1);
  const auto c2 = static_cast<std::size_t>(s.c2);
  if (s.c1 < 1 || s.c2 < 1 || s.w1.size() != c1 * 27 || s.b1.size() != c1 ||
      s.w2.size() != c2 * c1 * 27 || s.b2.size() != c2 || s.wd.size() != c2) {
    throw std::invalid_argument("scorer weight arrays do not match c1/c2");
  }
}

void check_input_dims(const Dims& d) {
  const auto need = [](int n, const char* axis) {
    if (n < 8) {
      throw std::invalid_argument(
          std::string("volume too small for two pooling stages on axis ") +
          axis + ": " + std::to_string(n) + " < 8");
    }
  };
  need(d.nx, "x");
  need(d.ny, "y");
  need(d.nz, "z");
}

// One same-padded 3x3x3 conv output; taps outside the volume contribute
// nothing (zero padding), expressed as clamped tap ranges so the inner
// loop is branch-free. Accumulation order is fixed (dz, dy, dx ascending)
// because the occluded re-score must reproduce these sums bit-exactly.
template <class In>
double conv1_at(const double* w, double bias, const In& in, const Dims& d,
                int x, int y, int z) {
  const int dzlo = z > 0 ? -1 : 0, dzhi = z + 1 < d.nz ? 1 : 0;
  const int dylo = y > 0 ? -1 : 0, dyhi = y + 1 < d.ny ? 1 : 0;
  const int dxlo = x > 0 ? -1 : 0, dxhi = x + 1 < d.nx ? 1 : 0;
  double acc = bias;
  for (int dz = dzlo; dz <= dzhi; ++dz) {
    for (int dy = dylo; dy <= dyhi; ++dy) {
      for (int dx = dxlo; dx <= dxhi; ++dx) {
        acc += w[(dz + 1) * 9 + (dy + 1) * 3 + (dx + 1)] *
               in(x + dx, y + dy, z + dz);
      }
    }
  }
  return acc;
}

double conv2_at(const ConvScorer& s, const std::vector<double>& pool1,
                const Dims& d1, int co, int x, int y, int z) {
  const int dzlo = z > 0 ? -1 : 0, dzhi = z + 1 < d1.nz ? 1 : 0;
  const int dylo = y > 0 ? -1 : 0, dyhi = y + 1 < d1.ny ? 1 : 0;
  const int dxlo = x > 0 ? -1 : 0, dxhi = x + 1 < d1.nx ? 1 : 0;
  const std::size_t n1 = static_cast<std::size_t>(d1.total());
  double acc = s.b2[static_cast<std::size_t>(co)];
  for (int ci = 0; ci < s.c1; ++ci) {
    const double* w = s.w2.data() + (static_cast<std::size_t>(co) *
                                         static_cast<std::size_t>(s.c1) +
                                     static_cast<std::size_t>(ci)) *
                                        27;
    const double* p = pool1.data() + static_cast<std::size_t>(ci) * n1;
    for (int dz = dzlo; dz <= dzhi; ++dz) {
      for (int dy = dylo; dy <= dyhi; ++dy) {
        for (int dx = dxlo; dx <= dxhi; ++dx) {
          acc += w[(dz + 1) * 9 + (dy + 1) * 3 + (dx + 1)] *
                 p[vidx(d1, x + dx, y + dy, z + dz)];
        }
      }
    }
  }
  return acc;
}

// Max over the (clamped) 2x2x2 window of one channel.
double pool_at(const double* chan, const Dims& din, int px, int py, int pz) {
  const int x1 = std::min(2 * px + 2, din.nx);
  const int y1 = std::min(2 * py + 2, din.ny);
  const int z1 = std::min(2 * pz + 2, din.nz);
  double m = -std::numeric_limits<double>::infinity();
  for (int z = 2 * pz; z < z1; ++z) {
    for (int y = 2 * py; y < y1; ++y) {
      for (int x = 2 * px; x < x1; ++x) {
        m = std::max(m, chan[vidx(din, x, y, z)]);
      }
    }
  }
  return m;
}

// Flat index of the window max; first maximum wins on ties, matching the
// scan order of pool_at.
std::size_t pool_argmax(const double* chan, const Dims& din, int px, int py,
                        int pz) {
  const int x1 = std::min(2 * px + 2, din.nx);
  const int y1 = std::min(2 * py + 2, din.ny);
  const int z1 = std::min(2 * pz + 2, din.nz);
  double best = -std::numeric_limits<double>::infinity();
  std::size_t arg = 0;
  for (int z = 2 * pz; z < z1; ++z) {
    for (int y = 2 * py; y < y1; ++y) {
      for (int x = 2 * px; x < x1; ++x) {
        const std::size_t i = vidx(din, x, y, z);
        if (chan[i] > best) {
          best = chan[i];
          arg = i;
        }
      }
    }
  }
  return arg;
}

double clamped(double p) { return std::clamp(p, 1e-12, 1.0 - 1e-12); }

}  // namespace

ConvScorer make_scorer(int c1, int c2, std::uint64_t seed) {
  if (c1 < 1 || c2 < 1) {
    throw std::invalid_argument("channel counts must be positive");
  }
  ConvScorer s;
  s.c1 = c1;
  s.c2 = c2;
  Rng rng(derive_seed(seed, "scorer-init"));
  const double l1 = std::sqrt(6.0 / (27.0 + 27.0 * c1));
  s.w1.resize(static_cast<std::size_t>(c1) * 27);
  for (double& w : s.w1) w = rng.uniform(-l1, l1);
  s.b1.assign(static_cast<std::size_t>(c1), 0.0);
  const double l2 = std::sqrt(6.0 / (27.0 * c1 + 27.0 * c2));
  s.w2.resize(static_cast<std::size_t>(c2) * static_cast<std::size_t>(c1) * 27);
  for (double& w : s.w2) w = rng.uniform(-l2, l2);
  s.b2.assign(static_cast<std::size_t>(c2), 0.0);
  s.wd.assign(static_cast<std::size_t>(c2), 0.0);
  s.bd = 0.0;
  return s;
}

double forward_cached(const ConvScorer& s, const Volume& v,
                      ActivationCache& cache) {
  check_scorer(s);
  check_input_dims(v.dims());

  const Dims d0 = v.dims();
  const Dims d1 = pooled(d0);
  const Dims d2 = pooled(d1);
  const std::size_t n0 = static_cast<std::size_t>(d0.total());
  const std::size_t n1 = static_cast<std::size_t>(d1.total());
  const std::size_t n2 = static_cast<std::size_t>(d2.total());
  cache.d0 = d0;
  cache.d1 = d1;
  cache.d2 = d2;
  cache.relu1.resize(static_cast<std::size_t>(s.c1) * n0);
  cache.pool1.resize(static_cast<std::size_t>(s.c1) * n1);
  cache.relu2.resize(static_cast<std::size_t>(s.c2) * n1);
  cache.pool2.resize(static_cast<std::size_t>(s.c2) * n2);
  cache.gap.resize(static_cast<std::size_t>(s.c2));

  const double* vd = v.data().data();
  const auto in = [vd, &d0](int x, int y, int z) {
    return vd[vidx(d0, x, y, z)];
  };

  for (int ch = 0; ch < s.c1; ++ch) {
    const double* w = s.w1.data() + static_cast<std::size_t>(ch) * 27;
    const double b = s.b1[static_cast<std::size_t>(ch)];
    double* out = cache.relu1.data() + static_cast<std::size_t>(ch) * n0;
    for (int z = 0; z < d0.nz; ++z) {
      for (int y = 0; y < d0.ny; ++y) {
        for (int x = 0; x < d0.nx; ++x) {
          out[vidx(d0, x, y, z)] =
              std::max(0.0, conv1_at(w, b, in, d0, x, y, z));
        }
      }
    }
    double* po = cache.pool1.data() + static_cast<std::size_t>(ch) * n1;
    const double* chan = cache.relu1.data() + static_cast<std::size_t>(ch) * n0;
    for (int z = 0; z < d1.nz; ++z) {
      for (int y = 0; y < d1.ny; ++y) {
        for (int x = 0; x < d1.nx; ++x) {
          po[vidx(d1, x, y, z)] = pool_at(chan, d0, x, y, z);
        }
      }
    }
  }

  for (int co = 0; co < s.c2; ++co) {
    double* out = cache.relu2.data() + static_cast<std::size_t>(co) * n1;
    for (int z = 0; z < d1.nz; ++z) {
      for (int y = 0; y < d1.ny; ++y) {
        for (int x = 0; x < d1.nx; ++x) {
          out[vidx(d1, x, y, z)] =
              std::max(0.0, conv2_at(s, cache.pool1, d1, co, x, y, z));
        }
      }
    }
    double* po = cache.pool2.data() + static_cast<std::size_t>(co) * n2;
    const double* chan = cache.relu2.data() + static_cast<std::size_t>(co) * n1;
    for (int z = 0; z < d2.nz; ++z) {
      for (int y = 0; y < d2.ny; ++y) {
        for (int x = 0; x < d2.nx; ++x) {
          po[vidx(d2, x, y, z)] = pool_at(chan, d1, x, y, z);
        }
      }
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < n2; ++i) sum += po[i];
    cache.gap[static_cast<std::size_t>(co)] = sum / static_cast<double>(n2);
  }

  double z = s.bd;
  for (int co = 0; co < s.c2; ++co) {
    z += s.wd[static_cast<std::size_t>(co)] *
         cache.gap[static_cast<std::size_t>(co)];
  }
  cache.z = z;
  return logistic_clamped(z);
}

double forward(const ConvScorer& s, const Volume& v) {
  ActivationCache cache;
  return forward_cached(s, v, cache);
}

namespace {

struct Range {
  int lo, hi;  // half-open
};

// Saves a channel-major axis-aligned box so it can be restored after the
// occluded re-score overwrites it.
std::vector<double> save_box(const std::vector<double>& buf, int channels,
                             const Dims& d, Range rx, Range ry, Range rz) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(channels) *
              static_cast<std::size_t>(rx.hi - rx.lo) *
              static_cast<std::size_t>(ry.hi - ry.lo) *
              static_cast<std::size_t>(rz.hi - rz.lo));
  const std::size_t n = static_cast<std::size_t>(d.total());
  for (int ch = 0; ch < channels; ++ch) {
    const double* chan = buf.data() + static_cast<std::size_t>(ch) * n;
    for (int z = rz.lo; z < rz.hi; ++z) {
      for (int y = ry.lo; y < ry.hi; ++y) {
        for (int x = rx.lo; x < rx.hi; ++x) {
          out.push_back(chan[vidx(d, x, y, z)]);
        }
      }
    }
  }
  return out;
}

void restore_box(std::vector<double>& buf, int channels, const Dims& d,
                 Range rx, Range ry, Range rz,
                 const std::vector<double>& saved) {
  std::size_t k = 0;
  const std::size_t n = static_cast<std::size_t>(d.total());
  for (int ch = 0; ch < channels; ++ch) {
    double* chan = buf.data() + static_cast<std::size_t>(ch) * n;
    for (int z = rz.lo; z < rz.hi; ++z) {
      for (int y = ry.lo; y < ry.hi; ++y) {
        for (int x = rx.lo; x < rx.hi; ++x) {
          chan[vidx(d, x, y, z)] = saved[k++];
        }
      }
    }
  }
}

Range conv_reach(Range r, int n) {  // radius-1 dilation, clamped
  return {std::max(0, r.lo - 1), std::min(n, r.hi + 1)};
}

Range pool_reach(Range r, int n) {  // windows touched by inputs in r
  return {r.lo / 2, std::min(n, (r.hi - 1) / 2 + 1)};
}

}  // namespace

double forward_occluded(const ConvScorer& s, const Volume& v,
                        ActivationCache& cache, const PatchSpec& patch,
                        double fill) {
  check_scorer(s);
  check_patch(v.dims(), patch);
  const Dims d0 = v.dims();
  const Dims d1 = pooled(d0);
  const Dims d2 = pooled(d1);
  const std::size_t n0 = static_cast<std::size_t>(d0.total());
  const std::size_t n1 = static_cast<std::size_t>(d1.total());
  const std::size_t n2 = static_cast<std::size_t>(d2.total());
  if (!(cache.d0 == d0) ||
      cache.relu1.size() != static_cast<std::size_t>(s.c1) * n0 ||
      cache.relu2.size() != static_cast<std::size_t>(s.c2) * n1) {
    throw std::invalid_argument("activation cache does not match volume");
  }

  // regions each stage can see change, per axis
  const Range a1x = conv_reach({patch.x0, patch.x0 + patch.sx}, d0.nx);
  const Range a1y = conv_reach({patch.y0, patch.y0 + patch.sy}, d0.ny);
  const Range a1z = conv_reach({patch.z0, patch.z0 + patch.sz}, d0.nz);
  const Range p1x = pool_reach(a1x, d1.nx);
  const Range p1y = pool_reach(a1y, d1.ny);
  const Range p1z = pool_reach(a1z, d1.nz);
  const Range a2x = conv_reach(p1x, d1.nx);
  const Range a2y = conv_reach(p1y, d1.ny);
  const Range a2z = conv_reach(p1z, d1.nz);
  const Range p2x = pool_reach(a2x, d2.nx);
  const Range p2y = pool_reach(a2y, d2.ny);
  const Range p2z = pool_reach(a2z, d2.nz);

  const auto save1 = save_box(cache.relu1, s.c1, d0, a1x, a1y, a1z);
  const auto savep1 = save_box(cache.pool1, s.c1, d1, p1x, p1y, p1z);
  const auto save2 = save_box(cache.relu2, s.c2, d1, a2x, a2y, a2z);
  const auto savep2 = save_box(cache.pool2, s.c2, d2, p2x, p2y, p2z);

  const double* vd = v.data().data();
  const auto in = [&](int x, int y, int z) {
    const bool inside = x >= patch.x0 && x < patch.x0 + patch.sx &&
                        y >= patch.y0 && y < patch.y0 + patch.sy &&
                        z >= patch.z0 && z < patch.z0 + patch.sz;
    return inside ? fill : vd[vidx(d0, x, y, z)];
  };

  for (int ch = 0; ch < s.c1; ++ch) {
    const double* w = s.w1.data() + static_cast<std::size_t>(ch) * 27;
    const double b = s.b1[static_cast<std::size_t>(ch)];
    double* out = cache.relu1.data() + static_cast<std::size_t>(ch) * n0;
    for (int z = a1z.lo; z < a1z.hi; ++z) {
      for (int y = a1y.lo; y < a1y.hi; ++y) {
        for (int x = a1x.lo; x < a1x.hi; ++x) {
          out[vidx(d0, x, y, z)] =
              std::max(0.0, conv1_at(w, b, in, d0, x, y, z));
        }
      }
    }
    double* po = cache.pool1.data() + static_cast<std::size_t>(ch) * n1;
    for (int z = p1z.lo; z < p1z.hi; ++z) {
      for (int y = p1y.lo; y < p1y.hi; ++y) {
        for (int x = p1x.lo; x < p1x.hi; ++x) {
          po[vidx(d1, x, y, z)] = pool_at(out, d0, x, y, z);
        }
      }
    }
  }

  for (int co = 0; co < s.c2; ++co) {
    double* out = cache.relu2.data() + static_cast<std::size_t>(co) * n1;
    for (int z = a2z.lo; z < a2z.hi; ++z) {
      for (int y = a2y.lo; y < a2y.hi; ++y) {
        for (int x = a2x.lo; x < a2x.hi; ++x) {
          out[vidx(d1, x, y, z)] =
              std::max(0.0, conv2_at(s, cache.pool1, d1, co, x, y, z));
        }
      }
    }
    double* po = cache.pool2.data() + static_cast<std::size_t>(co) * n2;
    for (int z = p2z.lo; z < p2z.hi; ++z) {
      for (int y = p2y.lo; y < p2y.hi; ++y) {
        for (int x = p2x.lo; x < p2x.hi; ++x) {
          po[vidx(d2, x, y, z)] = pool_at(out, d1, x, y, z);
        }
      }
    }
  }

  // full re-sum in index order keeps the average bit-identical to forward()
  double z = s.bd;
  for (int co = 0; co < s.c2; ++co) {
    const double* po = cache.pool2.data() + static_cast<std::size_t>(co) * n2;
    double sum = 0.0;
    for (std::size_t i = 0; i < n2; ++i) sum += po[i];
    z += s.wd[static_cast<std::size_t>(co)] * (sum / static_cast<double>(n2));
  }

  restore_box(cache.relu1, s.c1, d0, a1x, a1y, a1z, save1);
  restore_box(cache.pool1, s.c1, d1, p1x, p1y, p1z, savep1);
  restore_box(cache.relu2, s.c2, d1, a2x, a2y, a2z, save2);
  restore_box(cache.pool2, s.c2, d2, p2x, p2y, p2z, savep2);
  return logistic_clamped(z);
}

ClassWeights class_weights(const std::vector<int>& labels) {
  if (labels.empty()) throw std::invalid_argument("no labels");
  long pos = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw std::invalid_argument("labels must be 0 or 1");
    pos += y;
  }
  const long neg = static_cast<long>(labels.size()) - pos;
  if (pos == 0 || neg == 0) {
    throw std::invalid_argument("class weights need both classes present");
  }
  const double n = static_cast<double>(labels.size());
  return {n / (2.0 * static_cast<double>(pos)),
          n / (2.0 * static_cast<double>(neg))};
}

double class_balanced_bce(const std::vector<double>& probs,
                          const std::vector<int>& labels, ClassWeights w) {
  if (probs.size() != labels.size() || probs.empty()) {
    throw std::invalid_argument("probability/label length mismatch");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (!std::isfinite(probs[i])) {
      throw std::invalid_argument("non-finite probability");
    }
    const double p = clamped(probs[i]);
    sum -= labels[i] == 1 ? w.w1 * std::log(p) : w.w0 * std::log(1.0 - p);
  }
  return sum / static_cast<double>(probs.size());
}

namespace {

struct Grads {
  std::vector<double> w1, b1, w2, b2, wd;
  double bd = 0.0;

  explicit Grads(const ConvScorer& s)
      : w1(s.w1.size(), 0.0),
        b1(s.b1.size(), 0.0),
        w2(s.w2.size(), 0.0),
        b2(s.b2.size(), 0.0),
        wd(s.wd.size(), 0.0) {}

  void zero() {
    std::fill(w1.begin(), w1.end(), 0.0);
    std::fill(b1.begin(), b1.end(), 0.0);
    std::fill(w2.begin(), w2.end(), 0.0);
    std::fill(b2.begin(), b2.end(), 0.0);
    std::fill(wd.begin(), wd.end(), 0.0);
    bd = 0.0;
  }

  void scale(double f) {
    for (double& g : w1) g *= f;
    for (double& g : b1) g *= f;
    for (double& g : w2) g *= f;
    for (double& g : b2) g *= f;
    for (double& g : wd) g *= f;
    bd *= f;
  }
};

struct Scratch {
  std::vector<double> d_act1, d_pool1, d_act2;
};

// Forward, then backprop of the class-weighted cross-entropy into `g`
// (accumulating). Returns the sample loss.
double backward_sample(const ConvScorer& s, const Volume& v, int label,
                       ClassWeights cw, ActivationCache& cache, Grads& g,
                       Scratch& scr) {
  const double p = forward_cached(s, v, cache);
  const Dims d0 = cache.d0, d1 = cache.d1, d2 = cache.d2;
  const std::size_t n0 = static_cast<std::size_t>(d0.total());
  const std::size_t n1 = static_cast<std::size_t>(d1.total());
  const std::size_t n2 = static_cast<std::size_t>(d2.total());

  const double pc = clamped(p);
  const double loss =
      label == 1 ? -cw.w1 * std::log(pc) : -cw.w0 * std::log(1.0 - pc);
  const double dz = label == 1 ? cw.w1 * (p - 1.0) : cw.w0 * p;

  g.bd += dz;
  scr.d_act2.assign(static_cast<std::size_t>(s.c2) * n1, 0.0);
  for (int co = 0; co < s.c2; ++co) {
    const auto uco = static_cast<std::size_t>(co);
    g.wd[uco] += dz * cache.gap[uco];
    const double dgap = dz * s.wd[uco] / static_cast<double>(n2);
    const double* chan = cache.relu2.data() + uco * n1;
    for (int z = 0; z < d2.nz; ++z) {
      for (int y = 0; y < d2.ny; ++y) {
        for (int x = 0; x < d2.nx; ++x) {
          scr.d_act2[uco * n1 + pool_argmax(chan, d1, x, y, z)] += dgap;
        }
      }
    }
  }

  // conv2 backward: bias, weights, and gradient into pool1
  scr.d_pool1.assign(static_cast<std::size_t>(s.c1) * n1, 0.0);
  for (int co = 0; co < s.c2; ++co) {
    const auto uco = static_cast<std::size_t>(co);
    for (int z = 0; z < d1.nz; ++z) {
      for (int y = 0; y < d1.ny; ++y) {
        for (int x = 0; x < d1.nx; ++x) {
          const std::size_t i = vidx(d1, x, y, z);
          const double go = scr.d_act2[uco * n1 + i];
          if (go == 0.0 || cache.relu2[uco * n1 + i] <= 0.0) continue;
          g.b2[uco] += go;
          const int dzlo = z > 0 ? -1 : 0, dzhi = z + 1 < d1.nz ? 1 : 0;
          const int dylo = y > 0 ? -1 : 0, dyhi = y + 1 < d1.ny ? 1 : 0;
          const int dxlo = x > 0 ? -1 : 0, dxhi = x + 1 < d1.nx ? 1 : 0;
          for (int ci = 0; ci < s.c1; ++ci) {
            const auto uci = static_cast<std::size_t>(ci);
            const std::size_t wbase = (uco * static_cast<std::size_t>(s.c1) + uci) * 27;
            for (int ddz = dzlo; ddz <= dzhi; ++ddz) {
              for (int ddy = dylo; ddy <= dyhi; ++ddy) {
                for (int ddx = dxlo; ddx <= dxhi; ++ddx) {
                  const std::size_t tap = static_cast<std::size_t>(
                      (ddz + 1) * 9 + (ddy + 1) * 3 + (ddx + 1));
                  const std::size_t j = vidx(d1, x + ddx, y + ddy, z + ddz);
                  g.w2[wbase + tap] += go * cache.pool1[uci * n1 + j];
                  scr.d_pool1[uci * n1 + j] += go * s.w2[wbase + tap];
                }
              }
            }
          }
        }
      }
    }
  }

  // pool1 backward routes into relu1 positions
  scr.d_act1.assign(static_cast<std::size_t>(s.c1) * n0, 0.0);
  for (int ch = 0; ch < s.c1; ++ch) {
    const auto uch = static_cast<std::size_t>(ch);
    const double* chan = cache.relu1.data() + uch * n0;
    for (int z = 0; z < d1.nz; ++z) {
      for (int y = 0; y < d1.ny; ++y) {
        for (int x = 0; x < d1.nx; ++x) {
          const double gp = scr.d_pool1[uch * n1 + vidx(d1, x, y, z)];
          if (gp == 0.0) continue;
          scr.d_act1[uch * n0 + pool_argmax(chan, d0, x, y, z)] += gp;
        }
      }
    }
  }

  // conv1 backward: bias and weights only (input gradient unused)
  const double* vd = v.data().data();
  for (int ch = 0; ch < s.c1; ++ch) {
    const auto uch = static_cast<std::size_t>(ch);
    for (int z = 0; z < d0.nz; ++z) {
      for (int y = 0; y < d0.ny; ++y) {
        for (int x = 0; x < d0.nx; ++x) {
          const std::size_t i = vidx(d0, x, y, z);
          const double go = scr.d_act1[uch * n0 + i];
          if (go == 0.0 || cache.relu1[uch * n0 + i] <= 0.0) continue;
          g.b1[uch] += go;
          const int dzlo = z > 0 ? -1 : 0, dzhi = z + 1 < d0.nz ? 1 : 0;
          const int dylo = y > 0 ? -1 : 0, dyhi = y + 1 < d0.ny ? 1 : 0;
          const int dxlo = x > 0 ? -1 : 0, dxhi = x + 1 < d0.nx ? 1 : 0;
          for (int ddz = dzlo; ddz <= dzhi; ++ddz) {
            for (int ddy = dylo; ddy <= dyhi; ++ddy) {
              for (int ddx = dxlo; ddx <= dxhi; ++ddx) {
                const std::size_t tap = static_cast<std::size_t>(
                    (ddz + 1) * 9 + (ddy + 1) * 3 + (ddx + 1));
                g.w1[uch * 27 + tap] +=
                    go * vd[vidx(d0, x + ddx, y + ddy, z + ddz)];
              }
            }
          }
        }
      }
    }
  }
  return loss;
}

struct AdamState {
  std::vector<double> mw1, vw1, mb1, vb1, mw2, vw2, mb2, vb2, mwd, vwd;
  double mbd = 0.0, vbd = 0.0;

  explicit AdamState(const ConvScorer& s)
      : mw1(s.w1.size(), 0.0), vw1(s.w1.size(), 0.0),
        mb1(s.b1.size(), 0.0), vb1(s.b1.size(), 0.0),
        mw2(s.w2.size(), 0.0), vw2(s.w2.size(), 0.0),
        mb2(s.b2.size(), 0.0), vb2(s.b2.size(), 0.0),
        mwd(s.wd.size(), 0.0), vwd(s.wd.size(), 0.0) {}
};

void adam_array(double* w, const double* g, double* m, double* v,
                std::size_t n, const TrainConfig& cfg, double bc1, double bc2) {
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
    const double mh = m[i] / bc1;
    const double vh = v[i] / bc2;
    w[i] -= cfg.learning_rate * mh / (std::sqrt(vh) + cfg.adam_eps);
  }
}

}  // namespace

TrainResult train_scorer(const ConvScorer& s, const std::vector<Volume>& cohort,
                         const std::vector<int>& labels,
                         const TrainConfig& cfg) {
  check_scorer(s);
  if (cohort.size() != labels.size() || cohort.empty()) {
    throw std::invalid_argument("cohort/label length mismatch");
  }
  for (const Volume& v : cohort) check_input_dims(v.dims());
  if (!(cfg.learning_rate > 0.0)) {
    throw std::invalid_argument("learning_rate must be > 0");
  }
  if (cfg.batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (cfg.epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  const ClassWeights cw = class_weights(labels);

  TrainResult out;
  out.scorer = s;
  if (cfg.epochs == 0) return out;

  Rng rng(derive_seed(cfg.seed, "scorer-train"));
  Grads grads(out.scorer);
  AdamState adam(out.scorer);
  ActivationCache cache;
  Scratch scr;
  std::vector<std::size_t> order(cohort.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  long step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t done = 0;
    while (done < order.size()) {
      const std::size_t bs = std::min(static_cast<std::size_t>(cfg.batch_size),
                                      order.size() - done);
      grads.zero();
      for (std::size_t k = 0; k < bs; ++k) {
        const std::size_t i = order[done + k];
        epoch_loss +=
            backward_sample(out.scorer, cohort[i], labels[i], cw, cache, grads, scr);
      }
      grads.scale(1.0 / static_cast<double>(bs));
      ++step;
      const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
      ConvScorer& m = out.scorer;
      adam_array(m.w1.data(), grads.w1.data(), adam.mw1.data(), adam.vw1.data(),
                 m.w1.size(), cfg, bc1, bc2);
      adam_array(m.b1.data(), grads.b1.data(), adam.mb1.data(), adam.vb1.data(),
                 m.b1.size(), cfg, bc1, bc2);
      adam_array(m.w2.data(), grads.w2.data(), adam.mw2.data(), adam.vw2.data(),
                 m.w2.size(), cfg, bc1, bc2);
      adam_array(m.b2.data(), grads.b2.data(), adam.mb2.data(), adam.vb2.data(),
                 m.b2.size(), cfg, bc1, bc2);
      adam_array(m.wd.data(), grads.wd.data(), adam.mwd.data(), adam.vwd.data(),
                 m.wd.size(), cfg, bc1, bc2);
      adam_array(&m.bd, &grads.bd, &adam.mbd, &adam.vbd, 1, cfg, bc1, bc2);
      done += bs;
    }
    out.loss_trace.push_back(epoch_loss / static_cast<double>(order.size()));
  }
  return out;
}

double gradient_check(const ConvScorer& s, const Volume& v, int label) {
  check_scorer(s);
  const ClassWeights unit;
  Grads analytic(s);
  {
    ActivationCache cache;
    Scratch scr;
    backward_sample(s, v, label, unit, cache, analytic, scr);
  }

  ConvScorer probe = s;
  ActivationCache cache;
  const auto loss_of = [&]() {
    const double p = clamped(forward_cached(probe, v, cache));
    return label == 1 ? -std::log(p) : -std::log(1.0 - p);
  };
  const double h = 1e-5;
  double max_rel = 0.0;
  const auto check_array = [&](double* w, const double* ga, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      const double orig = w[i];
      w[i] = orig + h;
      const double lp = loss_of();
      w[i] = orig - h;
      const double lm = loss_of();
      w[i] = orig;
      const double fd = (lp - lm) / (2.0 * h);
      const double denom = std::max(1e-6, std::abs(ga[i]) + std::abs(fd));
      max_rel = std::max(max_rel, std::abs(ga[i] - fd) / denom);
    }
  };
  check_array(probe.w1.data(), analytic.w1.data(), probe.w1.size());
  check_array(probe.b1.data(), analytic.b1.data(), probe.b1.size());
  check_array(probe.w2.data(), analytic.w2.data(), probe.w2.size());
  check_array(probe.b2.data(), analytic.b2.data(), probe.b2.size());
  check_array(probe.wd.data(), analytic.wd.data(), probe.wd.size());
  check_array(&probe.bd, &analytic.bd, 1);
  return max_rel;
}

void write_scorer(const std::string& path, const ConvScorer& s) {
  check_scorer(s);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os.write("NSW1", 4);
  wire::put_u32le(os, static_cast<std::uint32_t>(s.c1));
  wire::put_u32le(os, static_cast<std::uint32_t>(s.c2));
  const auto dump = [&os](const std::vector<double>& a) {
    for (double x : a) wire::put_f64le(os, x);
  };
  dump(s.w1);
  dump(s.b1);
  dump(s.w2);
  dump(s.b2);
  dump(s.wd);
  wire::put_f64le(os, s.bd);
  if (!os) throw std::runtime_error("write failed: " + path);
}

ConvScorer read_scorer(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open for reading: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "NSW1", 4) != 0) {
    throw std::runtime_error("bad scorer magic in " + path);
  }
  ConvScorer s;
  s.c1 = static_cast<int>(wire::get_u32le(is));
  s.c2 = static_cast<int>(wire::get_u32le(is));
  if (!is || s.c1 < 1 || s.c2 < 1 || s.c1 > 4096 || s.c2 > 4096) {
    throw std::runtime_error("bad channel counts in " + path);
  }
  const auto load = [&is, &path](std::vector<double>& a, std::size_t n) {
    a.resize(n);
    for (double& x : a) x = wire::read_f64le(is);
    if (!is) throw std::runtime_error("truncated scorer file: " + path);
  };
  const auto c1 = static_cast<std::size_t>(s.c1);
  const auto c2 = static_cast<std::size_t>(s.c2);
  load(s.w1, c1 * 27);
  load(s.b1, c1);
  load(s.w2, c2 * c1 * 27);
  load(s.b2, c2);
  load(s.wd, c2);
  s.bd = wire::read_f64le(is);
  if (!is) throw std::runtime_error("truncated scorer file: " + path);
  for (const auto* a : {&s.w1, &s.b1, &s.w2, &s.b2, &s.wd}) {
    for (double x : *a) {
      if (!std::isfinite(x)) {
        throw std::runtime_error("non-finite weight in " + path);
      }
    }
  }
  if (!std::isfinite(s.bd)) {
    throw std::runtime_error("non-finite weight in " + path);
  }
  return s;
}

std::string scorer_descriptor(const ConvScorer& s) {
  nlohmann::json j;
  j["format"] = "conv-scorer";
  j["version"] = 1;
  j["c1"] = s.c1;
  j["c2"] = s.c2;
  j["kernel"] = 3;
  j["pool"] = 2;
  j["link"] = "sigmoid";
  j["params"] = s.param_count();
  return j.dump();
}

}  // namespace voxebm
