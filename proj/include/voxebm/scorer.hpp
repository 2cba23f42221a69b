#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "voxebm/volume.hpp"

namespace voxebm {

// Fixed two-block 3D convolutional probability scorer:
//   conv 3x3x3 (same, zero pad) -> ReLU -> maxpool 2x2x2 (ceil mode)
//   -> conv 3x3x3 -> ReLU -> maxpool 2x2x2 -> global average pool
//   -> dense -> sigmoid (score clamped to +-36).
// Weights are doubles so finite-difference gradient checks stay tight.
// Conv tap index is (dz+1)*9 + (dy+1)*3 + (dx+1) for offsets in [-1,1].
struct ConvScorer {
  int c1 = 8;
  int c2 = 16;
  std::vector<double> w1;  // c1 x 27
  std::vector<double> b1;  // c1
  std::vector<double> w2;  // c2 x c1 x 27
  std::vector<double> b2;  // c2
  std::vector<double> wd;  // c2
  double bd = 0.0;

  std::size_t param_count() const {
    return w1.size() + b1.size() + w2.size() + b2.size() + wd.size() + 1;
  }
};

// Conv weights get Xavier-uniform draws from the seed; the dense layer
// starts at zero, so a fresh scorer outputs exactly 0.5 for any input and
// the first optimizer steps move it in the class-separating direction.
ConvScorer make_scorer(int c1, int c2, std::uint64_t seed);

// Probability in (0,1). Every input dim must be >= 8 (two pooling stages).
double forward(const ConvScorer& s, const Volume& v);

// Layer activations of one forward pass, kept around so the same volume
// can be re-scored with one patch occluded without a full recompute.
struct ActivationCache {
  Dims d0, d1, d2;  // input, after pool1, after pool2
  std::vector<double> relu1;  // c1 * d0 voxels
  std::vector<double> pool1;  // c1 * d1
  std::vector<double> relu2;  // c2 * d1
  std::vector<double> pool2;  // c2 * d2
  std::vector<double> gap;    // c2
  double z = 0.0;             // pre-sigmoid score
};

double forward_cached(const ConvScorer& s, const Volume& v,
                      ActivationCache& cache);

// Probability for v with `patch` filled by `fill`. Recomputes only the
// activation regions the patch can reach and re-sums the average pool in
// full index order, so the result is bit-identical to calling forward()
// on occlude(v, patch, fill). The cache is restored before returning.
double forward_occluded(const ConvScorer& s, const Volume& v,
                        ActivationCache& cache, const PatchSpec& patch,
                        double fill);

// w1 = N / (2 * N_pos), w0 = N / (2 * N_neg); balanced labels give 1/1.
struct ClassWeights {
  double w1 = 1.0;
  double w0 = 1.0;
};
ClassWeights class_weights(const std::vector<int>& labels);

// Mean over samples of -[w1 * y * log p + w0 * (1-y) * log(1-p)], with
// probabilities clamped to [1e-12, 1 - 1e-12] before the logs.
double class_balanced_bce(const std::vector<double>& probs,
                          const std::vector<int>& labels, ClassWeights w);

struct TrainConfig {
  double learning_rate = 5e-4;
  int batch_size = 16;
  int epochs = 30;
  std::uint64_t seed = 0;
  double beta1 = 0.9;  // Adam moment decays
  double beta2 = 0.999;
  double adam_eps = 1e-8;
};

struct TrainResult {
  ConvScorer scorer;
  // mean per-batch training loss of each epoch; empty when epochs == 0
  std::vector<double> loss_trace;
};

// Mini-batch Adam on the class-balanced cross-entropy, class weights
// computed from `labels`, sample order reshuffled every epoch from the
// seed. Deterministic; zero epochs returns the scorer bit-identical.
TrainResult train_scorer(const ConvScorer& s, const std::vector<Volume>& cohort,
                         const std::vector<int>& labels,
                         const TrainConfig& cfg);

// Max relative error between the analytic gradient of the single-sample
// cross-entropy (unit class weights) and central finite differences with
// h = 1e-5, taken over every weight. Meant for small scorers and volumes.
double gradient_check(const ConvScorer& s, const Volume& v, int label);

// Versioned little-endian binary weights plus a JSON architecture card.
void write_scorer(const std::string& path, const ConvScorer& s);
ConvScorer read_scorer(const std::string& path);
std::string scorer_descriptor(const ConvScorer& s);

}  // namespace voxebm
