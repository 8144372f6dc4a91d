#pragma once

// Alternating optimization of the two cycles and hash-code extraction.
//
// Each iteration runs four updates in a fixed order on the same minibatch:
//   1. outer discriminators ascend the feature-space adversarial objective
//   2. text encoder + outer generators descend rec_f + sim_f (+ generator adversarial term)
//   3. inner discriminators ascend the representation-space adversarial objective
//   4. inner generators descend rec_z + sim_z (+ generator adversarial term)

#include <array>
#include <cstdint>
#include <functional>
#include <vector>

#include "uch/data.hpp"
#include "uch/losses.hpp"
#include "uch/networks.hpp"
#include "uch/random.hpp"
#include "uch/retrieval.hpp"

namespace uch {

enum class OptimizerKind { sgd, sgd_momentum };

struct TrainConfig {
  std::size_t code_bits = 16;
  std::size_t batch_size = 128;
  std::size_t max_iterations = 1000;
  double lr_image = 1e-4;
  double lr_text = 1e-2;
  double weight_decay = 0.1;
  std::uint64_t seed = 0;
  bool gen_adv = true;
  OptimizerKind optimizer = OptimizerKind::sgd_momentum;
  double momentum = 0.9;
  std::size_t text_embed_dim = 300;
  LossWeights weights;

  void validate() const;
};

enum class Phase { outer_discriminators, outer_generators, inner_discriminators, inner_generators };
inline constexpr std::array<Phase, 4> kPhaseOrder = {Phase::outer_discriminators, Phase::outer_generators,
                                                     Phase::inner_discriminators, Phase::inner_generators};

const char* phase_name(Phase phase);
bool is_ascent(Phase phase);
NetSet phase_nets(Phase phase);
// Image-side rate for networks producing or judging image-side outputs, text-side rate otherwise.
double learning_rate_for(NetId id, const TrainConfig& config);

struct Batch {
  Matrix images;
  Matrix texts;
};

struct TrainState {
  NetworkBundle bundle;
  // Momentum buffers per network, per layer: {weight, bias}.
  std::array<std::vector<std::pair<Matrix, Matrix>>, kNetCount> velocity;
  std::size_t iteration = 0;
  Rng rng;
  std::vector<std::size_t> order;  // current epoch permutation
  std::size_t cursor = 0;
  std::vector<LossBreakdown> log;

  static TrainState initialize(NetworkBundle bundle, const TrainConfig& config);
};

// The objective a phase optimizes, evaluated on `batch` without updating anything:
// discriminator phases return the value they maximize, generator phases the value they minimize.
double phase_objective(const NetworkBundle& bundle, Phase phase, const Batch& batch, const TrainConfig& config);

// One update of the phase's networks; returns the objective before the update.
double run_phase(TrainState& state, Phase phase, const Batch& batch, const TrainConfig& config);

// Decoupled decay then (momentum) SGD step: p ← p·(1 − lr·λ) − lr·v, with v ← μ·v + g.
// `ascend` flips the gradient sign.
void apply_update(Matrix& param, const Matrix& grad, Matrix& velocity, double lr, bool ascend, const TrainConfig& config);

using PhaseObserver = std::function<void(Phase)>;

// Runs the four phases in order and increments the iteration counter. The returned losses are
// those seen by the two generator updates.
LossBreakdown train_step(TrainState& state, const Batch& batch, const TrainConfig& config,
                         const PhaseObserver& observer = {});

using StepCallback = std::function<void(std::size_t iteration, const LossBreakdown&)>;

struct FitResult {
  NetworkBundle bundle;
  std::vector<LossBreakdown> log;
};

BundleDims dims_for(const PairedDataset& dataset, const TrainConfig& config);

// Trains on every item of `dataset` for config.max_iterations minibatches, reshuffling each epoch.
// On divergence the DivergenceError propagates; rows already passed to `on_step` form the partial log.
FitResult fit(const PairedDataset& dataset, const TrainConfig& config, const StepCallback& on_step = {});

enum class CodeSource { paired, image_only, text_only };

// Continuous hash-layer outputs: H^I, H^T, or H^I + H^T.
Matrix hash_layer_outputs(const NetworkBundle& bundle, CodeSource source, const Matrix& images, const Matrix& texts);

// sign() of the hash-layer outputs with sign(0) = +1, bit-packed.
CodeMatrix extract_codes(const NetworkBundle& bundle, CodeSource source, const Matrix& images, const Matrix& texts);

}  // namespace uch
