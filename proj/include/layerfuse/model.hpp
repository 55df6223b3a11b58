#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "layerfuse/matrix.hpp"
#include "layerfuse/task.hpp"

namespace layerfuse {

struct ModelConfig {
  std::size_t vocab_size = 16;
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t max_seq_len = 64;
  std::uint64_t seed = 0;

  void validate() const;
  [[nodiscard]] std::size_t head_dim() const { return d_model / n_heads; }
};

// One pre-norm residual block: RMS-normed causal multi-head attention with
// rotary position encoding, then an RMS-normed SiLU feed-forward. No biases.
struct LayerParams {
  DenseMatrix wq, wk, wv, wo;     // d_model x d_model
  DenseMatrix w_up;               // d_model x d_ff
  DenseMatrix w_down;             // d_ff x d_model
  std::vector<double> norm1, norm2;  // d_model

  [[nodiscard]] bool same_shape(const LayerParams& other) const;
};

struct ModelCheckpoint {
  ModelConfig config;
  DenseMatrix embedding;           // vocab x d_model
  std::vector<LayerParams> layers;
  std::vector<double> final_norm;  // d_model
  DenseMatrix head;                // d_model x vocab

  void validate() const;
};

struct ActivationMatrix {
  std::size_t layer_index = 0;  // 0 = post-embedding
  DenseMatrix data;             // n_inputs x d_model
};

enum class PoolMode { LastToken, Mean };

struct CaptureResult {
  DenseMatrix logits;                         // N x vocab, last position
  std::vector<ActivationMatrix> activations;  // length n_layers + 1
};

struct EvalMetrics {
  double cross_entropy = 0.0;
  double next_token_accuracy = 0.0;
};

struct TrainResult {
  ModelCheckpoint model;
  std::vector<double> step_losses;
  double final_loss = 0.0;  // mean over the last min(100, steps) step losses
};

// ---------------------------------------------------------------------------
// Checkpoint I/O (container format; see container.hpp)
// ---------------------------------------------------------------------------

void save_checkpoint(const ModelCheckpoint& ckpt, const std::string& path);
ModelCheckpoint load_checkpoint(const std::string& path);

// Rounds every tensor entry to its nearest f32 value so that checkpoints
// round-trip bit-exactly through the 32-bit container. Applied by every
// operation that produces a checkpoint.
void snap_to_f32(ModelCheckpoint& ckpt);

// ---------------------------------------------------------------------------
// Model operations
// ---------------------------------------------------------------------------

// Deterministic random init; residual output projections are scaled by
// 0.02/sqrt(n_layers) so the blocks start near-identity.
ModelCheckpoint init_model(const ModelConfig& config);

// Runs the batch and records one activation row per sequence for layers
// 0..L (0 = post-embedding). Rows are last-token hidden states, or per-
// position means under PoolMode::Mean.
CaptureResult forward_with_capture(const ModelCheckpoint& ckpt,
                                   const std::vector<std::vector<int>>& batch,
                                   PoolMode pool = PoolMode::LastToken);

// Last-position logits only.
DenseMatrix forward_logits(const ModelCheckpoint& ckpt,
                           const std::vector<std::vector<int>>& batch);

EvalMetrics evaluate(const ModelCheckpoint& ckpt, const ToyTask& task,
                     std::size_t n_batches, std::size_t batch_size = 16);

TrainResult train_toy(const ModelConfig& config, const ToyTask& task, std::size_t steps,
                      double learning_rate, std::size_t batch_size = 16);

// Inserts a residual block at `position` whose tensors are an i.i.d. normal
// draw scaled by epsilon; epsilon 0 plants an exact no-op block. The draw is
// deterministic given (config.seed, position, salt).
ModelCheckpoint plant_redundancy(const ModelCheckpoint& ckpt, std::size_t position,
                                 double epsilon, std::uint64_t salt = 0);

// ---------------------------------------------------------------------------
// Gradient access (used by the trainer, tests, and loss-impact estimation)
// ---------------------------------------------------------------------------

struct ModelGrads {
  DenseMatrix embedding;
  std::vector<LayerParams> layers;
  std::vector<double> final_norm;
  DenseMatrix head;
};

ModelGrads zero_grads(const ModelCheckpoint& ckpt);

// Mean cross-entropy over every next-token position of the batch; fills
// `grads` when non-null. Batch entries must hold seq_len+1 tokens (the final
// token is the last position's target).
double loss_and_gradients(const ModelCheckpoint& ckpt,
                          const std::vector<std::vector<int>>& samples,
                          ModelGrads* grads);

std::size_t parameter_count(const ModelCheckpoint& ckpt);
std::vector<double> flatten_parameters(const ModelCheckpoint& ckpt);
void unflatten_parameters(std::span<const double> theta, ModelCheckpoint& ckpt);
std::vector<double> flatten_gradients(const ModelGrads& grads);

std::size_t layer_parameter_count(const LayerParams& layer);
std::vector<double> flatten_layer(const LayerParams& layer);

}  // namespace layerfuse
