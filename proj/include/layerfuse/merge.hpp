#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "layerfuse/infotheory.hpp"
#include "layerfuse/manifold.hpp"
#include "layerfuse/model.hpp"
#include "layerfuse/similarity.hpp"

namespace layerfuse {

// Activation-capture source for the merge loop.
struct CaptureSpec {
  ToyTask task;
  std::size_t n_inputs = 128;
  PoolMode pool = PoolMode::LastToken;
};

struct CaptureData {
  std::vector<ActivationMatrix> activations;  // layers 0..L
  std::vector<int> labels;                    // continuation token per sequence
};

// Samples n_inputs sequences from the task's capture stream and records one
// activation row per sequence for every layer.
CaptureData capture_activations(const ModelCheckpoint& ckpt, const CaptureSpec& spec);

struct MergeConfig {
  enum class StopKind { Threshold, TargetLayers };
  StopKind stop = StopKind::TargetLayers;
  double tau = 0.9;               // threshold mode: merge while best score >= tau
  std::size_t target_layers = 1;  // target mode
  IBConfig ib;                    // merge-weight selection
  bool iterative = true;          // merged layers may merge again
  bool recompute_embeddings = true;
  std::uint64_t seed = 0;

  void validate(std::size_t n_layers) const;
};

struct MergeStep {
  std::size_t iteration = 0;
  std::size_t pair_low = 0;   // original layer ids, 1-based
  std::size_t pair_high = 0;
  std::optional<double> similarity;  // empty for fixed-lambda merging
  double alpha = 0.0;
  std::size_t retained_after = 0;
};

struct MergeLog {
  nlohmann::json config_snapshot;
  std::vector<MergeStep> steps;
  bool no_merge = false;  // threshold unreachable at the first step
  std::string notice;
};

struct MergeResult {
  ModelCheckpoint model;
  MergeLog log;
};

// Elementwise alpha*lower + (1-alpha)*upper over every block tensor,
// snapped to the f32 grid.
LayerParams fuse_layers(const LayerParams& lower, const LayerParams& upper, double alpha);

// Iterative similarity-guided layer merging: capture activations, embed each
// live layer, score depth-adjacent pairs, fuse the best pair at the selected
// alpha, and repeat until the stop criterion holds.
MergeResult mka_compress(const ModelCheckpoint& ckpt, const CaptureSpec& capture,
                         const ManifoldConfig& manifold, Measure measure,
                         const MergeConfig& config);

// Keeps the first target_layers blocks; embedding, final norm and head are
// untouched.
ModelCheckpoint reverse_prune(const ModelCheckpoint& ckpt, std::size_t target_layers);

// Back-to-front adjacent merging with a fixed weight on the lower layer.
MergeResult fixed_lambda_merge(const ModelCheckpoint& ckpt, double lambda_m,
                               std::size_t target_layers);

struct CompressionReport {
  std::size_t l_total = 0;
  std::size_t l_retained = 0;
  double q = 1.0;
  double ratio = 0.0;  // (l_total - l_retained/q) / l_total
};

CompressionReport compression_ratio(std::size_t l_total, std::size_t l_retained, double q);

// Two-decimal percentage, ties rounded away from zero ("43.75").
std::string format_percent(double ratio);

struct QuantizeResult {
  ModelCheckpoint model;  // dequantized weights (simulated quantization)
  double q_storage = 1.0; // 32/bits relative to the f32 container
};

// Per-tensor symmetric round-to-nearest quantization to the given bit width
// (4 or 8); all-zero tensors pass through unchanged.
QuantizeResult quantize_rtn(const ModelCheckpoint& ckpt, int bits);

// ---------------------------------------------------------------------------
// Merge log serialization and replay
// ---------------------------------------------------------------------------

// One config-snapshot line followed by one line per step.
std::string merge_log_to_jsonl(const MergeLog& log);
MergeLog merge_log_from_jsonl(const std::string& text);

// Applies the logged steps to the original checkpoint; reproduces the
// compressed checkpoint bit-exactly.
ModelCheckpoint replay_merge_log(const ModelCheckpoint& original, const MergeLog& log);

// Original 0-based layer index represented by each surviving slot.
std::vector<std::size_t> alignment_from_log(std::size_t original_layers, const MergeLog& log);

// ---------------------------------------------------------------------------
// Second-order loss impact
// ---------------------------------------------------------------------------

struct LossImpactReport {
  double delta_theta_norm = 0.0;
  double lambda_max = 0.0;
  double bound = 0.0;  // 0.5 * lambda_max * delta_theta_norm^2
  double observed_delta_loss = 0.0;
  bool bound_satisfied = false;  // informational; assumes local convexity
};

using LossFn = std::function<double(std::span<const double>)>;
using GradFn = std::function<std::vector<double>(std::span<const double>)>;

// Dominant Hessian eigenvalue by power iteration on Hessian-vector products
// taken as central finite differences of the gradient.
double estimate_hessian_lambda_max(const GradFn& grad, std::span<const double> theta0,
                                   std::size_t power_iters, double fd_eps, std::uint64_t seed);

// Same-parameter-space variant (used directly for synthetic losses).
LossImpactReport loss_impact_from_functions(const LossFn& loss, const GradFn& grad,
                                            std::span<const double> theta0,
                                            std::span<const double> theta1,
                                            double extra_deleted_sq_norm,
                                            std::size_t power_iters, double fd_eps,
                                            std::uint64_t seed);

struct LossImpactOptions {
  std::size_t eval_batches = 2;
  std::size_t batch_size = 16;
  std::size_t power_iters = 12;
  double fd_eps = 1e-3;
  std::uint64_t seed = 0;
};

// Model-level report: delta-theta compares each surviving slot against the
// original layer it aligns to (alignment[i] = original 0-based index), with
// deleted layers counted in full; lambda_max is estimated on the original
// model over a fixed evaluation batch.
LossImpactReport loss_impact(const ModelCheckpoint& original, const ModelCheckpoint& merged,
                             const std::vector<std::size_t>& alignment, const ToyTask& task,
                             const LossImpactOptions& opts);

}  // namespace layerfuse
