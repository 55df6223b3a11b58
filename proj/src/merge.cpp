#include "layerfuse/merge.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "layerfuse/parallel.hpp"
#include "layerfuse/rng.hpp"

namespace layerfuse {

namespace {

constexpr std::uint64_t kCaptureSalt = 0x63617074ULL;
constexpr std::uint64_t kLossImpactSalt = 0x6c6f7373ULL;

double snap_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

void fuse_into(const std::vector<double>& lo, const std::vector<double>& hi, double alpha,
               std::vector<double>& out) {
  out.resize(lo.size());
  for (std::size_t i = 0; i < lo.size(); ++i) {
    out[i] = snap_f32(alpha * lo[i] + (1.0 - alpha) * hi[i]);
  }
}

double sq_norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

double sq_diff_norm(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

std::vector<DiffusionEmbedding> embed_live_layers(const CaptureData& capture,
                                                  const ManifoldConfig& manifold,
                                                  const std::vector<std::size_t>& layer_ids) {
  const std::size_t count = layer_ids.size();
  std::vector<DiffusionEmbedding> embeddings(count);
  parallel_for(count, [&](std::size_t i) {
    // activation index i+1: index 0 is the post-embedding cloud
    embeddings[i] =
        embed_points(capture.activations[i + 1].data, manifold, layer_ids[i]);
  });
  return embeddings;
}

DenseMatrix label_targets(const std::vector<int>& labels, std::size_t vocab, std::size_t k,
                          std::uint64_t seed) {
  // One-hot labels projected to k dims by a seeded random matrix.
  Rng rng(seed ^ 0x596c61626cULL);
  DenseMatrix projection(vocab, k);
  const double scale = 1.0 / std::sqrt(static_cast<double>(vocab));
  for (double& v : projection.data()) v = scale * rng.normal();

  DenseMatrix y(labels.size(), k);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double* row = projection.row_ptr(static_cast<std::size_t>(labels[i]));
    std::copy(row, row + k, y.row_ptr(i));
  }
  return y;
}

nlohmann::json step_to_json(const MergeStep& step) {
  nlohmann::json j;
  j["type"] = "step";
  j["iteration"] = step.iteration;
  j["pair"] = {step.pair_low, step.pair_high};
  if (step.similarity.has_value()) {
    j["similarity"] = *step.similarity;
  } else {
    j["similarity"] = nullptr;
  }
  j["alpha"] = step.alpha;
  j["retained_after"] = step.retained_after;
  return j;
}

}  // namespace

CaptureData capture_activations(const ModelCheckpoint& ckpt, const CaptureSpec& spec) {
  if (spec.n_inputs < 2) {
    throw Error::insufficient_samples("capture needs at least 2 inputs");
  }
  TaskStream stream(spec.task, kCaptureSalt);
  std::vector<std::vector<int>> batch;
  batch.reserve(spec.n_inputs);
  CaptureData data;
  data.labels.reserve(spec.n_inputs);
  for (std::size_t i = 0; i < spec.n_inputs; ++i) {
    std::vector<int> sample = stream.next_sample();
    data.labels.push_back(sample.back());
    sample.pop_back();
    batch.push_back(std::move(sample));
  }
  data.activations = forward_with_capture(ckpt, batch, spec.pool).activations;
  return data;
}

void MergeConfig::validate(std::size_t n_layers) const {
  ib.validate();
  if (stop == StopKind::Threshold) {
    if (!(tau > 0.0 && tau <= 1.0)) throw Error::invalid_input("tau must lie in (0, 1]");
  } else {
    if (target_layers < 1 || target_layers > n_layers) {
      throw Error::invalid_input("target_layers must lie in [1, n_layers]");
    }
  }
}

LayerParams fuse_layers(const LayerParams& lower, const LayerParams& upper, double alpha) {
  if (!lower.same_shape(upper)) {
    throw Error::invalid_input("fuse_layers requires identical layer shapes");
  }
  if (alpha < 0.0 || alpha > 1.0) throw Error::invalid_input("alpha must lie in [0, 1]");

  LayerParams fused;
  fused.wq = lower.wq;
  fused.wk = lower.wk;
  fused.wv = lower.wv;
  fused.wo = lower.wo;
  fused.w_up = lower.w_up;
  fused.w_down = lower.w_down;
  fuse_into(lower.wq.data(), upper.wq.data(), alpha, fused.wq.data());
  fuse_into(lower.wk.data(), upper.wk.data(), alpha, fused.wk.data());
  fuse_into(lower.wv.data(), upper.wv.data(), alpha, fused.wv.data());
  fuse_into(lower.wo.data(), upper.wo.data(), alpha, fused.wo.data());
  fuse_into(lower.w_up.data(), upper.w_up.data(), alpha, fused.w_up.data());
  fuse_into(lower.w_down.data(), upper.w_down.data(), alpha, fused.w_down.data());
  fuse_into(lower.norm1, upper.norm1, alpha, fused.norm1);
  fuse_into(lower.norm2, upper.norm2, alpha, fused.norm2);
  return fused;
}

MergeResult mka_compress(const ModelCheckpoint& ckpt, const CaptureSpec& capture,
                         const ManifoldConfig& manifold, Measure measure,
                         const MergeConfig& config) {
  ckpt.validate();
  manifold.validate();
  config.validate(ckpt.config.n_layers);
  if (capture.task.vocab_size != ckpt.config.vocab_size) {
    throw Error::invalid_input("capture task vocab does not match model vocab");
  }
  const std::size_t min_inputs = std::max<std::size_t>(2 * manifold.embed_dim + 2, 32);
  if (capture.n_inputs < min_inputs) {
    throw Error::invalid_input("mka needs at least " + std::to_string(min_inputs) +
                               " capture inputs for k=" + std::to_string(manifold.embed_dim));
  }

  MergeResult result;
  result.model = ckpt;
  result.log.config_snapshot = {
      {"method", "mka"},
      {"stop", config.stop == MergeConfig::StopKind::Threshold ? "threshold" : "target-layers"},
      {"tau", config.tau},
      {"target_layers", config.target_layers},
      {"alpha_mode", config.ib.alpha_mode == AlphaMode::NmiHeuristic  ? "nmi-heuristic"
                     : config.ib.alpha_mode == AlphaMode::GridSearch ? "grid-search"
                                                                     : "fixed"},
      {"beta", config.ib.beta},
      {"iterative", config.iterative},
      {"recompute_embeddings", config.recompute_embeddings},
      {"seed", config.seed},
      {"measure", measure_to_string(measure)},
      {"capture_n", capture.n_inputs},
      {"task", task_kind_to_string(capture.task.kind)},
      {"embed_dim", manifold.embed_dim},
      {"diffusion_time", manifold.diffusion_time},
  };

  std::vector<std::size_t> reps(ckpt.config.n_layers);
  for (std::size_t i = 0; i < reps.size(); ++i) reps[i] = i + 1;
  std::vector<bool> consumed(reps.size(), false);

  // Stale-mode state: similarity, embeddings, and capture labels from the
  // first iteration, indexed by original layer id.
  std::optional<SimilarityMatrix> stale_matrix;
  std::vector<DiffusionEmbedding> stale_embeddings;
  std::vector<std::size_t> stale_ids;
  std::vector<int> stale_labels;

  std::size_t iteration = 0;
  while (true) {
    const std::size_t live = result.model.config.n_layers;
    if (config.stop == MergeConfig::StopKind::TargetLayers && live <= config.target_layers) {
      break;
    }
    if (live < 2) break;

    SimilarityMatrix matrix;
    std::vector<DiffusionEmbedding> embeddings;
    CaptureData capture_data;
    const bool fresh = config.recompute_embeddings || !stale_matrix.has_value();
    if (fresh) {
      capture_data = capture_activations(result.model, capture);
      embeddings = embed_live_layers(capture_data, manifold, reps);
      matrix = build_similarity_matrix(embeddings, reps, measure);
      if (!config.recompute_embeddings) {
        stale_matrix = matrix;
        stale_embeddings = embeddings;
        stale_ids = reps;
        stale_labels = capture_data.labels;
      }
    } else {
      matrix = *stale_matrix;
    }

    // Candidate depth-adjacent pairs; non-iterative mode requires both
    // members untouched by earlier merges.
    std::ptrdiff_t best_pos = -1;
    double best_score = 0.0;
    for (std::size_t i = 0; i + 1 < reps.size(); ++i) {
      if (!config.iterative && (consumed[i] || consumed[i + 1])) continue;
      const double s = matrix.score(reps[i], reps[i + 1]);
      if (best_pos < 0 || s >= best_score) {  // >= keeps the deepest tie
        best_pos = static_cast<std::ptrdiff_t>(i);
        best_score = s;
      }
    }
    if (best_pos < 0) {
      result.log.notice = "no eligible adjacent pair left (non-iterative mode)";
      break;
    }

    if (config.stop == MergeConfig::StopKind::Threshold && best_score < config.tau) {
      if (iteration == 0) {
        result.log.no_merge = true;
        result.log.notice = "similarity threshold not met at the first step; no merges";
      }
      break;
    }

    const auto pos = static_cast<std::size_t>(best_pos);
    const std::size_t rep_low = reps[pos];
    const std::size_t rep_high = reps[pos + 1];

    AlphaSelection selection;
    if (config.ib.alpha_mode == AlphaMode::GridSearch) {
      const std::vector<DiffusionEmbedding>& source = fresh ? embeddings : stale_embeddings;
      const std::vector<std::size_t>& source_ids = fresh ? reps : stale_ids;
      auto index_of = [&source_ids](std::size_t id) {
        return static_cast<std::size_t>(
            std::find(source_ids.begin(), source_ids.end(), id) - source_ids.begin());
      };
      const DiffusionEmbedding& emb_low = source[index_of(rep_low)];
      const DiffusionEmbedding& emb_high = source[index_of(rep_high)];
      const CovarianceBundle bundle =
          make_covariance_bundle(emb_low.coords, emb_high.coords);

      DenseMatrix y;
      if (config.ib.target_mode == TargetMode::FinalLayerEmbedding) {
        y = source.back().coords;
      } else {
        const std::vector<int>& labels = fresh ? capture_data.labels : stale_labels;
        if (labels.empty()) {
          throw Error::missing_target("task-label targets unavailable");
        }
        y = label_targets(labels, ckpt.config.vocab_size, emb_low.coords.cols(), config.seed);
      }
      TargetCovariances target;
      target.sigma_ly = cross_covariance(emb_low.coords, y);
      target.sigma_my = cross_covariance(emb_high.coords, y);
      target.sigma_y = covariance(y);
      selection = select_alpha(best_score, &bundle, &target, config.ib);
    } else {
      selection = select_alpha(best_score, nullptr, nullptr, config.ib);
    }

    result.model.layers[pos] =
        fuse_layers(result.model.layers[pos], result.model.layers[pos + 1], selection.alpha);
    result.model.layers.erase(result.model.layers.begin() +
                              static_cast<std::ptrdiff_t>(pos + 1));
    result.model.config.n_layers -= 1;
    reps.erase(reps.begin() + static_cast<std::ptrdiff_t>(pos + 1));
    consumed.erase(consumed.begin() + static_cast<std::ptrdiff_t>(pos + 1));
    consumed[pos] = true;

    ++iteration;
    result.log.steps.push_back(MergeStep{iteration, rep_low, rep_high, best_score,
                                         selection.alpha, result.model.config.n_layers});
  }
  return result;
}

ModelCheckpoint reverse_prune(const ModelCheckpoint& ckpt, std::size_t target_layers) {
  ckpt.validate();
  if (target_layers < 1 || target_layers > ckpt.config.n_layers) {
    throw Error::invalid_input("reverse_prune target out of range");
  }
  ModelCheckpoint out = ckpt;
  out.layers.resize(target_layers);
  out.config.n_layers = target_layers;
  return out;
}

MergeResult fixed_lambda_merge(const ModelCheckpoint& ckpt, double lambda_m,
                               std::size_t target_layers) {
  ckpt.validate();
  if (lambda_m < 0.0 || lambda_m > 1.0) {
    throw Error::invalid_input("lambda_m must lie in [0, 1]");
  }
  if (target_layers < 1 || target_layers > ckpt.config.n_layers) {
    throw Error::invalid_input("fixed_lambda_merge target out of range");
  }

  MergeResult result;
  result.model = ckpt;
  result.log.config_snapshot = {
      {"method", "fixed-lambda"},
      {"lambda_m", lambda_m},
      {"target_layers", target_layers},
  };

  std::vector<std::size_t> reps(ckpt.config.n_layers);
  for (std::size_t i = 0; i < reps.size(); ++i) reps[i] = i + 1;

  std::size_t iteration = 0;
  while (result.model.config.n_layers > target_layers) {
    // Deepest adjacent pair, matching the all-ties MKA order.
    const std::size_t pos = result.model.config.n_layers - 2;
    const std::size_t rep_low = reps[pos];
    const std::size_t rep_high = reps[pos + 1];
    result.model.layers[pos] =
        fuse_layers(result.model.layers[pos], result.model.layers[pos + 1], lambda_m);
    result.model.layers.pop_back();
    result.model.config.n_layers -= 1;
    reps.pop_back();

    ++iteration;
    result.log.steps.push_back(MergeStep{iteration, rep_low, rep_high, std::nullopt, lambda_m,
                                         result.model.config.n_layers});
  }
  return result;
}

CompressionReport compression_ratio(std::size_t l_total, std::size_t l_retained, double q) {
  if (l_total < 1) throw Error::invalid_input("l_total must be >= 1");
  if (l_retained > l_total) throw Error::invalid_input("l_retained must be <= l_total");
  if (!(q >= 1.0)) throw Error::invalid_input("quantization factor must be >= 1");

  CompressionReport report;
  report.l_total = l_total;
  report.l_retained = l_retained;
  report.q = q;
  report.ratio = (static_cast<double>(l_total) - static_cast<double>(l_retained) / q) /
                 static_cast<double>(l_total);
  return report;
}

std::string format_percent(double ratio) {
  // Fixed two decimals with ties away from zero, independent of the libc
  // rounding mode.
  const auto scaled = static_cast<long long>(std::floor(ratio * 10000.0 + 0.5));
  char buf[32];
  std::snprintf(buf, sizeof buf, "%lld.%02lld", scaled / 100, scaled % 100);
  return buf;
}

QuantizeResult quantize_rtn(const ModelCheckpoint& ckpt, int bits) {
  ckpt.validate();
  if (bits != 4 && bits != 8) throw Error::invalid_input("quantization bits must be 4 or 8");
  const double levels = static_cast<double>((1 << (bits - 1)) - 1);  // 7 or 127

  auto quantize_vec = [levels](std::vector<double>& v) {
    double amax = 0.0;
    for (double x : v) amax = std::max(amax, std::fabs(x));
    if (amax == 0.0) return;  // all-zero tensor passes through
    const double scale = amax / levels;
    for (double& x : v) {
      double q = std::round(x / scale);
      q = std::clamp(q, -levels, levels);
      x = snap_f32(q * scale);
    }
  };

  QuantizeResult result;
  result.model = ckpt;
  result.q_storage = 32.0 / static_cast<double>(bits);
  quantize_vec(result.model.embedding.data());
  for (LayerParams& lp : result.model.layers) {
    quantize_vec(lp.wq.data());
    quantize_vec(lp.wk.data());
    quantize_vec(lp.wv.data());
    quantize_vec(lp.wo.data());
    quantize_vec(lp.w_up.data());
    quantize_vec(lp.w_down.data());
    quantize_vec(lp.norm1);
    quantize_vec(lp.norm2);
  }
  quantize_vec(result.model.final_norm);
  quantize_vec(result.model.head.data());
  return result;
}

// ---------------------------------------------------------------------------
// Log serialization & replay
// ---------------------------------------------------------------------------

std::string merge_log_to_jsonl(const MergeLog& log) {
  std::string out;
  nlohmann::json config_line = log.config_snapshot;
  config_line["type"] = "config";
  if (log.no_merge) config_line["no_merge"] = true;
  if (!log.notice.empty()) config_line["notice"] = log.notice;
  out += config_line.dump();
  out += "\n";
  for (const MergeStep& step : log.steps) {
    out += step_to_json(step).dump();
    out += "\n";
  }
  return out;
}

MergeLog merge_log_from_jsonl(const std::string& text) {
  MergeLog log;
  std::istringstream in(text);
  std::string line;
  bool saw_config = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw Error::format("malformed merge-log line");
    const std::string type = j.value("type", "");
    if (type == "config") {
      saw_config = true;
      log.no_merge = j.value("no_merge", false);
      log.notice = j.value("notice", "");
      j.erase("type");
      if (j.contains("no_merge")) j.erase("no_merge");
      if (j.contains("notice")) j.erase("notice");
      log.config_snapshot = j;
    } else if (type == "step") {
      MergeStep step;
      step.iteration = j.at("iteration").get<std::size_t>();
      step.pair_low = j.at("pair")[0].get<std::size_t>();
      step.pair_high = j.at("pair")[1].get<std::size_t>();
      if (!j.at("similarity").is_null()) step.similarity = j.at("similarity").get<double>();
      step.alpha = j.at("alpha").get<double>();
      step.retained_after = j.at("retained_after").get<std::size_t>();
      log.steps.push_back(step);
    } else {
      throw Error::format("unknown merge-log line type '" + type + "'");
    }
  }
  if (!saw_config) throw Error::format("merge log missing config line");
  return log;
}

ModelCheckpoint replay_merge_log(const ModelCheckpoint& original, const MergeLog& log) {
  ModelCheckpoint model = original;
  std::vector<std::size_t> reps(model.config.n_layers);
  for (std::size_t i = 0; i < reps.size(); ++i) reps[i] = i + 1;

  for (const MergeStep& step : log.steps) {
    const auto it = std::find(reps.begin(), reps.end(), step.pair_low);
    if (it == reps.end()) {
      throw Error::invalid_input("replay: layer id " + std::to_string(step.pair_low) +
                                 " not live");
    }
    const auto pos = static_cast<std::size_t>(it - reps.begin());
    if (pos + 1 >= reps.size() || reps[pos + 1] != step.pair_high) {
      throw Error::invalid_input("replay: logged pair is not adjacent in the live list");
    }
    model.layers[pos] = fuse_layers(model.layers[pos], model.layers[pos + 1], step.alpha);
    model.layers.erase(model.layers.begin() + static_cast<std::ptrdiff_t>(pos + 1));
    model.config.n_layers -= 1;
    reps.erase(reps.begin() + static_cast<std::ptrdiff_t>(pos + 1));
  }
  return model;
}

std::vector<std::size_t> alignment_from_log(std::size_t original_layers, const MergeLog& log) {
  std::vector<std::size_t> reps(original_layers);
  for (std::size_t i = 0; i < reps.size(); ++i) reps[i] = i + 1;
  for (const MergeStep& step : log.steps) {
    const auto it = std::find(reps.begin(), reps.end(), step.pair_low);
    if (it == reps.end() || it + 1 == reps.end() || *(it + 1) != step.pair_high) {
      throw Error::invalid_input("alignment: inconsistent merge log");
    }
    reps.erase(it + 1);
  }
  for (std::size_t& r : reps) r -= 1;  // 0-based original indices
  return reps;
}

// ---------------------------------------------------------------------------
// Loss impact
// ---------------------------------------------------------------------------

double estimate_hessian_lambda_max(const GradFn& grad, std::span<const double> theta0,
                                   std::size_t power_iters, double fd_eps, std::uint64_t seed) {
  if (!(fd_eps > 0.0)) throw Error::invalid_input("fd_eps must be > 0");
  const std::size_t dim = theta0.size();
  std::vector<double> plus(dim), minus(dim);

  const MatVec hvp = [&](std::span<const double> v, std::span<double> out) {
    for (std::size_t i = 0; i < dim; ++i) {
      plus[i] = theta0[i] + fd_eps * v[i];
      minus[i] = theta0[i] - fd_eps * v[i];
    }
    const std::vector<double> grad_plus = grad(plus);
    const std::vector<double> grad_minus = grad(minus);
    for (std::size_t i = 0; i < dim; ++i) {
      const double h = (grad_plus[i] - grad_minus[i]) / (2.0 * fd_eps);
      if (!std::isfinite(h)) {
        throw Error::numerical_failure("non-finite Hessian-vector product entry");
      }
      out[i] = h;
    }
  };
  return power_iteration_max_eig(hvp, dim, power_iters, seed);
}

LossImpactReport loss_impact_from_functions(const LossFn& loss, const GradFn& grad,
                                            std::span<const double> theta0,
                                            std::span<const double> theta1,
                                            double extra_deleted_sq_norm,
                                            std::size_t power_iters, double fd_eps,
                                            std::uint64_t seed) {
  if (theta0.size() != theta1.size()) {
    throw Error::invalid_input("loss_impact parameter vectors must have equal length");
  }
  double delta_sq = extra_deleted_sq_norm;
  for (std::size_t i = 0; i < theta0.size(); ++i) {
    const double d = theta1[i] - theta0[i];
    delta_sq += d * d;
  }

  LossImpactReport report;
  report.delta_theta_norm = std::sqrt(delta_sq);
  report.lambda_max = estimate_hessian_lambda_max(grad, theta0, power_iters, fd_eps, seed);
  report.bound = 0.5 * report.lambda_max * delta_sq;
  report.observed_delta_loss = loss(theta1) - loss(theta0);
  report.bound_satisfied = report.observed_delta_loss <= report.bound + 1e-12;
  return report;
}

LossImpactReport loss_impact(const ModelCheckpoint& original, const ModelCheckpoint& merged,
                             const std::vector<std::size_t>& alignment, const ToyTask& task,
                             const LossImpactOptions& opts) {
  original.validate();
  merged.validate();
  if (alignment.size() != merged.config.n_layers) {
    throw Error::invalid_input("alignment length must equal merged layer count");
  }
  for (std::size_t i = 0; i < alignment.size(); ++i) {
    if (alignment[i] >= original.config.n_layers) {
      throw Error::invalid_input("alignment index out of range");
    }
    if (i > 0 && alignment[i] <= alignment[i - 1]) {
      throw Error::invalid_input("alignment must be strictly increasing");
    }
  }

  // delta-theta over the aligned stack; unaligned originals count in full.
  double delta_sq = sq_diff_norm(original.embedding.data(), merged.embedding.data()) +
                    sq_diff_norm(original.final_norm, merged.final_norm) +
                    sq_diff_norm(original.head.data(), merged.head.data());
  std::vector<bool> covered(original.config.n_layers, false);
  for (std::size_t i = 0; i < alignment.size(); ++i) {
    covered[alignment[i]] = true;
    delta_sq += sq_diff_norm(flatten_layer(merged.layers[i]),
                             flatten_layer(original.layers[alignment[i]]));
  }
  for (std::size_t i = 0; i < covered.size(); ++i) {
    if (!covered[i]) delta_sq += sq_norm(flatten_layer(original.layers[i]));
  }

  // Fixed evaluation batch shared by every loss/gradient evaluation.
  TaskStream stream(task, kLossImpactSalt + opts.seed);
  std::vector<std::vector<int>> samples;
  for (std::size_t b = 0; b < opts.eval_batches; ++b) {
    for (auto& s : stream.next_batch(opts.batch_size)) samples.push_back(std::move(s));
  }

  ModelCheckpoint probe = original;
  const GradFn grad = [&probe, &samples](std::span<const double> theta) {
    unflatten_parameters(theta, probe);
    ModelGrads grads = zero_grads(probe);
    loss_and_gradients(probe, samples, &grads);
    return flatten_gradients(grads);
  };

  const std::vector<double> theta0 = flatten_parameters(original);

  LossImpactReport report;
  report.delta_theta_norm = std::sqrt(delta_sq);
  report.lambda_max =
      estimate_hessian_lambda_max(grad, theta0, opts.power_iters, opts.fd_eps, opts.seed);
  report.bound = 0.5 * report.lambda_max * delta_sq;
  unflatten_parameters(theta0, probe);  // restore
  const double loss_original = loss_and_gradients(original, samples, nullptr);
  const double loss_merged = loss_and_gradients(merged, samples, nullptr);
  report.observed_delta_loss = loss_merged - loss_original;
  report.bound_satisfied = report.observed_delta_loss <= report.bound + 1e-12;
  return report;
}

}  // namespace layerfuse
