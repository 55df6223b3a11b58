// layerfuse: train tiny decoder transformers on synthetic tasks, analyze
// layer similarity through diffusion-map embeddings, and compress models by
// merging similar adjacent layers.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <algorithm>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "layerfuse/container.hpp"
#include "layerfuse/errors.hpp"
#include "layerfuse/manifold.hpp"
#include "layerfuse/merge.hpp"
#include "layerfuse/model.hpp"
#include "layerfuse/parallel.hpp"
#include "layerfuse/similarity.hpp"
#include "layerfuse/task.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace layerfuse;

namespace {

// ---------------------------------------------------------------------------
// Output helpers
// ---------------------------------------------------------------------------

// Reports carry floats rounded to 9 significant digits so repeated runs are
// byte-identical and diffs stay readable.
double round_9sig(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return std::strtod(buf, nullptr);
}

json json_real(double v) { return json(round_9sig(v)); }

std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error::format("cannot open '" + tmp.string() + "' for writing");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw Error::format("write failed for '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

void write_json(const fs::path& path, const json& j) {
  write_text_atomic(path, j.dump(2) + "\n");
}

fs::path ensure_out_dir(const std::string& out) {
  const fs::path dir(out);
  fs::create_directories(dir);
  return dir;
}

// ---------------------------------------------------------------------------
// Shared flag groups
// ---------------------------------------------------------------------------

struct CommonOpts {
  std::uint64_t seed = 0;
  std::string out;
};

void add_common(CLI::App* sub, CommonOpts& opts) {
  sub->add_option("--seed", opts.seed, "master random seed")->capture_default_str();
  sub->add_option("--out", opts.out, "output directory")->required();
}

// Expands `--config <file>` into `--key=value` tokens placed before the
// explicit flags, so command-line flags always win. Keys are the long flag
// names without the leading dashes.
std::vector<std::string> expand_config_args(int argc, char** argv) {
  std::vector<std::string> raw(argv + 1, argv + argc);
  std::string config_path;
  std::vector<std::string> user;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw[i] == "--config" && i + 1 < raw.size()) {
      config_path = raw[++i];
    } else if (raw[i].rfind("--config=", 0) == 0) {
      config_path = raw[i].substr(9);
    } else {
      user.push_back(raw[i]);
    }
  }
  if (config_path.empty()) return user;

  std::ifstream in(config_path);
  if (!in) throw Error::invalid_input("cannot open config file '" + config_path + "'");
  auto trim = [](std::string s) {
    const auto begin = s.find_first_not_of(" \t\r");
    const auto end = s.find_last_not_of(" \t\r");
    return begin == std::string::npos ? std::string() : s.substr(begin, end - begin + 1);
  };
  std::vector<std::string> config_tokens;
  std::string line;
  while (std::getline(in, line)) {
    const std::string text = trim(line);
    if (text.empty() || text[0] == '#' || text[0] == ';' || text[0] == '[') continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos) {
      throw Error::invalid_input("config line is not 'key = value': " + text);
    }
    const std::string key = trim(text.substr(0, eq));
    std::string value = trim(text.substr(eq + 1));
    if (value.size() >= 2 && (value.front() == '"' || value.front() == '\'') &&
        value.back() == value.front()) {
      value = value.substr(1, value.size() - 2);
    }
    config_tokens.push_back("--" + key + "=" + value);
  }

  // config tokens go right after the subcommand so explicit flags override
  std::vector<std::string> result;
  bool injected = false;
  for (const std::string& token : user) {
    result.push_back(token);
    if (!injected && !token.empty() && token[0] != '-') {
      result.insert(result.end(), config_tokens.begin(), config_tokens.end());
      injected = true;
    }
  }
  if (!injected) result.insert(result.end(), config_tokens.begin(), config_tokens.end());
  return result;
}

struct TaskOpts {
  std::string kind = "markov-chain";
  std::size_t vocab = 16;
  std::size_t seq_len = 16;
};

void add_task(CLI::App* sub, TaskOpts& opts) {
  sub->add_option("--task", opts.kind, "toy task: markov-chain or modular-addition")
      ->capture_default_str();
  sub->add_option("--vocab", opts.vocab, "task/model vocabulary size")->capture_default_str();
  sub->add_option("--seq-len", opts.seq_len, "sequence length")->capture_default_str();
}

ToyTask make_task(const TaskOpts& opts, std::uint64_t seed) {
  ToyTask task;
  task.kind = task_kind_from_string(opts.kind);
  task.vocab_size = opts.vocab;
  task.seq_len = opts.seq_len;
  task.seed = seed;
  return task;
}

struct ManifoldOpts {
  std::string sigma = "auto";
  std::size_t k = 8;
  double t = 1.0;
};

void add_manifold(CLI::App* sub, ManifoldOpts& opts) {
  sub->add_option("--sigma", opts.sigma, "kernel bandwidth: 'auto' (median) or a value")
      ->capture_default_str();
  sub->add_option("--k", opts.k, "diffusion embedding dimension")->capture_default_str();
  sub->add_option("--t", opts.t, "diffusion time")->capture_default_str();
}

ManifoldConfig make_manifold(const ManifoldOpts& opts) {
  ManifoldConfig config;
  config.embed_dim = opts.k;
  config.diffusion_time = opts.t;
  if (opts.sigma == "auto") {
    config.sigma_mode = SigmaMode::AutoMedian;
  } else {
    config.sigma_mode = SigmaMode::Fixed;
    config.sigma = std::strtod(opts.sigma.c_str(), nullptr);
    if (!(config.sigma > 0.0)) {
      throw Error::invalid_input("--sigma must be 'auto' or a positive number");
    }
  }
  return config;
}

PoolMode parse_pool(const std::string& pool) {
  if (pool == "last") return PoolMode::LastToken;
  if (pool == "mean") return PoolMode::Mean;
  throw Error::invalid_input("--pool must be 'last' or 'mean'");
}

// "nmi" | "grid:<steps>" | "fixed:<value>"
void apply_alpha_mode(const std::string& text, IBConfig& ib) {
  if (text == "nmi") {
    ib.alpha_mode = AlphaMode::NmiHeuristic;
    return;
  }
  if (text.rfind("grid", 0) == 0) {
    ib.alpha_mode = AlphaMode::GridSearch;
    if (text.size() > 5 && text[4] == ':') {
      ib.grid_steps = static_cast<std::size_t>(std::strtoull(text.c_str() + 5, nullptr, 10));
    }
    return;
  }
  if (text.rfind("fixed:", 0) == 0) {
    ib.alpha_mode = AlphaMode::Fixed;
    ib.fixed_value = std::strtod(text.c_str() + 6, nullptr);
    return;
  }
  throw Error::invalid_input("--alpha-mode must be nmi, grid[:steps], or fixed:<value>");
}

json metrics_json(const EvalMetrics& metrics) {
  json j;
  j["cross_entropy"] = json_real(metrics.cross_entropy);
  j["next_token_accuracy"] = json_real(metrics.next_token_accuracy);
  return j;
}

json steps_json(const MergeLog& log) {
  json arr = json::array();
  for (const MergeStep& step : log.steps) {
    json s;
    s["iteration"] = step.iteration;
    s["pair"] = {step.pair_low, step.pair_high};
    s["similarity"] = step.similarity ? json_real(*step.similarity) : json(nullptr);
    s["alpha"] = json_real(step.alpha);
    s["retained_after"] = step.retained_after;
    arr.push_back(std::move(s));
  }
  return arr;
}

json loss_impact_json(const LossImpactReport& report) {
  json j;
  j["delta_theta_norm"] = json_real(report.delta_theta_norm);
  j["lambda_max"] = json_real(report.lambda_max);
  j["bound"] = json_real(report.bound);
  j["observed_delta_loss"] = json_real(report.observed_delta_loss);
  j["bound_satisfied"] = report.bound_satisfied;
  return j;
}

// ---------------------------------------------------------------------------
// init-train
// ---------------------------------------------------------------------------

struct InitTrainOpts {
  CommonOpts common;
  TaskOpts task;
  std::size_t layers = 4;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t d_ff = 128;
  std::size_t max_seq_len = 64;
  std::size_t steps = 2000;
  double lr = 3e-3;
  std::size_t batch = 16;
};

int cmd_init_train(const InitTrainOpts& opts) {
  const fs::path out = ensure_out_dir(opts.common.out);

  ModelConfig config;
  config.vocab_size = opts.task.vocab;
  config.d_model = opts.d_model;
  config.n_layers = opts.layers;
  config.n_heads = opts.heads;
  config.d_ff = opts.d_ff;
  config.max_seq_len = opts.max_seq_len;
  config.seed = opts.common.seed;

  const ToyTask task = make_task(opts.task, opts.common.seed);
  const TrainResult result = train_toy(config, task, opts.steps, opts.lr, opts.batch);
  save_checkpoint(result.model, (out / "model.ckpt").string());

  std::string curve = "step,loss\n";
  for (std::size_t i = 0; i < result.step_losses.size(); ++i) {
    curve += std::to_string(i) + "," + format_real(result.step_losses[i]) + "\n";
  }
  write_text_atomic(out / "training_curve.csv", curve);

  json resolved;
  resolved["command"] = "init-train";
  resolved["task"] = opts.task.kind;
  resolved["vocab"] = opts.task.vocab;
  resolved["seq_len"] = opts.task.seq_len;
  resolved["layers"] = opts.layers;
  resolved["d_model"] = opts.d_model;
  resolved["heads"] = opts.heads;
  resolved["d_ff"] = opts.d_ff;
  resolved["max_seq_len"] = opts.max_seq_len;
  resolved["steps"] = opts.steps;
  resolved["lr"] = json_real(opts.lr);
  resolved["batch"] = opts.batch;
  resolved["seed"] = opts.common.seed;
  write_json(out / "resolved_config.json", resolved);

  json summary;
  summary["checkpoint"] = "model.ckpt";
  summary["steps"] = opts.steps;
  if (!result.step_losses.empty()) {
    summary["first_loss"] = json_real(result.step_losses.front());
    summary["final_loss"] = json_real(result.final_loss);
  }
  std::cout << summary.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// capture
// ---------------------------------------------------------------------------

struct CaptureOpts {
  CommonOpts common;
  TaskOpts task;
  std::string model;
  std::size_t n_inputs = 128;
  std::string pool = "last";
};

int cmd_capture(const CaptureOpts& opts) {
  const fs::path out = ensure_out_dir(opts.common.out);
  const ModelCheckpoint ckpt = load_checkpoint(opts.model);

  if (opts.n_inputs < 2) {
    throw Error::insufficient_samples("need at least 2 inputs for downstream analysis");
  }
  CaptureSpec spec;
  spec.task = make_task(opts.task, opts.common.seed);
  spec.n_inputs = opts.n_inputs;
  spec.pool = parse_pool(opts.pool);
  const CaptureData data = capture_activations(ckpt, spec);

  TensorStore store;
  store.meta()["kind"] = "activations";
  store.meta()["n_inputs"] = opts.n_inputs;
  store.meta()["d_model"] = ckpt.config.d_model;
  store.meta()["n_layers"] = ckpt.config.n_layers;
  store.meta()["task"] = opts.task.kind;
  store.meta()["vocab_size"] = opts.task.vocab;
  store.meta()["seq_len"] = opts.task.seq_len;
  store.meta()["seed"] = opts.common.seed;
  store.meta()["pool"] = opts.pool;
  store.meta()["model"] = {{"vocab_size", ckpt.config.vocab_size},
                           {"d_model", ckpt.config.d_model},
                           {"n_layers", ckpt.config.n_layers},
                           {"n_heads", ckpt.config.n_heads},
                           {"d_ff", ckpt.config.d_ff},
                           {"max_seq_len", ckpt.config.max_seq_len},
                           {"seed", ckpt.config.seed}};
  for (const ActivationMatrix& act : data.activations) {
    store.put_f64("layer." + std::to_string(act.layer_index) + ".activations",
                  {act.data.rows(), act.data.cols()}, act.data.data());
  }
  store.save((out / "activations.ckpt").string());

  json resolved;
  resolved["command"] = "capture";
  resolved["model"] = opts.model;
  resolved["task"] = opts.task.kind;
  resolved["vocab"] = opts.task.vocab;
  resolved["seq_len"] = opts.task.seq_len;
  resolved["n_inputs"] = opts.n_inputs;
  resolved["pool"] = opts.pool;
  resolved["seed"] = opts.common.seed;
  write_json(out / "resolved_config.json", resolved);

  std::cout << "wrote activations.ckpt with " << data.activations.size() << " tensors of shape ["
            << opts.n_inputs << ", " << ckpt.config.d_model << "]\n";
  return 0;
}

// ---------------------------------------------------------------------------
// similarity
// ---------------------------------------------------------------------------

struct SimilarityOpts {
  CommonOpts common;
  ManifoldOpts manifold;
  std::string activations;
  std::string measure = "nmi";
};

int cmd_similarity(const SimilarityOpts& opts) {
  const fs::path out = ensure_out_dir(opts.common.out);
  const TensorStore dump = TensorStore::load(opts.activations);
  if (dump.meta().value("kind", "") != "activations") {
    throw Error::format("'" + opts.activations + "' is not an activation dump");
  }
  const auto n_layers = dump.meta().at("n_layers").get<std::size_t>();
  if (n_layers < 2) throw Error::invalid_input("similarity needs at least 2 layers");

  const ManifoldConfig manifold = make_manifold(opts.manifold);
  const Measure measure = measure_from_string(opts.measure);

  // layers 1..L (index 0 is the post-embedding cloud)
  std::vector<DenseMatrix> clouds(n_layers);
  for (std::size_t l = 1; l <= n_layers; ++l) {
    const std::string name = "layer." + std::to_string(l) + ".activations";
    const StoredTensor& tensor = dump.get(name);
    if (tensor.shape.size() != 2) throw Error::format("tensor '" + name + "' is not 2-D");
    clouds[l - 1] =
        DenseMatrix::from_data(tensor.shape[0], tensor.shape[1], dump.get_f64(name));
  }

  const std::size_t n_samples = clouds.front().rows();
  if (measure == Measure::Nmi && n_samples < 2 * manifold.embed_dim) {
    std::cerr << "warning: " << n_samples << " samples for k=" << manifold.embed_dim
              << " embeddings; covariance estimates want N >= 2k\n";
  }

  std::vector<DiffusionEmbedding> embeddings(n_layers);
  std::vector<double> sigmas(n_layers, 0.0);
  parallel_for(n_layers, [&](std::size_t i) {
    embeddings[i] = embed_points(clouds[i], manifold, i + 1, &sigmas[i]);
  });

  std::vector<std::size_t> ids(n_layers);
  for (std::size_t i = 0; i < n_layers; ++i) ids[i] = i + 1;
  const SimilarityMatrix matrix = build_similarity_matrix(embeddings, ids, measure);

  write_text_atomic(out / "similarity.csv", similarity_to_csv(matrix));
  write_text_atomic(out / "similarity.pgm", similarity_to_pgm(matrix));

  TensorStore embed_store;
  embed_store.meta()["kind"] = "embeddings";
  embed_store.meta()["k"] = manifold.embed_dim;
  embed_store.meta()["t"] = json_real(manifold.diffusion_time);
  embed_store.meta()["sigma_mode"] =
      manifold.sigma_mode == SigmaMode::AutoMedian ? "auto-median" : "fixed";
  json layer_meta = json::array();
  for (std::size_t i = 0; i < n_layers; ++i) {
    embed_store.put_f64("layer." + std::to_string(i + 1) + ".embedding",
                        {embeddings[i].coords.rows(), embeddings[i].coords.cols()},
                        embeddings[i].coords.data());
    json lm;
    lm["layer"] = i + 1;
    lm["sigma_used"] = json_real(sigmas[i]);
    json eigs = json::array();
    for (double lambda : embeddings[i].eigenvalues_used) eigs.push_back(json_real(lambda));
    lm["eigenvalues"] = std::move(eigs);
    layer_meta.push_back(std::move(lm));
  }
  embed_store.meta()["layers"] = layer_meta;
  embed_store.save((out / "embeddings.ckpt").string());

  json report;
  report["command"] = "similarity";
  report["measure"] = opts.measure;
  report["k"] = manifold.embed_dim;
  report["t"] = json_real(manifold.diffusion_time);
  report["sigma"] = opts.manifold.sigma;
  report["layers"] = layer_meta;
  report["nmi_fallback_count"] = matrix.nmi_fallback_count;
  if (measure == Measure::EuclideanRbf || measure == Measure::MahalanobisRbf) {
    report["rbf_median"] = json_real(matrix.rbf_median);
  }
  report["files"] = {{"csv", "similarity.csv"},
                     {"pgm", "similarity.pgm"},
                     {"embeddings", "embeddings.ckpt"}};
  write_json(out / "similarity.json", report);
  write_json(out / "resolved_config.json",
             json{{"command", "similarity"},
                  {"activations", opts.activations},
                  {"measure", opts.measure},
                  {"sigma", opts.manifold.sigma},
                  {"k", manifold.embed_dim},
                  {"t", json_real(manifold.diffusion_time)},
                  {"seed", opts.common.seed}});

  std::cout << "similarity matrix over " << n_layers << " layers written\n";
  return 0;
}

// ---------------------------------------------------------------------------
// compress
// ---------------------------------------------------------------------------

struct CompressOpts {
  CommonOpts common;
  TaskOpts task;
  ManifoldOpts manifold;
  std::string model;
  std::string method = "mka";
  std::size_t target_layers = 0;  // 0 = unset
  double tau = 0.0;               // 0 = unset
  std::string alpha_mode = "nmi";
  double beta = 2.0;
  std::string target = "final-layer";
  std::string measure = "nmi";
  std::string quant = "none";
  bool no_iterative = false;
  bool no_recompute = false;
  std::size_t capture_n = 128;
  std::string pool = "last";
  bool no_loss_impact = false;
  std::size_t hvp_iters = 12;
  std::size_t eval_batches = 20;
};

int cmd_compress(const CompressOpts& opts) {
  const fs::path out = ensure_out_dir(opts.common.out);
  const ModelCheckpoint original = load_checkpoint(opts.model);
  const ToyTask task = make_task(opts.task, opts.common.seed);

  const bool has_target = opts.target_layers > 0;
  const bool has_tau = opts.tau > 0.0;

  std::string method = opts.method;
  double fixed_lambda = 0.5;
  if (method.rfind("fixed:", 0) == 0) {
    fixed_lambda = std::strtod(method.c_str() + 6, nullptr);
    method = "fixed";
  }
  if (method != "mka" && method != "fixed" && method != "reverse") {
    throw Error::invalid_input("--method must be mka, fixed:<lambda>, or reverse");
  }
  if (method == "mka") {
    if (has_target == has_tau) {
      throw Error::invalid_input("specify exactly one of --target-layers or --tau");
    }
  } else if (!has_target || has_tau) {
    throw Error::invalid_input("method '" + method + "' requires --target-layers (no --tau)");
  }

  MergeResult result;
  if (method == "mka") {
    CaptureSpec capture;
    capture.task = task;
    capture.n_inputs = opts.capture_n;
    capture.pool = parse_pool(opts.pool);

    MergeConfig config;
    config.stop = has_tau ? MergeConfig::StopKind::Threshold
                          : MergeConfig::StopKind::TargetLayers;
    config.tau = has_tau ? opts.tau : 0.9;
    config.target_layers = has_target ? opts.target_layers : 1;
    apply_alpha_mode(opts.alpha_mode, config.ib);
    config.ib.beta = opts.beta;
    config.ib.target_mode = opts.target == "task-labels" ? TargetMode::TaskLabels
                                                         : TargetMode::FinalLayerEmbedding;
    config.iterative = !opts.no_iterative;
    config.recompute_embeddings = !opts.no_recompute;
    config.seed = opts.common.seed;
    result = mka_compress(original, capture, make_manifold(opts.manifold),
                          measure_from_string(opts.measure), config);
  } else if (method == "fixed") {
    result = fixed_lambda_merge(original, fixed_lambda, opts.target_layers);
  } else {
    result.model = reverse_prune(original, opts.target_layers);
    result.log.config_snapshot = {{"method", "reverse"},
                                  {"target_layers", opts.target_layers}};
  }

  // Optional round-to-nearest quantization. The compression-ratio Q follows
  // the paper's convention of counting relative to 16-bit base weights:
  // int4 -> Q=4, int8 -> Q=2 (the container itself stays f32, so the
  // storage-relative factor 32/bits is reported alongside).
  double q_paper = 1.0;
  double q_storage = 1.0;
  if (opts.quant == "int8" || opts.quant == "int4") {
    const int bits = opts.quant == "int8" ? 8 : 4;
    QuantizeResult quantized = quantize_rtn(result.model, bits);
    result.model = std::move(quantized.model);
    q_storage = quantized.q_storage;
    q_paper = 16.0 / static_cast<double>(bits);
  } else if (opts.quant != "none") {
    throw Error::invalid_input("--quant must be none, int8, or int4");
  }

  save_checkpoint(result.model, (out / "compressed.ckpt").string());
  write_text_atomic(out / "merge_log.jsonl", merge_log_to_jsonl(result.log));

  const CompressionReport ratio =
      compression_ratio(original.config.n_layers, result.model.config.n_layers, q_paper);

  json report;
  report["command"] = "compress";
  report["method"] = opts.method;
  report["compression"] = {{"l_total", ratio.l_total},
                           {"l_retained", ratio.l_retained},
                           {"q", json_real(ratio.q)},
                           {"q_convention", "paper-16bit-base"},
                           {"q_storage", json_real(q_storage)},
                           {"ratio", json_real(ratio.ratio)},
                           {"ratio_percent", format_percent(ratio.ratio)}};
  report["evaluation"] = {{"original", metrics_json(evaluate(original, task, opts.eval_batches))},
                          {"compressed",
                           metrics_json(evaluate(result.model, task, opts.eval_batches))}};
  report["steps"] = steps_json(result.log);
  if (!result.log.notice.empty()) report["notice"] = result.log.notice;
  if (result.log.no_merge) report["no_merge"] = true;

  if (!opts.no_loss_impact) {
    std::vector<std::size_t> alignment;
    if (method == "reverse") {
      for (std::size_t i = 0; i < result.model.config.n_layers; ++i) alignment.push_back(i);
    } else {
      alignment = alignment_from_log(original.config.n_layers, result.log);
    }
    LossImpactOptions li;
    li.power_iters = opts.hvp_iters;
    li.seed = opts.common.seed;
    report["loss_impact"] = loss_impact_json(
        loss_impact(original, result.model, alignment, task, li));
  }
  report["files"] = {{"checkpoint", "compressed.ckpt"}, {"merge_log", "merge_log.jsonl"}};
  write_json(out / "report.json", report);

  json resolved;
  resolved["command"] = "compress";
  resolved["model"] = opts.model;
  resolved["method"] = opts.method;
  resolved["target_layers"] = opts.target_layers;
  resolved["tau"] = json_real(opts.tau);
  resolved["alpha_mode"] = opts.alpha_mode;
  resolved["beta"] = json_real(opts.beta);
  resolved["target"] = opts.target;
  resolved["measure"] = opts.measure;
  resolved["quant"] = opts.quant;
  resolved["iterative"] = !opts.no_iterative;
  resolved["recompute_embeddings"] = !opts.no_recompute;
  resolved["capture_n"] = opts.capture_n;
  resolved["pool"] = opts.pool;
  resolved["task"] = opts.task.kind;
  resolved["vocab"] = opts.task.vocab;
  resolved["seq_len"] = opts.task.seq_len;
  resolved["sigma"] = opts.manifold.sigma;
  resolved["k"] = opts.manifold.k;
  resolved["t"] = json_real(opts.manifold.t);
  resolved["loss_impact"] = !opts.no_loss_impact;
  resolved["hvp_iters"] = opts.hvp_iters;
  resolved["eval_batches"] = opts.eval_batches;
  resolved["seed"] = opts.common.seed;
  write_json(out / "resolved_config.json", resolved);

  std::cout << "retained " << ratio.l_retained << "/" << ratio.l_total
            << " layers, compression ratio " << format_percent(ratio.ratio) << "%\n";
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct EvaluateOpts {
  CommonOpts common;
  TaskOpts task;
  std::string model;
  std::size_t n_batches = 100;
  std::size_t batch = 16;
};

int cmd_evaluate(const EvaluateOpts& opts) {
  const fs::path out = ensure_out_dir(opts.common.out);
  const ModelCheckpoint ckpt = load_checkpoint(opts.model);
  const ToyTask task = make_task(opts.task, opts.common.seed);
  const EvalMetrics metrics = evaluate(ckpt, task, opts.n_batches, opts.batch);

  const json j = metrics_json(metrics);
  write_json(out / "metrics.json", j);
  write_json(out / "resolved_config.json", json{{"command", "evaluate"},
                                                {"model", opts.model},
                                                {"task", opts.task.kind},
                                                {"vocab", opts.task.vocab},
                                                {"seq_len", opts.task.seq_len},
                                                {"n_batches", opts.n_batches},
                                                {"batch", opts.batch},
                                                {"seed", opts.common.seed}});
  std::cout << j.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

struct SweepOpts {
  CommonOpts common;
  TaskOpts task;
  ManifoldOpts manifold;
  std::string model;
  std::string methods = "mka,reverse";
  std::string ratios = "0,25";
  std::string measure = "nmi";
  std::string alpha_mode = "nmi";
  double beta = 2.0;
  std::size_t capture_n = 128;
  std::size_t eval_batches = 20;
};

int cmd_sweep(const SweepOpts& opts) {
  const fs::path out = ensure_out_dir(opts.common.out);
  const ModelCheckpoint original = load_checkpoint(opts.model);
  const ToyTask task = make_task(opts.task, opts.common.seed);

  auto split = [](const std::string& text) {
    std::vector<std::string> parts;
    std::string item;
    for (char c : text) {
      if (c == ',') {
        if (!item.empty()) parts.push_back(item);
        item.clear();
      } else {
        item += c;
      }
    }
    if (!item.empty()) parts.push_back(item);
    return parts;
  };

  const std::vector<std::string> methods = split(opts.methods);
  const std::vector<std::string> ratio_texts = split(opts.ratios);
  if (methods.empty() || ratio_texts.empty()) {
    throw Error::invalid_input("--methods and --ratios must be non-empty");
  }

  const std::size_t total = original.config.n_layers;
  std::string csv = "method,ratio_requested,retained,ratio,cross_entropy,next_token_accuracy,status\n";
  std::size_t ok_rows = 0;

  for (const std::string& method : methods) {
    for (const std::string& ratio_text : ratio_texts) {
      const double requested = std::strtod(ratio_text.c_str(), nullptr);
      auto retained = static_cast<std::size_t>(std::llround(
          static_cast<double>(total) * (1.0 - requested / 100.0)));
      retained = std::min(std::max<std::size_t>(retained, 1), total);

      std::string status = "ok";
      EvalMetrics metrics{};
      try {
        ModelCheckpoint compressed;
        if (method == "reverse") {
          compressed = reverse_prune(original, retained);
        } else if (method.rfind("fixed:", 0) == 0) {
          compressed = fixed_lambda_merge(original,
                                          std::strtod(method.c_str() + 6, nullptr), retained)
                           .model;
        } else if (method == "mka") {
          CaptureSpec capture;
          capture.task = task;
          capture.n_inputs = opts.capture_n;
          MergeConfig config;
          config.target_layers = retained;
          apply_alpha_mode(opts.alpha_mode, config.ib);
          config.ib.beta = opts.beta;
          config.seed = opts.common.seed;
          compressed = mka_compress(original, capture, make_manifold(opts.manifold),
                                    measure_from_string(opts.measure), config)
                           .model;
        } else {
          throw Error::invalid_input("unknown sweep method '" + method + "'");
        }
        metrics = evaluate(compressed, task, opts.eval_batches);
        ++ok_rows;
      } catch (const Error& e) {
        status = std::string("error: ") + e.what();
        for (char& c : status) {
          if (c == ',' || c == '\n') c = ';';
        }
      }

      const double achieved =
          (static_cast<double>(total) - static_cast<double>(retained)) /
          static_cast<double>(total);
      csv += method + "," + format_real(requested) + "," + std::to_string(retained) + "," +
             format_real(achieved) + "," +
             (status == "ok" ? format_real(metrics.cross_entropy) : "") + "," +
             (status == "ok" ? format_real(metrics.next_token_accuracy) : "") + "," + status +
             "\n";
    }
  }

  write_text_atomic(out / "sweep.csv", csv);
  write_json(out / "resolved_config.json", json{{"command", "sweep"},
                                                {"model", opts.model},
                                                {"methods", opts.methods},
                                                {"ratios", opts.ratios},
                                                {"measure", opts.measure},
                                                {"alpha_mode", opts.alpha_mode},
                                                {"beta", json_real(opts.beta)},
                                                {"capture_n", opts.capture_n},
                                                {"eval_batches", opts.eval_batches},
                                                {"task", opts.task.kind},
                                                {"vocab", opts.task.vocab},
                                                {"seq_len", opts.task.seq_len},
                                                {"seed", opts.common.seed}});
  std::cout << csv;
  if (ok_rows == 0) throw Error::numerical_failure("every sweep row failed");
  return 0;
}

int exit_code_for(const Error& error) {
  switch (error.kind()) {
    case ErrorKind::TrainingDiverged:
      return 3;
    case ErrorKind::DegenerateData:
    case ErrorKind::Singularity:
    case ErrorKind::NumericalFailure:
      return 4;
    default:
      return 2;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"layerfuse: diffusion-map layer similarity and transformer layer merging"};
  app.require_subcommand(1);

  InitTrainOpts init_opts;
  CLI::App* init_sub = app.add_subcommand("init-train", "initialize and train a toy model");
  add_common(init_sub, init_opts.common);
  add_task(init_sub, init_opts.task);
  init_sub->add_option("--layers", init_opts.layers)->capture_default_str();
  init_sub->add_option("--d-model", init_opts.d_model)->capture_default_str();
  init_sub->add_option("--heads", init_opts.heads)->capture_default_str();
  init_sub->add_option("--d-ff", init_opts.d_ff)->capture_default_str();
  init_sub->add_option("--max-seq-len", init_opts.max_seq_len)->capture_default_str();
  init_sub->add_option("--steps", init_opts.steps)->capture_default_str();
  init_sub->add_option("--lr", init_opts.lr)->capture_default_str();
  init_sub->add_option("--batch", init_opts.batch)->capture_default_str();

  CaptureOpts capture_opts;
  CLI::App* capture_sub = app.add_subcommand("capture", "dump per-layer activations");
  add_common(capture_sub, capture_opts.common);
  add_task(capture_sub, capture_opts.task);
  capture_sub->add_option("--model", capture_opts.model)->required();
  capture_sub->add_option("--n-inputs", capture_opts.n_inputs)->capture_default_str();
  capture_sub->add_option("--pool", capture_opts.pool)->capture_default_str();

  SimilarityOpts sim_opts;
  CLI::App* sim_sub = app.add_subcommand("similarity", "layer similarity from a dump");
  add_common(sim_sub, sim_opts.common);
  add_manifold(sim_sub, sim_opts.manifold);
  sim_sub->add_option("--activations", sim_opts.activations)->required();
  sim_sub->add_option("--measure", sim_opts.measure)->capture_default_str();

  CompressOpts compress_opts;
  CLI::App* compress_sub = app.add_subcommand("compress", "merge or prune layers");
  add_common(compress_sub, compress_opts.common);
  add_task(compress_sub, compress_opts.task);
  add_manifold(compress_sub, compress_opts.manifold);
  compress_sub->add_option("--model", compress_opts.model)->required();
  compress_sub->add_option("--method", compress_opts.method)->capture_default_str();
  compress_sub->add_option("--target-layers", compress_opts.target_layers);
  compress_sub->add_option("--tau", compress_opts.tau);
  compress_sub->add_option("--alpha-mode", compress_opts.alpha_mode)->capture_default_str();
  compress_sub->add_option("--beta", compress_opts.beta)->capture_default_str();
  compress_sub->add_option("--target", compress_opts.target)->capture_default_str();
  compress_sub->add_option("--measure", compress_opts.measure)->capture_default_str();
  compress_sub->add_option("--quant", compress_opts.quant)->capture_default_str();
  compress_sub->add_flag("--no-iterative", compress_opts.no_iterative);
  compress_sub->add_flag("--no-recompute", compress_opts.no_recompute);
  compress_sub->add_option("--capture-n", compress_opts.capture_n)->capture_default_str();
  compress_sub->add_option("--pool", compress_opts.pool)->capture_default_str();
  compress_sub->add_flag("--no-loss-impact", compress_opts.no_loss_impact);
  compress_sub->add_option("--hvp-iters", compress_opts.hvp_iters)->capture_default_str();
  compress_sub->add_option("--eval-batches", compress_opts.eval_batches)->capture_default_str();

  EvaluateOpts eval_opts;
  CLI::App* eval_sub = app.add_subcommand("evaluate", "cross-entropy and accuracy");
  add_common(eval_sub, eval_opts.common);
  add_task(eval_sub, eval_opts.task);
  eval_sub->add_option("--model", eval_opts.model)->required();
  eval_sub->add_option("--n-batches", eval_opts.n_batches)->capture_default_str();
  eval_sub->add_option("--batch", eval_opts.batch)->capture_default_str();

  SweepOpts sweep_opts;
  CLI::App* sweep_sub = app.add_subcommand("sweep", "method x ratio metric grid");
  add_common(sweep_sub, sweep_opts.common);
  add_task(sweep_sub, sweep_opts.task);
  add_manifold(sweep_sub, sweep_opts.manifold);
  sweep_sub->add_option("--model", sweep_opts.model)->required();
  sweep_sub->add_option("--methods", sweep_opts.methods)->capture_default_str();
  sweep_sub->add_option("--ratios", sweep_opts.ratios)->capture_default_str();
  sweep_sub->add_option("--measure", sweep_opts.measure)->capture_default_str();
  sweep_sub->add_option("--alpha-mode", sweep_opts.alpha_mode)->capture_default_str();
  sweep_sub->add_option("--beta", sweep_opts.beta)->capture_default_str();
  sweep_sub->add_option("--capture-n", sweep_opts.capture_n)->capture_default_str();
  sweep_sub->add_option("--eval-batches", sweep_opts.eval_batches)->capture_default_str();

  // every subcommand accepts a config file; documented here, consumed by the
  // argument preprocessing below
  for (CLI::App* sub : {init_sub, capture_sub, sim_sub, compress_sub, eval_sub, sweep_sub}) {
    sub->add_option("--config", "key = value file; command-line flags win")
        ->expected(0, 1);
    for (CLI::Option* opt : sub->get_options()) {
      opt->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    }
  }

  try {
    std::vector<std::string> args = expand_config_args(argc, argv);
    std::reverse(args.begin(), args.end());
    app.parse(std::move(args));
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // help/version exit 0; usage errors exit 2
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }

  try {
    if (init_sub->parsed()) return cmd_init_train(init_opts);
    if (capture_sub->parsed()) return cmd_capture(capture_opts);
    if (sim_sub->parsed()) return cmd_similarity(sim_opts);
    if (compress_sub->parsed()) return cmd_compress(compress_opts);
    if (eval_sub->parsed()) return cmd_evaluate(eval_opts);
    if (sweep_sub->parsed()) return cmd_sweep(sweep_opts);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
