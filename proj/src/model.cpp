#include "layerfuse/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "layerfuse/container.hpp"
#include "layerfuse/parallel.hpp"
#include "layerfuse/rng.hpp"

namespace layerfuse {

namespace {

constexpr double kNormEps = 1e-6;
constexpr double kRopeBase = 10000.0;
constexpr double kGradClipNorm = 1.0;
constexpr std::uint64_t kTrainSalt = 0x7261696eULL;
constexpr std::uint64_t kEvalSalt = 0x6576616cULL;

// ---------------------------------------------------------------------------
// Forward trace
// ---------------------------------------------------------------------------

struct LayerTrace {
  DenseMatrix x_in;             // T x d, block input
  std::vector<double> rms1;     // per-row RMS of x_in
  DenseMatrix normed1;          // T x d
  DenseMatrix q, k, v;          // T x d; q,k hold post-rotary values
  DenseMatrix probs;            // (heads*T) x T, row h*T+t is softmax over s<=t
  DenseMatrix ctx;              // T x d, heads concatenated, before wo
  DenseMatrix x_mid;            // T x d, after attention residual
  std::vector<double> rms2;
  DenseMatrix normed2;
  DenseMatrix ff_pre;           // T x d_ff
  DenseMatrix ff_act;           // T x d_ff
};

struct SeqTrace {
  std::vector<LayerTrace> layers;
  DenseMatrix x_final;          // T x d, input to the final norm
  std::vector<double> rms_final;
  DenseMatrix y;                // T x d
  DenseMatrix logits;           // T x vocab
};

struct RopeTable {
  std::size_t half = 0;
  std::vector<double> cos_v, sin_v;  // T x half

  RopeTable(std::size_t seq_len, std::size_t head_dim) : half(head_dim / 2) {
    cos_v.resize(seq_len * half);
    sin_v.resize(seq_len * half);
    for (std::size_t pos = 0; pos < seq_len; ++pos) {
      for (std::size_t i = 0; i < half; ++i) {
        const double freq =
            std::pow(kRopeBase, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
        const double angle = static_cast<double>(pos) * freq;
        cos_v[pos * half + i] = std::cos(angle);
        sin_v[pos * half + i] = std::sin(angle);
      }
    }
  }
};

void rms_norm_rows(const DenseMatrix& x, const std::vector<double>& gain, DenseMatrix& out,
                   std::vector<double>& rms) {
  const std::size_t t_len = x.rows();
  const std::size_t d = x.cols();
  out = DenseMatrix(t_len, d);
  rms.assign(t_len, 0.0);
  for (std::size_t t = 0; t < t_len; ++t) {
    const double* row = x.row_ptr(t);
    double sum = 0.0;
    for (std::size_t j = 0; j < d; ++j) sum += row[j] * row[j];
    const double r = std::sqrt(sum / static_cast<double>(d) + kNormEps);
    rms[t] = r;
    double* o = out.row_ptr(t);
    for (std::size_t j = 0; j < d; ++j) o[j] = row[j] * gain[j] / r;
  }
}

// dx and dgain accumulate; dy is the upstream gradient of the normed output.
void rms_norm_backward(const DenseMatrix& x, const std::vector<double>& gain,
                       const std::vector<double>& rms, const DenseMatrix& dy, DenseMatrix& dx,
                       std::vector<double>& dgain) {
  const std::size_t t_len = x.rows();
  const std::size_t d = x.cols();
  for (std::size_t t = 0; t < t_len; ++t) {
    const double* xr = x.row_ptr(t);
    const double* dyr = dy.row_ptr(t);
    double* dxr = dx.row_ptr(t);
    const double r = rms[t];
    double dot = 0.0;
    for (std::size_t j = 0; j < d; ++j) dot += dyr[j] * gain[j] * xr[j];
    const double coef = dot / (static_cast<double>(d) * r * r * r);
    for (std::size_t j = 0; j < d; ++j) {
      dxr[j] += dyr[j] * gain[j] / r - xr[j] * coef;
      dgain[j] += dyr[j] * xr[j] / r;
    }
  }
}

void apply_rope(DenseMatrix& m, const RopeTable& rope, std::size_t n_heads,
                std::size_t head_dim, bool inverse) {
  const std::size_t t_len = m.rows();
  for (std::size_t t = 0; t < t_len; ++t) {
    double* row = m.row_ptr(t);
    for (std::size_t h = 0; h < n_heads; ++h) {
      double* slice = row + h * head_dim;
      for (std::size_t i = 0; i < rope.half; ++i) {
        const double c = rope.cos_v[t * rope.half + i];
        const double s = inverse ? -rope.sin_v[t * rope.half + i] : rope.sin_v[t * rope.half + i];
        const double a = slice[2 * i];
        const double b = slice[2 * i + 1];
        slice[2 * i] = a * c - b * s;
        slice[2 * i + 1] = a * s + b * c;
      }
    }
  }
}

double silu(double z) { return z / (1.0 + std::exp(-z)); }

double silu_grad(double z) {
  const double sig = 1.0 / (1.0 + std::exp(-z));
  return sig * (1.0 + z * (1.0 - sig));
}

SeqTrace forward_sequence(const ModelCheckpoint& ckpt, std::span<const int> tokens) {
  const ModelConfig& cfg = ckpt.config;
  const std::size_t t_len = tokens.size();
  const std::size_t d = cfg.d_model;
  const std::size_t heads = cfg.n_heads;
  const std::size_t dh = cfg.head_dim();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  if (t_len == 0) throw Error::invalid_input("empty token sequence");
  if (t_len > cfg.max_seq_len) {
    throw Error::invalid_input("sequence length " + std::to_string(t_len) +
                               " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  for (int tok : tokens) {
    if (tok < 0 || static_cast<std::size_t>(tok) >= cfg.vocab_size) {
      throw Error::invalid_input("token id " + std::to_string(tok) + " out of range");
    }
  }

  const RopeTable rope(t_len, dh);
  SeqTrace trace;
  trace.layers.resize(cfg.n_layers);

  DenseMatrix x(t_len, d);
  for (std::size_t t = 0; t < t_len; ++t) {
    const double* emb = ckpt.embedding.row_ptr(static_cast<std::size_t>(tokens[t]));
    std::copy(emb, emb + d, x.row_ptr(t));
  }

  for (std::size_t li = 0; li < cfg.n_layers; ++li) {
    const LayerParams& lp = ckpt.layers[li];
    LayerTrace& lt = trace.layers[li];
    lt.x_in = x;

    rms_norm_rows(lt.x_in, lp.norm1, lt.normed1, lt.rms1);
    lt.q = matmul(lt.normed1, lp.wq);
    lt.k = matmul(lt.normed1, lp.wk);
    lt.v = matmul(lt.normed1, lp.wv);
    apply_rope(lt.q, rope, heads, dh, false);
    apply_rope(lt.k, rope, heads, dh, false);

    lt.probs = DenseMatrix(heads * t_len, t_len);
    lt.ctx = DenseMatrix(t_len, d);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t t = 0; t < t_len; ++t) {
        double* prow = lt.probs.row_ptr(h * t_len + t);
        const double* qrow = lt.q.row_ptr(t) + off;
        double max_score = -1e300;
        for (std::size_t s = 0; s <= t; ++s) {
          const double* krow = lt.k.row_ptr(s) + off;
          double score = 0.0;
          for (std::size_t j = 0; j < dh; ++j) score += qrow[j] * krow[j];
          prow[s] = score * inv_sqrt_dh;
          max_score = std::max(max_score, prow[s]);
        }
        double denom = 0.0;
        for (std::size_t s = 0; s <= t; ++s) {
          prow[s] = std::exp(prow[s] - max_score);
          denom += prow[s];
        }
        double* crow = lt.ctx.row_ptr(t) + off;
        for (std::size_t s = 0; s <= t; ++s) {
          prow[s] /= denom;
          const double* vrow = lt.v.row_ptr(s) + off;
          for (std::size_t j = 0; j < dh; ++j) crow[j] += prow[s] * vrow[j];
        }
      }
    }

    const DenseMatrix attn_out = matmul(lt.ctx, lp.wo);
    lt.x_mid = add(lt.x_in, attn_out);

    rms_norm_rows(lt.x_mid, lp.norm2, lt.normed2, lt.rms2);
    lt.ff_pre = matmul(lt.normed2, lp.w_up);
    lt.ff_act = lt.ff_pre;
    for (double& z : lt.ff_act.data()) z = silu(z);
    const DenseMatrix ff_out = matmul(lt.ff_act, lp.w_down);
    x = add(lt.x_mid, ff_out);
  }

  trace.x_final = x;
  rms_norm_rows(trace.x_final, ckpt.final_norm, trace.y, trace.rms_final);
  trace.logits = matmul(trace.y, ckpt.head);
  return trace;
}

// Accumulates parameter gradients for one sequence into `grads` given the
// upstream logit gradient.
void backward_sequence(const ModelCheckpoint& ckpt, std::span<const int> tokens,
                       const SeqTrace& trace, const DenseMatrix& dlogits, ModelGrads& grads) {
  const ModelConfig& cfg = ckpt.config;
  const std::size_t t_len = tokens.size();
  const std::size_t d = cfg.d_model;
  const std::size_t heads = cfg.n_heads;
  const std::size_t dh = cfg.head_dim();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  const RopeTable rope(t_len, dh);

  // head: logits = y * head
  {
    const DenseMatrix dhead = matmul(transpose(trace.y), dlogits);
    grads.head = add(grads.head, dhead);
  }
  DenseMatrix dy = matmul(dlogits, transpose(ckpt.head));

  DenseMatrix dx(t_len, d);
  rms_norm_backward(trace.x_final, ckpt.final_norm, trace.rms_final, dy, dx, grads.final_norm);

  for (std::size_t li = cfg.n_layers; li-- > 0;) {
    const LayerParams& lp = ckpt.layers[li];
    const LayerTrace& lt = trace.layers[li];
    LayerParams& lg = grads.layers[li];

    // FFN: x_out = x_mid + silu(normed2*w_up)*w_down
    DenseMatrix dx_mid = dx;  // residual branch
    lg.w_down = add(lg.w_down, matmul(transpose(lt.ff_act), dx));
    DenseMatrix dff = matmul(dx, transpose(lp.w_down));
    for (std::size_t i = 0; i < dff.data().size(); ++i) {
      dff.data()[i] *= silu_grad(lt.ff_pre.data()[i]);
    }
    lg.w_up = add(lg.w_up, matmul(transpose(lt.normed2), dff));
    const DenseMatrix dnormed2 = matmul(dff, transpose(lp.w_up));
    rms_norm_backward(lt.x_mid, lp.norm2, lt.rms2, dnormed2, dx_mid, lg.norm2);

    // attention: x_mid = x_in + ctx*wo
    DenseMatrix dx_in = dx_mid;  // residual branch
    lg.wo = add(lg.wo, matmul(transpose(lt.ctx), dx_mid));
    const DenseMatrix dctx = matmul(dx_mid, transpose(lp.wo));

    DenseMatrix dq(t_len, d), dk(t_len, d), dv(t_len, d);
    std::vector<double> dprobs(t_len);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t t = 0; t < t_len; ++t) {
        const double* prow = lt.probs.row_ptr(h * t_len + t);
        const double* dctx_row = dctx.row_ptr(t) + off;

        double dot_pd = 0.0;
        for (std::size_t s = 0; s <= t; ++s) {
          const double* vrow = lt.v.row_ptr(s) + off;
          double g = 0.0;
          for (std::size_t j = 0; j < dh; ++j) g += dctx_row[j] * vrow[j];
          dprobs[s] = g;
          dot_pd += prow[s] * g;
          double* dvrow = dv.row_ptr(s) + off;
          for (std::size_t j = 0; j < dh; ++j) dvrow[j] += prow[s] * dctx_row[j];
        }
        double* dqrow = dq.row_ptr(t) + off;
        const double* qrow = lt.q.row_ptr(t) + off;
        for (std::size_t s = 0; s <= t; ++s) {
          const double dscore = prow[s] * (dprobs[s] - dot_pd) * inv_sqrt_dh;
          if (dscore == 0.0) continue;
          const double* krow = lt.k.row_ptr(s) + off;
          double* dkrow = dk.row_ptr(s) + off;
          for (std::size_t j = 0; j < dh; ++j) {
            dqrow[j] += dscore * krow[j];
            dkrow[j] += dscore * qrow[j];
          }
        }
      }
    }
    apply_rope(dq, rope, heads, dh, true);
    apply_rope(dk, rope, heads, dh, true);

    lg.wq = add(lg.wq, matmul(transpose(lt.normed1), dq));
    lg.wk = add(lg.wk, matmul(transpose(lt.normed1), dk));
    lg.wv = add(lg.wv, matmul(transpose(lt.normed1), dv));
    DenseMatrix dnormed1 = matmul(dq, transpose(lp.wq));
    dnormed1 = add(dnormed1, matmul(dk, transpose(lp.wk)));
    dnormed1 = add(dnormed1, matmul(dv, transpose(lp.wv)));
    rms_norm_backward(lt.x_in, lp.norm1, lt.rms1, dnormed1, dx_in, lg.norm1);

    dx = std::move(dx_in);
  }

  for (std::size_t t = 0; t < t_len; ++t) {
    double* erow = grads.embedding.row_ptr(static_cast<std::size_t>(tokens[t]));
    const double* dxr = dx.row_ptr(t);
    for (std::size_t j = 0; j < d; ++j) erow[j] += dxr[j];
  }
}

void snap_vector_f32(std::vector<double>& v) {
  for (double& x : v) x = static_cast<double>(static_cast<float>(x));
}

void snap_matrix_f32(DenseMatrix& m) { snap_vector_f32(m.data()); }

DenseMatrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  DenseMatrix m(rows, cols);
  for (double& v : m.data()) v = stddev * rng.normal();
  return m;
}

std::string layer_prefix(std::size_t i) { return "layers." + std::to_string(i) + "."; }

}  // namespace

// ---------------------------------------------------------------------------
// Config / checkpoint validation
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
  if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 ||
      max_seq_len < 1) {
    throw Error::invalid_input("all model config counts must be >= 1");
  }
  if (d_model % n_heads != 0) {
    throw Error::invalid_input("d_model must be divisible by n_heads");
  }
  if (head_dim() % 2 != 0) {
    throw Error::invalid_input("head dimension must be even (rotary pairs)");
  }
}

bool LayerParams::same_shape(const LayerParams& other) const {
  return wq.same_shape(other.wq) && wk.same_shape(other.wk) && wv.same_shape(other.wv) &&
         wo.same_shape(other.wo) && w_up.same_shape(other.w_up) &&
         w_down.same_shape(other.w_down) && norm1.size() == other.norm1.size() &&
         norm2.size() == other.norm2.size();
}

void ModelCheckpoint::validate() const {
  config.validate();
  if (layers.size() != config.n_layers) {
    throw Error::invalid_input("layer list length does not match config.n_layers");
  }
  const std::size_t d = config.d_model;
  auto expect = [](const DenseMatrix& m, std::size_t r, std::size_t c, const char* name) {
    if (m.rows() != r || m.cols() != c) {
      throw Error::invalid_input(std::string("unexpected shape for ") + name);
    }
  };
  expect(embedding, config.vocab_size, d, "embedding");
  expect(head, d, config.vocab_size, "head");
  if (final_norm.size() != d) throw Error::invalid_input("unexpected final_norm length");
  for (const LayerParams& lp : layers) {
    expect(lp.wq, d, d, "wq");
    expect(lp.wk, d, d, "wk");
    expect(lp.wv, d, d, "wv");
    expect(lp.wo, d, d, "wo");
    expect(lp.w_up, d, config.d_ff, "w_up");
    expect(lp.w_down, config.d_ff, d, "w_down");
    if (lp.norm1.size() != d || lp.norm2.size() != d) {
      throw Error::invalid_input("unexpected norm scale length");
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

void save_checkpoint(const ModelCheckpoint& ckpt, const std::string& path) {
  ckpt.validate();
  TensorStore store;
  auto& meta = store.meta();
  meta["kind"] = "model";
  meta["vocab_size"] = ckpt.config.vocab_size;
  meta["d_model"] = ckpt.config.d_model;
  meta["n_layers"] = ckpt.config.n_layers;
  meta["n_heads"] = ckpt.config.n_heads;
  meta["d_ff"] = ckpt.config.d_ff;
  meta["max_seq_len"] = ckpt.config.max_seq_len;
  meta["seed"] = ckpt.config.seed;

  store.put_f64("embed.weight", {ckpt.config.vocab_size, ckpt.config.d_model},
                ckpt.embedding.data());
  for (std::size_t i = 0; i < ckpt.layers.size(); ++i) {
    const LayerParams& lp = ckpt.layers[i];
    const std::string p = layer_prefix(i);
    const std::size_t d = ckpt.config.d_model;
    store.put_f64(p + "attn.wq", {d, d}, lp.wq.data());
    store.put_f64(p + "attn.wk", {d, d}, lp.wk.data());
    store.put_f64(p + "attn.wv", {d, d}, lp.wv.data());
    store.put_f64(p + "attn.wo", {d, d}, lp.wo.data());
    store.put_f64(p + "ffn.up", {d, ckpt.config.d_ff}, lp.w_up.data());
    store.put_f64(p + "ffn.down", {ckpt.config.d_ff, d}, lp.w_down.data());
    store.put_f64(p + "norm1.scale", {d}, lp.norm1);
    store.put_f64(p + "norm2.scale", {d}, lp.norm2);
  }
  store.put_f64("final_norm.scale", {ckpt.config.d_model}, ckpt.final_norm);
  store.put_f64("head.weight", {ckpt.config.d_model, ckpt.config.vocab_size},
                ckpt.head.data());
  store.save(path);
}

ModelCheckpoint load_checkpoint(const std::string& path) {
  const TensorStore store = TensorStore::load(path);
  const nlohmann::json& meta = store.meta();
  for (const char* key :
       {"kind", "vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len", "seed"}) {
    if (!meta.contains(key)) {
      throw Error::format(std::string("checkpoint meta missing key '") + key + "'");
    }
  }
  if (meta["kind"].get<std::string>() != "model") {
    throw Error::format("container is not a model checkpoint");
  }

  ModelCheckpoint ckpt;
  ckpt.config.vocab_size = meta["vocab_size"].get<std::size_t>();
  ckpt.config.d_model = meta["d_model"].get<std::size_t>();
  ckpt.config.n_layers = meta["n_layers"].get<std::size_t>();
  ckpt.config.n_heads = meta["n_heads"].get<std::size_t>();
  ckpt.config.d_ff = meta["d_ff"].get<std::size_t>();
  ckpt.config.max_seq_len = meta["max_seq_len"].get<std::size_t>();
  ckpt.config.seed = meta["seed"].get<std::uint64_t>();
  ckpt.config.validate();

  auto take_matrix = [&store](const std::string& name, std::size_t r, std::size_t c) {
    const StoredTensor& t = store.get(name);
    if (t.shape.size() != 2 || t.shape[0] != r || t.shape[1] != c) {
      throw Error::format("shape mismatch for tensor '" + name + "'");
    }
    return DenseMatrix::from_data(r, c, store.get_f64(name));
  };
  auto take_vector = [&store](const std::string& name, std::size_t n) {
    const StoredTensor& t = store.get(name);
    if (t.shape.size() != 1 || t.shape[0] != n) {
      throw Error::format("shape mismatch for tensor '" + name + "'");
    }
    return store.get_f64(name);
  };

  const std::size_t d = ckpt.config.d_model;
  ckpt.embedding = take_matrix("embed.weight", ckpt.config.vocab_size, d);
  ckpt.layers.resize(ckpt.config.n_layers);
  for (std::size_t i = 0; i < ckpt.config.n_layers; ++i) {
    const std::string p = layer_prefix(i);
    LayerParams& lp = ckpt.layers[i];
    lp.wq = take_matrix(p + "attn.wq", d, d);
    lp.wk = take_matrix(p + "attn.wk", d, d);
    lp.wv = take_matrix(p + "attn.wv", d, d);
    lp.wo = take_matrix(p + "attn.wo", d, d);
    lp.w_up = take_matrix(p + "ffn.up", d, ckpt.config.d_ff);
    lp.w_down = take_matrix(p + "ffn.down", ckpt.config.d_ff, d);
    lp.norm1 = take_vector(p + "norm1.scale", d);
    lp.norm2 = take_vector(p + "norm2.scale", d);
  }
  ckpt.final_norm = take_vector("final_norm.scale", d);
  ckpt.head = take_matrix("head.weight", d, ckpt.config.vocab_size);
  ckpt.validate();
  return ckpt;
}

void snap_to_f32(ModelCheckpoint& ckpt) {
  snap_matrix_f32(ckpt.embedding);
  for (LayerParams& lp : ckpt.layers) {
    snap_matrix_f32(lp.wq);
    snap_matrix_f32(lp.wk);
    snap_matrix_f32(lp.wv);
    snap_matrix_f32(lp.wo);
    snap_matrix_f32(lp.w_up);
    snap_matrix_f32(lp.w_down);
    snap_vector_f32(lp.norm1);
    snap_vector_f32(lp.norm2);
  }
  snap_vector_f32(ckpt.final_norm);
  snap_matrix_f32(ckpt.head);
}

// ---------------------------------------------------------------------------
// Init / forward / evaluate / train
// ---------------------------------------------------------------------------

ModelCheckpoint init_model(const ModelConfig& config) {
  config.validate();
  Rng rng(config.seed ^ 0x6d6f64656cULL);

  const std::size_t d = config.d_model;
  const double base_std = 0.02;
  const double out_std = base_std / std::sqrt(static_cast<double>(config.n_layers));
  // Larger attention-logit projections break the rotary phase symmetry early;
  // the residual branch output stays small through wo / w_down.
  const double qk_std = 0.08;

  ModelCheckpoint ckpt;
  ckpt.config = config;
  ckpt.embedding = random_matrix(rng, config.vocab_size, d, base_std);
  ckpt.layers.resize(config.n_layers);
  for (LayerParams& lp : ckpt.layers) {
    lp.wq = random_matrix(rng, d, d, qk_std);
    lp.wk = random_matrix(rng, d, d, qk_std);
    lp.wv = random_matrix(rng, d, d, base_std);
    lp.wo = random_matrix(rng, d, d, out_std);
    lp.w_up = random_matrix(rng, d, config.d_ff, qk_std);
    lp.w_down = random_matrix(rng, config.d_ff, d, out_std);
    lp.norm1.assign(d, 1.0);
    lp.norm2.assign(d, 1.0);
  }
  ckpt.final_norm.assign(d, 1.0);
  ckpt.head = random_matrix(rng, d, config.vocab_size, base_std);
  snap_to_f32(ckpt);
  return ckpt;
}

CaptureResult forward_with_capture(const ModelCheckpoint& ckpt,
                                   const std::vector<std::vector<int>>& batch, PoolMode pool) {
  ckpt.config.validate();
  if (batch.empty()) throw Error::invalid_input("empty batch");
  const std::size_t n = batch.size();
  const std::size_t d = ckpt.config.d_model;
  const std::size_t n_layers = ckpt.config.n_layers;

  CaptureResult result;
  result.logits = DenseMatrix(n, ckpt.config.vocab_size);
  result.activations.resize(n_layers + 1);
  for (std::size_t l = 0; l <= n_layers; ++l) {
    result.activations[l].layer_index = l;
    result.activations[l].data = DenseMatrix(n, d);
  }

  parallel_for(n, [&](std::size_t i) {
    const SeqTrace trace = forward_sequence(ckpt, batch[i]);
    const std::size_t t_len = batch[i].size();
    for (std::size_t l = 0; l <= n_layers; ++l) {
      const DenseMatrix& states =
          (l < n_layers) ? trace.layers[l].x_in : trace.x_final;
      double* out = result.activations[l].data.row_ptr(i);
      if (pool == PoolMode::LastToken) {
        const double* last = states.row_ptr(t_len - 1);
        std::copy(last, last + d, out);
      } else {
        for (std::size_t t = 0; t < t_len; ++t) {
          const double* row = states.row_ptr(t);
          for (std::size_t j = 0; j < d; ++j) out[j] += row[j];
        }
        for (std::size_t j = 0; j < d; ++j) out[j] /= static_cast<double>(t_len);
      }
    }
    const double* logits_last = trace.logits.row_ptr(t_len - 1);
    std::copy(logits_last, logits_last + ckpt.config.vocab_size, result.logits.row_ptr(i));
  });
  return result;
}

DenseMatrix forward_logits(const ModelCheckpoint& ckpt,
                           const std::vector<std::vector<int>>& batch) {
  return forward_with_capture(ckpt, batch).logits;
}

EvalMetrics evaluate(const ModelCheckpoint& ckpt, const ToyTask& task, std::size_t n_batches,
                     std::size_t batch_size) {
  ckpt.config.validate();
  if (task.vocab_size != ckpt.config.vocab_size) {
    throw Error::invalid_input("task vocab " + std::to_string(task.vocab_size) +
                               " does not match model vocab " +
                               std::to_string(ckpt.config.vocab_size));
  }
  if (task.seq_len > ckpt.config.max_seq_len) {
    throw Error::invalid_input("task seq_len exceeds model max_seq_len");
  }
  if (n_batches == 0 || batch_size == 0) {
    throw Error::invalid_input("evaluate needs n_batches >= 1 and batch_size >= 1");
  }

  TaskStream stream(task, kEvalSalt);
  std::vector<std::vector<int>> samples;
  samples.reserve(n_batches * batch_size);
  for (std::size_t b = 0; b < n_batches; ++b) {
    for (auto& s : stream.next_batch(batch_size)) samples.push_back(std::move(s));
  }

  const std::size_t n = samples.size();
  std::vector<double> loss_sums(n, 0.0);
  std::vector<std::size_t> hits(n, 0);
  const std::size_t vocab = ckpt.config.vocab_size;

  parallel_for(n, [&](std::size_t i) {
    const std::vector<int>& sample = samples[i];
    const std::span<const int> visible(sample.data(), sample.size() - 1);
    const SeqTrace trace = forward_sequence(ckpt, visible);
    double loss = 0.0;
    std::size_t correct = 0;
    for (std::size_t t = 0; t < visible.size(); ++t) {
      const double* logit = trace.logits.row_ptr(t);
      const int target = sample[t + 1];
      double max_logit = logit[0];
      std::size_t argmax = 0;
      for (std::size_t vtok = 1; vtok < vocab; ++vtok) {
        if (logit[vtok] > max_logit) {
          max_logit = logit[vtok];
          argmax = vtok;
        }
      }
      double denom = 0.0;
      for (std::size_t vtok = 0; vtok < vocab; ++vtok) denom += std::exp(logit[vtok] - max_logit);
      loss += std::log(denom) - (logit[static_cast<std::size_t>(target)] - max_logit);
      if (argmax == static_cast<std::size_t>(target)) ++correct;
    }
    loss_sums[i] = loss;
    hits[i] = correct;
  });

  const std::size_t predictions = n * (samples.front().size() - 1);
  EvalMetrics metrics;
  for (std::size_t i = 0; i < n; ++i) {
    metrics.cross_entropy += loss_sums[i];
    metrics.next_token_accuracy += static_cast<double>(hits[i]);
  }
  metrics.cross_entropy /= static_cast<double>(predictions);
  metrics.next_token_accuracy /= static_cast<double>(predictions);
  return metrics;
}

ModelGrads zero_grads(const ModelCheckpoint& ckpt) {
  ModelGrads g;
  g.embedding = DenseMatrix(ckpt.embedding.rows(), ckpt.embedding.cols());
  g.layers.resize(ckpt.layers.size());
  for (std::size_t i = 0; i < ckpt.layers.size(); ++i) {
    const LayerParams& lp = ckpt.layers[i];
    LayerParams& lg = g.layers[i];
    lg.wq = DenseMatrix(lp.wq.rows(), lp.wq.cols());
    lg.wk = DenseMatrix(lp.wk.rows(), lp.wk.cols());
    lg.wv = DenseMatrix(lp.wv.rows(), lp.wv.cols());
    lg.wo = DenseMatrix(lp.wo.rows(), lp.wo.cols());
    lg.w_up = DenseMatrix(lp.w_up.rows(), lp.w_up.cols());
    lg.w_down = DenseMatrix(lp.w_down.rows(), lp.w_down.cols());
    lg.norm1.assign(lp.norm1.size(), 0.0);
    lg.norm2.assign(lp.norm2.size(), 0.0);
  }
  g.final_norm.assign(ckpt.final_norm.size(), 0.0);
  g.head = DenseMatrix(ckpt.head.rows(), ckpt.head.cols());
  return g;
}

double loss_and_gradients(const ModelCheckpoint& ckpt,
                          const std::vector<std::vector<int>>& samples, ModelGrads* grads) {
  if (samples.empty()) throw Error::invalid_input("empty sample batch");
  std::size_t total_positions = 0;
  for (const auto& s : samples) {
    if (s.size() < 2) throw Error::invalid_input("samples need at least 2 tokens");
    total_positions += s.size() - 1;
  }

  const std::size_t vocab = ckpt.config.vocab_size;
  double total_loss = 0.0;
  for (const std::vector<int>& sample : samples) {
    const std::span<const int> visible(sample.data(), sample.size() - 1);
    const SeqTrace trace = forward_sequence(ckpt, visible);
    DenseMatrix dlogits(visible.size(), vocab);
    for (std::size_t t = 0; t < visible.size(); ++t) {
      const double* logit = trace.logits.row_ptr(t);
      const auto target = static_cast<std::size_t>(sample[t + 1]);
      double max_logit = logit[0];
      for (std::size_t vtok = 1; vtok < vocab; ++vtok) max_logit = std::max(max_logit, logit[vtok]);
      double denom = 0.0;
      for (std::size_t vtok = 0; vtok < vocab; ++vtok) denom += std::exp(logit[vtok] - max_logit);
      total_loss += std::log(denom) - (logit[target] - max_logit);
      if (grads != nullptr) {
        double* drow = dlogits.row_ptr(t);
        for (std::size_t vtok = 0; vtok < vocab; ++vtok) {
          drow[vtok] = std::exp(logit[vtok] - max_logit) / denom /
                       static_cast<double>(total_positions);
        }
        drow[target] -= 1.0 / static_cast<double>(total_positions);
      }
    }
    if (grads != nullptr) backward_sequence(ckpt, visible, trace, dlogits, *grads);
  }
  return total_loss / static_cast<double>(total_positions);
}

namespace {

double grad_sq_norm(const ModelGrads& g) {
  double sum = 0.0;
  auto acc_m = [&sum](const DenseMatrix& m) {
    for (double v : m.data()) sum += v * v;
  };
  auto acc_v = [&sum](const std::vector<double>& v) {
    for (double x : v) sum += x * x;
  };
  acc_m(g.embedding);
  for (const LayerParams& lg : g.layers) {
    acc_m(lg.wq);
    acc_m(lg.wk);
    acc_m(lg.wv);
    acc_m(lg.wo);
    acc_m(lg.w_up);
    acc_m(lg.w_down);
    acc_v(lg.norm1);
    acc_v(lg.norm2);
  }
  acc_v(g.final_norm);
  acc_m(g.head);
  return sum;
}

void sgd_update(ModelCheckpoint& ckpt, const ModelGrads& g, double step) {
  auto upd_m = [step](DenseMatrix& p, const DenseMatrix& gm) {
    for (std::size_t i = 0; i < p.data().size(); ++i) p.data()[i] -= step * gm.data()[i];
  };
  auto upd_v = [step](std::vector<double>& p, const std::vector<double>& gv) {
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= step * gv[i];
  };
  upd_m(ckpt.embedding, g.embedding);
  for (std::size_t i = 0; i < ckpt.layers.size(); ++i) {
    upd_m(ckpt.layers[i].wq, g.layers[i].wq);
    upd_m(ckpt.layers[i].wk, g.layers[i].wk);
    upd_m(ckpt.layers[i].wv, g.layers[i].wv);
    upd_m(ckpt.layers[i].wo, g.layers[i].wo);
    upd_m(ckpt.layers[i].w_up, g.layers[i].w_up);
    upd_m(ckpt.layers[i].w_down, g.layers[i].w_down);
    upd_v(ckpt.layers[i].norm1, g.layers[i].norm1);
    upd_v(ckpt.layers[i].norm2, g.layers[i].norm2);
  }
  upd_v(ckpt.final_norm, g.final_norm);
  upd_m(ckpt.head, g.head);
}

}  // namespace

TrainResult train_toy(const ModelConfig& config, const ToyTask& task, std::size_t steps,
                      double learning_rate, std::size_t batch_size) {
  config.validate();
  if (task.vocab_size != config.vocab_size) {
    throw Error::invalid_input("task vocab does not match model vocab");
  }
  if (task.seq_len > config.max_seq_len) {
    throw Error::invalid_input("task seq_len exceeds model max_seq_len");
  }

  TrainResult result;
  result.model = init_model(config);
  if (steps == 0) return result;

  TaskStream stream(task, kTrainSalt);
  result.step_losses.reserve(steps);
  for (std::size_t step = 0; step < steps; ++step) {
    const auto batch = stream.next_batch(batch_size);
    ModelGrads grads = zero_grads(result.model);
    const double loss = loss_and_gradients(result.model, batch, &grads);
    if (!std::isfinite(loss)) {
      throw Error::training_diverged("training loss became non-finite at step " +
                                         std::to_string(step),
                                     step);
    }
    result.step_losses.push_back(loss);

    const double norm = std::sqrt(grad_sq_norm(grads));
    const double clip = norm > kGradClipNorm ? kGradClipNorm / norm : 1.0;
    sgd_update(result.model, grads, learning_rate * clip);
  }

  const std::size_t window = std::min<std::size_t>(100, result.step_losses.size());
  double tail = 0.0;
  for (std::size_t i = result.step_losses.size() - window; i < result.step_losses.size(); ++i) {
    tail += result.step_losses[i];
  }
  result.final_loss = tail / static_cast<double>(window);

  snap_to_f32(result.model);
  return result;
}

ModelCheckpoint plant_redundancy(const ModelCheckpoint& ckpt, std::size_t position,
                                 double epsilon, std::uint64_t salt) {
  ckpt.validate();
  if (position > ckpt.config.n_layers) {
    throw Error::invalid_input("plant position " + std::to_string(position) +
                               " out of range (n_layers=" + std::to_string(ckpt.config.n_layers) +
                               ")");
  }
  if (epsilon < 0.0) throw Error::invalid_input("plant epsilon must be >= 0");

  Rng rng(ckpt.config.seed ^ (0x706c616e74ULL + position * 0x9e3779b97f4a7c15ULL + salt));
  const std::size_t d = ckpt.config.d_model;

  LayerParams block;
  block.wq = random_matrix(rng, d, d, epsilon);
  block.wk = random_matrix(rng, d, d, epsilon);
  block.wv = random_matrix(rng, d, d, epsilon);
  block.wo = random_matrix(rng, d, d, epsilon);
  block.w_up = random_matrix(rng, d, ckpt.config.d_ff, epsilon);
  block.w_down = random_matrix(rng, ckpt.config.d_ff, d, epsilon);
  block.norm1.resize(d);
  block.norm2.resize(d);
  for (double& v : block.norm1) v = epsilon * rng.normal();
  for (double& v : block.norm2) v = epsilon * rng.normal();

  ModelCheckpoint out = ckpt;
  out.config.n_layers += 1;
  out.layers.insert(out.layers.begin() + static_cast<std::ptrdiff_t>(position),
                    std::move(block));
  snap_to_f32(out);
  return out;
}

// ---------------------------------------------------------------------------
// Parameter flattening
// ---------------------------------------------------------------------------

std::size_t layer_parameter_count(const LayerParams& layer) {
  return layer.wq.data().size() + layer.wk.data().size() + layer.wv.data().size() +
         layer.wo.data().size() + layer.w_up.data().size() + layer.w_down.data().size() +
         layer.norm1.size() + layer.norm2.size();
}

std::size_t parameter_count(const ModelCheckpoint& ckpt) {
  std::size_t n = ckpt.embedding.data().size() + ckpt.final_norm.size() + ckpt.head.data().size();
  for (const LayerParams& lp : ckpt.layers) n += layer_parameter_count(lp);
  return n;
}

namespace {

template <typename Fn>
void for_each_layer_tensor(const LayerParams& layer, Fn&& fn) {
  fn(layer.wq.data());
  fn(layer.wk.data());
  fn(layer.wv.data());
  fn(layer.wo.data());
  fn(layer.w_up.data());
  fn(layer.w_down.data());
  fn(layer.norm1);
  fn(layer.norm2);
}

}  // namespace

std::vector<double> flatten_layer(const LayerParams& layer) {
  std::vector<double> out;
  out.reserve(layer_parameter_count(layer));
  for_each_layer_tensor(layer, [&out](const std::vector<double>& v) {
    out.insert(out.end(), v.begin(), v.end());
  });
  return out;
}

std::vector<double> flatten_parameters(const ModelCheckpoint& ckpt) {
  std::vector<double> out;
  out.reserve(parameter_count(ckpt));
  out.insert(out.end(), ckpt.embedding.data().begin(), ckpt.embedding.data().end());
  for (const LayerParams& lp : ckpt.layers) {
    const std::vector<double> layer_flat = flatten_layer(lp);
    out.insert(out.end(), layer_flat.begin(), layer_flat.end());
  }
  out.insert(out.end(), ckpt.final_norm.begin(), ckpt.final_norm.end());
  out.insert(out.end(), ckpt.head.data().begin(), ckpt.head.data().end());
  return out;
}

void unflatten_parameters(std::span<const double> theta, ModelCheckpoint& ckpt) {
  if (theta.size() != parameter_count(ckpt)) {
    throw Error::invalid_input("parameter vector length mismatch");
  }
  std::size_t pos = 0;
  auto take_into = [&theta, &pos](std::vector<double>& dst) {
    std::copy(theta.begin() + static_cast<std::ptrdiff_t>(pos),
              theta.begin() + static_cast<std::ptrdiff_t>(pos + dst.size()), dst.begin());
    pos += dst.size();
  };
  take_into(ckpt.embedding.data());
  for (LayerParams& lp : ckpt.layers) {
    take_into(lp.wq.data());
    take_into(lp.wk.data());
    take_into(lp.wv.data());
    take_into(lp.wo.data());
    take_into(lp.w_up.data());
    take_into(lp.w_down.data());
    take_into(lp.norm1);
    take_into(lp.norm2);
  }
  take_into(ckpt.final_norm);
  take_into(ckpt.head.data());
}

std::vector<double> flatten_gradients(const ModelGrads& grads) {
  std::vector<double> out;
  out.insert(out.end(), grads.embedding.data().begin(), grads.embedding.data().end());
  for (const LayerParams& lg : grads.layers) {
    const std::vector<double> layer_flat = flatten_layer(lg);
    out.insert(out.end(), layer_flat.begin(), layer_flat.end());
  }
  out.insert(out.end(), grads.final_norm.begin(), grads.final_norm.end());
  out.insert(out.end(), grads.head.data().begin(), grads.head.data().end());
  return out;
}

}  // namespace layerfuse
