#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "lce/ops.hpp"
#include "lce/rng.hpp"

// Bidirectional encoder with learned absolute positional embeddings, a
// post-layer-norm residual layout, and a tied-projection MLM head. Position
// indexing starts at 0 with no pad offset.

namespace lce {

constexpr int32_t kPadId = 0;
constexpr int32_t kUnkId = 1;
constexpr int32_t kMaskId = 2;
constexpr int32_t kSepId = 3;
constexpr int32_t kNumReservedIds = 4;
constexpr int32_t kIgnoreLabel = -100;

struct EncoderConfig {
  int64_t num_layers = 0;
  int64_t hidden = 0;
  int64_t num_heads = 0;
  int64_t ffn_dim = 0;  // 0 = default to 4*hidden
  int64_t vocab_size = 0;
  int64_t max_positions = 0;
  double layer_norm_eps = 1e-5;
  bool tie_output_embedding = true;

  int64_t ffn() const { return ffn_dim > 0 ? ffn_dim : 4 * hidden; }
  int64_t head_dim() const { return hidden / num_heads; }

  void validate() const {
    if (num_layers < 1 || num_layers > 99)
      throw ConfigError("config: num_layers must be in [1,99], got " + std::to_string(num_layers));
    if (hidden < 1) throw ConfigError("config: hidden must be positive");
    if (num_heads < 1 || hidden % num_heads != 0)
      throw ConfigError("config: hidden " + std::to_string(hidden) +
                        " not divisible by num_heads " + std::to_string(num_heads));
    if (vocab_size < kNumReservedIds)
      throw ConfigError("config: vocab_size must be >= " + std::to_string(kNumReservedIds));
    if (max_positions < 1) throw ConfigError("config: max_positions must be >= 1");
    if (layer_norm_eps <= 0) throw ConfigError("config: layer_norm_eps must be positive");
  }

  bool operator==(const EncoderConfig&) const = default;
};

struct ParamInfo {
  std::string name;
  Shape shape;
};

inline std::string layer_prefix(int64_t layer) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "layer.%02d.", int(layer));
  return buf;
}

// Canonical parameter census; the single source of truth shared by weight
// initialization, checkpoint validation, and parameter counting.
inline std::vector<ParamInfo> param_spec(const EncoderConfig& cfg) {
  const int64_t h = cfg.hidden, f = cfg.ffn(), v = cfg.vocab_size, p = cfg.max_positions;
  std::vector<ParamInfo> out;
  out.push_back({"embed.token", {v, h}});
  out.push_back({"embed.position", {p, h}});
  out.push_back({"embed.ln.gain", {h}});
  out.push_back({"embed.ln.bias", {h}});
  for (int64_t l = 0; l < cfg.num_layers; ++l) {
    const std::string pre = layer_prefix(l);
    for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"})
      out.push_back({pre + w, {h, h}});
    for (const char* b : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"})
      out.push_back({pre + b, {h}});
    out.push_back({pre + "attn.ln.gain", {h}});
    out.push_back({pre + "attn.ln.bias", {h}});
    out.push_back({pre + "ffn.w_in", {h, f}});
    out.push_back({pre + "ffn.b_in", {f}});
    out.push_back({pre + "ffn.w_out", {f, h}});
    out.push_back({pre + "ffn.b_out", {h}});
    out.push_back({pre + "ffn.ln.gain", {h}});
    out.push_back({pre + "ffn.ln.bias", {h}});
  }
  out.push_back({"mlm.dense.w", {h, h}});
  out.push_back({"mlm.dense.b", {h}});
  out.push_back({"mlm.ln.gain", {h}});
  out.push_back({"mlm.ln.bias", {h}});
  if (!cfg.tie_output_embedding) out.push_back({"mlm.decoder", {h, v}});
  out.push_back({"mlm.out_bias", {v}});
  return out;
}

struct ParamCounts {
  int64_t total = 0;
  int64_t excluding_embedding = 0;
};

// "Embedding" covers the token table, position table and embedding
// layer-norm; a tied output projection is not double-counted.
inline ParamCounts count_params(const EncoderConfig& cfg) {
  ParamCounts pc;
  for (const ParamInfo& info : param_spec(cfg)) {
    int64_t n = shape_numel(info.shape);
    pc.total += n;
    if (info.name.rfind("embed.", 0) != 0) pc.excluding_embedding += n;
  }
  return pc;
}

// Estimated forward-pass cost in GFLOPs, one multiply-accumulate counted as
// one operation. Covers the q/k/v/o projections, the FFN matmuls and the two
// attention matmuls; embeddings, layer norms, activations and the MLM head
// are excluded. With ffn = 4h this is L*(12*s*h^2 + 2*s^2*h).
inline double estimate_flops(const EncoderConfig& cfg, int64_t seq_len) {
  if (seq_len < 1) throw ValueError("estimate_flops: seq_len must be >= 1");
  const double s = double(seq_len), h = double(cfg.hidden), f = double(cfg.ffn());
  const double per_layer = 4.0 * s * h * h + 2.0 * s * h * f + 2.0 * s * s * h;
  return double(cfg.num_layers) * per_layer / 1e9;
}

template <typename T>
struct EncoderWeights {
  EncoderConfig config;
  std::map<std::string, Tensor<T>> params;

  Tensor<T>& at(const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw ValueError("missing parameter '" + name + "'");
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw ValueError("missing parameter '" + name + "'");
    return it->second;
  }

  void set_trainable(bool trainable) {
    for (auto& [name, t] : params) t.set_requires_grad(trainable);
  }

  EncoderWeights clone() const {
    EncoderWeights out;
    out.config = config;
    for (const auto& [name, t] : params) out.params.emplace(name, t.clone());
    return out;
  }
};

template <typename T>
EncoderWeights<T> init_weights(const EncoderConfig& cfg, uint64_t seed, double init_std = 0.02) {
  cfg.validate();
  EncoderWeights<T> w;
  w.config = cfg;
  for (const ParamInfo& info : param_spec(cfg)) {
    Tensor<T> t(info.shape);
    const bool is_gain = info.name.size() >= 7 &&
                         info.name.compare(info.name.size() - 7, 7, "ln.gain") == 0;
    const bool is_matrix = info.shape.size() == 2;
    if (is_gain) {
      std::fill(t.data().begin(), t.data().end(), T(1));
    } else if (is_matrix) {
      Rng rng(seed_child(seed, info.name));
      for (auto& v : t.data()) v = T(init_std * rng.next_normal());
    }  // biases stay zero
    w.params.emplace(info.name, std::move(t));
  }
  return w;
}

// Rows [0, P) of the positional table are copied bit-exactly; rows [P, new)
// are drawn from Normal(0, init_std^2) under the given seed. Every other
// parameter is carried over untouched.
template <typename T>
EncoderWeights<T> extend_positions(const EncoderWeights<T>& w, int64_t new_max_positions,
                                   double init_std, uint64_t seed) {
  const int64_t old_p = w.config.max_positions;
  if (new_max_positions <= old_p)
    throw ValueError("extend_positions: new max " + std::to_string(new_max_positions) +
                     " must exceed current " + std::to_string(old_p));
  EncoderWeights<T> out = w.clone();
  out.config.max_positions = new_max_positions;
  const int64_t h = w.config.hidden;
  Tensor<T> table(Shape{new_max_positions, h});
  const auto& old_data = w.at("embed.position").data();
  std::copy(old_data.begin(), old_data.end(), table.data().begin());
  Rng rng(seed);
  for (int64_t i = old_p * h; i < new_max_positions * h; ++i)
    table.data()[size_t(i)] = T(init_std * rng.next_normal());
  table.set_requires_grad(w.at("embed.position").requires_grad());
  out.params.erase("embed.position");
  out.params.emplace("embed.position", std::move(table));
  return out;
}

// Keeps the listed layers (strictly increasing indices) in order; embeddings
// and the MLM head are copied bit-exactly.
template <typename T>
EncoderWeights<T> slice_layers(const EncoderWeights<T>& w, const std::vector<int64_t>& keep) {
  if (keep.empty()) throw ValueError("slice_layers: keep list is empty");
  for (size_t i = 0; i < keep.size(); ++i) {
    if (keep[i] < 0 || keep[i] >= w.config.num_layers)
      throw ValueError("slice_layers: index " + std::to_string(keep[i]) + " outside [0," +
                       std::to_string(w.config.num_layers) + ")");
    if (i > 0 && keep[i] <= keep[i - 1])
      throw ValueError("slice_layers: indices must be strictly increasing, got " +
                       std::to_string(keep[i - 1]) + " then " + std::to_string(keep[i]));
  }
  EncoderConfig cfg = w.config;
  cfg.num_layers = int64_t(keep.size());
  EncoderWeights<T> out;
  out.config = cfg;
  for (const auto& [name, t] : w.params) {
    if (name.rfind("layer.", 0) != 0) out.params.emplace(name, t.clone());
  }
  for (size_t ni = 0; ni < keep.size(); ++ni) {
    const std::string old_pre = layer_prefix(keep[ni]);
    const std::string new_pre = layer_prefix(int64_t(ni));
    for (const auto& [name, t] : w.params) {
      if (name.rfind(old_pre, 0) == 0)
        out.params.emplace(new_pre + name.substr(old_pre.size()), t.clone());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward pass

template <typename T>
struct ModelBatch {
  int64_t batch = 0;
  int64_t seq = 0;
  std::vector<int32_t> tokens;      // batch*seq
  std::vector<int32_t> positions;   // batch*seq
  std::vector<Tensor<T>> masks;     // batch entries of [seq, seq]
  std::vector<uint8_t> row_valid;   // batch*seq; non-padding rows
  std::vector<int32_t> mlm_labels;  // optional batch*seq; kIgnoreLabel elsewhere
};

struct ForwardOptions {
  bool want_mlm_logits = false;
  bool want_all_layers = false;
};

// Activations are kept 2D as [batch*seq, h]; mlm_logits as [batch*seq, V].
template <typename T>
struct EncoderOutput {
  std::vector<Tensor<T>> layer_hidden;  // embedding output + one entry per layer
  Tensor<T> final_hidden;
  Tensor<T> mlm_logits;
};

template <typename T>
void validate_batch(const EncoderConfig& cfg, const ModelBatch<T>& batch) {
  const int64_t n = batch.batch * batch.seq;
  if (batch.batch < 1 || batch.seq < 1) throw ShapeError("forward: empty batch");
  if (int64_t(batch.tokens.size()) != n || int64_t(batch.positions.size()) != n)
    throw ShapeError("forward: tokens/positions length does not match batch*seq");
  if (int64_t(batch.masks.size()) != batch.batch)
    throw ShapeError("forward: expected one mask per batch item");
  for (const auto& m : batch.masks)
    if (m.shape() != Shape{batch.seq, batch.seq})
      throw ShapeError("forward: mask shape " + shape_str(m.shape()) + ", expected [" +
                       std::to_string(batch.seq) + "," + std::to_string(batch.seq) + "]");
  for (int64_t i = 0; i < n; ++i) {
    if (batch.tokens[size_t(i)] < 0 || batch.tokens[size_t(i)] >= cfg.vocab_size)
      throw BoundsError("forward: token id " + std::to_string(batch.tokens[size_t(i)]) +
                        " at batch " + std::to_string(i / batch.seq) + " position " +
                        std::to_string(i % batch.seq) + " outside vocab of " +
                        std::to_string(cfg.vocab_size));
    if (batch.positions[size_t(i)] < 0 || batch.positions[size_t(i)] >= cfg.max_positions)
      throw BoundsError("forward: position id " + std::to_string(batch.positions[size_t(i)]) +
                        " at batch " + std::to_string(i / batch.seq) + " position " +
                        std::to_string(i % batch.seq) + " outside table of " +
                        std::to_string(cfg.max_positions));
  }
}

template <typename T>
EncoderOutput<T> encoder_forward(Tape<T>* tape, const EncoderWeights<T>& w,
                                 const ModelBatch<T>& batch, const ForwardOptions& opts = {}) {
  const EncoderConfig& cfg = w.config;
  validate_batch(cfg, batch);
  const int64_t B = batch.batch, S = batch.seq, H = cfg.num_heads, d = cfg.head_dim();
  const T scale = T(1) / T(std::sqrt(double(d)));

  std::vector<int64_t> token_ids(batch.tokens.begin(), batch.tokens.end());
  std::vector<int64_t> position_ids(batch.positions.begin(), batch.positions.end());

  EncoderOutput<T> out;
  Tensor<T> tok = gather_rows(tape, w.at("embed.token"), token_ids);
  Tensor<T> pos = gather_rows(tape, w.at("embed.position"), position_ids);
  Tensor<T> x = layer_norm(tape, add(tape, tok, pos), w.at("embed.ln.gain"),
                           w.at("embed.ln.bias"), T(cfg.layer_norm_eps));
  if (opts.want_all_layers) out.layer_hidden.push_back(x);

  for (int64_t l = 0; l < cfg.num_layers; ++l) {
    const std::string pre = layer_prefix(l);
    Tensor<T> q = linear(tape, x, w.at(pre + "attn.wq"), w.at(pre + "attn.bq"));
    Tensor<T> k = linear(tape, x, w.at(pre + "attn.wk"), w.at(pre + "attn.bk"));
    Tensor<T> v = linear(tape, x, w.at(pre + "attn.wv"), w.at(pre + "attn.bv"));
    std::vector<Tensor<T>> pieces;
    pieces.reserve(size_t(B * H));
    for (int64_t b = 0; b < B; ++b) {
      for (int64_t hd = 0; hd < H; ++hd) {
        Tensor<T> qh = block_slice(tape, q, b * S, (b + 1) * S, hd * d, (hd + 1) * d);
        Tensor<T> kh = block_slice(tape, k, b * S, (b + 1) * S, hd * d, (hd + 1) * d);
        Tensor<T> vh = block_slice(tape, v, b * S, (b + 1) * S, hd * d, (hd + 1) * d);
        Tensor<T> scores = matmul(tape, qh, kh, false, true, scale);
        Tensor<T> probs = softmax_masked(tape, scores, batch.masks[size_t(b)]);
        pieces.push_back(row_mix(tape, probs, vh));
      }
    }
    Tensor<T> attn = assemble_heads(tape, pieces, B, S, H, d);
    attn = linear(tape, attn, w.at(pre + "attn.wo"), w.at(pre + "attn.bo"));
    x = layer_norm(tape, add(tape, x, attn), w.at(pre + "attn.ln.gain"),
                   w.at(pre + "attn.ln.bias"), T(cfg.layer_norm_eps));

    Tensor<T> ff = gelu(tape, linear(tape, x, w.at(pre + "ffn.w_in"), w.at(pre + "ffn.b_in")));
    ff = linear(tape, ff, w.at(pre + "ffn.w_out"), w.at(pre + "ffn.b_out"));
    x = layer_norm(tape, add(tape, x, ff), w.at(pre + "ffn.ln.gain"), w.at(pre + "ffn.ln.bias"),
                   T(cfg.layer_norm_eps));
    if (opts.want_all_layers) out.layer_hidden.push_back(x);
  }
  out.final_hidden = x;

  if (opts.want_mlm_logits) {
    Tensor<T> hmlm = gelu(tape, linear(tape, x, w.at("mlm.dense.w"), w.at("mlm.dense.b")));
    hmlm = layer_norm(tape, hmlm, w.at("mlm.ln.gain"), w.at("mlm.ln.bias"),
                      T(cfg.layer_norm_eps));
    Tensor<T> logits = cfg.tie_output_embedding
                           ? matmul(tape, hmlm, w.at("embed.token"), false, true)
                           : matmul(tape, hmlm, w.at("mlm.decoder"));
    out.mlm_logits = add_bias(tape, logits, w.at("mlm.out_bias"));
  }
  return out;
}

// MLM loss over labeled positions of the batch.
template <typename T>
Tensor<T> mlm_loss(Tape<T>* tape, const EncoderWeights<T>& w, const ModelBatch<T>& batch) {
  if (batch.mlm_labels.size() != batch.tokens.size())
    throw ShapeError("mlm_loss: batch carries no labels");
  ForwardOptions opts;
  opts.want_mlm_logits = true;
  EncoderOutput<T> out = encoder_forward(tape, w, batch, opts);
  return cross_entropy_rows(tape, out.mlm_logits, batch.mlm_labels, kIgnoreLabel);
}

// ---------------------------------------------------------------------------
// Task heads

enum class HeadKind { single_label, multi_label, regression };

struct HeadSpec {
  HeadKind kind = HeadKind::single_label;
  int64_t num_outputs = 2;  // classes / labels / 1 for regression

  void validate() const {
    if (kind == HeadKind::single_label && num_outputs < 2)
      throw ConfigError("head: single_label needs >= 2 classes");
    if (kind == HeadKind::multi_label && num_outputs < 1)
      throw ConfigError("head: multi_label needs >= 1 label");
    if (kind == HeadKind::regression && num_outputs != 1)
      throw ConfigError("head: regression output width must be 1");
  }
};

template <typename T>
struct TaskModel {
  EncoderWeights<T> encoder;
  HeadSpec head;
  std::map<std::string, Tensor<T>> head_params;

  TaskModel clone() const {
    TaskModel out;
    out.encoder = encoder.clone();
    out.head = head;
    for (const auto& [name, t] : head_params) out.head_params.emplace(name, t.clone());
    return out;
  }
};

// Adds a freshly initialized head (dense h->h, tanh, projection) reading the
// first-token final hidden state. Encoder weights are carried over bit-exact.
template <typename T>
TaskModel<T> attach_head(const EncoderWeights<T>& w, const HeadSpec& spec, uint64_t seed,
                         double init_std = 0.02) {
  spec.validate();
  TaskModel<T> model;
  model.encoder = w.clone();
  model.head = spec;
  const int64_t h = w.config.hidden;
  auto init_mat = [&](const std::string& name, Shape shape) {
    Tensor<T> t(std::move(shape));
    Rng rng(seed_child(seed, name));
    for (auto& v : t.data()) v = T(init_std * rng.next_normal());
    model.head_params.emplace(name, std::move(t));
  };
  init_mat("head.dense.w", {h, h});
  model.head_params.emplace("head.dense.b", Tensor<T>(Shape{h}));
  init_mat("head.out.w", {h, spec.num_outputs});
  model.head_params.emplace("head.out.b", Tensor<T>(Shape{spec.num_outputs}));
  return model;
}

// Head logits [batch, num_outputs] from the encoder's final hidden states.
template <typename T>
Tensor<T> head_forward(Tape<T>* tape, TaskModel<T>& model, const Tensor<T>& final_hidden,
                       int64_t batch, int64_t seq) {
  std::vector<int64_t> first_rows(size_t(batch));
  for (int64_t b = 0; b < batch; ++b) first_rows[size_t(b)] = b * seq;
  Tensor<T> cls = gather_rows(tape, final_hidden, first_rows);
  Tensor<T> z = tanh_act(
      tape, linear(tape, cls, model.head_params.at("head.dense.w"),
                   model.head_params.at("head.dense.b")));
  return linear(tape, z, model.head_params.at("head.out.w"), model.head_params.at("head.out.b"));
}

}  // namespace lce
