#pragma once

#include <string>
#include <utility>
#include <vector>

#include "lightattn/attention.hpp"
#include "lightattn/position.hpp"
#include "lightattn/rng.hpp"
#include "lightattn/tensor.hpp"

namespace lightattn {

// conv: two (5,5) convolutions with stride 2 in frequency and time, giving
// the 4-fold time down-sampling. linear: a per-frame projection with no
// temporal mixing (stride 1), used for permutation-control experiments.
enum class FrontendKind { conv, linear };

inline const char* frontend_name(FrontendKind k) {
  return k == FrontendKind::conv ? "conv" : "linear";
}

struct EncoderConfig {
  int n_layers = 4;
  AttentionConfig attention;
  int d_ff = 2048;
  double dropout = 0.1;
  bool share_layers = true;
  PositionConfig position;
  FrontendKind frontend = FrontendKind::conv;
  std::vector<int> conv_channels = {32, 64};
  int input_dim = 40;
  // Position rows receive the same dropout rate in training mode; flip this
  // off to exempt them.
  bool dropout_position = true;
  // Zero-position control runs keep the output shape but blank the six
  // concatenated position rows.
  bool concat_position = true;
  double ln_eps = 1e-6;

  int d_model() const { return attention.d_model(); }
  int downsample_factor() const { return frontend == FrontendKind::conv ? 4 : 1; }
  int output_length(int input_length) const {
    int L = input_length;
    if (frontend == FrontendKind::conv) L = (L + 3) / 4;
    return L;
  }

  void validate() const {
    if (n_layers < 1) throw ParameterError("encoder: n_layers must be >= 1");
    if (d_ff < 1) throw ParameterError("encoder: d_ff must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw ParameterError("encoder: dropout must be in [0, 1)");
    if (input_dim < 1) throw ParameterError("encoder: input_dim must be >= 1");
    if (frontend == FrontendKind::conv &&
        (conv_channels.size() != 2 || conv_channels[0] < 1 || conv_channels[1] < 1)) {
      throw ParameterError("encoder: conv_channels must list two positive counts");
    }
    attention.validate();
    position.validate();
  }
};

struct LayerWeights {
  AttentionWeights attn;
  Tensor ffn_w1;  // [d_ff x d_model]
  Tensor ffn_b1;  // [d_ff]
  Tensor ffn_w2;  // [d_model x d_ff]
  Tensor ffn_b2;  // [d_model]
  Tensor ln1_gamma, ln1_beta;  // [d_model]
  Tensor ln2_gamma, ln2_beta;  // [d_model]

  void collect(std::vector<std::pair<std::string, Tensor>>& out,
               const std::string& prefix) const {
    attn.collect(out, prefix + "attn.");
    out.emplace_back(prefix + "ffn_w1", ffn_w1);
    out.emplace_back(prefix + "ffn_b1", ffn_b1);
    out.emplace_back(prefix + "ffn_w2", ffn_w2);
    out.emplace_back(prefix + "ffn_b2", ffn_b2);
    out.emplace_back(prefix + "ln1_gamma", ln1_gamma);
    out.emplace_back(prefix + "ln1_beta", ln1_beta);
    out.emplace_back(prefix + "ln2_gamma", ln2_gamma);
    out.emplace_back(prefix + "ln2_beta", ln2_beta);
  }
};

// With share_layers one LayerWeights instance exists and is reused by every
// layer, so its gradients accumulate across the whole stack.
struct EncoderWeights {
  Tensor conv1_kernel, conv1_bias;
  Tensor conv2_kernel, conv2_bias;
  Tensor proj_w, proj_b;  // flattened conv (or raw frame) -> d_model
  std::vector<LayerWeights> layers;

  std::vector<std::pair<std::string, Tensor>> params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    if (conv1_kernel.defined()) {
      out.emplace_back("frontend.conv1_kernel", conv1_kernel);
      out.emplace_back("frontend.conv1_bias", conv1_bias);
      out.emplace_back("frontend.conv2_kernel", conv2_kernel);
      out.emplace_back("frontend.conv2_bias", conv2_bias);
    }
    out.emplace_back("frontend.proj_w", proj_w);
    out.emplace_back("frontend.proj_b", proj_b);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      layers[i].collect(out, "layer" + std::to_string(i) + ".");
    }
    return out;
  }

  const LayerWeights& layer(int index, const EncoderConfig& cfg) const {
    return cfg.share_layers ? layers[0] : layers[index];
  }
};

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor glorot(std::vector<int> shape, double fan_in, double fan_out,
                     Rng& rng, bool requires_grad = true) {
  double limit = std::sqrt(6.0 / (fan_in + fan_out));
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  for (auto& v : t.data()) v = rng.uniform(-limit, limit);
  return t;
}

inline Tensor glorot2d(int rows, int cols, Rng& rng) {
  return glorot({rows, cols}, cols, rows, rng);
}

inline Tensor small_uniform(std::vector<int> shape, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (auto& v : t.data()) v = rng.uniform(-0.1, 0.1);
  return t;
}

inline HeadWeights init_head(const AttentionConfig& acfg, Rng& rng) {
  HeadWeights h;
  h.q_c = glorot2d(acfg.d_head, acfg.d_model(), rng);
  h.k_c = glorot2d(acfg.d_head, acfg.d_model(), rng);
  h.v = glorot2d(acfg.d_head, acfg.d_model(), rng);
  if (acfg.variant == AttnVariant::concat_abs) {
    h.q_p = glorot2d(6, 6, rng);
    h.k_p = glorot2d(6, 6, rng);
  } else if (acfg.variant == AttnVariant::light && !acfg.share_position_params) {
    h.k_p = glorot2d(6, 6, rng);
    h.u = small_uniform({6}, rng);
  }
  return h;
}

inline AttentionWeights init_attention(const AttentionConfig& acfg, Rng& rng) {
  AttentionWeights w;
  for (int h = 0; h < acfg.n_heads; ++h) w.heads.push_back(init_head(acfg, rng));
  if (acfg.variant == AttnVariant::light && acfg.share_position_params) {
    w.shared_k_p = glorot2d(6, 6, rng);
    w.shared_u = small_uniform({6}, rng);
  }
  if (acfg.variant == AttnVariant::relative_dai) {
    w.dai_k_p = glorot2d(acfg.d_model(), acfg.d_p(), rng);
    w.dai_u = small_uniform({acfg.d_p()}, rng);
    w.dai_v = small_uniform({acfg.d_p()}, rng);
  }
  int concat_dim = acfg.n_heads * acfg.d_head;
  w.w_out = glorot2d(acfg.d_model(), concat_dim, rng);
  return w;
}

inline LayerWeights init_layer(const EncoderConfig& cfg, Rng& rng) {
  LayerWeights lw;
  lw.attn = init_attention(cfg.attention, rng);
  int d = cfg.d_model();
  lw.ffn_w1 = glorot2d(cfg.d_ff, d, rng);
  lw.ffn_b1 = Tensor::zeros({cfg.d_ff}, true);
  lw.ffn_w2 = glorot2d(d, cfg.d_ff, rng);
  lw.ffn_b2 = Tensor::zeros({d}, true);
  lw.ln1_gamma = Tensor::full({d}, 1.0, true);
  lw.ln1_beta = Tensor::zeros({d}, true);
  lw.ln2_gamma = Tensor::full({d}, 1.0, true);
  lw.ln2_beta = Tensor::zeros({d}, true);
  return lw;
}

// Frequency extent after the two stride-2 convolutions.
inline int conv_reduced_freq(int input_dim) {
  int f1 = (input_dim + 1) / 2;
  return (f1 + 1) / 2;
}

}  // namespace detail

// Glorot-uniform projections and kernels, zero biases, unit layer-norm gains,
// small-uniform relative vectors; the whole set is a pure function of seed.
inline EncoderWeights init_weights(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng = Rng::derive_from(seed, "encoder-init");
  EncoderWeights w;
  int d = cfg.d_model();
  if (cfg.frontend == FrontendKind::conv) {
    int c1 = cfg.conv_channels[0], c2 = cfg.conv_channels[1];
    w.conv1_kernel = detail::glorot({c1, 1, 5, 5}, 1 * 25, c1 * 25, rng);
    w.conv1_bias = Tensor::zeros({c1}, true);
    w.conv2_kernel = detail::glorot({c2, c1, 5, 5}, c1 * 25, c2 * 25, rng);
    w.conv2_bias = Tensor::zeros({c2}, true);
    int flat = c2 * detail::conv_reduced_freq(cfg.input_dim);
    w.proj_w = detail::glorot2d(d, flat, rng);
  } else {
    w.proj_w = detail::glorot2d(d, cfg.input_dim, rng);
  }
  w.proj_b = Tensor::zeros({d}, true);
  int distinct = cfg.share_layers ? 1 : cfg.n_layers;
  for (int i = 0; i < distinct; ++i) w.layers.push_back(detail::init_layer(cfg, rng));
  return w;
}

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

// Two (5,5)/stride-2 conv+ReLU stages, flattened and projected to d_model.
// Output time length is ceil(L/4).
inline Tensor conv_frontend(const Tensor& features, const EncoderWeights& w,
                            const EncoderConfig& cfg) {
  if (features.ndim() != 2 || features.rows() != cfg.input_dim) {
    throw DimensionError("conv_frontend: features must be [input_dim x L]");
  }
  const int F = features.rows(), L = features.cols();
  Tensor img = reshape(features, {1, F, L});
  Tensor c1 = relu(conv2d(img, w.conv1_kernel, w.conv1_bias, 2, 2));
  Tensor c2 = relu(conv2d(c1, w.conv2_kernel, w.conv2_bias, 2, 2));
  const auto& s = c2.shape();
  Tensor flat = reshape(c2, {s[0] * s[1], s[2]});
  return affine_cols(w.proj_w, flat, w.proj_b);
}

inline Tensor linear_frontend(const Tensor& features, const EncoderWeights& w,
                              const EncoderConfig& cfg) {
  if (features.ndim() != 2 || features.rows() != cfg.input_dim) {
    throw DimensionError("linear_frontend: features must be [input_dim x L]");
  }
  return affine_cols(w.proj_w, features, w.proj_b);
}

// Position inputs for one encoded length; the same instance feeds the
// attention of every layer.
inline PositionInputs build_position_inputs(const EncoderConfig& cfg, int length) {
  PositionInputs pos;
  // The banded layout always spans the full window radius, even when the
  // sequence is shorter; cover both.
  int radius = length - 1;
  if (cfg.attention.window) radius = std::max(radius, cfg.attention.radius());
  switch (cfg.attention.variant) {
    case AttnVariant::absolute:
      pos.p_abs = sinusoidal_position(length, cfg.d_model(), cfg.position.T).values;
      break;
    case AttnVariant::concat_abs:
      pos.p_abs = light_position(length, cfg.position).values;
      break;
    case AttnVariant::light:
      pos.p_rel = relative_position_block(radius, cfg.position);
      pos.rel_radius = radius;
      break;
    case AttnVariant::relative_dai:
      pos.p_rel = sinusoidal_relative_block(radius, cfg.attention.d_p(), cfg.position.T);
      pos.rel_radius = radius;
      break;
    case AttnVariant::none:
      break;
  }
  return pos;
}

namespace detail {
inline Tensor maybe_dropout(const Tensor& x, const EncoderConfig& cfg, bool training,
                            Rng* rng) {
  if (!training || cfg.dropout == 0.0) return x;
  if (!rng) throw ContractError("encoder: training with dropout requires an rng");
  return dropout(x, cfg.dropout, true, *rng);
}

inline PositionInputs position_dropout(const PositionInputs& pos, const EncoderConfig& cfg,
                                       bool training, Rng* rng) {
  if (!training || !cfg.dropout_position || cfg.dropout == 0.0) return pos;
  PositionInputs out = pos;
  if (pos.p_abs.defined()) out.p_abs = maybe_dropout(pos.p_abs, cfg, training, rng);
  if (pos.p_rel.defined()) out.p_rel = maybe_dropout(pos.p_rel, cfg, training, rng);
  return out;
}
}  // namespace detail

// One post-norm transformer layer:
//   y = LayerNorm(x + Dropout(MultiHead(x, p)))
//   z = LayerNorm(y + Dropout(W2 max(0, W1 y + b1) + b2))
inline Tensor encoder_layer(const Tensor& x, const PositionInputs& pos,
                            const LayerWeights& lw, const EncoderConfig& cfg,
                            bool training, Rng* rng = nullptr,
                            AttentionStats* stats = nullptr) {
  if (x.rows() != cfg.d_model()) {
    throw DimensionError("encoder_layer: x must be [d_model x L]");
  }
  PositionInputs p = detail::position_dropout(pos, cfg, training, rng);
  Tensor attn = multi_head(x, p, lw.attn, cfg.attention, stats);
  Tensor y = layer_norm(add(x, detail::maybe_dropout(attn, cfg, training, rng)),
                        lw.ln1_gamma, lw.ln1_beta, cfg.ln_eps);
  Tensor hidden = relu(affine_cols(lw.ffn_w1, y, lw.ffn_b1));
  Tensor ffn = affine_cols(lw.ffn_w2, hidden, lw.ffn_b2);
  return layer_norm(add(y, detail::maybe_dropout(ffn, cfg, training, rng)),
                    lw.ln2_gamma, lw.ln2_beta, cfg.ln_eps);
}

// Full encoder: frontend, n_layers (possibly shared) transformer layers with
// the same position inputs re-injected at every layer, then the light 6-row
// position matrix concatenated onto the output.
inline Tensor encode(const Tensor& features, const EncoderConfig& cfg,
                     const EncoderWeights& w, bool training, Rng* rng = nullptr,
                     AttentionStats* stats = nullptr) {
  cfg.validate();
  Tensor x = cfg.frontend == FrontendKind::conv ? conv_frontend(features, w, cfg)
                                                : linear_frontend(features, w, cfg);
  x = detail::maybe_dropout(x, cfg, training, rng);
  const int L = x.cols();
  PositionInputs pos = build_position_inputs(cfg, L);
  for (int layer = 0; layer < cfg.n_layers; ++layer) {
    x = encoder_layer(x, pos, w.layer(layer, cfg), cfg, training, rng, stats);
  }
  Tensor prow;
  if (cfg.concat_position) {
    prow = light_position(L, cfg.position).values;
    if (training && cfg.dropout_position && cfg.dropout > 0.0) {
      prow = detail::maybe_dropout(prow, cfg, training, rng);
    }
  } else {
    prow = Tensor::zeros({6, L});
  }
  return concat_rows(x, prow);
}

// ---------------------------------------------------------------------------
// Parameter arithmetic
// ---------------------------------------------------------------------------

inline std::int64_t count_encoder_parameters(const EncoderConfig& cfg) {
  cfg.validate();
  std::int64_t total = 0;
  int d = cfg.d_model();
  if (cfg.frontend == FrontendKind::conv) {
    int c1 = cfg.conv_channels[0], c2 = cfg.conv_channels[1];
    total += static_cast<std::int64_t>(c1) * 1 * 25 + c1;
    total += static_cast<std::int64_t>(c2) * c1 * 25 + c2;
    total += static_cast<std::int64_t>(d) * (c2 * detail::conv_reduced_freq(cfg.input_dim)) + d;
  } else {
    total += static_cast<std::int64_t>(d) * cfg.input_dim + d;
  }
  std::int64_t per_layer = count_parameters(cfg.attention) +
                           static_cast<std::int64_t>(cfg.d_ff) * d + cfg.d_ff +
                           static_cast<std::int64_t>(d) * cfg.d_ff + d + 4 * d;
  total += per_layer * (cfg.share_layers ? 1 : cfg.n_layers);
  return total;
}

}  // namespace lightattn
