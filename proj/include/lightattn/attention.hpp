#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lightattn/position.hpp"
#include "lightattn/tensor.hpp"

namespace lightattn {

// The four position parameterizations under comparison, plus a content-only
// control with no position signal at all.
enum class AttnVariant { absolute, relative_dai, concat_abs, light, none };

inline const char* variant_name(AttnVariant v) {
  switch (v) {
    case AttnVariant::absolute: return "absolute";
    case AttnVariant::relative_dai: return "relative_dai";
    case AttnVariant::concat_abs: return "concat_abs";
    case AttnVariant::light: return "light";
    case AttnVariant::none: return "none";
  }
  return "?";
}

inline AttnVariant variant_from_name(const std::string& s) {
  if (s == "absolute") return AttnVariant::absolute;
  if (s == "relative_dai") return AttnVariant::relative_dai;
  if (s == "concat_abs") return AttnVariant::concat_abs;
  if (s == "light") return AttnVariant::light;
  if (s == "none") return AttnVariant::none;
  throw ParameterError("unknown attention variant: " + s);
}

struct AttentionConfig {
  AttnVariant variant = AttnVariant::light;
  int n_heads = 8;
  int d_head = 64;
  // Light/concat position width is fixed at 6; the additive relative baseline
  // uses d_p = d_model unless overridden.
  int d_p_override = 0;
  std::optional<int> window = 5;
  // When set, the light K_p/u pair is shared by all heads instead of per-head.
  bool share_position_params = false;
  // Windowed runs normally use the banded layout; tests flip this to compare
  // against the masked full computation.
  bool banded = true;

  int d_model() const { return n_heads * d_head; }
  int d_p() const {
    switch (variant) {
      case AttnVariant::light:
      case AttnVariant::concat_abs: return 6;
      case AttnVariant::relative_dai: return d_p_override > 0 ? d_p_override : d_model();
      case AttnVariant::absolute: return d_model();
      case AttnVariant::none: return 0;
    }
    return 0;
  }
  int radius() const { return window ? (*window - 1) / 2 : -1; }

  void validate() const {
    if (n_heads < 1 || d_head < 1) {
      throw ParameterError("attention: heads and d_head must be >= 1");
    }
    if (window && (*window < 1 || *window % 2 == 0)) {
      throw ParameterError("attention window must be odd and >= 1");
    }
  }
};

// Per-head trainable tensors. Fields not demanded by the variant stay empty.
struct HeadWeights {
  Tensor q_c;  // [d_head x d_model]
  Tensor k_c;  // [d_head x d_model]
  Tensor v;    // [d_head x d_model]
  Tensor q_p;  // concat_abs: [6 x 6]
  Tensor k_p;  // light / concat_abs: [6 x 6]
  Tensor u;    // light: [6]
};

struct AttentionWeights {
  std::vector<HeadWeights> heads;
  Tensor w_out;       // [d_model x n_heads*d_head]
  Tensor dai_k_p;     // relative_dai, shared across heads: [d_model x d_p]
  Tensor dai_u;       // [d_p]
  Tensor dai_v;       // [d_p]
  Tensor shared_k_p;  // light with share_position_params: [6 x 6]
  Tensor shared_u;    // [6]

  void collect(std::vector<std::pair<std::string, Tensor>>& out,
               const std::string& prefix) const {
    for (std::size_t h = 0; h < heads.size(); ++h) {
      std::string hp = prefix + "head" + std::to_string(h) + ".";
      out.emplace_back(hp + "q_c", heads[h].q_c);
      out.emplace_back(hp + "k_c", heads[h].k_c);
      out.emplace_back(hp + "v", heads[h].v);
      if (heads[h].q_p.defined()) out.emplace_back(hp + "q_p", heads[h].q_p);
      if (heads[h].k_p.defined()) out.emplace_back(hp + "k_p", heads[h].k_p);
      if (heads[h].u.defined()) out.emplace_back(hp + "u", heads[h].u);
    }
    if (shared_k_p.defined()) out.emplace_back(prefix + "shared_k_p", shared_k_p);
    if (shared_u.defined()) out.emplace_back(prefix + "shared_u", shared_u);
    if (dai_k_p.defined()) out.emplace_back(prefix + "dai_k_p", dai_k_p);
    if (dai_u.defined()) out.emplace_back(prefix + "dai_u", dai_u);
    if (dai_v.defined()) out.emplace_back(prefix + "dai_v", dai_v);
    out.emplace_back(prefix + "w_out", w_out);
  }
};

// Position data consumed by one attention call. Absolute variants read the
// per-time matrix; relative variants read the per-offset block, whose
// columns cover offsets -rel_radius..rel_radius in ascending order.
struct PositionInputs {
  Tensor p_abs;        // absolute: [d_model x L]; concat_abs: [6 x L]
  Tensor p_rel;        // light: [6 x n_off]; relative_dai: [d_p x n_off]
  int rel_radius = 0;
};

// Tracks how many attention-score elements a forward pass materialized:
// full attention stores L*L per head, banded attention L*window.
struct AttentionStats {
  std::uint64_t score_elements = 0;
};

inline Tensor scale_by(const Tensor& t, double divisor) {
  return scale(t, 1.0 / divisor);
}

// Band mask over |i - j| <= (window-1)/2; every row keeps the diagonal.
inline Mask window_mask(int length, int window) {
  if (window < 1 || window % 2 == 0) {
    throw ParameterError("window_mask: window must be odd and >= 1");
  }
  Mask m{length, length, {}};
  m.keep.assign(static_cast<std::size_t>(length) * length, 0);
  int r = (window - 1) / 2;
  for (int i = 0; i < length; ++i) {
    for (int j = std::max(0, i - r); j <= std::min(length - 1, i + r); ++j) {
      m.set(i, j, true);
    }
  }
  return m;
}

// b(delta) = (K_p p_delta)^T u / scale for every offset column of the block.
// Content-free, so one vector of length n_off serves every query position.
inline Tensor relative_bias_vector(const Tensor& k_p, const Tensor& u,
                                   const Tensor& p_rel_block, double divisor) {
  Tensor proj = matmul(k_p, p_rel_block);  // [d x n_off]
  Tensor urow = reshape(u, {1, static_cast<int>(u.numel())});
  Tensor bias = matmul(urow, proj);        // [1 x n_off]
  return scale_by(bias, divisor);
}

// The printed Eq.-(2) position term ((K_p p)^T u + (K_p p)^T v) per offset.
inline Tensor dai_bias_vector(const AttentionWeights& w, const Tensor& p_rel_block,
                              double divisor) {
  Tensor proj = matmul(w.dai_k_p, p_rel_block);
  Tensor urow = reshape(w.dai_u, {1, static_cast<int>(w.dai_u.numel())});
  Tensor vrow = reshape(w.dai_v, {1, static_cast<int>(w.dai_v.numel())});
  Tensor term = add(matmul(urow, proj), matmul(vrow, proj));
  return scale_by(term, divisor);
}

namespace detail {

// Constant re-slice of a per-offset block (never differentiable; position
// blocks are plain data). `descending` flips to offsets want..-want, the
// order needed by the banded layout where column c holds key j = i+c-r.
inline Tensor rel_slice(const Tensor& block, int have_radius, int want_radius,
                        bool descending = false) {
  if (block.node()->requires_grad) {
    throw ContractError("rel_slice expects a constant position block");
  }
  if (have_radius < want_radius) {
    throw ContractError("relative embeddings cover too few offsets");
  }
  const int d = block.rows();
  const int n = 2 * want_radius + 1;
  Tensor out = Tensor::zeros({d, n});
  for (int r = 0; r < d; ++r) {
    for (int c = 0; c < n; ++c) {
      int src = descending ? (have_radius + want_radius - c) : (c + have_radius - want_radius);
      out.at(r, c) = block.at(r, src);
    }
  }
  return out;
}

inline void check_rel_coverage(const PositionInputs& pos, int L,
                               const AttentionConfig& cfg) {
  int needed = cfg.window ? cfg.radius() : L - 1;
  if (!pos.p_rel.defined() || pos.rel_radius < needed) {
    throw ContractError("attention: relative embeddings must cover offsets up to " +
                        std::to_string(needed));
  }
}

// Softmax + value mixing, full route; logits is [L x L].
inline Tensor attend_full(const Tensor& logits, const Tensor& values,
                          const Mask& mask, AttentionStats* stats) {
  if (stats) {
    stats->score_elements += static_cast<std::uint64_t>(logits.rows()) * logits.cols();
  }
  Tensor w = softmax_masked(logits, mask);
  return matmul(values, transpose(w));
}

// Banded route; logits is [L x (2*radius+1)].
inline Tensor attend_banded(const Tensor& logits, const Tensor& values, int radius,
                            AttentionStats* stats) {
  if (stats) {
    stats->score_elements += static_cast<std::uint64_t>(logits.rows()) * logits.cols();
  }
  Tensor w = softmax_masked(logits, banded_mask(logits.rows(), radius));
  return banded_attend(values, w, radius);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Single-head reference entry points (full score matrix)
// ---------------------------------------------------------------------------

// Additive absolute head, Eq.-(1) style:
//   logits_ij = (K(x_j+p_j))^T (Q(x_i+p_i)) / sqrt(d_k)
//   out_i     = sum_j softmax_j(logits_i) * V(x_j+p_j)
inline Tensor attn_absolute(const Tensor& x, const Tensor& p_abs,
                            const HeadWeights& w, const Mask& mask,
                            AttentionStats* stats = nullptr) {
  if (p_abs.rows() != x.rows() || p_abs.cols() != x.cols()) {
    throw DimensionError("attn_absolute: position matrix must match x (d_model x L)");
  }
  const double dk = std::sqrt(static_cast<double>(w.q_c.rows()));
  Tensor xin = add(x, p_abs);
  Tensor q = matmul(w.q_c, xin);
  Tensor k = matmul(w.k_c, xin);
  Tensor v = matmul(w.v, xin);
  Tensor logits = scale_by(matmul(transpose(q), k), dk);
  return detail::attend_full(logits, v, mask, stats);
}

// Additive relative baseline, exactly as printed:
//   logits_ij = [(K x_j)^T (Q x_i) + (K_p p_{i-j})^T u + (K_p p_{i-j})^T v] / sqrt(d_k)
//   out_i     = sum_j softmax * (V x_j)
// K_p, u, v live on the shared AttentionWeights (one set for all heads).
inline Tensor attn_relative_dai(const Tensor& x, const Tensor& p_rel, int rel_radius,
                                const AttentionWeights& shared, const HeadWeights& w,
                                const Mask& mask, AttentionStats* stats = nullptr) {
  const double dk = std::sqrt(static_cast<double>(w.q_c.rows()));
  const int L = x.cols();
  if (rel_radius < L - 1) {
    throw ContractError("attn_relative_dai: relative block must cover offsets up to L-1");
  }
  Tensor q = matmul(w.q_c, x);
  Tensor k = matmul(w.k_c, x);
  Tensor v = matmul(w.v, x);
  Tensor logits = scale_by(matmul(transpose(q), k), dk);
  Tensor block = detail::rel_slice(p_rel, rel_radius, L - 1);
  Tensor bias = dai_bias_vector(shared, block, dk);
  logits = add_diag_bias(logits, reshape(bias, {2 * L - 1}));
  return detail::attend_full(logits, v, mask, stats);
}

// Concatenated absolute variant, Eq.-(3)-style block-diagonal split:
//   logits_ij = (K_c x_j)^T (Q_c x_i)/sqrt(d_k) + (K_p p_j)^T (Q_p p_i)/sqrt(d_p)
// The value path sees content only.
inline Tensor attn_concat_abs(const Tensor& x, const Tensor& p_light,
                              const HeadWeights& w, const Mask& mask,
                              AttentionStats* stats = nullptr) {
  if (p_light.rows() != 6) {
    throw DimensionError("attn_concat_abs: expected the 6-row light position matrix");
  }
  if (p_light.cols() != x.cols()) {
    throw DimensionError("attn_concat_abs: position length mismatch");
  }
  const double dk = std::sqrt(static_cast<double>(w.q_c.rows()));
  const double dp = std::sqrt(6.0);
  Tensor q = matmul(w.q_c, x);
  Tensor k = matmul(w.k_c, x);
  Tensor v = matmul(w.v, x);
  Tensor qp = matmul(w.q_p, p_light);
  Tensor kp = matmul(w.k_p, p_light);
  Tensor logits = add(scale_by(matmul(transpose(q), k), dk),
                      scale_by(matmul(transpose(qp), kp), dp));
  return detail::attend_full(logits, v, mask, stats);
}

// The light head, Eq.-(4) style:
//   logits_ij = (K_c x_j)^T (Q_c x_i)/sqrt(d_k) + (K_p p_{i-j})^T u /sqrt(d_p)
inline Tensor attn_light(const Tensor& x, const Tensor& p_rel, int rel_radius,
                         const HeadWeights& w, const Mask& mask,
                         AttentionStats* stats = nullptr) {
  const double dk = std::sqrt(static_cast<double>(w.q_c.rows()));
  const double dp = std::sqrt(6.0);
  const int L = x.cols();
  if (rel_radius < L - 1) {
    throw ContractError("attn_light: relative block must cover offsets up to L-1");
  }
  Tensor q = matmul(w.q_c, x);
  Tensor k = matmul(w.k_c, x);
  Tensor v = matmul(w.v, x);
  Tensor logits = scale_by(matmul(transpose(q), k), dk);
  Tensor block = detail::rel_slice(p_rel, rel_radius, L - 1);
  Tensor bias = relative_bias_vector(w.k_p, w.u, block, dp);
  logits = add_diag_bias(logits, reshape(bias, {2 * L - 1}));
  return detail::attend_full(logits, v, mask, stats);
}

// Content-only head (the zero-position control).
inline Tensor attn_none(const Tensor& x, const HeadWeights& w, const Mask& mask,
                        AttentionStats* stats = nullptr) {
  const double dk = std::sqrt(static_cast<double>(w.q_c.rows()));
  Tensor q = matmul(w.q_c, x);
  Tensor k = matmul(w.k_c, x);
  Tensor v = matmul(w.v, x);
  Tensor logits = scale_by(matmul(transpose(q), k), dk);
  return detail::attend_full(logits, v, mask, stats);
}

// ---------------------------------------------------------------------------
// Multi-head composition
// ---------------------------------------------------------------------------

// MultiHead(x) = W_out Concat(head_1, ..., head_N). Takes the banded route
// when a window is configured and cfg.banded is on; otherwise computes the
// full score matrix under the window (or all-keep) mask.
inline Tensor multi_head(const Tensor& x, const PositionInputs& pos,
                         const AttentionWeights& w, const AttentionConfig& cfg,
                         AttentionStats* stats = nullptr) {
  cfg.validate();
  if (static_cast<int>(w.heads.size()) != cfg.n_heads) {
    throw ParameterError("multi_head: weight count does not match configured heads");
  }
  const int L = x.cols();
  if (x.rows() != cfg.d_model()) {
    throw DimensionError("multi_head: x must be [d_model x L]");
  }
  const double sqrt_dk = std::sqrt(static_cast<double>(cfg.d_head));
  const double sqrt_dp = std::sqrt(6.0);
  const bool banded = cfg.window.has_value() && cfg.banded;
  const int radius = banded ? cfg.radius() : L - 1;

  Tensor xin = x;
  switch (cfg.variant) {
    case AttnVariant::absolute:
      if (!pos.p_abs.defined() || pos.p_abs.rows() != cfg.d_model() ||
          pos.p_abs.cols() != L) {
        throw DimensionError("multi_head(absolute): p_abs must be [d_model x L]");
      }
      xin = add(x, pos.p_abs);
      break;
    case AttnVariant::concat_abs:
      if (!pos.p_abs.defined() || pos.p_abs.rows() != 6 || pos.p_abs.cols() != L) {
        throw DimensionError("multi_head(concat_abs): p_abs must be the 6-row light matrix");
      }
      break;
    case AttnVariant::light:
    case AttnVariant::relative_dai:
      detail::check_rel_coverage(pos, L, cfg);
      break;
    case AttnVariant::none:
      break;
  }

  // Per-offset blocks for the relative variants, ordered for the chosen
  // layout: banded column c holds key j = i+c-radius, i.e. offset radius-c.
  Tensor rel_block;
  Tensor dai_bias;
  if (cfg.variant == AttnVariant::light) {
    rel_block = detail::rel_slice(pos.p_rel, pos.rel_radius, radius, banded);
  } else if (cfg.variant == AttnVariant::relative_dai) {
    rel_block = detail::rel_slice(pos.p_rel, pos.rel_radius, radius, banded);
    dai_bias = dai_bias_vector(w, rel_block, sqrt_dk);
  }

  Mask full_mask;
  if (!banded) {
    full_mask = cfg.window ? window_mask(L, *cfg.window) : Mask::all(L, L);
  }

  std::vector<Tensor> head_outs;
  head_outs.reserve(cfg.n_heads);
  for (int h = 0; h < cfg.n_heads; ++h) {
    const HeadWeights& hw = w.heads[h];
    Tensor q = matmul(hw.q_c, xin);
    Tensor k = matmul(hw.k_c, xin);
    Tensor v = matmul(hw.v, xin);

    Tensor logits = banded ? scale_by(banded_scores(q, k, radius), sqrt_dk)
                           : scale_by(matmul(transpose(q), k), sqrt_dk);
    switch (cfg.variant) {
      case AttnVariant::light: {
        const Tensor& kp = cfg.share_position_params ? w.shared_k_p : hw.k_p;
        const Tensor& uu = cfg.share_position_params ? w.shared_u : hw.u;
        Tensor bias = relative_bias_vector(kp, uu, rel_block, sqrt_dp);
        Tensor bvec = reshape(bias, {2 * radius + 1});
        logits = banded ? add_row_broadcast(logits, bvec) : add_diag_bias(logits, bvec);
        break;
      }
      case AttnVariant::relative_dai: {
        Tensor bvec = reshape(dai_bias, {2 * radius + 1});
        logits = banded ? add_row_broadcast(logits, bvec) : add_diag_bias(logits, bvec);
        break;
      }
      case AttnVariant::concat_abs: {
        Tensor qp = matmul(hw.q_p, pos.p_abs);
        Tensor kp = matmul(hw.k_p, pos.p_abs);
        Tensor pterm = banded ? banded_scores(qp, kp, radius)
                              : matmul(transpose(qp), kp);
        logits = add(logits, scale_by(pterm, sqrt_dp));
        break;
      }
      case AttnVariant::absolute:
      case AttnVariant::none:
        break;
    }
    head_outs.push_back(banded ? detail::attend_banded(logits, v, radius, stats)
                               : detail::attend_full(logits, v, full_mask, stats));
  }

  Tensor stacked = head_outs[0];
  for (int h = 1; h < cfg.n_heads; ++h) stacked = concat_rows(stacked, head_outs[h]);
  return matmul(w.w_out, stacked);
}

// ---------------------------------------------------------------------------
// Parameter arithmetic
// ---------------------------------------------------------------------------

// Trainable scalars the variant adds on top of the shared content pathway.
inline std::int64_t position_extras(const AttentionConfig& cfg) {
  switch (cfg.variant) {
    case AttnVariant::light: {
      std::int64_t per = 6 * 6 + 6;  // K_p and u
      return cfg.share_position_params ? per : per * cfg.n_heads;
    }
    case AttnVariant::concat_abs:
      return static_cast<std::int64_t>(cfg.n_heads) * (6 * 6 + 6 * 6);  // Q_p and K_p
    case AttnVariant::relative_dai:
      return static_cast<std::int64_t>(cfg.d_model()) * cfg.d_p() + 2 * cfg.d_p();
    case AttnVariant::absolute:
    case AttnVariant::none:
      return 0;
  }
  return 0;
}

// Exact trainable-scalar count of one attention layer: per-head Q/K/V
// projections, the output matrix, and the variant extras. No biases exist
// anywhere in the attention path.
inline std::int64_t count_parameters(const AttentionConfig& cfg) {
  std::int64_t content =
      static_cast<std::int64_t>(cfg.n_heads) * 3 * cfg.d_head * cfg.d_model();
  std::int64_t out =
      static_cast<std::int64_t>(cfg.d_model()) * cfg.n_heads * cfg.d_head;
  return content + out + position_extras(cfg);
}

}  // namespace lightattn
