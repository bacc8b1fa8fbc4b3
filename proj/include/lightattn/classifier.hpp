#pragma once

#include <string>
#include <utility>
#include <vector>

#include "lightattn/encoder.hpp"
#include "lightattn/tensor.hpp"

namespace lightattn {

// Mean-pool over time, then one affine projection per task head. Stands in
// for the out-of-scope decoder; the projections take the full
// (d_model + 6)-row encoder output, position rows included.
struct ClassifierHead {
  Tensor intent_w;   // [n_intents x (d_model + 6)]
  Tensor intent_b;   // [n_intents]
  Tensor speaker_w;  // [n_speakers x (d_model + 6)]
  Tensor speaker_b;  // [n_speakers]

  std::vector<std::pair<std::string, Tensor>> params() const {
    return {{"head.intent_w", intent_w},
            {"head.intent_b", intent_b},
            {"head.speaker_w", speaker_w},
            {"head.speaker_b", speaker_b}};
  }
};

inline ClassifierHead init_head(int hidden_dim, int n_intents, int n_speakers,
                                std::uint64_t seed) {
  if (n_intents < 2 || n_speakers < 1) {
    throw ParameterError("init_head: class counts out of range");
  }
  Rng rng = Rng::derive_from(seed, "head-init");
  ClassifierHead h;
  h.intent_w = detail::glorot2d(n_intents, hidden_dim, rng);
  h.intent_b = Tensor::zeros({n_intents}, true);
  h.speaker_w = detail::glorot2d(n_speakers, hidden_dim, rng);
  h.speaker_b = Tensor::zeros({n_speakers}, true);
  return h;
}

struct HeadLogits {
  Tensor intent;   // [n_intents x 1]
  Tensor speaker;  // [n_speakers x 1]
};

inline HeadLogits pool_and_classify(const Tensor& hidden, const ClassifierHead& head) {
  if (hidden.ndim() != 2) throw DimensionError("pool_and_classify: hidden must be 2-d");
  if (hidden.rows() != head.intent_w.cols()) {
    throw DimensionError("pool_and_classify: hidden width mismatch");
  }
  Tensor pooled = reshape(mean_cols(hidden), {hidden.rows(), 1});
  HeadLogits out;
  out.intent = affine_cols(head.intent_w, pooled, head.intent_b);
  out.speaker = affine_cols(head.speaker_w, pooled, head.speaker_b);
  return out;
}

// ---------------------------------------------------------------------------
// Classification metrics
// ---------------------------------------------------------------------------

struct EvalMetrics {
  double intent_f1_micro = 0.0;
  double intent_f1_macro = 0.0;
  double speaker_acc = 0.0;
};

inline double accuracy(const std::vector<int>& pred, const std::vector<int>& gold) {
  if (pred.size() != gold.size() || pred.empty()) {
    throw ContractError("accuracy: prediction/label size mismatch");
  }
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == gold[i];
  return static_cast<double>(hit) / pred.size();
}

// Micro-averaged F1 over single-label multiclass predictions (equals overall
// accuracy; kept explicit through the confusion counts).
inline double f1_micro(const std::vector<int>& pred, const std::vector<int>& gold,
                       int n_classes) {
  std::int64_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] < 0 || pred[i] >= n_classes || gold[i] < 0 || gold[i] >= n_classes) {
      throw DataError("f1_micro: class index out of range");
    }
    if (pred[i] == gold[i]) {
      ++tp;
    } else {
      ++fp;
      ++fn;
    }
  }
  double denom = 2.0 * tp + fp + fn;
  return denom == 0.0 ? 0.0 : 2.0 * tp / denom;
}

inline double f1_macro(const std::vector<int>& pred, const std::vector<int>& gold,
                       int n_classes) {
  std::vector<std::int64_t> tp(n_classes, 0), fp(n_classes, 0), fn(n_classes, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == gold[i]) {
      ++tp[gold[i]];
    } else {
      ++fp[pred[i]];
      ++fn[gold[i]];
    }
  }
  double total = 0.0;
  for (int c = 0; c < n_classes; ++c) {
    double denom = 2.0 * tp[c] + fp[c] + fn[c];
    total += denom == 0.0 ? 0.0 : 2.0 * tp[c] / denom;
  }
  return total / n_classes;
}

inline int argmax_index(const Tensor& logits) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(logits.numel()); ++i) {
    if (logits.data()[i] > logits.data()[best]) best = i;
  }
  return best;
}

}  // namespace lightattn
