#pragma once

#include <cmath>
#include <deque>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lightattn/classifier.hpp"
#include "lightattn/data.hpp"
#include "lightattn/encoder.hpp"
#include "lightattn/tensor.hpp"

namespace lightattn {

struct TrainConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-9;
  int warmup_steps = 4000;
  int total_steps = 1000;
  int batch_size = 16;
  int avg_last_k = 10;
  std::uint64_t seed = 0;
  // "last 10 training steps" read as optimizer steps; flip to snapshot at
  // epoch boundaries instead.
  bool snapshot_per_epoch = false;

  void validate() const {
    if (beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 || beta2 >= 1.0) {
      throw ParameterError("train: betas must lie in (0, 1)");
    }
    if (epsilon <= 0.0) throw ParameterError("train: epsilon must be positive");
    if (warmup_steps < 1) throw ParameterError("train: warmup_steps must be >= 1");
    if (total_steps < 1) throw ParameterError("train: total_steps must be >= 1");
    if (batch_size < 1) throw ParameterError("train: batch_size must be >= 1");
    if (avg_last_k < 1) throw ParameterError("train: avg_last_k must be >= 1");
  }
};

// d_model^-0.5 * min(step^-0.5, step * warmup^-1.5); rises linearly to the
// crossover at step == warmup_steps, then decays as 1/sqrt(step).
inline double warmup_lr(int step, int d_model, int warmup_steps) {
  if (step < 1) throw ContractError("warmup_lr: step counts from 1");
  double s = static_cast<double>(step);
  return std::pow(static_cast<double>(d_model), -0.5) *
         std::min(std::pow(s, -0.5), s * std::pow(static_cast<double>(warmup_steps), -1.5));
}

using ParamSnapshot = std::vector<std::vector<double>>;

// Optimizer state: Adam moments per parameter plus the snapshot ring buffer
// that feeds checkpoint averaging.
struct TrainState {
  int step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::deque<ParamSnapshot> snapshots;
  int avg_last_k = 10;

  static TrainState init(const std::vector<std::pair<std::string, Tensor>>& params,
                         int avg_last_k) {
    TrainState st;
    st.avg_last_k = avg_last_k;
    st.m.reserve(params.size());
    st.v.reserve(params.size());
    for (const auto& [name, t] : params) {
      st.m.emplace_back(t.data().size(), 0.0);
      st.v.emplace_back(t.data().size(), 0.0);
    }
    return st;
  }

  void push_snapshot(const std::vector<std::pair<std::string, Tensor>>& params) {
    ParamSnapshot snap;
    snap.reserve(params.size());
    for (const auto& [name, t] : params) snap.push_back(t.data());
    snapshots.push_back(std::move(snap));
    while (static_cast<int>(snapshots.size()) > avg_last_k) snapshots.pop_front();
  }
};

// One bias-corrected Adam update from the gradients accumulated in each
// parameter tensor; bumps the step counter and records a snapshot unless the
// caller defers snapshots to epoch boundaries.
inline void adam_step(std::vector<std::pair<std::string, Tensor>>& params,
                      TrainState& state, const TrainConfig& cfg, double lr,
                      bool record_snapshot = true) {
  if (state.m.size() != params.size()) {
    throw ContractError("adam_step: state does not match parameter list");
  }
  state.step += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, state.step);
  double bc2 = 1.0 - std::pow(cfg.beta2, state.step);
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& t = params[p].second;
    const auto& g = t.grad();
    if (g.size() != state.m[p].size()) {
      throw ContractError("adam_step: gradient shape mismatch for " + params[p].first);
    }
    auto& m = state.m[p];
    auto& v = state.v[p];
    auto& x = t.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      x[i] -= lr * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
  }
  if (record_snapshot) state.push_snapshot(params);
}

// Element-wise mean of the ring buffer (up to avg_last_k snapshots; fewer
// when training stopped earlier).
inline ParamSnapshot average_checkpoints(const std::deque<ParamSnapshot>& snapshots) {
  if (snapshots.empty()) throw ContractError("average_checkpoints: empty buffer");
  ParamSnapshot avg = snapshots.front();
  for (std::size_t s = 1; s < snapshots.size(); ++s) {
    for (std::size_t p = 0; p < avg.size(); ++p) {
      const auto& src = snapshots[s][p];
      for (std::size_t i = 0; i < src.size(); ++i) avg[p][i] += src[i];
    }
  }
  double inv = 1.0 / static_cast<double>(snapshots.size());
  for (auto& p : avg)
    for (auto& x : p) x *= inv;
  return avg;
}

inline void load_snapshot(std::vector<std::pair<std::string, Tensor>>& params,
                          const ParamSnapshot& snap) {
  if (snap.size() != params.size()) {
    throw ContractError("load_snapshot: parameter count mismatch");
  }
  for (std::size_t p = 0; p < params.size(); ++p) params[p].second.data() = snap[p];
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct MetricsRow {
  int step = 0;
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<EvalMetrics> epoch_eval;  // filled on epoch-boundary rows
};

struct TrainResult {
  EncoderWeights weights;
  ClassifierHead head;
  std::vector<MetricsRow> metrics;
  bool diverged = false;
  int epochs = 0;
};

struct Model {
  EncoderWeights weights;
  ClassifierHead head;

  std::vector<std::pair<std::string, Tensor>> params() const {
    auto out = weights.params();
    auto hp = head.params();
    out.insert(out.end(), hp.begin(), hp.end());
    return out;
  }
};

inline std::vector<int> predict_intents(const Model& model, const EncoderConfig& cfg,
                                        const Dataset& data, std::vector<int>* speaker_pred) {
  NoGradGuard ng;
  std::vector<int> intents;
  intents.reserve(data.utterances.size());
  if (speaker_pred) speaker_pred->clear();
  for (const auto& u : data.utterances) {
    Tensor hidden = encode(u.features, cfg, model.weights, /*training=*/false);
    HeadLogits logits = pool_and_classify(hidden, model.head);
    intents.push_back(argmax_index(logits.intent));
    if (speaker_pred) speaker_pred->push_back(argmax_index(logits.speaker));
  }
  return intents;
}

inline EvalMetrics evaluate(const Model& model, const EncoderConfig& cfg,
                            const Dataset& data) {
  std::vector<int> speaker_pred;
  std::vector<int> intent_pred = predict_intents(model, cfg, data, &speaker_pred);
  std::vector<int> intent_gold, speaker_gold;
  for (const auto& u : data.utterances) {
    intent_gold.push_back(u.intent);
    speaker_gold.push_back(u.speaker);
  }
  EvalMetrics m;
  m.intent_f1_micro = f1_micro(intent_pred, intent_gold, data.n_intents);
  m.intent_f1_macro = f1_macro(intent_pred, intent_gold, data.n_intents);
  m.speaker_acc = accuracy(speaker_pred, speaker_gold);
  return m;
}

// Minibatch training over shuffled epochs with the full recipe: Adam with
// warmup schedule, per-step snapshots, and a checkpoint-averaged final model.
// Per-epoch metrics come from `eval_data` (the training set when null).
inline TrainResult train(const Dataset& data, const EncoderConfig& enc_cfg,
                         const TrainConfig& train_cfg,
                         const Dataset* eval_data = nullptr) {
  enc_cfg.validate();
  train_cfg.validate();
  if (data.utterances.empty()) throw DataError("train: empty dataset");
  for (const auto& u : data.utterances) {
    if (u.intent < 0 || u.intent >= data.n_intents || u.speaker < 0 ||
        u.speaker >= data.n_speakers) {
      throw DataError("train: label out of range for utterance " + u.id);
    }
    if (u.features.rows() != enc_cfg.input_dim) {
      throw DataError("train: feature width mismatch for utterance " + u.id);
    }
  }

  Model model;
  model.weights = init_weights(enc_cfg, train_cfg.seed);
  model.head = init_head(enc_cfg.d_model() + 6, data.n_intents, data.n_speakers,
                         train_cfg.seed);
  auto params = model.params();
  TrainState state = TrainState::init(params, train_cfg.avg_last_k);
  Rng dropout_rng = Rng::derive_from(train_cfg.seed, "dropout");
  Rng order_rng = Rng::derive_from(train_cfg.seed, "batch-order");

  const Dataset& eval_set = eval_data ? *eval_data : data;
  const int n = static_cast<int>(data.utterances.size());
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  order_rng.shuffle(order);
  int cursor = 0;
  int epoch = 1;

  TrainResult result;
  for (int step = 1; step <= train_cfg.total_steps; ++step) {
    Tensor batch_loss;
    int batch_n = 0;
    bool epoch_done = false;
    for (int bi = 0; bi < train_cfg.batch_size; ++bi) {
      const Utterance& u = data.utterances[order[cursor]];
      ++cursor;
      if (cursor == n) {
        cursor = 0;
        order_rng.shuffle(order);
        epoch_done = true;
      }
      Tensor hidden = encode(u.features, enc_cfg, model.weights, /*training=*/true,
                             &dropout_rng);
      HeadLogits logits = pool_and_classify(hidden, model.head);
      Tensor loss = add(cross_entropy(logits.intent, u.intent),
                        cross_entropy(logits.speaker, u.speaker));
      batch_loss = batch_loss.defined() ? add(batch_loss, loss) : loss;
      ++batch_n;
    }
    Tensor loss = scale(batch_loss, 1.0 / batch_n);
    double loss_value = loss.item();

    MetricsRow row;
    row.step = step;
    row.epoch = epoch;
    row.lr = warmup_lr(step, enc_cfg.d_model(), train_cfg.warmup_steps);
    row.train_loss = loss_value;

    if (!std::isfinite(loss_value)) {
      result.metrics.push_back(row);
      result.diverged = true;
      break;
    }

    for (auto& [name, t] : params) t.zero_grad();
    backward(loss);
    adam_step(params, state, train_cfg, row.lr,
              /*record_snapshot=*/!train_cfg.snapshot_per_epoch);

    if (epoch_done) {
      if (train_cfg.snapshot_per_epoch) state.push_snapshot(params);
      row.epoch_eval = evaluate(model, enc_cfg, eval_set);
      ++epoch;
    }
    result.metrics.push_back(row);
  }
  result.epochs = epoch - 1;

  if (!state.snapshots.empty()) {
    load_snapshot(params, average_checkpoints(state.snapshots));
  }
  result.weights = model.weights;
  result.head = model.head;
  return result;
}

}  // namespace lightattn
