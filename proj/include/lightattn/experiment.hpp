#pragma once

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "lightattn/checkpoint.hpp"
#include "lightattn/data.hpp"
#include "lightattn/encoder.hpp"
#include "lightattn/gradcheck.hpp"
#include "lightattn/training.hpp"

namespace lightattn::exp {

using nlohmann::json;

// Configuration problems exit with code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CliOptions {
  std::string config_path;
  std::string out_dir;
  long long seed_override = -1;
  int threads = 0;
  bool corrupt_backward = false;
};

// ---------------------------------------------------------------------------
// Config schema
// ---------------------------------------------------------------------------

struct DataConfig {
  std::string kind = "synthetic";  // synthetic | manifest
  SyntheticSpec synthetic;
  std::string manifest_path;
};

struct CurveConfig {
  std::vector<std::string> variants = {"light", "absolute"};
  int n_blocks = 150;
  int n_folds = 5;
  std::vector<int> prefix_blocks = {1, 2, 4, 8, 16, 32};
};

struct BenchConfig {
  std::vector<int> lengths = {64, 128, 256, 512};
  std::vector<int> heads = {2, 4, 8};
  int batch = 1;
  int window = 5;
  int d_head = 8;
};

struct ExperimentConfig {
  EncoderConfig encoder;
  TrainConfig train;
  DataConfig data;
  CurveConfig curve;
  BenchConfig bench;
  std::string out_dir = "out";
  std::string canonical_json;
  std::uint64_t config_hash = 0;
};

namespace detail {

inline void expect_keys(const json& obj, const std::string& where,
                        std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& [key, value] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
T get_or(const json& obj, const char* key, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config: bad type for '") + key + "'");
  }
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline AttentionConfig parse_attention(const json& j) {
  expect_keys(j, "encoder.attention",
              {"variant", "n_heads", "d_head", "window", "share_position_params", "d_p"});
  AttentionConfig a;
  a.variant = variant_from_name(get_or<std::string>(j, "variant", "light"));
  a.n_heads = get_or<int>(j, "n_heads", 8);
  a.d_head = get_or<int>(j, "d_head", 64);
  int window = get_or<int>(j, "window", 5);
  a.window = window > 0 ? std::optional<int>(window) : std::nullopt;
  a.share_position_params = get_or<bool>(j, "share_position_params", false);
  a.d_p_override = get_or<int>(j, "d_p", 0);
  return a;
}

inline EncoderConfig parse_encoder(const json& j) {
  expect_keys(j, "encoder",
              {"n_layers", "d_ff", "dropout", "share_layers", "frontend", "conv_channels",
               "input_dim", "dropout_position", "concat_position", "ln_eps", "attention",
               "position"});
  EncoderConfig e;
  e.n_layers = get_or<int>(j, "n_layers", 4);
  e.d_ff = get_or<int>(j, "d_ff", 2048);
  e.dropout = get_or<double>(j, "dropout", 0.1);
  e.share_layers = get_or<bool>(j, "share_layers", true);
  std::string fe = get_or<std::string>(j, "frontend", "conv");
  if (fe == "conv") {
    e.frontend = FrontendKind::conv;
  } else if (fe == "linear") {
    e.frontend = FrontendKind::linear;
  } else {
    throw ConfigError("encoder.frontend must be 'conv' or 'linear'");
  }
  e.conv_channels = get_or<std::vector<int>>(j, "conv_channels", {32, 64});
  e.input_dim = get_or<int>(j, "input_dim", 40);
  e.dropout_position = get_or<bool>(j, "dropout_position", true);
  e.concat_position = get_or<bool>(j, "concat_position", true);
  e.ln_eps = get_or<double>(j, "ln_eps", 1e-6);
  if (j.contains("attention")) e.attention = parse_attention(j.at("attention"));
  if (j.contains("position")) {
    expect_keys(j.at("position"), "encoder.position", {"T", "M1", "M2"});
    e.position.T = get_or<int>(j.at("position"), "T", 0);
    e.position.M1 = get_or<int>(j.at("position"), "M1", 4);
    e.position.M2 = get_or<int>(j.at("position"), "M2", 2);
  } else {
    e.position.T = 0;
  }
  return e;
}

inline TrainConfig parse_train(const json& j) {
  expect_keys(j, "train",
              {"beta1", "beta2", "epsilon", "warmup_steps", "total_steps", "batch_size",
               "avg_last_k", "seed", "snapshot_per_epoch"});
  TrainConfig t;
  t.beta1 = get_or<double>(j, "beta1", 0.9);
  t.beta2 = get_or<double>(j, "beta2", 0.98);
  t.epsilon = get_or<double>(j, "epsilon", 1e-9);
  t.warmup_steps = get_or<int>(j, "warmup_steps", 4000);
  t.total_steps = get_or<int>(j, "total_steps", 1000);
  t.batch_size = get_or<int>(j, "batch_size", 16);
  t.avg_last_k = get_or<int>(j, "avg_last_k", 10);
  t.seed = static_cast<std::uint64_t>(get_or<std::int64_t>(j, "seed", 0));
  t.snapshot_per_epoch = get_or<bool>(j, "snapshot_per_epoch", false);
  return t;
}

inline DataConfig parse_data(const json& j) {
  expect_keys(j, "data",
              {"kind", "task", "n_utterances", "n_intents", "n_speakers", "input_dim",
               "token_dur_lo", "token_dur_hi", "noise_sigma", "seed", "manifest"});
  DataConfig d;
  d.kind = get_or<std::string>(j, "kind", "synthetic");
  if (d.kind == "synthetic") {
    d.synthetic.task = synthetic_task_from_name(get_or<std::string>(j, "task", "order"));
    d.synthetic.n_utterances = get_or<int>(j, "n_utterances", 2000);
    d.synthetic.n_intents = get_or<int>(j, "n_intents", 8);
    d.synthetic.n_speakers = get_or<int>(j, "n_speakers", 4);
    d.synthetic.input_dim = get_or<int>(j, "input_dim", 40);
    d.synthetic.token_dur_lo = get_or<int>(j, "token_dur_lo", 10);
    d.synthetic.token_dur_hi = get_or<int>(j, "token_dur_hi", 30);
    d.synthetic.noise_sigma = get_or<double>(j, "noise_sigma", 0.1);
    d.synthetic.seed = static_cast<std::uint64_t>(get_or<std::int64_t>(j, "seed", 1));
  } else if (d.kind == "manifest") {
    d.manifest_path = get_or<std::string>(j, "manifest", "");
    if (d.manifest_path.empty()) throw ConfigError("data.manifest path required");
  } else {
    throw ConfigError("data.kind must be 'synthetic' or 'manifest'");
  }
  return d;
}

inline CurveConfig parse_curve(const json& j) {
  expect_keys(j, "curve", {"variants", "n_blocks", "n_folds", "prefix_blocks"});
  CurveConfig c;
  c.variants = get_or<std::vector<std::string>>(j, "variants", {"light", "absolute"});
  c.n_blocks = get_or<int>(j, "n_blocks", 150);
  c.n_folds = get_or<int>(j, "n_folds", 5);
  c.prefix_blocks = get_or<std::vector<int>>(j, "prefix_blocks", {1, 2, 4, 8, 16, 32});
  if (c.variants.empty()) throw ConfigError("curve.variants must not be empty");
  if (c.prefix_blocks.empty()) throw ConfigError("curve.prefix_blocks must not be empty");
  for (const auto& v : c.variants) variant_from_name(v);
  return c;
}

inline BenchConfig parse_bench(const json& j) {
  expect_keys(j, "bench", {"lengths", "heads", "batch", "window", "d_head"});
  BenchConfig b;
  b.lengths = get_or<std::vector<int>>(j, "lengths", {64, 128, 256, 512});
  b.heads = get_or<std::vector<int>>(j, "heads", {2, 4, 8});
  b.batch = get_or<int>(j, "batch", 1);
  b.window = get_or<int>(j, "window", 5);
  b.d_head = get_or<int>(j, "d_head", 8);
  return b;
}

}  // namespace detail

namespace detail {

// Effective config with every default materialized; out_dir is CLI plumbing
// and stays out so reruns into different directories hash identically.
inline json effective_json(const ExperimentConfig& cfg) {
  json j;
  const auto& a = cfg.encoder.attention;
  j["encoder"] = {
      {"n_layers", cfg.encoder.n_layers},
      {"d_ff", cfg.encoder.d_ff},
      {"dropout", cfg.encoder.dropout},
      {"share_layers", cfg.encoder.share_layers},
      {"frontend", frontend_name(cfg.encoder.frontend)},
      {"conv_channels", cfg.encoder.conv_channels},
      {"input_dim", cfg.encoder.input_dim},
      {"dropout_position", cfg.encoder.dropout_position},
      {"concat_position", cfg.encoder.concat_position},
      {"ln_eps", cfg.encoder.ln_eps},
      {"attention",
       {{"variant", variant_name(a.variant)},
        {"n_heads", a.n_heads},
        {"d_head", a.d_head},
        {"window", a.window ? *a.window : 0},
        {"share_position_params", a.share_position_params},
        {"d_p", a.d_p_override}}},
      {"position",
       {{"T", cfg.encoder.position.T},
        {"M1", cfg.encoder.position.M1},
        {"M2", cfg.encoder.position.M2}}}};
  j["train"] = {{"beta1", cfg.train.beta1},
                {"beta2", cfg.train.beta2},
                {"epsilon", cfg.train.epsilon},
                {"warmup_steps", cfg.train.warmup_steps},
                {"total_steps", cfg.train.total_steps},
                {"batch_size", cfg.train.batch_size},
                {"avg_last_k", cfg.train.avg_last_k},
                {"seed", cfg.train.seed},
                {"snapshot_per_epoch", cfg.train.snapshot_per_epoch}};
  if (cfg.data.kind == "synthetic") {
    const auto& s = cfg.data.synthetic;
    const char* task = s.task == SyntheticTask::order
                           ? "order"
                           : s.task == SyntheticTask::presence ? "presence" : "speakerized";
    j["data"] = {{"kind", "synthetic"},       {"task", task},
                 {"n_utterances", s.n_utterances}, {"n_intents", s.n_intents},
                 {"n_speakers", s.n_speakers},     {"input_dim", s.input_dim},
                 {"token_dur_lo", s.token_dur_lo}, {"token_dur_hi", s.token_dur_hi},
                 {"noise_sigma", s.noise_sigma},   {"seed", s.seed}};
  } else {
    j["data"] = {{"kind", "manifest"}, {"manifest", cfg.data.manifest_path}};
  }
  j["curve"] = {{"variants", cfg.curve.variants},
                {"n_blocks", cfg.curve.n_blocks},
                {"n_folds", cfg.curve.n_folds},
                {"prefix_blocks", cfg.curve.prefix_blocks}};
  j["bench"] = {{"lengths", cfg.bench.lengths},
                {"heads", cfg.bench.heads},
                {"batch", cfg.bench.batch},
                {"window", cfg.bench.window},
                {"d_head", cfg.bench.d_head}};
  return j;
}

}  // namespace detail

inline ExperimentConfig load_config(const CliOptions& opts) {
  std::ifstream is(opts.config_path);
  if (!is) throw ConfigError("cannot open config file: " + opts.config_path);
  json root;
  try {
    root = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError("config parse failure: " + std::string(e.what()));
  }
  detail::expect_keys(root, "config",
                      {"out_dir", "data", "encoder", "train", "curve", "bench"});
  ExperimentConfig cfg;
  cfg.out_dir = detail::get_or<std::string>(root, "out_dir", "out");
  if (root.contains("data")) cfg.data = detail::parse_data(root.at("data"));
  if (root.contains("encoder")) cfg.encoder = detail::parse_encoder(root.at("encoder"));
  if (root.contains("train")) cfg.train = detail::parse_train(root.at("train"));
  if (root.contains("curve")) cfg.curve = detail::parse_curve(root.at("curve"));
  if (root.contains("bench")) cfg.bench = detail::parse_bench(root.at("bench"));

  if (!opts.out_dir.empty()) cfg.out_dir = opts.out_dir;
  if (opts.seed_override >= 0) {
    cfg.train.seed = static_cast<std::uint64_t>(opts.seed_override);
    cfg.data.synthetic.seed = static_cast<std::uint64_t>(opts.seed_override) + 1;
  }
  cfg.canonical_json = detail::effective_json(cfg).dump();
  cfg.config_hash = detail::fnv1a(cfg.canonical_json);
  return cfg;
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

inline Dataset load_data(const ExperimentConfig& cfg) {
  if (cfg.data.kind == "synthetic") return generate_synthetic(cfg.data.synthetic);
  try {
    return load_dataset(cfg.data.manifest_path);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

// T defaults to the longest post-frontend sequence length seen in the data.
inline void finalize_position(EncoderConfig& enc, const Dataset& data) {
  if (enc.input_dim != data.input_dim && data.input_dim > 0) enc.input_dim = data.input_dim;
  if (enc.position.T <= 0) {
    int max_len = enc.output_length(data.max_length());
    enc.position.T = std::max(max_len, enc.position.M1 + 1);
  }
  int max_len = enc.output_length(data.max_length());
  if (max_len > enc.position.T) {
    std::cerr << "warning: sequences of encoded length " << max_len
              << " exceed position period T=" << enc.position.T
              << "; position vectors will alias\n";
  }
}

namespace detail {

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create output directory " + dir);
}

inline std::ofstream open_csv(const std::string& path, const ExperimentConfig& cfg,
                              const std::string& header) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ConfigError("cannot open " + path + " for writing");
  os << "# config_hash=" << hash_hex(cfg.config_hash) << " seed=" << cfg.train.seed
     << "\n";
  os << header << "\n";
  return os;
}

inline std::string csv_double(double v) { return lightattn::detail::fmt_double(v); }

}  // namespace detail

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

inline int cmd_train(const CliOptions& opts) {
  ExperimentConfig cfg = load_config(opts);
  Dataset data = load_data(cfg);
  finalize_position(cfg.encoder, data);
  cfg.canonical_json = detail::effective_json(cfg).dump();
  cfg.config_hash = detail::fnv1a(cfg.canonical_json);
  try {
    cfg.encoder.validate();
    cfg.train.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  detail::ensure_dir(cfg.out_dir);

  TrainResult result;
  try {
    result = train(data, cfg.encoder, cfg.train);
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }

  auto metrics = detail::open_csv(cfg.out_dir + "/metrics.csv", cfg,
                                  "step,epoch,lr,train_loss,intent_f1_micro,"
                                  "intent_f1_macro,speaker_acc");
  for (const auto& row : result.metrics) {
    metrics << row.step << ',' << row.epoch << ',' << detail::csv_double(row.lr) << ','
            << detail::csv_double(row.train_loss) << ',';
    if (row.epoch_eval) {
      metrics << detail::csv_double(row.epoch_eval->intent_f1_micro) << ','
              << detail::csv_double(row.epoch_eval->intent_f1_macro) << ','
              << detail::csv_double(row.epoch_eval->speaker_acc);
    } else {
      metrics << ",,";
    }
    metrics << "\n";
  }
  metrics.close();

  Model model{result.weights, result.head};
  auto params = model.params();
  checkpoint::save(cfg.out_dir + "/checkpoint.bin", cfg.canonical_json, params);

  if (result.diverged) {
    std::cerr << "training diverged: non-finite loss\n";
    return 3;
  }
  std::cout << "wrote " << cfg.out_dir << "/metrics.csv and checkpoint.bin ("
            << result.metrics.size() << " steps, " << result.epochs << " epochs)\n";
  return 0;
}

// ---------------------------------------------------------------------------
// curve
// ---------------------------------------------------------------------------

struct CurveCell {
  std::string variant;
  int fold = 0;
  int prefix = 0;
  double intent_f1 = 0.0;
  double speaker_acc = 0.0;
  bool diverged = false;
};

// One (variant, fold, prefix) training + evaluation unit. Deterministic in
// its own seeds, so units can run on any worker thread.
inline CurveCell run_curve_cell(const ExperimentConfig& cfg, const Dataset& data,
                                const BlockSplit& split, const std::string& variant,
                                int fold, int prefix) {
  EncoderConfig enc = cfg.encoder;
  enc.attention.variant = variant_from_name(variant);
  finalize_position(enc, data);

  TrainConfig tc = cfg.train;
  tc.seed = cfg.train.seed * 7919ull + detail::fnv1a(variant) % 7907ull +
            static_cast<std::uint64_t>(fold) * 131ull +
            static_cast<std::uint64_t>(prefix) * 17ull;

  Dataset train_set = subset(data, split.train_indices(fold, prefix));
  Dataset test_set = subset(data, split.test_indices(fold, prefix));

  TrainResult result = train(train_set, enc, tc);
  CurveCell cell;
  cell.variant = variant;
  cell.fold = fold;
  cell.prefix = prefix;
  cell.diverged = result.diverged;
  if (!result.diverged) {
    Model model{result.weights, result.head};
    EvalMetrics m = evaluate(model, enc, test_set);
    cell.intent_f1 = m.intent_f1_micro;
    cell.speaker_acc = m.speaker_acc;
  }
  return cell;
}

inline int cmd_learning_curve(const CliOptions& opts) {
  ExperimentConfig cfg = load_config(opts);
  Dataset data = load_data(cfg);
  finalize_position(cfg.encoder, data);
  cfg.canonical_json = detail::effective_json(cfg).dump();
  cfg.config_hash = detail::fnv1a(cfg.canonical_json);
  if (static_cast<int>(data.utterances.size()) < cfg.curve.n_blocks) {
    throw ConfigError("dataset smaller than curve.n_blocks");
  }
  for (int p : cfg.curve.prefix_blocks) {
    if (p < 1 || p >= cfg.curve.n_blocks) {
      throw ConfigError("curve.prefix_blocks entries must lie in [1, n_blocks)");
    }
  }
  detail::ensure_dir(cfg.out_dir);
  BlockSplit split = split_blocks(static_cast<int>(data.utterances.size()),
                                  cfg.curve.n_blocks, cfg.curve.n_folds, cfg.train.seed);

  struct Unit {
    std::string variant;
    int fold;
    int prefix;
  };
  std::vector<Unit> units;
  for (const auto& v : cfg.curve.variants)
    for (int f = 0; f < cfg.curve.n_folds; ++f)
      for (int p : cfg.curve.prefix_blocks) units.push_back({v, f, p});

  std::vector<CurveCell> cells(units.size());
  int threads = opts.threads > 0 ? opts.threads
                                 : static_cast<int>(std::thread::hardware_concurrency());
  threads = std::max(1, std::min<int>(threads, static_cast<int>(units.size())));

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    while (true) {
      std::size_t i = next.fetch_add(1);
      if (i >= units.size()) break;
      cells[i] = run_curve_cell(cfg, data, split, units[i].variant, units[i].fold,
                                units[i].prefix);
    }
  };
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  auto csv = detail::open_csv(cfg.out_dir + "/curve.csv", cfg,
                              "variant,fold,n_train_blocks,intent_f1,speaker_acc");
  for (const auto& c : cells) {
    csv << c.variant << ',' << c.fold << ',' << c.prefix << ','
        << detail::csv_double(c.intent_f1) << ',' << detail::csv_double(c.speaker_acc)
        << "\n";
  }
  for (const auto& v : cfg.curve.variants) {
    for (int p : cfg.curve.prefix_blocks) {
      double f1 = 0.0, acc = 0.0;
      int n = 0;
      for (const auto& c : cells) {
        if (c.variant == v && c.prefix == p) {
          f1 += c.intent_f1;
          acc += c.speaker_acc;
          ++n;
        }
      }
      csv << v << ",mean," << p << ',' << detail::csv_double(f1 / n) << ','
          << detail::csv_double(acc / n) << "\n";
    }
  }
  csv.close();
  std::cout << "wrote " << cfg.out_dir << "/curve.csv (" << cells.size()
            << " cells over " << threads << " threads)\n";
  for (const auto& c : cells) {
    if (c.diverged) {
      std::cerr << "divergence in variant=" << c.variant << " fold=" << c.fold
                << " prefix=" << c.prefix << "\n";
      return 3;
    }
  }
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

struct GradRow {
  std::string op;
  double max_rel_error;
};

inline int cmd_gradcheck(const CliOptions& opts) {
  ExperimentConfig cfg = load_config(opts);
  detail::ensure_dir(cfg.out_dir);
  const double threshold = 1e-4;
  const double eps = 1e-5;
  std::vector<GradRow> rows;
  Rng rng(cfg.train.seed + 99);

  auto rand_t = [&](std::vector<int> shape, bool rg = true) {
    Tensor t = Tensor::zeros(std::move(shape), rg);
    for (auto& v : t.data()) v = rng.uniform(-1.0, 1.0);
    return t;
  };

  // Primitive ops.
  {
    Tensor a = rand_t({3, 4}), b = rand_t({4, 3});
    rows.push_back({"matmul", grad_check([&] { return sum(matmul(a, b)); }, {a, b}, eps)});
  }
  {
    Tensor a = rand_t({3, 4}), b = rand_t({3, 4}), w = rand_t({3, 4}, false);
    rows.push_back({"elementwise",
                    grad_check([&] { return sum(mul(sub(add(a, b), scale(mul(a, b), 0.3)), w)); },
                               {a, b}, eps)});
  }
  {
    Tensor a = rand_t({4, 6}), w = rand_t({4, 6}, false);
    rows.push_back({"relu", grad_check([&] { return sum(mul(relu(a), w)); }, {a}, eps)});
  }
  {
    Tensor logits = rand_t({4, 5});
    Mask m = Mask::all(4, 5);
    m.set(1, 2, false);
    m.set(3, 0, false);
    Tensor w = rand_t({4, 5}, false);
    rows.push_back({"softmax_masked",
                    grad_check([&] { return sum(mul(softmax_masked(logits, m), w)); },
                               {logits}, eps)});
  }
  {
    Tensor x = rand_t({5, 4}), g = rand_t({5}), b = rand_t({5}), w = rand_t({5, 4}, false);
    rows.push_back({"layer_norm",
                    grad_check([&] { return sum(mul(layer_norm(x, g, b, 1e-6), w)); },
                               {x, g, b}, eps)});
  }
  {
    Tensor x = rand_t({2, 5, 7}), k = rand_t({3, 2, 3, 3}), b = rand_t({3});
    Tensor w = rand_t({3, 3, 4}, false);
    rows.push_back({"conv2d",
                    grad_check([&] { return sum(mul(conv2d(x, k, b, 2, 2), w)); },
                               {x, k, b}, eps)});
  }
  {
    Tensor x = rand_t({6});
    rows.push_back({"cross_entropy",
                    grad_check([&] { return cross_entropy(x, 1); }, {x}, eps)});
  }
  {
    Tensor q = rand_t({3, 6}), k = rand_t({3, 6}), v = rand_t({3, 6});
    Tensor w = rand_t({3, 6}, false);
    Mask bm = banded_mask(6, 2);
    rows.push_back(
        {"banded_attention",
         grad_check(
             [&] {
               Tensor s = softmax_masked(banded_scores(q, k, 2), bm);
               return sum(mul(banded_attend(v, s, 2), w));
             },
             {q, k, v}, eps)});
  }

  // Attention variants, one small head each, plus the multi-head composite.
  const int dm = 8, dh = 4, L = 5;
  auto make_head = [&](AttnVariant variant) {
    HeadWeights h;
    h.q_c = rand_t({dh, dm});
    h.k_c = rand_t({dh, dm});
    h.v = rand_t({dh, dm});
    if (variant == AttnVariant::concat_abs) {
      h.q_p = rand_t({6, 6});
      h.k_p = rand_t({6, 6});
    }
    if (variant == AttnVariant::light) {
      h.k_p = rand_t({6, 6});
      h.u = rand_t({6});
    }
    return h;
  };
  auto head_params = [](const HeadWeights& h) {
    std::vector<Tensor> ps = {h.q_c, h.k_c, h.v};
    if (h.q_p.defined()) ps.push_back(h.q_p);
    if (h.k_p.defined()) ps.push_back(h.k_p);
    if (h.u.defined()) ps.push_back(h.u);
    return ps;
  };
  PositionConfig pc{64, 4, 2};
  Tensor x_in = rand_t({dm, L}, false);
  Mask keep_all = Mask::all(L, L);
  {
    HeadWeights h = make_head(AttnVariant::absolute);
    Tensor p = sinusoidal_position(L, dm, 64).values;
    Tensor w = rand_t({dh, L}, false);
    rows.push_back({"attn_absolute",
                    grad_check([&] { return sum(mul(attn_absolute(x_in, p, h, keep_all), w)); },
                               head_params(h), eps)});
  }
  {
    HeadWeights h = make_head(AttnVariant::relative_dai);
    AttentionWeights shared;
    shared.dai_k_p = rand_t({dm, dm});
    shared.dai_u = rand_t({dm});
    shared.dai_v = rand_t({dm});
    Tensor prel = sinusoidal_relative_block(L - 1, dm, 64);
    Tensor w = rand_t({dh, L}, false);
    std::vector<Tensor> ps = head_params(h);
    ps.push_back(shared.dai_k_p);
    ps.push_back(shared.dai_u);
    ps.push_back(shared.dai_v);
    rows.push_back(
        {"attn_relative_dai",
         grad_check(
             [&] { return sum(mul(attn_relative_dai(x_in, prel, L - 1, shared, h, keep_all), w)); },
             ps, eps)});
  }
  {
    HeadWeights h = make_head(AttnVariant::concat_abs);
    Tensor p = light_position(L, pc).values;
    Tensor w = rand_t({dh, L}, false);
    rows.push_back({"attn_concat_abs",
                    grad_check([&] { return sum(mul(attn_concat_abs(x_in, p, h, keep_all), w)); },
                               head_params(h), eps)});
  }
  {
    HeadWeights h = make_head(AttnVariant::light);
    Tensor prel = relative_position_block(L - 1, pc);
    Tensor w = rand_t({dh, L}, false);
    rows.push_back({"attn_light",
                    grad_check([&] { return sum(mul(attn_light(x_in, prel, L - 1, h, keep_all), w)); },
                               head_params(h), eps)});
  }
  for (AttnVariant variant : {AttnVariant::absolute, AttnVariant::relative_dai,
                              AttnVariant::concat_abs, AttnVariant::light, AttnVariant::none}) {
    AttentionConfig acfg;
    acfg.variant = variant;
    acfg.n_heads = 2;
    acfg.d_head = dh;
    acfg.d_p_override = variant == AttnVariant::relative_dai ? dm : 0;
    acfg.window = 3;
    EncoderConfig ecfg;
    ecfg.attention = acfg;
    ecfg.position = pc;
    Rng wrng(cfg.train.seed + 7);
    AttentionWeights aw = lightattn::detail::init_attention(acfg, wrng);
    PositionInputs pos;
    if (variant == AttnVariant::absolute) pos.p_abs = sinusoidal_position(L, dm, 64).values;
    if (variant == AttnVariant::concat_abs) pos.p_abs = light_position(L, pc).values;
    if (variant == AttnVariant::light) {
      pos.p_rel = relative_position_block(L - 1, pc);
      pos.rel_radius = L - 1;
    }
    if (variant == AttnVariant::relative_dai) {
      pos.p_rel = sinusoidal_relative_block(L - 1, dm, 64);
      pos.rel_radius = L - 1;
    }
    std::vector<std::pair<std::string, Tensor>> named;
    aw.collect(named, "attn.");
    std::vector<Tensor> ps;
    for (auto& [name, t] : named) ps.push_back(t);
    Tensor w = rand_t({dm, L}, false);
    rows.push_back({std::string("multi_head_") + variant_name(variant),
                    grad_check([&] { return sum(mul(multi_head(x_in, pos, aw, acfg), w)); },
                               ps, eps)});
  }

  // One full layer and the 2-layer shared encoder.
  {
    EncoderConfig ecfg;
    ecfg.n_layers = 2;
    ecfg.share_layers = true;
    ecfg.d_ff = 16;
    ecfg.dropout = 0.0;
    ecfg.input_dim = 5;
    ecfg.conv_channels = {2, 3};
    ecfg.frontend = FrontendKind::conv;
    ecfg.position = pc;
    ecfg.attention.variant = AttnVariant::light;
    ecfg.attention.n_heads = 2;
    ecfg.attention.d_head = 4;
    ecfg.attention.window = 3;
    EncoderWeights ew = init_weights(ecfg, cfg.train.seed + 13);
    Tensor features = rand_t({5, 9}, false);

    {
      Tensor xl = rand_t({ecfg.d_model(), 4}, false);
      PositionInputs pos = build_position_inputs(ecfg, 4);
      std::vector<Tensor> ps;
      std::vector<std::pair<std::string, Tensor>> named;
      ew.layers[0].collect(named, "layer.");
      for (auto& [name, t] : named) ps.push_back(t);
      Tensor w = rand_t({ecfg.d_model(), 4}, false);
      rows.push_back(
          {"encoder_layer",
           grad_check(
               [&] {
                 return sum(mul(encoder_layer(xl, pos, ew.layers[0], ecfg, false), w));
               },
               ps, eps)});
    }
    {
      std::vector<Tensor> ps;
      for (auto& [name, t] : ew.params()) ps.push_back(t);
      Tensor w = rand_t({ecfg.d_model() + 6, 3}, false);
      rows.push_back(
          {"encoder_2layer_shared",
           grad_check([&] { return sum(mul(encode(features, ecfg, ew, false), w)); }, ps,
                      eps)});
    }
  }

  if (opts.corrupt_backward) {
    Tensor x = rand_t({4});
    auto corrupted = [&](const Tensor& t) {
      Tensor out = make_op(t.shape(), "corrupted", {t}, [](lightattn::detail::Node& n) {
        auto& g = n.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += 1.75 * n.grad[i];
      });
      out.data() = t.data();
      return out;
    };
    rows.push_back({"corrupted_control",
                    grad_check([&] { return sum(corrupted(x)); }, {x}, eps)});
  }

  auto csv = detail::open_csv(cfg.out_dir + "/gradcheck.csv", cfg,
                              "op,max_rel_error,threshold,pass");
  bool all_ok = true;
  for (const auto& row : rows) {
    bool ok = row.max_rel_error < threshold;
    all_ok = all_ok && ok;
    csv << row.op << ',' << detail::csv_double(row.max_rel_error) << ','
        << detail::csv_double(threshold) << ',' << (ok ? 1 : 0) << "\n";
    std::printf("%-28s %12.3e %s\n", row.op.c_str(), row.max_rel_error,
                ok ? "ok" : "FAIL");
  }
  csv.close();
  return all_ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// params
// ---------------------------------------------------------------------------

inline int cmd_params(const CliOptions& opts) {
  ExperimentConfig cfg = load_config(opts);
  detail::ensure_dir(cfg.out_dir);
  auto csv = detail::open_csv(cfg.out_dir + "/params.csv", cfg,
                              "variant,encoder_total,attention_layer,position_extras");
  std::int64_t light_extras = 0, concat_extras = 0, dai_extras = 0;
  std::int64_t light_total = 0, dai_total = 0;
  for (const char* name : {"absolute", "relative_dai", "concat_abs", "light", "none"}) {
    EncoderConfig enc = cfg.encoder;
    enc.attention.variant = variant_from_name(name);
    if (enc.position.T <= 0) enc.position.T = 512;
    std::int64_t total = count_encoder_parameters(enc);
    std::int64_t layer = count_parameters(enc.attention);
    std::int64_t extras = position_extras(enc.attention);
    csv << name << ',' << total << ',' << layer << ',' << extras << "\n";
    std::printf("%-14s total=%-10lld attn_layer=%-9lld extras=%lld\n", name,
                static_cast<long long>(total), static_cast<long long>(layer),
                static_cast<long long>(extras));
    if (enc.attention.variant == AttnVariant::light) {
      light_extras = extras;
      light_total = total;
    }
    if (enc.attention.variant == AttnVariant::concat_abs) concat_extras = extras;
    if (enc.attention.variant == AttnVariant::relative_dai) {
      dai_extras = extras;
      dai_total = total;
    }
  }
  bool ordering = light_extras <= concat_extras && concat_extras < dai_extras &&
                  light_total < dai_total;
  csv << "# ordering light<=concat_abs<relative_dai: " << (ordering ? "ok" : "VIOLATED")
      << "\n";
  csv.close();
  std::printf("ordering light<=concat_abs<relative_dai: %s\n", ordering ? "ok" : "VIOLATED");
  return ordering ? 0 : 1;
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

inline int cmd_bench(const CliOptions& opts) {
  ExperimentConfig cfg = load_config(opts);
  detail::ensure_dir(cfg.out_dir);
  auto csv = detail::open_csv(cfg.out_dir + "/bench.csv", cfg,
                              "mode,L,heads,batch,window,score_elements,"
                              "expected_elements,wall_ms");
  Rng rng(cfg.train.seed + 5);
  bool all_ok = true;
  for (int L : cfg.bench.lengths) {
    for (int n_heads : cfg.bench.heads) {
      AttentionConfig acfg;
      acfg.variant = AttnVariant::light;
      acfg.n_heads = n_heads;
      acfg.d_head = cfg.bench.d_head;
      PositionConfig pc{std::max(2 * L, 8), 4, 2};
      Rng wrng(11);
      AttentionWeights aw = lightattn::detail::init_attention(acfg, wrng);
      Tensor x = Tensor::zeros({acfg.d_model(), L});
      for (auto& v : x.data()) v = rng.uniform(-1.0, 1.0);
      PositionInputs pos;
      pos.p_rel = relative_position_block(L - 1, pc);
      pos.rel_radius = L - 1;

      for (bool windowed : {false, true}) {
        AttentionConfig run_cfg = acfg;
        run_cfg.window = windowed ? std::optional<int>(cfg.bench.window) : std::nullopt;
        run_cfg.banded = windowed;
        AttentionStats stats;
        auto t0 = std::chrono::steady_clock::now();
        NoGradGuard ng;
        for (int b = 0; b < cfg.bench.batch; ++b) {
          Tensor out = multi_head(x, pos, aw, run_cfg, &stats);
          (void)out;
        }
        auto t1 = std::chrono::steady_clock::now();
        double ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        std::uint64_t expected =
            windowed ? static_cast<std::uint64_t>(cfg.bench.batch) * n_heads * L * cfg.bench.window
                     : static_cast<std::uint64_t>(cfg.bench.batch) * n_heads * L * L;
        bool ok = stats.score_elements == expected;
        all_ok = all_ok && ok;
        csv << (windowed ? "windowed" : "full") << ',' << L << ',' << n_heads << ','
            << cfg.bench.batch << ',' << (windowed ? cfg.bench.window : 0) << ','
            << stats.score_elements << ',' << expected << ','
            << detail::csv_double(ms) << "\n";
        std::printf("%-8s L=%-4d heads=%d elements=%llu expected=%llu %s %.2f ms\n",
                    windowed ? "windowed" : "full", L, n_heads,
                    static_cast<unsigned long long>(stats.score_elements),
                    static_cast<unsigned long long>(expected), ok ? "ok" : "MISMATCH", ms);
      }
    }
  }
  csv.close();
  return all_ok ? 0 : 1;
}

}  // namespace lightattn::exp
