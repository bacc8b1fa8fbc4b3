#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "lightattn/rng.hpp"
#include "lightattn/tensor.hpp"

namespace lightattn {

struct Utterance {
  std::string id;
  Tensor features;  // [input_dim x L]
  int intent = 0;
  int speaker = 0;
};

struct Dataset {
  std::vector<Utterance> utterances;
  int n_intents = 0;
  int n_speakers = 0;
  int input_dim = 0;

  int max_length() const {
    int m = 0;
    for (const auto& u : utterances) m = std::max(m, u.features.cols());
    return m;
  }
};

// ---------------------------------------------------------------------------
// Feature files
// ---------------------------------------------------------------------------
// Line 1:    FEAT 1 <input_dim> <L>
// Lines 2..: L time-major rows of input_dim space-separated decimals.

namespace detail {
inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}
}  // namespace detail

inline void write_features(const std::string& path, const Tensor& features) {
  if (features.ndim() != 2) throw DimensionError("write_features: expected [input_dim x L]");
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("write_features: cannot open " + path);
  const int d = features.rows(), L = features.cols();
  os << "FEAT 1 " << d << " " << L << "\n";
  for (int t = 0; t < L; ++t) {
    for (int r = 0; r < d; ++r) {
      if (r) os << ' ';
      os << detail::fmt_double(features.at(r, t));
    }
    os << "\n";
  }
  if (!os) throw DataError("write_features: write failure on " + path);
}

inline Tensor read_features(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("read_features: cannot open " + path);
  std::string tag;
  int version = 0, d = 0, L = 0;
  if (!(is >> tag >> version >> d >> L) || tag != "FEAT" || version != 1) {
    throw FormatError(path + ":1: header must be 'FEAT 1 <input_dim> <L>'");
  }
  if (d < 1 || L < 1) throw FormatError(path + ":1: dimensions must be positive");
  Tensor out = Tensor::zeros({d, L});
  for (int t = 0; t < L; ++t) {
    for (int r = 0; r < d; ++r) {
      double v;
      if (!(is >> v)) {
        throw FormatError(path + ": value " + std::to_string(t * d + r + 1) +
                          " of " + std::to_string(d * L) + " missing or malformed (line " +
                          std::to_string(t + 2) + ")");
      }
      if (!std::isfinite(v)) {
        throw FormatError(path + ": non-finite value at line " + std::to_string(t + 2));
      }
      out.at(r, t) = v;
    }
  }
  std::string rest;
  if (is >> rest) {
    throw FormatError(path + ": trailing garbage after " + std::to_string(d * L) +
                      " values: '" + rest + "'");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------
// CSV with header id,path,intent,speaker; one optional metadata comment line
// declaring the class counts and feature width. Paths are relative to the
// manifest's directory.

struct ManifestRecord {
  std::string id;
  std::string path;
  int intent = 0;
  int speaker = 0;
};

struct Manifest {
  std::vector<ManifestRecord> records;
  int n_intents = 0;
  int n_speakers = 0;
  int input_dim = 0;
};

inline void write_manifest(const std::string& path, const Manifest& m) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("write_manifest: cannot open " + path);
  os << "# lightattn-manifest n_intents=" << m.n_intents
     << " n_speakers=" << m.n_speakers << " input_dim=" << m.input_dim << "\n";
  os << "id,path,intent,speaker\n";
  for (const auto& r : m.records) {
    os << r.id << ',' << r.path << ',' << r.intent << ',' << r.speaker << "\n";
  }
  if (!os) throw DataError("write_manifest: write failure on " + path);
}

inline Manifest read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("read_manifest: cannot open " + path);
  Manifest m;
  std::string line;
  int lineno = 0;
  bool header_seen = false;
  std::unordered_set<std::string> ids;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream meta(line.substr(1));
      std::string tok;
      while (meta >> tok) {
        auto eq = tok.find('=');
        if (eq == std::string::npos) continue;
        std::string key = tok.substr(0, eq);
        int value = std::atoi(tok.c_str() + eq + 1);
        if (key == "n_intents") m.n_intents = value;
        if (key == "n_speakers") m.n_speakers = value;
        if (key == "input_dim") m.input_dim = value;
      }
      continue;
    }
    if (!header_seen) {
      if (line != "id,path,intent,speaker") {
        throw FormatError(path + ":" + std::to_string(lineno) +
                          ": expected header 'id,path,intent,speaker'");
      }
      header_seen = true;
      continue;
    }
    std::vector<std::string> fields;
    std::string field;
    std::istringstream row(line);
    while (std::getline(row, field, ',')) fields.push_back(field);
    if (fields.size() != 4) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": expected 4 fields, got " +
                        std::to_string(fields.size()));
    }
    ManifestRecord r;
    r.id = fields[0];
    r.path = fields[1];
    try {
      r.intent = std::stoi(fields[2]);
      r.speaker = std::stoi(fields[3]);
    } catch (const std::exception&) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": labels must be integers");
    }
    if (r.intent < 0 || r.speaker < 0) {
      throw DataError(path + ":" + std::to_string(lineno) + ": negative label for id " + r.id);
    }
    if (!ids.insert(r.id).second) {
      throw DataError(path + ": duplicate id '" + r.id + "' at line " + std::to_string(lineno));
    }
    m.records.push_back(std::move(r));
  }
  if (!header_seen) throw FormatError(path + ": missing header line");
  for (const auto& r : m.records) {
    if (m.n_intents == 0) continue;
    if (r.intent >= m.n_intents || r.speaker >= m.n_speakers) {
      throw DataError(path + ": label out of declared range for id " + r.id);
    }
  }
  if (m.n_intents == 0) {
    for (const auto& r : m.records) {
      m.n_intents = std::max(m.n_intents, r.intent + 1);
      m.n_speakers = std::max(m.n_speakers, r.speaker + 1);
    }
  }
  return m;
}

// Materializes a manifest: reads every referenced feature file.
inline Dataset load_dataset(const std::string& manifest_path) {
  Manifest m = read_manifest(manifest_path);
  std::filesystem::path base = std::filesystem::path(manifest_path).parent_path();
  Dataset ds;
  ds.n_intents = m.n_intents;
  ds.n_speakers = m.n_speakers;
  ds.input_dim = m.input_dim;
  for (const auto& r : m.records) {
    std::filesystem::path fp = base / r.path;
    if (!std::filesystem::exists(fp)) {
      throw DataError("manifest " + manifest_path + ": feature file missing for id '" +
                      r.id + "': " + fp.string());
    }
    Utterance u;
    u.id = r.id;
    u.features = read_features(fp.string());
    u.intent = r.intent;
    u.speaker = r.speaker;
    if (ds.input_dim == 0) ds.input_dim = u.features.rows();
    if (u.features.rows() != ds.input_dim) {
      throw DataError("manifest " + manifest_path + ": feature width mismatch for id '" +
                      r.id + "'");
    }
    ds.utterances.push_back(std::move(u));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic order-sensitive tasks
// ---------------------------------------------------------------------------

enum class SyntheticTask { order, presence, speakerized };

inline SyntheticTask synthetic_task_from_name(const std::string& s) {
  if (s == "order") return SyntheticTask::order;
  if (s == "presence") return SyntheticTask::presence;
  if (s == "speakerized") return SyntheticTask::speakerized;
  throw ParameterError("unknown synthetic task: " + s);
}

struct SyntheticSpec {
  SyntheticTask task = SyntheticTask::order;
  int n_utterances = 2000;
  int n_intents = 8;
  int n_speakers = 4;
  int input_dim = 40;
  int token_dur_lo = 10;  // frames per token, inclusive bounds
  int token_dur_hi = 30;
  double noise_sigma = 0.1;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::vector<std::vector<int>> order_templates(int n_intents) {
  // Smallest token count whose permutations cover the intent set; every
  // intent shares the same multiset, so only order separates them.
  int m = 1;
  std::int64_t fact = 1;
  while (fact < n_intents) {
    ++m;
    fact *= m;
  }
  std::vector<int> perm(m);
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<std::vector<int>> out;
  do {
    out.push_back(perm);
  } while (static_cast<int>(out.size()) < n_intents &&
           std::next_permutation(perm.begin(), perm.end()));
  return out;
}

inline std::vector<Tensor> make_prototypes(int count, int dim, Rng& rng) {
  std::vector<Tensor> protos;
  protos.reserve(count);
  for (int i = 0; i < count; ++i) {
    Tensor p = Tensor::zeros({dim});
    for (auto& v : p.data()) v = 0.8 * rng.normal();
    protos.push_back(p);
  }
  return protos;
}

}  // namespace detail

// Sequences of Gaussian-perturbed token prototypes. The 'order' task keeps
// one token multiset for every intent (order is the only signal); 'presence'
// marks each intent with a unique token; 'speakerized' layers a per-speaker
// affine channel distortion over the order task.
inline Dataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.n_utterances < spec.n_intents) {
    throw ParameterError("generate_synthetic: need at least one utterance per intent");
  }
  if (spec.n_intents < 2 || spec.n_speakers < 1 || spec.input_dim < 1) {
    throw ParameterError("generate_synthetic: counts out of range");
  }
  if (spec.token_dur_lo < 1 || spec.token_dur_hi < spec.token_dur_lo) {
    throw ParameterError("generate_synthetic: bad token duration range");
  }
  Rng proto_rng = Rng::derive_from(spec.seed, "synthetic-protos");
  Rng frame_rng = Rng::derive_from(spec.seed, "synthetic-frames");
  Rng label_rng = Rng::derive_from(spec.seed, "synthetic-labels");

  const bool presence = spec.task == SyntheticTask::presence;
  const bool speakerized = spec.task == SyntheticTask::speakerized;

  std::vector<std::vector<int>> templates;
  int n_tokens;
  if (presence) {
    // marker token per intent plus three shared fillers, shuffled per
    // utterance: identity alone decides the intent.
    n_tokens = spec.n_intents + 3;
    templates.resize(spec.n_intents);
    for (int i = 0; i < spec.n_intents; ++i) {
      templates[i] = {i, spec.n_intents, spec.n_intents + 1, spec.n_intents + 2};
    }
  } else {
    templates = detail::order_templates(spec.n_intents);
    n_tokens = static_cast<int>(templates[0].size());
  }
  std::vector<Tensor> protos = detail::make_prototypes(n_tokens, spec.input_dim, proto_rng);

  // Per-speaker channel distortion (speakerized task only).
  std::vector<std::vector<double>> spk_gain(spec.n_speakers), spk_bias(spec.n_speakers);
  for (int s = 0; s < spec.n_speakers; ++s) {
    spk_gain[s].resize(spec.input_dim);
    spk_bias[s].resize(spec.input_dim);
    for (int r = 0; r < spec.input_dim; ++r) {
      spk_gain[s][r] = speakerized ? proto_rng.uniform(0.7, 1.3) : 1.0;
      spk_bias[s][r] = speakerized ? proto_rng.uniform(-0.3, 0.3) : 0.0;
    }
  }

  // Balanced assignment: round-robin intents over a shuffled slot order, and
  // an independently shuffled round-robin for speakers so the two labels stay
  // uncorrelated.
  std::vector<int> slots(spec.n_utterances);
  std::iota(slots.begin(), slots.end(), 0);
  label_rng.shuffle(slots);
  std::vector<int> speaker_of(spec.n_utterances);
  for (int i = 0; i < spec.n_utterances; ++i) speaker_of[i] = i % spec.n_speakers;
  label_rng.shuffle(speaker_of);

  Dataset ds;
  ds.n_intents = spec.n_intents;
  ds.n_speakers = spec.n_speakers;
  ds.input_dim = spec.input_dim;
  ds.utterances.resize(spec.n_utterances);
  for (int slot = 0; slot < spec.n_utterances; ++slot) {
    int idx = slots[slot];
    int intent = slot % spec.n_intents;
    int speaker = speaker_of[slot];

    std::vector<int> tokens = templates[intent];
    if (presence) frame_rng.shuffle(tokens);

    int L = 0;
    std::vector<int> durations(tokens.size());
    for (std::size_t k = 0; k < tokens.size(); ++k) {
      durations[k] = spec.token_dur_lo +
                     static_cast<int>(frame_rng.below(
                         static_cast<std::uint64_t>(spec.token_dur_hi - spec.token_dur_lo + 1)));
      L += durations[k];
    }
    Tensor feat = Tensor::zeros({spec.input_dim, L});
    int t = 0;
    for (std::size_t k = 0; k < tokens.size(); ++k) {
      const Tensor& proto = protos[tokens[k]];
      for (int f = 0; f < durations[k]; ++f, ++t) {
        for (int r = 0; r < spec.input_dim; ++r) {
          double v = proto.at(r) + spec.noise_sigma * frame_rng.normal();
          feat.at(r, t) = spk_gain[speaker][r] * v + spk_bias[speaker][r];
        }
      }
    }
    Utterance u;
    u.id = "utt" + std::to_string(idx);
    u.features = std::move(feat);
    u.intent = intent;
    u.speaker = speaker;
    ds.utterances[idx] = std::move(u);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Learning-curve block splits
// ---------------------------------------------------------------------------

struct BlockSplit {
  std::vector<std::vector<int>> blocks;            // utterance indices per block
  std::vector<std::vector<int>> fold_block_order;  // per fold: block visit order
  std::vector<std::uint64_t> fold_seeds;

  int n_blocks() const { return static_cast<int>(blocks.size()); }
  int n_folds() const { return static_cast<int>(fold_block_order.size()); }

  std::vector<int> train_indices(int fold, int prefix_blocks) const {
    std::vector<int> out;
    for (int b = 0; b < prefix_blocks; ++b) {
      const auto& blk = blocks[fold_block_order[fold][b]];
      out.insert(out.end(), blk.begin(), blk.end());
    }
    return out;
  }

  std::vector<int> test_indices(int fold, int prefix_blocks) const {
    std::vector<int> out;
    for (int b = prefix_blocks; b < n_blocks(); ++b) {
      const auto& blk = blocks[fold_block_order[fold][b]];
      out.insert(out.end(), blk.begin(), blk.end());
    }
    return out;
  }
};

// Seeded shuffle, contiguous partition into near-equal blocks, and one
// re-shuffled block order per fold (fold-indexed seeds, recorded).
inline BlockSplit split_blocks(int dataset_size, int n_blocks, int n_folds,
                               std::uint64_t seed) {
  if (n_blocks < 1 || n_folds < 1) {
    throw ParameterError("split_blocks: blocks and folds must be >= 1");
  }
  if (dataset_size < n_blocks) {
    throw ParameterError("split_blocks: dataset smaller than block count");
  }
  std::vector<int> order(dataset_size);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng::derive_from(seed, "block-shuffle");
  rng.shuffle(order);

  BlockSplit split;
  split.blocks.resize(n_blocks);
  int base = dataset_size / n_blocks;
  int extra = dataset_size % n_blocks;
  int pos = 0;
  for (int b = 0; b < n_blocks; ++b) {
    int size = base + (b < extra ? 1 : 0);
    split.blocks[b].assign(order.begin() + pos, order.begin() + pos + size);
    pos += size;
  }
  for (int f = 0; f < n_folds; ++f) {
    std::vector<int> blocks(n_blocks);
    std::iota(blocks.begin(), blocks.end(), 0);
    std::uint64_t fold_seed = seed * 1000003ull + static_cast<std::uint64_t>(f);
    Rng frng = Rng::derive_from(fold_seed, "fold-order");
    frng.shuffle(blocks);
    split.fold_block_order.push_back(std::move(blocks));
    split.fold_seeds.push_back(fold_seed);
  }
  return split;
}

inline Dataset subset(const Dataset& ds, const std::vector<int>& indices) {
  Dataset out;
  out.n_intents = ds.n_intents;
  out.n_speakers = ds.n_speakers;
  out.input_dim = ds.input_dim;
  out.utterances.reserve(indices.size());
  for (int i : indices) out.utterances.push_back(ds.utterances[i]);
  return out;
}

}  // namespace lightattn
