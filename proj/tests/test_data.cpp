#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "lightattn/data.hpp"
#include "lightattn/training.hpp"

using namespace lightattn;

namespace {

std::filesystem::path scratch_dir() {
  auto dir = std::filesystem::temp_directory_path() / "lightattn_data_test";
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("generate_synthetic is deterministic per seed") {
  SyntheticSpec spec;
  spec.n_utterances = 24;
  spec.n_intents = 6;
  spec.n_speakers = 3;
  spec.input_dim = 8;
  spec.seed = 77;
  Dataset a = generate_synthetic(spec);
  Dataset b = generate_synthetic(spec);
  REQUIRE(a.utterances.size() == b.utterances.size());
  for (std::size_t i = 0; i < a.utterances.size(); ++i) {
    CHECK(a.utterances[i].id == b.utterances[i].id);
    CHECK(a.utterances[i].intent == b.utterances[i].intent);
    CHECK(a.utterances[i].speaker == b.utterances[i].speaker);
    CHECK(a.utterances[i].features.data() == b.utterances[i].features.data());
  }
  spec.seed = 78;
  Dataset c = generate_synthetic(spec);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.utterances.size(); ++i) {
    any_diff = any_diff || a.utterances[i].features.data() != c.utterances[i].features.data();
  }
  CHECK(any_diff);
}

TEST_CASE("synthetic labels are balanced within one") {
  SyntheticSpec spec;
  spec.n_utterances = 41;  // deliberately not divisible
  spec.n_intents = 7;
  spec.n_speakers = 4;
  spec.seed = 3;
  Dataset ds = generate_synthetic(spec);
  std::vector<int> intent_count(7, 0), speaker_count(4, 0);
  for (const auto& u : ds.utterances) {
    ++intent_count[u.intent];
    ++speaker_count[u.speaker];
  }
  auto [imin, imax] = std::minmax_element(intent_count.begin(), intent_count.end());
  auto [smin, smax] = std::minmax_element(speaker_count.begin(), speaker_count.end());
  CHECK(*imax - *imin <= 1);
  CHECK(*smax - *smin <= 1);
}

TEST_CASE("synthetic sequence lengths respect the token duration bounds") {
  SyntheticSpec spec;
  spec.n_utterances = 30;
  spec.n_intents = 8;  // 4-token templates
  spec.n_speakers = 2;
  spec.token_dur_lo = 10;
  spec.token_dur_hi = 30;
  spec.seed = 5;
  Dataset ds = generate_synthetic(spec);
  for (const auto& u : ds.utterances) {
    CHECK(u.features.cols() >= 40);
    CHECK(u.features.cols() <= 120);
    CHECK(u.features.rows() == spec.input_dim);
  }
}

TEST_CASE("order task templates share one token multiset") {
  // All intents must be separable only by order; rendered utterances of a
  // given intent follow that intent's fixed token sequence.
  SyntheticSpec spec;
  spec.n_utterances = 48;
  spec.n_intents = 8;
  spec.n_speakers = 2;
  spec.noise_sigma = 0.0;  // expose the raw prototypes
  spec.token_dur_lo = 2;
  spec.token_dur_hi = 2;
  spec.seed = 11;
  Dataset ds = generate_synthetic(spec);
  // collect the distinct frame vectors per utterance = its token sequence
  auto token_sequence = [&](const Utterance& u) {
    std::vector<std::vector<double>> seq;
    for (int t = 0; t < u.features.cols(); t += 2) {
      std::vector<double> col(u.features.rows());
      for (int r = 0; r < u.features.rows(); ++r) col[r] = u.features.at(r, t);
      seq.push_back(col);
    }
    return seq;
  };
  std::map<int, std::vector<std::vector<double>>> by_intent;
  for (const auto& u : ds.utterances) {
    auto seq = token_sequence(u);
    CHECK(seq.size() == 4);
    if (by_intent.count(u.intent)) {
      CHECK(by_intent[u.intent] == seq);  // same intent, same order
    } else {
      by_intent[u.intent] = seq;
    }
  }
  // same multiset across intents: sorted sequences agree
  auto sorted0 = by_intent[0];
  std::sort(sorted0.begin(), sorted0.end());
  for (auto& [intent, seq] : by_intent) {
    auto s = seq;
    std::sort(s.begin(), s.end());
    CHECK(s == sorted0);
    if (intent != 0) CHECK(seq != by_intent[0]);  // different order
  }
}

TEST_CASE("feature files round-trip exactly and reject malformed input") {
  auto dir = scratch_dir();
  Rng rng(13);
  Tensor f = Tensor::zeros({2, 3});
  for (auto& v : f.data()) v = rng.uniform(-5, 5);
  std::string path = (dir / "feat.txt").string();
  write_features(path, f);
  Tensor g = read_features(path);
  REQUIRE(g.shape() == f.shape());
  CHECK(g.data() == f.data());  // value-exact

  std::string bad = (dir / "bad.txt").string();
  {
    std::ofstream os(bad);
    os << "FEAT 1 2 3\n1 2\n3 4\n5\n";  // five values instead of six
  }
  CHECK_THROWS_AS(read_features(bad), FormatError);
  {
    std::ofstream os(bad);
    os << "FEAT 1 2 3\n1 2\n3 4\n5 6\nextra\n";  // trailing garbage
  }
  CHECK_THROWS_AS(read_features(bad), FormatError);
  {
    std::ofstream os(bad);
    os << "FEAT 2 2 3\n1 2\n3 4\n5 6\n";  // wrong version
  }
  CHECK_THROWS_AS(read_features(bad), FormatError);
  {
    std::ofstream os(bad);
    os << "NOPE 1 2 3\n";
  }
  CHECK_THROWS_AS(read_features(bad), FormatError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("manifest round trip preserves records") {
  auto dir = scratch_dir();
  Manifest m;
  m.n_intents = 3;
  m.n_speakers = 2;
  m.input_dim = 4;
  m.records = {{"a", "a.txt", 0, 0}, {"b", "b.txt", 2, 1}, {"c", "c.txt", 1, 0}};
  std::string path = (dir / "manifest.csv").string();
  write_manifest(path, m);
  Manifest r = read_manifest(path);
  CHECK(r.n_intents == 3);
  CHECK(r.n_speakers == 2);
  CHECK(r.input_dim == 4);
  REQUIRE(r.records.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(r.records[i].id == m.records[i].id);
    CHECK(r.records[i].path == m.records[i].path);
    CHECK(r.records[i].intent == m.records[i].intent);
    CHECK(r.records[i].speaker == m.records[i].speaker);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("manifest edge cases") {
  auto dir = scratch_dir();
  std::string path = (dir / "m.csv").string();
  {
    std::ofstream os(path);
    os << "id,path,intent,speaker\n";  // header only
  }
  Manifest empty = read_manifest(path);
  CHECK(empty.records.empty());

  {
    std::ofstream os(path);
    os << "id,path,intent,speaker\nx,a.txt,0,0\nx,b.txt,1,0\n";
  }
  try {
    read_manifest(path);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("'x'") != std::string::npos);
  }

  {
    std::ofstream os(path);
    os << "# n_intents=2 n_speakers=1 input_dim=3\n"
       << "id,path,intent,speaker\ny,a.txt,5,0\n";
  }
  CHECK_THROWS_AS(read_manifest(path), DataError);

  {
    std::ofstream os(path);
    os << "id,path,intent\nz,a.txt,0\n";
  }
  CHECK_THROWS_AS(read_manifest(path), FormatError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("load_dataset reads features relative to the manifest") {
  auto dir = scratch_dir();
  Rng rng(17);
  Manifest m;
  m.n_intents = 2;
  m.n_speakers = 1;
  m.input_dim = 3;
  for (int i = 0; i < 2; ++i) {
    Tensor f = Tensor::zeros({3, 4});
    for (auto& v : f.data()) v = rng.uniform(-1, 1);
    std::string name = "u" + std::to_string(i) + ".txt";
    write_features((dir / name).string(), f);
    m.records.push_back({"u" + std::to_string(i), name, i % 2, 0});
  }
  std::string mp = (dir / "data.csv").string();
  write_manifest(mp, m);
  Dataset ds = load_dataset(mp);
  REQUIRE(ds.utterances.size() == 2);
  CHECK(ds.input_dim == 3);
  CHECK(ds.utterances[1].intent == 1);

  m.records.push_back({"ghost", "missing.txt", 0, 0});
  write_manifest(mp, m);
  CHECK_THROWS_AS(load_dataset(mp), DataError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("split_blocks partitions the dataset") {
  BlockSplit one_per = split_blocks(150, 150, 5, 3);
  for (const auto& blk : one_per.blocks) CHECK(blk.size() == 1);

  for (auto [size, blocks] : {std::pair{157, 10}, std::pair{23, 7}, std::pair{150, 150},
                              std::pair{2000, 150}}) {
    BlockSplit split = split_blocks(size, blocks, 5, 11);
    std::set<int> seen;
    std::size_t smallest = size, largest = 0;
    for (const auto& blk : split.blocks) {
      smallest = std::min(smallest, blk.size());
      largest = std::max(largest, blk.size());
      for (int idx : blk) CHECK(seen.insert(idx).second);
    }
    CHECK(static_cast<int>(seen.size()) == size);
    CHECK(largest - smallest <= 1);
  }

  CHECK_THROWS_AS(split_blocks(100, 150, 5, 1), ParameterError);
}

TEST_CASE("fold prefixes and complements are disjoint and exhaustive") {
  BlockSplit split = split_blocks(97, 12, 5, 19);
  for (int fold = 0; fold < 5; ++fold) {
    for (int k = 1; k < 12; ++k) {
      auto train = split.train_indices(fold, k);
      auto test = split.test_indices(fold, k);
      std::set<int> tr(train.begin(), train.end());
      std::set<int> te(test.begin(), test.end());
      CHECK(tr.size() + te.size() == 97);
      for (int idx : te) CHECK(tr.count(idx) == 0);
    }
  }
  // fold orders are reproducible and recorded
  BlockSplit again = split_blocks(97, 12, 5, 19);
  CHECK(split.fold_block_order == again.fold_block_order);
  CHECK(split.fold_seeds == again.fold_seeds);
  // different folds visit blocks in different orders
  CHECK(split.fold_block_order[0] != split.fold_block_order[1]);
}

TEST_CASE("presence task is solvable by a position-free encoder") {
  SyntheticSpec spec;
  spec.task = SyntheticTask::presence;
  spec.n_utterances = 240;
  spec.n_intents = 4;
  spec.n_speakers = 2;
  spec.input_dim = 8;
  spec.token_dur_lo = 2;
  spec.token_dur_hi = 4;
  spec.noise_sigma = 0.05;
  spec.seed = 23;
  Dataset ds = generate_synthetic(spec);

  Dataset train_set = subset(ds, [] {
    std::vector<int> idx(160);
    std::iota(idx.begin(), idx.end(), 0);
    return idx;
  }());
  Dataset test_set = subset(ds, [] {
    std::vector<int> idx(80);
    std::iota(idx.begin(), idx.end(), 160);
    return idx;
  }());

  EncoderConfig enc;
  enc.n_layers = 1;
  enc.d_ff = 16;
  enc.dropout = 0.0;
  enc.input_dim = 8;
  enc.frontend = FrontendKind::linear;
  enc.position = PositionConfig{32, 4, 2};
  enc.attention.variant = AttnVariant::none;  // no position signal anywhere
  enc.attention.n_heads = 2;
  enc.attention.d_head = 4;
  enc.attention.window = std::nullopt;

  TrainConfig tc;
  tc.total_steps = 300;
  tc.batch_size = 8;
  tc.warmup_steps = 30;
  tc.seed = 29;
  TrainResult res = train(train_set, enc, tc);
  REQUIRE_FALSE(res.diverged);
  Model model{res.weights, res.head};
  EvalMetrics m = evaluate(model, enc, test_set);
  CHECK(m.intent_f1_micro > 0.9);
}
