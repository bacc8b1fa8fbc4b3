#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "lightattn/checkpoint.hpp"
#include "lightattn/encoder.hpp"
#include "lightattn/gradcheck.hpp"

using namespace lightattn;

namespace {

EncoderConfig toy_config(AttnVariant variant = AttnVariant::light) {
  EncoderConfig cfg;
  cfg.n_layers = 2;
  cfg.share_layers = true;
  cfg.d_ff = 16;
  cfg.dropout = 0.0;
  cfg.input_dim = 5;
  cfg.conv_channels = {2, 3};
  cfg.frontend = FrontendKind::conv;
  cfg.position = PositionConfig{64, 4, 2};
  cfg.attention.variant = variant;
  cfg.attention.n_heads = 2;
  cfg.attention.d_head = 4;
  cfg.attention.window = 3;
  return cfg;
}

Tensor rnd(std::vector<int> shape, Rng& rng, bool rg = false) {
  Tensor t = Tensor::zeros(std::move(shape), rg);
  for (auto& v : t.data()) v = rng.uniform(-1.0, 1.0);
  return t;
}

Tensor clone_param(const Tensor& t) { return Tensor::from(t.shape(), t.data(), true); }

LayerWeights clone_layer(const LayerWeights& src) {
  LayerWeights out;
  out.attn.w_out = clone_param(src.attn.w_out);
  for (const auto& h : src.attn.heads) {
    HeadWeights hc;
    hc.q_c = clone_param(h.q_c);
    hc.k_c = clone_param(h.k_c);
    hc.v = clone_param(h.v);
    if (h.q_p.defined()) hc.q_p = clone_param(h.q_p);
    if (h.k_p.defined()) hc.k_p = clone_param(h.k_p);
    if (h.u.defined()) hc.u = clone_param(h.u);
    out.attn.heads.push_back(hc);
  }
  if (src.attn.dai_k_p.defined()) {
    out.attn.dai_k_p = clone_param(src.attn.dai_k_p);
    out.attn.dai_u = clone_param(src.attn.dai_u);
    out.attn.dai_v = clone_param(src.attn.dai_v);
  }
  if (src.attn.shared_k_p.defined()) {
    out.attn.shared_k_p = clone_param(src.attn.shared_k_p);
    out.attn.shared_u = clone_param(src.attn.shared_u);
  }
  out.ffn_w1 = clone_param(src.ffn_w1);
  out.ffn_b1 = clone_param(src.ffn_b1);
  out.ffn_w2 = clone_param(src.ffn_w2);
  out.ffn_b2 = clone_param(src.ffn_b2);
  out.ln1_gamma = clone_param(src.ln1_gamma);
  out.ln1_beta = clone_param(src.ln1_beta);
  out.ln2_gamma = clone_param(src.ln2_gamma);
  out.ln2_beta = clone_param(src.ln2_beta);
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i)
    m = std::max(m, std::fabs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace

TEST_CASE("conv_frontend down-samples time by exactly four") {
  EncoderConfig cfg = toy_config();
  EncoderWeights w = init_weights(cfg, 1);
  Rng rng(3);
  for (int L : {1, 2, 3, 4, 5, 7, 9, 100}) {
    Tensor f = rnd({cfg.input_dim, L}, rng);
    Tensor out = conv_frontend(f, w, cfg);
    INFO("L=" << L);
    CHECK(out.rows() == cfg.d_model());
    CHECK(out.cols() == (L + 3) / 4);
  }
  CHECK((100 + 3) / 4 == 25);
  CHECK((7 + 3) / 4 == 2);

  Tensor bad = rnd({cfg.input_dim + 1, 8}, rng);
  CHECK_THROWS_AS(conv_frontend(bad, w, cfg), DimensionError);
}

TEST_CASE("encode output length follows the frontend contract for all L in [1,200]") {
  EncoderConfig cfg = toy_config();
  EncoderWeights w = init_weights(cfg, 2);
  Rng rng(5);
  for (int L = 1; L <= 200; ++L) {
    Tensor f = rnd({cfg.input_dim, L}, rng);
    Tensor out = encode(f, cfg, w, false);
    REQUIRE(out.rows() == cfg.d_model() + 6);
    REQUIRE(out.cols() == (L + 3) / 4);
  }
}

TEST_CASE("linear frontend preserves length") {
  EncoderConfig cfg = toy_config();
  cfg.frontend = FrontendKind::linear;
  EncoderWeights w = init_weights(cfg, 3);
  Rng rng(7);
  Tensor f = rnd({cfg.input_dim, 13}, rng);
  Tensor out = encode(f, cfg, w, false);
  CHECK(out.cols() == 13);
}

TEST_CASE("encoder_layer with zeroed sublayers is LayerNorm(LayerNorm(x))") {
  EncoderConfig cfg = toy_config();
  cfg.attention.window = std::nullopt;
  Rng rng(11);
  LayerWeights lw = lightattn::detail::init_layer(cfg, rng);
  // zero the attention output projection and the whole FFN
  for (auto& v : lw.attn.w_out.data()) v = 0.0;
  for (auto& v : lw.ffn_w1.data()) v = 0.0;
  for (auto& v : lw.ffn_w2.data()) v = 0.0;
  const int L = 5;
  Tensor x = rnd({cfg.d_model(), L}, rng);
  PositionInputs pos = build_position_inputs(cfg, L);
  Tensor out = encoder_layer(x, pos, lw, cfg, false);
  Tensor gamma = Tensor::full({cfg.d_model()}, 1.0);
  Tensor beta = Tensor::zeros({cfg.d_model()});
  Tensor want = layer_norm(layer_norm(x, gamma, beta, cfg.ln_eps), gamma, beta, cfg.ln_eps);
  CHECK(max_abs_diff(out, want) < 1e-12);
  CHECK(out.shape() == x.shape());
}

TEST_CASE("encoder_layer columns are LayerNorm-normalized") {
  EncoderConfig cfg = toy_config();
  Rng rng(13);
  LayerWeights lw = lightattn::detail::init_layer(cfg, rng);
  const int L = 9;
  Tensor x = rnd({cfg.d_model(), L}, rng);
  PositionInputs pos = build_position_inputs(cfg, L);
  Tensor out = encoder_layer(x, pos, lw, cfg, false);
  for (int l = 0; l < L; ++l) {
    double mean = 0.0;
    for (int r = 0; r < cfg.d_model(); ++r) mean += out.at(r, l);
    mean /= cfg.d_model();
    CHECK(std::fabs(mean) < 1e-8);
  }
}

TEST_CASE("encoder_layer gradient") {
  EncoderConfig cfg = toy_config();
  Rng rng(17);
  LayerWeights lw = lightattn::detail::init_layer(cfg, rng);
  const int L = 4;
  Tensor x = rnd({cfg.d_model(), L}, rng);
  PositionInputs pos = build_position_inputs(cfg, L);
  std::vector<std::pair<std::string, Tensor>> named;
  lw.collect(named, "layer.");
  std::vector<Tensor> params;
  for (auto& [n, t] : named) params.push_back(t);
  Tensor probe = rnd({cfg.d_model(), L}, rng);
  double err = grad_check(
      [&] { return sum(mul(encoder_layer(x, pos, lw, cfg, false), probe)); }, params,
      1e-5);
  CHECK(err < 1e-4);
}

TEST_CASE("shared-layer gradients equal the sum of per-layer gradients") {
  EncoderConfig shared_cfg = toy_config();
  shared_cfg.n_layers = 2;
  shared_cfg.share_layers = true;
  EncoderWeights shared_w = init_weights(shared_cfg, 23);
  REQUIRE(shared_w.layers.size() == 1);

  EncoderConfig split_cfg = shared_cfg;
  split_cfg.share_layers = false;
  EncoderWeights split_w;
  split_w.conv1_kernel = clone_param(shared_w.conv1_kernel);
  split_w.conv1_bias = clone_param(shared_w.conv1_bias);
  split_w.conv2_kernel = clone_param(shared_w.conv2_kernel);
  split_w.conv2_bias = clone_param(shared_w.conv2_bias);
  split_w.proj_w = clone_param(shared_w.proj_w);
  split_w.proj_b = clone_param(shared_w.proj_b);
  split_w.layers.push_back(clone_layer(shared_w.layers[0]));
  split_w.layers.push_back(clone_layer(shared_w.layers[0]));

  Rng rng(29);
  Tensor f = rnd({shared_cfg.input_dim, 11}, rng);
  Tensor probe = rnd({shared_cfg.d_model() + 6, 3}, rng);

  backward(sum(mul(encode(f, shared_cfg, shared_w, false), probe)));
  backward(sum(mul(encode(f, split_cfg, split_w, false), probe)));

  // outputs agree, so the two models are the same function
  CHECK(max_abs_diff(encode(f, shared_cfg, shared_w, false),
                     encode(f, split_cfg, split_w, false)) < 1e-12);

  std::vector<std::pair<std::string, Tensor>> shared_named, l0_named, l1_named;
  shared_w.layers[0].collect(shared_named, "");
  split_w.layers[0].collect(l0_named, "");
  split_w.layers[1].collect(l1_named, "");
  REQUIRE(shared_named.size() == l0_named.size());
  for (std::size_t p = 0; p < shared_named.size(); ++p) {
    const auto& gs = shared_named[p].second.grad();
    const auto& g0 = l0_named[p].second.grad();
    const auto& g1 = l1_named[p].second.grad();
    for (std::size_t i = 0; i < gs.size(); ++i) {
      CHECK(gs[i] == Catch::Approx(g0[i] + g1[i]).margin(1e-10));
    }
  }
}

TEST_CASE("eval-mode encode is deterministic") {
  EncoderConfig cfg = toy_config();
  EncoderWeights w = init_weights(cfg, 31);
  Rng rng(37);
  Tensor f = rnd({cfg.input_dim, 10}, rng);
  Tensor a = encode(f, cfg, w, false);
  Tensor b = encode(f, cfg, w, false);
  for (std::size_t i = 0; i < a.data().size(); ++i) CHECK(a.data()[i] == b.data()[i]);
}

TEST_CASE("init_weights is a pure function of the seed") {
  EncoderConfig cfg = toy_config();
  EncoderWeights a = init_weights(cfg, 41);
  EncoderWeights b = init_weights(cfg, 41);
  EncoderWeights c = init_weights(cfg, 42);
  auto pa = a.params(), pb = b.params(), pc = c.params();
  REQUIRE(pa.size() == pb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].second.data() == pb[i].second.data());
    any_diff = any_diff || pa[i].second.data() != pc[i].second.data();
  }
  CHECK(any_diff);

  for (const auto& layer : a.layers) {
    for (double g : layer.ln1_gamma.data()) CHECK(g == 1.0);
    for (double g : layer.ln2_gamma.data()) CHECK(g == 1.0);
    for (double b1 : layer.ffn_b1.data()) CHECK(b1 == 0.0);
  }
}

TEST_CASE("config validation rejects degenerate stacks") {
  EncoderConfig cfg = toy_config();
  cfg.n_layers = 0;
  CHECK_THROWS_AS(cfg.validate(), ParameterError);
  cfg = toy_config();
  cfg.dropout = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ParameterError);
  cfg = toy_config();
  cfg.attention.window = 4;
  CHECK_THROWS_AS(cfg.validate(), ParameterError);
}

TEST_CASE("checkpoint round trip is byte-identical") {
  EncoderConfig cfg = toy_config();
  EncoderWeights w = init_weights(cfg, 43);
  auto params = w.params();
  auto dir = std::filesystem::temp_directory_path() / "lightattn_ckpt_test";
  std::filesystem::create_directories(dir);
  std::string p1 = (dir / "a.bin").string();
  std::string p2 = (dir / "b.bin").string();

  checkpoint::save(p1, "{\"toy\":1}", params);
  checkpoint::File f = checkpoint::load(p1);
  CHECK(f.config_json == "{\"toy\":1}");
  REQUIRE(f.entries.size() == params.size());
  checkpoint::save(p2, f);

  std::ifstream a(p1, std::ios::binary), b(p2, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
  CHECK(sa == sb);
  CHECK(!sa.empty());

  // restore into a fresh weight set reproduces the exact values
  EncoderWeights w2 = init_weights(cfg, 44);
  auto params2 = w2.params();
  checkpoint::restore(f, params2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    CHECK(params2[i].second.data() == params[i].second.data());
  }

  // truncated file is rejected
  std::string p3 = (dir / "c.bin").string();
  {
    std::ofstream os(p3, std::ios::binary);
    os << sa.substr(0, sa.size() / 2);
  }
  CHECK_THROWS_AS(checkpoint::load(p3), FormatError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("count_encoder_parameters arithmetic") {
  EncoderConfig shared = toy_config();
  EncoderConfig split = shared;
  split.share_layers = false;
  split.n_layers = 4;
  EncoderConfig shared4 = shared;
  shared4.n_layers = 4;

  std::int64_t frontend = count_encoder_parameters(shared) -
                          (count_encoder_parameters(split) - count_encoder_parameters(shared4)) / 3;
  // layer-stack portion scales exactly 1:4 when sharing is off
  std::int64_t stack_shared = count_encoder_parameters(shared4) - frontend;
  std::int64_t stack_split = count_encoder_parameters(split) - frontend;
  CHECK(stack_split == 4 * stack_shared);

  // totals actually match the allocated tensors
  for (bool share : {true, false}) {
    EncoderConfig cfg = toy_config();
    cfg.share_layers = share;
    EncoderWeights w = init_weights(cfg, 47);
    std::int64_t total = 0;
    for (const auto& [name, t] : w.params()) total += t.numel();
    CHECK(total == count_encoder_parameters(cfg));
  }

  // light stays strictly smaller than the additive relative baseline at the
  // published hyperparameters (8 heads x 64, d_p = d_model = 512)
  EncoderConfig light;
  light.position = PositionConfig{512, 4, 2};
  EncoderConfig dai = light;
  light.attention.variant = AttnVariant::light;
  dai.attention.variant = AttnVariant::relative_dai;
  CHECK(count_encoder_parameters(light) < count_encoder_parameters(dai));
  CHECK(count_encoder_parameters(dai) - count_encoder_parameters(light) ==
        263168 - 336);

  // counts do not depend on sequence length (no length enters the formula);
  // changing only the position period leaves the count unchanged
  EncoderConfig longer = toy_config();
  longer.position.T = 4096;
  CHECK(count_encoder_parameters(longer) == count_encoder_parameters(toy_config()));
}

TEST_CASE("aliasing is surfaced as a flag, not an error") {
  PositionConfig pc{16, 4, 2};
  CHECK_FALSE(light_position(16, pc).aliased);
  CHECK(light_position(17, pc).aliased);
}
