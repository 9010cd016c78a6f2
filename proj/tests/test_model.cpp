#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "test_support.hpp"
#include "vrpo/model.hpp"
#include "vrpo/prompt.hpp"
#include "vrpo/tasks.hpp"
#include "vrpo/vocab.hpp"

using namespace vrpo;

namespace {

ModelConfig small_config(PositionalMode pos = PositionalMode::kLearned) {
  ModelConfig c;
  c.n_layers = 3;
  c.n_heads = 2;
  c.d_model = 32;
  c.d_ff = 64;
  c.max_seq_len = 160;
  c.visual_dim = 8;
  c.positional_mode = pos;
  return c;
}

std::vector<VecX> random_frames(int n, int dim, Rng& rng) {
  std::normal_distribution<float> dist(0.0f, 1.0f);
  std::vector<VecX> frames;
  for (int i = 0; i < n; ++i) {
    VecX f(dim);
    for (int j = 0; j < dim; ++j) f[j] = dist(rng);
    frames.push_back(std::move(f));
  }
  return frames;
}

std::vector<int> random_text(int n, Rng& rng) {
  std::uniform_int_distribution<int> pick(7, vocab::size() - 1);
  std::vector<int> ids;
  for (int i = 0; i < n; ++i) ids.push_back(pick(rng));
  return ids;
}

}  // namespace

TEST_CASE("embed_inputs: counts, modality partition, determinism") {
  Rng rng(1);
  ModelParams params = ModelParams::init(small_config(), rng);

  auto text = random_text(5, rng);
  TokenSequence no_vis = embed_inputs(params, {}, text);
  CHECK(no_vis.length() == 5);
  CHECK(no_vis.n_visual == 0);
  no_vis.validate();

  auto frames = random_frames(16, 8, rng);
  auto text10 = random_text(10, rng);
  TokenSequence seq = embed_inputs(params, frames, text10);
  CHECK(seq.length() == 26);
  CHECK(seq.n_visual == 16);
  for (int i = 0; i < 16; ++i) CHECK(seq.modality[static_cast<std::size_t>(i)] == Modality::kVisual);
  seq.validate();

  // identical frames give identical visual states
  std::vector<VecX> dup = {frames[0], frames[0]};
  TokenSequence sdup = embed_inputs(params, dup, text10);
  CHECK((sdup.states.row(0) - sdup.states.row(1)).cwiseAbs().maxCoeff() == 0.0f);

  // capacity error
  auto too_many = random_frames(200, 8, rng);
  CHECK_THROWS_AS(embed_inputs(params, too_many, text10), CapacityError);
}

TEST_CASE("prefill+decode matches cacheless full forward (KV consistency)") {
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    for (PositionalMode pos :
         {PositionalMode::kLearned, PositionalMode::kRotary, PositionalMode::kNone}) {
      Rng rng(seed);
      ModelParams params = ModelParams::init(small_config(pos), rng);
      auto frames = random_frames(6, 8, rng);
      auto text = random_text(7, rng);
      TokenSequence seq = embed_inputs(params, frames, text);

      PrefillResult pf = prefill(params, seq, nullptr);
      MatRM full = full_forward_logits(params, seq);
      CHECK((pf.last_logits.transpose() - full.row(seq.length() - 1)).cwiseAbs().maxCoeff() <
            1e-5f);

      // greedy decode N steps vs cacheless re-forward token-for-token
      std::vector<int> generated;
      VecX logits = pf.last_logits;
      TokenSequence grow = seq;
      for (int t = 0; t < 8; ++t) {
        Eigen::Index arg;
        logits.maxCoeff(&arg);
        generated.push_back(static_cast<int>(arg));

        // extend the embedded sequence manually and re-forward
        TokenSequence next = grow;
        const int n = next.length();
        next.states.conservativeResize(n + 1, Eigen::NoChange);
        next.states.row(n) = params.tok_emb.mat().row(arg);
        next.positions.push_back(next.next_position);
        next.sizes.push_back(1.0f);
        next.modality.push_back(Modality::kText);
        next.next_position += 1;
        MatRM oracle = full_forward_logits(params, next);

        logits = decode_step(params, pf.cache, static_cast<int>(arg));
        CHECK((logits.transpose() - oracle.row(n)).cwiseAbs().maxCoeff() < 1e-5f);
        grow = next;
      }
    }
  }
}

TEST_CASE("causality: perturbing a later token leaves earlier logits unchanged") {
  Rng rng(9);
  ModelParams params = ModelParams::init(small_config(), rng);
  auto frames = random_frames(4, 8, rng);
  auto text = random_text(6, rng);
  TokenSequence seq = embed_inputs(params, frames, text);
  MatRM base = full_forward_logits(params, seq);

  TokenSequence perturbed = seq;
  perturbed.states.row(7).array() += 3.0f;  // token index 7
  MatRM after = full_forward_logits(params, perturbed);
  for (int i = 0; i < 7; ++i)
    CHECK((base.row(i) - after.row(i)).cwiseAbs().maxCoeff() == 0.0f);
  CHECK((base.row(7) - after.row(7)).cwiseAbs().maxCoeff() > 0.0f);
}

TEST_CASE("generate: budget law, determinism, eos stop") {
  Rng rng(33);
  ModelParams params = ModelParams::init(small_config(), rng);
  auto frames = random_frames(4, 8, rng);
  auto text = random_text(5, rng);
  TokenSequence seq = embed_inputs(params, frames, text);

  for (Mode m : {Mode::kDirect, Mode::kConcise, Mode::kCot}) {
    DecodeBudget budget = DecodeBudget::for_mode(m, 1.0f);
    Generation g1 = generate(params, seq, budget, nullptr, 77);
    CHECK(static_cast<int>(g1.tokens.size()) <= budget.max_new_tokens);
    Generation g2 = generate(params, seq, budget, nullptr, 77);
    CHECK(g1.tokens == g2.tokens);
    CHECK(g1.text == g2.text);
    // stop-at-eos: nothing after the first eos
    for (std::size_t i = 0; i + 1 < g1.tokens.size(); ++i)
      CHECK(g1.tokens[i] != vocab::eos_id());
  }

  // greedy (temperature 0) deterministic across runs
  DecodeBudget greedy = DecodeBudget::for_mode(Mode::kConcise, 0.0f);
  Generation a = generate(params, seq, greedy, nullptr, 1);
  Generation b = generate(params, seq, greedy, nullptr, 999);
  CHECK(a.tokens == b.tokens);
}

TEST_CASE("sequence_logprob: matches generate-time logprobs, sums <= 0") {
  for (std::uint64_t seed : {11ULL, 12ULL}) {
    Rng rng(seed);
    ModelParams params = ModelParams::init(small_config(), rng);
    auto frames = random_frames(5, 8, rng);
    auto text = random_text(6, rng);
    TokenSequence seq = embed_inputs(params, frames, text);
    PromptInputs prompt;
    prompt.frames = frames;
    prompt.text_ids = text;

    DecodeBudget budget = DecodeBudget::for_mode(Mode::kConcise, 1.0f);
    Generation gen = generate(params, seq, budget, nullptr, seed * 13);
    REQUIRE(gen.tokens.size() >= 1);

    Tensor lp = sequence_logprob(params, prompt, gen.tokens, nullptr);
    REQUIRE(lp.size() == static_cast<std::int64_t>(gen.tokens.size()));
    float total = 0.0f;
    for (std::size_t t = 0; t < gen.tokens.size(); ++t) {
      CHECK(std::abs(lp.data()[t] - gen.logprobs[t]) < 1e-5f);
      total += lp.data()[t];
    }
    CHECK(total <= 0.0f);

    // greedy first step: logprob equals log of max softmax prob
    PrefillResult pf = prefill(params, seq, nullptr);
    Eigen::RowVectorXf lsm = pf.last_logits.transpose();
    const float m = lsm.maxCoeff();
    const float lse = std::log((lsm.array() - m).exp().sum()) + m;
    Eigen::Index arg;
    pf.last_logits.maxCoeff(&arg);
    DecodeBudget greedy = DecodeBudget::for_mode(Mode::kDirect, 0.0f);
    Generation gg = generate(params, seq, greedy, nullptr, 0);
    CHECK(gg.tokens[0] == static_cast<int>(arg));
    CHECK(std::abs(gg.logprobs[0] - (pf.last_logits[arg] - lse)) < 1e-6f);
  }
}

TEST_CASE("model gradients flow through sequence_logprob (finite differences)") {
  Rng rng(21);
  ModelConfig cfg = small_config();
  cfg.n_layers = 2;
  ModelParams params = ModelParams::init(cfg, rng);
  auto frames = random_frames(3, 8, rng);
  auto text = random_text(4, rng);
  PromptInputs prompt{frames, text};
  std::vector<int> response = {vocab::answer_open_id(), vocab::letter_id('B'),
                               vocab::answer_close_id(), vocab::eos_id()};

  auto fn = [&] { return mean(sequence_logprob(params, prompt, response, nullptr)); };
  std::vector<Tensor> checked = {params.tok_emb, params.vis_w, params.layers[0].wq,
                                 params.layers[1].wv, params.layers[0].w_up, params.head,
                                 params.lnf_g, params.pos_emb};
  auto res = test::gradcheck_directional(checked, fn, rng, 4);
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("checkpoint round trip preserves behavior and rejects mismatches") {
  Rng rng(5);
  ModelParams params = ModelParams::init(small_config(), rng);
  auto frames = random_frames(4, 8, rng);
  auto text = random_text(5, rng);
  TokenSequence seq = embed_inputs(params, frames, text);
  PrefillResult before = prefill(params, seq, nullptr);

  const std::string stem = "/tmp/vrpo_test_ckpt";
  save_model(stem, params);
  ModelParams loaded = load_model(stem);
  TokenSequence seq2 = embed_inputs(loaded, frames, text);
  PrefillResult after = prefill(loaded, seq2, nullptr);
  CHECK((before.last_logits - after.last_logits).cwiseAbs().maxCoeff() == 0.0f);

  std::filesystem::remove(stem + ".bin");
  CHECK_THROWS_AS(load_model(stem), IoError);
  std::filesystem::remove(stem + ".json");
  CHECK_THROWS_AS(load_model(stem), IoError);
}

TEST_CASE("decode_step capacity error beyond max_seq_len") {
  Rng rng(2);
  ModelConfig cfg = small_config();
  cfg.max_seq_len = 12;
  ModelParams params = ModelParams::init(cfg, rng);
  auto frames = random_frames(4, 8, rng);
  auto text = random_text(6, rng);
  TokenSequence seq = embed_inputs(params, frames, text);  // length 10
  PrefillResult pf = prefill(params, seq, nullptr);
  VecX l = decode_step(params, pf.cache, 3);
  l = decode_step(params, pf.cache, 3);  // length now 12
  CHECK_THROWS_AS(decode_step(params, pf.cache, 3), CapacityError);
}
