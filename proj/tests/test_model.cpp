#include <cmath>
#include <set>
#include <vector>

#include "doctest.h"
#include "gradcheck.hpp"
#include "recursor/errors.hpp"
#include "recursor/model.hpp"
#include "recursor/ops.hpp"

using namespace recursor;

namespace {

ModelSpec toy(ShareStrategy share = ShareStrategy::None, int layers = 4, int recursions = 1) {
  ModelSpec s;
  s.n_layers = layers;
  s.n_recursions = recursions;
  s.share = share;
  return s;
}

std::vector<int> ids_of(int n, int vocab, int seed = 3) {
  Rng rng(seed);
  std::vector<int> ids(n);
  for (auto& t : ids) t = static_cast<int>(rng.below(vocab));
  return ids;
}

std::vector<std::vector<int>> groups_of(const ModelSpec& s, int width) {
  auto blocks = unrolled_blocks(s);
  std::vector<std::vector<int>> out;
  for (std::size_t i = 0; i < blocks.size(); i += width)
    out.emplace_back(blocks.begin() + i, blocks.begin() + i + width);
  return out;
}

}  // namespace

TEST_CASE("cycle and sequence unroll layouts") {
  auto cyc = groups_of(toy(ShareStrategy::Cycle, 9, 3), 3);
  CHECK(cyc == std::vector<std::vector<int>>{{0, 1, 2}, {0, 1, 2}, {0, 1, 2}});
  auto seq = groups_of(toy(ShareStrategy::Sequence, 9, 3), 3);
  CHECK(seq == std::vector<std::vector<int>>{{0, 0, 0}, {1, 1, 1}, {2, 2, 2}});
  // L=6, N_r=3: each of 2 blocks repeats 3 times in a row.
  CHECK(unrolled_blocks(toy(ShareStrategy::Sequence, 6, 3)) == std::vector<int>{0, 0, 0, 1, 1, 1});
  CHECK(unrolled_blocks(toy(ShareStrategy::Cycle, 6, 3)) == std::vector<int>{0, 1, 0, 1, 0, 1});
}

TEST_CASE("middle variants keep unique ends") {
  auto mc = toy(ShareStrategy::MiddleCycle, 11, 3);
  CHECK(layer_index_map(mc, 5) == 2);
  CHECK(layer_index_map(mc, 0) == 0);
  CHECK(layer_index_map(mc, 10) == mc.unique_blocks() - 1);
  CHECK(unrolled_blocks(mc) == std::vector<int>{0, 1, 2, 3, 1, 2, 3, 1, 2, 3, 4});
  auto ms = toy(ShareStrategy::MiddleSequence, 11, 3);
  CHECK(unrolled_blocks(ms) == std::vector<int>{0, 1, 1, 1, 2, 2, 2, 3, 3, 3, 4});
}

TEST_CASE("spec validation names the failing field") {
  CHECK_THROWS_AS(toy(ShareStrategy::Cycle, 9, 2).validate(), ConfigError);
  CHECK_THROWS_AS(toy(ShareStrategy::MiddleCycle, 9, 2).validate(), ConfigError);
  CHECK_NOTHROW(toy(ShareStrategy::MiddleCycle, 8, 2).validate());
  auto s = toy();
  s.n_kv_heads = 3;
  try {
    s.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("model.") != std::string::npos);
  }
  CHECK_THROWS_AS(layer_index_map(toy(), 4), IndexError);
}

TEST_CASE("layer map is total, surjective and sized per strategy") {
  for (auto share : {ShareStrategy::None, ShareStrategy::Cycle, ShareStrategy::Sequence,
                     ShareStrategy::MiddleCycle, ShareStrategy::MiddleSequence}) {
    for (int L = 3; L <= 14; ++L) {
      for (int nr = 1; nr <= 4; ++nr) {
        auto s = toy(share, L, share == ShareStrategy::None ? 1 : nr);
        try {
          s.validate();
        } catch (const ConfigError&) {
          continue;
        }
        std::set<int> seen;
        for (int ell = 0; ell < L; ++ell) {
          const int b = layer_index_map(s, ell);
          CHECK(b >= 0);
          CHECK(b < s.unique_blocks());
          seen.insert(b);
        }
        CHECK(static_cast<int>(seen.size()) == s.unique_blocks());
        if (share == ShareStrategy::Cycle || share == ShareStrategy::Sequence)
          CHECK(s.unique_blocks() * s.n_recursions == L);
        if (s.middle()) CHECK((s.unique_blocks() - 2) * s.n_recursions == L - 2);
        // every layer lives in exactly one exit stage
        std::vector<int> all;
        for (int d = 1; d <= s.n_recursions; ++d)
          for (int ell : stage_layers(s, d)) all.push_back(ell);
        std::vector<int> want(L);
        for (int i = 0; i < L; ++i) want[i] = i;
        CHECK(all == want);
      }
    }
  }
}

TEST_CASE("unique parameter count scales by recursion count") {
  Rng rng(5);
  auto none = init_weights(toy(ShareStrategy::None, 8, 1), rng);
  auto cyc = init_weights(toy(ShareStrategy::Cycle, 8, 4), rng);
  auto mid = init_weights(toy(ShareStrategy::MiddleCycle, 8, 2), rng);
  CHECK(none.blocks.size() == 8);
  CHECK(cyc.blocks.size() == 2);
  CHECK(mid.blocks.size() == 3 + 2);
  const std::size_t per_block = count_parameters(none) - none.embedding.numel() - none.final_norm.numel();
  const std::size_t cyc_blocks = count_parameters(cyc) - cyc.embedding.numel() - cyc.final_norm.numel();
  CHECK(cyc_blocks * 4 == per_block);
}

TEST_CASE("tied forward equals explicit unroll bitwise") {
  for (auto share : {ShareStrategy::Cycle, ShareStrategy::Sequence, ShareStrategy::MiddleCycle,
                     ShareStrategy::MiddleSequence}) {
    Rng rng(11);
    auto s = toy(share, share == ShareStrategy::MiddleCycle || share == ShareStrategy::MiddleSequence ? 6 : 4, 2);
    Model m = Model::random(s, rng, 0.2);
    Model flat = explicit_unroll(m);
    auto ids = ids_of(7, 32);
    auto a = m.forward(ids).logits;
    auto b = flat.forward(ids).logits;
    CHECK(a.to_vector() == b.to_vector());
  }
}

TEST_CASE("single recursion under any strategy equals no sharing") {
  Rng rng(12);
  Model base = Model::random(toy(), rng, 0.2);
  auto ids = ids_of(6, 32);
  auto want = base.forward(ids).logits.to_vector();
  for (auto share : {ShareStrategy::Cycle, ShareStrategy::Sequence, ShareStrategy::MiddleCycle,
                     ShareStrategy::MiddleSequence}) {
    Model m(toy(share, 4, 1), base.weights().clone());
    CHECK(m.forward(ids).logits.to_vector() == want);
  }
}

TEST_CASE("toy forward is reproducible across runs") {
  auto run = [] {
    Rng rng(2024);
    Model m = Model::random(toy(), rng);
    return m.forward(ids_of(10, 32)).logits.to_vector();
  };
  auto a = run();
  auto b = run();
  CHECK(a == b);
  CHECK(a.size() == 10 * 32);
}

TEST_CASE("intermediate logits at the final stage equal forward logits") {
  Rng rng(13);
  Model m = Model::random(toy(ShareStrategy::Cycle, 4, 2), rng, 0.2);
  auto ids = ids_of(5, 32);
  auto r = m.forward(ids);
  REQUIRE(r.stage_hidden.size() == 2);
  CHECK(intermediate_logits(m, r.stage_hidden.back()).to_vector() == r.logits.to_vector());
}

TEST_CASE("identity deeper blocks make depth-one logits final") {
  Rng rng(14);
  auto s = toy(ShareStrategy::Sequence, 4, 2);
  auto w = init_weights(s, rng, 0.3);
  // Zero output projections turn block 1 into the identity on the residual stream.
  w.blocks[1].wo = Tensor::zeros(w.blocks[1].wo.shape());
  w.blocks[1].w_down = Tensor::zeros(w.blocks[1].w_down.shape());
  Model m(s, w);
  auto r = m.forward(ids_of(6, 32));
  CHECK(intermediate_logits(m, r.stage_hidden[0]).to_vector() == r.logits.to_vector());
}

TEST_CASE("forward error contracts") {
  Rng rng(15);
  auto s = toy();
  s.context_len = 8;
  Model m = Model::random(s, rng);
  CHECK_THROWS_AS(m.forward(ids_of(9, 32)), LengthError);
  std::vector<int> bad{1, 40};
  CHECK_THROWS_AS(m.forward(bad), IndexError);
  auto bank = m.make_cache(KVMode::PerDepth);
  ForwardOptions opt;
  opt.cache = &bank;
  auto ids = ids_of(3, 32);
  m.forward(ids, opt);
  CHECK_THROWS_AS(m.forward(ids, opt), CacheError);
  KVCacheBank wrong(KVMode::PerDepth, 1, 99);
  opt.cache = &wrong;
  CHECK_THROWS_AS(m.forward(ids, opt), CacheError);
  CHECK_THROWS_AS(Model(toy(ShareStrategy::Cycle, 4, 2), init_weights(toy(), rng)), ConfigError);
}

TEST_CASE("incremental decode through the cache matches a full forward") {
  Rng rng(16);
  Model m = Model::random(toy(ShareStrategy::MiddleCycle, 6, 2), rng, 0.3);
  auto ids = ids_of(6, 32);
  auto full = m.forward(ids).logits;
  auto bank = m.make_cache(KVMode::PerDepth);
  ForwardOptions opt;
  opt.cache = &bank;
  for (int t = 0; t < 6; ++t) {
    opt.position_offset = t;
    std::vector<int> one{ids[t]};
    auto step = m.forward(one, opt).logits;
    for (std::size_t v = 0; v < 32; ++v) CHECK(std::abs(step.at(0, v) - full.at(t, v)) <= 1e-10);
  }
}

TEST_CASE("untied head and lora adapters are used") {
  Rng rng(17);
  auto s = toy();
  s.tie_embeddings = false;
  Model m = Model::random(s, rng, 0.2);
  CHECK(m.weights().head.defined());
  auto ids = ids_of(4, 32);
  auto before = m.forward(ids).logits.to_vector();
  LoraPair p;
  p.down = testutil::random_tensor(rng, {8, 2});
  p.up = testutil::random_tensor(rng, {2, 8});
  m.weights().lora[{1, "wo"}] = p;
  CHECK(m.forward(ids).logits.to_vector() != before);
  auto names = m.weights().named_parameters();
  CHECK(names.back().first == "lora.wo.up.depth1");
  CHECK(names[names.size() - 2].first == "lora.wo.down.depth1");
}

TEST_CASE("forward gradients match finite differences") {
  Rng rng(18);
  auto s = toy(ShareStrategy::Cycle, 2, 2);
  s.context_len = 8;
  Model m = Model::random(s, rng, 0.3);
  auto ids = ids_of(4, 32);
  std::vector<int> targets{1, 2, 3, 4};
  auto params = m.weights().parameters();
  auto r = testutil::gradcheck(params, [&] { return cross_entropy(m.forward(ids).logits, targets); },
                               1e-5, 1e-4, 6);
  CHECK(r.max_rel_error <= 1e-5);
  CHECK(r.checked > 20);
}
