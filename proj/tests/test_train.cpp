#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "gradcheck.hpp"
#include "json.hpp"
#include "recursor/decode.hpp"
#include "recursor/errors.hpp"
#include "recursor/ops.hpp"
#include "recursor/train.hpp"

using namespace recursor;

namespace {

ModelSpec byte_spec(int layers, int recursions, ShareStrategy share = ShareStrategy::Cycle) {
  ModelSpec s;
  s.n_layers = layers;
  s.n_recursions = recursions;
  s.share = share;
  s.d_model = 16;
  s.n_heads = 2;
  s.n_kv_heads = 1;
  s.d_head = 8;
  s.d_inter = 32;
  s.vocab = kByteVocab;
  s.context_len = 64;
  return s;
}

DataConfig copy_data(std::size_t seq_len = 16, std::size_t batch = 4) {
  DataConfig d;
  d.kind = CorpusKind::Copy;
  d.seq_len = seq_len;
  d.batch = batch;
  d.alphabet = 6;
  return d;
}

std::vector<Tensor> random_stack(Rng& rng, int n, std::size_t rows = 3, std::size_t cols = 4) {
  std::vector<Tensor> out;
  for (int i = 0; i < n; ++i) out.push_back(testutil::random_tensor(rng, {rows, cols}));
  return out;
}

double mapping_cost(std::span<const Tensor> s, std::span<const Tensor> d, const std::vector<int>& m) {
  double c = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) c += mse(s[i], d[m[i]]).item();
  return c;
}

void enumerate_monotone(int ls, int ld, std::vector<int>& cur, const std::function<void(const std::vector<int>&)>& f) {
  if (static_cast<int>(cur.size()) == ls) {
    f(cur);
    return;
  }
  const int lo = cur.empty() ? 0 : cur.back();
  for (int j = lo; j < ld; ++j) {
    cur.push_back(j);
    enumerate_monotone(ls, ld, cur, f);
    cur.pop_back();
  }
}

double mean_of(const std::vector<double>& v, std::size_t from, std::size_t to) {
  return std::accumulate(v.begin() + static_cast<std::ptrdiff_t>(from), v.begin() + static_cast<std::ptrdiff_t>(to), 0.0) /
         static_cast<double>(to - from);
}

}  // namespace

TEST_CASE("exit coefficients follow each weighting") {
  LossSchedule s;
  s.mode = ExitWeighting::WeightedAvg;
  auto c = exit_coefficients(s, 3);
  CHECK(c[0] == doctest::Approx(1.0 / 6));
  CHECK(c[1] == doctest::Approx(2.0 / 6));
  CHECK(c[2] == doctest::Approx(3.0 / 6));

  s.mode = ExitWeighting::Aggressive;
  s.aggressive = 0.1;
  c = exit_coefficients(s, 2);
  CHECK(c == std::vector<double>{0.1, 1.0});

  s.mode = ExitWeighting::UnweightedAvg;
  c = exit_coefficients(s, 4);
  for (double x : c) CHECK(x == doctest::Approx(0.25));

  s.mode = ExitWeighting::Single;
  c = exit_coefficients(s, 3);
  CHECK(c == std::vector<double>{0.0, 0.0, 1.0});
  CHECK_THROWS_AS(exit_coefficients(s, 0), DimensionError);

  for (auto name : {"single", "weighted_avg", "unweighted_avg", "aggressive"})
    CHECK(to_string(exit_weighting_from_string(name)) == name);
  CHECK_THROWS_AS(exit_weighting_from_string("geometric"), ConfigError);
  CHECK_THROWS_AS(kd_mode_from_string("reverse_kl"), ConfigError);
}

TEST_CASE("exit loss reduces to cross-entropy and weights each depth") {
  Rng rng(3);
  const std::vector<int> tgt{1, 4, 0, 2, 3};
  const std::vector<Tensor> one{testutil::random_tensor(rng, {5, 6}, -2, 2)};
  for (auto mode : {ExitWeighting::Single, ExitWeighting::WeightedAvg, ExitWeighting::UnweightedAvg,
                    ExitWeighting::Aggressive}) {
    LossSchedule s;
    s.mode = mode;
    CHECK(exit_loss(one, tgt, s).item() == doctest::Approx(cross_entropy(one[0], tgt).item()).epsilon(1e-14));
  }

  const std::vector<Tensor> three{testutil::random_tensor(rng, {5, 6}, -2, 2),
                                  testutil::random_tensor(rng, {5, 6}, -2, 2),
                                  testutil::random_tensor(rng, {5, 6}, -2, 2)};
  LossSchedule s;
  s.mode = ExitWeighting::WeightedAvg;
  double expect = 0.0;
  for (int i = 0; i < 3; ++i) expect += (i + 1) / 6.0 * cross_entropy(three[i], tgt).item();
  CHECK(exit_loss(three, tgt, s).item() == doctest::Approx(expect).epsilon(1e-12));

  // Ignored targets drop out of the mean.
  const std::vector<int> padded{1, 4, kPad, 2, kPad};
  const std::vector<bool> mask{true, true, false, true, false};
  LossSchedule single;
  const std::vector<Tensor> big{testutil::random_tensor(rng, {5, kByteVocab}, -1, 1)};
  CHECK(exit_loss(big, padded, single, kPad).item() ==
        doctest::Approx(cross_entropy_masked(big[0], padded, mask).item()).epsilon(1e-14));

  // Self-distillation adds the mean KL from the detached final depth.
  s.kd = KdMode::ForwardKL;
  s.kd_coeff = 0.5;
  const double kl = 0.5 * (forward_kl(three[2], three[0]).item() + forward_kl(three[2], three[1]).item()) / 2.0;
  CHECK(exit_loss(three, tgt, s).item() == doctest::Approx(expect + kl).epsilon(1e-12));
}

TEST_CASE("forward KL fixtures") {
  Rng rng(5);
  const Tensor a = testutil::random_tensor(rng, {4, 7}, -3, 3);
  CHECK(std::abs(forward_kl(a, a).item()) < 1e-14);

  const std::size_t v = 9;
  std::vector<double> hot(v, -1e4);
  hot[2] = 0.0;
  const Tensor teacher = Tensor::from({1, v}, hot);
  const Tensor uniform = Tensor::zeros({1, v});
  CHECK(forward_kl(teacher, uniform).item() == doctest::Approx(std::log(9.0)).epsilon(1e-10));

  const Tensor b = testutil::random_tensor(rng, {4, 7}, -3, 3);
  double oracle = 0.0;
  for (std::size_t r = 0; r < 4; ++r) {
    double za = 0.0, zb = 0.0;
    for (std::size_t j = 0; j < 7; ++j) {
      za += std::exp(a.at(r, j));
      zb += std::exp(b.at(r, j));
    }
    for (std::size_t j = 0; j < 7; ++j) {
      const double p = std::exp(a.at(r, j)) / za;
      const double q = std::exp(b.at(r, j)) / zb;
      oracle += p * (std::log(p) - std::log(q));
    }
  }
  CHECK(std::abs(forward_kl(a, b).item() - oracle / 4.0) <= 1e-10);

  // The teacher receives no gradient.
  Tensor ta = a.clone(), tb = b.clone();
  ta.set_requires_grad();
  tb.set_requires_grad();
  forward_kl(ta, tb).backward();
  CHECK_FALSE(ta.has_grad());
  CHECK(tb.has_grad());
}

TEST_CASE("dynamic layer mapping") {
  Rng rng(11);
  SUBCASE("embedded copy maps to every second layer") {
    const auto deep = random_stack(rng, 6);
    std::vector<Tensor> shallow{deep[1], deep[3], deep[5]};
    const auto m = kd_dyna_map(shallow, deep);
    CHECK(m == std::vector<int>{1, 3, 5});
    CHECK(kd_dyna_loss(shallow, deep).item() == doctest::Approx(0.0));
  }
  SUBCASE("ties resolve to the smallest mapping") {
    const Tensor h = testutil::random_tensor(rng, {3, 4});
    std::vector<Tensor> deep(5, h), shallow(3, h);
    CHECK(kd_dyna_map(shallow, deep) == std::vector<int>{0, 0, 0});
  }
  SUBCASE("dynamic program matches brute force") {
    for (int trial = 0; trial < 25; ++trial) {
      const auto shallow = random_stack(rng, 3);
      const auto deep = random_stack(rng, 5);
      const auto m = kd_dyna_map(shallow, deep);
      CHECK(std::is_sorted(m.begin(), m.end()));
      const double got = mapping_cost(shallow, deep, m);
      double best = 1e300;
      std::vector<int> argbest, cur;
      enumerate_monotone(3, 5, cur, [&](const std::vector<int>& cand) {
        const double c = mapping_cost(shallow, deep, cand);
        CHECK(got <= c + 1e-12);
        if (c < best - 1e-12) {
          best = c;
          argbest = cand;
        }
      });
      CHECK(m == argbest);
      CHECK(kd_dyna_loss(shallow, deep).item() == doctest::Approx(got / 3.0).epsilon(1e-12));
    }
  }
  SUBCASE("errors") {
    const auto shallow = random_stack(rng, 4);
    const auto deep = random_stack(rng, 3);
    CHECK_THROWS_AS(kd_dyna_map(shallow, deep), MappingError);
    CHECK_THROWS_AS(kd_dyna_map({}, deep), MappingError);
    const auto odd = random_stack(rng, 3, 2, 4);
    CHECK_THROWS_AS(kd_dyna_map(std::span<const Tensor>(odd).first(1), deep), DimensionError);
  }
}

TEST_CASE("learning-rate shapes") {
  OptimConfig c;
  c.lr = 1.0;
  c.shape = LrShape::Constant;
  CHECK(learning_rate(c, 0, 10) == 1.0);
  CHECK(learning_rate(c, 9, 10) == 1.0);
  c.warmup = 4;
  CHECK(learning_rate(c, 0, 10) == doctest::Approx(0.25));
  CHECK(learning_rate(c, 3, 10) == doctest::Approx(1.0));

  c.warmup = 0;
  c.shape = LrShape::Cosine;
  c.min_lr_ratio = 0.1;
  CHECK(learning_rate(c, 0, 11) == doctest::Approx(1.0));
  CHECK(learning_rate(c, 5, 11) == doctest::Approx(0.55));
  CHECK(learning_rate(c, 10, 11) == doctest::Approx(0.1));

  c.shape = LrShape::Trapezoid;
  c.cooldown_fraction = 0.2;
  CHECK(learning_rate(c, 7, 10) == 1.0);
  CHECK(learning_rate(c, 8, 10) == doctest::Approx(1.0));
  CHECK(learning_rate(c, 9, 10) == doctest::Approx(0.5));

  for (int s = 0; s < 100; ++s) {
    c.shape = LrShape::Cosine;
    CHECK(learning_rate(c, s + 1, 100) <= learning_rate(c, s, 100) + 1e-15);
  }
  CHECK_THROWS_AS(lr_shape_from_string("linear"), ConfigError);
  OptimConfig bad;
  bad.beta2 = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("optimizer with zero gradients") {
  Rng rng(2);
  Tensor w = testutil::random_tensor(rng, {3, 4});
  Tensor g = testutil::random_tensor(rng, {4});
  const auto w0 = w.to_vector(), g0 = g.to_vector();
  auto zero_backward = [&] { scale(add(sum(w), sum(g)), 0.0).backward(); };

  OptimConfig c;
  c.weight_decay = 0.0;
  AdamW opt({w, g}, c);
  for (int i = 0; i < 3; ++i) {
    opt.zero_grad();
    zero_backward();
    CHECK(opt.step(0.1) == 0.0);
  }
  CHECK(w.to_vector() == w0);
  CHECK(g.to_vector() == g0);

  // With decay, matrices shrink by exactly (1 - lr * wd); vectors are untouched.
  c.weight_decay = 0.1;
  AdamW decayed({w, g}, c);
  decayed.zero_grad();
  zero_backward();
  decayed.step(0.5);
  for (std::size_t i = 0; i < w0.size(); ++i) CHECK(w.data()[i] == doctest::Approx(w0[i] * 0.95).epsilon(1e-15));
  CHECK(g.to_vector() == g0);
}

TEST_CASE("optimizer matches a scalar reference and clips") {
  Tensor x = Tensor::vector({2.0});
  OptimConfig c;
  c.weight_decay = 0.0;
  c.clip = 0.0;
  AdamW opt({x}, c);
  double ref = 2.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 5; ++t) {
    opt.zero_grad();
    sum(square(x)).backward();
    const double grad = 2.0 * ref;
    CHECK(opt.step(0.01) == doctest::Approx(std::abs(grad)));
    m = 0.9 * m + 0.1 * grad;
    v = 0.95 * v + 0.05 * grad * grad;
    ref -= 0.01 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.95, t))) + 1e-8);
    CHECK(x.item() == doctest::Approx(ref).epsilon(1e-14));
  }

  // Clipping bounds the update fed to the moments.
  Tensor y = Tensor::vector({100.0});
  c.clip = 1.0;
  AdamW clipped({y}, c);
  clipped.zero_grad();
  sum(square(y)).backward();
  CHECK(clipped.step(0.01) == doctest::Approx(200.0));
  CHECK(clipped.first_moments()[0][0] == doctest::Approx(0.1));
}

TEST_CASE("corpus streams") {
  Corpus a(copy_data(), 7), b(copy_data(), 7);
  for (int i = 0; i < 5; ++i) {
    const auto sa = a.sequence();
    CHECK(sa == b.sequence());
    REQUIRE(sa.size() == 17);
    CHECK(sa.front() == kBos);
    const auto bar = std::find(sa.begin(), sa.end(), '|');
    REQUIRE(bar != sa.end());
    const std::vector<int> first(sa.begin() + 1, bar);
    const std::vector<int> second(bar + 1, bar + 1 + static_cast<std::ptrdiff_t>(first.size()));
    CHECK(first == second);
    for (int t : first) CHECK((t >= 'a' && t < 'a' + 6));
  }
  const auto batch = a.next_batch();
  REQUIRE(batch.inputs.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(batch.inputs[i].size() == 16);
    CHECK(std::equal(batch.inputs[i].begin() + 1, batch.inputs[i].end(), batch.targets[i].begin()));
  }

  DataConfig add;
  add.kind = CorpusKind::ModAdd;
  add.seq_len = 40;
  add.modulus = 7;
  Corpus c(add, 1);
  const std::string text = decode_bytes(c.sequence());
  std::istringstream records(text);
  std::string rec;
  int complete = 0;
  while (std::getline(records, rec, ';')) {
    int x, y, z;
    if (std::sscanf(rec.c_str(), "%d+%d=%d", &x, &y, &z) == 3 && records.peek() != EOF) {
      CHECK(z == (x + y) % 7);
      ++complete;
    }
  }
  CHECK(complete >= 3);

  DataConfig lm;
  lm.kind = CorpusKind::CharLM;
  lm.text_path = "data/gettysburg.txt";
  lm.base_dir = RECURSOR_SOURCE_DIR;
  Corpus d(lm, 4);
  const auto window = d.sequence();
  CHECK(std::search(d.text().begin(), d.text().end(), window.begin(), window.end()) != d.text().end());

  lm.text_path = "data/missing.txt";
  CHECK_THROWS_AS(Corpus(lm, 4), ConfigError);
  CHECK_THROWS_AS(corpus_kind_from_string("wiki"), ConfigError);
  CHECK(decode_bytes(encode_bytes("hi", true, true)) == "hi");
  CHECK_THROWS_AS(decode_bytes(std::vector<int>{300}), IndexError);
}

TEST_CASE("total loss gradient matches finite differences on a micro-model") {
  ModelSpec spec;
  spec.n_layers = 2;
  spec.n_recursions = 2;
  spec.share = ShareStrategy::Cycle;
  spec.d_model = 8;
  spec.n_heads = 2;
  spec.n_kv_heads = 1;
  spec.d_head = 4;
  spec.d_inter = 16;
  spec.vocab = 16;
  Rng rng(21);
  Batch batch;
  for (int b = 0; b < 2; ++b) {
    std::vector<int> s(7);
    for (auto& t : s) t = static_cast<int>(rng.below(16));
    batch.inputs.emplace_back(s.begin(), s.end() - 1);
    batch.targets.emplace_back(s.begin() + 1, s.end());
  }
  LossSchedule sched;
  // Self-distillation is left out: its detached teacher is a deliberate
  // stop-gradient that finite differences cannot see.
  sched.mode = ExitWeighting::WeightedAvg;

  SUBCASE("expert-choice with auxiliary and z losses") {
    Model model = Model::random(spec, rng, 0.3);
    auto rc = RouterConfig::expert_choice();
    rc.aux_coeff = 0.2;
    rc.z_coeff = 0.05;
    Router router = Router::create(rc, 2, 8, rng, 0.5);
    TrainState st{&model, &router, nullptr, KVMode::RecursionWise};
    const auto rep = testutil::gradcheck(trainable_parameters(st), [&] { return batch_loss(st, batch, sched).total; });
    CHECK(rep.max_rel_error <= 1e-3);
  }
  SUBCASE("token-choice with balancing and z losses") {
    Model model = Model::random(spec, rng, 0.3);
    auto rc = RouterConfig::token_choice();
    rc.z_coeff = 0.05;
    Router router = Router::create(rc, 2, 8, rng, 0.5);
    TrainState st{&model, &router, nullptr, KVMode::RecursionWise};
    const auto rep = testutil::gradcheck(trainable_parameters(st), [&] { return batch_loss(st, batch, sched).total; });
    CHECK(rep.max_rel_error <= 1e-3);
  }
  SUBCASE("layerwise distillation from a deeper teacher") {
    Model model = Model::random(spec, rng, 0.3);
    ModelSpec tspec = spec;
    tspec.n_layers = 4;
    tspec.n_recursions = 1;
    tspec.share = ShareStrategy::None;
    Model teacher = Model::random(tspec, rng, 0.3);
    LossSchedule kd;
    kd.kd = KdMode::LayerwiseDyna;
    TrainState st{&model, nullptr, &teacher, KVMode::PerDepth};
    const auto rep = testutil::gradcheck(trainable_parameters(st), [&] { return batch_loss(st, batch, kd).total; });
    CHECK(rep.max_rel_error <= 1e-3);
    CHECK(batch_loss(st, batch, kd).metrics.kd > 0.0);
  }
}

TEST_CASE("loss components are non-negative and zero coefficients give plain LM") {
  const ModelSpec spec = byte_spec(3, 3);
  Rng rng(8);
  Model model = Model::random(spec, rng);
  auto rc = RouterConfig::expert_choice();
  rc.z_coeff = 1e-3;
  Router router = Router::create(rc, 3, spec.d_model, rng);
  Corpus corpus(copy_data(), 1);
  const Batch batch = corpus.next_batch();
  LossSchedule sched;
  TrainState st{&model, &router, nullptr, KVMode::RecursionWise};
  const auto bl = batch_loss(st, batch, sched);
  CHECK(bl.metrics.lm > 0.0);
  CHECK(bl.metrics.aux > 0.0);
  CHECK(bl.metrics.z > 0.0);
  CHECK(bl.metrics.balance == 0.0);
  CHECK(bl.metrics.loss == doctest::Approx(bl.metrics.lm + bl.metrics.aux + bl.metrics.z).epsilon(1e-12));

  auto zero = rc;
  zero.aux_coeff = 0.0;
  zero.z_coeff = 0.0;
  Rng r1(30), r2(30);
  Model m1 = Model::random(spec, r1), m2 = Model::random(spec, r2);
  Router ra = Router::create(zero, 3, spec.d_model, r1);
  auto no_aux = zero;
  no_aux.aux_mode = AuxMode::None;
  Router rb = Router::create(no_aux, 3, spec.d_model, r2);
  TrainState sa{&m1, &ra, nullptr, KVMode::RecursionWise}, sb{&m2, &rb, nullptr, KVMode::RecursionWise};
  TrainConfig tc;
  tc.steps = 5;
  std::vector<StepMetrics> la, lb;
  Corpus ca(copy_data(), 2), cb(copy_data(), 2);
  train(sa, ca, tc, [&](const StepMetrics& m) { la.push_back(m); });
  train(sb, cb, tc, [&](const StepMetrics& m) { lb.push_back(m); });
  REQUIRE(la.size() == 5);
  for (std::size_t i = 0; i < la.size(); ++i) {
    CHECK(la[i].loss == la[i].lm);
    CHECK(la[i].loss == lb[i].loss);
    CHECK(la[i].aux == 0.0);
  }
}

TEST_CASE("non-finite loss aborts the step") {
  const ModelSpec spec = byte_spec(2, 1, ShareStrategy::None);
  Rng rng(1);
  Model model = Model::random(spec, rng);
  model.weights().final_norm.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
  TrainState st{&model, nullptr, nullptr, KVMode::PerDepth};
  Corpus corpus(copy_data(), 1);
  AdamW opt(trainable_parameters(st), OptimConfig{});
  CHECK_THROWS_AS(train_step(st, corpus.next_batch(), LossSchedule{}, opt, 1e-3), NumericError);

  LossSchedule kd;
  kd.kd = KdMode::LayerwiseDyna;
  CHECK_THROWS_AS(batch_loss(st, corpus.next_batch(), kd), ConfigError);
}

TEST_CASE("copy-task loss decreases over 200 steps") {
  const ModelSpec spec = byte_spec(3, 3);
  Rng rng(42);
  Model model = Model::random(spec, rng);
  auto rc = RouterConfig::expert_choice();
  Router router = Router::create(rc, 3, spec.d_model, rng);
  TrainState st{&model, &router, nullptr, KVMode::RecursionWise};
  Corpus corpus(copy_data(), 42);
  TrainConfig tc;
  tc.steps = 200;
  tc.optim.lr = 1e-2;
  std::vector<double> losses;
  std::size_t checkpoints = 0;
  std::ostringstream log;
  train(
      st, corpus, tc,
      [&](const StepMetrics& m) {
        losses.push_back(m.lm);
        m.write_jsonl(log);
      },
      [&](std::size_t) { ++checkpoints; });
  REQUIRE(losses.size() == 200);
  const double head = mean_of(losses, 0, 10), tail = mean_of(losses, 190, 200);
  MESSAGE("copy loss " << head << " -> " << tail);
  CHECK(tail < 0.6 * head);
  CHECK(checkpoints == 1);
  std::istringstream lines(log.str());
  std::string line;
  std::getline(lines, line);
  const auto j = nlohmann::json::parse(line);
  CHECK(j["step"] == 1);
  CHECK(j["router"].contains("dead_token_ratio"));
}

TEST_CASE("state copying is no better than parallel decoding on a trained model") {
  ModelSpec spec = byte_spec(4, 2);
  Rng rng(9);
  Model model = Model::random(spec, rng);
  TrainState st{&model, nullptr, nullptr, KVMode::PerDepth};
  DataConfig data;
  data.kind = CorpusKind::CharLM;
  data.text_path = "data/gettysburg.txt";
  data.base_dir = RECURSOR_SOURCE_DIR;
  data.seq_len = 32;
  data.batch = 4;
  Corpus corpus(data, 9);
  TrainConfig tc;
  tc.steps = 400;
  tc.optim.lr = 1e-2;
  tc.loss.mode = ExitWeighting::WeightedAvg;
  train(st, corpus, tc, {});

  DecodeOptions par;
  par.policy = ExitPolicy::Confidence;
  par.threshold = 0.2;
  DecodeOptions copy = par;
  copy.fill = FillMode::StateCopy;
  double nll_par = 0.0, nll_copy = 0.0, nll_full = 0.0;
  std::size_t exits = 0;
  for (int i = 0; i < 24; ++i) {
    const auto seq = corpus.sequence();
    const auto a = score_sequence(model, par, seq, i);
    const auto b = score_sequence(model, copy, seq, i);
    nll_par += a.nll;
    nll_copy += b.nll;
    nll_full += score_sequence(model, {}, seq, i).nll;
    for (const auto& r : a.trace) exits += r.exit_depth < 2;
  }
  MESSAGE("perplexity full " << std::exp(nll_full / 24) << " parallel " << std::exp(nll_par / 24) << " state copy "
                             << std::exp(nll_copy / 24) << " early exits " << exits);
  CHECK(exits > 0);
  CHECK(std::exp(nll_copy / 24) >= std::exp(nll_par / 24));
}

namespace {

struct SmokeRun {
  std::vector<RoutingTrace> traces;
  StepMetrics last;
};

// Trains a shared 3-block stack with a router on bundled text, then collects
// routing traces on fresh batches.
SmokeRun smoke_train(const RouterConfig& rc, std::size_t steps) {
  const ModelSpec spec = byte_spec(3, 3);
  Rng rng(7);
  Model model = Model::random(spec, rng);
  Router router = Router::create(rc, 3, spec.d_model, rng);
  TrainState st{&model, &router, nullptr, KVMode::RecursionWise};
  DataConfig data;
  data.kind = CorpusKind::CharLM;
  data.text_path = "data/gettysburg.txt";
  data.base_dir = RECURSOR_SOURCE_DIR;
  data.seq_len = 24;
  data.batch = 4;
  Corpus corpus(data, 3);
  TrainConfig tc;
  tc.steps = steps;
  tc.optim.lr = 1e-2;
  SmokeRun run;
  train(st, corpus, tc, [&](const StepMetrics& m) { run.last = m; });
  NoGradGuard guard;
  for (int i = 0; i < 16; ++i) {
    auto bl = batch_loss(st, corpus.next_batch(), tc.loss);
    run.traces.insert(run.traces.end(), bl.traces.begin(), bl.traces.end());
  }
  return run;
}

}  // namespace

TEST_CASE("expert-choice router scores separate under the auxiliary loss") {
  auto rc = RouterConfig::expert_choice();
  rc.aux_coeff = 1.0;
  const auto run = smoke_train(rc, 2000);
  const double overlap = score_overlap(run.traces);
  const auto metrics = router_metrics(run.traces);
  MESSAGE("overlap " << overlap << " dead " << metrics.dead_token_ratio << " sampling accuracy "
                     << metrics.sampling_accuracy);
  CHECK(overlap < 0.10);
  CHECK(metrics.dead_token_ratio < 0.05);
  CHECK(run.last.aux >= 0.0);
}

TEST_CASE("token-choice routing balances under the balancing loss") {
  const auto run = smoke_train(RouterConfig::token_choice(), 1000);
  const auto metrics = router_metrics(run.traces);
  MESSAGE("maxvio " << metrics.maxvio << " entropy " << metrics.entropy);
  CHECK(metrics.maxvio < 0.5);
  CHECK(run.last.balance >= 0.0);
}

TEST_CASE("loss-free balancing moves biases toward underloaded depths") {
  auto rc = RouterConfig::token_choice();
  rc.balance_mode = BalanceMode::LossFree;
  rc.bias_update_rate = 1e-2;
  const ModelSpec spec = byte_spec(3, 3);
  Rng rng(4);
  Model model = Model::random(spec, rng);
  Router router = Router::create(rc, 3, spec.d_model, rng);
  TrainState st{&model, &router, nullptr, KVMode::RecursionWise};
  Corpus corpus(copy_data(), 4);
  TrainConfig tc;
  tc.steps = 20;
  train(st, corpus, tc, [&](const StepMetrics& m) { CHECK(m.balance == 0.0); });
  std::int64_t total = 0;
  for (auto c : router.load_counts()) total += c;
  CHECK(total == 20 * 4 * 16);
  CHECK(std::any_of(router.biases().begin(), router.biases().end(), [](double b) { return b != 0.0; }));
}
