#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "gradcheck.hpp"
#include "json.hpp"
#include "recursor/errors.hpp"
#include "recursor/model.hpp"
#include "recursor/ops.hpp"
#include "recursor/routing.hpp"

using namespace recursor;
using testutil::random_tensor;

namespace {

ModelSpec routed_spec(int recursions, ShareStrategy share = ShareStrategy::Cycle) {
  ModelSpec s;
  s.n_layers = share == ShareStrategy::MiddleCycle ? recursions + 2 : recursions;
  s.n_recursions = recursions;
  s.share = share;
  s.context_len = 32;
  return s;
}

std::vector<int> ids_of(int n, int vocab, int seed) {
  Rng rng(seed);
  std::vector<int> ids(n);
  for (auto& t : ids) t = static_cast<int>(rng.below(vocab));
  return ids;
}

double bce_oracle(const std::vector<double>& p, const std::vector<bool>& y) {
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p[i], 1e-7, 1.0 - 1e-7);
    acc += y[i] ? -std::log(q) : -std::log(1.0 - q);
  }
  return acc / static_cast<double>(p.size());
}

}  // namespace

TEST_CASE("capacity schedule") {
  CHECK(capacity_schedule(3, 9) == std::vector<int>{9, 6, 3});
  CHECK(capacity_schedule(2, 10) == std::vector<int>{10, 5});
  CHECK(capacity_schedule(4, 10) == std::vector<int>{10, 7, 5, 2});
  for (int nr = 1; nr <= 5; ++nr)
    for (int T = nr; T < 40; ++T) {
      auto k = capacity_schedule(nr, T);
      CHECK(k.front() == T);
      CHECK(std::is_sorted(k.rbegin(), k.rend()));
    }
}

TEST_CASE("expert-choice selection") {
  std::vector<double> g{0.9, 0.1, 0.5, 0.7};
  CHECK(expert_choice_select(g, 2) == std::vector<bool>{true, false, false, true});
  CHECK(expert_choice_select(g, 4) == std::vector<bool>(4, true));
  std::vector<double> tie{0.5, 0.5, 0.1};
  CHECK(expert_choice_select(tie, 1) == std::vector<bool>{true, false, false});
  CHECK_THROWS_AS(expert_choice_select(g, 5), CapacityError);
  std::vector<bool> active{false, true, true, true};
  CHECK(expert_choice_select(g, active, 2) == std::vector<bool>{false, false, true, true});
  CHECK_THROWS_AS(expert_choice_select(g, active, 4), CapacityError);
}

TEST_CASE("token-choice assignment") {
  std::vector<double> row{0.2, 0.5, 0.3};
  CHECK(token_choice_assign(row, 3) == std::vector<int>{2});
  std::vector<double> same{0.1, 0.6, 0.3, 0.1, 0.6, 0.3};
  CHECK(token_choice_assign(same, 3) == std::vector<int>{2, 2});
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> bias{inf, 0.0, 0.0};
  CHECK(token_choice_assign(same, 3, bias) == std::vector<int>{1, 1});
  // Shift invariance of routing decisions.
  Rng rng(1);
  std::vector<double> g(30);
  for (auto& v : g) v = rng.uniform(-3, 3);
  auto base = token_choice_assign(g, 3);
  for (auto& v : g) v += 7.25;
  CHECK(token_choice_assign(g, 3) == base);
}

TEST_CASE("auxiliary bce loss") {
  auto perfect = aux_bce_loss(Tensor::vector({1.0, 0.0, 1.0}), {true, false, true});
  CHECK(perfect.item() <= 1e-6);
  auto flat = aux_bce_loss(Tensor::vector({0.5, 0.5, 0.5, 0.5}), {true, false, true, false});
  CHECK(flat.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  Rng rng(2);
  std::vector<double> p(17);
  std::vector<bool> y(17);
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = rng.uniform(0.01, 0.99);
    y[i] = rng.uniform() < 0.4;
  }
  CHECK(std::abs(aux_bce_loss(Tensor::vector(p), y).item() - bce_oracle(p, y)) <= 1e-10);
}

TEST_CASE("balancing loss") {
  const double coeff = 0.1;
  auto uniform = Tensor::full({6, 3}, 1.0 / 3.0);
  std::vector<int> even{1, 2, 3, 1, 2, 3};
  CHECK(balancing_loss(uniform, even, coeff).item() == doctest::Approx(coeff).epsilon(1e-12));
  auto onehot = Tensor::matrix({{1, 0, 0}, {1, 0, 0}, {1, 0, 0}});
  std::vector<int> collapsed{1, 1, 1};
  CHECK(balancing_loss(onehot, collapsed, coeff).item() == doctest::Approx(3 * coeff).epsilon(1e-12));

  Rng rng(3);
  const int T = 11, N = 4;
  auto probs = softmax(random_tensor(rng, {T, N}, -2, 2));
  std::vector<int> depths(T);
  for (auto& d : depths) d = 1 + static_cast<int>(rng.below(N));
  double oracle = 0.0;
  for (int i = 0; i < N; ++i) {
    double count = 0.0, mean = 0.0;
    for (int t = 0; t < T; ++t) {
      count += depths[t] == i + 1;
      mean += probs.at(t, i) / T;
    }
    oracle += (static_cast<double>(N) / T) * count * mean;
  }
  CHECK(std::abs(balancing_loss(probs, depths, 0.3).item() - 0.3 * oracle) <= 1e-12);
}

TEST_CASE("loss-free bias updates") {
  std::vector<std::int64_t> counts{6, 2, 1};
  std::vector<double> b{0.0, 0.0, 0.0};
  CHECK(loss_free_update(counts, b, 0.01) == std::vector<double>{-0.01, 0.01, 0.01});
  std::vector<std::int64_t> even{3, 3, 3};
  CHECK(loss_free_update(even, b, 0.01) == b);

  // Closed loop on a fixed skewed score matrix.
  Rng rng(4);
  const int T = 60, N = 3;
  std::vector<double> g(T * N);
  for (int t = 0; t < T; ++t)
    for (int j = 0; j < N; ++j) g[t * N + j] = rng.uniform(0, 1) + (j == 0 ? 0.4 : 0.0);
  const std::vector<double> g_copy = g;
  std::vector<double> bias(N, 0.0);
  auto vio = [&] {
    auto d = token_choice_assign(g, N, bias);
    std::vector<double> loads(N, 0.0);
    std::vector<std::int64_t> c(N, 0);
    for (int x : d) {
      loads[x - 1] += 1;
      c[x - 1] += 1;
    }
    return std::make_pair(maxvio(loads), c);
  };
  const double start = vio().first;
  for (int step = 0; step < 200; ++step) bias = loss_free_update(vio().second, bias, 0.005);
  CHECK(vio().first < start);
  CHECK(g == g_copy);
}

TEST_CASE("z-loss") {
  CHECK(z_loss(Tensor::matrix({{0, 0}})).item() == doctest::Approx(std::pow(std::log(2.0), 2)));
  const double l2 = std::log(2.0);
  CHECK(std::abs(z_loss(Tensor::matrix({{-l2, -l2}})).item()) <= 1e-15);
  Rng rng(5);
  auto x = random_tensor(rng, {5, 3}, -4, 4);
  double oracle = 0.0;
  for (std::size_t b = 0; b < 5; ++b) {
    double s = 0.0;
    for (std::size_t j = 0; j < 3; ++j) s += std::exp(x.at(b, j));
    oracle += std::log(s) * std::log(s) / 5.0;
  }
  CHECK(std::abs(z_loss(x).item() - oracle) <= 1e-12);
}

TEST_CASE("router metric formulas") {
  std::vector<double> loads{6, 2, 1};
  CHECK(maxvio(loads) == doctest::Approx(1.0));
  std::vector<double> p{1.0 / 3, 1.0 / 3, 1.0 / 3};
  CHECK(routing_entropy(p) == doctest::Approx(1.0986).epsilon(1e-4));
  CHECK_THROWS_AS(router_metrics(std::vector<RoutingTrace>{}), MetricError);
}

TEST_CASE("router config validation and defaults") {
  auto ec = RouterConfig::expert_choice();
  CHECK(ec.alpha == 0.1);
  CHECK(ec.aux_mode == AuxMode::AuxLoss);
  CHECK(ec.activation == RouterActivation::Sigmoid);
  auto tc = RouterConfig::token_choice();
  CHECK(tc.balance_mode == BalanceMode::BalanceLoss);
  CHECK(tc.z_coeff == 1e-3);
  CHECK_NOTHROW(ec.validate());
  CHECK_NOTHROW(tc.validate());
  ec.balance_mode = BalanceMode::LossFree;
  CHECK_THROWS_AS(ec.validate(), ConfigError);
  tc.aux_mode = AuxMode::AuxRouter;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
  CHECK(router_arch_from_string("wide_mlp") == RouterArch::WideMLP);
  CHECK_THROWS_AS(router_kind_from_string("bogus"), ConfigError);
}

TEST_CASE("expert-choice forward selects exact capacities with nested masks") {
  for (auto arch : {RouterArch::Linear, RouterArch::MLP, RouterArch::WideMLP}) {
    Rng rng(6);
    auto spec = routed_spec(3);
    Model m = Model::random(spec, rng, 0.3);
    auto cfg = RouterConfig::expert_choice();
    cfg.arch = arch;
    Router router = Router::create(cfg, 3, spec.d_model, rng, 0.5);
    ForwardOptions opt;
    opt.router = &router;
    auto r = m.forward(ids_of(9, 32, 7), opt);
    const auto caps = capacity_schedule(3, 9);
    for (int s = 0; s < 3; ++s) {
      CHECK(std::count(r.trace.selected[s].begin(), r.trace.selected[s].end(), true) == caps[s]);
      if (s > 0)
        for (int t = 0; t < 9; ++t)
          if (r.trace.selected[s][t]) CHECK(r.trace.selected[s - 1][t]);
    }
    auto depths = r.trace.token_depths();
    CHECK(std::count(depths.begin(), depths.end(), 3) == 3);
  }
}

TEST_CASE("expert-choice update follows the gated residual rule") {
  Rng rng(8);
  auto spec = routed_spec(2);
  Model m = Model::random(spec, rng, 0.3);
  Router router = Router::create(RouterConfig::expert_choice(), 2, spec.d_model, rng, 0.5);
  ForwardOptions opt;
  opt.router = &router;
  auto ids = ids_of(6, 32, 9);
  auto r = m.forward(ids, opt);
  const Tensor h1 = r.stage_hidden[0];
  const Tensor h2 = r.stage_hidden[1];
  const auto& step = r.steps[1];
  std::vector<int> rows, pos;
  std::vector<double> g;
  for (std::size_t i = 0; i < step.active.size(); ++i)
    if (step.selected[i]) {
      rows.push_back(step.active[i]);
      pos.push_back(step.active[i]);
      g.push_back(step.scores.at(i));
    }
  REQUIRE(rows.size() == 3);
  // Depth 2 only sees the selected tokens' keys; a fresh bank reproduces that.
  auto bank = m.make_cache(KVMode::RecursionWise);
  const Tensor x = gather_rows(h1, rows);
  const Tensor f = m.run_layers(recursion_layers(spec, 2), x, pos, bank, 0);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t c = 0; c < spec.d_model; ++c)
      CHECK(std::abs(h2.at(rows[i], c) - (x.at(i, c) + 0.1 * g[i] * f.at(i, c))) <= 1e-12);
  for (int t = 0; t < 6; ++t)
    if (std::find(rows.begin(), rows.end(), t) == rows.end())
      for (std::size_t c = 0; c < spec.d_model; ++c) CHECK(h2.at(t, c) == h1.at(t, c));
}

TEST_CASE("token-choice update adds the first hidden state at the chosen depth") {
  Rng rng(10);
  auto spec = routed_spec(3);
  Model m = Model::random(spec, rng, 0.3);
  Router router = Router::create(RouterConfig::token_choice(), 3, spec.d_model, rng, 1.0);
  ForwardOptions opt;
  opt.router = &router;
  auto ids = ids_of(8, 32, 11);
  auto r = m.forward(ids, opt);
  const Tensor h1 = m.embed(ids);
  for (int t = 0; t < 8; ++t) {
    const int depth = r.trace.depths[t];
    // Final hidden of a token that stops at `depth` = g_depth * f(prev) + h1.
    const Tensor& final_h = r.stage_hidden.back();
    const Tensor& at_depth = r.stage_hidden[depth - 1];
    for (std::size_t c = 0; c < spec.d_model; ++c) CHECK(final_h.at(t, c) == at_depth.at(t, c));
  }
  CHECK(r.router_probs.shape() == Shape{8, 3});
  for (int t = 0; t < 8; ++t) {
    double s = 0;
    for (int j = 0; j < 3; ++j) s += r.router_probs.at(t, j);
    CHECK(s == doctest::Approx(1.0));
  }
  // Biases steer assignments without touching stored gates.
  auto probs_before = r.router_probs.to_vector();
  router.biases() = {0.0, 0.0, 1e9};
  auto biased = m.forward(ids, opt);
  for (int d : biased.trace.depths) CHECK(d == 3);
  CHECK(biased.router_probs.to_vector() == probs_before);
}

TEST_CASE("token-choice recursion rule on a single token") {
  Rng rng(12);
  auto spec = routed_spec(2);
  Model m = Model::random(spec, rng, 0.3);
  Router router = Router::create(RouterConfig::token_choice(), 2, spec.d_model, rng, 1.0);
  router.biases() = {0.0, 1e9};  // force depth 2
  ForwardOptions opt;
  opt.router = &router;
  std::vector<int> ids{5};
  auto r = m.forward(ids, opt);
  const Tensor h1 = m.embed(ids);
  auto bank = m.make_cache(KVMode::RecursionWise);
  std::vector<int> pos{0};
  const double g1 = r.router_probs.at(0, 0), g2 = r.router_probs.at(0, 1);
  const Tensor s1 = scale(m.run_layers(recursion_layers(spec, 1), h1, pos, bank, 0), g1);
  const Tensor s2 = add(scale(m.run_layers(recursion_layers(spec, 2), s1, pos, bank, 0), g2), h1);
  for (std::size_t c = 0; c < spec.d_model; ++c)
    CHECK(std::abs(r.stage_hidden.back().at(0, c) - s2.at(0, c)) <= 1e-12);
}

TEST_CASE("auxiliary router gradients stay isolated") {
  Rng rng(13);
  auto spec = routed_spec(2);
  Model m = Model::random(spec, rng, 0.3);
  auto cfg = RouterConfig::expert_choice();
  cfg.aux_mode = AuxMode::AuxRouter;
  Router router = Router::create(cfg, 2, spec.d_model, rng, 0.5);
  REQUIRE(router.has_aux_router());
  ForwardOptions opt;
  opt.router = &router;
  auto r = m.forward(ids_of(6, 32, 14), opt);
  Tensor loss = aux_bce_loss(r.steps[1].aux_scores, r.steps[1].selected);
  for (auto& p : m.weights().parameters()) p.clear_grad();
  loss.backward();
  auto zero = [](const Tensor& p) {
    if (!p.has_grad()) return true;
    for (double g : p.grad())
      if (g != 0.0) return false;
    return true;
  };
  for (const auto& p : m.weights().parameters()) CHECK(zero(p));
  for (auto& net : router.nets())
    for (const auto& p : net.parameters()) CHECK(zero(p));
  bool aux_moved = false;
  for (auto& net : router.aux_nets())
    for (const auto& p : net.parameters()) aux_moved = aux_moved || !zero(p);
  CHECK(aux_moved);
}

TEST_CASE("router gradients match finite differences") {
  Rng rng(15);
  auto spec = routed_spec(2);
  Model m = Model::random(spec, rng, 0.3);
  auto cfg = RouterConfig::expert_choice();
  cfg.arch = RouterArch::MLP;
  Router router = Router::create(cfg, 2, spec.d_model, rng, 0.5);
  ForwardOptions opt;
  opt.router = &router;
  auto ids = ids_of(5, 32, 16);
  std::vector<int> targets{3, 1, 4, 1, 5};
  std::vector<Tensor> params;
  for (auto& [n, p] : router.named_parameters()) params.push_back(p);
  auto rep = testutil::gradcheck(
      params, [&] { return cross_entropy(m.forward(ids, opt).logits, targets); }, 1e-5, 1e-4, 8);
  CHECK(rep.max_rel_error <= 1e-5);
}

TEST_CASE("routing metrics from traces") {
  Rng rng(17);
  auto spec = routed_spec(2);
  Model m = Model::random(spec, rng, 0.3);
  Router router = Router::create(RouterConfig::expert_choice(), 2, spec.d_model, rng, 0.5);
  ForwardOptions opt;
  opt.router = &router;
  std::vector<RoutingTrace> traces;
  for (int s = 0; s < 4; ++s) {
    opt.sample_id = s;
    traces.push_back(m.forward(ids_of(6, 32, 20 + s), opt).trace);
  }
  // Inference rule replaced by the training selection gives 100% agreement.
  auto copy = traces;
  for (auto& tr : copy) tr.inference_selected = tr.selected;
  CHECK(router_metrics(copy).sampling_accuracy == 1.0);
  auto met = router_metrics(traces);
  CHECK(met.dead_token_ratio >= 0.0);
  CHECK(met.dead_token_ratio <= 1.0);
  // Position t is dead iff no trace selects it at the last step.
  int dead = 0;
  for (int t = 0; t < 6; ++t) {
    bool alive = false;
    for (const auto& tr : traces) alive = alive || tr.selected.back()[t];
    dead += !alive;
  }
  CHECK(met.dead_token_ratio == doctest::Approx(dead / 6.0));

  std::ostringstream out;
  traces[2].write_jsonl(out);
  std::istringstream in(out.str());
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    auto rec = nlohmann::json::parse(line);
    CHECK(rec["sample_id"] == 2);
    CHECK(rec.contains("token_index"));
    CHECK(rec.contains("depth"));
    ++n;
  }
  CHECK(n == 6 + 6);  // step 2 scores every token kept by step 1

  Router tc = Router::create(RouterConfig::token_choice(), 2, spec.d_model, rng, 1.0);
  opt.router = &tc;
  std::vector<RoutingTrace> tct{m.forward(ids_of(10, 32, 30), opt).trace};
  auto tm = router_metrics(tct);
  std::vector<double> loads(2, 0.0);
  for (int d : tct[0].depths) loads[d - 1] += 1;
  CHECK(tm.maxvio == doctest::Approx(maxvio(loads)));
  CHECK(tm.entropy > 0.0);
  CHECK(tm.entropy <= std::log(2.0) + 1e-12);
}
