#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "recursor/checkpoint.hpp"
#include "recursor/config.hpp"
#include "recursor/corpus.hpp"
#include "recursor/cost_model.hpp"
#include "recursor/decode.hpp"
#include "recursor/errors.hpp"
#include "recursor/kv_cache.hpp"
#include "recursor/model.hpp"
#include "recursor/routing.hpp"
#include "recursor/scheduler.hpp"
#include "recursor/threshold.hpp"

namespace py = pybind11;
using namespace recursor;
using nlohmann::json;

namespace {

py::array_t<double> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

RunConfig parse_config(const std::string& text, const std::string& base_dir) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  RunConfig cfg = run_config_from_json(j, base_dir);
  cfg.validate();
  return cfg;
}

CostOptions cost_options(const RunConfig& cfg, bool count_head) {
  CostOptions co;
  co.kv_mode = cfg.kv_mode;
  co.router = cfg.router;
  if (cfg.router) co.capacity = linear_capacity(cfg.model.n_recursions);
  co.count_head = count_head;
  return co;
}

py::dict report_dict(const ThroughputReport& r) {
  py::dict d;
  d["requests"] = r.requests;
  d["tokens"] = r.tokens;
  d["ticks"] = r.ticks;
  d["makespan"] = r.makespan;
  d["tokens_per_tick"] = r.tokens_per_tick;
  d["mean_latency"] = r.mean_latency;
  d["p95_latency"] = r.p95_latency;
  d["utilization"] = r.utilization;
  return d;
}

DecodeOptions decode_options(const std::string& exit, double threshold, int static_depth) {
  DecodeOptions o;
  o.policy = exit_policy_from_string(exit);
  o.threshold = threshold;
  o.static_depth = static_depth;
  return o;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Recursive transformer core: tied-weight models, routing, caching, decoding and cost models";

  auto base = py::register_exception<Error>(m, "RecursorError", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  (void)base;

  m.attr("BYTE_VOCAB") = kByteVocab;
  m.attr("THRESHOLD_GRID") = kThresholdGrid;

  py::class_<ModelSpec>(m, "ModelSpec")
      .def(py::init<>())
      .def_readwrite("n_layers", &ModelSpec::n_layers)
      .def_readwrite("n_recursions", &ModelSpec::n_recursions)
      .def_property(
          "share", [](const ModelSpec& s) { return to_string(s.share); },
          [](ModelSpec& s, const std::string& v) { s.share = share_strategy_from_string(v); })
      .def_readwrite("d_model", &ModelSpec::d_model)
      .def_readwrite("n_heads", &ModelSpec::n_heads)
      .def_readwrite("n_kv_heads", &ModelSpec::n_kv_heads)
      .def_readwrite("d_head", &ModelSpec::d_head)
      .def_readwrite("d_inter", &ModelSpec::d_inter)
      .def_readwrite("vocab", &ModelSpec::vocab)
      .def_readwrite("context_len", &ModelSpec::context_len)
      .def_readwrite("tie_embeddings", &ModelSpec::tie_embeddings)
      .def("validate", &ModelSpec::validate)
      .def("unique_blocks", &ModelSpec::unique_blocks)
      .def("to_json", [](const ModelSpec& s) { return to_json(s).dump(); })
      .def("__repr__", [](const ModelSpec& s) { return "ModelSpec(" + to_json(s).dump() + ")"; });

  m.def("layer_index_map", &layer_index_map, py::arg("spec"), py::arg("layer"));
  m.def("unrolled_blocks", &unrolled_blocks, py::arg("spec"));

  py::class_<Model>(m, "Model")
      .def_static(
          "random",
          [](const ModelSpec& spec, std::uint64_t seed, double init_std) {
            Rng rng(seed);
            return Model::random(spec, rng, init_std);
          },
          py::arg("spec"), py::arg("seed") = 0, py::arg("init_std") = 0.02)
      .def_property_readonly("spec", &Model::spec)
      .def(
          "forward",
          [](const Model& model, const std::vector<int>& ids) {
            NoGradGuard guard;
            return to_numpy(model.forward(ids).logits);
          },
          py::arg("ids"), "Logits [T x vocab] for one sequence.")
      .def(
          "stage_logits",
          [](const Model& model, const std::vector<int>& ids) {
            NoGradGuard guard;
            const auto res = model.forward(ids);
            std::vector<py::array_t<double>> out;
            for (const auto& h : res.stage_hidden) out.push_back(to_numpy(intermediate_logits(model, h)));
            return out;
          },
          py::arg("ids"), "Logits after each exit stage.")
      .def("explicit_unroll", &explicit_unroll)
      .def("parameter_count", [](const Model& model) { return count_parameters(model.weights()); })
      .def(
          "decode",
          [](const Model& model, const std::vector<int>& prompt, int max_tokens, const std::string& exit,
             double threshold, int static_depth, std::uint64_t seed) {
            NoGradGuard guard;
            Rng rng(seed);
            const auto out = decode(model, decode_options(exit, threshold, static_depth), prompt, max_tokens,
                                    SamplerConfig{}, rng);
            std::vector<int> depths;
            for (const auto& r : out.trace) depths.push_back(r.exit_depth);
            py::dict d;
            d["tokens"] = out.tokens;
            d["exit_depths"] = depths;
            return d;
          },
          py::arg("prompt"), py::arg("max_tokens"), py::arg("exit") = "none", py::arg("threshold") = 0.9,
          py::arg("static_depth") = 1, py::arg("seed") = 0,
          "Greedy generation; exit_depths has one entry per token fed back.");

  m.def(
      "load_checkpoint",
      [](const std::string& dir) {
        auto ck = load_checkpoint(dir);
        py::dict d;
        d["model"] = std::move(ck.model);
        d["step"] = ck.step;
        d["config_hash"] = ck.config_hash;
        d["config"] = to_json(ck.config).dump();
        d["has_router"] = ck.router.has_value();
        return d;
      },
      py::arg("path"));

  m.def(
      "encode_bytes", [](const std::string& text, bool bos, bool eos) { return encode_bytes(text, bos, eos); },
      py::arg("text"), py::arg("bos") = true, py::arg("eos") = false);
  m.def(
      "decode_bytes", [](const std::vector<int>& ids) { return py::bytes(decode_bytes(ids)); }, py::arg("ids"));

  m.def("capacity_schedule", &capacity_schedule, py::arg("n_recursions"), py::arg("tokens"));
  m.def(
      "expert_choice_select",
      [](const std::vector<double>& scores, int k, std::optional<std::vector<bool>> active) {
        return active ? expert_choice_select(scores, *active, k) : expert_choice_select(scores, k);
      },
      py::arg("scores"), py::arg("k"), py::arg("active") = py::none());
  m.def(
      "token_choice_assign",
      [](const std::vector<std::vector<double>>& probs, const std::vector<double>& biases) {
        if (probs.empty()) return std::vector<int>{};
        const int n = static_cast<int>(probs.front().size());
        std::vector<double> flat;
        for (const auto& row : probs) {
          if (static_cast<int>(row.size()) != n) throw DimensionError("token_choice_assign: ragged rows");
          flat.insert(flat.end(), row.begin(), row.end());
        }
        return token_choice_assign(flat, n, biases);
      },
      py::arg("probs"), py::arg("biases") = std::vector<double>{});
  m.def("maxvio", [](const std::vector<double>& loads) { return maxvio(loads); }, py::arg("loads"));

  m.def(
      "relative_costs",
      [](const std::string& mode, int n_recursions, double active, double context) {
        const auto c = relative_costs(kv_mode_from_string(mode), n_recursions, active, context);
        py::dict d;
        d["kv_memory"] = c.kv_memory;
        d["kv_io"] = c.kv_io;
        d["attn_flops"] = c.attn_flops;
        return d;
      },
      py::arg("mode"), py::arg("n_recursions"), py::arg("active_tokens"), py::arg("context_tokens"));

  m.def(
      "flops_from_json",
      [](const std::string& text, std::optional<std::size_t> seq_len, double tokens, bool count_head) {
        const RunConfig cfg = parse_config(text, "");
        const std::size_t T = seq_len.value_or(cfg.model.context_len);
        const auto co = cost_options(cfg, count_head);
        const auto p = count_params(cfg.model, co);
        const auto f = forward_flops(cfg.model, T, co);
        py::dict d;
        d["non_embedding_params"] = p.non_embedding();
        d["total_params"] = p.total();
        d["unique_blocks"] = p.blocks;
        d["forward_flops"] = f.total();
        d["training_flops"] = training_flops(cfg.model, T, tokens, co);
        d["kv_bytes"] = kv_bytes(cfg.model, T, 2, co);
        return d;
      },
      py::arg("config_json"), py::arg("seq_len") = py::none(), py::arg("tokens") = 20e9,
      py::arg("count_head") = false);

  m.def(
      "config_hash_from_json",
      [](const std::string& text) { return config_hash(parse_config(text, "")); }, py::arg("config_json"));
  m.def(
      "load_config_json",
      [](const std::string& path) { return to_json(load_run_config(path)).dump(); }, py::arg("path"),
      "Validated config, normalized with defaults filled in.");

  m.def("beta_pdf", &beta_pdf, py::arg("x"), py::arg("alpha"), py::arg("beta"));
  m.def(
      "estimate_threshold",
      [](std::pair<double, double> disagree, std::pair<double, double> agree, double zeta) {
        const BetaMixture mix{{disagree.first, disagree.second}, {agree.first, agree.second}};
        const auto e = estimate_threshold(mix, zeta);
        return py::make_tuple(e.lambda, e.reached);
      },
      py::arg("disagree"), py::arg("agree"), py::arg("zeta") = 0.4,
      "Smallest grid threshold whose agree-posterior reaches zeta, and whether it was reached.");
  m.def(
      "fit_mixture",
      [](const std::vector<double>& confidences, const std::vector<bool>& agree) -> py::object {
        if (confidences.size() != agree.size()) throw DimensionError("fit_mixture: length mismatch");
        std::vector<CalibrationSample> s;
        for (std::size_t i = 0; i < confidences.size(); ++i) s.push_back({confidences[i], agree[i]});
        const auto fit = fit_moments(s);
        if (!fit) return py::none();
        return py::make_tuple(py::make_tuple(fit->disagree.alpha, fit->disagree.beta),
                              py::make_tuple(fit->agree.alpha, fit->agree.beta));
      },
      py::arg("confidences"), py::arg("agree"), "((a, b) disagree, (a, b) agree) or None.");

  m.def(
      "simulate",
      [](const std::vector<std::tuple<double, int, std::vector<int>>>& requests, const std::string& mode,
         std::size_t max_batch, int n_stages) {
        std::vector<Request> reqs;
        int id = 0;
        for (const auto& [arrival, tokens, exits] : requests) reqs.push_back({id++, arrival, tokens, exits});
        SchedulerConfig cfg;
        cfg.max_batch = max_batch;
        cfg.n_stages = n_stages;
        cfg.validate();
        return report_dict(throughput_report(schedule(batch_mode_from_string(mode), reqs, cfg)));
      },
      py::arg("requests"), py::arg("mode"), py::arg("max_batch") = 32, py::arg("n_stages") = 3,
      "requests: (arrival, tokens, exit_depths) tuples; mode: vanilla, csb or cdb.");
  m.def(
      "simulate_scenario",
      [](const std::string& path, const std::string& mode) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open '" + path + "'");
        const auto sc = read_scenario(in);
        return report_dict(throughput_report(schedule(batch_mode_from_string(mode), sc.requests, sc.config)));
      },
      py::arg("path"), py::arg("mode"));
}
