#include "recursor/decode.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"
#include "recursor/errors.hpp"
#include "recursor/ops.hpp"

namespace recursor {

std::string to_string(ExitPolicy p) {
  switch (p) {
    case ExitPolicy::None:
      return "none";
    case ExitPolicy::Confidence:
      return "confidence";
    case ExitPolicy::Oracle:
      return "oracle";
    case ExitPolicy::Static:
      return "static";
    case ExitPolicy::Router:
      return "router";
  }
  return "?";
}

std::string to_string(FillMode f) {
  switch (f) {
    case FillMode::Parallel:
      return "parallel";
    case FillMode::StateCopy:
      return "state_copy";
    case FillMode::Skip:
      return "skip";
  }
  return "?";
}

std::string to_string(SamplerKind s) {
  switch (s) {
    case SamplerKind::Greedy:
      return "greedy";
    case SamplerKind::TopK:
      return "top_k";
    case SamplerKind::Nucleus:
      return "nucleus";
  }
  return "?";
}

ExitPolicy exit_policy_from_string(const std::string& s) {
  if (s == "none") return ExitPolicy::None;
  if (s == "confidence") return ExitPolicy::Confidence;
  if (s == "oracle") return ExitPolicy::Oracle;
  if (s == "static") return ExitPolicy::Static;
  if (s == "router") return ExitPolicy::Router;
  throw ConfigError("unknown exit policy '" + s + "'");
}

FillMode fill_mode_from_string(const std::string& s) {
  if (s == "parallel") return FillMode::Parallel;
  if (s == "state_copy") return FillMode::StateCopy;
  if (s == "skip") return FillMode::Skip;
  throw ConfigError("unknown fill mode '" + s + "'");
}

SamplerKind sampler_kind_from_string(const std::string& s) {
  if (s == "greedy") return SamplerKind::Greedy;
  if (s == "top_k") return SamplerKind::TopK;
  if (s == "nucleus") return SamplerKind::Nucleus;
  throw ConfigError("unknown sampler '" + s + "'");
}

void write_exit_trace(std::ostream& out, std::span<const ExitRecord> records) {
  for (const auto& r : records) {
    nlohmann::json j{{"sample_id", r.sample_id},
                     {"position", r.position},
                     {"exit_depth", r.exit_depth},
                     {"confidence", r.confidence}};
    out << j.dump() << '\n';
  }
}

std::vector<ExitRecord> read_exit_trace(std::istream& in) {
  std::vector<ExitRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      if (j.is_object() && j.value("kind", "") == "header") continue;
      ExitRecord r;
      r.sample_id = j.at("sample_id").get<int>();
      r.position = j.at("position").get<int>();
      r.exit_depth = j.at("exit_depth").get<int>();
      r.confidence = j.value("confidence", 0.0);
      if (r.exit_depth < 1) throw ReplayError("exit_depth must be >= 1");
      out.push_back(r);
    } catch (const nlohmann::json::exception& e) {
      throw ReplayError("exit trace line " + std::to_string(lineno) + ": " + e.what());
    } catch (const ReplayError& e) {
      throw ReplayError("exit trace line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

double confidence(std::span<const double> logits) {
  if (logits.empty()) throw DimensionError("confidence: empty logits");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  return 1.0 / z;
}

int argmax(std::span<const double> logits) {
  if (logits.empty()) throw DimensionError("argmax: empty logits");
  return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

int oracle_exit_depth(const std::vector<std::vector<double>>& per_depth_logits) {
  if (per_depth_logits.empty()) throw DimensionError("oracle_exit_depth: no depths");
  const int target = argmax(per_depth_logits.back());
  for (std::size_t d = 0; d < per_depth_logits.size(); ++d)
    if (argmax(per_depth_logits[d]) == target) return static_cast<int>(d) + 1;
  return static_cast<int>(per_depth_logits.size());
}

namespace {

int categorical(std::span<const double> logits, std::vector<int> candidates, double temperature,
                Rng& rng) {
  std::sort(candidates.begin(), candidates.end());
  double mx = -INFINITY;
  for (int c : candidates) mx = std::max(mx, logits[c] / temperature);
  std::vector<double> w(candidates.size());
  double total = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    w[i] = std::exp(logits[candidates[i]] / temperature - mx);
    total += w[i];
  }
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    u -= w[i];
    if (u < 0.0) return candidates[i];
  }
  return candidates.back();
}

// Indices by descending logit, ties to the lower index.
std::vector<int> ranked(std::span<const double> logits) {
  std::vector<int> idx(logits.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return logits[a] > logits[b]; });
  return idx;
}

Tensor single_row(const Tensor& t, std::size_t row) {
  const int idx[1] = {static_cast<int>(row)};
  return gather_rows(t, idx);
}

std::vector<double> row_of(const Tensor& t, std::size_t row) {
  const std::size_t n = t.dim(1);
  auto d = t.data();
  return std::vector<double>(d.begin() + row * n, d.begin() + (row + 1) * n);
}

}  // namespace

int sample_token(std::span<const double> logits, const SamplerConfig& config, Rng& rng) {
  if (!(config.temperature > 0.0)) throw ConfigError("sampler.temperature must be positive");
  switch (config.kind) {
    case SamplerKind::Greedy:
      return argmax(logits);
    case SamplerKind::TopK: {
      if (config.top_k < 1) throw ConfigError("sampler.top_k must be >= 1");
      auto idx = ranked(logits);
      idx.resize(std::min<std::size_t>(idx.size(), config.top_k));
      if (idx.size() == 1) return idx[0];
      return categorical(logits, idx, config.temperature, rng);
    }
    case SamplerKind::Nucleus: {
      if (!(config.top_p > 0.0 && config.top_p <= 1.0)) throw ConfigError("sampler.top_p must be in (0, 1]");
      auto idx = ranked(logits);
      if (config.top_p >= 1.0) return categorical(logits, idx, config.temperature, rng);
      const double mx = logits[idx[0]] / config.temperature;
      std::vector<double> p(idx.size());
      double z = 0.0;
      for (std::size_t i = 0; i < idx.size(); ++i) z += p[i] = std::exp(logits[idx[i]] / config.temperature - mx);
      double cum = 0.0;
      std::size_t keep = 0;
      while (keep < idx.size()) {
        cum += p[keep++] / z;
        if (cum >= config.top_p) break;
      }
      idx.resize(keep);
      return categorical(logits, idx, config.temperature, rng);
    }
  }
  return argmax(logits);
}

DecodeSession::DecodeSession(const Model& model, DecodeOptions options, int sample_id)
    : model_(&model),
      options_(options),
      sample_id_(sample_id),
      bank_(model.make_cache(options.kv_mode)) {
  const int nr = model.spec().n_recursions;
  if (options_.run_cap < 1) throw ConfigError("decode.run_cap must be >= 1");
  if (options_.policy == ExitPolicy::Static && (options_.static_depth < 1 || options_.static_depth > nr))
    throw ConfigError("decode.static_depth must be in [1, " + std::to_string(nr) + "]");
  if (options_.policy == ExitPolicy::Router && !options_.router)
    throw ConfigError("decode: router policy needs a router");
  if (options_.policy != ExitPolicy::Router && options_.router)
    throw ConfigError("decode: a router is only used by the router policy");
  if (options_.policy == ExitPolicy::Oracle) {
    DecodeOptions ref;
    ref.kv_mode = options_.kv_mode;
    shadow_ = std::make_unique<DecodeSession>(model, ref, sample_id);
  }
}

DecodeSession::~DecodeSession() = default;
DecodeSession::DecodeSession(DecodeSession&&) noexcept = default;

void DecodeSession::check_pending(int position) const {
  for (std::size_t i = 0; i < pending_.size(); ++i) {
    const int expect = position - static_cast<int>(pending_.size() - i);
    if (pending_[i].position != expect)
      throw ConsistencyError("pending stack is not a consecutive run ending before position " +
                             std::to_string(position));
    if (i > 0 && pending_[i].depth > pending_[i - 1].depth)
      throw ConsistencyError("pending stack depths must be non-increasing");
  }
}

Tensor DecodeSession::run_stage_with_pending(int depth, const Tensor& current, int position) {
  std::vector<std::size_t> lag;
  if (options_.fill == FillMode::Parallel)
    for (std::size_t i = 0; i < pending_.size(); ++i)
      if (pending_[i].depth < depth) lag.push_back(i);
  if (lag.empty()) {
    const int pos[1] = {position};
    return model_->run_stage(depth, current, pos, bank_, 0);
  }
  check_pending(position);
  std::vector<Tensor> rows;
  std::vector<int> positions;
  for (std::size_t i : lag) {
    if (pending_[i].depth != depth - 1)
      throw ConsistencyError("pending token at position " + std::to_string(pending_[i].position) +
                             " skipped a stage");
    rows.push_back(pending_[i].hidden);
    positions.push_back(pending_[i].position);
  }
  rows.push_back(current);
  positions.push_back(position);
  const Tensor out = model_->run_stage(depth, concat_rows(rows), positions, bank_, 0);
  for (std::size_t j = 0; j < lag.size(); ++j) {
    pending_[lag[j]].hidden = single_row(out, j);
    pending_[lag[j]].depth = depth;
  }
  ++stats_.deep_forwards;
  stats_.last_width = rows.size();
  stats_.max_width = std::max(stats_.max_width, rows.size());
  return single_row(out, lag.size());
}

void DecodeSession::flush() {
  NoGradGuard guard;
  const int nr = model_->spec().n_recursions;
  if (pending_.empty()) return;
  check_pending(next_position_);
  int lowest = nr;
  for (const auto& p : pending_) lowest = std::min(lowest, p.depth);
  for (int r = lowest + 1; r <= nr; ++r) {
    std::vector<std::size_t> lag;
    for (std::size_t i = 0; i < pending_.size(); ++i)
      if (pending_[i].depth < r) lag.push_back(i);
    std::vector<Tensor> rows;
    std::vector<int> positions;
    for (std::size_t i : lag) {
      rows.push_back(pending_[i].hidden);
      positions.push_back(pending_[i].position);
    }
    const Tensor out = model_->run_stage(r, concat_rows(rows), positions, bank_, 0);
    for (std::size_t j = 0; j < lag.size(); ++j) {
      pending_[lag[j]].hidden = single_row(out, j);
      pending_[lag[j]].depth = r;
    }
    ++stats_.deep_forwards;
    stats_.last_width = rows.size();
    stats_.max_width = std::max(stats_.max_width, rows.size());
  }
  pending_.clear();
}

void DecodeSession::copy_state(const Tensor& hidden, int position, int exit_depth) {
  const int pos[1] = {position};
  for (int r = exit_depth + 1; r <= model_->spec().n_recursions; ++r)
    for (int ell : stage_layers(model_->spec(), r)) {
      const LayerSlot ls = layer_slot(model_->spec(), ell);
      if (bank_.storage_depth(ls.depth) != ls.depth) continue;
      auto [k, v] = model_->layer_kv(ell, hidden, pos);
      bank_.append_rows(ls.depth, ls.sublayer, 0, pos, k, v);
    }
}

Tensor DecodeSession::prefill(std::span<const int> tokens) {
  NoGradGuard guard;
  if (tokens.empty()) throw DimensionError("prefill: no tokens");
  flush();
  const int start = next_position_;
  if (static_cast<std::size_t>(start) + tokens.size() > model_->spec().context_len)
    throw LengthError("prefill: positions exceed context length " +
                      std::to_string(model_->spec().context_len));
  if (shadow_) shadow_->prefill(tokens);
  Tensor logits;
  if (options_.policy == ExitPolicy::Router) {
    ForwardOptions fo;
    fo.router = options_.router;
    fo.route_mode = RouteMode::Infer;
    fo.cache = &bank_;
    fo.position_offset = start;
    fo.sample_id = sample_id_;
    logits = model_->forward(tokens, fo).logits;
  } else {
    std::vector<int> positions(tokens.size());
    std::iota(positions.begin(), positions.end(), start);
    Tensor h = model_->embed(tokens);
    for (int r = 1; r <= model_->spec().n_recursions; ++r) h = model_->run_stage(r, h, positions, bank_, 0);
    logits = model_->head_logits(h);
  }
  next_position_ += static_cast<int>(tokens.size());
  return single_row(logits, tokens.size() - 1);
}

Tensor DecodeSession::step_routed(int token) {
  const int p = next_position_;
  ForwardOptions fo;
  fo.router = options_.router;
  fo.route_mode = RouteMode::Infer;
  fo.cache = &bank_;
  fo.position_offset = p;
  fo.sample_id = sample_id_;
  const int ids[1] = {token};
  auto res = model_->forward(ids, fo);
  const auto depth = res.trace.token_depths();
  trace_.push_back({sample_id_, p, std::max(1, depth[0]), confidence(res.logits.data())});
  ++next_position_;
  return res.logits;
}

Tensor DecodeSession::step(int token) {
  NoGradGuard guard;
  const int p = next_position_;
  if (static_cast<std::size_t>(p) >= model_->spec().context_len)
    throw LengthError("decode: position " + std::to_string(p) + " exceeds context length " +
                      std::to_string(model_->spec().context_len));
  if (token < 0 || static_cast<std::size_t>(token) >= model_->spec().vocab)
    throw IndexError("decode: token id " + std::to_string(token) + " outside vocabulary");
  if (options_.policy == ExitPolicy::Router) return step_routed(token);

  const int nr = model_->spec().n_recursions;
  int oracle_depth = nr;
  if (shadow_) {
    shadow_->step(token);
    oracle_depth = oracle_exit_depth(shadow_->last_depth_logits());
  }
  const bool record = options_.policy == ExitPolicy::None || options_.calibrate;
  depth_logits_.clear();

  const int ids[1] = {token};
  Tensor h = model_->embed(ids);
  int exit_depth = nr;
  Tensor logits;
  for (int r = 1; r <= nr; ++r) {
    h = run_stage_with_pending(r, h, p);
    if (r == nr) break;
    const bool need_logits = record || options_.policy == ExitPolicy::Confidence;
    if (need_logits) {
      logits = model_->head_logits(h);
      if (record) depth_logits_.push_back(row_of(logits, 0));
    }
    if (options_.calibrate) continue;
    bool exit = false;
    switch (options_.policy) {
      case ExitPolicy::None:
      case ExitPolicy::Router:
        break;
      case ExitPolicy::Confidence:
        exit = confidence(logits.data()) > options_.threshold;
        break;
      case ExitPolicy::Oracle:
        exit = r >= oracle_depth;
        break;
      case ExitPolicy::Static:
        exit = r >= options_.static_depth;
        break;
    }
    if (exit) {
      exit_depth = r;
      break;
    }
  }
  if (exit_depth == nr) {
    logits = model_->head_logits(h);
    if (record) depth_logits_.push_back(row_of(logits, 0));
  } else if (!logits.defined()) {
    logits = model_->head_logits(h);
  }
  if (options_.calibrate && nr >= 2) {
    const auto& shallow = depth_logits_.front();
    calibration_.push_back({confidence(shallow), argmax(shallow) == argmax(depth_logits_.back())});
  }
  trace_.push_back({sample_id_, p, exit_depth, confidence(logits.data())});

  // Rows that reached the last stage are complete; depths are non-increasing.
  pending_.erase(std::remove_if(pending_.begin(), pending_.end(),
                                [&](const PendingToken& t) { return t.depth >= nr; }),
                 pending_.end());
  if (exit_depth < nr) {
    switch (options_.fill) {
      case FillMode::Parallel:
        pending_.push_back({p, exit_depth, h});
        break;
      case FillMode::StateCopy:
        copy_state(h, p, exit_depth);
        break;
      case FillMode::Skip:
        break;
    }
  }
  ++next_position_;
  stats_.max_pending = std::max(stats_.max_pending, pending_.size());
  if (pending_.size() >= static_cast<std::size_t>(options_.run_cap)) {
    ++stats_.forced_flushes;
    flush();
  }
  return logits;
}

DecodeOutput decode(const Model& model, const DecodeOptions& options, std::span<const int> prompt,
                    int max_tokens, const SamplerConfig& sampler, Rng& rng, int sample_id) {
  if (prompt.empty()) throw DimensionError("decode: empty prompt");
  if (max_tokens < 0) throw ConfigError("decode: max_tokens must be non-negative");
  const std::size_t needed = prompt.size() + static_cast<std::size_t>(std::max(0, max_tokens - 1));
  if (needed > model.spec().context_len)
    throw LengthError("decode: prompt of " + std::to_string(prompt.size()) + " plus " +
                      std::to_string(max_tokens) + " new tokens exceeds context length " +
                      std::to_string(model.spec().context_len));
  DecodeSession session(model, options, sample_id);
  DecodeOutput out;
  Tensor logits = session.prefill(prompt);
  for (int i = 0; i < max_tokens; ++i) {
    const int tok = sample_token(logits.data(), sampler, rng);
    out.tokens.push_back(tok);
    if (i + 1 < max_tokens) logits = session.step(tok);
  }
  session.flush();
  out.trace = session.trace();
  out.stats = session.stats();
  return out;
}

ScoreOutput score_sequence(const Model& model, const DecodeOptions& options,
                           std::span<const int> ids, int sample_id) {
  if (ids.size() < 2) throw DimensionError("score_sequence: need at least two tokens");
  if (ids.size() > model.spec().context_len) throw LengthError("score_sequence: sequence exceeds context");
  DecodeSession session(model, options, sample_id);
  ScoreOutput out;
  Tensor logits = session.prefill(ids.first(1));
  double total = 0.0;
  for (std::size_t t = 1; t < ids.size(); ++t) {
    auto row = logits.data();
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double l : row) z += std::exp(l - mx);
    total += -(row[ids[t]] - mx - std::log(z));
    if (t + 1 < ids.size()) logits = session.step(ids[t]);
  }
  session.flush();
  out.nll = total / static_cast<double>(ids.size() - 1);
  out.trace = session.trace();
  return out;
}

AdaptiveDecodeOutput decode_adaptive(const Model& model, DecodeOptions options,
                                     const std::vector<std::vector<int>>& prompts, int max_tokens,
                                     const SamplerConfig& sampler, Rng& rng,
                                     AdaptiveThreshold& threshold) {
  options.policy = ExitPolicy::Confidence;
  AdaptiveDecodeOutput out;
  const std::size_t calib = threshold.calibration_sequences(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    DecodeOptions o = options;
    o.calibrate = i < calib;
    o.threshold = threshold.lambda();
    DecodeSession session(model, o, static_cast<int>(i));
    DecodeOutput d;
    Tensor logits = session.prefill(prompts[i]);
    for (int k = 0; k < max_tokens; ++k) {
      const int tok = sample_token(logits.data(), sampler, rng);
      d.tokens.push_back(tok);
      if (k + 1 < max_tokens) logits = session.step(tok);
    }
    session.flush();
    d.trace = session.trace();
    d.stats = session.stats();
    out.threshold_history.push_back(o.threshold);
    if (o.calibrate) {
      for (const auto& s : session.calibration()) threshold.add(s.confidence, s.agree);
      threshold.refit();
    }
    out.outputs.push_back(std::move(d));
  }
  out.warned = threshold.warned();
  return out;
}

}  // namespace recursor
