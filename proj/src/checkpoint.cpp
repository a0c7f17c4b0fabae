#include "recursor/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include "json.hpp"
#include "recursor/errors.hpp"

namespace recursor {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "weights.bin is written in host order");

std::vector<std::pair<std::string, Tensor>> all_tensors(const Model& model, const Router* router) {
  auto out = model.weights().named_parameters();
  if (router)
    for (auto& p : router->named_parameters()) out.push_back(p);
  return out;
}

// "lora.<linear>.<down|up>.depth<layer>"
bool parse_lora_name(const std::string& name, int& layer, std::string& linear, bool& down) {
  if (name.rfind("lora.", 0) != 0) return false;
  const auto depth = name.rfind(".depth");
  const auto dir = name.rfind('.', depth - 1);
  if (depth == std::string::npos || dir == std::string::npos || dir <= 5) return false;
  linear = name.substr(5, dir - 5);
  const std::string which = name.substr(dir + 1, depth - dir - 1);
  if (which != "down" && which != "up") return false;
  down = which == "down";
  try {
    layer = std::stoi(name.substr(depth + 6));
  } catch (const std::exception&) {
    return false;
  }
  return true;
}

}  // namespace

void save_checkpoint(const std::string& dir, const RunConfig& config, const Model& model, const Router* router,
                     std::size_t step) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("checkpoint: cannot create '" + dir + "': " + ec.message());
  json table = json::array();
  std::size_t offset = 0;
  const auto tensors = all_tensors(model, router);
  for (const auto& [name, t] : tensors) {
    table.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.numel();
  }
  json manifest{{"format", "recursor-checkpoint"},
                {"version", 1},
                {"config", to_json(config)},
                {"config_hash", config_hash(config)},
                {"seed", config.seed},
                {"step", step},
                {"lora_scale", model.weights().lora_scale},
                {"tensors", table},
                {"total_values", offset}};
  if (router) {
    manifest["router_biases"] = router->biases();
    manifest["router_load_counts"] = router->load_counts();
  }
  const fs::path root(dir);
  {
    std::ofstream w(root / "weights.bin", std::ios::binary | std::ios::trunc);
    if (!w) throw IoError("checkpoint: cannot write '" + (root / "weights.bin").string() + "'");
    for (const auto& [name, t] : tensors) {
      const auto d = t.data();
      w.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size() * sizeof(double)));
    }
    if (!w) throw IoError("checkpoint: short write to weights.bin");
  }
  std::ofstream m(root / "manifest", std::ios::trunc);
  if (!m) throw IoError("checkpoint: cannot write '" + (root / "manifest").string() + "'");
  m << manifest.dump(2) << '\n';
  if (!m) throw IoError("checkpoint: short write to manifest");
}

Checkpoint load_checkpoint(const std::string& dir) {
  const fs::path root(dir);
  std::ifstream m(root / "manifest");
  if (!m) throw IoError("checkpoint: missing manifest in '" + dir + "'");
  json manifest;
  try {
    manifest = json::parse(m);
  } catch (const json::parse_error& e) {
    throw IoError(std::string("checkpoint: unreadable manifest (") + e.what() + ")");
  }
  if (manifest.value("format", "") != "recursor-checkpoint")
    throw IoError("checkpoint: '" + dir + "' is not a checkpoint manifest");

  Checkpoint ck;
  ck.config = run_config_from_json(manifest.at("config"));
  ck.step = manifest.value("step", std::size_t{0});
  ck.config_hash = manifest.value("config_hash", std::string());
  if (ck.config_hash != config_hash(ck.config))
    throw ConsistencyError("checkpoint: config hash does not match the stored config");

  std::ifstream w(root / "weights.bin", std::ios::binary);
  if (!w) throw IoError("checkpoint: missing weights.bin in '" + dir + "'");
  const auto total = manifest.at("total_values").get<std::size_t>();
  std::vector<double> values(total);
  w.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(total * sizeof(double)));
  if (static_cast<std::size_t>(w.gcount()) != total * sizeof(double))
    throw IoError("checkpoint: weights.bin is truncated");
  if (w.peek() != std::char_traits<char>::eof()) throw IoError("checkpoint: weights.bin has trailing bytes");

  std::map<std::string, Tensor> stored;
  for (const auto& e : manifest.at("tensors")) {
    const auto name = e.at("name").get<std::string>();
    const auto shape = e.at("shape").get<Shape>();
    const auto off = e.at("offset").get<std::size_t>();
    const auto n = shape_numel(shape);
    if (off + n > total) throw ConsistencyError("checkpoint: tensor '" + name + "' runs past weights.bin");
    stored[name] = Tensor::from(shape, std::vector<double>(values.begin() + static_cast<std::ptrdiff_t>(off),
                                                           values.begin() + static_cast<std::ptrdiff_t>(off + n)));
  }

  // Build the architecture, then fill every tensor by name.
  Rng rng(0);
  ModelWeights weights = init_weights(ck.config.model, rng, ck.config.init_std);
  weights.lora_scale = manifest.value("lora_scale", 1.0);
  for (const auto& [name, t] : stored) {
    int layer = 0;
    std::string linear;
    bool down = false;
    if (!parse_lora_name(name, layer, linear, down)) continue;
    auto& pair = weights.lora[{layer, linear}];
    (down ? pair.down : pair.up) = t.detach().set_requires_grad();
  }
  std::optional<Router> router;
  if (ck.config.router) {
    router = Router::create(*ck.config.router, ck.config.model.n_recursions, ck.config.model.d_model, rng);
    router->biases() = manifest.at("router_biases").get<std::vector<double>>();
    router->load_counts() = manifest.at("router_load_counts").get<std::vector<std::int64_t>>();
    if (router->biases().size() != static_cast<std::size_t>(ck.config.model.n_recursions))
      throw ConsistencyError("checkpoint: router bias count differs from n_recursions");
  }
  Model model(ck.config.model, std::move(weights));
  std::size_t matched = 0;
  for (auto& [name, t] : all_tensors(model, router ? &*router : nullptr)) {
    auto it = stored.find(name);
    if (it == stored.end()) throw ConsistencyError("checkpoint: tensor '" + name + "' missing from manifest");
    if (it->second.shape() != t.shape())
      throw ConsistencyError("checkpoint: tensor '" + name + "' has shape " + shape_str(it->second.shape()) +
                             ", expected " + shape_str(t.shape()));
    auto dst = t.mutable_data();
    const auto src = it->second.data();
    std::copy(src.begin(), src.end(), dst.begin());
    ++matched;
  }
  if (matched != stored.size()) throw ConsistencyError("checkpoint: manifest lists tensors the model does not use");
  ck.model = std::move(model);
  ck.router = std::move(router);
  return ck;
}

}  // namespace recursor
