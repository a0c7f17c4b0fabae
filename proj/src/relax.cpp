#include "recursor/relax.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>

#include "recursor/errors.hpp"
#include "recursor/ops.hpp"

namespace recursor {

std::string to_string(InitMethod m) {
  switch (m) {
    case InitMethod::Stepwise:
      return "stepwise";
    case InitMethod::Average:
      return "average";
    case InitMethod::Lower:
      return "lower";
    case InitMethod::Random:
      return "random";
  }
  return "?";
}

std::string to_string(NormVariant v) {
  switch (v) {
    case NormVariant::NormAvg:
      return "norm_avg";
    case NormVariant::NormChoice:
      return "norm_choice";
    case NormVariant::NormZero:
      return "norm_zero";
  }
  return "?";
}

InitMethod init_method_from_string(const std::string& s) {
  if (s == "stepwise") return InitMethod::Stepwise;
  if (s == "average") return InitMethod::Average;
  if (s == "lower") return InitMethod::Lower;
  if (s == "random") return InitMethod::Random;
  throw ConfigError("unknown init method '" + s + "'");
}

NormVariant norm_variant_from_string(const std::string& s) {
  if (s == "norm_avg") return NormVariant::NormAvg;
  if (s == "norm_choice") return NormVariant::NormChoice;
  if (s == "norm_zero") return NormVariant::NormZero;
  throw ConfigError("unknown norm variant '" + s + "'");
}

std::vector<int> stepwise_indices(int n_layers, int n_blocks) {
  if (n_blocks < 1 || n_blocks > n_layers) throw InitError("stepwise: need 1 <= K <= L");
  if (n_blocks == 1) return {0};
  std::vector<int> out(n_blocks);
  for (int j = 0; j < n_blocks; ++j)
    out[j] = static_cast<int>(std::lround(static_cast<double>(j) * (n_layers - 1) / (n_blocks - 1)));
  return out;
}

namespace {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Tensor copy_param(const Tensor& t) { return t.detach().set_requires_grad(); }

Tensor average(const std::vector<const Tensor*>& parts) {
  std::vector<double> acc(parts[0]->numel(), 0.0);
  for (const Tensor* p : parts) {
    auto d = p->data();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += d[i];
  }
  for (auto& v : acc) v /= static_cast<double>(parts.size());
  return Tensor::from(parts[0]->shape(), std::move(acc)).set_requires_grad();
}

bool is_norm(const std::string& name) { return name == "attn_norm" || name == "ffn_norm"; }

}  // namespace

ModelWeights init_looped(const ModelWeights& source, const ModelSpec& spec, InitMethod method,
                         NormVariant norms, Rng& rng, double init_std) {
  spec.validate();
  const int L = spec.n_layers;
  const int K = spec.unique_blocks();
  if (source.blocks.size() != static_cast<std::size_t>(L))
    throw InitError("init_looped: source has " + std::to_string(source.blocks.size()) +
                    " layers, spec needs " + std::to_string(L));
  ModelWeights fresh = init_weights(spec, rng, init_std);
  {
    const auto& b0 = fresh.blocks[0];
    for (int ell = 0; ell < L; ++ell) {
      auto src = source.blocks[ell].named();
      auto ref = b0.named();
      for (std::size_t i = 0; i < src.size(); ++i)
        if (!src[i].second->defined() || src[i].second->shape() != ref[i].second->shape())
          throw InitError("init_looped: source layer " + std::to_string(ell) + " tensor " +
                          src[i].first + " has shape " +
                          (src[i].second->defined() ? shape_str(src[i].second->shape()) : "[]") +
                          ", spec expects " + shape_str(ref[i].second->shape()));
    }
    if (source.embedding.shape() != fresh.embedding.shape())
      throw InitError("init_looped: embedding shape mismatch");
  }
  if (method == InitMethod::Random) return fresh;

  ModelWeights out;
  out.embedding = copy_param(source.embedding);
  out.final_norm = copy_param(source.final_norm);
  if (source.head.defined()) out.head = copy_param(source.head);
  if (!spec.tie_embeddings && !out.head.defined()) out.head = fresh.head;

  std::vector<std::vector<int>> groups(K);
  for (int ell = 0; ell < L; ++ell) groups[layer_index_map(spec, ell)].push_back(ell);
  const auto steps = stepwise_indices(L, K);

  for (int b = 0; b < K; ++b) {
    BlockWeights blk;
    auto dst = blk.named();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      const std::string& name = dst[i].first;
      auto tensor_of = [&](int ell) -> const Tensor* { return source.blocks[ell].named()[i].second; };
      Tensor value;
      switch (method) {
        case InitMethod::Stepwise:
          value = copy_param(*tensor_of(steps[b]));
          break;
        case InitMethod::Lower:
          value = copy_param(*tensor_of(b));
          break;
        case InitMethod::Average: {
          if (is_norm(name) && norms == NormVariant::NormChoice) {
            value = copy_param(*tensor_of(groups[b].front()));
          } else {
            std::vector<const Tensor*> parts;
            for (int ell : groups[b]) parts.push_back(tensor_of(ell));
            value = average(parts);
          }
          break;
        }
        case InitMethod::Random:
          break;
      }
      if (is_norm(name) && norms == NormVariant::NormZero)
        value = Tensor::zeros(value.shape()).set_requires_grad();
      *dst[i].second = value;
    }
    out.blocks.push_back(std::move(blk));
  }
  return out;
}

LoraPair init_lora_svd(const Tensor& source, const Tensor& tied, std::size_t rank, Rng& rng,
                       double init_std) {
  if (source.rank() != 2 || source.shape() != tied.shape())
    throw DimensionError("init_lora_svd: source " + shape_str(source.shape()) + " vs tied " +
                         shape_str(tied.shape()));
  const std::size_t in = source.dim(0), out_dim = source.dim(1);
  if (rank > std::min(in, out_dim))
    throw DomainError("init_lora_svd: rank " + std::to_string(rank) + " exceeds min(" +
                      std::to_string(in) + "," + std::to_string(out_dim) + ")");
  if (rank == 0) return {};
  const auto s = source.data(), t = tied.data();
  Matrix residual(in, out_dim);
  bool equal = true;
  for (std::size_t i = 0; i < in; ++i)
    for (std::size_t j = 0; j < out_dim; ++j) {
      residual(i, j) = s[i * out_dim + j] - t[i * out_dim + j];
      equal = equal && residual(i, j) == 0.0;
    }
  std::vector<double> down(in * rank), up(rank * out_dim, 0.0);
  if (equal) {
    for (auto& v : down) v = rng.normal(0.0, init_std);
  } else {
    Eigen::JacobiSVD<Matrix> svd(residual, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& U = svd.matrixU();
    const auto& V = svd.matrixV();
    const auto& sigma = svd.singularValues();
    for (std::size_t i = 0; i < in; ++i)
      for (std::size_t r = 0; r < rank; ++r) down[i * rank + r] = U(i, r);
    for (std::size_t r = 0; r < rank; ++r)
      for (std::size_t j = 0; j < out_dim; ++j) up[r * out_dim + j] = sigma(r) * V(j, r);
  }
  LoraPair pair;
  pair.down = Tensor::from({in, rank}, std::move(down)).set_requires_grad();
  pair.up = Tensor::from({rank, out_dim}, std::move(up)).set_requires_grad();
  return pair;
}

Tensor lora_forward(const Tensor& base, const LoraPair& delta, const Tensor& x) {
  Tensor out = matmul(x, base);
  if (delta.rank() == 0) return out;
  if (delta.down.dim(0) != base.dim(0) || delta.up.dim(1) != base.dim(1))
    throw DimensionError("lora_forward: delta shape does not match base");
  return add(out, matmul(matmul(x, delta.down), delta.up));
}

ModelWeights relax(const ModelWeights& source, const ModelWeights& looped, const ModelSpec& spec,
                   const RelaxOptions& options, Rng& rng) {
  spec.validate();
  if (source.blocks.size() != static_cast<std::size_t>(spec.n_layers))
    throw InitError("relax: source must hold one block per unrolled layer");
  ModelWeights out = looped.clone();
  out.lora.clear();
  out.lora_scale = 1.0;
  for (int ell = 0; ell < spec.n_layers; ++ell) {
    const BlockWeights& tied = looped.blocks[layer_index_map(spec, ell)];
    for (const auto& name : options.linears) {
      auto it = options.ranks.find(name);
      const std::size_t r = it == options.ranks.end() ? options.rank : it->second;
      if (r == 0) continue;
      out.lora[{ell, name}] = init_lora_svd(source.blocks[ell].linear(name), tied.linear(name), r, rng);
    }
  }
  return out;
}

double reconstruction_error(const Tensor& source, const Tensor& tied, const LoraPair& delta) {
  NoGradGuard guard;
  Tensor approx = tied;
  if (delta.rank() > 0) approx = add(tied, matmul(delta.down, delta.up));
  double acc = 0.0;
  auto s = source.data(), a = approx.data();
  for (std::size_t i = 0; i < s.size(); ++i) acc += (s[i] - a[i]) * (s[i] - a[i]);
  return std::sqrt(acc);
}

}  // namespace recursor
