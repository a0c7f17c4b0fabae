#pragma once

#include <map>
#include <string>
#include <vector>

#include "recursor/model.hpp"
#include "recursor/rng.hpp"
#include "recursor/tensor.hpp"

namespace recursor {

enum class InitMethod { Stepwise, Average, Lower, Random };
enum class NormVariant { NormAvg, NormChoice, NormZero };

std::string to_string(InitMethod m);
std::string to_string(NormVariant v);
InitMethod init_method_from_string(const std::string& s);
NormVariant norm_variant_from_string(const std::string& s);

// Source layers picked for K unique blocks out of L: round(j (L-1) / (K-1)),
// first and last always included.
std::vector<int> stepwise_indices(int n_layers, int n_blocks);

// Builds shared weights for `spec` from an untied source with spec.n_layers
// blocks. Embedding, final norm and head are copied from the source.
ModelWeights init_looped(const ModelWeights& source, const ModelSpec& spec, InitMethod method,
                         NormVariant norms, Rng& rng, double init_std = 0.02);

// Rank-r delta approximating source - tied. When the two matrices are equal
// the delta starts as (Gaussian down, zero up).
LoraPair init_lora_svd(const Tensor& source, const Tensor& tied, std::size_t rank, Rng& rng,
                       double init_std = 0.02);

// x . base + (x . down) . up
Tensor lora_forward(const Tensor& base, const LoraPair& delta, const Tensor& x);

struct RelaxOptions {
  std::size_t rank = 0;
  // Per-linear overrides of `rank`, keyed by kLinearNames entries.
  std::map<std::string, std::size_t> ranks;
  std::vector<std::string> linears{std::begin(kLinearNames), std::end(kLinearNames)};
};

// Attaches one delta per unrolled layer and adapted linear to `looped`.
ModelWeights relax(const ModelWeights& source, const ModelWeights& looped, const ModelSpec& spec,
                   const RelaxOptions& options, Rng& rng);

// Frobenius norm of (source - (tied + down . up)).
double reconstruction_error(const Tensor& source, const Tensor& tied, const LoraPair& delta);

}  // namespace recursor
