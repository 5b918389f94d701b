#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "corelab/autograd.hpp"
#include "corelab/vocab.hpp"

namespace corelab::core {

enum class Composition { replace, residual_add };
enum class BridgeMode { own_plus_anchor, all_languages };
// knn: pools are the nearest tokens (cosine) to the position's own
// embedding. aligned_query: the query for language r is the embedding of
// the position token's parallel token in r, when one exists.
// aligned_class: the pool is the parallel token itself (the token's
// equivalence class), falling back to knn when r has no counterpart.
enum class PoolMode { knn, aligned_query, aligned_class };

struct CoReConfig {
  std::size_t n = 10;
  std::vector<LanguageId> languages;
  LanguageId anchor;
  // Per-language candidate count; 0 uses the whole language.
  std::size_t pool_size = 0;
  Composition composition = Composition::replace;
  BridgeMode bridge_mode = BridgeMode::own_plus_anchor;
  PoolMode pool_mode = PoolMode::knn;
  // Literal reading of the mask condition: kept only if selected in every
  // chosen language.
  bool eq1_strict_intersection = false;
  // Stop gradient into the vocabulary bank through the CoRe branch.
  bool freeze_bank = false;
  // 0 recomputes pools on every forward pass.
  std::size_t pool_refresh_every = 0;

  // Throws ConfigError on n == 0, anchor not in languages, or
  // 0 < pool_size < n.
  void validate() const;
};

nlohmann::json to_json(const CoReConfig& c);
CoReConfig core_config_from_json(const nlohmann::json& j);

// Square projections, identity-initialized.
struct CoReParams {
  Parameter w_q;
  Parameter w_k;
  Parameter w_v;

  static CoReParams identity(std::size_t d);
};

struct Projection {
  Tensor q;
  Tensor k;
  Tensor v;
};

// Q = Z W_Q, K = B W_K, V = B W_V. Throws ConfigError unless every
// projection is [d_o, d_o].
Projection project(const Tensor& z, const Tensor& bank, const CoReParams& params);

// C = Q K^T / sqrt(d_k).
Tensor compatibility(const Tensor& q, const Tensor& k, std::size_t d_k);

// Exact cosine K-NN over each language's tokens, most similar first, ties
// by ascending id. pool_size 0 returns U^r verbatim (ascending). A zero
// vector has similarity 0 to everything.
std::vector<TokenId> candidate_pool(const Tensor& bank, const LanguageTokenMap& langmap, const LanguageId& lang,
                                    std::size_t pool_size, std::span<const double> query_embedding);

// Candidate pools for one input position, keyed by language. Tokens that
// belong to no language in R (reserved/control tokens) get a single
// pseudo-language "" whose pool is the token itself.
using PositionPools = std::vector<std::pair<LanguageId, std::vector<TokenId>>>;

// Languages consulted for a token under the configured bridge mode.
std::vector<LanguageId> bridge_languages(TokenId token, const VocabularyAsset& asset, const CoReConfig& config);

PositionPools position_pools(TokenId token, std::span<const double> query_embedding, const Tensor& bank,
                             const VocabularyAsset& asset, const CoReConfig& config);

struct ProximalSelection {
  // selected[i] lists (language, ascending token ids) for position i.
  std::vector<PositionPools> selected;

  std::size_t positions() const { return selected.size(); }
};

// Top-n of C[i, .] over each pool, ties by ascending id. Throws
// ConfigError on an empty pool.
ProximalSelection select_proximal(const Tensor& c, const std::vector<PositionPools>& pools, std::size_t n);

AdditiveMask build_mask(const ProximalSelection& selection, std::size_t vocab_size, bool strict_intersection = false);

// Z' = masked_softmax(C + f(C)) V.
Tensor compose(const Tensor& c, const AdditiveMask& mask, const Tensor& v);

// Full tensor-level pipeline for a token sequence whose embeddings are z.
struct ApplyResult {
  Tensor z_out;
  Tensor c;
  ProximalSelection selection;
  AdditiveMask mask;
};

ApplyResult apply(const Tensor& z, std::span<const TokenId> tokens, const Tensor& bank, const CoReParams& params,
                  const VocabularyAsset& asset, const CoReConfig& config);

// Differentiable variants.

// Literal graph: Q, K, V over the whole bank, full C.
struct FullGraph {
  Var c;
  Var z_prime;
};
FullGraph compose_full(const Var& z, const Var& bank, const Var& w_q, const Var& w_k, const Var& w_v,
                       const AdditiveMask& mask);

// Graph over only the union of selected tokens (ascending ids), computing
// C = (Z W_Q W_K^T / sqrt(d)) B_sel^T and Z' = (P B_sel) W_V. Dropped
// vocabulary columns contribute exactly zero either way.
struct GatheredGraph {
  Var c;  // [N, |columns|]
  Var z_prime;
  std::vector<TokenId> columns;
  AdditiveMask mask;  // over columns
};
GatheredGraph compose_gathered(const Var& z, const Var& bank, const Var& w_q, const Var& w_k, const Var& w_v,
                               const ProximalSelection& selection, bool strict_intersection = false);

// Compatibility of each position against the listed columns, computed the
// same way compose_gathered does; used to pick the selection.
Tensor gathered_compatibility(const Tensor& z, const Tensor& bank, const Tensor& w_q, const Tensor& w_k,
                              std::span<const TokenId> columns);

nlohmann::json selection_dump(const ProximalSelection& selection);

}  // namespace corelab::core
