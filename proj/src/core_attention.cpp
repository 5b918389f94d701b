#include "corelab/core_attention.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "corelab/errors.hpp"

namespace corelab::core {

namespace {

const char* to_string(Composition c) { return c == Composition::replace ? "replace" : "residual_add"; }
const char* to_string(BridgeMode b) { return b == BridgeMode::own_plus_anchor ? "own_plus_anchor" : "all_languages"; }
const char* to_string(PoolMode p) {
  switch (p) {
    case PoolMode::knn: return "knn";
    case PoolMode::aligned_query: return "aligned_query";
    case PoolMode::aligned_class: return "aligned_class";
  }
  return "knn";
}

void require_square(const Parameter& p, std::size_t d, const char* what) {
  if (p.value.rank() != 2 || p.value.rows() != d || p.value.cols() != d) {
    throw ConfigError(std::string(what) + " must be " + std::to_string(d) + "x" + std::to_string(d) + ", got " +
                      shape_string(p.value.shape()));
  }
}

// Cosine with the zero-vector convention used for pools.
double pool_similarity(std::span<const double> a, double na, std::span<const double> b) {
  const double nb = kernels::norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return kernels::dot(a, b) / (na * nb);
}

}  // namespace

void CoReConfig::validate() const {
  if (n == 0) throw ConfigError("CoRe n must be at least 1");
  if (languages.empty()) throw ConfigError("CoRe needs at least one language");
  if (std::find(languages.begin(), languages.end(), anchor) == languages.end()) {
    throw ConfigError("CoRe anchor '" + anchor + "' is not among its languages");
  }
  if (pool_size != 0 && pool_size < n) throw ConfigError("CoRe pool_size must be 0 or at least n");
}

nlohmann::json to_json(const CoReConfig& c) {
  return {{"n", c.n},
          {"languages", c.languages},
          {"anchor", c.anchor},
          {"pool_size", c.pool_size},
          {"composition", to_string(c.composition)},
          {"bridge_mode", to_string(c.bridge_mode)},
          {"pool_mode", to_string(c.pool_mode)},
          {"eq1_strict_intersection", c.eq1_strict_intersection},
          {"freeze_bank", c.freeze_bank},
          {"pool_refresh_every", c.pool_refresh_every}};
}

CoReConfig core_config_from_json(const nlohmann::json& j) {
  CoReConfig c;
  try {
    c.n = j.value("n", c.n);
    c.languages = j.value("languages", c.languages);
    c.anchor = j.value("anchor", c.anchor);
    c.pool_size = j.value("pool_size", c.pool_size);
    const std::string comp = j.value("composition", std::string("replace"));
    if (comp == "replace") c.composition = Composition::replace;
    else if (comp == "residual_add") c.composition = Composition::residual_add;
    else throw ConfigError("unknown composition '" + comp + "'");
    const std::string bridge = j.value("bridge_mode", std::string("own_plus_anchor"));
    if (bridge == "own_plus_anchor") c.bridge_mode = BridgeMode::own_plus_anchor;
    else if (bridge == "all_languages") c.bridge_mode = BridgeMode::all_languages;
    else throw ConfigError("unknown bridge_mode '" + bridge + "'");
    const std::string pool = j.value("pool_mode", std::string("knn"));
    if (pool == "knn") c.pool_mode = PoolMode::knn;
    else if (pool == "aligned_query") c.pool_mode = PoolMode::aligned_query;
    else if (pool == "aligned_class") c.pool_mode = PoolMode::aligned_class;
    else throw ConfigError("unknown pool_mode '" + pool + "'");
    c.eq1_strict_intersection = j.value("eq1_strict_intersection", false);
    c.freeze_bank = j.value("freeze_bank", false);
    c.pool_refresh_every = j.value("pool_refresh_every", std::size_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed CoRe config: ") + e.what());
  }
  return c;
}

CoReParams CoReParams::identity(std::size_t d) {
  return {Parameter("core.w_q", Tensor::identity(d)), Parameter("core.w_k", Tensor::identity(d)),
          Parameter("core.w_v", Tensor::identity(d))};
}

Projection project(const Tensor& z, const Tensor& bank, const CoReParams& params) {
  const std::size_t d = z.cols();
  if (bank.cols() != d) throw ConfigError("CoRe: Z and B widths differ");
  require_square(params.w_q, d, "W_Q");
  require_square(params.w_k, d, "W_K");
  require_square(params.w_v, d, "W_V");
  return {kernels::matmul(z, params.w_q.value), kernels::matmul(bank, params.w_k.value),
          kernels::matmul(bank, params.w_v.value)};
}

Tensor compatibility(const Tensor& q, const Tensor& k, std::size_t d_k) {
  Tensor c = kernels::matmul_nt(q, k);
  const double s = std::sqrt(static_cast<double>(d_k));
  for (double& v : c.data()) v /= s;
  return c;
}

std::vector<TokenId> candidate_pool(const Tensor& bank, const LanguageTokenMap& langmap, const LanguageId& lang,
                                    std::size_t pool_size, std::span<const double> query_embedding) {
  const auto& ids = langmap.tokens_of(lang);
  if (pool_size == 0) return ids;
  const double nq = kernels::norm(query_embedding);
  std::vector<std::pair<double, TokenId>> scored;
  scored.reserve(ids.size());
  for (TokenId id : ids) {
    scored.emplace_back(pool_similarity(query_embedding, nq, bank.row(static_cast<std::size_t>(id))), id);
  }
  const std::size_t k = std::min(pool_size, scored.size());
  auto better = [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); };
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(k), scored.end(), better);
  std::vector<TokenId> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(scored[i].second);
  return out;
}

std::vector<LanguageId> bridge_languages(TokenId token, const VocabularyAsset& asset, const CoReConfig& config) {
  std::vector<LanguageId> out;
  auto in_r = [&](const LanguageId& l) {
    return std::find(config.languages.begin(), config.languages.end(), l) != config.languages.end();
  };
  std::vector<LanguageId> own;
  for (const auto& l : asset.languages.languages_of(token))
    if (in_r(l)) own.push_back(l);
  if (own.empty()) return out;
  if (config.bridge_mode == BridgeMode::all_languages) return config.languages;
  // Own languages, then the anchor; kept in R's declaration order.
  for (const auto& l : config.languages) {
    if (l == config.anchor || std::find(own.begin(), own.end(), l) != own.end()) out.push_back(l);
  }
  return out;
}

PositionPools position_pools(TokenId token, std::span<const double> query_embedding, const Tensor& bank,
                             const VocabularyAsset& asset, const CoReConfig& config) {
  PositionPools pools;
  const auto langs = bridge_languages(token, asset, config);
  if (langs.empty()) {
    pools.emplace_back(LanguageId{}, std::vector<TokenId>{token});
    return pools;
  }
  const auto& own = asset.languages.languages_of(token);
  for (const auto& lang : langs) {
    std::span<const double> query = query_embedding;
    if (config.pool_mode != PoolMode::knn) {
      // Parallel token of `token` in `lang`, looked up from any of its own languages.
      std::optional<TokenId> parallel;
      if (asset.languages.contains(lang, token)) parallel = token;
      for (std::size_t k = 0; !parallel && k < own.size(); ++k) parallel = asset.alignment.lookup(token, own[k], lang);
      if (parallel && config.pool_mode == PoolMode::aligned_class) {
        pools.emplace_back(lang, std::vector<TokenId>{*parallel});
        continue;
      }
      if (parallel && config.pool_size != 0) query = bank.row(static_cast<std::size_t>(*parallel));
    }
    pools.emplace_back(lang, candidate_pool(bank, asset.languages, lang, config.pool_size, query));
  }
  return pools;
}

ProximalSelection select_proximal(const Tensor& c, const std::vector<PositionPools>& pools, std::size_t n) {
  if (pools.size() != c.rows()) throw DimensionError("select_proximal: one pool set per row of C required");
  ProximalSelection sel;
  sel.selected.resize(pools.size());
  std::vector<std::pair<double, TokenId>> scored;
  for (std::size_t i = 0; i < pools.size(); ++i) {
    for (const auto& [lang, pool] : pools[i]) {
      if (pool.empty()) throw ConfigError("select_proximal: empty candidate pool for language '" + lang + "'");
      scored.clear();
      for (TokenId id : pool) scored.emplace_back(c(i, static_cast<std::size_t>(id)), id);
      const std::size_t k = std::min(n, scored.size());
      std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(k), scored.end(),
                        [](const auto& a, const auto& b) {
                          return a.first > b.first || (a.first == b.first && a.second < b.second);
                        });
      std::vector<TokenId> chosen;
      for (std::size_t t = 0; t < k; ++t) chosen.push_back(scored[t].second);
      std::sort(chosen.begin(), chosen.end());
      sel.selected[i].emplace_back(lang, std::move(chosen));
    }
  }
  return sel;
}

AdditiveMask build_mask(const ProximalSelection& selection, std::size_t vocab_size, bool strict_intersection) {
  AdditiveMask mask(selection.positions(), vocab_size, false);
  for (std::size_t i = 0; i < selection.positions(); ++i) {
    const auto& per_lang = selection.selected[i];
    if (!strict_intersection) {
      for (const auto& [lang, ids] : per_lang)
        for (TokenId id : ids) mask.set_kept(i, static_cast<std::size_t>(id), true);
      continue;
    }
    if (per_lang.empty()) continue;
    std::vector<TokenId> common = per_lang.front().second;
    for (std::size_t r = 1; r < per_lang.size(); ++r) {
      std::vector<TokenId> next;
      std::set_intersection(common.begin(), common.end(), per_lang[r].second.begin(), per_lang[r].second.end(),
                            std::back_inserter(next));
      common = std::move(next);
    }
    for (TokenId id : common) mask.set_kept(i, static_cast<std::size_t>(id), true);
  }
  return mask;
}

Tensor compose(const Tensor& c, const AdditiveMask& mask, const Tensor& v) {
  return kernels::matmul(kernels::masked_softmax(c, mask), v);
}

ApplyResult apply(const Tensor& z, std::span<const TokenId> tokens, const Tensor& bank, const CoReParams& params,
                  const VocabularyAsset& asset, const CoReConfig& config) {
  config.validate();
  if (tokens.size() != z.rows()) throw DimensionError("CoRe apply: one token per row of Z required");
  const Projection proj = project(z, bank, params);
  ApplyResult r;
  r.c = compatibility(proj.q, proj.k, proj.k.cols());
  std::vector<PositionPools> pools;
  pools.reserve(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    pools.push_back(position_pools(tokens[i], z.row(i), bank, asset, config));
  }
  r.selection = select_proximal(r.c, pools, config.n);
  r.mask = build_mask(r.selection, bank.rows(), config.eq1_strict_intersection);
  Tensor zp = compose(r.c, r.mask, proj.v);
  if (config.composition == Composition::residual_add) {
    for (std::size_t k = 0; k < zp.size(); ++k) zp[k] += z[k];
  }
  r.z_out = std::move(zp);
  return r;
}

FullGraph compose_full(const Var& z, const Var& bank, const Var& w_q, const Var& w_k, const Var& w_v,
                       const AdditiveMask& mask) {
  const Var q = ag::matmul(z, w_q);
  const Var k = ag::matmul(bank, w_k);
  const Var v = ag::matmul(bank, w_v);
  const Var c = ag::scale(ag::matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(k.cols())));
  return {c, ag::matmul(ag::masked_softmax(c, mask), v)};
}

Tensor gathered_compatibility(const Tensor& z, const Tensor& bank, const Tensor& w_q, const Tensor& w_k,
                              std::span<const TokenId> columns) {
  const Tensor a = kernels::matmul_nt(w_q, w_k);
  Tensor qa = kernels::matmul(z, a);
  const double s = 1.0 / std::sqrt(static_cast<double>(w_k.cols()));
  for (double& v : qa.data()) v *= s;
  return kernels::matmul_nt(qa, kernels::embedding_lookup(bank, columns));
}

GatheredGraph compose_gathered(const Var& z, const Var& bank, const Var& w_q, const Var& w_k, const Var& w_v,
                               const ProximalSelection& selection, bool strict_intersection) {
  std::set<TokenId> cols;
  for (const auto& per_pos : selection.selected)
    for (const auto& [lang, ids] : per_pos) cols.insert(ids.begin(), ids.end());
  GatheredGraph g;
  g.columns.assign(cols.begin(), cols.end());
  // Remap the selection onto gathered column indices.
  ProximalSelection local = selection;
  for (auto& per_pos : local.selected) {
    for (auto& [lang, ids] : per_pos) {
      for (TokenId& id : ids) {
        id = static_cast<TokenId>(std::lower_bound(g.columns.begin(), g.columns.end(), id) - g.columns.begin());
      }
    }
  }
  g.mask = build_mask(local, g.columns.size(), strict_intersection);
  const Var b_sel = ag::gather_rows(bank, g.columns);
  const Var a = ag::matmul_nt(w_q, w_k);
  const Var qa = ag::scale(ag::matmul(z, a), 1.0 / std::sqrt(static_cast<double>(w_k.cols())));
  g.c = ag::matmul_nt(qa, b_sel);
  const Var p = ag::masked_softmax(g.c, g.mask);
  g.z_prime = ag::matmul(ag::matmul(p, b_sel), w_v);
  return g;
}

nlohmann::json selection_dump(const ProximalSelection& selection) {
  nlohmann::json lines = nlohmann::json::array();
  for (std::size_t i = 0; i < selection.positions(); ++i) {
    for (const auto& [lang, ids] : selection.selected[i]) {
      lines.push_back({{"pos", i}, {"lang", lang}, {"selected", ids}});
    }
  }
  return lines;
}

}  // namespace corelab::core
