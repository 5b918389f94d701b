#include "corelab/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "corelab/errors.hpp"
#include "corelab/rng.hpp"

namespace corelab {

namespace {

constexpr int kFormatVersion = 1;

Tensor normal_tensor(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  Tensor t = Tensor::zeros(rows, cols);
  for (double& v : t.data()) v = rng.normal(0.0, stddev);
  return t;
}

Tensor ones_row(std::size_t n) { return Tensor({1, n}, 1.0); }

const char* to_string(CorePlacement p) { return p == CorePlacement::pre_stack ? "pre_stack" : "every_layer"; }

CorePlacement placement_from_string(const std::string& s) {
  if (s == "pre_stack") return CorePlacement::pre_stack;
  if (s == "every_layer") return CorePlacement::every_layer;
  throw ConfigError("unknown core_placement '" + s + "'");
}

void put_u64(std::ostream& os, std::uint64_t v) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(buf, 8);
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char buf[8];
  is.read(reinterpret_cast<char*>(buf), 8);
  if (!is) throw DataError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void ModelConfig::validate() const {
  if (d_model == 0 || n_heads == 0) throw ConfigError("d_model and n_heads must be positive");
  if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  if (vocab_size == 0) throw ConfigError("vocab_size must be positive");
  if (max_seq_len == 0) throw ConfigError("max_seq_len must be positive");
  if (ffn_mult == 0) throw ConfigError("ffn_mult must be positive");
  if (core) core->validate();
}

nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json j = {{"d_model", c.d_model},
                      {"n_layers", c.n_layers},
                      {"n_heads", c.n_heads},
                      {"ffn_mult", c.ffn_mult},
                      {"max_seq_len", c.max_seq_len},
                      {"vocab_size", c.vocab_size},
                      {"embedding_init_std", c.embedding_init_std},
                      {"core_placement", to_string(c.core_placement)}};
  j["core"] = c.core ? core::to_json(*c.core) : nlohmann::json(nullptr);
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.d_model = j.value("d_model", c.d_model);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.embedding_init_std = j.value("embedding_init_std", c.embedding_init_std);
    c.core_placement = placement_from_string(j.value("core_placement", std::string("pre_stack")));
    if (j.contains("core") && !j.at("core").is_null()) c.core = core::core_config_from_json(j.at("core"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return c;
}

DecoderModel::DecoderModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng(seed);
  const std::size_t d = config_.d_model;
  const std::size_t h = d * config_.ffn_mult;
  const double w_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double out_std = w_std / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(1, config_.n_layers)));
  tok_emb_ = Parameter("tok_emb", normal_tensor(rng, config_.vocab_size, d, config_.embedding_init_std));
  pos_emb_ = Parameter("pos_emb", normal_tensor(rng, config_.max_seq_len, d, config_.embedding_init_std));
  layers_.reserve(config_.n_layers);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    LayerParams L;
    L.ln1_g = Parameter(p + "ln1.g", ones_row(d));
    L.ln1_b = Parameter(p + "ln1.b", Tensor::zeros(1, d));
    L.w_q = Parameter(p + "attn.w_q", normal_tensor(rng, d, d, w_std));
    L.w_k = Parameter(p + "attn.w_k", normal_tensor(rng, d, d, w_std));
    L.w_v = Parameter(p + "attn.w_v", normal_tensor(rng, d, d, w_std));
    L.w_o = Parameter(p + "attn.w_o", normal_tensor(rng, d, d, out_std));
    L.ln2_g = Parameter(p + "ln2.g", ones_row(d));
    L.ln2_b = Parameter(p + "ln2.b", Tensor::zeros(1, d));
    L.w_1 = Parameter(p + "ffn.w_1", normal_tensor(rng, d, h, w_std));
    L.b_1 = Parameter(p + "ffn.b_1", Tensor::zeros(1, h));
    L.w_2 = Parameter(p + "ffn.w_2", normal_tensor(rng, h, d, out_std / std::sqrt(static_cast<double>(config_.ffn_mult))));
    L.b_2 = Parameter(p + "ffn.b_2", Tensor::zeros(1, d));
    layers_.push_back(std::move(L));
  }
  lnf_g_ = Parameter("ln_f.g", ones_row(d));
  lnf_b_ = Parameter("ln_f.b", Tensor::zeros(1, d));
  if (config_.core) core_params_ = std::make_unique<core::CoReParams>(core::CoReParams::identity(d));
}

void DecoderModel::attach_vocabulary(std::shared_ptr<const VocabularyAsset> asset) {
  if (asset && asset->vocab.size() != config_.vocab_size) {
    throw ConfigError("vocabulary has " + std::to_string(asset->vocab.size()) + " tokens, model expects " +
                      std::to_string(config_.vocab_size));
  }
  asset_ = std::move(asset);
  pool_cache_.clear();
}

void DecoderModel::enable_core(const core::CoReConfig& config, CorePlacement placement) {
  config.validate();
  config_.core = config;
  config_.core_placement = placement;
  if (!core_params_) core_params_ = std::make_unique<core::CoReParams>(core::CoReParams::identity(config_.d_model));
  pool_cache_.clear();
}

void DecoderModel::disable_core() {
  config_.core.reset();
  core_params_.reset();
  pool_cache_.clear();
}

std::vector<Parameter*> DecoderModel::parameters() {
  std::vector<Parameter*> out{&tok_emb_, &pos_emb_};
  for (auto& L : layers_) {
    for (Parameter* p : {&L.ln1_g, &L.ln1_b, &L.w_q, &L.w_k, &L.w_v, &L.w_o, &L.ln2_g, &L.ln2_b, &L.w_1, &L.b_1,
                         &L.w_2, &L.b_2})
      out.push_back(p);
  }
  out.push_back(&lnf_g_);
  out.push_back(&lnf_b_);
  if (core_params_) {
    out.push_back(&core_params_->w_q);
    out.push_back(&core_params_->w_k);
    out.push_back(&core_params_->w_v);
  }
  return out;
}

std::vector<const Parameter*> DecoderModel::parameters() const {
  auto mut = const_cast<DecoderModel*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

const core::PositionPools& DecoderModel::pools_for(TokenId token, std::span<const double> query, bool cacheable) {
  if (cacheable) {
    auto it = pool_cache_.find(token);
    if (it != pool_cache_.end()) return it->second;
    return pool_cache_[token] = core::position_pools(token, query, tok_emb_.value, *asset_, *config_.core);
  }
  scratch_pools_ = core::position_pools(token, query, tok_emb_.value, *asset_, *config_.core);
  return scratch_pools_;
}

Var DecoderModel::apply_core(Tape& tape, const Var& z, const Var& bank, std::span<const TokenId> tokens,
                             CoReTrace* trace, bool cacheable) {
  const core::CoReConfig& cc = *config_.core;
  if (!asset_) throw UsageError("CoRe needs an attached vocabulary");
  const Tensor& zv = z.value();

  // Candidate pools, then the selection over their union. Local column
  // order is ascending by id, so tie-breaking matches the full C.
  std::vector<core::PositionPools> pools;
  pools.reserve(tokens.size());
  std::set<TokenId> uni;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    pools.push_back(pools_for(tokens[i], zv.row(i), cacheable));
    for (const auto& [lang, ids] : pools.back()) uni.insert(ids.begin(), ids.end());
  }
  const std::vector<TokenId> columns(uni.begin(), uni.end());
  auto local = [&](TokenId id) {
    return static_cast<TokenId>(std::lower_bound(columns.begin(), columns.end(), id) - columns.begin());
  };
  for (auto& per_pos : pools)
    for (auto& [lang, ids] : per_pos)
      for (TokenId& id : ids) id = local(id);
  const Tensor c_local = core::gathered_compatibility(zv, tok_emb_.value, core_params_->w_q.value,
                                                      core_params_->w_k.value, columns);
  core::ProximalSelection sel = core::select_proximal(c_local, pools, cc.n);
  for (auto& per_pos : sel.selected)
    for (auto& [lang, ids] : per_pos)
      for (TokenId& id : ids) id = columns[static_cast<std::size_t>(id)];

  const Var bank_in = cc.freeze_bank ? tape.constant(tok_emb_.value) : bank;
  core::GatheredGraph g = core::compose_gathered(z, bank_in, tape.param(core_params_->w_q),
                                                 tape.param(core_params_->w_k), tape.param(core_params_->w_v), sel,
                                                 cc.eq1_strict_intersection);
  Var out = cc.composition == core::Composition::replace ? g.z_prime : ag::add(z, g.z_prime);
  if (trace) {
    trace->selections.push_back(std::move(sel));
    trace->graphs.push_back(std::move(g));
  }
  return out;
}

Var DecoderModel::token_representations(Tape& tape, std::span<const TokenId> tokens, CoReTrace* trace) {
  for (TokenId t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= config_.vocab_size) {
      throw IndexError("token id " + std::to_string(t) + " outside vocabulary");
    }
  }
  const Var bank = tape.param(tok_emb_);
  Var z = ag::gather_rows(bank, tokens);
  if (config_.core && config_.core_placement == CorePlacement::pre_stack) {
    const bool cacheable = config_.core->pool_refresh_every > 0;
    z = apply_core(tape, z, bank, tokens, trace, cacheable);
  }
  return z;
}

Var DecoderModel::hidden(Tape& tape, std::span<const TokenId> tokens, CoReTrace* trace) {
  if (tokens.empty()) throw DimensionError("empty token sequence");
  if (tokens.size() > config_.max_seq_len) {
    throw LengthError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_seq_len " +
                      std::to_string(config_.max_seq_len));
  }
  Var x = token_representations(tape, tokens, trace);
  std::vector<TokenId> positions(tokens.size());
  std::iota(positions.begin(), positions.end(), 0);
  x = ag::add(x, ag::gather_rows(tape.param(pos_emb_), positions));
  const bool every = config_.core && config_.core_placement == CorePlacement::every_layer;
  const Var bank = tape.param(tok_emb_);
  for (auto& L : layers_) {
    if (every) x = apply_core(tape, x, bank, tokens, trace, false);
    const Var a = ag::layer_norm(x, tape.param(L.ln1_g), tape.param(L.ln1_b));
    const Var att = ag::causal_self_attention(ag::matmul(a, tape.param(L.w_q)), ag::matmul(a, tape.param(L.w_k)),
                                              ag::matmul(a, tape.param(L.w_v)), config_.n_heads);
    x = ag::add(x, ag::matmul(att, tape.param(L.w_o)));
    const Var f = ag::layer_norm(x, tape.param(L.ln2_g), tape.param(L.ln2_b));
    const Var u = ag::gelu(ag::add_row(ag::matmul(f, tape.param(L.w_1)), tape.param(L.b_1)));
    x = ag::add(x, ag::add_row(ag::matmul(u, tape.param(L.w_2)), tape.param(L.b_2)));
  }
  return ag::layer_norm(x, tape.param(lnf_g_), tape.param(lnf_b_));
}

Var DecoderModel::logits_at(Tape& tape, const Var& h, std::span<const TokenId> rows) {
  return ag::matmul_nt(ag::gather_rows(h, rows), tape.param(tok_emb_));
}

Tensor DecoderModel::forward(std::span<const TokenId> tokens) {
  Tape tape;
  const Var h = hidden(tape, tokens);
  return ag::matmul_nt(h, tape.param(tok_emb_)).value();
}

void DecoderModel::save(const std::filesystem::path& path) const {
  nlohmann::json header;
  header["format_version"] = kFormatVersion;
  header["config"] = to_json(config_);
  nlohmann::json dir = nlohmann::json::array();
  std::uint64_t offset = 0;
  const auto params = parameters();
  for (const Parameter* p : params) {
    dir.push_back({{"name", p->name()}, {"shape", p->value.shape()}, {"offset", offset}});
    offset += 8 * p->value.size();
  }
  header["tensors"] = dir;
  header["payload_bytes"] = offset;
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  put_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const Parameter* p : params)
    for (double v : p->value.data()) put_u64(os, std::bit_cast<std::uint64_t>(v));
  if (!os) throw IoError("failed writing checkpoint " + path.string());
}

DecoderModel DecoderModel::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  const std::uint64_t len = get_u64(is);
  if (len > (1ULL << 30)) throw DataError("checkpoint header length implausible");
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw DataError("checkpoint header truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint header: ") + e.what());
  }
  if (header.value("format_version", 0) != kFormatVersion) throw DataError("unsupported checkpoint format_version");
  DecoderModel model(model_config_from_json(header.at("config")), 0);
  std::map<std::string, Parameter*> by_name;
  for (Parameter* p : model.parameters()) by_name[p->name()] = p;
  const auto& dir = header.at("tensors");
  if (dir.size() != by_name.size()) throw DataError("checkpoint tensor count does not match its config");

  std::vector<double> payload;
  payload.reserve(header.value("payload_bytes", std::uint64_t{0}) / 8);
  while (payload.size() < payload.capacity()) payload.push_back(std::bit_cast<double>(get_u64(is)));
  for (const auto& entry : dir) {
    const std::string name = entry.at("name");
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("checkpoint has unexpected tensor '" + name + "'");
    Parameter& p = *it->second;
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    if (shape != p.value.shape()) throw DataError("checkpoint tensor '" + name + "' has the wrong shape");
    const std::size_t off = entry.at("offset").get<std::size_t>() / 8;
    if (off + p.value.size() > payload.size()) throw DataError("checkpoint payload truncated");
    std::copy_n(payload.begin() + static_cast<std::ptrdiff_t>(off), p.value.size(), p.value.data().begin());
  }
  return model;
}

std::vector<TokenId> greedy_decode(DecoderModel& model, std::span<const TokenId> prompt, std::size_t max_new) {
  if (prompt.empty()) throw UsageError("greedy_decode needs a nonempty prompt");
  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  std::vector<TokenId> out;
  while (out.size() < max_new && seq.size() < model.config().max_seq_len) {
    Tape tape;
    const Var h = model.hidden(tape, seq);
    const TokenId last = static_cast<TokenId>(seq.size() - 1);
    const Tensor logits = model.logits_at(tape, h, std::span<const TokenId>(&last, 1)).value();
    TokenId best = 0;
    for (std::size_t j = 1; j < logits.cols(); ++j)
      if (logits(0, j) > logits(0, static_cast<std::size_t>(best))) best = static_cast<TokenId>(j);
    if (best == Vocabulary::kEos) break;
    out.push_back(best);
    seq.push_back(best);
  }
  return out;
}

std::vector<TokenId> build_prompt(TokenId answer_language_token, std::span<const TokenId> question) {
  std::vector<TokenId> p;
  p.reserve(question.size() + 3);
  p.push_back(Vocabulary::kBos);
  p.push_back(answer_language_token);
  p.insert(p.end(), question.begin(), question.end());
  p.push_back(Vocabulary::kSep);
  return p;
}

std::vector<TokenId> answer(DecoderModel& model, TokenId answer_language_token, std::span<const TokenId> question,
                            std::size_t max_new) {
  const auto prompt = build_prompt(answer_language_token, question);
  return greedy_decode(model, prompt, max_new);
}

}  // namespace corelab
