#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "corelab/autograd.hpp"
#include "corelab/core_attention.hpp"
#include "corelab/vocab.hpp"

namespace corelab {

enum class CorePlacement { pre_stack, every_layer };

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t max_seq_len = 32;
  std::size_t vocab_size = 0;
  double embedding_init_std = 0.02;
  std::optional<core::CoReConfig> core;
  CorePlacement core_placement = CorePlacement::pre_stack;

  void validate() const;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct LayerParams {
  Parameter ln1_g, ln1_b;
  Parameter w_q, w_k, w_v, w_o;
  Parameter ln2_g, ln2_b;
  Parameter w_1, b_1, w_2, b_2;
};

// Diagnostics from the CoRe branch of one forward pass.
struct CoReTrace {
  std::vector<core::GatheredGraph> graphs;  // one per application
  std::vector<core::ProximalSelection> selections;
};

// Decoder-only transformer. The token embedding table doubles as the
// output projection and as the CoRe vocabulary bank.
class DecoderModel {
 public:
  DecoderModel(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  bool core_enabled() const { return config_.core.has_value(); }

  // Required before any forward pass with CoRe enabled.
  void attach_vocabulary(std::shared_ptr<const VocabularyAsset> asset);
  const VocabularyAsset* vocabulary() const { return asset_.get(); }

  // Adds identity-initialized CoRe projections (kept if already present).
  void enable_core(const core::CoReConfig& config, CorePlacement placement = CorePlacement::pre_stack);
  void disable_core();

  Parameter& embeddings() { return tok_emb_; }
  const Parameter& embeddings() const { return tok_emb_; }
  core::CoReParams* core_params() { return core_params_ ? core_params_.get() : nullptr; }

  // Fixed order, used by the optimizer and checkpoints.
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;

  // Embedding output after CoRe (if enabled), before positional encoding.
  Var token_representations(Tape& tape, std::span<const TokenId> tokens, CoReTrace* trace = nullptr);
  // Final hidden states [T, d] after the last layer norm.
  Var hidden(Tape& tape, std::span<const TokenId> tokens, CoReTrace* trace = nullptr);
  // Logits for the requested rows of `h`.
  Var logits_at(Tape& tape, const Var& h, std::span<const TokenId> rows);

  // Full logits [T, M]; throws LengthError past max_seq_len.
  Tensor forward(std::span<const TokenId> tokens);

  // Pools are cached per token between refreshes when
  // pool_refresh_every > 0; otherwise recomputed every pass.
  void invalidate_pool_cache() { pool_cache_.clear(); }

  void save(const std::filesystem::path& path) const;
  static DecoderModel load(const std::filesystem::path& path);

 private:
  Var apply_core(Tape& tape, const Var& z, const Var& bank, std::span<const TokenId> tokens, CoReTrace* trace,
                 bool cacheable);
  const core::PositionPools& pools_for(TokenId token, std::span<const double> query, bool cacheable);

  ModelConfig config_;
  Parameter tok_emb_;
  Parameter pos_emb_;
  std::vector<LayerParams> layers_;
  Parameter lnf_g_, lnf_b_;
  std::unique_ptr<core::CoReParams> core_params_;
  std::shared_ptr<const VocabularyAsset> asset_;
  std::map<TokenId, core::PositionPools> pool_cache_;
  core::PositionPools scratch_pools_;
};

// Argmax decoding (ties to the lowest id); stops at EOS or after max_new.
// The EOS token is not included in the result.
std::vector<TokenId> greedy_decode(DecoderModel& model, std::span<const TokenId> prompt, std::size_t max_new);

// [BOS, <answer-language>, question..., SEP]
std::vector<TokenId> build_prompt(TokenId answer_language_token, std::span<const TokenId> question);

// Answer span for a question; the control token selects the answer
// language.
std::vector<TokenId> answer(DecoderModel& model, TokenId answer_language_token, std::span<const TokenId> question,
                            std::size_t max_new = 4);

}  // namespace corelab
