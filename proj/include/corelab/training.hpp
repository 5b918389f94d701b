#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "corelab/model.hpp"
#include "corelab/synthlang.hpp"

namespace corelab {

enum class OptimizerKind { adam, sgd };

struct TrainConfig {
  double learning_rate = 1e-5;
  // Effective rate is learning_rate * lr_scale.
  double lr_scale = 30.0;
  std::size_t max_steps = 1000;
  // Linear decay horizon; 0 uses max_steps.
  std::size_t schedule_horizon = 0;
  std::size_t grad_accum_steps = 2;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;
  OptimizerKind optimizer = OptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  double base_lr() const { return learning_rate * lr_scale; }
  std::size_t horizon() const { return schedule_horizon == 0 ? max_steps : schedule_horizon; }
  // Throws ConfigError on max_steps == 0, zero batch sizes or negative rates.
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

// lr0 * max(0, 1 - t / horizon).
double linear_lr(double lr0, std::size_t t, std::size_t horizon);

// One training sequence; loss is taken at `positions`, predicting `targets`.
struct TrainExample {
  std::vector<TokenId> tokens;
  std::vector<TokenId> positions;
  std::vector<TokenId> targets;
};

// [BOS, <lang>, question, SEP, answer..., EOS] with loss on the answer
// span and EOS only.
TrainExample make_example(TokenId answer_language_token, std::span<const TokenId> question,
                          std::span<const TokenId> answer);
TrainExample example_from_rendered(const RenderedQA& r, const Vocabulary& vocab);

// Mean answer-span cross entropy of one example, recorded on `tape`.
Var example_loss(DecoderModel& model, Tape& tape, const TrainExample& ex);

// Mean example loss over `batch`, backpropagated with weight `scale`.
// Returns the unscaled mean.
double accumulate_gradients(DecoderModel& model, std::span<const TrainExample> batch, double scale = 1.0);

class Optimizer {
 public:
  Optimizer(const TrainConfig& config, std::vector<Parameter*> params);
  // Applies one update with rate lr to every trainable parameter.
  void step(double lr);

 private:
  TrainConfig config_;
  std::vector<Parameter*> params_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

struct LossRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<LossRecord> log;
};

using EvalCallback = std::function<void(std::size_t step, DecoderModel& model)>;

// Deterministic in (model init, corpus, config). Throws NumericError on a
// non-finite loss; `log` holds the steps completed so far via `partial`.
TrainResult train(DecoderModel& model, const std::vector<TrainExample>& corpus, const TrainConfig& config,
                  const EvalCallback& on_eval = {}, TrainResult* partial = nullptr);

// Loads a checkpoint, attaches the vocabulary and, when `core` is given,
// adds identity-initialized CoRe projections. Throws ConfigError on a
// vocabulary mismatch.
DecoderModel continual_start(const std::filesystem::path& checkpoint, std::shared_ptr<const VocabularyAsset> asset,
                             const std::optional<core::CoReConfig>& core);

struct RunManifest {
  nlohmann::json config;
  std::map<std::string, std::string> corpus_hashes;
  std::map<std::string, std::string> checkpoints;
  std::string loss_log;
  std::string status = "ok";
  std::string diagnostic;
};

nlohmann::json to_json(const RunManifest& m);
RunManifest manifest_from_json(const nlohmann::json& j);

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& log);
std::string hex64(std::uint64_t h);
std::string file_hash(const std::filesystem::path& path);

}  // namespace corelab
