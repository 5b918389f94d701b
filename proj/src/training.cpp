#include "corelab/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "corelab/errors.hpp"
#include "corelab/rng.hpp"

namespace corelab {

void TrainConfig::validate() const {
  if (max_steps == 0) throw ConfigError("max_steps must be at least 1");
  if (batch_size == 0 || grad_accum_steps == 0) throw ConfigError("batch_size and grad_accum_steps must be positive");
  if (!(learning_rate >= 0.0) || !(lr_scale >= 0.0)) throw ConfigError("learning rate must be non-negative");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw ConfigError("Adam betas must be in [0, 1)");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"lr_scale", c.lr_scale},
          {"max_steps", c.max_steps},
          {"schedule", "linear"},
          {"schedule_horizon", c.schedule_horizon},
          {"grad_accum_steps", c.grad_accum_steps},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"eval_every", c.eval_every},
          {"optimizer", c.optimizer == OptimizerKind::adam ? "adam" : "sgd"},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.lr_scale = j.value("lr_scale", c.lr_scale);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.schedule_horizon = j.value("schedule_horizon", c.schedule_horizon);
    c.grad_accum_steps = j.value("grad_accum_steps", c.grad_accum_steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.eval_every = j.value("eval_every", c.eval_every);
    const std::string opt = j.value("optimizer", std::string("adam"));
    if (opt == "adam") {
      c.optimizer = OptimizerKind::adam;
    } else if (opt == "sgd") {
      c.optimizer = OptimizerKind::sgd;
    } else {
      throw ConfigError("unknown optimizer '" + opt + "'");
    }
    if (j.value("schedule", std::string("linear")) != "linear") throw ConfigError("only the linear schedule exists");
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  return c;
}

double linear_lr(double lr0, std::size_t t, std::size_t horizon) {
  if (horizon == 0) return 0.0;
  return lr0 * std::max(0.0, 1.0 - static_cast<double>(t) / static_cast<double>(horizon));
}

TrainExample make_example(TokenId answer_language_token, std::span<const TokenId> question,
                          std::span<const TokenId> answer) {
  TrainExample ex;
  ex.tokens = build_prompt(answer_language_token, question);
  const std::size_t first = ex.tokens.size() - 1;
  ex.tokens.insert(ex.tokens.end(), answer.begin(), answer.end());
  ex.tokens.push_back(Vocabulary::kEos);
  for (std::size_t p = first; p + 1 < ex.tokens.size(); ++p) {
    ex.positions.push_back(static_cast<TokenId>(p));
    ex.targets.push_back(ex.tokens[p + 1]);
  }
  return ex;
}

TrainExample example_from_rendered(const RenderedQA& r, const Vocabulary& vocab) {
  return make_example(vocab.id(Vocabulary::control_token(r.lang)), r.tokens, r.answer);
}

Var example_loss(DecoderModel& model, Tape& tape, const TrainExample& ex) {
  const Var h = model.hidden(tape, ex.tokens);
  return ag::cross_entropy(model.logits_at(tape, h, ex.positions), ex.targets);
}

double accumulate_gradients(DecoderModel& model, std::span<const TrainExample> batch, double scale) {
  if (batch.empty()) throw DomainError("empty batch");
  const double w = scale / static_cast<double>(batch.size());
  double total = 0.0;
  for (const auto& ex : batch) {
    Tape tape;
    const Var loss = example_loss(model, tape, ex);
    total += loss.value()[0];
    tape.backward(ag::scale(loss, w));
  }
  return total / static_cast<double>(batch.size());
}

Optimizer::Optimizer(const TrainConfig& config, std::vector<Parameter*> params)
    : config_(config), params_(std::move(params)) {
  for (const Parameter* p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

void Optimizer::step(double lr) {
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Parameter& p = *params_[k];
    if (!p.trainable) continue;
    auto& val = p.value.data();
    const auto& g = p.grad.data();
    if (config_.optimizer == OptimizerKind::sgd) {
      for (std::size_t i = 0; i < val.size(); ++i) val[i] -= lr * g[i];
      continue;
    }
    auto& m = m_[k].data();
    auto& v = v_[k].data();
    for (std::size_t i = 0; i < val.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      val[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.adam_eps);
    }
  }
}

TrainResult train(DecoderModel& model, const std::vector<TrainExample>& corpus, const TrainConfig& config,
                  const EvalCallback& on_eval, TrainResult* partial) {
  config.validate();
  if (corpus.empty()) throw DomainError("training corpus is empty");
  for (const auto& ex : corpus)
    for (TokenId t : ex.tokens)
      if (t < 0 || static_cast<std::size_t>(t) >= model.config().vocab_size)
        throw ConfigError("corpus token " + std::to_string(t) + " is outside the model vocabulary");

  Rng rng(config.seed);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::size_t cursor = 0;
  std::vector<TrainExample> batch;
  batch.reserve(config.batch_size);

  auto params = model.parameters();
  Optimizer opt(config, params);
  TrainResult result;
  TrainResult& out = partial ? *partial : result;
  out.log.clear();
  const std::size_t refresh = model.config().core ? model.config().core->pool_refresh_every : 0;
  const double scale = 1.0 / static_cast<double>(config.grad_accum_steps);

  for (std::size_t step = 0; step < config.max_steps; ++step) {
    if (refresh > 0 && step % refresh == 0) model.invalidate_pool_cache();
    for (Parameter* p : params) p->zero_grad();
    double loss = 0.0;
    for (std::size_t a = 0; a < config.grad_accum_steps; ++a) {
      batch.clear();
      while (batch.size() < config.batch_size) {
        if (cursor == order.size()) {
          rng.shuffle(order);
          cursor = 0;
        }
        batch.push_back(corpus[order[cursor++]]);
      }
      loss += scale * accumulate_gradients(model, batch, scale);
    }
    if (!std::isfinite(loss)) throw NumericError("non-finite loss at step " + std::to_string(step));
    const double lr = linear_lr(config.base_lr(), step, config.horizon());
    opt.step(lr);
    out.log.push_back({step, loss, lr});
    if (on_eval && config.eval_every > 0 && (step + 1) % config.eval_every == 0) on_eval(step + 1, model);
  }
  model.invalidate_pool_cache();
  if (partial) result = *partial;
  return result;
}

DecoderModel continual_start(const std::filesystem::path& checkpoint, std::shared_ptr<const VocabularyAsset> asset,
                             const std::optional<core::CoReConfig>& core) {
  DecoderModel model = DecoderModel::load(checkpoint);
  model.attach_vocabulary(std::move(asset));
  if (core) model.enable_core(*core, model.config().core_placement);
  return model;
}

nlohmann::json to_json(const RunManifest& m) {
  return {{"config", m.config},     {"corpus_hashes", m.corpus_hashes}, {"checkpoints", m.checkpoints},
          {"loss_log", m.loss_log}, {"status", m.status},               {"diagnostic", m.diagnostic}};
}

RunManifest manifest_from_json(const nlohmann::json& j) {
  RunManifest m;
  try {
    m.config = j.at("config");
    m.corpus_hashes = j.at("corpus_hashes").get<std::map<std::string, std::string>>();
    m.checkpoints = j.at("checkpoints").get<std::map<std::string, std::string>>();
    m.loss_log = j.value("loss_log", std::string());
    m.status = j.value("status", std::string("ok"));
    m.diagnostic = j.value("diagnostic", std::string());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("run manifest: ") + e.what());
  }
  return m;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& log) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << "step,loss,lr\n";
  char buf[96];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", r.step, r.loss, r.lr);
    os << buf;
  }
}

std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string file_hash(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return hex64(fnv1a64(ss.str()));
}

}  // namespace corelab
