#pragma once

// Small worlds and models shared by the unit suites.

#include <memory>

#include "corelab/model.hpp"
#include "corelab/synthlang.hpp"
#include "corelab/training.hpp"

namespace fixture {

using namespace corelab;

struct TinyWorld {
  World world;
  std::unique_ptr<Lexicon> lexicon;
  std::shared_ptr<const VocabularyAsset> asset;

  TinyWorld(std::uint64_t seed = 1, std::size_t n_entities = 4, std::size_t n_attributes = 2, std::size_t n_values = 4)
      : world(generate_world(seed, n_entities, n_attributes, n_values)),
        lexicon(std::make_unique<Lexicon>(default_languages(), world)),
        asset(std::make_shared<const VocabularyAsset>(lexicon->asset())) {}

  RenderedQA rendered(std::size_t fact, const LanguageId& lang) const {
    return render_parallel(world, world.facts.at(fact), *lexicon).renderings.at(lang);
  }
  TrainExample example(std::size_t fact, const LanguageId& lang) const {
    return example_from_rendered(rendered(fact, lang), asset->vocab);
  }
};

inline ModelConfig tiny_model(std::size_t vocab_size, std::size_t d = 16, std::size_t layers = 1) {
  ModelConfig c;
  c.d_model = d;
  c.n_layers = layers;
  c.n_heads = 2;
  c.ffn_mult = 2;
  c.max_seq_len = 16;
  c.vocab_size = vocab_size;
  c.embedding_init_std = 0.3;
  return c;
}

inline core::CoReConfig core_config(std::vector<LanguageId> langs, std::size_t n, std::size_t pool_size = 0) {
  core::CoReConfig c;
  c.languages = std::move(langs);
  c.anchor = c.languages.front();
  c.n = n;
  c.pool_size = pool_size;
  return c;
}

inline Parameter& param(DecoderModel& m, const std::string& name) {
  for (Parameter* p : m.parameters())
    if (p->name() == name) return *p;
  throw std::runtime_error("no parameter " + name);
}

}  // namespace fixture
