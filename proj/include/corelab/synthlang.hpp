#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "corelab/vocab.hpp"

namespace corelab {

enum class Script { shared_with_anchor, disjoint };
enum class Typology { anchor_order, permuted_order };

struct LanguageSpec {
  LanguageId id;
  Script script = Script::shared_with_anchor;
  Typology typology = Typology::anchor_order;

  friend bool operator==(const LanguageSpec&, const LanguageSpec&) = default;
};

// L0 anchor; L1 same script and order; L2 same script, permuted order;
// L3 disjoint script, permuted order. L2/L3 then share typology only.
std::vector<LanguageSpec> default_languages();

const char* to_string(Script s);
const char* to_string(Typology t);
Script script_from_string(const std::string& s);
Typology typology_from_string(const std::string& s);

// Question template slots in anchor order. Each slot holds one word.
enum class Slot : std::size_t { wh = 0, relation = 1, of = 2, subject = 3 };
inline constexpr std::size_t kSlotCount = 4;
// Slot order per typology. The permuted order is the full reversal
// (subject-first, question word last).
const std::array<Slot, kSlotCount>& slot_order(Typology t);

namespace words {
inline constexpr const char* kWhat = "what";
inline constexpr const char* kOf = "of";
inline constexpr const char* kKind = "kind";
inline constexpr const char* kYes = "yes";
inline constexpr const char* kNo = "no";
}  // namespace words

// A word as anchor-script pieces; pieces after the first start with "##".
using Word = std::vector<std::string>;

struct Entity {
  std::size_t id = 0;
  Word name;
};

struct Fact {
  std::size_t id = 0;
  std::size_t entity = 0;
  std::size_t attribute = 0;
  std::size_t value = 0;
};

struct WorldOptions {
  // Facts per entity, drawn without replacement from the attributes.
  // 0 means every attribute.
  std::size_t facts_per_entity = 0;
  double multi_token_fraction = 0.25;
};

struct World {
  std::uint64_t seed = 0;
  std::vector<Entity> entities;
  std::vector<std::string> attributes;
  std::vector<std::string> values;
  std::vector<Fact> facts;
};

// Throws ConfigError for zero counts or n_values < 2.
World generate_world(std::uint64_t seed, std::size_t n_entities, std::size_t n_attributes, std::size_t n_values,
                     const WorldOptions& options = {});

// One question in abstract form: "what <relation> of <subject>" -> answer.
struct AbstractQA {
  std::string relation;
  Word subject;
  Word answer;
};

AbstractQA fact_question(const World& world, const Fact& fact);

struct Concept {
  Word name;
  std::vector<Word> instances;
  // Indexed like Ontology::properties.
  std::vector<bool> property_values;
};

struct OntologyQuestion {
  std::size_t concept_index = 0;
  std::optional<std::size_t> instance;  // empty: asks about the concept itself
  std::size_t property = 0;
  AbstractQA qa;
};

struct Ontology {
  std::uint64_t seed = 0;
  std::vector<std::string> properties;
  std::vector<Concept> concepts;
  // Is-a links and concept-level properties only.
  std::vector<AbstractQA> training;
  std::vector<OntologyQuestion> questions;
};

Ontology generate_ontology(std::uint64_t seed, std::size_t n_concepts, std::size_t n_instances_per,
                           std::size_t n_properties_per);

// Surface forms of every word in every registered language, and the
// resulting vocabulary asset.
class Lexicon {
 public:
  Lexicon(std::vector<LanguageSpec> languages, const World& world, const Ontology* ontology = nullptr);

  const VocabularyAsset& asset() const { return asset_; }
  const std::vector<LanguageSpec>& languages() const { return languages_; }
  const LanguageId& anchor() const { return languages_.front().id; }
  // Throws ConfigError when the spec is not registered exactly as given.
  const LanguageSpec& spec(const LanguageId& id) const;
  void require_registered(const LanguageSpec& spec) const;

  std::string surface(const std::string& anchor_piece, const LanguageSpec& spec) const;
  TokenId token(const std::string& anchor_piece, const LanguageSpec& spec) const;
  TokenId control_token(const LanguageId& lang) const;

 private:
  std::vector<LanguageSpec> languages_;
  std::map<LanguageId, std::size_t> disjoint_rank_;
  VocabularyAsset asset_;
};

struct RenderedQA {
  LanguageId lang;
  std::vector<TokenId> tokens;  // question only, no control/BOS/SEP
  std::vector<TokenId> answer;
  // (position here, position in the anchor rendering), one per token.
  std::vector<std::pair<std::size_t, std::size_t>> align;
};

RenderedQA render(const AbstractQA& qa, const LanguageSpec& spec, const Lexicon& lexicon);

struct ParallelQAItem {
  std::size_t fact_id = 0;
  std::map<LanguageId, RenderedQA> renderings;
};

ParallelQAItem render_parallel(const World& world, const Fact& fact, const Lexicon& lexicon);

struct ControlledSplit {
  std::vector<LanguageId> languages;  // languages[s] trains on quarters[s]
  std::vector<std::vector<std::size_t>> quarters;

  // Anchor for evaluating quarter s is languages[s].
  const LanguageId& anchor_of(std::size_t s) const { return languages.at(s); }
  std::vector<std::pair<std::size_t, LanguageId>> training_assignments() const;
};

// Throws ConfigError unless exactly four languages are given and the fact
// count is divisible by four.
ControlledSplit make_controlled_split(const World& world, const std::vector<LanguageSpec>& languages,
                                      std::uint64_t seed);

nlohmann::json to_json(const ControlledSplit& split);
ControlledSplit split_from_json(const nlohmann::json& j);

// Corpus lines: {"kind","lang","tokens","answer","fact_id","align"}.
nlohmann::json corpus_line(const std::string& kind, const RenderedQA& r, std::size_t fact_id);
RenderedQA rendered_from_json(const nlohmann::json& line);

nlohmann::json to_json(const Ontology& ontology, const Lexicon& lexicon, const std::vector<LanguageId>& languages);

}  // namespace corelab
