#include "corelab/synthlang.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include "corelab/errors.hpp"
#include "corelab/rng.hpp"

namespace corelab {

namespace {

constexpr std::string_view kConsonants = "bdfgklmnprstvz";
constexpr std::string_view kVowels = "aeiou";
constexpr std::string_view kFinals = "nrslk";

const std::vector<std::string>& attribute_words() {
  static const std::vector<std::string> w = {"color", "size",  "origin", "habitat", "diet",  "shape",
                                             "sound", "taste", "era",    "style",   "guild", "river",
                                             "mood",  "crest", "metal",  "tongue"};
  return w;
}

const std::vector<std::string>& function_words() {
  static const std::vector<std::string> w = {words::kWhat, words::kOf, words::kKind, words::kYes, words::kNo};
  return w;
}

// Random CV-syllable strings, unique against everything drawn so far.
class NameGenerator {
 public:
  NameGenerator(Rng& rng, std::set<std::string>& used) : rng_(rng), used_(used) {}

  std::string draw(std::size_t syllables, bool closed) {
    for (;;) {
      std::string s;
      for (std::size_t i = 0; i < syllables; ++i) {
        s += kConsonants[rng_.below(kConsonants.size())];
        s += kVowels[rng_.below(kVowels.size())];
      }
      if (closed) s += kFinals[rng_.below(kFinals.size())];
      if (used_.insert(s).second) return s;
    }
  }

 private:
  Rng& rng_;
  std::set<std::string>& used_;
};

std::set<std::string> fixed_words() {
  std::set<std::string> used(function_words().begin(), function_words().end());
  used.insert(attribute_words().begin(), attribute_words().end());
  return used;
}

void require_positive(std::size_t v, const char* what) {
  if (v == 0) throw ConfigError(std::string(what) + " must be at least 1");
}

}  // namespace

std::vector<LanguageSpec> default_languages() {
  return {
      {"L0", Script::shared_with_anchor, Typology::anchor_order},
      {"L1", Script::shared_with_anchor, Typology::anchor_order},
      {"L2", Script::shared_with_anchor, Typology::permuted_order},
      {"L3", Script::disjoint, Typology::permuted_order},
  };
}

const char* to_string(Script s) { return s == Script::shared_with_anchor ? "shared" : "disjoint"; }
const char* to_string(Typology t) { return t == Typology::anchor_order ? "anchor" : "permuted"; }

Script script_from_string(const std::string& s) {
  if (s == "shared") return Script::shared_with_anchor;
  if (s == "disjoint") return Script::disjoint;
  throw ConfigError("unknown script '" + s + "'");
}

Typology typology_from_string(const std::string& s) {
  if (s == "anchor") return Typology::anchor_order;
  if (s == "permuted") return Typology::permuted_order;
  throw ConfigError("unknown typology '" + s + "'");
}

const std::array<Slot, kSlotCount>& slot_order(Typology t) {
  static const std::array<Slot, kSlotCount> anchor = {Slot::wh, Slot::relation, Slot::of, Slot::subject};
  static const std::array<Slot, kSlotCount> permuted = {Slot::subject, Slot::of, Slot::relation, Slot::wh};
  return t == Typology::anchor_order ? anchor : permuted;
}

World generate_world(std::uint64_t seed, std::size_t n_entities, std::size_t n_attributes, std::size_t n_values,
                     const WorldOptions& options) {
  require_positive(n_entities, "n_entities");
  require_positive(n_attributes, "n_attributes");
  require_positive(n_values, "n_values");
  if (n_values < 2) throw ConfigError("n_values must be at least 2 so answers can disagree");
  const std::size_t per_entity = options.facts_per_entity == 0 ? n_attributes : options.facts_per_entity;
  if (per_entity > n_attributes) throw ConfigError("facts_per_entity exceeds n_attributes");

  Rng rng(seed);
  std::set<std::string> used = fixed_words();
  NameGenerator names(rng, used);
  World w;
  w.seed = seed;
  for (std::size_t a = 0; a < n_attributes; ++a) {
    // Beyond the fixed list, an "x" prefix keeps attribute words out of every
    // generated name space.
    w.attributes.push_back(a < attribute_words().size() ? attribute_words()[a] : "x" + names.draw(2, false));
  }
  for (std::size_t v = 0; v < n_values; ++v) w.values.push_back(names.draw(2, false));
  for (std::size_t e = 0; e < n_entities; ++e) {
    Entity ent{e, {}};
    if (rng.uniform() < options.multi_token_fraction) {
      ent.name.push_back(names.draw(2, false));
      ent.name.push_back("##" + names.draw(2, false));
    } else {
      ent.name.push_back(names.draw(3, false));
    }
    w.entities.push_back(std::move(ent));
  }
  std::vector<std::size_t> attrs(n_attributes);
  for (const auto& ent : w.entities) {
    for (std::size_t a = 0; a < n_attributes; ++a) attrs[a] = a;
    if (per_entity < n_attributes) {
      rng.shuffle(attrs);
      std::sort(attrs.begin(), attrs.begin() + static_cast<std::ptrdiff_t>(per_entity));
    }
    for (std::size_t k = 0; k < per_entity; ++k) {
      w.facts.push_back({w.facts.size(), ent.id, attrs[k], static_cast<std::size_t>(rng.below(n_values))});
    }
  }
  return w;
}

AbstractQA fact_question(const World& world, const Fact& fact) {
  return {world.attributes.at(fact.attribute), world.entities.at(fact.entity).name, {world.values.at(fact.value)}};
}

Ontology generate_ontology(std::uint64_t seed, std::size_t n_concepts, std::size_t n_instances_per,
                           std::size_t n_properties_per) {
  require_positive(n_concepts, "n_concepts");
  require_positive(n_instances_per, "n_instances_per");
  require_positive(n_properties_per, "n_properties_per");
  Rng rng(seed);
  std::set<std::string> used = fixed_words();
  NameGenerator names(rng, used);
  Ontology o;
  o.seed = seed;
  for (std::size_t p = 0; p < n_properties_per; ++p) o.properties.push_back(names.draw(2, true));
  for (std::size_t c = 0; c < n_concepts; ++c) {
    Concept con;
    con.name = {names.draw(2, true)};
    for (std::size_t i = 0; i < n_instances_per; ++i) con.instances.push_back({names.draw(3, true)});
    for (std::size_t p = 0; p < n_properties_per; ++p) con.property_values.push_back(rng.below(2) == 1);
    o.concepts.push_back(std::move(con));
  }
  for (std::size_t c = 0; c < o.concepts.size(); ++c) {
    const Concept& con = o.concepts[c];
    for (const auto& inst : con.instances) o.training.push_back({words::kKind, inst, con.name});
    for (std::size_t p = 0; p < o.properties.size(); ++p) {
      const Word answer = {con.property_values[p] ? words::kYes : words::kNo};
      o.training.push_back({o.properties[p], con.name, answer});
      o.questions.push_back({c, std::nullopt, p, {o.properties[p], con.name, answer}});
      for (std::size_t i = 0; i < con.instances.size(); ++i) {
        o.questions.push_back({c, i, p, {o.properties[p], con.instances[i], answer}});
      }
    }
  }
  return o;
}

Lexicon::Lexicon(std::vector<LanguageSpec> languages, const World& world, const Ontology* ontology)
    : languages_(std::move(languages)) {
  if (languages_.empty()) throw ConfigError("at least one language is required");
  if (languages_.front().script != Script::shared_with_anchor || languages_.front().typology != Typology::anchor_order) {
    throw ConfigError("the first language is the anchor and must use the anchor script and order");
  }
  std::set<LanguageId> seen;
  for (const auto& l : languages_) {
    if (!seen.insert(l.id).second) throw ConfigError("duplicate language '" + l.id + "'");
    if (l.script == Script::disjoint) {
      const std::size_t rank = disjoint_rank_.size();
      disjoint_rank_[l.id] = rank;
    }
  }

  std::vector<std::string> pieces;
  std::set<std::string> piece_set;
  auto add = [&](const std::string& p) {
    if (piece_set.insert(p).second) pieces.push_back(p);
  };
  for (const auto& w : function_words()) add(w);
  for (const auto& a : world.attributes) add(a);
  for (const auto& v : world.values) add(v);
  for (const auto& e : world.entities)
    for (const auto& p : e.name) add(p);
  if (ontology) {
    for (const auto& p : ontology->properties) add(p);
    for (const auto& c : ontology->concepts) {
      for (const auto& p : c.name) add(p);
      for (const auto& inst : c.instances)
        for (const auto& p : inst) add(p);
    }
  }

  std::vector<std::string> tokens = Vocabulary::specials();
  for (const auto& l : languages_) tokens.push_back(Vocabulary::control_token(l.id));
  for (const auto& p : pieces) tokens.push_back(p);
  for (const auto& l : languages_) {
    if (l.script != Script::disjoint) continue;
    for (const auto& p : pieces) tokens.push_back(surface(p, l));
  }
  asset_.vocab = Vocabulary(std::move(tokens));
  for (const auto& l : languages_) {
    for (const auto& p : pieces) asset_.languages.add(l.id, token(p, l));
  }
  asset_.languages.finalize(asset_.vocab);
  for (std::size_t a = 0; a < languages_.size(); ++a) {
    for (std::size_t b = a + 1; b < languages_.size(); ++b) {
      for (const auto& p : pieces) {
        asset_.alignment.add(languages_[a].id, languages_[b].id, token(p, languages_[a]), token(p, languages_[b]));
      }
    }
  }
}

const LanguageSpec& Lexicon::spec(const LanguageId& id) const {
  for (const auto& l : languages_)
    if (l.id == id) return l;
  throw ConfigError("language '" + id + "' is not registered");
}

void Lexicon::require_registered(const LanguageSpec& s) const {
  if (spec(s.id) != s) throw ConfigError("language '" + s.id + "' registered with a different script/typology");
}

std::string Lexicon::surface(const std::string& anchor_piece, const LanguageSpec& s) const {
  if (s.script == Script::shared_with_anchor) return anchor_piece;
  std::string out = anchor_piece;
  const bool cont = out.starts_with("##");
  for (std::size_t i = cont ? 2 : 0; i < out.size(); ++i) {
    out[i] = static_cast<char>(std::toupper(static_cast<unsigned char>(out[i])));
  }
  const auto it = disjoint_rank_.find(s.id);
  if (it == disjoint_rank_.end()) throw ConfigError("language '" + s.id + "' is not registered");
  if (it->second > 0) out += "~" + std::to_string(it->second);
  return out;
}

TokenId Lexicon::token(const std::string& anchor_piece, const LanguageSpec& s) const {
  return asset_.vocab.id(surface(anchor_piece, s));
}

TokenId Lexicon::control_token(const LanguageId& lang) const {
  return asset_.vocab.id(Vocabulary::control_token(lang));
}

RenderedQA render(const AbstractQA& qa, const LanguageSpec& spec, const Lexicon& lexicon) {
  lexicon.require_registered(spec);
  const std::array<Word, kSlotCount> slots = {Word{words::kWhat}, Word{qa.relation}, Word{words::kOf}, qa.subject};
  // Anchor start offset of each slot.
  std::array<std::size_t, kSlotCount> anchor_start{};
  std::size_t pos = 0;
  for (Slot s : slot_order(Typology::anchor_order)) {
    anchor_start[static_cast<std::size_t>(s)] = pos;
    pos += slots[static_cast<std::size_t>(s)].size();
  }
  RenderedQA out;
  out.lang = spec.id;
  for (Slot s : slot_order(spec.typology)) {
    const Word& w = slots[static_cast<std::size_t>(s)];
    for (std::size_t k = 0; k < w.size(); ++k) {
      out.align.emplace_back(out.tokens.size(), anchor_start[static_cast<std::size_t>(s)] + k);
      out.tokens.push_back(lexicon.token(w[k], spec));
    }
  }
  for (const auto& p : qa.answer) out.answer.push_back(lexicon.token(p, spec));
  return out;
}

ParallelQAItem render_parallel(const World& world, const Fact& fact, const Lexicon& lexicon) {
  ParallelQAItem item;
  item.fact_id = fact.id;
  const AbstractQA qa = fact_question(world, fact);
  for (const auto& l : lexicon.languages()) item.renderings[l.id] = render(qa, l, lexicon);
  return item;
}

std::vector<std::pair<std::size_t, LanguageId>> ControlledSplit::training_assignments() const {
  std::vector<std::pair<std::size_t, LanguageId>> out;
  for (std::size_t s = 0; s < quarters.size(); ++s)
    for (std::size_t f : quarters[s]) out.emplace_back(f, languages[s]);
  return out;
}

ControlledSplit make_controlled_split(const World& world, const std::vector<LanguageSpec>& languages,
                                      std::uint64_t seed) {
  if (languages.size() != 4) {
    throw ConfigError("controlled split needs exactly 4 languages, got " + std::to_string(languages.size()));
  }
  if (world.facts.empty() || world.facts.size() % 4 != 0) {
    throw ConfigError("fact count " + std::to_string(world.facts.size()) +
                      " is not a positive multiple of 4; pad the world");
  }
  std::vector<std::size_t> ids(world.facts.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = world.facts[i].id;
  Rng rng(seed);
  rng.shuffle(ids);
  ControlledSplit split;
  const std::size_t q = ids.size() / 4;
  for (std::size_t s = 0; s < 4; ++s) {
    split.languages.push_back(languages[s].id);
    std::vector<std::size_t> part(ids.begin() + static_cast<std::ptrdiff_t>(s * q),
                                  ids.begin() + static_cast<std::ptrdiff_t>((s + 1) * q));
    std::sort(part.begin(), part.end());
    split.quarters.push_back(std::move(part));
  }
  return split;
}

nlohmann::json to_json(const ControlledSplit& split) {
  nlohmann::json j;
  j["languages"] = split.languages;
  j["quarters"] = split.quarters;
  return j;
}

ControlledSplit split_from_json(const nlohmann::json& j) {
  try {
    ControlledSplit s;
    s.languages = j.at("languages").get<std::vector<LanguageId>>();
    s.quarters = j.at("quarters").get<std::vector<std::vector<std::size_t>>>();
    if (s.languages.size() != s.quarters.size()) throw DataError("split: languages and quarters differ in length");
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed split document: ") + e.what());
  }
}

nlohmann::json corpus_line(const std::string& kind, const RenderedQA& r, std::size_t fact_id) {
  nlohmann::json j;
  j["kind"] = kind;
  j["lang"] = r.lang;
  j["tokens"] = r.tokens;
  j["answer"] = r.answer;
  j["fact_id"] = fact_id;
  nlohmann::json al = nlohmann::json::array();
  for (const auto& [a, b] : r.align) al.push_back({a, b});
  j["align"] = al;
  return j;
}

RenderedQA rendered_from_json(const nlohmann::json& line) {
  try {
    RenderedQA r;
    r.lang = line.at("lang").get<LanguageId>();
    r.tokens = line.at("tokens").get<std::vector<TokenId>>();
    r.answer = line.at("answer").get<std::vector<TokenId>>();
    for (const auto& p : line.at("align")) r.align.emplace_back(p.at(0).get<std::size_t>(), p.at(1).get<std::size_t>());
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed corpus line: ") + e.what());
  }
}

nlohmann::json to_json(const Ontology& o, const Lexicon& lexicon, const std::vector<LanguageId>& languages) {
  nlohmann::json j;
  j["seed"] = o.seed;
  j["properties"] = o.properties;
  nlohmann::json concepts = nlohmann::json::array();
  for (const auto& c : o.concepts) {
    nlohmann::json cj;
    cj["name"] = c.name;
    cj["instances"] = c.instances;
    std::vector<int> vals;
    for (bool b : c.property_values) vals.push_back(b ? 1 : 0);
    cj["property_values"] = vals;
    concepts.push_back(cj);
  }
  j["concepts"] = concepts;
  nlohmann::json rendered = nlohmann::json::object();
  for (const auto& lang : languages) {
    const LanguageSpec& spec = lexicon.spec(lang);
    nlohmann::json train = nlohmann::json::array();
    for (const auto& qa : o.training) {
      const RenderedQA r = render(qa, spec, lexicon);
      train.push_back({{"tokens", r.tokens}, {"answer", r.answer}});
    }
    nlohmann::json qs = nlohmann::json::array();
    for (const auto& q : o.questions) {
      const RenderedQA r = render(q.qa, spec, lexicon);
      nlohmann::json qj{{"concept", q.concept_index}, {"property", q.property}, {"tokens", r.tokens},
                        {"answer", r.answer}};
      qj["instance"] = q.instance ? nlohmann::json(*q.instance) : nlohmann::json(nullptr);
      qs.push_back(qj);
    }
    rendered[lang] = {{"training", train}, {"questions", qs}};
  }
  j["rendered"] = rendered;
  return j;
}

}  // namespace corelab
