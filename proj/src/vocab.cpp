#include "corelab/vocab.hpp"

#include <algorithm>
#include <sstream>

#include "corelab/errors.hpp"

namespace corelab {

const std::vector<std::string>& Vocabulary::specials() {
  static const std::vector<std::string> s = {"<pad>", "<bos>", "<eos>", "<unk>", "<unknown>", "<sep>"};
  return s;
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  const auto& sp = specials();
  if (tokens_.size() < sp.size() || !std::equal(sp.begin(), sp.end(), tokens_.begin())) {
    throw DataError("vocabulary must begin with the reserved special tokens");
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty()) throw DataError("vocabulary contains an empty token");
    if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
      throw DataError("duplicate token '" + tokens_[i] + "'");
    }
  }
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw IndexError("token id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocabulary::find(std::string_view s) const {
  if (auto it = index_.find(std::string(s)); it != index_.end()) return it->second;
  return std::nullopt;
}

TokenId Vocabulary::id(std::string_view s) const {
  if (auto f = find(s)) return *f;
  throw IndexError("unknown token '" + std::string(s) + "'");
}

bool Vocabulary::is_reserved(TokenId id) const {
  const std::string& t = token(id);
  return t.size() >= 2 && t.front() == '<' && t.back() == '>';
}

bool Vocabulary::is_continuation(TokenId id) const { return token(id).starts_with("##"); }

void LanguageTokenMap::add(const LanguageId& lang, TokenId id) {
  auto [it, inserted] = sets_.try_emplace(lang);
  if (inserted) order_.push_back(lang);
  it->second.push_back(id);
}

void LanguageTokenMap::finalize(const Vocabulary& vocab) {
  membership_.assign(vocab.size(), {});
  for (const auto& lang : order_) {
    auto& ids = sets_[lang];
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    if (ids.empty()) throw DataError("language " + lang + " has no tokens");
    for (TokenId id : ids) {
      if (vocab.is_reserved(id)) throw DataError("reserved token assigned to language " + lang);
      membership_[static_cast<std::size_t>(id)].push_back(lang);
    }
  }
  for (std::size_t id = 0; id < vocab.size(); ++id) {
    if (!vocab.is_reserved(static_cast<TokenId>(id)) && membership_[id].empty()) {
      throw DataError("token '" + vocab.token(static_cast<TokenId>(id)) + "' belongs to no language");
    }
  }
}

const std::vector<TokenId>& LanguageTokenMap::tokens_of(const LanguageId& lang) const {
  auto it = sets_.find(lang);
  if (it == sets_.end()) throw IndexError("unknown language '" + lang + "'");
  return it->second;
}

bool LanguageTokenMap::contains(const LanguageId& lang, TokenId id) const {
  const auto& ids = tokens_of(lang);
  return std::binary_search(ids.begin(), ids.end(), id);
}

const std::vector<LanguageId>& LanguageTokenMap::languages_of(TokenId id) const {
  static const std::vector<LanguageId> none;
  if (id < 0 || static_cast<std::size_t>(id) >= membership_.size()) return none;
  return membership_[static_cast<std::size_t>(id)];
}

void AlignmentMap::add(const LanguageId& a, const LanguageId& b, TokenId ta, TokenId tb) {
  auto put = [](std::map<TokenId, TokenId>& m, TokenId from, TokenId to) {
    auto [it, inserted] = m.emplace(from, to);
    if (!inserted && it->second != to) throw DataError("alignment is not a bijection");
  };
  // Check both directions before mutating.
  auto& fwd = maps_[{a, b}];
  auto& bwd = maps_[{b, a}];
  if (auto it = fwd.find(ta); it != fwd.end() && it->second != tb) throw DataError("alignment is not a bijection");
  if (auto it = bwd.find(tb); it != bwd.end() && it->second != ta) throw DataError("alignment is not a bijection");
  put(fwd, ta, tb);
  put(bwd, tb, ta);
}

std::optional<TokenId> AlignmentMap::lookup(TokenId token, const LanguageId& from, const LanguageId& to) const {
  auto it = maps_.find({from, to});
  if (it == maps_.end()) return std::nullopt;
  auto jt = it->second.find(token);
  if (jt == it->second.end()) return std::nullopt;
  return jt->second;
}

std::vector<std::pair<LanguageId, LanguageId>> AlignmentMap::keys() const {
  std::vector<Key> out;
  for (const auto& [k, m] : maps_) {
    if (k.first < k.second) out.push_back(k);
  }
  return out;
}

std::vector<std::pair<TokenId, TokenId>> AlignmentMap::pairs(const LanguageId& a, const LanguageId& b) const {
  std::vector<std::pair<TokenId, TokenId>> out;
  if (auto it = maps_.find({a, b}); it != maps_.end()) {
    out.assign(it->second.begin(), it->second.end());
  }
  return out;
}

const std::vector<TokenId>& tokens_of_language(const LanguageTokenMap& map, const LanguageId& lang) {
  return map.tokens_of(lang);
}

std::optional<TokenId> parallel_token(const AlignmentMap& align, TokenId token, const LanguageId& from,
                                      const LanguageId& to) {
  return align.lookup(token, from, to);
}

std::vector<TokenId> tokenize(std::string_view text, const LanguageId& lang, const VocabularyAsset& asset) {
  std::vector<TokenId> out;
  std::istringstream in{std::string(text)};
  std::string word;
  while (in >> word) {
    auto id = asset.vocab.find(word);
    if (id && !asset.vocab.is_reserved(*id) && asset.languages.contains(lang, *id)) {
      out.push_back(*id);
    } else if (id && asset.vocab.is_reserved(*id)) {
      out.push_back(*id);
    } else {
      out.push_back(Vocabulary::kUnk);
    }
  }
  return out;
}

std::string detokenize(const std::vector<TokenId>& ids, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token(ids[i]);
  }
  return out;
}

std::vector<std::pair<std::size_t, std::size_t>> word_spans(const std::vector<TokenId>& ids, const Vocabulary& vocab) {
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (vocab.is_continuation(ids[i]) && !spans.empty()) {
      ++spans.back().second;
    } else {
      spans.emplace_back(i, 1);
    }
  }
  return spans;
}

nlohmann::json to_json(const VocabularyAsset& asset) {
  nlohmann::json j;
  j["tokens"] = asset.vocab.tokens();
  nlohmann::json langs = nlohmann::json::object();
  for (const auto& lang : asset.languages.languages()) langs[lang] = asset.languages.tokens_of(lang);
  j["languages"] = langs;
  nlohmann::json al = nlohmann::json::object();
  for (const auto& [a, b] : asset.alignment.keys()) {
    nlohmann::json pairs = nlohmann::json::array();
    for (const auto& [x, y] : asset.alignment.pairs(a, b)) pairs.push_back({x, y});
    al[a + ":" + b] = pairs;
  }
  j["alignments"] = al;
  return j;
}

VocabularyAsset vocabulary_from_json(const nlohmann::json& j) {
  try {
    VocabularyAsset asset;
    asset.vocab = Vocabulary(j.at("tokens").get<std::vector<std::string>>());
    // nlohmann objects iterate in key order; language order follows it.
    for (const auto& [lang, ids] : j.at("languages").items()) {
      for (const auto& id : ids) asset.languages.add(lang, id.get<TokenId>());
    }
    asset.languages.finalize(asset.vocab);
    for (const auto& [key, pairs] : j.at("alignments").items()) {
      const auto colon = key.find(':');
      if (colon == std::string::npos) throw DataError("bad alignment key '" + key + "'");
      const LanguageId a = key.substr(0, colon), b = key.substr(colon + 1);
      for (const auto& p : pairs) asset.alignment.add(a, b, p.at(0).get<TokenId>(), p.at(1).get<TokenId>());
    }
    return asset;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed vocabulary document: ") + e.what());
  }
}

}  // namespace corelab
