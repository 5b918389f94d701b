#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "corelab/kernels.hpp"

namespace corelab {

using LanguageId = std::string;

// Token inventory. Strings of the form "<...>" are reserved (specials and
// per-language control tokens) and never belong to a language.
// "##" marks a continuation piece of a multi-token word.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kUnk = 3;
  static constexpr TokenId kUnknownAnswer = 4;
  static constexpr TokenId kSep = 5;
  static const std::vector<std::string>& specials();

  Vocabulary() = default;
  // The list must start with specials(); strings must be unique.
  explicit Vocabulary(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const;
  std::optional<TokenId> find(std::string_view s) const;
  TokenId id(std::string_view s) const;  // throws IndexError
  bool is_reserved(TokenId id) const;
  bool is_continuation(TokenId id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  static std::string control_token(const LanguageId& lang) { return "<" + lang + ">"; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

// Per-language token sets U^r. A token may belong to several languages.
class LanguageTokenMap {
 public:
  LanguageTokenMap() = default;

  void add(const LanguageId& lang, TokenId id);
  // Sorts, dedups and validates; call once all tokens are added.
  void finalize(const Vocabulary& vocab);

  const std::vector<LanguageId>& languages() const { return order_; }
  bool has_language(const LanguageId& lang) const { return sets_.count(lang) != 0; }
  // Ascending, duplicate-free. Throws IndexError for unknown languages.
  const std::vector<TokenId>& tokens_of(const LanguageId& lang) const;
  bool contains(const LanguageId& lang, TokenId id) const;
  // Languages a token belongs to, in declaration order.
  const std::vector<LanguageId>& languages_of(TokenId id) const;

 private:
  std::vector<LanguageId> order_;
  std::map<LanguageId, std::vector<TokenId>> sets_;
  std::vector<std::vector<LanguageId>> membership_;
};

// Partial bijections between parallel tokens, per language pair.
class AlignmentMap {
 public:
  // Throws DataError if the pair would break bijectivity.
  void add(const LanguageId& a, const LanguageId& b, TokenId ta, TokenId tb);
  std::optional<TokenId> lookup(TokenId token, const LanguageId& from, const LanguageId& to) const;
  // Pairs (a, b) stored for the unordered key a < b.
  std::vector<std::pair<LanguageId, LanguageId>> keys() const;
  std::vector<std::pair<TokenId, TokenId>> pairs(const LanguageId& a, const LanguageId& b) const;

 private:
  using Key = std::pair<LanguageId, LanguageId>;
  std::map<Key, std::map<TokenId, TokenId>> maps_;
};

// Vocabulary, language membership and alignment travel together.
struct VocabularyAsset {
  Vocabulary vocab;
  LanguageTokenMap languages;
  AlignmentMap alignment;
};

const std::vector<TokenId>& tokens_of_language(const LanguageTokenMap& map, const LanguageId& lang);

std::optional<TokenId> parallel_token(const AlignmentMap& align, TokenId token, const LanguageId& from,
                                      const LanguageId& to);

// Whitespace tokenizer. Surface forms unknown to the vocabulary or not
// belonging to `lang` map to UNK.
std::vector<TokenId> tokenize(std::string_view text, const LanguageId& lang, const VocabularyAsset& asset);
std::string detokenize(const std::vector<TokenId>& ids, const Vocabulary& vocab);

// Word spans [start, start+len) in a token sequence, using "##" pieces.
std::vector<std::pair<std::size_t, std::size_t>> word_spans(const std::vector<TokenId>& ids, const Vocabulary& vocab);

nlohmann::json to_json(const VocabularyAsset& asset);
VocabularyAsset vocabulary_from_json(const nlohmann::json& j);

}  // namespace corelab
