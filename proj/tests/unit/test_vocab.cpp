#include <doctest.h>

#include <set>

#include "corelab/errors.hpp"
#include "corelab/synthlang.hpp"

using namespace corelab;

namespace {

VocabularyAsset small_asset() {
  std::vector<std::string> toks = Vocabulary::specials();
  for (const char* w : {"aa", "bb", "cc", "dd", "ee", "##ff"}) toks.emplace_back(w);
  VocabularyAsset a;
  a.vocab = Vocabulary(toks);
  // ids: aa=6 bb=7 cc=8 dd=9 ee=10 ##ff=11
  a.languages.add("L0", 6);
  a.languages.add("L0", 7);
  a.languages.add("L0", 10);
  a.languages.add("L0", 11);
  a.languages.add("L1", 8);
  a.languages.add("L1", 9);
  a.languages.add("L1", 10);
  a.languages.finalize(a.vocab);
  a.alignment.add("L0", "L1", 6, 8);
  a.alignment.add("L0", "L1", 7, 9);
  return a;
}

}  // namespace

TEST_CASE("vocabulary ids and reserved tokens") {
  const auto a = small_asset();
  CHECK(a.vocab.size() == Vocabulary::specials().size() + 6);
  CHECK(a.vocab.token(Vocabulary::kPad) == Vocabulary::specials()[0]);
  CHECK(a.vocab.is_reserved(Vocabulary::kUnknownAnswer));
  CHECK_FALSE(a.vocab.is_reserved(6));
  CHECK(a.vocab.is_continuation(11));
  CHECK(a.vocab.id("cc") == 8);
  CHECK_THROWS_AS(a.vocab.id("zz"), IndexError);
  std::vector<std::string> dup = Vocabulary::specials();
  dup.push_back("x");
  dup.push_back("x");
  CHECK_THROWS(Vocabulary(dup));
}

TEST_CASE("tokens_of_language") {
  const auto a = small_asset();
  CHECK(tokens_of_language(a.languages, "L1") == std::vector<TokenId>{8, 9, 10});
  // Shared token 10 appears in both languages.
  const auto& l0 = tokens_of_language(a.languages, "L0");
  CHECK(std::find(l0.begin(), l0.end(), 10) != l0.end());
  CHECK(a.languages.languages_of(10) == std::vector<LanguageId>{"L0", "L1"});
  CHECK_THROWS_AS(tokens_of_language(a.languages, "L9"), IndexError);
}

TEST_CASE("generated vocabulary: union of languages is every non-reserved id") {
  const World w = generate_world(2, 6, 2, 3);
  const Lexicon lex(default_languages(), w);
  const auto& a = lex.asset();
  std::set<TokenId> u;
  for (const auto& l : a.languages.languages()) {
    const auto& ids = tokens_of_language(a.languages, l);
    CHECK(std::is_sorted(ids.begin(), ids.end()));
    CHECK(std::adjacent_find(ids.begin(), ids.end()) == ids.end());
    CHECK_FALSE(ids.empty());
    u.insert(ids.begin(), ids.end());
  }
  std::set<TokenId> expect;
  for (std::size_t i = 0; i < a.vocab.size(); ++i)
    if (!a.vocab.is_reserved(static_cast<TokenId>(i))) expect.insert(static_cast<TokenId>(i));
  CHECK(u == expect);
}

TEST_CASE("tokenize and detokenize") {
  const auto a = small_asset();
  CHECK(tokenize("", "L0", a).empty());
  CHECK(tokenize("bb", "L0", a) == std::vector<TokenId>{7});
  const std::string five = "aa bb ee ##ff aa";
  const auto ids = tokenize(five, "L0", a);
  CHECK(ids == std::vector<TokenId>{6, 7, 10, 11, 6});
  CHECK(detokenize(ids, a.vocab) == five);
  // Known surface form of another language.
  CHECK(tokenize("cc", "L0", a) == std::vector<TokenId>{Vocabulary::kUnk});
  CHECK(tokenize("qq", "L0", a) == std::vector<TokenId>{Vocabulary::kUnk});
  // Reserved tokens pass through.
  CHECK(tokenize("<unknown>", "L1", a) == std::vector<TokenId>{Vocabulary::kUnknownAnswer});
}

TEST_CASE("word spans group continuation pieces") {
  const auto a = small_asset();
  const std::vector<TokenId> ids{6, 10, 11, 7};
  const auto spans = word_spans(ids, a.vocab);
  REQUIRE(spans.size() == 3);
  CHECK(spans[1] == std::pair<std::size_t, std::size_t>{1, 2});
}

TEST_CASE("parallel_token") {
  const auto a = small_asset();
  CHECK(parallel_token(a.alignment, 6, "L0", "L1") == 8);
  CHECK(parallel_token(a.alignment, 8, "L1", "L0") == 6);
  CHECK_FALSE(parallel_token(a.alignment, Vocabulary::kPad, "L0", "L1").has_value());
  CHECK_FALSE(parallel_token(a.alignment, 10, "L0", "L1").has_value());
  VocabularyAsset b = small_asset();
  CHECK_THROWS_AS(b.alignment.add("L0", "L1", 6, 9), DataError);
}

TEST_CASE("generated alignment round-trips") {
  const World w = generate_world(4, 8, 3, 4);
  const Lexicon lex(default_languages(), w);
  const auto& a = lex.asset();
  std::size_t checked = 0;
  for (const auto& [la, lb] : a.alignment.keys()) {
    for (const auto& [x, y] : a.alignment.pairs(la, lb)) {
      CHECK(parallel_token(a.alignment, x, la, lb) == y);
      CHECK(parallel_token(a.alignment, y, lb, la) == x);
      ++checked;
    }
  }
  CHECK(checked > 0);
}

TEST_CASE("vocabulary JSON layout and round trip") {
  const auto a = small_asset();
  const auto j = to_json(a);
  CHECK(j.contains("tokens"));
  CHECK(j.contains("languages"));
  CHECK(j.contains("alignments"));
  CHECK(j["alignments"].contains("L0:L1"));
  const auto back = vocabulary_from_json(j);
  CHECK(back.vocab.tokens() == a.vocab.tokens());
  CHECK(tokens_of_language(back.languages, "L1") == tokens_of_language(a.languages, "L1"));
  CHECK(parallel_token(back.alignment, 7, "L0", "L1") == 9);
  CHECK(to_json(back) == j);
}
