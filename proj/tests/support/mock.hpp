#pragma once

// Scripted model over a known world: answers with the gold value in the
// requested language unless a fault rule says otherwise.

#include <functional>
#include <map>
#include <optional>

#include "corelab/evalkit.hpp"
#include "corelab/synthlang.hpp"

namespace mock {

using namespace corelab;

enum class Reply { gold, wrong, unknown, fail };

// (fact id, question language, answer language) -> reply
using FaultFn = std::function<Reply(std::size_t, const LanguageId&, const LanguageId&)>;

class WorldOracle {
 public:
  WorldOracle(const World& world, const Lexicon& lexicon) : world_(world), lexicon_(lexicon) {
    for (const auto& f : world.facts) {
      const auto item = render_parallel(world, f, lexicon);
      for (const auto& [lang, r] : item.renderings) by_question_[{lang, r.tokens}] = f.id;
    }
  }

  std::optional<std::size_t> fact_of(const std::vector<TokenId>& q, const LanguageId& lang) const {
    auto it = by_question_.find({lang, q});
    if (it == by_question_.end()) return std::nullopt;
    return it->second;
  }

  TokenId value_token(std::size_t value, const LanguageId& lang) const {
    return lexicon_.token(world_.values.at(value), lexicon_.spec(lang));
  }

  ScriptFn script(FaultFn fault) const {
    return [this, fault](const std::vector<TokenId>& q, const LanguageId& ql,
                         const LanguageId& al) -> std::optional<std::vector<TokenId>> {
      const auto f = fact_of(q, ql);
      if (!f) return std::vector<TokenId>{Vocabulary::kUnknownAnswer};
      const std::size_t value = world_.facts.at(*f).value;
      switch (fault(*f, ql, al)) {
        case Reply::gold: return std::vector<TokenId>{value_token(value, al)};
        case Reply::wrong: return std::vector<TokenId>{value_token((value + 1) % world_.values.size(), al)};
        case Reply::unknown: return std::vector<TokenId>{Vocabulary::kUnknownAnswer};
        case Reply::fail: return std::nullopt;
      }
      return std::nullopt;
    };
  }

 private:
  const World& world_;
  const Lexicon& lexicon_;
  std::map<std::pair<LanguageId, std::vector<TokenId>>, std::size_t> by_question_;
};

inline Reply always_gold(std::size_t, const LanguageId&, const LanguageId&) { return Reply::gold; }

}  // namespace mock
