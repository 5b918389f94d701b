#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "corelab/model.hpp"
#include "corelab/synthlang.hpp"

namespace corelab {

enum class Verdict { no_conflict, conflict };
const char* to_string(Verdict v);

// ---- judges ---------------------------------------------------------------

// No conflict iff the sequences are equal or either one is exactly the
// UNKNOWN-ANSWER token. Inputs are expected to be normalized already.
Verdict judge_normalized(std::span<const TokenId> a, std::span<const TokenId> b);

struct JudgeQuery {
  LanguageId lang_a;
  std::vector<TokenId> question_a;
  std::vector<TokenId> answer_a;
  LanguageId lang_b;
  std::vector<TokenId> question_b;
  std::vector<TokenId> answer_b;
};

class Judge {
 public:
  virtual ~Judge() = default;
  // nullopt marks a failed judgement (excluded from |D|).
  virtual std::optional<Verdict> judge(const JudgeQuery& q) = 0;
};

// Maps every answer token to its parallel in `canonical` (when one exists)
// and compares with judge_normalized.
class NormalizedExactMatchJudge : public Judge {
 public:
  NormalizedExactMatchJudge(std::shared_ptr<const VocabularyAsset> asset, LanguageId canonical);
  std::optional<Verdict> judge(const JudgeQuery& q) override;
  std::vector<TokenId> normalize(std::span<const TokenId> answer, const LanguageId& lang) const;

 private:
  std::shared_ptr<const VocabularyAsset> asset_;
  LanguageId canonical_;
};

// ---- model clients ----------------------------------------------------------

class ModelClient {
 public:
  virtual ~ModelClient() = default;
  // Answer to `question` (tokens of question_lang) in answer_lang;
  // nullopt when the call failed.
  virtual std::optional<std::vector<TokenId>> answer(const std::vector<TokenId>& question,
                                                     const LanguageId& question_lang,
                                                     const LanguageId& answer_lang) = 0;
  virtual bool supports_answer_language() const { return true; }
};

// Greedy decoding on a local model; the answer language is the control token.
class LocalModelClient : public ModelClient {
 public:
  LocalModelClient(DecoderModel& model, std::shared_ptr<const VocabularyAsset> asset, std::size_t max_new = 4);
  std::optional<std::vector<TokenId>> answer(const std::vector<TokenId>& question, const LanguageId& question_lang,
                                             const LanguageId& answer_lang) override;
  std::size_t calls() const { return calls_; }

 private:
  DecoderModel& model_;
  std::shared_ptr<const VocabularyAsset> asset_;
  std::size_t max_new_;
  std::size_t calls_ = 0;
};

using ScriptFn = std::function<std::optional<std::vector<TokenId>>(const std::vector<TokenId>&, const LanguageId&,
                                                                   const LanguageId&)>;

// Test double driven by a function.
class ScriptedModelClient : public ModelClient {
 public:
  explicit ScriptedModelClient(ScriptFn fn, bool supports_answer_language = true)
      : fn_(std::move(fn)), directive_(supports_answer_language) {}
  std::optional<std::vector<TokenId>> answer(const std::vector<TokenId>& question, const LanguageId& question_lang,
                                             const LanguageId& answer_lang) override {
    ++calls_;
    return fn_(question, question_lang, answer_lang);
  }
  bool supports_answer_language() const override { return directive_; }
  std::size_t calls() const { return calls_; }

 private:
  ScriptFn fn_;
  bool directive_;
  std::size_t calls_ = 0;
};

// ---- HTTP clients -----------------------------------------------------------

struct HttpConfig {
  // "http://host:port"; model requests go to <endpoint>/answer, judge
  // requests to <endpoint>/judge.
  std::string endpoint;
  std::string auth_header;  // e.g. "Authorization"; empty for none
  std::string auth_value;
  std::size_t max_attempts = 3;
  std::chrono::milliseconds backoff{200};  // doubled after every failure
  std::chrono::seconds timeout{30};

  // Reads CORELAB_EXTERNAL_ENDPOINT (and CORELAB_EXTERNAL_AUTH_HEADER /
  // CORELAB_EXTERNAL_AUTH_VALUE); nullopt when the endpoint is unset.
  static std::optional<HttpConfig> from_env();
};

// POST with retries and a response cache keyed by the request hash.
class HttpTransport {
 public:
  explicit HttpTransport(HttpConfig config);
  std::optional<nlohmann::json> post(const std::string& path, const nlohmann::json& body);
  std::size_t network_calls() const { return network_calls_; }
  std::size_t cache_size() const { return cache_.size(); }

 private:
  HttpConfig config_;
  std::map<std::uint64_t, nlohmann::json> cache_;
  std::size_t network_calls_ = 0;
};

// {"question","answer_language"} -> {"answer"}; surface strings travel on
// the wire and are tokenized in the answer language on return.
class HttpModelClient : public ModelClient {
 public:
  HttpModelClient(HttpConfig config, std::shared_ptr<const VocabularyAsset> asset);
  std::optional<std::vector<TokenId>> answer(const std::vector<TokenId>& question, const LanguageId& question_lang,
                                             const LanguageId& answer_lang) override;
  const HttpTransport& transport() const { return transport_; }

 private:
  HttpTransport transport_;
  std::shared_ptr<const VocabularyAsset> asset_;
};

// {"question_a","answer_a","question_b","answer_b"} -> {"conflict"}.
class HttpJudge : public Judge {
 public:
  HttpJudge(HttpConfig config, std::shared_ptr<const VocabularyAsset> asset);
  std::optional<Verdict> judge(const JudgeQuery& q) override;
  const HttpTransport& transport() const { return transport_; }

 private:
  HttpTransport transport_;
  std::shared_ptr<const VocabularyAsset> asset_;
};

// ---- conflict reports -------------------------------------------------------

struct AnswerPair {
  std::string item_id;
  JudgeQuery query;
  // False when producing either answer failed.
  bool answered = true;
};

struct ItemRecord {
  std::string item_id;
  LanguageId lang_a, lang_b;
  std::vector<TokenId> answer_a, answer_b;
  std::optional<Verdict> verdict;  // empty: errored
};

struct ConflictReport {
  LanguageId lang_a, lang_b;
  std::size_t n_items = 0;  // |D|, errored items excluded
  std::size_t n_conflicts = 0;
  std::size_t n_errored = 0;
  double rate = 0.0;
  std::vector<ItemRecord> records;
};

// Throws DomainError on an empty list. Errored items do not count toward
// |D|; when every item errored the rate is 0.
ConflictReport conflict_rate(const std::vector<AnswerPair>& pairs, Judge& judge);

// One report per non-anchor language, in `languages` order. Throws
// DataError when an item lacks a rendering.
std::vector<ConflictReport> run_dil(ModelClient& client, const std::vector<ParallelQAItem>& items,
                                    const LanguageId& anchor, const std::vector<LanguageId>& languages, Judge& judge);

// Anchor-language questions answered in each target language. Throws
// CapabilityError when the client has no answer-language directive.
std::vector<ConflictReport> run_dol(ModelClient& client, const std::vector<ParallelQAItem>& items,
                                    const LanguageId& anchor, const std::vector<LanguageId>& targets, Judge& judge);

struct InheritanceItem {
  std::size_t concept_index = 0;
  std::size_t property = 0;
  RenderedQA parent;
  std::vector<RenderedQA> instances;
};

std::vector<InheritanceItem> inheritance_items(const Ontology& ontology, const Lexicon& lexicon,
                                               const LanguageSpec& spec);

// Parent answer vs each instance answer, pooled over all (property, instance).
ConflictReport run_inheritance(ModelClient& client, const std::vector<InheritanceItem>& items,
                               const LanguageId& language, Judge& judge);

// Controlled-split evaluation: for each quarter s, DIL with anchor
// languages[s] over that quarter's facts. Returns the 12 ordered pairs.
// Throws DataError when a split fact has no item.
std::vector<ConflictReport> run_controlled_dil(ModelClient& client, const std::map<std::size_t, ParallelQAItem>& items,
                                               const ControlledSplit& split, Judge& judge);

// ---- ranks and replacement --------------------------------------------------

// 1-based position of anchor_token when all M tokens are sorted by cosine
// similarity to B[token], descending, ties by ascending id. Throws
// DomainError when B[token] is zero and IndexError for bad ids.
std::size_t token_rank(TokenId token, TokenId anchor_token, const Tensor& bank);

// Minimum rank over the pieces of a word.
std::size_t word_rank(std::span<const TokenId> pieces, std::span<const TokenId> anchor_pieces, const Tensor& bank);

enum class ReplacementOutcome { no_conflict, exhausted };
const char* to_string(ReplacementOutcome o);

struct RankRecord {
  std::string item_id;
  LanguageId lang;
  std::vector<std::size_t> word_ranks;  // per word, question order
  std::vector<std::size_t> replaced;    // word indices in replacement order
  double avg_rank_replaced = 0.0;
  double fraction_replaced = 0.0;  // replaced tokens / question tokens
  std::size_t model_calls = 0;
  ReplacementOutcome outcome = ReplacementOutcome::no_conflict;
};

// Words of the non-anchor question, farthest first, are swapped for their
// anchor counterparts until the answer stops conflicting with
// anchor_answer. Once every word is swapped the prompt is the anchor
// question asked in the anchor language. `initial_answer` is the answer to
// the untouched question; no model call is spent on it.
RankRecord replacement_analysis(const ParallelQAItem& item, const LanguageId& non_anchor, const LanguageId& anchor,
                                const std::vector<TokenId>& anchor_answer,
                                const std::vector<TokenId>& initial_answer, ModelClient& client, Judge& judge,
                                const Tensor& bank, const Vocabulary& vocab);

// ---- similarity -------------------------------------------------------------

struct SimilarityReport {
  std::vector<double> similarities;
  std::vector<std::size_t> histogram;  // 20 bins over [-1, 1]
  double mean = 0.0;
  double median = 0.0;
};

inline constexpr std::size_t kHistogramBins = 20;

// Throws DomainError on an empty list.
SimilarityReport parallel_similarity_report(const std::vector<std::pair<TokenId, TokenId>>& pairs,
                                            const Tensor& bank);

// ---- report files -----------------------------------------------------------

std::string conflict_csv(const std::vector<ConflictReport>& reports);
std::string records_jsonl(const std::vector<ConflictReport>& reports);
std::string rank_csv(const std::vector<RankRecord>& records);
std::string histogram_csv(const SimilarityReport& report);

// Rows are variants, columns the ordered pairs "a->b" in first-seen order.
struct SummaryTable {
  std::vector<std::string> columns;
  std::vector<std::pair<std::string, std::vector<double>>> rows;
};
void add_summary_row(SummaryTable& table, const std::string& variant, const std::vector<ConflictReport>& reports);
std::string summary_csv(const SummaryTable& table);

// Reads a conflict CSV back; throws ValidationError on malformed input.
std::vector<ConflictReport> parse_conflict_csv(const std::string& text);

std::string format_rate(double v);

}  // namespace corelab
