#include "corelab/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numeric>
#include <sstream>
#include <thread>

#include <httplib.h>

#include "corelab/errors.hpp"
#include "corelab/rng.hpp"

namespace corelab {

const char* to_string(Verdict v) { return v == Verdict::conflict ? "conflict" : "no_conflict"; }

const char* to_string(ReplacementOutcome o) { return o == ReplacementOutcome::no_conflict ? "no_conflict" : "exhausted"; }

std::string format_rate(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

// ---- judges ---------------------------------------------------------------

Verdict judge_normalized(std::span<const TokenId> a, std::span<const TokenId> b) {
  auto unknown = [](std::span<const TokenId> x) { return x.size() == 1 && x[0] == Vocabulary::kUnknownAnswer; };
  if (unknown(a) || unknown(b)) return Verdict::no_conflict;
  return std::equal(a.begin(), a.end(), b.begin(), b.end()) ? Verdict::no_conflict : Verdict::conflict;
}

NormalizedExactMatchJudge::NormalizedExactMatchJudge(std::shared_ptr<const VocabularyAsset> asset,
                                                     LanguageId canonical)
    : asset_(std::move(asset)), canonical_(std::move(canonical)) {}

std::vector<TokenId> NormalizedExactMatchJudge::normalize(std::span<const TokenId> answer,
                                                          const LanguageId& lang) const {
  std::vector<TokenId> out;
  out.reserve(answer.size());
  for (TokenId t : answer) {
    std::optional<TokenId> mapped;
    if (lang != canonical_ && !asset_->vocab.is_reserved(t)) mapped = asset_->alignment.lookup(t, lang, canonical_);
    out.push_back(mapped.value_or(t));
  }
  return out;
}

std::optional<Verdict> NormalizedExactMatchJudge::judge(const JudgeQuery& q) {
  return judge_normalized(normalize(q.answer_a, q.lang_a), normalize(q.answer_b, q.lang_b));
}

// ---- model clients ----------------------------------------------------------

LocalModelClient::LocalModelClient(DecoderModel& model, std::shared_ptr<const VocabularyAsset> asset,
                                   std::size_t max_new)
    : model_(model), asset_(std::move(asset)), max_new_(max_new) {}

std::optional<std::vector<TokenId>> LocalModelClient::answer(const std::vector<TokenId>& question,
                                                             const LanguageId&, const LanguageId& answer_lang) {
  const auto control = asset_->vocab.find(Vocabulary::control_token(answer_lang));
  if (!control) throw CapabilityError("no control token for answer language '" + answer_lang + "'");
  ++calls_;
  return corelab::answer(model_, *control, question, max_new_);
}

// ---- HTTP -------------------------------------------------------------------

std::optional<HttpConfig> HttpConfig::from_env() {
  const char* endpoint = std::getenv("CORELAB_EXTERNAL_ENDPOINT");
  if (!endpoint || !*endpoint) return std::nullopt;
  HttpConfig c;
  c.endpoint = endpoint;
  if (const char* h = std::getenv("CORELAB_EXTERNAL_AUTH_HEADER")) c.auth_header = h;
  if (const char* v = std::getenv("CORELAB_EXTERNAL_AUTH_VALUE")) c.auth_value = v;
  return c;
}

HttpTransport::HttpTransport(HttpConfig config) : config_(std::move(config)) {
  if (config_.endpoint.empty()) throw ConfigError("external endpoint is not configured");
  if (config_.max_attempts == 0) throw ConfigError("max_attempts must be at least 1");
}

std::optional<nlohmann::json> HttpTransport::post(const std::string& path, const nlohmann::json& body) {
  const std::string payload = body.dump();
  const std::uint64_t key = fnv1a64(payload, fnv1a64(path));
  if (auto it = cache_.find(key); it != cache_.end()) return it->second;

  // Split "scheme://host:port/base" into the client address and a path prefix.
  std::string address = config_.endpoint;
  std::string prefix;
  const auto scheme = address.find("://");
  const auto slash = address.find('/', scheme == std::string::npos ? 0 : scheme + 3);
  if (slash != std::string::npos) {
    prefix = address.substr(slash);
    address.resize(slash);
  }
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();

  httplib::Client client(address);
  client.set_connection_timeout(config_.timeout);
  client.set_read_timeout(config_.timeout);
  client.set_write_timeout(config_.timeout);
  httplib::Headers headers;
  if (!config_.auth_header.empty()) headers.emplace(config_.auth_header, config_.auth_value);

  auto delay = config_.backoff;
  for (std::size_t attempt = 0; attempt < config_.max_attempts; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(delay);
      delay *= 2;
    }
    ++network_calls_;
    auto res = client.Post(prefix + path, headers, payload, "application/json");
    if (!res || res->status != 200) continue;
    auto parsed = nlohmann::json::parse(res->body, nullptr, false);
    if (parsed.is_discarded() || !parsed.is_object()) continue;
    cache_.emplace(key, parsed);
    return parsed;
  }
  return std::nullopt;
}

HttpModelClient::HttpModelClient(HttpConfig config, std::shared_ptr<const VocabularyAsset> asset)
    : transport_(std::move(config)), asset_(std::move(asset)) {}

std::optional<std::vector<TokenId>> HttpModelClient::answer(const std::vector<TokenId>& question, const LanguageId&,
                                                            const LanguageId& answer_lang) {
  const auto res = transport_.post(
      "/answer", {{"question", detokenize(question, asset_->vocab)}, {"answer_language", answer_lang}});
  if (!res || !res->contains("answer") || !res->at("answer").is_string()) return std::nullopt;
  return tokenize(res->at("answer").get<std::string>(), answer_lang, *asset_);
}

HttpJudge::HttpJudge(HttpConfig config, std::shared_ptr<const VocabularyAsset> asset)
    : transport_(std::move(config)), asset_(std::move(asset)) {}

std::optional<Verdict> HttpJudge::judge(const JudgeQuery& q) {
  const auto& v = asset_->vocab;
  const auto res = transport_.post("/judge", {{"question_a", detokenize(q.question_a, v)},
                                              {"answer_a", detokenize(q.answer_a, v)},
                                              {"question_b", detokenize(q.question_b, v)},
                                              {"answer_b", detokenize(q.answer_b, v)}});
  if (!res || !res->contains("conflict") || !res->at("conflict").is_boolean()) return std::nullopt;
  return res->at("conflict").get<bool>() ? Verdict::conflict : Verdict::no_conflict;
}

// ---- conflict reports -------------------------------------------------------

ConflictReport conflict_rate(const std::vector<AnswerPair>& pairs, Judge& judge) {
  if (pairs.empty()) throw DomainError("conflict_rate needs at least one answer pair");
  ConflictReport r;
  r.lang_a = pairs.front().query.lang_a;
  r.lang_b = pairs.front().query.lang_b;
  for (const auto& p : pairs) {
    ItemRecord rec{p.item_id, p.query.lang_a, p.query.lang_b, p.query.answer_a, p.query.answer_b, std::nullopt};
    if (p.answered) rec.verdict = judge.judge(p.query);
    if (!rec.verdict) {
      ++r.n_errored;
    } else {
      ++r.n_items;
      if (*rec.verdict == Verdict::conflict) ++r.n_conflicts;
    }
    r.records.push_back(std::move(rec));
  }
  r.rate = r.n_items == 0 ? 0.0 : static_cast<double>(r.n_conflicts) / static_cast<double>(r.n_items);
  return r;
}

namespace {

std::string fact_item_id(std::size_t fact_id) { return "fact:" + std::to_string(fact_id); }

AnswerPair make_pair(std::string id, const LanguageId& la, const RenderedQA& qa,
                     const std::optional<std::vector<TokenId>>& ya, const LanguageId& lb, const RenderedQA& qb,
                     const std::optional<std::vector<TokenId>>& yb) {
  AnswerPair p;
  p.item_id = std::move(id);
  p.query.lang_a = la;
  p.query.question_a = qa.tokens;
  p.query.answer_a = ya.value_or(std::vector<TokenId>{});
  p.query.lang_b = lb;
  p.query.question_b = qb.tokens;
  p.query.answer_b = yb.value_or(std::vector<TokenId>{});
  p.answered = ya.has_value() && yb.has_value();
  return p;
}

const RenderedQA& rendering(const ParallelQAItem& item, const LanguageId& lang) {
  auto it = item.renderings.find(lang);
  if (it == item.renderings.end()) {
    throw DataError("item " + fact_item_id(item.fact_id) + " has no rendering in '" + lang + "'");
  }
  return it->second;
}

}  // namespace

std::vector<ConflictReport> run_dil(ModelClient& client, const std::vector<ParallelQAItem>& items,
                                    const LanguageId& anchor, const std::vector<LanguageId>& languages, Judge& judge) {
  std::vector<LanguageId> others;
  for (const auto& l : languages)
    if (l != anchor) others.push_back(l);
  if (others.empty()) throw DataError("DIL needs the anchor and at least one other language");
  for (const auto& item : items) {
    rendering(item, anchor);
    for (const auto& l : others) rendering(item, l);
  }
  std::vector<std::vector<AnswerPair>> pairs(others.size());
  for (const auto& item : items) {
    const RenderedQA& qa = rendering(item, anchor);
    const auto ya = client.answer(qa.tokens, anchor, anchor);
    for (std::size_t k = 0; k < others.size(); ++k) {
      const RenderedQA& qb = rendering(item, others[k]);
      const auto yb = client.answer(qb.tokens, others[k], others[k]);
      pairs[k].push_back(make_pair(fact_item_id(item.fact_id), anchor, qa, ya, others[k], qb, yb));
    }
  }
  std::vector<ConflictReport> out;
  for (std::size_t k = 0; k < others.size(); ++k) out.push_back(conflict_rate(pairs[k], judge));
  return out;
}

std::vector<ConflictReport> run_dol(ModelClient& client, const std::vector<ParallelQAItem>& items,
                                    const LanguageId& anchor, const std::vector<LanguageId>& targets, Judge& judge) {
  if (!client.supports_answer_language()) throw CapabilityError("model client has no answer-language directive");
  for (const auto& item : items) rendering(item, anchor);
  std::vector<std::vector<AnswerPair>> pairs(targets.size());
  for (const auto& item : items) {
    const RenderedQA& qa = rendering(item, anchor);
    const auto ya = client.answer(qa.tokens, anchor, anchor);
    for (std::size_t k = 0; k < targets.size(); ++k) {
      const auto yb = targets[k] == anchor ? ya : client.answer(qa.tokens, anchor, targets[k]);
      pairs[k].push_back(make_pair(fact_item_id(item.fact_id), anchor, qa, ya, targets[k], qa, yb));
    }
  }
  std::vector<ConflictReport> out;
  for (auto& p : pairs) out.push_back(conflict_rate(p, judge));
  return out;
}

std::vector<InheritanceItem> inheritance_items(const Ontology& ontology, const Lexicon& lexicon,
                                               const LanguageSpec& spec) {
  std::map<std::pair<std::size_t, std::size_t>, InheritanceItem> by_key;
  for (const auto& q : ontology.questions) {
    auto& item = by_key[{q.concept_index, q.property}];
    item.concept_index = q.concept_index;
    item.property = q.property;
    if (q.instance) {
      item.instances.push_back(render(q.qa, spec, lexicon));
    } else {
      item.parent = render(q.qa, spec, lexicon);
    }
  }
  std::vector<InheritanceItem> out;
  for (auto& [key, item] : by_key) out.push_back(std::move(item));
  return out;
}

ConflictReport run_inheritance(ModelClient& client, const std::vector<InheritanceItem>& items,
                               const LanguageId& language, Judge& judge) {
  std::vector<AnswerPair> pairs;
  for (const auto& item : items) {
    const auto yp = client.answer(item.parent.tokens, language, language);
    for (std::size_t i = 0; i < item.instances.size(); ++i) {
      const auto yi = client.answer(item.instances[i].tokens, language, language);
      const std::string id = "concept:" + std::to_string(item.concept_index) + "/property:" +
                             std::to_string(item.property) + "/instance:" + std::to_string(i);
      pairs.push_back(make_pair(id, language, item.parent, yp, language, item.instances[i], yi));
    }
  }
  if (pairs.empty()) throw DomainError("no inheritance questions to evaluate");
  return conflict_rate(pairs, judge);
}

std::vector<ConflictReport> run_controlled_dil(ModelClient& client, const std::map<std::size_t, ParallelQAItem>& items,
                                               const ControlledSplit& split, Judge& judge) {
  std::vector<ConflictReport> out;
  for (std::size_t s = 0; s < split.quarters.size(); ++s) {
    std::vector<ParallelQAItem> quarter;
    for (std::size_t id : split.quarters[s]) {
      auto it = items.find(id);
      if (it == items.end()) throw DataError("split references unknown fact " + std::to_string(id));
      quarter.push_back(it->second);
    }
    auto reports = run_dil(client, quarter, split.anchor_of(s), split.languages, judge);
    for (auto& r : reports) out.push_back(std::move(r));
  }
  return out;
}

// ---- ranks and replacement --------------------------------------------------

std::size_t token_rank(TokenId token, TokenId anchor_token, const Tensor& bank) {
  const std::size_t m = bank.rows();
  for (TokenId t : {token, anchor_token}) {
    if (t < 0 || static_cast<std::size_t>(t) >= m) throw IndexError("token id " + std::to_string(t) + " out of range");
  }
  const auto q = bank.row(static_cast<std::size_t>(token));
  const double nq = kernels::norm(q);
  if (nq == 0.0) throw DomainError("token " + std::to_string(token) + " has a zero embedding");
  auto sim = [&](std::size_t j) {
    const auto b = bank.row(j);
    const double nb = kernels::norm(b);
    return nb == 0.0 ? 0.0 : kernels::dot(q, b) / (nq * nb);
  };
  const std::size_t a = static_cast<std::size_t>(anchor_token);
  const double sa = sim(a);
  std::size_t rank = 1;
  for (std::size_t j = 0; j < m; ++j) {
    if (j == a) continue;
    const double sj = sim(j);
    if (sj > sa || (sj == sa && j < a)) ++rank;
  }
  return rank;
}

std::size_t word_rank(std::span<const TokenId> pieces, std::span<const TokenId> anchor_pieces, const Tensor& bank) {
  if (pieces.empty() || pieces.size() != anchor_pieces.size()) {
    throw DimensionError("word_rank: a word and its anchor counterpart need the same nonzero piece count");
  }
  std::size_t best = bank.rows();
  for (std::size_t i = 0; i < pieces.size(); ++i) best = std::min(best, token_rank(pieces[i], anchor_pieces[i], bank));
  return best;
}

RankRecord replacement_analysis(const ParallelQAItem& item, const LanguageId& non_anchor, const LanguageId& anchor,
                                const std::vector<TokenId>& anchor_answer,
                                const std::vector<TokenId>& initial_answer, ModelClient& client, Judge& judge,
                                const Tensor& bank, const Vocabulary& vocab) {
  const RenderedQA& a = rendering(item, anchor);
  const RenderedQA& r = rendering(item, non_anchor);
  RankRecord rec;
  rec.item_id = fact_item_id(item.fact_id);
  rec.lang = non_anchor;

  std::map<std::size_t, std::size_t> to_anchor(r.align.begin(), r.align.end());
  const auto spans = word_spans(r.tokens, vocab);
  std::vector<std::vector<TokenId>> anchor_pieces(spans.size());
  for (std::size_t w = 0; w < spans.size(); ++w) {
    std::vector<TokenId> own;
    for (std::size_t p = spans[w].first; p < spans[w].first + spans[w].second; ++p) {
      auto it = to_anchor.find(p);
      if (it == to_anchor.end() || it->second >= a.tokens.size()) {
        throw DataError("alignment does not cover position " + std::to_string(p) + " of " + rec.item_id);
      }
      own.push_back(r.tokens[p]);
      anchor_pieces[w].push_back(a.tokens[it->second]);
    }
    rec.word_ranks.push_back(word_rank(own, anchor_pieces[w], bank));
  }

  auto verdict = [&](const LanguageId& lang, const std::vector<TokenId>& question,
                     const std::optional<std::vector<TokenId>>& y) {
    if (!y) return Verdict::conflict;
    JudgeQuery q{anchor, a.tokens, anchor_answer, lang, question, *y};
    return judge.judge(q).value_or(Verdict::conflict);
  };
  if (verdict(non_anchor, r.tokens, initial_answer) == Verdict::no_conflict) return rec;

  std::vector<std::size_t> order(spans.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return rec.word_ranks[x] > rec.word_ranks[y]; });

  std::vector<TokenId> current = r.tokens;
  std::size_t replaced_tokens = 0;
  double rank_sum = 0.0;
  rec.outcome = ReplacementOutcome::exhausted;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const std::size_t w = order[k];
    for (std::size_t i = 0; i < spans[w].second; ++i) current[spans[w].first + i] = anchor_pieces[w][i];
    replaced_tokens += spans[w].second;
    rank_sum += static_cast<double>(rec.word_ranks[w]);
    rec.replaced.push_back(w);
    const bool full = k + 1 == order.size();
    const LanguageId& lang = full ? anchor : non_anchor;
    const std::vector<TokenId>& question = full ? a.tokens : current;
    ++rec.model_calls;
    const auto y = client.answer(question, lang, lang);
    if (verdict(lang, question, y) == Verdict::no_conflict) {
      rec.outcome = ReplacementOutcome::no_conflict;
      break;
    }
  }
  rec.avg_rank_replaced = rank_sum / static_cast<double>(rec.replaced.size());
  rec.fraction_replaced = static_cast<double>(replaced_tokens) / static_cast<double>(r.tokens.size());
  return rec;
}

// ---- similarity -------------------------------------------------------------

SimilarityReport parallel_similarity_report(const std::vector<std::pair<TokenId, TokenId>>& pairs,
                                            const Tensor& bank) {
  if (pairs.empty()) throw DomainError("similarity report needs at least one pair");
  SimilarityReport rep;
  rep.histogram.assign(kHistogramBins, 0);
  for (const auto& [x, y] : pairs) {
    for (TokenId t : {x, y})
      if (t < 0 || static_cast<std::size_t>(t) >= bank.rows()) throw IndexError("token id out of range");
    const double s = kernels::cosine_similarity(bank.row(static_cast<std::size_t>(x)),
                                                bank.row(static_cast<std::size_t>(y)));
    rep.similarities.push_back(s);
    const auto bin = static_cast<long>(std::floor((s + 1.0) / 2.0 * static_cast<double>(kHistogramBins)));
    rep.histogram[static_cast<std::size_t>(std::clamp<long>(bin, 0, kHistogramBins - 1))]++;
  }
  rep.mean = std::accumulate(rep.similarities.begin(), rep.similarities.end(), 0.0) /
             static_cast<double>(rep.similarities.size());
  std::vector<double> sorted = rep.similarities;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  rep.median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  return rep;
}

// ---- report files -----------------------------------------------------------

std::string conflict_csv(const std::vector<ConflictReport>& reports) {
  std::string out = "lang_a,lang_b,n_items,n_conflicts,rate\n";
  for (const auto& r : reports) {
    out += r.lang_a + "," + r.lang_b + "," + std::to_string(r.n_items) + "," + std::to_string(r.n_conflicts) + "," +
           format_rate(r.rate) + "\n";
  }
  return out;
}

std::string records_jsonl(const std::vector<ConflictReport>& reports) {
  std::string out;
  for (const auto& r : reports) {
    for (const auto& rec : r.records) {
      nlohmann::json j = {{"item_id", rec.item_id}, {"lang_a", rec.lang_a},     {"lang_b", rec.lang_b},
                          {"answer_a", rec.answer_a}, {"answer_b", rec.answer_b},
                          {"verdict", rec.verdict ? to_string(*rec.verdict) : "errored"}};
      out += j.dump() + "\n";
    }
  }
  return out;
}

std::string rank_csv(const std::vector<RankRecord>& records) {
  std::string out = "item_id,lang,avg_rank,fraction_replaced,n_replaced,model_calls,outcome\n";
  for (const auto& r : records) {
    out += r.item_id + "," + r.lang + "," + format_rate(r.avg_rank_replaced) + "," + format_rate(r.fraction_replaced) +
           "," + std::to_string(r.replaced.size()) + "," + std::to_string(r.model_calls) + "," + to_string(r.outcome) +
           "\n";
  }
  return out;
}

std::string histogram_csv(const SimilarityReport& report) {
  std::string out = "bin_lo,bin_hi,count\n";
  const double width = 2.0 / static_cast<double>(kHistogramBins);
  for (std::size_t b = 0; b < report.histogram.size(); ++b) {
    const double lo = -1.0 + width * static_cast<double>(b);
    out += format_rate(lo) + "," + format_rate(lo + width) + "," + std::to_string(report.histogram[b]) + "\n";
  }
  return out;
}

void add_summary_row(SummaryTable& table, const std::string& variant, const std::vector<ConflictReport>& reports) {
  std::vector<double> row(table.columns.size(), std::nan(""));
  for (const auto& r : reports) {
    const std::string col = r.lang_a + "->" + r.lang_b;
    auto it = std::find(table.columns.begin(), table.columns.end(), col);
    if (it == table.columns.end()) {
      table.columns.push_back(col);
      for (auto& [name, values] : table.rows) values.push_back(std::nan(""));
      row.push_back(r.rate);
    } else {
      row[static_cast<std::size_t>(it - table.columns.begin())] = r.rate;
    }
  }
  table.rows.emplace_back(variant, std::move(row));
}

std::string summary_csv(const SummaryTable& table) {
  std::string out = "variant";
  for (const auto& c : table.columns) out += "," + c;
  out += "\n";
  for (const auto& [name, values] : table.rows) {
    out += name;
    for (double v : values) out += "," + (std::isnan(v) ? std::string() : format_rate(v));
    out += "\n";
  }
  return out;
}

std::vector<ConflictReport> parse_conflict_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "lang_a,lang_b,n_items,n_conflicts,rate") {
    throw ValidationError("conflict CSV has an unexpected header");
  }
  std::vector<ConflictReport> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 5) throw ValidationError("conflict CSV row has " + std::to_string(f.size()) + " fields");
    ConflictReport r;
    r.lang_a = f[0];
    r.lang_b = f[1];
    try {
      r.n_items = std::stoul(f[2]);
      r.n_conflicts = std::stoul(f[3]);
      r.rate = std::stod(f[4]);
    } catch (const std::exception&) {
      throw ValidationError("conflict CSV row is not numeric: " + line);
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace corelab
