#include "corelab/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "corelab/errors.hpp"
#include "corelab/rng.hpp"

namespace corelab {

namespace fs = std::filesystem;

// ---- configuration ----------------------------------------------------------

ExperimentConfig ExperimentConfig::defaults(std::uint64_t seed) {
  ExperimentConfig c;
  c.seed = seed;
  c.pretrain.max_steps = 2000;
  c.pretrain.lr_scale = 100.0;
  c.pretrain.seed = seed;
  c.train.max_steps = 1000;
  c.train.lr_scale = 100.0;
  c.train.seed = seed + 1000;
  for (const auto& l : c.languages) c.core.languages.push_back(l.id);
  c.core.anchor = c.languages.front().id;
  c.core.n = 10;
  c.core.pool_size = 10;
  c.core.pool_mode = core::PoolMode::aligned_class;
  c.core.bridge_mode = core::BridgeMode::all_languages;
  c.core.pool_refresh_every = 50;
  return c;
}

void ExperimentConfig::validate() const {
  if (world.n_entities == 0 || world.n_attributes == 0) throw ConfigError("world needs entities and attributes");
  if (languages.size() != 4) throw ConfigError("the controlled split needs exactly four languages");
  if (!(replay_fraction >= 0.0)) throw ConfigError("replay_fraction must be non-negative");
  if (n_grid.empty()) throw ConfigError("n_grid must name at least one n");
  for (std::size_t n : n_grid)
    if (n == 0) throw ConfigError("n must be positive");
  if (eval.max_new == 0) throw ConfigError("eval.max_new must be positive");
  for (const auto& s : eval.suites)
    if (!known_suites().count(s)) throw ConfigError("unknown suite '" + s + "'");
  pretrain.validate();
  train.validate();
  core.validate();
}

namespace {

nlohmann::json to_json(const LanguageSpec& l) {
  return {{"id", l.id}, {"script", to_string(l.script)}, {"typology", to_string(l.typology)}};
}

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json langs = nlohmann::json::array();
  for (const auto& l : c.languages) langs.push_back(to_json(l));
  return {{"seed", c.seed},
          {"world",
           {{"n_entities", c.world.n_entities},
            {"n_attributes", c.world.n_attributes},
            {"n_values", c.world.n_values},
            {"n_background_entities", c.world.n_background_entities},
            {"multi_token_fraction", c.world.multi_token_fraction}}},
          {"ontology",
           {{"n_concepts", c.ontology.n_concepts},
            {"n_instances", c.ontology.n_instances},
            {"n_properties", c.ontology.n_properties}}},
          {"languages", langs},
          {"model", to_json(c.model)},
          {"pretrain", to_json(c.pretrain)},
          {"train", to_json(c.train)},
          {"replay_fraction", c.replay_fraction},
          {"core", core::to_json(c.core)},
          {"n_grid", c.n_grid},
          {"eval",
           {{"suites", c.eval.suites},
            {"max_new", c.eval.max_new},
            {"rank_items", c.eval.rank_items},
            {"inherit_language", c.eval.inherit_language}}}};
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  try {
    ExperimentConfig c = ExperimentConfig::defaults(j.value("seed", std::uint64_t{1}));
    if (j.contains("world")) {
      const auto& w = j.at("world");
      read_field(w, "n_entities", c.world.n_entities);
      read_field(w, "n_attributes", c.world.n_attributes);
      read_field(w, "n_values", c.world.n_values);
      read_field(w, "n_background_entities", c.world.n_background_entities);
      read_field(w, "multi_token_fraction", c.world.multi_token_fraction);
    }
    if (j.contains("ontology")) {
      const auto& o = j.at("ontology");
      read_field(o, "n_concepts", c.ontology.n_concepts);
      read_field(o, "n_instances", c.ontology.n_instances);
      read_field(o, "n_properties", c.ontology.n_properties);
    }
    if (j.contains("languages")) {
      c.languages.clear();
      for (const auto& l : j.at("languages")) {
        c.languages.push_back({l.at("id").get<std::string>(), script_from_string(l.at("script").get<std::string>()),
                               typology_from_string(l.at("typology").get<std::string>())});
      }
      c.core.languages.clear();
      for (const auto& l : c.languages) c.core.languages.push_back(l.id);
      if (!c.languages.empty()) c.core.anchor = c.languages.front().id;
    }
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    auto merge_train = [](const TrainConfig& base, const nlohmann::json& patch) {
      nlohmann::json merged = to_json(base);
      merged.update(patch);
      return train_config_from_json(merged);
    };
    if (j.contains("pretrain")) c.pretrain = merge_train(c.pretrain, j.at("pretrain"));
    if (j.contains("train")) c.train = merge_train(c.train, j.at("train"));
    read_field(j, "replay_fraction", c.replay_fraction);
    if (j.contains("core")) {
      nlohmann::json merged = core::to_json(c.core);
      merged.update(j.at("core"));
      c.core = core::core_config_from_json(merged);
    }
    read_field(j, "n_grid", c.n_grid);
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      read_field(e, "suites", c.eval.suites);
      read_field(e, "max_new", c.eval.max_new);
      read_field(e, "rank_items", c.eval.rank_items);
      read_field(e, "inherit_language", c.eval.inherit_language);
    }
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
}

std::string config_hash(const ExperimentConfig& c) { return hex64(fnv1a64(to_json(c).dump())); }

// ---- dataset ----------------------------------------------------------------

namespace {

std::vector<InheritanceItem> inheritance_from_json(const nlohmann::json& questions, const LanguageId& lang) {
  std::map<std::pair<std::size_t, std::size_t>, InheritanceItem> by_key;
  for (const auto& q : questions) {
    RenderedQA r;
    r.lang = lang;
    r.tokens = q.at("tokens").get<std::vector<TokenId>>();
    r.answer = q.at("answer").get<std::vector<TokenId>>();
    const std::size_t c = q.at("concept").get<std::size_t>();
    const std::size_t p = q.at("property").get<std::size_t>();
    auto& item = by_key[{c, p}];
    item.concept_index = c;
    item.property = p;
    if (q.at("instance").is_null()) {
      item.parent = std::move(r);
    } else {
      item.instances.push_back(std::move(r));
    }
  }
  std::vector<InheritanceItem> out;
  for (auto& [key, item] : by_key) out.push_back(std::move(item));
  return out;
}

void load_inheritance(Dataset& d) {
  for (const auto& [lang, block] : d.ontology.at("rendered").items()) {
    d.inheritance[lang] = inheritance_from_json(block.at("questions"), lang);
  }
}

}  // namespace

Dataset build_dataset(const ExperimentConfig& config) {
  config.validate();
  WorldOptions opts;
  opts.multi_token_fraction = config.world.multi_token_fraction;
  const World full = generate_world(config.seed, config.world.n_entities + config.world.n_background_entities,
                                    config.world.n_attributes, config.world.n_values, opts);
  World world = full;
  world.entities.resize(config.world.n_entities);
  world.facts.clear();
  std::vector<const Fact*> background;
  for (const auto& f : full.facts) {
    if (f.entity < config.world.n_entities) {
      world.facts.push_back(f);
    } else {
      background.push_back(&f);
    }
  }
  const Ontology ontology = generate_ontology(config.seed + 1, config.ontology.n_concepts, config.ontology.n_instances,
                                              config.ontology.n_properties);
  const Lexicon lexicon(config.languages, full, &ontology);

  Dataset d;
  d.asset = std::make_shared<const VocabularyAsset>(lexicon.asset());
  d.split = make_controlled_split(world, config.languages, config.seed);
  for (const auto& f : world.facts) d.items.emplace(f.id, render_parallel(world, f, lexicon));
  for (const auto& [fid, lang] : d.split.training_assignments()) d.train.push_back(d.items.at(fid).renderings.at(lang));
  for (const Fact* f : background) {
    for (auto& [lang, r] : render_parallel(full, *f, lexicon).renderings) d.background.push_back(std::move(r));
  }
  std::vector<LanguageId> ids;
  for (const auto& l : config.languages) ids.push_back(l.id);
  d.ontology = to_json(ontology, lexicon, ids);
  load_inheritance(d);
  return d;
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os || !(os << text)) throw IoError("cannot write " + path.string());
}

void write_dataset(const Dataset& d, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_text(dir / kVocabFile, to_json(*d.asset).dump(1) + "\n");
  write_text(dir / kSplitsFile, to_json(d.split).dump(1) + "\n");
  write_text(dir / kOntologyFile, d.ontology.dump(1) + "\n");
  std::string corpus;
  for (const auto& [fid, item] : d.items)
    for (const auto& [lang, r] : item.renderings) corpus += corpus_line("eval", r, fid).dump() + "\n";
  const auto assignments = d.split.training_assignments();
  for (std::size_t i = 0; i < d.train.size(); ++i) {
    corpus += corpus_line("train", d.train[i], assignments.at(i).first).dump() + "\n";
  }
  for (const auto& r : d.background) corpus += corpus_line("background", r, 0).dump() + "\n";
  write_text(dir / kCorpusFile, corpus);
}

Dataset read_dataset(const fs::path& dir) {
  for (const char* f : {kVocabFile, kCorpusFile, kOntologyFile, kSplitsFile}) {
    if (!fs::exists(dir / f)) throw UsageError("missing " + (dir / f).string() + "; run gen first");
  }
  auto parse = [](const fs::path& p) {
    auto j = nlohmann::json::parse(read_text(p), nullptr, false);
    if (j.is_discarded()) throw DataError("malformed JSON in " + p.string());
    return j;
  };
  Dataset d;
  try {
    d.asset = std::make_shared<const VocabularyAsset>(vocabulary_from_json(parse(dir / kVocabFile)));
    d.split = split_from_json(parse(dir / kSplitsFile));
    d.ontology = parse(dir / kOntologyFile);
    load_inheritance(d);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("dataset: ") + e.what());
  }
  std::istringstream in(read_text(dir / kCorpusFile));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("kind")) throw DataError("malformed corpus line");
    RenderedQA r = rendered_from_json(j);
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "eval") {
      const auto fid = j.at("fact_id").get<std::size_t>();
      auto& item = d.items[fid];
      item.fact_id = fid;
      item.renderings[r.lang] = std::move(r);
    } else if (kind == "train") {
      d.train.push_back(std::move(r));
    } else if (kind == "background") {
      d.background.push_back(std::move(r));
    } else {
      throw DataError("unknown corpus line kind '" + kind + "'");
    }
  }
  return d;
}

// ---- training ---------------------------------------------------------------

std::vector<TrainExample> pretrain_corpus(const Dataset& d) {
  std::vector<TrainExample> out;
  for (const auto& r : d.background) out.push_back(example_from_rendered(r, d.asset->vocab));
  for (const auto& [lang, block] : d.ontology.at("rendered").items()) {
    const TokenId control = d.asset->vocab.id(Vocabulary::control_token(lang));
    for (const auto& t : block.at("training")) {
      out.push_back(make_example(control, t.at("tokens").get<std::vector<TokenId>>(),
                                 t.at("answer").get<std::vector<TokenId>>()));
    }
  }
  return out;
}

std::vector<TrainExample> stage_corpus(const ExperimentConfig& config, const Dataset& d) {
  std::vector<TrainExample> out;
  for (const auto& r : d.train) out.push_back(example_from_rendered(r, d.asset->vocab));
  const auto replay = static_cast<std::size_t>(config.replay_fraction * static_cast<double>(out.size()));
  if (replay > 0 && !d.background.empty()) {
    Rng rng(config.train.seed);
    for (std::size_t i = 0; i < replay; ++i) {
      out.push_back(example_from_rendered(d.background[rng.below(d.background.size())], d.asset->vocab));
    }
  }
  return out;
}

DecoderModel pretrain(const ExperimentConfig& config, const Dataset& d, TrainResult* log) {
  ModelConfig mc = config.model;
  mc.vocab_size = d.asset->vocab.size();
  mc.core.reset();
  DecoderModel model(mc, config.seed);
  model.attach_vocabulary(d.asset);
  TrainResult r = train(model, pretrain_corpus(d), config.pretrain, {}, log);
  if (log) *log = std::move(r);
  return model;
}

std::string variant_name(std::optional<std::size_t> n) { return n ? "core_n" + std::to_string(*n) : "baseline"; }

DecoderModel train_variant(const ExperimentConfig& config, const Dataset& d, const fs::path& pretrained,
                           std::optional<std::size_t> n, TrainResult* log) {
  std::optional<core::CoReConfig> cc;
  if (n) {
    cc = config.core;
    cc->n = *n;
    if (cc->pool_size != 0 && cc->pool_size < *n) cc->pool_size = *n;
  }
  DecoderModel model = continual_start(pretrained, d.asset, cc);
  TrainResult r = train(model, stage_corpus(config, d), config.train, {}, log);
  if (log) *log = std::move(r);
  return model;
}

// ---- evaluation -------------------------------------------------------------

const std::set<std::string>& known_suites() {
  static const std::set<std::string> s{"dil", "dol", "inherit", "rank", "similarity"};
  return s;
}

Tensor representation_bank(DecoderModel& model) {
  const std::size_t m = model.config().vocab_size;
  const std::size_t d = model.config().d_model;
  Tensor out({m, d});
  for (std::size_t t = 0; t < m; ++t) {
    Tape tape;
    const TokenId tok = static_cast<TokenId>(t);
    const Var z = model.token_representations(tape, std::span<const TokenId>(&tok, 1));
    const auto row = z.value().row(0);
    std::copy(row.begin(), row.end(), out.row(t).begin());
  }
  return out;
}

std::vector<std::pair<TokenId, TokenId>> aligned_pairs(const VocabularyAsset& asset, const LanguageId& anchor,
                                                       const LanguageId& lang) {
  std::vector<std::pair<TokenId, TokenId>> out;
  for (TokenId t : asset.languages.tokens_of(anchor)) {
    if (auto p = asset.alignment.lookup(t, anchor, lang)) out.emplace_back(t, *p);
  }
  return out;
}

double mean_conflict(const std::vector<ConflictReport>& reports) {
  if (reports.empty()) throw DomainError("no conflict reports");
  double s = 0.0;
  for (const auto& r : reports) s += r.rate;
  return s / static_cast<double>(reports.size());
}

double mean_conflict_disjoint(const std::vector<ConflictReport>& reports, const std::vector<LanguageSpec>& languages) {
  auto disjoint = [&](const LanguageId& id) {
    for (const auto& l : languages)
      if (l.id == id) return l.script == Script::disjoint;
    return false;
  };
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& r : reports) {
    if (disjoint(r.lang_a) || disjoint(r.lang_b)) {
      s += r.rate;
      ++n;
    }
  }
  if (n == 0) throw DomainError("no pair involves a disjoint-script language");
  return s / static_cast<double>(n);
}

namespace {

std::size_t fact_of(const std::string& item_id) { return std::stoul(item_id.substr(item_id.find(':') + 1)); }

std::vector<RankRecord> rank_suite(const ExperimentConfig& config, const Dataset& d, ModelClient& client,
                                   Judge& judge, DecoderModel& model) {
  const LanguageId& anchor = d.split.languages.front();
  const Tensor& bank = model.embeddings().value;
  std::vector<RankRecord> out;
  for (const auto& lang : d.split.languages) {
    if (lang == anchor) continue;
    std::size_t taken = 0;
    for (std::size_t fid : d.split.quarters.front()) {
      if (taken == config.eval.rank_items) break;
      const ParallelQAItem& item = d.items.at(fid);
      const auto& qa = item.renderings.at(anchor);
      const auto& qr = item.renderings.at(lang);
      const auto ya = client.answer(qa.tokens, anchor, anchor);
      const auto yr = client.answer(qr.tokens, lang, lang);
      if (!ya || !yr) continue;
      const auto v = judge.judge({anchor, qa.tokens, *ya, lang, qr.tokens, *yr});
      if (v != Verdict::conflict) continue;
      out.push_back(replacement_analysis(item, lang, anchor, *ya, *yr, client, judge, bank, d.asset->vocab));
      ++taken;
    }
  }
  return out;
}

}  // namespace

EvalOutputs evaluate(const ExperimentConfig& config, const Dataset& d, ModelClient& client, Judge& judge,
                     const std::vector<std::string>& suites, DecoderModel* model) {
  for (const auto& s : suites)
    if (!known_suites().count(s)) throw UsageError("unknown suite '" + s + "'");
  auto wants = [&](const char* s) { return std::find(suites.begin(), suites.end(), s) != suites.end(); };
  if ((wants("rank") || wants("similarity")) && !model) {
    throw UsageError("the rank and similarity suites need a local model");
  }
  const LanguageId& anchor = d.split.languages.front();
  EvalOutputs out;
  if (wants("dil")) {
    out.dil = run_controlled_dil(client, d.items, d.split, judge);
    std::map<LanguageId, std::map<std::size_t, bool>> correct;
    for (const auto& r : out.dil) {
      for (const auto& rec : r.records) {
        const std::size_t fid = fact_of(rec.item_id);
        correct[rec.lang_a][fid] = rec.answer_a == d.items.at(fid).renderings.at(rec.lang_a).answer;
      }
    }
    for (const auto& [lang, facts] : correct) {
      std::size_t ok = 0;
      for (const auto& [fid, c] : facts) ok += c;
      out.anchor_accuracy[lang] = static_cast<double>(ok) / static_cast<double>(facts.size());
    }
  }
  if (wants("dol")) {
    std::vector<ParallelQAItem> items;
    for (std::size_t fid : d.split.quarters.front()) items.push_back(d.items.at(fid));
    std::vector<LanguageId> targets(d.split.languages.begin() + 1, d.split.languages.end());
    out.dol = run_dol(client, items, anchor, targets, judge);
  }
  if (wants("inherit")) {
    const LanguageId lang = config.eval.inherit_language.empty() ? anchor : config.eval.inherit_language;
    auto it = d.inheritance.find(lang);
    if (it == d.inheritance.end()) throw DataError("no ontology questions in '" + lang + "'");
    out.inherit = run_inheritance(client, it->second, lang, judge);
  }
  if (wants("rank")) out.rank = rank_suite(config, d, client, judge, *model);
  if (wants("similarity")) {
    const Tensor bank = representation_bank(*model);
    for (const auto& lang : d.split.languages) {
      if (lang == anchor) continue;
      out.similarity[lang] = parallel_similarity_report(aligned_pairs(*d.asset, anchor, lang), bank);
    }
  }
  return out;
}

void write_eval(const EvalOutputs& out, const fs::path& dir, const std::string& hash) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json summary{{"config_hash", hash}};
  if (!out.dil.empty()) {
    write_text(dir / "dil.csv", conflict_csv(out.dil));
    write_text(dir / "dil.jsonl", records_jsonl(out.dil));
    summary["dil_mean"] = mean_conflict(out.dil);
    summary["anchor_accuracy"] = out.anchor_accuracy;
  }
  if (!out.dol.empty()) {
    write_text(dir / "dol.csv", conflict_csv(out.dol));
    write_text(dir / "dol.jsonl", records_jsonl(out.dol));
    summary["dol_mean"] = mean_conflict(out.dol);
  }
  if (out.inherit) {
    write_text(dir / "inherit.csv", conflict_csv({*out.inherit}));
    write_text(dir / "inherit.jsonl", records_jsonl({*out.inherit}));
    summary["inherit_rate"] = out.inherit->rate;
  }
  if (!out.rank.empty()) write_text(dir / "rank.csv", rank_csv(out.rank));
  for (const auto& [lang, rep] : out.similarity) {
    write_text(dir / ("similarity_" + lang + ".csv"), histogram_csv(rep));
    summary["similarity"][lang] = {{"mean", rep.mean}, {"median", rep.median}, {"pairs", rep.similarities.size()}};
  }
  write_text(dir / "eval_summary.json", summary.dump(1) + "\n");
}

// ---- reports ----------------------------------------------------------------

namespace {

std::vector<std::vector<std::string>> read_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(std::move(cells));
  }
  return rows;
}

struct RunData {
  std::string variant;
  fs::path dir;
  std::vector<ConflictReport> dil;
};

RunData load_run(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) throw ValidationError(dir.string() + " has no manifest.json");
  if (!fs::exists(dir / "dil.csv")) throw ValidationError(dir.string() + " has no dil.csv; run eval first");
  auto j = nlohmann::json::parse(read_text(dir / "manifest.json"), nullptr, false);
  if (j.is_discarded()) throw ValidationError("malformed manifest in " + dir.string());
  const RunManifest m = manifest_from_json(j);
  if (m.status != "ok") throw ValidationError(dir.string() + " did not finish: " + m.diagnostic);
  RunData r;
  r.dir = dir;
  r.variant = m.config.value("variant", dir.filename().string());
  r.dil = parse_conflict_csv(read_text(dir / "dil.csv"));
  return r;
}

}  // namespace

void write_report(const std::vector<fs::path>& runs, const fs::path& out) {
  if (runs.empty()) throw UsageError("report needs at least one run directory");
  std::vector<RunData> data;
  for (const auto& r : runs) data.push_back(load_run(r));

  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());

  SummaryTable table;
  for (const auto& r : data) add_summary_row(table, r.variant, r.dil);
  write_text(out / "summary.csv", summary_csv(table));

  std::string deltas = "variant,pair,rate,reference_rate,delta\n";
  const auto& ref = table.rows.front().second;
  for (const auto& [variant, values] : table.rows) {
    for (std::size_t c = 0; c < table.columns.size(); ++c) {
      if (std::isnan(values[c]) || std::isnan(ref[c])) continue;
      deltas += variant + "," + table.columns[c] + "," + format_rate(values[c]) + "," + format_rate(ref[c]) + "," +
                format_rate(values[c] - ref[c]) + "\n";
    }
  }
  write_text(out / "deltas.csv", deltas);

  std::string scatter = "variant,item_id,lang,avg_rank,fraction_replaced,outcome\n";
  std::string hist = "variant,lang,bin_lo,bin_hi,count\n";
  for (const auto& r : data) {
    if (fs::exists(r.dir / "rank.csv")) {
      const auto rows = read_csv(read_text(r.dir / "rank.csv"));
      for (std::size_t i = 1; i < rows.size(); ++i) {
        if (rows[i].size() != 7) throw ValidationError("malformed rank.csv in " + r.dir.string());
        scatter += r.variant + "," + rows[i][0] + "," + rows[i][1] + "," + rows[i][2] + "," + rows[i][3] + "," +
                   rows[i][6] + "\n";
      }
    }
    std::vector<fs::path> sims;
    for (const auto& e : fs::directory_iterator(r.dir)) {
      const std::string name = e.path().filename().string();
      if (name.rfind("similarity_", 0) == 0 && e.path().extension() == ".csv") sims.push_back(e.path());
    }
    std::sort(sims.begin(), sims.end());
    for (const auto& p : sims) {
      const std::string lang = p.stem().string().substr(std::string("similarity_").size());
      const auto rows = read_csv(read_text(p));
      for (std::size_t i = 1; i < rows.size(); ++i) {
        if (rows[i].size() != 3) throw ValidationError("malformed " + p.string());
        hist += r.variant + "," + lang + "," + rows[i][0] + "," + rows[i][1] + "," + rows[i][2] + "\n";
      }
    }
  }
  write_text(out / "scatter.csv", scatter);
  write_text(out / "histograms.csv", hist);
}

}  // namespace corelab
