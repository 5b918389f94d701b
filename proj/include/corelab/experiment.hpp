#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "corelab/evalkit.hpp"
#include "corelab/training.hpp"

namespace corelab {

struct WorldParams {
  std::size_t n_entities = 512;
  std::size_t n_attributes = 4;
  std::size_t n_values = 16;
  // Extra entities whose facts are rendered in every language and used
  // only for multilingual pretraining.
  std::size_t n_background_entities = 256;
  double multi_token_fraction = 0.25;
};

struct OntologyParams {
  std::size_t n_concepts = 8;
  std::size_t n_instances = 3;
  std::size_t n_properties = 2;
};

struct EvalParams {
  std::vector<std::string> suites{"dil", "dol", "inherit", "rank", "similarity"};
  std::size_t max_new = 4;
  // Conflicting items fed to the replacement analysis per language.
  std::size_t rank_items = 64;
  // Inheritance language; empty uses the anchor.
  LanguageId inherit_language;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  WorldParams world;
  OntologyParams ontology;
  std::vector<LanguageSpec> languages = default_languages();
  ModelConfig model;
  // Stage A: multilingual pretraining on the background facts.
  TrainConfig pretrain;
  // Stage B: controlled-split training, identical for every variant.
  TrainConfig train;
  // Background examples mixed into stage B, as a fraction of its size.
  double replay_fraction = 1.0;
  core::CoReConfig core;
  std::vector<std::size_t> n_grid{10};
  EvalParams eval;

  // Defaults with every sub-seed derived from `seed`.
  static ExperimentConfig defaults(std::uint64_t seed = 1);
  // Throws ConfigError.
  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& c);
// Missing fields keep their defaults; sub-seeds default to ones derived
// from "seed".
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
std::string config_hash(const ExperimentConfig& c);

// Everything the pipeline reads after generation.
struct Dataset {
  std::shared_ptr<const VocabularyAsset> asset;
  ControlledSplit split;
  std::map<std::size_t, ParallelQAItem> items;
  // Controlled-split training renderings, in assignment order.
  std::vector<RenderedQA> train;
  std::vector<RenderedQA> background;
  std::map<LanguageId, std::vector<InheritanceItem>> inheritance;
  nlohmann::json ontology;
};

Dataset build_dataset(const ExperimentConfig& config);

inline constexpr const char* kVocabFile = "vocab.json";
inline constexpr const char* kCorpusFile = "corpus.jsonl";
inline constexpr const char* kOntologyFile = "ontology.json";
inline constexpr const char* kSplitsFile = "splits.json";

// Writes the four dataset files. Throws IoError.
void write_dataset(const Dataset& data, const std::filesystem::path& dir);
// Throws UsageError when the files are missing and DataError when they
// are malformed.
Dataset read_dataset(const std::filesystem::path& dir);

// Stage A corpus: background facts and ontology training in all languages.
std::vector<TrainExample> pretrain_corpus(const Dataset& data);
// Stage B corpus: the controlled split plus sampled background replay.
std::vector<TrainExample> stage_corpus(const ExperimentConfig& config, const Dataset& data);

DecoderModel pretrain(const ExperimentConfig& config, const Dataset& data, TrainResult* log = nullptr);

// "baseline" or "core_n<N>".
std::string variant_name(std::optional<std::size_t> n);

// Stage B from a pretrained checkpoint; CoRe is attached with n when given.
DecoderModel train_variant(const ExperimentConfig& config, const Dataset& data,
                           const std::filesystem::path& pretrained, std::optional<std::size_t> n,
                           TrainResult* log = nullptr);

struct EvalOutputs {
  std::vector<ConflictReport> dil;  // 12 ordered pairs for 4 languages
  std::vector<ConflictReport> dol;
  std::optional<ConflictReport> inherit;
  std::vector<RankRecord> rank;
  // Keyed by non-anchor language, over representation-bank cosines.
  std::map<LanguageId, SimilarityReport> similarity;
  // Anchor answers that match the trained answer, per quarter language.
  std::map<LanguageId, double> anchor_accuracy;
};

const std::set<std::string>& known_suites();

// `model` is needed for the rank and similarity suites; throws
// UsageError for unknown suites or a missing model.
EvalOutputs evaluate(const ExperimentConfig& config, const Dataset& data, ModelClient& client, Judge& judge,
                     const std::vector<std::string>& suites, DecoderModel* model);

// Per-token representations fed to the transformer stack (after CoRe when
// enabled), one row per vocabulary entry.
Tensor representation_bank(DecoderModel& model);

// (anchor token, parallel token in lang) for every aligned pair.
std::vector<std::pair<TokenId, TokenId>> aligned_pairs(const VocabularyAsset& asset, const LanguageId& anchor,
                                                       const LanguageId& lang);

double mean_conflict(const std::vector<ConflictReport>& reports);
// Mean over pairs that involve a disjoint-script language.
double mean_conflict_disjoint(const std::vector<ConflictReport>& reports, const std::vector<LanguageSpec>& languages);

// Files: dil.csv, dil.jsonl, dol.csv, dol.jsonl, inherit.csv,
// inherit.jsonl, rank.csv, similarity_<lang>.csv, eval_summary.json.
void write_eval(const EvalOutputs& out, const std::filesystem::path& dir, const std::string& hash);

// Comparison over run directories (each with manifest.json and dil.csv):
// summary.csv, deltas.csv, scatter.csv, histograms.csv. Throws UsageError
// on an empty list and ValidationError on an incomplete run directory.
void write_report(const std::vector<std::filesystem::path>& runs, const std::filesystem::path& out);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace corelab
