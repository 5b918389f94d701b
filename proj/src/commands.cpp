#include "corelab/commands.hpp"

#include <algorithm>

#include "corelab/errors.hpp"
#include "corelab/rng.hpp"

namespace corelab {

namespace fs = std::filesystem;

ExitCode exit_code_for(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e)) return ExitCode::usage;
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const ValidationError*>(&e) ||
      dynamic_cast<const ConfigError*>(&e)) {
    return ExitCode::data;
  }
  return ExitCode::runtime;
}

namespace {

void write_config(const ExperimentConfig& config, const fs::path& dir) {
  write_text(dir / "config.json", to_json(config).dump(1) + "\n");
  write_text(dir / "config.hash", config_hash(config) + "\n");
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

// Hash of the settings stage A depends on.
std::string pretrain_hash(const ExperimentConfig& c) {
  const nlohmann::json j = to_json(c);
  nlohmann::json key{{"seed", j["seed"]},         {"world", j["world"]},   {"ontology", j["ontology"]},
                     {"languages", j["languages"]}, {"model", j["model"]}, {"pretrain", j["pretrain"]}};
  return hex64(fnv1a64(key.dump()));
}

std::map<std::string, std::string> corpus_hashes(const fs::path& out) {
  std::map<std::string, std::string> h;
  for (const char* f : {kVocabFile, kCorpusFile, kOntologyFile, kSplitsFile}) h[f] = file_hash(out / f);
  return h;
}

void write_manifest(const fs::path& dir, const RunManifest& m) {
  write_text(dir / "manifest.json", to_json(m).dump(1) + "\n");
}

// Runs `body`, recording a failed manifest before rethrowing a numeric
// failure.
template <typename Body>
DecoderModel run_stage(const fs::path& dir, RunManifest manifest, Body body) {
  TrainResult log;
  try {
    DecoderModel model = body(&log);
    write_loss_csv(dir / "loss.csv", log.log);
    return model;
  } catch (const NumericError& e) {
    write_loss_csv(dir / "loss.csv", log.log);
    manifest.status = "failed";
    manifest.diagnostic = e.what();
    write_manifest(dir, manifest);
    throw;
  }
}

int variant_order(const std::string& v) {
  if (v == "baseline") return -1;
  if (v.rfind("core_n", 0) == 0) return std::stoi(v.substr(6));
  return 1 << 20;
}

void refresh_summary(const fs::path& out) {
  const fs::path runs = out / "runs";
  if (!fs::exists(runs)) return;
  std::vector<std::pair<std::string, fs::path>> done;
  for (const auto& e : fs::directory_iterator(runs)) {
    if (fs::exists(e.path() / "dil.csv")) done.emplace_back(e.path().filename().string(), e.path());
  }
  std::sort(done.begin(), done.end(), [](const auto& a, const auto& b) {
    const int oa = variant_order(a.first), ob = variant_order(b.first);
    return oa != ob ? oa < ob : a.first < b.first;
  });
  SummaryTable table;
  for (const auto& [variant, dir] : done) add_summary_row(table, variant, parse_conflict_csv(read_text(dir / "dil.csv")));
  if (!table.rows.empty()) write_text(out / "summary.csv", summary_csv(table));
}

}  // namespace

void cmd_gen(const ExperimentConfig& config, const fs::path& out) {
  const Dataset data = build_dataset(config);
  write_dataset(data, out);
  write_config(config, out);
}

std::vector<fs::path> cmd_train(const ExperimentConfig& config, const fs::path& out, const TrainRequest& request) {
  config.validate();
  const Dataset data = read_dataset(out);
  const auto hashes = corpus_hashes(out);
  const std::string hash = config_hash(config);

  const fs::path pre_dir = out / "pretrain";
  const fs::path pre_ckpt = pre_dir / "model.ckpt";
  const std::string pre_hash = pretrain_hash(config);
  bool reuse = false;
  if (fs::exists(pre_ckpt) && fs::exists(pre_dir / "manifest.json")) {
    auto j = nlohmann::json::parse(read_text(pre_dir / "manifest.json"), nullptr, false);
    reuse = !j.is_discarded() && j.value("status", "") == "ok" && j.contains("config") &&
            j["config"].value("pretrain_hash", "") == pre_hash && j.value("corpus_hashes", nlohmann::json()) == hashes;
  }
  if (!reuse) {
    ensure_dir(pre_dir);
    RunManifest m;
    m.config = {{"variant", "pretrain"}, {"config_hash", hash}, {"pretrain_hash", pre_hash},
                {"experiment", to_json(config)}};
    m.corpus_hashes = hashes;
    m.checkpoints = {{"model", "pretrain/model.ckpt"}};
    m.loss_log = "pretrain/loss.csv";
    DecoderModel model = run_stage(pre_dir, m, [&](TrainResult* log) { return pretrain(config, data, log); });
    model.save(pre_ckpt);
    write_config(config, pre_dir);
    write_manifest(pre_dir, m);
  }

  std::vector<std::optional<std::size_t>> variants;
  if (!request.core) {
    variants.emplace_back(std::nullopt);
  } else {
    for (std::size_t n : request.n.empty() ? config.n_grid : request.n) {
      if (n == 0) throw UsageError("--n must be positive");
      variants.emplace_back(n);
    }
  }
  std::vector<fs::path> dirs;
  for (const auto& n : variants) {
    const std::string name = variant_name(n);
    const fs::path dir = out / "runs" / name;
    ensure_dir(dir);
    RunManifest m;
    m.config = {{"variant", name}, {"config_hash", hash}, {"pretrain_hash", pre_hash}, {"experiment", to_json(config)}};
    if (n) m.config["n"] = *n;
    m.corpus_hashes = hashes;
    m.checkpoints = {{"pretrained", "pretrain/model.ckpt"}, {"model", "runs/" + name + "/model.ckpt"}};
    m.loss_log = "runs/" + name + "/loss.csv";
    DecoderModel model =
        run_stage(dir, m, [&](TrainResult* log) { return train_variant(config, data, pre_ckpt, n, log); });
    model.save(dir / "model.ckpt");
    write_config(config, dir);
    write_manifest(dir, m);
    dirs.push_back(dir);
  }
  return dirs;
}

std::vector<std::string> expand_suites(const std::vector<std::string>& suites) {
  if (suites.empty()) throw UsageError("no evaluation suite given");
  std::vector<std::string> out;
  for (const auto& s : suites) {
    if (s == "all") {
      for (const auto& k : {"dil", "dol", "inherit", "rank", "similarity"}) out.emplace_back(k);
    } else if (known_suites().count(s)) {
      out.push_back(s);
    } else {
      throw UsageError("unknown suite '" + s + "'");
    }
  }
  std::vector<std::string> unique;
  for (const auto& s : out)
    if (std::find(unique.begin(), unique.end(), s) == unique.end()) unique.push_back(s);
  return unique;
}

void eval_into(const ExperimentConfig& config, const Dataset& data, ModelClient& client, Judge& judge,
               const std::vector<std::string>& suites, DecoderModel* model, const fs::path& dir) {
  const EvalOutputs out = evaluate(config, data, client, judge, suites, model);
  write_eval(out, dir, config_hash(config));
}

fs::path cmd_eval(const ExperimentConfig& config, const fs::path& out, const EvalRequest& request) {
  const auto suites = expand_suites(request.suites);
  const Dataset data = read_dataset(out);
  const LanguageId& anchor = data.split.languages.front();

  std::optional<DecoderModel> model;
  if (!request.checkpoint.empty()) {
    if (!fs::exists(request.checkpoint)) throw UsageError("checkpoint " + request.checkpoint.string() + " not found");
    model.emplace(DecoderModel::load(request.checkpoint));
    model->attach_vocabulary(data.asset);
  } else if (request.client == ClientKind::local) {
    throw UsageError("--checkpoint is required for the local model");
  }

  auto external = [] {
    auto c = HttpConfig::from_env();
    if (!c) throw UsageError("CORELAB_EXTERNAL_ENDPOINT is not set");
    return *c;
  };
  std::unique_ptr<ModelClient> client;
  if (request.client == ClientKind::external) {
    client = std::make_unique<HttpModelClient>(external(), data.asset);
  } else {
    client = std::make_unique<LocalModelClient>(*model, data.asset, config.eval.max_new);
  }
  std::unique_ptr<Judge> judge;
  if (request.judge == ClientKind::external) {
    judge = std::make_unique<HttpJudge>(external(), data.asset);
  } else {
    judge = std::make_unique<NormalizedExactMatchJudge>(data.asset, anchor);
  }

  const fs::path dir = request.client == ClientKind::external ? out / "external" : request.checkpoint.parent_path();
  eval_into(config, data, *client, *judge, suites, model ? &*model : nullptr, dir);
  refresh_summary(out);
  return dir;
}

void cmd_report(const std::vector<fs::path>& runs, const fs::path& out) { write_report(runs, out); }

}  // namespace corelab
