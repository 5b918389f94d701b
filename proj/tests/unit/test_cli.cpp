#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <map>
#include <sstream>

#include "corelab/commands.hpp"
#include "corelab/errors.hpp"
#include "../support/golden.hpp"

using namespace corelab;
namespace fs = std::filesystem;

namespace {

nlohmann::json tiny_config_json(std::uint64_t seed = 5) {
  return {
      {"seed", seed},
      {"world", {{"n_entities", 8}, {"n_background_entities", 4}, {"n_attributes", 2}, {"n_values", 4}}},
      {"ontology", {{"n_concepts", 2}, {"n_instances", 2}, {"n_properties", 1}}},
      {"model", {{"d_model", 16}, {"n_layers", 1}, {"n_heads", 2}, {"max_seq_len", 16}}},
      {"pretrain", {{"max_steps", 4}, {"batch_size", 4}}},
      {"train", {{"max_steps", 3}, {"batch_size", 4}}},
      {"core", {{"n", 2}, {"pool_size", 2}, {"pool_refresh_every", 0}}},
      {"n_grid", {2}},
      {"eval", {{"rank_items", 4}, {"max_new", 3}}},
  };
}

ExperimentConfig tiny_config(std::uint64_t seed = 5) { return experiment_config_from_json(tiny_config_json(seed)); }

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("corelab_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) out.push_back(line);
  return out;
}

std::vector<std::string> fields(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) out.push_back(f);
  return out;
}

// Looks questions up in the dataset and answers with the rendering of the
// same item in the requested language. `wrong` swaps in another item.
ScriptFn dataset_script(const Dataset& d, std::function<bool(std::size_t, const LanguageId&)> wrong) {
  auto index = std::make_shared<std::map<std::pair<LanguageId, std::vector<TokenId>>, std::size_t>>();
  for (const auto& [id, item] : d.items)
    for (const auto& [lang, r] : item.renderings) (*index)[{lang, r.tokens}] = id;
  auto inherit = std::make_shared<std::map<std::pair<LanguageId, std::vector<TokenId>>, std::vector<TokenId>>>();
  for (const auto& [lang, items] : d.inheritance)
    for (const auto& it : items) {
      (*inherit)[{lang, it.parent.tokens}] = it.parent.answer;
      for (const auto& r : it.instances) (*inherit)[{lang, r.tokens}] = r.answer;
    }
  return [&d, index, inherit, wrong](const std::vector<TokenId>& q, const LanguageId& ql,
                                     const LanguageId& al) -> std::optional<std::vector<TokenId>> {
    if (auto it = inherit->find({ql, q}); it != inherit->end()) return it->second;
    auto it = index->find({ql, q});
    if (it == index->end()) return std::vector<TokenId>{Vocabulary::kUnknownAnswer};
    const auto& gold = d.items.at(it->second).renderings.at(al).answer;
    if (!wrong(it->second, ql)) return gold;
    for (const auto& [id, item] : d.items)
      if (item.renderings.at(al).answer != gold) return item.renderings.at(al).answer;
    return gold;
  };
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(CORELAB_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("gen writes the dataset deterministically") {
  const fs::path a = scratch("gen_a"), b = scratch("gen_b"), c = scratch("gen_c");
  cmd_gen(tiny_config(), a);
  cmd_gen(tiny_config(), b);
  cmd_gen(tiny_config(6), c);
  for (const char* f : {"vocab.json", "splits.json", "ontology.json", "corpus.jsonl", "config.json", "config.hash"}) {
    REQUIRE(fs::exists(a / f));
    CHECK(read_text(a / f) == read_text(b / f));
  }
  CHECK(read_text(a / "corpus.jsonl") != read_text(c / "corpus.jsonl"));
  CHECK(read_text(a / "config.hash") != read_text(c / "config.hash"));
  const Dataset d = read_dataset(a);
  CHECK(d.items.size() == 16);
  for (const auto& p : {a, b, c}) fs::remove_all(p);
}

TEST_CASE("train, eval and report") {
  const ExperimentConfig cfg = tiny_config();
  const fs::path out = scratch("pipeline");
  CHECK_THROWS_AS(cmd_train(cfg, out, {}), UsageError);
  cmd_gen(cfg, out);

  const auto base = cmd_train(cfg, out, {false, {}});
  const auto core = cmd_train(cfg, out, {true, {2}});
  REQUIRE(base.size() == 1);
  REQUIRE(core.size() == 1);
  CHECK(base[0].filename() == "baseline");
  CHECK(core[0].filename() == "core_n2");
  for (const auto& dir : {base[0], core[0]})
    for (const char* f : {"model.ckpt", "manifest.json", "loss.csv", "config.json"}) CHECK(fs::exists(dir / f));
  const auto mb = nlohmann::json::parse(read_text(base[0] / "manifest.json"));
  const auto mc = nlohmann::json::parse(read_text(core[0] / "manifest.json"));
  CHECK(mb.at("config").at("variant") == "baseline");
  CHECK(mc.at("config").at("n") == 2);
  CHECK(mb != mc);

  SUBCASE("identical invocation gives identical checkpoints") {
    const std::string before = read_text(core[0] / "model.ckpt");
    cmd_train(cfg, out, {true, {2}});
    CHECK(read_text(core[0] / "model.ckpt") == before);
  }

  SUBCASE("eval writes reports and the summary") {
    for (const auto& dir : {base[0], core[0]}) {
      EvalRequest req;
      req.suites = {"dil", "inherit"};
      req.checkpoint = dir / "model.ckpt";
      CHECK(cmd_eval(cfg, out, req) == dir);
      CHECK(fs::exists(dir / "dil.csv"));
      CHECK(fs::exists(dir / "inherit.csv"));
      CHECK(fs::exists(dir / "eval_summary.json"));
    }
    const auto summary = lines_of(read_text(out / "summary.csv"));
    REQUIRE(summary.size() == 3);
    CHECK(fields(summary[0]).size() == 13);
    CHECK(fields(summary[1])[0] == "baseline");
    CHECK(fields(summary[2])[0] == "core_n2");

    const fs::path rep = out / "report";
    cmd_report({base[0], core[0]}, rep);
    for (const char* f : {"summary.csv", "deltas.csv", "scatter.csv", "histograms.csv"}) CHECK(fs::exists(rep / f));
    const auto deltas = lines_of(read_text(rep / "deltas.csv"));
    REQUIRE(deltas.size() == 25);
    CHECK(deltas[0] == "variant,pair,rate,reference_rate,delta");
    for (std::size_t i = 1; i < deltas.size(); ++i) {
      const auto f = fields(deltas[i]);
      REQUIRE(f.size() == 5);
      const double rate = std::stod(f[2]), ref = std::stod(f[3]), delta = std::stod(f[4]);
      CHECK(std::abs(delta - (rate - ref)) < 1e-9);
      if (f[0] == "baseline") CHECK(delta == 0.0);
    }

    SUBCASE("self report has zero deltas") {
      cmd_report({core[0]}, rep);
      for (const auto& line : lines_of(read_text(rep / "deltas.csv"))) {
        const auto f = fields(line);
        if (f[0] == "variant") continue;
        CHECK(std::stod(f[4]) == 0.0);
      }
    }
  }

  SUBCASE("report errors") {
    CHECK_THROWS_AS(cmd_report({}, out / "r"), UsageError);
    // Trained but not evaluated.
    CHECK_THROWS_AS(cmd_report({base[0]}, out / "r"), ValidationError);
  }
  fs::remove_all(out);
}

TEST_CASE("mock model through eval_into") {
  const ExperimentConfig cfg = tiny_config();
  const Dataset d = build_dataset(cfg);
  const LanguageId anchor = d.split.languages.front();
  NormalizedExactMatchJudge judge(d.asset, anchor);
  const fs::path dir = scratch("mock");

  SUBCASE("DIL table") {
    ScriptedModelClient client(dataset_script(d, [](std::size_t id, const LanguageId& l) {
      return l == "L3" && id % 3 == 0;
    }));
    eval_into(cfg, d, client, judge, {"dil"}, nullptr, dir);
    const std::string diff = golden::compare("cli_dil_mock.csv", read_text(dir / "dil.csv"));
    CHECK_MESSAGE(diff.empty(), diff);
  }
  SUBCASE("consistent model has no inheritance conflicts") {
    ScriptedModelClient client(dataset_script(d, [](std::size_t, const LanguageId&) { return false; }));
    eval_into(cfg, d, client, judge, {"dil", "inherit"}, nullptr, dir);
    for (const char* f : {"dil.csv", "inherit.csv"}) {
      const auto rows = lines_of(read_text(dir / f));
      REQUIRE(rows.size() > 1);
      const auto header = fields(rows[0]);
      const auto col = std::find(header.begin(), header.end(), "rate") - header.begin();
      REQUIRE(col < static_cast<long>(header.size()));
      for (std::size_t i = 1; i < rows.size(); ++i) CHECK(std::stod(fields(rows[i])[col]) == 0.0);
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("suite names") {
  CHECK(expand_suites({"all"}) == std::vector<std::string>{"dil", "dol", "inherit", "rank", "similarity"});
  CHECK(expand_suites({"rank", "dil", "rank"}) == std::vector<std::string>{"rank", "dil"});
  CHECK_THROWS_AS(expand_suites({"bogus"}), UsageError);
  CHECK_THROWS_AS(expand_suites({}), UsageError);
}

TEST_CASE("experiment config parsing") {
  const ExperimentConfig c = tiny_config();
  CHECK(c.world.n_entities == 8);
  CHECK(c.core.n == 2);
  CHECK(c.pretrain.max_steps == 4);
  CHECK(config_hash(c) == config_hash(experiment_config_from_json(to_json(c))));
  CHECK_THROWS_AS(experiment_config_from_json(nlohmann::json::array()), ConfigError);
  auto bad = tiny_config_json();
  bad["eval"]["suites"] = {"nope"};
  CHECK_THROWS_AS(experiment_config_from_json(bad), ConfigError);
}

TEST_CASE("command-line exit codes") {
  const fs::path dir = scratch("exit");
  fs::create_directories(dir);
  const std::string cfg = (dir / "tiny.json").string();
  write_text(cfg, tiny_config_json().dump());
  write_text(dir / "broken.json", "{not json");
  const std::string out = " --out " + (dir / "out").string();

  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("") == 1);
  CHECK(run_cli("frobnicate") == 1);
  CHECK(run_cli("eval" + out) == 1);
  CHECK(run_cli("report" + out) == 1);
  CHECK(run_cli("gen --config " + (dir / "broken.json").string() + out) == 2);
  CHECK(run_cli("gen --config " + (dir / "missing.json").string() + out) == 1);
  CHECK(run_cli("train --config " + cfg + out) == 1);
  CHECK(run_cli("gen --config " + cfg + out) == 0);
  CHECK(fs::exists(dir / "out" / "corpus.jsonl"));
  CHECK(run_cli("train --core off --n 3 --config " + cfg + out) == 1);
  CHECK(run_cli("eval --suite dil --config " + cfg + out) == 1);
  fs::remove_all(dir);
}
