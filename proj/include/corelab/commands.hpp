#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "corelab/experiment.hpp"

namespace corelab {

// Exit-code contract of the command-line driver.
enum class ExitCode : int { ok = 0, usage = 1, data = 2, runtime = 3 };
ExitCode exit_code_for(const std::exception& e);

// Writes the dataset files plus config.json and config.hash into `out`.
void cmd_gen(const ExperimentConfig& config, const std::filesystem::path& out);

struct TrainRequest {
  bool core = false;
  // Empty uses config.n_grid.
  std::vector<std::size_t> n;
};

// Pretrains once (out/pretrain) and then trains every requested variant
// into out/runs/<variant>. Returns the run directories. Throws
// UsageError when `gen` has not run.
std::vector<std::filesystem::path> cmd_train(const ExperimentConfig& config, const std::filesystem::path& out,
                                             const TrainRequest& request);

enum class ClientKind { local, external };

struct EvalRequest {
  std::vector<std::string> suites;  // "all" expands to every suite
  std::filesystem::path checkpoint;
  ClientKind client = ClientKind::local;
  ClientKind judge = ClientKind::local;
};

// Reports go beside the checkpoint (or to out/external for an external
// model); out/summary.csv is refreshed from every evaluated run.
std::filesystem::path cmd_eval(const ExperimentConfig& config, const std::filesystem::path& out,
                               const EvalRequest& request);

// Evaluation with caller-supplied clients, writing into `dir`.
void eval_into(const ExperimentConfig& config, const Dataset& data, ModelClient& client, Judge& judge,
               const std::vector<std::string>& suites, DecoderModel* model, const std::filesystem::path& dir);

void cmd_report(const std::vector<std::filesystem::path>& runs, const std::filesystem::path& out);

std::vector<std::string> expand_suites(const std::vector<std::string>& suites);

}  // namespace corelab
