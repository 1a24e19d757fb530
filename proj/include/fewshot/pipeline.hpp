#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fewshot/clock.hpp"
#include "fewshot/dataset.hpp"
#include "fewshot/decoders.hpp"

namespace fewshot {

// One parallel training worker: its encoder architecture and batch regime.
struct WorkerSpec {
  std::string provider = "mlp";         // "mlp" or "identity"
  std::vector<size_t> hidden_dims{256, 128};
  size_t embedding_dim = 64;
  double learning_rate = 0.05;
  double alpha = 0.5;
  uint32_t batch_way = 10;
  uint32_t batch_shot = 4;
  uint32_t epochs_per_round = 1;
  uint32_t batches_per_epoch = 20;
};

struct EvalSpec {
  uint32_t episodes = 600;
  uint32_t way = 5;
  uint32_t shot = 1;
  uint32_t query = 19;
};

struct RunConfig {
  std::string dataset_path;
  std::string dataset_kind = "images";  // "images" or "embeddings"
  std::array<uint32_t, 3> split_ratios{5, 1, 4};
  uint64_t seed = 1;
  std::vector<WorkerSpec> workers{WorkerSpec{}};
  MctConfig decoder;
  EvalSpec evaluation;
  uint32_t valid_episodes = 100;         // per-round validation episodes
  uint32_t ensemble_train_episodes = 200;
  uint32_t ensemble_test_episodes = 100;
  double ensemble_train_fraction = 0.5;  // item split inside meta-valid
  double budget_seconds = 300.0;
  double reserve_fraction = 0.15;        // of the budget
  uint32_t max_rounds = 0;               // 0 = rounds bounded by budget only
};

// Parses and validate a config document; unknown keys are rejected so typos
// fail loudly. Throws ArgumentError / FormatError.
RunConfig parse_run_config(const std::string& json_text);
std::string run_config_to_json(const RunConfig& cfg);

struct TrainOutcome {
  struct WorkerInfo {
    int id = 0;
    double best_valid_accuracy = 0.0;
    int rounds = 0;
    int validations = 0;
    bool failed = false;
    std::string error;
  };
  std::vector<WorkerInfo> workers;
  bool degraded = false;  // budget died before any validation anywhere
  std::string ensemble_variant;  // empty when degraded
  std::vector<double> ensemble_candidate_accuracy;
  double train_seconds = 0.0;
  double ensemble_seconds = 0.0;
};

// Full training pass: split, per-worker budgeted encoder training, ensemble
// fit and selection. Persists everything needed for evaluation into run_dir:
// config.json, split.json, worker_<i>/best.enc1, ensemble.ens1, log.txt and
// train_meta.json. A degraded run (no worker validated before the budget
// ran out) still writes checkpoints and metadata but no ensemble.
TrainOutcome run_training(const RunConfig& cfg, const std::filesystem::path& run_dir,
                          Clock& clock);

// The train_meta.json document for an outcome.
std::string train_outcome_to_json(const TrainOutcome& outcome);

struct EvalOverrides {
  std::optional<uint32_t> episodes;
  std::optional<uint32_t> way;
  std::optional<uint32_t> shot;
  std::optional<uint32_t> query;
  std::optional<uint64_t> seed;
  std::optional<DistanceMode> distance;
  std::optional<uint32_t> mct_steps;
};

// Which dataset items each evaluation episode touched; for auditing that
// evaluation stays inside the meta-test classes.
struct EvalAudit {
  std::vector<std::vector<uint32_t>> support_items;
  std::vector<std::vector<uint32_t>> query_items;
};

// Evaluates a trained run directory over freshly sampled meta-test episodes
// and writes report.json (also returned as a string). A degraded run raises
// BudgetError since there is no ensemble to evaluate.
std::string evaluate_run(const std::filesystem::path& run_dir, const EvalOverrides& overrides,
                         Clock& clock, EvalAudit* audit = nullptr);

// Renders the human-readable summary of an existing report.json.
std::string render_report(const std::filesystem::path& run_dir);

}  // namespace fewshot
