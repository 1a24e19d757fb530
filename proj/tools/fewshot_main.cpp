// fewshot command line tool. Talks to the library exclusively through the C
// interface so the binary exercises the same surface external embedders get.
//
// Exit codes: 0 success, 2 input or validation error, 3 budget degradation.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fewshot.h"

namespace {

int exit_code_for(fsl_status status) {
  if (status == FSL_OK) return 0;
  if (status == FSL_ERR_BUDGET) return 3;
  return 2;
}

int report_failure(fsl_status status) {
  std::fprintf(stderr, "error: %s (%s)\n", fsl_last_error(), fsl_status_name(status));
  return exit_code_for(status);
}

struct OwnedString {
  char* ptr = nullptr;
  ~OwnedString() { fsl_string_free(ptr); }
  OwnedString() = default;
  OwnedString(const OwnedString&) = delete;
  OwnedString& operator=(const OwnedString&) = delete;
};

struct DatasetHandle {
  fsl_dataset* ptr = nullptr;
  ~DatasetHandle() { fsl_dataset_close(ptr); }
};

struct SplitHandle {
  fsl_split* ptr = nullptr;
  ~SplitHandle() { fsl_split_free(ptr); }
};

bool read_text_file(const std::string& path, std::string& out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return false;
  std::ostringstream buf;
  buf << in.rdbuf();
  out = buf.str();
  return true;
}

bool parse_ratios(const std::string& text, uint32_t out[3]) {
  unsigned a = 0, b = 0, c = 0;
  char tail = 0;
  if (std::sscanf(text.c_str(), "%u:%u:%u%c", &a, &b, &c, &tail) != 3) return false;
  out[0] = a;
  out[1] = b;
  out[2] = c;
  return true;
}

// --dataset and --embeddings are mutually exclusive ways of naming a corpus.
int open_dataset(const std::string& images_dir, const std::string& embeddings_file,
                 DatasetHandle& handle) {
  if (images_dir.empty() == embeddings_file.empty()) {
    std::fprintf(stderr, "error: give exactly one of --dataset or --embeddings\n");
    return 2;
  }
  fsl_status status = images_dir.empty()
                          ? fsl_dataset_open_embeddings(embeddings_file.c_str(), &handle.ptr)
                          : fsl_dataset_open_images(images_dir.c_str(), &handle.ptr);
  if (status != FSL_OK) return report_failure(status);
  return 0;
}

int cmd_split(const std::string& images_dir, const std::string& embeddings_file,
              const std::string& ratios_text, uint64_t seed, const std::string& out_path) {
  uint32_t ratios[3];
  if (!parse_ratios(ratios_text, ratios)) {
    std::fprintf(stderr, "error: --ratios wants the form A:B:C, got '%s'\n", ratios_text.c_str());
    return 2;
  }
  DatasetHandle ds;
  if (int rc = open_dataset(images_dir, embeddings_file, ds); rc != 0) return rc;

  SplitHandle split;
  fsl_status status = fsl_split_classes(ds.ptr, ratios[0], ratios[1], ratios[2], seed, &split.ptr);
  if (status != FSL_OK) return report_failure(status);

  if (!out_path.empty()) {
    status = fsl_split_save(split.ptr, out_path.c_str());
    if (status != FSL_OK) return report_failure(status);
  }
  OwnedString json;
  status = fsl_split_to_json(split.ptr, &json.ptr);
  if (status != FSL_OK) return report_failure(status);
  std::fputs(json.ptr, stdout);
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_dir, double budget_seconds) {
  std::string config_text;
  if (!read_text_file(config_path, config_text)) {
    std::fprintf(stderr, "error: cannot read config file '%s'\n", config_path.c_str());
    return 2;
  }
  OwnedString summary;
  fsl_status status = fsl_train(config_text.c_str(), out_dir.c_str(), budget_seconds, &summary.ptr);
  if (status != FSL_OK) return report_failure(status);
  if (summary.ptr != nullptr) std::fputs(summary.ptr, stdout);
  return 0;
}

int cmd_eval(const std::string& run_dir, const nlohmann::json& overrides) {
  OwnedString report;
  std::string overrides_text = overrides.empty() ? std::string() : overrides.dump();
  fsl_status status = fsl_eval(run_dir.c_str(),
                               overrides_text.empty() ? nullptr : overrides_text.c_str(),
                               &report.ptr);
  if (status != FSL_OK) return report_failure(status);
  if (report.ptr != nullptr) std::fputs(report.ptr, stdout);
  return 0;
}

int cmd_report(const std::string& run_dir) {
  OwnedString text;
  fsl_status status = fsl_report_render(run_dir.c_str(), &text.ptr);
  if (status != FSL_OK) return report_failure(status);
  std::fputs(text.ptr, stdout);
  return 0;
}

int cmd_sample(const std::string& images_dir, const std::string& embeddings_file,
               const std::string& split_path, const std::string& section, uint32_t way,
               uint32_t shot, uint32_t query, uint64_t seed) {
  if (split_path.empty() != section.empty()) {
    std::fprintf(stderr, "error: --split and --section must be given together\n");
    return 2;
  }
  DatasetHandle ds;
  if (int rc = open_dataset(images_dir, embeddings_file, ds); rc != 0) return rc;

  SplitHandle split;
  if (!split_path.empty()) {
    fsl_status status = fsl_split_load(split_path.c_str(), &split.ptr);
    if (status != FSL_OK) return report_failure(status);
  }
  OwnedString json;
  fsl_status status =
      fsl_sample_episode_json(ds.ptr, split.ptr, section.empty() ? nullptr : section.c_str(), way,
                              shot, query, seed, &json.ptr);
  if (status != FSL_OK) return report_failure(status);
  std::fputs(json.ptr, stdout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"few-shot image classification toolkit"};
  app.require_subcommand(1);

  std::string images_dir;
  std::string embeddings_file;
  std::string ratios_text = "5:1:4";
  std::string out_path;
  uint64_t seed = 1;

  auto* split_cmd = app.add_subcommand("split", "partition dataset classes into meta splits");
  split_cmd->add_option("--dataset", images_dir, "image corpus directory (labels.csv + PGM)");
  split_cmd->add_option("--embeddings", embeddings_file, "embedding table file");
  split_cmd->add_option("--ratios", ratios_text, "train:valid:test class ratios (default 5:1:4)");
  split_cmd->add_option("--seed", seed, "shuffle seed");
  split_cmd->add_option("--out", out_path, "also write the split to this file");

  std::string config_path;
  std::string run_dir;
  double budget_seconds = 0.0;

  auto* train_cmd = app.add_subcommand("train", "train encoders and the ensemble into a run dir");
  train_cmd->add_option("--config", config_path, "json run config")->required();
  train_cmd->add_option("--out", run_dir, "run directory to create")->required();
  train_cmd->add_option("--budget-seconds", budget_seconds,
                        "wall-clock budget override (takes precedence over the config)");

  std::string eval_run_dir;
  uint32_t episodes = 0, way = 0, shot = 0, query = 0, mct_steps = 0;
  uint64_t eval_seed = 0;
  std::string distance;

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a trained run over fresh test episodes");
  eval_cmd->add_option("run_dir", eval_run_dir, "trained run directory")->required();
  auto* opt_episodes = eval_cmd->add_option("--episodes", episodes, "episode count");
  auto* opt_way = eval_cmd->add_option("--way", way, "classes per episode");
  auto* opt_shot = eval_cmd->add_option("--shot", shot, "support items per class");
  auto* opt_query = eval_cmd->add_option("--query", query, "query items per class");
  auto* opt_seed = eval_cmd->add_option("--seed", eval_seed, "episode sampling seed");
  auto* opt_distance = eval_cmd->add_option("--distance", distance, "squared | euclidean")
                           ->check(CLI::IsMember({"squared", "euclidean"}));
  auto* opt_mct = eval_cmd->add_option("--mct-steps", mct_steps, "transductive refinement steps");

  std::string report_run_dir;
  auto* report_cmd = app.add_subcommand("report", "print the human-readable report of a run");
  report_cmd->add_option("run_dir", report_run_dir, "evaluated run directory")->required();

  std::string s_images, s_embeddings, s_split, s_section;
  uint32_t s_way = 5, s_shot = 1, s_query = 1;
  uint64_t s_seed = 1;
  auto* sample_cmd = app.add_subcommand("sample-episodes", "dump one episode's item ids as json");
  sample_cmd->add_option("--dataset", s_images, "image corpus directory");
  sample_cmd->add_option("--embeddings", s_embeddings, "embedding table file");
  sample_cmd->add_option("--split", s_split, "split.json restricting the class pool");
  sample_cmd->add_option("--section", s_section, "meta_train | meta_valid | meta_test");
  sample_cmd->add_option("--way", s_way, "classes per episode");
  sample_cmd->add_option("--shot", s_shot, "support items per class");
  sample_cmd->add_option("--query", s_query, "query items per class");
  sample_cmd->add_option("--seed", s_seed, "sampling seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (split_cmd->parsed())
    return cmd_split(images_dir, embeddings_file, ratios_text, seed, out_path);
  if (train_cmd->parsed()) return cmd_train(config_path, run_dir, budget_seconds);
  if (eval_cmd->parsed()) {
    nlohmann::json overrides = nlohmann::json::object();
    if (opt_episodes->count() > 0) overrides["episodes"] = episodes;
    if (opt_way->count() > 0) overrides["way"] = way;
    if (opt_shot->count() > 0) overrides["shot"] = shot;
    if (opt_query->count() > 0) overrides["query"] = query;
    if (opt_seed->count() > 0) overrides["seed"] = eval_seed;
    if (opt_mct->count() > 0) overrides["mct_steps"] = mct_steps;
    if (opt_distance->count() > 0)
      overrides["distance"] = distance == "squared" ? "squared_euclidean" : "euclidean";
    return cmd_eval(eval_run_dir, overrides);
  }
  if (report_cmd->parsed()) return cmd_report(report_run_dir);
  if (sample_cmd->parsed())
    return cmd_sample(s_images, s_embeddings, s_split, s_section, s_way, s_shot, s_query, s_seed);

  std::fputs(app.help().c_str(), stderr);
  return 2;
}
