#include "fewshot.h"

#include <cstdlib>
#include <cstring>
#include <exception>
#include <memory>
#include <string>
#include <utility>

#include "json.hpp"

#include "fewshot/clock.hpp"
#include "fewshot/dataset.hpp"
#include "fewshot/error.hpp"
#include "fewshot/pipeline.hpp"

namespace {

thread_local std::string g_last_error;

fsl_status status_from(fewshot::ErrorCode code) {
  switch (code) {
    case fewshot::ErrorCode::format: return FSL_ERR_FORMAT;
    case fewshot::ErrorCode::empty_class: return FSL_ERR_EMPTY_CLASS;
    case fewshot::ErrorCode::split: return FSL_ERR_SPLIT;
    case fewshot::ErrorCode::sampling: return FSL_ERR_SAMPLING;
    case fewshot::ErrorCode::shape: return FSL_ERR_SHAPE;
    case fewshot::ErrorCode::numerical: return FSL_ERR_NUMERICAL;
    case fewshot::ErrorCode::argument: return FSL_ERR_ARGUMENT;
    case fewshot::ErrorCode::train: return FSL_ERR_TRAIN;
    case fewshot::ErrorCode::decode: return FSL_ERR_DECODE;
    case fewshot::ErrorCode::io: return FSL_ERR_IO;
    case fewshot::ErrorCode::budget: return FSL_ERR_BUDGET;
  }
  return FSL_ERR_INTERNAL;
}

// Every entry point funnels through here so exceptions never cross the ABI.
template <typename Fn>
fsl_status guarded(Fn&& fn) {
  try {
    fn();
    g_last_error.clear();
    return FSL_OK;
  } catch (const fewshot::Error& e) {
    g_last_error = e.what();
    return status_from(e.code());
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return FSL_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown failure";
    return FSL_ERR_INTERNAL;
  }
}

fsl_status fail(fsl_status status, const char* message) {
  g_last_error = message;
  return status;
}

// Out-strings use malloc so fsl_string_free can pair with free regardless of
// which runtime the caller links.
char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out == nullptr) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

}  // namespace

struct fsl_dataset {
  fewshot::LabeledDataset data;
};

struct fsl_split {
  fewshot::ClassSplit data;
};

extern "C" {

uint32_t fsl_abi_version(void) { return 1; }

const char* fsl_status_name(fsl_status status) {
  switch (status) {
    case FSL_OK: return "ok";
    case FSL_ERR_FORMAT: return "format";
    case FSL_ERR_EMPTY_CLASS: return "empty_class";
    case FSL_ERR_SPLIT: return "split";
    case FSL_ERR_SAMPLING: return "sampling";
    case FSL_ERR_SHAPE: return "shape";
    case FSL_ERR_NUMERICAL: return "numerical";
    case FSL_ERR_ARGUMENT: return "argument";
    case FSL_ERR_TRAIN: return "train";
    case FSL_ERR_DECODE: return "decode";
    case FSL_ERR_IO: return "io";
    case FSL_ERR_BUDGET: return "budget";
    case FSL_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* fsl_last_error(void) { return g_last_error.c_str(); }

void fsl_string_free(char* s) { std::free(s); }

fsl_status fsl_dataset_open_images(const char* root_dir, fsl_dataset** out) {
  if (root_dir == nullptr || out == nullptr) return fail(FSL_ERR_ARGUMENT, "null argument");
  *out = nullptr;
  return guarded([&] {
    auto ds = std::make_unique<fsl_dataset>();
    ds->data = fewshot::load_image_dataset(root_dir);
    *out = ds.release();
  });
}

fsl_status fsl_dataset_open_embeddings(const char* file, fsl_dataset** out) {
  if (file == nullptr || out == nullptr) return fail(FSL_ERR_ARGUMENT, "null argument");
  *out = nullptr;
  return guarded([&] {
    auto ds = std::make_unique<fsl_dataset>();
    ds->data = fewshot::load_embedding_dataset(file);
    *out = ds.release();
  });
}

void fsl_dataset_close(fsl_dataset* ds) { delete ds; }

fsl_status fsl_dataset_info(const fsl_dataset* ds, uint32_t* item_count, uint32_t* class_count,
                            uint32_t* payload_dim, int* is_raster) {
  if (ds == nullptr) return fail(FSL_ERR_ARGUMENT, "null dataset");
  return guarded([&] {
    if (item_count != nullptr) *item_count = static_cast<uint32_t>(ds->data.items.size());
    if (class_count != nullptr) *class_count = static_cast<uint32_t>(ds->data.class_count());
    if (payload_dim != nullptr) *payload_dim = static_cast<uint32_t>(ds->data.feature_dim());
    if (is_raster != nullptr)
      *is_raster = ds->data.payload_kind == fewshot::PayloadKind::raster ? 1 : 0;
  });
}

fsl_status fsl_split_classes(const fsl_dataset* ds, uint32_t ratio_train, uint32_t ratio_valid,
                             uint32_t ratio_test, uint64_t seed, fsl_split** out) {
  if (ds == nullptr || out == nullptr) return fail(FSL_ERR_ARGUMENT, "null argument");
  *out = nullptr;
  return guarded([&] {
    auto split = std::make_unique<fsl_split>();
    split->data = fewshot::split_classes(ds->data, {ratio_train, ratio_valid, ratio_test}, seed);
    *out = split.release();
  });
}

fsl_status fsl_split_counts(const fsl_split* split, uint32_t* n_train, uint32_t* n_valid,
                            uint32_t* n_test) {
  if (split == nullptr) return fail(FSL_ERR_ARGUMENT, "null split");
  return guarded([&] {
    if (n_train != nullptr) *n_train = static_cast<uint32_t>(split->data.meta_train.size());
    if (n_valid != nullptr) *n_valid = static_cast<uint32_t>(split->data.meta_valid.size());
    if (n_test != nullptr) *n_test = static_cast<uint32_t>(split->data.meta_test.size());
  });
}

fsl_status fsl_split_to_json(const fsl_split* split, char** json_out) {
  if (split == nullptr || json_out == nullptr) return fail(FSL_ERR_ARGUMENT, "null argument");
  *json_out = nullptr;
  return guarded([&] { *json_out = dup_string(fewshot::split_to_json(split->data)); });
}

fsl_status fsl_split_save(const fsl_split* split, const char* path) {
  if (split == nullptr || path == nullptr) return fail(FSL_ERR_ARGUMENT, "null argument");
  return guarded([&] { fewshot::save_split(split->data, path); });
}

fsl_status fsl_split_load(const char* path, fsl_split** out) {
  if (path == nullptr || out == nullptr) return fail(FSL_ERR_ARGUMENT, "null argument");
  *out = nullptr;
  return guarded([&] {
    auto split = std::make_unique<fsl_split>();
    split->data = fewshot::load_split(path);
    *out = split.release();
  });
}

void fsl_split_free(fsl_split* split) { delete split; }

fsl_status fsl_sample_episode_json(const fsl_dataset* ds, const fsl_split* split,
                                   const char* section, uint32_t way, uint32_t shot,
                                   uint32_t query, uint64_t seed, char** json_out) {
  if (ds == nullptr || json_out == nullptr) return fail(FSL_ERR_ARGUMENT, "null argument");
  if ((split == nullptr) != (section == nullptr))
    return fail(FSL_ERR_ARGUMENT, "split and section must be given together");
  *json_out = nullptr;
  return guarded([&] {
    std::vector<uint32_t> all_classes;
    const std::vector<uint32_t>* classes = &all_classes;
    if (split != nullptr) {
      std::string name = section;
      if (name == "meta_train") {
        classes = &split->data.meta_train;
      } else if (name == "meta_valid") {
        classes = &split->data.meta_valid;
      } else if (name == "meta_test") {
        classes = &split->data.meta_test;
      } else {
        throw fewshot::ArgumentError("unknown split section: " + name);
      }
    } else {
      all_classes.resize(ds->data.class_count());
      for (uint32_t c = 0; c < all_classes.size(); ++c) all_classes[c] = c;
    }

    fewshot::Rng rng(seed);
    fewshot::Episode ep = fewshot::sample_episode(ds->data, *classes, way, shot, query, rng);

    nlohmann::json j;
    j["way"] = ep.way;
    j["shot"] = ep.shot;
    j["query_per_class"] = ep.query_per_class;
    j["class_ids"] = ep.class_ids;
    auto refs_to_json = [](const std::vector<fewshot::EpisodeRef>& refs) {
      nlohmann::json arr = nlohmann::json::array();
      for (const auto& r : refs) arr.push_back({{"item", r.item}, {"label", r.label}});
      return arr;
    };
    j["support"] = refs_to_json(ep.support);
    j["query"] = refs_to_json(ep.query);
    *json_out = dup_string(j.dump(2) + "\n");
  });
}

fsl_status fsl_train(const char* config_json, const char* run_dir,
                     double budget_seconds_override, char** summary_json_out) {
  if (config_json == nullptr || run_dir == nullptr) return fail(FSL_ERR_ARGUMENT, "null argument");
  if (summary_json_out != nullptr) *summary_json_out = nullptr;
  bool degraded = false;
  fsl_status status = guarded([&] {
    fewshot::RunConfig cfg = fewshot::parse_run_config(config_json);
    if (budget_seconds_override > 0) cfg.budget_seconds = budget_seconds_override;
    fewshot::SystemClock clock;
    fewshot::TrainOutcome outcome = fewshot::run_training(cfg, run_dir, clock);
    if (outcome.degraded) {
      degraded = true;
      return;
    }
    if (summary_json_out != nullptr)
      *summary_json_out = dup_string(fewshot::train_outcome_to_json(outcome));
  });
  if (status == FSL_OK && degraded) {
    return fail(FSL_ERR_BUDGET,
                "budget ran out before any worker validated a checkpoint; "
                "run directory holds the degraded state");
  }
  return status;
}

fsl_status fsl_eval(const char* run_dir, const char* overrides_json, char** report_json_out) {
  if (run_dir == nullptr) return fail(FSL_ERR_ARGUMENT, "null run_dir");
  if (report_json_out != nullptr) *report_json_out = nullptr;
  return guarded([&] {
    fewshot::EvalOverrides ov;
    if (overrides_json != nullptr && overrides_json[0] != '\0') {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(overrides_json);
      } catch (const nlohmann::json::parse_error& e) {
        throw fewshot::FormatError(std::string("overrides: ") + e.what());
      }
      if (!j.is_object()) throw fewshot::ArgumentError("overrides must be a json object");
      for (const auto& [key, value] : j.items()) {
        if (key == "episodes") {
          ov.episodes = value.get<uint32_t>();
        } else if (key == "way") {
          ov.way = value.get<uint32_t>();
        } else if (key == "shot") {
          ov.shot = value.get<uint32_t>();
        } else if (key == "query") {
          ov.query = value.get<uint32_t>();
        } else if (key == "seed") {
          ov.seed = value.get<uint64_t>();
        } else if (key == "mct_steps") {
          ov.mct_steps = value.get<uint32_t>();
        } else if (key == "distance") {
          std::string d = value.get<std::string>();
          if (d == "squared_euclidean") {
            ov.distance = fewshot::DistanceMode::squared_euclidean;
          } else if (d == "euclidean") {
            ov.distance = fewshot::DistanceMode::euclidean;
          } else {
            throw fewshot::ArgumentError("overrides: unknown distance: " + d);
          }
        } else {
          throw fewshot::ArgumentError("overrides: unknown key: " + key);
        }
      }
    }
    fewshot::SystemClock clock;
    std::string report = fewshot::evaluate_run(run_dir, ov, clock);
    if (report_json_out != nullptr) *report_json_out = dup_string(report);
  });
}

fsl_status fsl_report_render(const char* run_dir, char** text_out) {
  if (run_dir == nullptr || text_out == nullptr) return fail(FSL_ERR_ARGUMENT, "null argument");
  *text_out = nullptr;
  return guarded([&] { *text_out = dup_string(fewshot::render_report(run_dir)); });
}

}  // extern "C"
