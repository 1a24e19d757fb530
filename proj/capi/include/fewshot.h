/* C interface to the few-shot toolkit. All entry points are thread-safe as
 * long as each handle is used from one thread at a time. Functions return
 * fsl_status; on failure fsl_last_error() describes what went wrong for the
 * calling thread. Strings returned through out-parameters are heap-allocated
 * and must be released with fsl_string_free(). */

#ifndef FEWSHOT_H
#define FEWSHOT_H

#include <stdint.h>

#if defined(__GNUC__) || defined(__clang__)
#define FSL_API __attribute__((visibility("default")))
#else
#define FSL_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum fsl_status {
  FSL_OK = 0,
  FSL_ERR_FORMAT = 1,      /* malformed corpus, container or json document */
  FSL_ERR_EMPTY_CLASS = 2, /* a class has no items */
  FSL_ERR_SPLIT = 3,       /* class or item split impossible */
  FSL_ERR_SAMPLING = 4,    /* episode or batch cannot be drawn */
  FSL_ERR_SHAPE = 5,       /* dimension mismatch */
  FSL_ERR_NUMERICAL = 6,   /* non-finite numerics */
  FSL_ERR_ARGUMENT = 7,    /* invalid argument or config value */
  FSL_ERR_TRAIN = 8,       /* training failed outright */
  FSL_ERR_DECODE = 9,      /* decoder given unusable inputs */
  FSL_ERR_IO = 10,         /* file system problem */
  FSL_ERR_BUDGET = 11,     /* budget exhausted before any usable result */
  FSL_ERR_INTERNAL = 12
} fsl_status;

/* Bumped on any ABI-breaking change to this header. */
FSL_API uint32_t fsl_abi_version(void);

FSL_API const char* fsl_status_name(fsl_status status);

/* Message from the most recent failing call on this thread; empty string
 * after a success. The pointer stays valid until the next call on the same
 * thread. */
FSL_API const char* fsl_last_error(void);

FSL_API void fsl_string_free(char* s);

/* ---- datasets ---------------------------------------------------------- */

typedef struct fsl_dataset fsl_dataset;

/* Directory with labels.csv + PGM images. */
FSL_API fsl_status fsl_dataset_open_images(const char* root_dir, fsl_dataset** out);
/* EMB1 embedding table file. */
FSL_API fsl_status fsl_dataset_open_embeddings(const char* file, fsl_dataset** out);
FSL_API void fsl_dataset_close(fsl_dataset* ds);

/* Any out-pointer may be NULL if the caller does not need that field.
 * is_raster is 1 for image payloads, 0 for embeddings; payload_dim is the
 * flattened feature width. */
FSL_API fsl_status fsl_dataset_info(const fsl_dataset* ds, uint32_t* item_count, uint32_t* class_count,
                            uint32_t* payload_dim, int* is_raster);

/* ---- class splits ------------------------------------------------------ */

typedef struct fsl_split fsl_split;

FSL_API fsl_status fsl_split_classes(const fsl_dataset* ds, uint32_t ratio_train, uint32_t ratio_valid,
                             uint32_t ratio_test, uint64_t seed, fsl_split** out);
FSL_API fsl_status fsl_split_counts(const fsl_split* split, uint32_t* n_train, uint32_t* n_valid,
                            uint32_t* n_test);
FSL_API fsl_status fsl_split_to_json(const fsl_split* split, char** json_out);
FSL_API fsl_status fsl_split_save(const fsl_split* split, const char* path);
FSL_API fsl_status fsl_split_load(const char* path, fsl_split** out);
FSL_API void fsl_split_free(fsl_split* split);

/* ---- episodic sampling ------------------------------------------------- */

/* Draws one episode and returns it as a json document (classes, support and
 * query item indices with episode-local labels). split/section restrict the
 * class pool: section is "meta_train", "meta_valid" or "meta_test"; pass
 * NULL split and section to sample over every class. */
FSL_API fsl_status fsl_sample_episode_json(const fsl_dataset* ds, const fsl_split* split,
                                   const char* section, uint32_t way, uint32_t shot,
                                   uint32_t query, uint64_t seed, char** json_out);

/* ---- pipeline ---------------------------------------------------------- */

/* Trains into run_dir per the json config document. budget_seconds_override
 * replaces the config budget when > 0. On success *summary_json_out (if only
 * non-NULL) receives the training summary. A budget-degraded run returns
 * FSL_ERR_BUDGET after persisting checkpoints and metadata. */
FSL_API fsl_status fsl_train(const char* config_json, const char* run_dir,
                     double budget_seconds_override, char** summary_json_out);

/* Evaluates a trained run_dir and writes report.json. overrides_json may be
 * NULL or an object with any of: episodes, way, shot, query, seed,
 * distance ("squared_euclidean"|"euclidean"), mct_steps. */
FSL_API fsl_status fsl_eval(const char* run_dir, const char* overrides_json, char** report_json_out);

/* Renders the human-readable summary of run_dir/report.json. */
FSL_API fsl_status fsl_report_render(const char* run_dir, char** text_out);

#ifdef __cplusplus
}
#endif

#endif /* FEWSHOT_H */
