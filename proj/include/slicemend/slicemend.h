#ifndef SLICEMEND_SLICEMEND_H
#define SLICEMEND_SLICEMEND_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define SM_API __declspec(dllexport)
#else
#define SM_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum sm_status {
  SM_OK = 0,
  SM_ERR_PARSE = 1,
  SM_ERR_SCHEMA = 2,
  SM_ERR_CONFLICT = 3,
  SM_ERR_DOMAIN = 4,
  SM_ERR_CONFIG = 5,
  SM_ERR_PLANNING = 6,
  SM_ERR_BUDGET = 7,
  SM_ERR_PROTOCOL = 8,
  SM_ERR_NUMERIC = 9,
  SM_ERR_IO = 10,
  SM_ERR_VERSION = 11,
  SM_ERR_ACCOUNTING = 12,
  SM_ERR_REPORT = 13,
  SM_ERR_SPEC = 14,
  SM_ERR_NOOP = 15,
  SM_ERR_INVALID_ARGUMENT = 100,
  SM_ERR_INTERNAL = 101
} sm_status;

typedef struct sm_dataset sm_dataset;
typedef struct sm_mock_server sm_mock_server;

SM_API const char* sm_version(void);
SM_API const char* sm_format_version(void);
SM_API const char* sm_status_name(sm_status status);

/* Message of the last failed call on this thread; never NULL. */
SM_API const char* sm_last_error(void);

/* Every char** result is heap allocated and must be released here. */
SM_API void sm_free_string(char* s);

/* Datasets. `rejected_json` (may be NULL) receives the lines skipped in
 * lenient mode as a JSON array. */
SM_API sm_status sm_dataset_open(const char* records_path, const char* schema_path, int lenient,
                                 sm_dataset** out, char** rejected_json);
SM_API void sm_dataset_close(sm_dataset* ds);
SM_API sm_status sm_dataset_split_size(const sm_dataset* ds, const char* split, uint64_t* out);
SM_API sm_status sm_dataset_overall_accuracy(const sm_dataset* ds, const char* split, double* out);
SM_API sm_status sm_dataset_write(const sm_dataset* ds, const char* path);

/* Mining. `config_json` holds miner fields (rho, epsilon, max_depth, ...);
 * NULL or "" means defaults. */
SM_API sm_status sm_mine(const sm_dataset* ds, const char* config_json, char** report_json);
SM_API sm_status sm_rank_attributes(const sm_dataset* ds, const char* config_json,
                                    char** ranking_json);

/* Pipeline stages. Each takes a JSON request naming its inputs and outputs
 * and returns a JSON summary. */
SM_API sm_status sm_plan(const sm_dataset* ds, const char* request_json, char** summary_json);
SM_API sm_status sm_generate(const char* request_json, char** summary_json);
SM_API sm_status sm_filter(const char* request_json, char** summary_json);
SM_API sm_status sm_augment(const sm_dataset* base, const char* request_json, char** summary_json);
SM_API sm_status sm_repair_report(const sm_dataset* before, const sm_dataset* after,
                                  const char* request_json, char** report_json);
SM_API sm_status sm_handshake(const char* endpoint, uint32_t timeout_ms, char** hello_json);

/* Metrics over FVEC1 files named in `request_json`. */
SM_API sm_status sm_metrics(const char* request_json, char** metrics_json);

/* Metric kernels over row-major arrays (rows are vectors). */
SM_API sm_status sm_frechet_distance(const double* a, size_t rows_a, const double* b, size_t rows_b,
                                     size_t dim, double* out);
SM_API sm_status sm_gaussian_kl(const double* a, size_t rows_a, const double* b, size_t rows_b,
                                size_t dim, double* out);
SM_API sm_status sm_mean_pairwise_diversity(const double* distances, size_t n, double* out);
SM_API sm_status sm_mean_consistency(const double* u, const double* v, size_t rows, size_t dim,
                                     double* out);

/* Simulator. */
SM_API sm_status sm_simulate(const char* spec_json, const char* out_dir, char** ground_truth_json);
SM_API sm_status sm_simulate_repair(const sm_dataset* ds, const char* request_json,
                                    char** summary_json);

/* Scripted mock backend. `transport` is "tcp" or "http"; port 0 picks a free
 * port. The server runs on its own thread until closed. */
SM_API sm_status sm_mock_server_start(const char* script_json, const char* transport,
                                      const char* host, uint16_t port, sm_mock_server** out);
SM_API sm_status sm_mock_server_endpoint(const sm_mock_server* server, char** endpoint);
SM_API sm_status sm_mock_server_attempts(const sm_mock_server* server, const char* type,
                                         const char* job_id, uint32_t* out);
SM_API void sm_mock_server_close(sm_mock_server* server);

#ifdef __cplusplus
}
#endif

#endif
