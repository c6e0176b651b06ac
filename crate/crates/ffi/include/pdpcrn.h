/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef PDPCRN_H
#define PDPCRN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum PdpcrnStatus {
  PDPCRN_STATUS_OK = 0,
  PDPCRN_STATUS_NULL_POINTER = 1,
  PDPCRN_STATUS_INVALID_ARGUMENT = 2,
  PDPCRN_STATUS_SHAPE = 3,
  PDPCRN_STATUS_CONFIG = 4,
  PDPCRN_STATUS_IO = 5,
  PDPCRN_STATUS_FORMAT = 6,
  PDPCRN_STATUS_NUMERIC = 7,
  PDPCRN_STATUS_INTERNAL = 8,
} PdpcrnStatus;

// Opaque network handle: a model and its parameters.
typedef struct PdpcrnModel PdpcrnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *pdpcrn_version(void);

// Message of the last failed call on this thread, or NULL after a success.
// Valid until the next call on the same thread.
const char *pdpcrn_last_error(void);

// Loads a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum PdpcrnStatus pdpcrn_model_load(const char *path, struct PdpcrnModel **out);

// Builds a freshly initialized network from a preset name ("full",
// "dpcrn", "tiny" or "desk").
//
// # Safety
// `preset` must be a NUL-terminated string and `out` a valid pointer.
enum PdpcrnStatus pdpcrn_model_from_preset(const char *preset,
                                           uint64_t seed,
                                           struct PdpcrnModel **out);

// Releases a handle. NULL is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void pdpcrn_model_free(struct PdpcrnModel *model);

// Microphone count the network expects.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum PdpcrnStatus pdpcrn_model_mics(const struct PdpcrnModel *model, size_t *out);

// Number of trainable parameters.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum PdpcrnStatus pdpcrn_model_param_count(const struct PdpcrnModel *model, size_t *out);

// Enhances `channels × frames` planar samples at 16 kHz into `output`
// (same layout and size). `channels` must equal the model's mics.
//
// # Safety
// `input` and `output` must each hold `channels * frames` floats.
enum PdpcrnStatus pdpcrn_enhance(const struct PdpcrnModel *model,
                                 const float *input,
                                 size_t channels,
                                 size_t frames,
                                 float *output);

// STOI of `processed` against `clean` as a fraction in [0, 1].
//
// # Safety
// Both buffers must hold `len` floats; `out` must be valid.
enum PdpcrnStatus pdpcrn_stoi(const float *clean,
                              const float *processed,
                              size_t len,
                              uint32_t sample_rate,
                              double *out);

// SI-SDR of `estimate` against `reference` in dB.
//
// # Safety
// Both buffers must hold `len` floats; `out` must be valid.
enum PdpcrnStatus pdpcrn_si_sdr(const float *reference,
                                const float *estimate,
                                size_t len,
                                double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PDPCRN_H */
