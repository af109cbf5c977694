#ifndef XGKIT_H
#define XGKIT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum XgkStatus {
  XGK_STATUS_OK = 0,
  XGK_STATUS_NULL_POINTER = 1,
  XGK_STATUS_INVALID_UTF8 = 2,
  XGK_STATUS_CONFIG = 3,
  XGK_STATUS_INPUT = 4,
  XGK_STATUS_FORMAT = 5,
  XGK_STATUS_IO = 6,
  XGK_STATUS_UNDEFINED_CORRELATION = 7,
  XGK_STATUS_CORRUPTION = 8,
  XGK_STATUS_CONTRACT = 9,
  XGK_STATUS_INVARIANT = 10,
  XGK_STATUS_NON_FINITE = 11,
  XGK_STATUS_PANIC = 12,
} XgkStatus;

// Opaque language identifier.
typedef struct XgkLid XgkLid;

// Opaque subword tokenizer.
typedef struct XgkTokenizer XgkTokenizer;

// SP-Rouge F1 scores on a 0-100 scale.
typedef struct XgkRouge {
  double rouge1;
  double rouge2;
  double lsum;
} XgkRouge;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// Valid until the next call on the same thread.
const char *xgk_last_error(void);

// Library version as a static NUL-terminated string.
const char *xgk_version(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void xgk_string_free(char *s);

// Releases an id buffer returned by [`xgk_tokenizer_encode`]. Null is ignored.
//
// # Safety
// `ids` and `len` must be exactly as returned and not freed before.
void xgk_ids_free(uint32_t *ids, uintptr_t len);

// Loads a tokenizer model file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum XgkStatus xgk_tokenizer_load(const char *path, struct XgkTokenizer **out_tok);

// # Safety
// `tok` must come from [`xgk_tokenizer_load`] and not have been freed.
void xgk_tokenizer_free(struct XgkTokenizer *tok);

// Encodes UTF-8 text; release the ids with [`xgk_ids_free`].
//
// # Safety
// Pointers must be valid; `text_in` NUL-terminated.
enum XgkStatus xgk_tokenizer_encode(const struct XgkTokenizer *tok,
                                    const char *text_in,
                                    uint32_t **out_ids,
                                    uintptr_t *out_len);

// Decodes ids back to text; release it with [`xgk_string_free`].
//
// # Safety
// `ids` must point to `len` readable values (or be null when `len` is 0).
enum XgkStatus xgk_tokenizer_decode(const struct XgkTokenizer *tok,
                                    const uint32_t *ids,
                                    uintptr_t len,
                                    char **out_text);

// SP-Rouge of `candidate` against `reference`; sentences split on newlines.
//
// # Safety
// Pointers must be valid; strings NUL-terminated.
enum XgkStatus xgk_sp_rouge(const struct XgkTokenizer *tok,
                            const char *reference,
                            const char *candidate,
                            struct XgkRouge *out_scores);

// Removes trailing repeated substrings; release with [`xgk_string_free`].
//
// # Safety
// `text_in` must be NUL-terminated and `out_text` writable.
enum XgkStatus xgk_trim(const char *text_in, char **out_text);

// Share of characters below U+0080, in [0, 1]; 0 for empty text.
//
// # Safety
// `text_in` must be NUL-terminated and `out_value` writable.
enum XgkStatus xgk_ascii_fraction(const char *text_in, double *out_value);

// Pearson correlation of two equally long arrays.
//
// # Safety
// `xs` and `ys` must each point to `len` readable values.
enum XgkStatus xgk_pearson(const double *xs, const double *ys, uintptr_t len, double *out_value);

// Loads a language identifier model file.
//
// # Safety
// `path` must be NUL-terminated and `out_lid` writable.
enum XgkStatus xgk_lid_load(const char *path, struct XgkLid **out_lid);

// # Safety
// `lid` must come from [`xgk_lid_load`] and not have been freed.
void xgk_lid_free(struct XgkLid *lid);

// Most probable language of `text_in`; the code is released with
// [`xgk_string_free`]. `out_confidence` may be null.
//
// # Safety
// Pointers must be valid; `text_in` NUL-terminated.
enum XgkStatus xgk_lid_detect(const struct XgkLid *lid,
                              const char *text_in,
                              char **out_language,
                              double *out_confidence);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* XGKIT_H */
