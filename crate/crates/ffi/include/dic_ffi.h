#ifndef DIC_FFI_H
#define DIC_FFI_H

/* Generated by cbindgen from crates/ffi; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum {
  DIC_STATUS_OK = 0,
  DIC_STATUS_NULL_POINTER = 1,
  DIC_STATUS_INVALID_ARGUMENT = 2,
  DIC_STATUS_IMAGE = 3,
  DIC_STATUS_IO = 4,
  DIC_STATUS_CORRELATION_FAILED = 5,
  DIC_STATUS_NO_TIP = 6,
  DIC_STATUS_NO_PLATEAU = 7,
  DIC_STATUS_MISSING_SCALE = 8,
  DIC_STATUS_SPECKLE_QUALITY = 9,
  DIC_STATUS_FORMAT = 10,
  DIC_STATUS_PANIC = 11,
} DicStatus;

typedef enum {
  /**
   * Re-base on low seed ZNCC or many failed points.
   */
  DIC_UPDATE_POLICY_TRIGGER = 0,
  /**
   * Re-base every `update_every` frames.
   */
  DIC_UPDATE_POLICY_EVERY = 1,
} DicUpdatePolicy;

typedef enum {
  DIC_COMPOSITION_TRACKED = 0,
  DIC_COMPOSITION_INTERPOLATED = 1,
  DIC_COMPOSITION_LITERAL = 2,
} DicComposition;

typedef enum {
  /**
   * Crack plane along `y`; opening measured in `u`.
   */
  DIC_ORIENTATION_VERTICAL = 0,
  /**
   * Crack plane along `x`; opening measured in `v`.
   */
  DIC_ORIENTATION_HORIZONTAL = 1,
} DicOrientation;

/**
 * Opaque analysis settings; created with defaults (subset 23x23,
 * first-order warp, acceptance ZNCC 0.7, trigger-based updating).
 */
typedef struct DicConfig DicConfig;

/**
 * Opaque list of flagged edge pairs.
 */
typedef struct DicEdges DicEdges;

/**
 * Opaque displacement field.
 */
typedef struct DicField DicField;

/**
 * Opaque grayscale image.
 */
typedef struct DicImage DicImage;

/**
 * Opaque sequence of fields, each relative to frame 0.
 */
typedef struct DicSequence DicSequence;

/**
 * Region of interest and grid step, in pixels.
 */
typedef struct {
  size_t origin_x;
  size_t origin_y;
  size_t width;
  size_t height;
  size_t step;
} DicGrid;

/**
 * One correlation point on a crack flank.
 */
typedef struct {
  size_t row;
  size_t col;
  double ref_x_mm;
  double ref_y_mm;
  double def_x_mm;
  double def_y_mm;
} DicEdgePoint;

/**
 * Both flanks of one flagged relative-displacement entry.
 */
typedef struct {
  size_t rel_row;
  size_t rel_col;
  double opening_mm;
  DicEdgePoint low;
  DicEdgePoint high;
} DicEdgePair;

/**
 * A crack tip in millimetres.
 */
typedef struct {
  double x_mm;
  double y_mm;
  size_t frame;
  double spread_mm;
  bool low_confidence;
  DicOrientation orientation;
  /**
   * +1 when the crack extends from the tip toward increasing `y`
   * (vertical) or `x` (horizontal), -1 otherwise.
   */
  double side;
} DicTip;

/**
 * Summary of a CTOD plateau. Ranges are inclusive indices into the probe
 * grids.
 */
typedef struct {
  double delta_c_mm;
  double onset_lx_mm;
  double onset_ly_mm;
  size_t lx_first;
  size_t lx_last;
  size_t ly_first;
  size_t ly_last;
} DicPlateau;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL after a
 * successful call. Valid until the next call into the library on the same
 * thread.
 */
const char *dic_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dic_version(void);

/**
 * Builds an image from 8-bit row-major pixels. `scale_mm_per_px <= 0` means
 * no physical scale.
 *
 * # Safety
 * `pixels` must point to `width * height` readable bytes; `out` must be a
 * valid pointer.
 */
DicStatus dic_image_from_u8(const uint8_t *pixels,
                            size_t width,
                            size_t height,
                            double scale_mm_per_px,
                            DicImage **out);

/**
 * Builds an image from 16-bit row-major pixels.
 *
 * # Safety
 * As [`dic_image_from_u8`], with `width * height` readable `uint16_t`.
 */
DicStatus dic_image_from_u16(const uint16_t *pixels,
                             size_t width,
                             size_t height,
                             double scale_mm_per_px,
                             DicImage **out);

/**
 * Loads a PNG or TIFF file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
DicStatus dic_image_load(const char *path, double scale_mm_per_px, DicImage **out);

/**
 * Writes an 8-bit PNG.
 *
 * # Safety
 * `img` must be a live handle and `path` a NUL-terminated string.
 */
DicStatus dic_image_save_png(const DicImage *img, const char *path);

/**
 * # Safety
 * `img` must be NULL or a handle not yet freed.
 */
void dic_image_free(DicImage *img);

/**
 * # Safety
 * `img` must be a live handle; `width` and `height` valid pointers.
 */
DicStatus dic_image_size(const DicImage *img, size_t *width, size_t *height);

/**
 * Mean intensity gradient in the image's native code values.
 *
 * # Safety
 * `img` must be a live handle; `out` a valid pointer.
 */
DicStatus dic_image_mig(const DicImage *img, double *out);

/**
 * Copies the pixels, row-major, as intensities in `[0, 1]`.
 *
 * # Safety
 * `img` must be a live handle; `out` must hold `len >= width * height`
 * doubles.
 */
DicStatus dic_image_copy(const DicImage *img, double *out, size_t len);

/**
 * Random speckle pattern with `count` Gaussian blobs of mean radius
 * `radius_px`, regenerated with successive seeds until the mean intensity
 * gradient reaches `mig_floor`. `mig` (may be NULL) receives the achieved
 * value.
 *
 * # Safety
 * `out` must be a valid pointer; `mig` NULL or valid.
 */
DicStatus dic_speckle_generate(size_t width,
                               size_t height,
                               size_t count,
                               double radius_px,
                               uint64_t seed,
                               double mig_floor,
                               DicImage **out,
                               double *mig);

DicConfig *dic_config_new(void);

/**
 * # Safety
 * `cfg` must be NULL or a handle not yet freed.
 */
void dic_config_free(DicConfig *cfg);

/**
 * Subset half-width `M` (subset `2M+1`) and the shape-function order
 * (1 or 2).
 *
 * # Safety
 * `cfg` must be a live handle.
 */
DicStatus dic_config_set_subset(DicConfig *cfg, size_t half_width, uint32_t order);

/**
 * Points with ZNCC below `zncc` are invalid; seeds search `search_radius`
 * pixels for their integer guess.
 *
 * # Safety
 * `cfg` must be a live handle.
 */
DicStatus dic_config_set_acceptance(DicConfig *cfg, double zncc, size_t search_radius);

/**
 * Reference-update rule for incremental sequences. `update_every` is used
 * by `DIC_UPDATE_POLICY_EVERY`; the thresholds by
 * `DIC_UPDATE_POLICY_TRIGGER`.
 *
 * # Safety
 * `cfg` must be a live handle.
 */
DicStatus dic_config_set_update(DicConfig *cfg,
                                DicUpdatePolicy policy,
                                size_t update_every,
                                double min_seed_zncc,
                                double max_invalid_fraction,
                                DicComposition composition);

/**
 * Worker threads for independent frames (1 = fully sequential).
 *
 * # Safety
 * `cfg` must be a live handle.
 */
DicStatus dic_config_set_workers(DicConfig *cfg, size_t workers);

/**
 * Correlates one deformed image against the reference. `seeds_xy` holds
 * `n_seeds` pixel pairs `(x, y)`.
 *
 * # Safety
 * Handles must be live; `seeds_xy` must point to `2 * n_seeds` doubles;
 * `out` must be valid.
 */
DicStatus dic_analyze_frame(const DicImage *reference,
                            const DicImage *deformed,
                            DicGrid grid,
                            const double *seeds_xy,
                            size_t n_seeds,
                            const DicConfig *cfg,
                            DicField **out);

/**
 * Correlates `frames[1..n]` against `frames[0]`, directly or with
 * reference updating. Frames where every seed fails are recorded (see
 * [`dic_sequence_failed_count`]) rather than aborting the run.
 *
 * # Safety
 * `frames` must point to `n_frames` live image handles; otherwise as
 * [`dic_analyze_frame`].
 */
DicStatus dic_analyze_sequence(const DicImage *const *frames,
                               size_t n_frames,
                               DicGrid grid,
                               const double *seeds_xy,
                               size_t n_seeds,
                               const DicConfig *cfg,
                               bool incremental,
                               DicSequence **out);

/**
 * # Safety
 * `seq` must be NULL or a handle not yet freed.
 */
void dic_sequence_free(DicSequence *seq);

/**
 * Number of fields (one per deformed frame).
 *
 * # Safety
 * `seq` must be a live handle.
 */
size_t dic_sequence_len(const DicSequence *seq);

/**
 * # Safety
 * `seq` must be a live handle.
 */
size_t dic_sequence_failed_count(const DicSequence *seq);

/**
 * Number of frames that served as reference (frame 0 included).
 *
 * # Safety
 * `seq` must be a live handle.
 */
size_t dic_sequence_reference_count(const DicSequence *seq);

/**
 * Copies field `index` (frame `index + 1`) into a new handle.
 *
 * # Safety
 * `seq` must be a live handle; `out` valid.
 */
DicStatus dic_sequence_field(const DicSequence *seq, size_t index, DicField **out);

/**
 * # Safety
 * `field` must be NULL or a handle not yet freed.
 */
void dic_field_free(DicField *field);

/**
 * Grid of the field and its point counts.
 *
 * # Safety
 * `field` must be a live handle; out-pointers valid.
 */
DicStatus dic_field_grid(const DicField *field, DicGrid *grid, size_t *nx, size_t *ny);

/**
 * Row-major copies of the field: `u`, `v` in pixels (NaN where invalid)
 * and `zncc`. Each array needs `nx * ny` slots; any may be NULL.
 *
 * # Safety
 * `field` must be a live handle; non-NULL arrays must hold `len` doubles.
 */
DicStatus dic_field_copy(const DicField *field, double *u, double *v, double *zncc, size_t len);

/**
 * Number of invalid points.
 *
 * # Safety
 * `field` must be a live handle.
 */
size_t dic_field_invalid_count(const DicField *field);

/**
 * Sets the physical scale used by the crack functions.
 *
 * # Safety
 * `field` must be a live handle.
 */
DicStatus dic_field_set_scale(DicField *field, double scale_mm_per_px);

/**
 * Writes the field in the DICF binary format.
 *
 * # Safety
 * `field` must be a live handle and `path` a NUL-terminated string.
 */
DicStatus dic_field_write_dicf(const DicField *field, const char *path);

/**
 * Reads a DICF file, attaching `frame` as the frame number.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` valid.
 */
DicStatus dic_field_read_dicf(const char *path, size_t frame, DicField **out);

/**
 * Flags every neighbor pair whose relative displacement across the crack
 * plane reaches `delta_c_mm`. The field needs a scale.
 *
 * # Safety
 * `field` must be a live handle; `out` valid.
 */
DicStatus dic_crack_edges(const DicField *field,
                          DicOrientation orientation,
                          double delta_c_mm,
                          DicEdges **out);

/**
 * # Safety
 * `edges` must be NULL or a handle not yet freed.
 */
void dic_edges_free(DicEdges *edges);

/**
 * # Safety
 * `edges` must be a live handle.
 */
size_t dic_edges_len(const DicEdges *edges);

/**
 * # Safety
 * `edges` must be a live handle; `out` valid.
 */
DicStatus dic_edges_get(const DicEdges *edges, size_t index, DicEdgePair *out);

/**
 * Tip from flagged edges; `side` as in [`DicTip`]. Returns
 * `DIC_STATUS_NO_TIP` when no edge component is large enough.
 *
 * # Safety
 * `edges` and `field` must be live handles; `out` valid.
 */
DicStatus dic_crack_tip_from_edges(const DicEdges *edges,
                                   const DicField *field,
                                   DicOrientation orientation,
                                   double side,
                                   DicTip *out);

/**
 * Locates the crack tip from displacement profiles across the crack plane.
 *
 * # Safety
 * `field` must be a live handle; `out` valid.
 */
DicStatus dic_crack_locate_tip(const DicField *field, DicOrientation orientation, DicTip *out);

/**
 * Crack-tip opening displacement probed `lx_mm` across and `ly_mm` behind
 * the tip.
 *
 * # Safety
 * `field` must be a live handle; `tip` and `out` valid.
 */
DicStatus dic_crack_ctod(const DicField *field,
                         const DicTip *tip,
                         double lx_mm,
                         double ly_mm,
                         double *out);

/**
 * Critical CTOD from the plateau of CTOD over the probe grid. Returns
 * `DIC_STATUS_NO_PLATEAU` (with the probe values in the error message)
 * when no 3x3 sub-grid qualifies.
 *
 * # Safety
 * `field` must be a live handle, `tip` and `out` valid, and the grids must
 * hold `n_lx` and `n_ly` doubles.
 */
DicStatus dic_crack_delta_c(const DicField *field,
                            const DicTip *tip,
                            const double *lx_mm,
                            size_t n_lx,
                            const double *ly_mm,
                            size_t n_ly,
                            DicPlateau *out);

/**
 * Mean tip speed (mm/s) over `n` frames; frames with `located[i] == false`
 * are skipped. Needs at least two located tips.
 *
 * # Safety
 * `times_s`, `tips` and `located` must each hold `n` elements; `out` valid.
 */
DicStatus dic_crack_mean_speed(const double *times_s,
                               const DicTip *tips,
                               const bool *located,
                               size_t n,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIC_FFI_H */
