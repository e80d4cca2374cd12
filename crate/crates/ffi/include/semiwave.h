#ifndef SEMIWAVE_H
#define SEMIWAVE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every call. The numeric values of the first five match the
 exit codes of the command line tool.
 */
typedef enum SwStatus {
  SW_STATUS_OK = 0,
  SW_STATUS_IO = 1,
  SW_STATUS_CONFIG = 2,
  SW_STATUS_NUMERICAL = 3,
  SW_STATUS_RESOLUTION = 4,
  SW_STATUS_NULL_POINTER = 5,
  SW_STATUS_INVALID_UTF8 = 6,
  SW_STATUS_PANIC = 7,
} SwStatus;

typedef struct SwDomain SwDomain;

typedef struct SwField SwField;

typedef struct SwGrid SwGrid;

typedef struct SwNonlinearity SwNonlinearity;

typedef struct SwReport SwReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Copies the last error message of this thread into `buf` (NUL terminated,
 truncated to `len`). Returns the full message length without the NUL.

 # Safety
 `buf` must be null or point to `len` writable bytes.
 */
size_t sw_last_error(char *buf, size_t len);

/*
 Interval `[0, length]` with the default collar.

 # Safety
 `out` must be a valid pointer.
 */
enum SwStatus sw_domain_interval(double length, struct SwDomain **out);

/*
 Rectangle `[0, width] x [0, height]` with the default collar.

 # Safety
 `out` must be a valid pointer.
 */
enum SwStatus sw_domain_rectangle(double width, double height, struct SwDomain **out);

/*
 Disk of the given radius centred at the origin.

 # Safety
 `out` must be a valid pointer.
 */
enum SwStatus sw_domain_disk(double radius, struct SwDomain **out);

/*
 # Safety
 `domain` must be null or a handle from `sw_domain_*` not yet freed.
 */
void sw_domain_free(struct SwDomain *domain);

/*
 Uniform grid with `nodes` per side on `[0, horizon]` at Courant number `cfl`.

 # Safety
 `domain` must be a live handle and `out` a valid pointer.
 */
enum SwStatus sw_grid_new(const struct SwDomain *domain,
                          size_t nodes,
                          double horizon,
                          double cfl,
                          struct SwGrid **out);

/*
 Number of spatial nodes, number of time levels and time step.

 # Safety
 `grid` must be a live handle; the out pointers must be valid.
 */
enum SwStatus sw_grid_dims(const struct SwGrid *grid, size_t *nodes, size_t *levels, double *dt);

/*
 # Safety
 `grid` must be null or a handle from `sw_grid_new` not yet freed.
 */
void sw_grid_free(struct SwGrid *grid);

/*
 Nonlinearity from its JSON description, e.g. `{"kind": "cubic"}`.

 # Safety
 `json` must be a NUL terminated string and `out` a valid pointer.
 */
enum SwStatus sw_nonlinearity_from_json(const char *json, struct SwNonlinearity **out);

/*
 `F(t, (x, y), u)`.

 # Safety
 `f` must be a live handle and `out` a valid pointer.
 */
enum SwStatus sw_nonlinearity_eval(const struct SwNonlinearity *f,
                                   double t,
                                   double x,
                                   double y,
                                   double u,
                                   double *out);

/*
 `d_u F(t, (x, y), u)`.

 # Safety
 `f` must be a live handle and `out` a valid pointer.
 */
enum SwStatus sw_nonlinearity_du(const struct SwNonlinearity *f,
                                 double t,
                                 double x,
                                 double y,
                                 double u,
                                 double *out);

/*
 # Safety
 `f` must be null or a handle from `sw_nonlinearity_from_json` not yet freed.
 */
void sw_nonlinearity_free(struct SwNonlinearity *f);

/*
 Forward solve with Dirichlet data given as JSON `{"f": .., "u0": .., "u1": ..}`.

 # Safety
 Handles must be live, `data_json` NUL terminated and `out` valid.
 */
enum SwStatus sw_solve(const struct SwNonlinearity *f,
                       const struct SwGrid *grid,
                       const char *data_json,
                       struct SwField **out);

/*
 Largest `|u|` over the grid.

 # Safety
 `field` must be a live handle and `out` a valid pointer.
 */
enum SwStatus sw_field_sup_abs(const struct SwField *field, double *out);

/*
 Copies time level `level` into `buf`, which must hold `len >= nodes` values.

 # Safety
 `field` must be a live handle and `buf` point to `len` writable doubles.
 */
enum SwStatus sw_field_level(const struct SwField *field, size_t level, double *buf, size_t len);

/*
 # Safety
 `field` must be null or a handle from `sw_solve` not yet freed.
 */
void sw_field_free(struct SwField *field);

/*
 Runs a pipeline (`"forward"`, `"recover_nonlinearity"`, ...) on a JSON
 experiment config, writing its outputs into `out_dir`.

 # Safety
 Strings must be NUL terminated and `out` a valid pointer.
 */
enum SwStatus sw_run_experiment(const char *pipeline,
                                const char *config_json,
                                const char *out_dir,
                                struct SwReport **out);

/*
 A named number of the report, e.g. `"sup_relative_error"`.

 # Safety
 `report` must be a live handle, `name` NUL terminated and `out` valid.
 */
enum SwStatus sw_report_value(const struct SwReport *report, const char *name, double *out);

/*
 The report as JSON; release the string with [`sw_string_free`].

 # Safety
 `report` must be a live handle and `out` a valid pointer.
 */
enum SwStatus sw_report_json(const struct SwReport *report, char **out);

/*
 # Safety
 `report` must be null or a handle from `sw_run_experiment` not yet freed.
 */
void sw_report_free(struct SwReport *report);

/*
 # Safety
 `s` must be null or a string returned by this library, not yet freed.
 */
void sw_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEMIWAVE_H */
