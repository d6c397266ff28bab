/* SPDX-License-Identifier: Apache-2.0 */
/* Copyright The sdvpn Authors */

#ifndef SDVPN_H
#define SDVPN_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes of every call.
 */
typedef enum SdvpnStatus {
  SDVPN_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  SDVPN_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  SDVPN_STATUS_INVALID_UTF8 = 2,
  /**
   * Topology, spec, policy or packet text failed to parse.
   */
  SDVPN_STATUS_PARSE = 3,
  /**
   * The request was refused (ownership, validation, conflicts).
   */
  SDVPN_STATUS_REJECTED = 4,
  /**
   * Unknown service, PE or port.
   */
  SDVPN_STATUS_NOT_FOUND = 5,
  /**
   * A flow table is full; nothing was installed.
   */
  SDVPN_STATUS_CAPACITY = 6,
  /**
   * Internal error; the handle should be freed.
   */
  SDVPN_STATUS_INTERNAL = 7,
} SdvpnStatus;

/**
 * Opaque controller handle.
 */
typedef struct SdvpnRuntime SdvpnRuntime;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Creates a runtime from topology XML. `idle_timeout_ms` of 0 selects the
 * default of 60 s.
 *
 * # Safety
 * `topology_xml` must be a NUL-terminated string; `out` must be writable.
 */
enum SdvpnStatus sdvpn_runtime_new(const char *topology_xml,
                                   uint64_t idle_timeout_ms,
                                   struct SdvpnRuntime **out);

/**
 * Releases a runtime. Null is ignored.
 *
 * # Safety
 * `rt` must come from `sdvpn_runtime_new` and not be used afterwards.
 */
void sdvpn_runtime_free(struct SdvpnRuntime *rt);

/**
 * Hands the key of a port to a customer.
 *
 * # Safety
 * Pointer arguments must be valid NUL-terminated strings / handles.
 */
enum SdvpnStatus sdvpn_grant_key(struct SdvpnRuntime *rt, const char *customer, const char *key);

/**
 * Provisions a service. `policies_xml` may be null.
 *
 * # Safety
 * Pointer arguments must be valid; `out_service` must be writable.
 */
enum SdvpnStatus sdvpn_provision(struct SdvpnRuntime *rt,
                                 const char *customer,
                                 const char *spec_xml,
                                 const char *policies_xml,
                                 uint32_t *out_service);

/**
 * Removes a service and all of its rules.
 *
 * # Safety
 * `rt` must be a valid handle.
 */
enum SdvpnStatus sdvpn_deprovision(struct SdvpnRuntime *rt, uint32_t service);

/**
 * Writes the rule dump of one PE to `*out` (free with `sdvpn_string_free`).
 *
 * # Safety
 * `rt` must be a valid handle; `out` must be writable.
 */
enum SdvpnStatus sdvpn_dump_rules(struct SdvpnRuntime *rt, uint32_t pe, char **out);

/**
 * Number of rules installed on one PE.
 *
 * # Safety
 * `rt` must be a valid handle; `out` must be writable.
 */
enum SdvpnStatus sdvpn_rule_count(struct SdvpnRuntime *rt, uint32_t pe, uintptr_t *out);

/**
 * Advances simulated time (milliseconds; never moves backwards) and
 * expires idle rules. The number expired is written to `out_expired`
 * when it is not null.
 *
 * # Safety
 * `rt` must be a valid handle.
 */
enum SdvpnStatus sdvpn_advance_to(struct SdvpnRuntime *rt, uint64_t now_ms, uintptr_t *out_expired);

/**
 * Injects a JSON-encoded packet on `(pe, port)` and writes a JSON report
 * (`delivered`, `controller_events`, `packet_outs`) to `*out`.
 *
 * # Safety
 * Pointer arguments must be valid; `out` must be writable.
 */
enum SdvpnStatus sdvpn_inject_json(struct SdvpnRuntime *rt,
                                   uint32_t pe,
                                   uint16_t port,
                                   const char *packet_json,
                                   char **out);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *sdvpn_last_error(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void sdvpn_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SDVPN_H */
