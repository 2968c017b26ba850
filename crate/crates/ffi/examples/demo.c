/* Minimal host-side usage of the canids C API: stream frames through the
 * window and score each emitted feature with one detector.
 *
 * Build (from the repository root, after `cargo build -p canids-ffi`):
 *   cc crates/ffi/examples/demo.c -Icrates/ffi/include \
 *      target/debug/libcanids_ffi.a -lpthread -ldl -lm -o demo
 *   ./demo path/to/detector.qmlp
 */
#include <stdint.h>
#include <stdio.h>
#include <stdlib.h>

#include "canids.h"

int main(int argc, char **argv) {
    if (argc != 2) {
        fprintf(stderr, "usage: %s <detector.qmlp>\n", argv[0]);
        return 1;
    }

    CanidsDetector *det = NULL;
    CanidsStatus status = canids_detector_load(argv[1], &det);
    if (status != CANIDS_STATUS_OK) {
        fprintf(stderr, "load failed (%d): %s\n", (int)status,
                canids_last_error_message());
        return 1;
    }
    printf("canids %s, detector width %zu\n", canids_version(),
           canids_detector_input_width(det));

    CanidsWindow *win = canids_window_new(4);
    if (win == NULL) {
        fprintf(stderr, "window creation failed\n");
        canids_detector_free(det);
        return 1;
    }

    int8_t feature[40];
    const uint8_t payload[8] = {0x05, 0x21, 0x68, 0x09, 0x21, 0x21, 0x00, 0x6f};
    int scored = 0;
    for (int i = 0; i < 8; i++) {
        status = canids_window_push(win, (double)i * 0.01, 0x316, payload,
                                    sizeof payload, feature, sizeof feature);
        if (status == CANIDS_STATUS_WARM_UP) {
            continue;
        }
        if (status != CANIDS_STATUS_OK) {
            fprintf(stderr, "push failed (%d): %s\n", (int)status,
                    canids_last_error_message());
            canids_window_free(win);
            canids_detector_free(det);
            return 1;
        }
        double prob = 0.0;
        status = canids_detector_score(det, feature, sizeof feature, &prob);
        if (status != CANIDS_STATUS_OK) {
            fprintf(stderr, "score failed (%d): %s\n", (int)status,
                    canids_last_error_message());
            canids_window_free(win);
            canids_detector_free(det);
            return 1;
        }
        printf("message %d: attack probability %.6f\n", i, prob);
        scored++;
    }

    canids_window_free(win);
    canids_detector_free(det);
    return scored == 5 ? 0 : 1;
}
