/* cc smoke.c -I../include ../../../target/debug/libfisherlora_ffi.a -lm -lpthread -ldl */
#include <stdio.h>
#include "fisherlora.h"

int main(void) {
    const double w[6] = {1.0, 0.5, 0.0, -0.5, 2.0, 0.25};
    const double sx[4] = {1.0, 0.2, 0.2, 2.0};
    const double sy[9] = {1.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 3.0};
    FlMatrix *w0 = NULL, *s_x = NULL, *s_y = NULL;
    FlLoraInit *init = NULL;
    char msg[256];

    if (fl_matrix_new(3, 2, w, &w0) != FL_STATUS_OK ||
        fl_matrix_new(2, 2, sx, &s_x) != FL_STATUS_OK ||
        fl_matrix_new(3, 3, sy, &s_y) != FL_STATUS_OK) {
        fl_last_error_message(msg, sizeof msg);
        fprintf(stderr, "matrix: %s\n", msg);
        return 1;
    }
    if (fl_lora_init(w0, s_x, s_y, 0, 1, 2.0, FL_CRITERION_MIN, 0, &init) != FL_STATUS_OK) {
        fl_last_error_message(msg, sizeof msg);
        fprintf(stderr, "init: %s\n", msg);
        return 1;
    }
    size_t idx = 0;
    fl_lora_indices(init, &idx, 1);
    printf("fisherlora %s: rank %zu, scale %g, index %zu\n", fl_version(), fl_lora_rank(init), fl_lora_scale(init), idx);
    fl_lora_free(init);
    fl_matrix_free(w0);
    fl_matrix_free(s_x);
    fl_matrix_free(s_y);
    return 0;
}
