#include <stdio.h>
#include <string.h>
#include "heishom.h"

int main(void) {
    HeishomParams *p = NULL;
    if (heishom_params_new(&p) != HEISHOM_STATUS_OK) return 1;
    if (heishom_params_validate(p) != HEISHOM_STATUS_OK) return 2;

    double y[3] = {1.0, 0.0, 0.0};
    double v = 0.0;
    if (heishom_neg_generator_chi(p, y, &v) != HEISHOM_STATUS_OK || v != -2.0) return 3;

    heishom_params_set_rates(p, 4.0, 5.0, 1.0);
    if (heishom_params_validate(p) != HEISHOM_STATUS_INVALID_PARAMS) return 4;
    if (strcmp(heishom_last_error_message(), "params: k1 > 4 required") != 0) return 5;
    heishom_params_free(p);

    HeishomModel *m = NULL;
    if (heishom_model_new("missing", &m) != HEISHOM_STATUS_UNKNOWN_MODEL || m != NULL) return 6;

    printf("heishom %s ok\n", heishom_version());
    return 0;
}
