#include <math.h>
#include <stdio.h>

#include "uap.h"

#define CHECK(cond)                                            \
    do {                                                       \
        if (!(cond)) {                                         \
            fprintf(stderr, "line %d: %s\n", __LINE__, #cond); \
            return 1;                                          \
        }                                                      \
    } while (0)

int main(void) {
    double delta[3] = {3.0, -4.0, 12.0};
    double out[3];
    CHECK(uap_project_l2(delta, 3, 1.0, out) == UAP_OK);
    CHECK(fabs(sqrt(out[0] * out[0] + out[1] * out[1] + out[2] * out[2]) - 1.0) < 1e-12);

    CHECK(uap_project_l2(NULL, 3, 1.0, out) == UAP_ERR_NULL_POINTER);
    char msg[64];
    CHECK(uap_last_error(msg, sizeof msg) > 0);

    UapEncoder *enc = NULL;
    CHECK(uap_encoder_new(UAP_ENCODER_LINEAR, 1, 2, 2, 3, 1, &enc) == UAP_OK);
    double pixels[4] = {0.1, 0.2, 0.3, 0.4};
    double e[3];
    CHECK(uap_encoder_encode(enc, pixels, 4, e, 3) == UAP_OK);
    CHECK(fabs(e[0] * e[0] + e[1] * e[1] + e[2] * e[2] - 1.0) < 1e-12);
    uap_encoder_free(enc);

    UapAttackConfig cfg;
    CHECK(uap_attack_config_default(UAP_MODE_PATCH, 32, 32, &cfg) == UAP_OK);
    CHECK(cfg.mask_side == 5 && cfg.k == 10);

    printf("ok\n");
    return 0;
}
