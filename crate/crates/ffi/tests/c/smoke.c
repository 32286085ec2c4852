#include <math.h>
#include <stdio.h>
#include <stdlib.h>

#include "periface.h"

#define CHECK(call)                                                      \
    do {                                                                 \
        int32_t rc_ = (call);                                            \
        if (rc_ != PF_OK) {                                              \
            fprintf(stderr, "%s -> %d: %s\n", #call, rc_,                \
                    pf_last_error_message());                            \
            return 1;                                                    \
        }                                                                \
    } while (0)

int main(void) {
    PfGenerator *gen = NULL;
    CHECK(pf_generator_toy(&gen));
    size_t dim = pf_generator_latent_dim(gen);
    double *w = calloc(dim, sizeof(double));
    PfImage *face = NULL;
    CHECK(pf_generator_render(gen, w, dim, &face));
    size_t h = pf_image_height(face), wd = pf_image_width(face);

    PfInpainter *inp = NULL;
    CHECK(pf_inpainter_toy(&inp));
    PfInversionParams params = pf_inversion_params_default();
    params.max_iters = 2;
    PfInpaintResult *res = NULL;
    CHECK(pf_inpaint(inp, face, &params, &res));
    PfImage *post = NULL;
    CHECK(pf_result_image(res, PF_RESULT_IMAGE_POST, &post));
    double ssim = 0.0;
    CHECK(pf_metric(PF_METRIC_SSIM, post, post, &ssim));

    PfLossComponents ones = {1.0, 1.0, 1.0, 1.0, 1.0};
    double total = 0.0;
    CHECK(pf_loss_total(&ones, &total));

    int32_t bad = pf_generator_render(gen, w, 3, &face);
    const char *msg = pf_last_error_message();

    printf("%zux%zu trace=%zu ssim=%.6f total=%.3f bad=%d msg=%s\n", h, wd,
           pf_result_trace_len(res), ssim, total, bad, msg ? msg : "(null)");

    pf_image_free(post);
    pf_result_free(res);
    pf_inpainter_free(inp);
    pf_image_free(face);
    pf_generator_free(gen);
    free(w);
    return (fabs(ssim - 1.0) < 1e-9 && total == 2.111 && bad == PF_ERR_DIMENSION) ? 0 : 2;
}
