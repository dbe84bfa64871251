#include <math.h>
#include <stdio.h>
#include <stdlib.h>
#include "phasealign.h"

#define CHECK(cond) do { if (!(cond)) { fprintf(stderr, "line %d: %s\n", __LINE__, #cond); return 1; } } while (0)

int main(void) {
    PaSample *s = NULL;
    CHECK(pa_sample_new(NULL, 0.0, 7, &s) == PA_STATUS_OK);
    size_t c, h, w;
    CHECK(pa_sample_shape(s, &c, &h, &w) == PA_STATUS_OK);
    CHECK(c == 12 && h == 96 && w == 96);
    float *img = malloc(c * h * w * sizeof(float));
    CHECK(pa_sample_image(s, img, c * h * w) == PA_STATUS_OK);
    CHECK(pa_sample_image(s, img, 3) == PA_STATUS_BUFFER_TOO_SMALL);
    char msg[256];
    CHECK(pa_last_error(msg, sizeof msg) > 1);
    free(img);

    size_t n = pa_sample_box_count(s);
    CHECK(n >= 1);
    PaImageBox gt[16], pred[16];
    PaBox boxes[16];
    CHECK(pa_sample_boxes(s, boxes, 16) == PA_STATUS_OK);
    for (size_t i = 0; i < n; i++) {
        gt[i].image = 0; gt[i].bbox = boxes[i]; gt[i].score = 0.0;
        pred[i] = gt[i]; pred[i].score = 1.0 - 0.1 * (double)i;
    }
    double ap = 0.0;
    CHECK(pa_average_precision(pred, n, gt, n, 1, PA_OVERLAP_IOU, 0.5, &ap) == PA_STATUS_OK);
    CHECK(ap == 1.0);
    CHECK(pa_average_precision(pred, n, gt, 0, 1, PA_OVERLAP_IOU, 0.5, &ap) == PA_STATUS_UNDEFINED);
    CHECK(isnan(ap));
    pa_sample_free(s);

    PaBox a = {1.0, 1.0, 2.0, 2.0}, b = {2.0, 1.0, 2.0, 2.0};
    CHECK(fabs(pa_iou(a, b) - 1.0 / 3.0) < 1e-15);
    CHECK(pa_iobb(a, b, false) == 0.5);
    CHECK(pa_sample_new(NULL, 0.0, 0, NULL) == PA_STATUS_NULL_POINTER);
    printf("ok %s\n", pa_version());
    return 0;
}
