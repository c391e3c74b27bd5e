#include <stdio.h>
#include "lorasb.h"

#define CHECK(call)                                                           \
  do {                                                                        \
    enum LorasbStatus st_ = (call);                                           \
    if (st_ != LORASB_STATUS_OK) {                                            \
      const char *msg = lorasb_last_error();                                  \
      fprintf(stderr, "%s -> %d: %s\n", #call, (int)st_, msg ? msg : "");     \
      return 1;                                                               \
    }                                                                         \
  } while (0)

int main(void) {
  double w0[12] = {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0};
  double delta[12] = {3, 0, 0, 0, 0, 2, 0, 0, 0, 0, 0.5, 0};
  LorasbMatrix *w = NULL, *d = NULL, *r = NULL;
  LorasbAdapter *ad = NULL;
  CHECK(lorasb_matrix_new(3, 4, w0, &w));
  CHECK(lorasb_matrix_new(3, 4, delta, &d));
  CHECK(lorasb_adapter_init(LORASB_METHOD_LORA_SB, w, d, 2, 1.0, &ad));
  CHECK(lorasb_adapter_factor(ad, LORASB_FACTOR_R, &r));
  double rv[4];
  CHECK(lorasb_matrix_read(r, rv, 4));
  /* the best rank-2 part keeps the two largest singular values */
  if (rv[0] != 3.0 || rv[3] != 2.0 || rv[1] != 0.0 || rv[2] != 0.0) {
    fprintf(stderr, "unexpected R: %g %g %g %g\n", rv[0], rv[1], rv[2], rv[3]);
    return 1;
  }
  if (lorasb_adapter_factor(ad, 42, &r) != LORASB_STATUS_INVALID_ARGUMENT) return 1;
  printf("%s ok\n", lorasb_version());
  lorasb_matrix_free(r);
  lorasb_matrix_free(w);
  lorasb_matrix_free(d);
  lorasb_adapter_free(ad);
  return 0;
}
