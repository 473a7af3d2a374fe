#include <math.h>
#include <stdio.h>
#include <string.h>

#include "trilora.h"

#define CHECK(call)                                                              \
  do {                                                                           \
    TriloraStatus s_ = (call);                                                   \
    if (s_ != TRILORA_STATUS_OK) {                                               \
      const char *msg_ = trilora_last_error();                                   \
      fprintf(stderr, "%s failed: %d %s\n", #call, (int)s_, msg_ ? msg_ : "");   \
      return 1;                                                                  \
    }                                                                            \
  } while (0)

int main(void) {
  TriloraSpec spec = {4, 3, 2, 2, TRILORA_MODE_ABC, TRILORA_INIT_LECUN_ALL, 7, 1.0};
  TriloraAdapter *ad = NULL;
  CHECK(trilora_adapter_new(&spec, &ad));

  double x[3 * 2] = {1, 0, 0, 1, 1, -1};
  double u[4 * 2] = {1, 2, 3, 4, 5, 6, 7, 8};
  double y[4 * 2];
  CHECK(trilora_adapter_forward(ad, x, 6, 2, y, 8));

  double ga[6], gb[4], gc[8];
  TriloraGradsOut out = {ga, 6, gb, 4, gc, 8};
  CHECK(trilora_adapter_grads(ad, x, 6, u, 8, 2, out));

  TriloraRates rates;
  CHECK(trilora_lr_ratios(TRILORA_RATIO_MODE_EQ8, 1.0, 4.0, 4, 3, &rates));
  if (rates.a != 1.0 || rates.b != 8.0 || rates.c != 2.0) {
    fprintf(stderr, "unexpected rates %g %g %g\n", rates.a, rates.b, rates.c);
    return 1;
  }
  TriloraGrads in = {ga, 6, gb, 4, gc, 8};
  rates.a = rates.b = rates.c = 1e-3;
  CHECK(trilora_signsgd_step(ad, in, rates));

  TriloraAdamState *st = NULL;
  TriloraAdamConfig cfg = {0.9, 0.999, 1e-8, 0.01};
  CHECK(trilora_adam_state_new(ad, &st));
  CHECK(trilora_adamw_step(ad, st, in, &cfg, rates));
  if (trilora_adam_state_step(st) != 1) return 1;

  char *json = NULL;
  CHECK(trilora_checkpoint_to_json(ad, TRILORA_ENCODING_BASE64, &json));
  TriloraAdapter *back = NULL;
  CHECK(trilora_checkpoint_from_json(json, &back));
  double a1[6], b1[4], c1[8], a2[6], b2[4], c2[8];
  CHECK(trilora_adapter_factors(ad, (TriloraGradsOut){a1, 6, b1, 4, c1, 8}));
  CHECK(trilora_adapter_factors(back, (TriloraGradsOut){a2, 6, b2, 4, c2, 8}));
  if (memcmp(a1, a2, sizeof a1) || memcmp(b1, b2, sizeof b1) || memcmp(c1, c2, sizeof c1)) {
    fprintf(stderr, "checkpoint round trip changed the factors\n");
    return 1;
  }

  if (trilora_adapter_forward(ad, x, 5, 2, y, 8) != TRILORA_STATUS_SHAPE_MISMATCH) return 1;
  if (trilora_last_error() == NULL) return 1;
  if (fabs(trilora_mcc(10, 10, 0, 0) - 1.0) > 1e-15) return 1;

  trilora_string_free(json);
  trilora_adam_state_free(st);
  trilora_adapter_free(back);
  trilora_adapter_free(ad);
  puts("ok");
  return 0;
}
