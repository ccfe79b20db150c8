#include <stdio.h>
#include <stdlib.h>

#include "editroll.h"

#define CHECK(call)                                                        \
    do {                                                                   \
        ErStatus s_ = (call);                                              \
        if (s_ != ER_STATUS_OK) {                                          \
            fprintf(stderr, "%s -> %d: %s\n", #call, (int)s_,              \
                    er_last_error_message());                              \
            return 1;                                                      \
        }                                                                  \
    } while (0)

int main(int argc, char **argv) {
    if (argc != 2) {
        fprintf(stderr, "usage: smoke CHECKPOINT\n");
        return 2;
    }
    ErModel *model = NULL;
    CHECK(er_model_load(argv[1], &model));
    size_t t = 0, p = 0;
    uint8_t offset = 0;
    CHECK(er_model_dims(model, &t, &p, &offset));

    ErSamplerConfig cfg = er_sampler_config_default();
    cfg.max_removals = 0;
    cfg.seed = 11;
    ErSession *session = NULL;
    CHECK(er_session_new(model, NULL, 0, cfg, &session));
    er_model_free(model);

    CHECK(er_session_edit(session, 0, 0, true));
    for (int i = 0; i < 5; i++) {
        size_t et, ep;
        ErEventKind kind;
        double lp;
        CHECK(er_session_step(session, &et, &ep, &kind, &lp));
        if (kind != ER_EVENT_KIND_ADD) {
            fprintf(stderr, "removal with a zero budget\n");
            return 1;
        }
    }
    CHECK(er_session_undo(session, NULL, NULL));
    CHECK(er_session_redo(session, NULL, NULL));
    if (er_session_redo(session, NULL, NULL) != ER_STATUS_STACK_EMPTY) {
        fprintf(stderr, "redo on an empty stack succeeded\n");
        return 1;
    }

    uint8_t *cells = calloc(t * p, 1);
    CHECK(er_session_roll(session, cells, t * p));
    size_t on = 0;
    for (size_t i = 0; i < t * p; i++) on += cells[i] != 0;
    free(cells);
    er_session_free(session);
    printf("%zu %zu %u %zu\n", t, p, (unsigned)offset, on);
    return on == 6 ? 0 : 1;
}
