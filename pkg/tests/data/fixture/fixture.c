/* Deliberate getenv -> system flow for integration tests. */
#include <stdio.h>
#include <stdlib.h>

int main(int argc, char **argv) {
    char cmd[256];
    const char *dev = getenv("DEV_NAME");
    if (!dev)
        return 1;
    snprintf(cmd, sizeof cmd, "/usr/bin/eject %s", dev);
    system(cmd);
    return 0;
}
