#include "eraser/commands.h"

int main(int argc, char ** argv) {
    return eraser::run_cli(argc, argv);
}
