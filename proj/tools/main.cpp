#include "caps/cli.hpp"

int main(int argc, char** argv) { return caps::run_command(argc, argv); }
