#include "fsvi/cli.hpp"

int main(int argc, char** argv) { return fsvi::cli_main(argc, argv); }
