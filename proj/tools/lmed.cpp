#include "lmed/cli.hpp"

int main(int argc, char** argv) { return lmed::cli::run(argc, argv); }
