#include "flatmatch/cli.hpp"

int main(int argc, char** argv) { return flatmatch::cli::main(argc, argv); }
