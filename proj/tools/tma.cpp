#include "tma/cli.hpp"

int main(int argc, char** argv) { return tma::cli::main(argc, argv); }
