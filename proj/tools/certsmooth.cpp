#include "certsmooth/cli.hpp"

int main(int argc, char** argv) { return certsmooth::cli::run(argc, argv); }
