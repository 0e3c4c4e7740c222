#include "lenskit/cli.hpp"

int main(int argc, char** argv) { return lenskit::cli::main(argc, argv); }
