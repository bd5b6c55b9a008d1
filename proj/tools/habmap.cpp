#include "habmap/cli.hpp"

int main(int argc, char** argv) { return habmap::cli::run(argc, argv); }
