#include "twophase/cli.hpp"

int main(int argc, char** argv) { return twophase::cli::dispatch(argc, argv); }
