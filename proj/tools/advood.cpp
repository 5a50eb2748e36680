#include "advood/cli.hpp"

int main(int argc, char** argv) { return advood::cli::run(argc, argv); }
