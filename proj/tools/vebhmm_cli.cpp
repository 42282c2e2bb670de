#include <iostream>

#include "vebhmm/cli.hpp"

int main(int argc, char** argv) { return vebhmm::cli::run_command(argc, argv, std::cout, std::cerr); }
