#include <iostream>

#include "se2gnn/cli.hpp"

int main(int argc, char** argv) { return se2gnn::cli::run_cli(argc, argv, std::cout, std::cerr); }
