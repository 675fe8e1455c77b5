#include "gma/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return gma::run_cli(argc, argv, std::cout, std::cerr); }
