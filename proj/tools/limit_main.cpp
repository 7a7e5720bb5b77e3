#include "limit/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return limit::run_cli(argc, argv, std::cout, std::cerr); }
