#include <iostream>

#include "itrack/cli.hpp"

int main(int argc, char** argv) { return itrack::run_cli(argc, argv, std::cout, std::cerr); }
