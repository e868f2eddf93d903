#include <iostream>

#include "ctsan/cli.hpp"

int main(int argc, char** argv) { return ctsan::run_cli(argc, argv, std::cout, std::cerr); }
