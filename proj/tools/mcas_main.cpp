#include <iostream>

#include "mcas/cli.hpp"

int main(int argc, char** argv) { return mcas::run_cli(argc, argv, std::cout, std::cerr); }
