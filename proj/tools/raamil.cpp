#include <iostream>

#include "raamil/cli.hpp"

int main(int argc, char** argv) { return raamil::run_cli(argc, argv, std::cout, std::cerr); }
