#include <iostream>

#include "ttgp/cli.hpp"

int main(int argc, char** argv) { return ttgp::run_cli(argc, argv, std::cout, std::cerr); }
