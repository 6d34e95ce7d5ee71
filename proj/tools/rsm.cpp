#include <rsm/cli.hpp>

#include <iostream>

int main(int argc, char** argv) { return rsm::run_cli(argc, argv, std::cout, std::cerr); }
