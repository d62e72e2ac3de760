#include <iostream>

#include "priveri/cli/cli.hpp"

int main(int argc, char** argv) { return priveri::cli::dispatch(argc, argv, std::cout, std::cerr); }
