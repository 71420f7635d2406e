#include <iostream>

#include "uvtm/cli.hpp"

int main(int argc, char** argv) { return uvtm::cli::run(argc, argv, std::cout, std::cerr); }
