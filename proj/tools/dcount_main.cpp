#include <iostream>

#include "dcount/cli.hpp"

int main(int argc, char** argv) {
  return dcount::cli::main(argc, argv, std::cout, std::cerr);
}
