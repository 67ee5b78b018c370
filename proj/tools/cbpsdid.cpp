#include "cbpsdid/cli.hpp"

#include <iostream>

int main(int argc, char** argv) {
  return cbpsdid::cli::run(argc, argv, std::cout, std::cerr);
}
