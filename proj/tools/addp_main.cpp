#include <iostream>

#include "addp/cli.hpp"

int main(int argc, char** argv) {
  return addp::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
