#include <iostream>

#include "atlasbench/cli.hpp"

int main(int argc, char** argv) {
  return atlasbench::cli::run({argv + 1, argv + argc}, std::cout, std::cerr);
}
