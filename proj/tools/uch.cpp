#include <iostream>
#include <string>
#include <vector>

#include "uch/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return uch::cli::run(args, std::cout, std::cerr);
}
