#include <iostream>
#include <string>
#include <vector>

#include "stochobs/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return stochobs::run_command(args, std::cout, std::cerr);
}
