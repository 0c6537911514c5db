#include <iostream>
#include <string>
#include <vector>

#include "gnmt/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return gnmt::run_cli(args, std::cout, std::cerr);
}
