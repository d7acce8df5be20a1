#include <iostream>
#include <string>
#include <vector>

#include "percept/evalcli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return percept::run_cli(args, std::cout, std::cerr);
}
