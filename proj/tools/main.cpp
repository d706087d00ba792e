#include <iostream>
#include <string>
#include <vector>

#include "scedit/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return scedit::dispatch(args, std::cout, std::cerr);
}
