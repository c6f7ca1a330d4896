#include <iostream>

#include "labelseq/cli.hpp"

int main(int argc, char** argv) {
  return labelseq::run_cli(argc, argv, std::cout, std::cerr);
}
