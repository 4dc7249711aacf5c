// SPDX-License-Identifier: Apache-2.0
// Writes a synthetic blob dataset for the command-line tests.
#include <cstdlib>
#include <iostream>

#include "miniseg/data.hpp"

int main(int argc, char** argv) {
  if (argc < 3) {
    std::cerr << "usage: make_fixture <root> <count> [height] [width] [seed]\n";
    return 1;
  }
  const int count = std::atoi(argv[2]);
  const int h = argc > 3 ? std::atoi(argv[3]) : 64;
  const int w = argc > 4 ? std::atoi(argv[4]) : h;
  const unsigned long long seed = argc > 5 ? std::strtoull(argv[5], nullptr, 10) : 7;
  miniseg::generate_blob_dataset(argv[1], count, h, w, seed);
  return 0;
}
