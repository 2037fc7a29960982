// Regenerates data/demo_erosion.csv: make_demo [seed] > data/demo_erosion.csv
#include <cstdlib>
#include <iostream>

#include "gsae/demo.hpp"

int main(int argc, char** argv) {
  const std::uint64_t seed = argc > 1 ? std::strtoull(argv[1], nullptr, 10) : gsae::kDemoErosionSeed;
  gsae::write_csv(std::cout, gsae::demo_erosion(seed));
  return 0;
}
