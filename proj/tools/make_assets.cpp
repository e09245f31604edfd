// Regenerates the shipped track and map files from their generators.
#include <filesystem>
#include <iostream>

#include "conbat/sim/f110.hpp"
#include "conbat/sim/mushr.hpp"

int main(int argc, char** argv) {
  const std::filesystem::path root = argc > 1 ? argv[1] : "data";
  std::filesystem::create_directories(root / "tracks");
  std::filesystem::create_directories(root / "maps");
  conbat::sim::save_track_csv(conbat::sim::make_playground_track(), root / "tracks" / "playground.csv");
  conbat::sim::save_map(conbat::sim::make_office_map(), root / "maps" / "office.pgm");
  std::cout << "wrote assets under " << root << "\n";
  return 0;
}
