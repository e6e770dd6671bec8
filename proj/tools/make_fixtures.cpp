// Regenerates the checked-in test fixtures: rsicam-fixtures <output-dir>
#include <iostream>

#include "rsicam/fixtures.hpp"

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: " << argv[0] << " <output-dir>\n";
    return 2;
  }
  try {
    rsicam::write_fixture_set(argv[1]);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
