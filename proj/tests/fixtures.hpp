#pragma once

#include "ambulate/random.hpp"

#include <filesystem>
#include <fstream>
#include <string>

namespace ambulate::testing {

namespace fs = std::filesystem;

// Two subjects per partition, each walking through all six raw activities.
inline void write_ucihar_fixture(const fs::path& root, int rows_per_activity) {
  Rng rng(5);
  for (std::string part : {"train", "test"}) {
    fs::create_directories(root / part / "Inertial Signals");
    std::ofstream fx(root / part / "Inertial Signals" / ("total_acc_x_" + part + ".txt"));
    std::ofstream fy(root / part / "Inertial Signals" / ("total_acc_y_" + part + ".txt"));
    std::ofstream fz(root / part / "Inertial Signals" / ("total_acc_z_" + part + ".txt"));
    std::ofstream fl(root / part / ("y_" + part + ".txt"));
    std::ofstream fs_(root / part / ("subject_" + part + ".txt"));
    const int first = part == "train" ? 1 : 3;
    for (int s = first; s < first + 2; ++s) {
      for (int act = 1; act <= 6; ++act) {
        for (int r = 0; r < rows_per_activity; ++r) {
          for (auto* f : {&fx, &fy, &fz}) {
            for (int i = 0; i < 128; ++i) *f << "  " << (f == &fx ? 1.0 : 0.1) + 0.2 * rng.normal();
            *f << '\n';
          }
          fl << act << '\n';
          fs_ << s << '\n';
        }
      }
    }
  }
}

}  // namespace ambulate::testing
