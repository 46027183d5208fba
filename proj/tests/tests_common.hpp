#pragma once

#include <filesystem>
#include <string>

// Scratch directory for tests that touch the filesystem.
inline std::filesystem::path test_scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "mfl_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}
