// Copyright 2026 The Waffle Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <unistd.h>

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <string>

#include "waffle/io.hpp"

namespace fixture {

namespace fs = std::filesystem;

/// Fresh directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "waffle") {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            (tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

/// Writes <root>/<split>/velodyne/NNNNNN.bin and, for labeled scans,
/// labels/NNNNNN.label with raw ids taken from `map`.
inline void write_dataset(const fs::path& root, const std::string& split,
                          const std::vector<waffle::PointCloud>& scans, const waffle::ClassMap& map = {},
                          waffle::ScanFormat format = waffle::ScanFormat::kitti4) {
  fs::create_directories(root / split / "velodyne");
  fs::create_directories(root / split / "labels");
  for (std::size_t i = 0; i < scans.size(); ++i) {
    char stem[16];
    std::snprintf(stem, sizeof stem, "%06zu", i);
    waffle::write_scan(root / split / "velodyne" / (std::string(stem) + ".bin"), scans[i], format);
    if (!scans[i].has_labels()) continue;
    std::vector<std::uint32_t> words(scans[i].size());
    for (std::size_t p = 0; p < words.size(); ++p) {
      const std::uint32_t inst = scans[i].has_instances() ? scans[i].instances[p] : 0u;
      words[p] = map.to_raw(scans[i].labels[p]) | (inst << 16);
    }
    waffle::write_label_words(root / split / "labels" / (std::string(stem) + ".label"), words);
  }
}

}  // namespace fixture
