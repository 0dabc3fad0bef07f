#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "weightvol/nn.hpp"

namespace weightvol {

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  NetworkParams params;
  std::uint64_t seed = 0;
  std::size_t epoch = 0;

  bool operator==(const Checkpoint&) const = default;
};

std::string checkpoint_to_json(const Checkpoint& ckpt);
/// Throws ParseError on malformed or inconsistent content.
Checkpoint checkpoint_from_json(const std::string& text);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace weightvol
