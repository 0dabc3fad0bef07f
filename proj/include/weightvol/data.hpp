#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "weightvol/linalg.hpp"

namespace weightvol {

struct Dataset {
  Matrix features;                  // n x d
  std::vector<std::size_t> labels;  // n entries, each < class_count
  std::size_t class_count = 0;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim() const noexcept { return features.cols(); }
};

/// Throws InvalidArgument unless the Dataset invariants hold.
void validate_dataset(const Dataset& d);

/// Rows `indices` of `d`, in order.
Dataset subset(const Dataset& d, std::span<const std::size_t> indices);
/// First `n` rows (or all, if fewer).
Dataset head(const Dataset& d, std::size_t n);

/// Subtracts the per-feature mean.
void mean_center(Dataset& d);

// MNIST-style IDX files: big-endian magic 0x00000803 (images) and 0x00000801
// (labels), followed by 32-bit dimensions and unsigned bytes.
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 std::optional<std::size_t> limit = std::nullopt);

void write_idx_images(const std::filesystem::path& path, std::size_t count, std::size_t rows, std::size_t cols,
                      std::span<const std::uint8_t> pixels);
void write_idx_labels(const std::filesystem::path& path, std::span<const std::uint8_t> labels);

/// Gaussian blobs centred on 2.0 * e_c (vertices of the standard simplex),
/// isotropic noise of standard deviation `spread`, labels interleaved c = i % k.
Dataset synth_blobs(std::size_t class_count, std::size_t dim, std::size_t n_per_class, double spread,
                    std::uint64_t seed);

/// Writes header f0..f{d-1},label followed by one row per sample.
void write_csv(const Dataset& d, const std::filesystem::path& path);

struct BatchPlan {
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
};

/// A permutation of 0..n-1, a pure function of (seed, epoch), cut into
/// ceil(n / batch_size) slices. The last partial slice is kept.
std::vector<std::vector<std::size_t>> batches(std::size_t n, const BatchPlan& plan);

}  // namespace weightvol
