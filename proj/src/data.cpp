#include "weightvol/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <string>

#include "weightvol/error.hpp"
#include "weightvol/rng.hpp"

namespace weightvol {

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw Error(ErrorKind::DatasetNotFound, "dataset file not found: " + path.string());
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset, const std::filesystem::path& path) {
  if (offset + 4 > bytes.size()) throw Error(ErrorKind::TruncatedFile, "truncated IDX header in " + path.string());
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>((v >> 24) & 0xff), static_cast<char>((v >> 16) & 0xff),
                     static_cast<char>((v >> 8) & 0xff), static_cast<char>(v & 0xff)};
  out.write(b, 4);
}

}  // namespace

void validate_dataset(const Dataset& d) {
  if (d.size() == 0) throw Error(ErrorKind::InvalidArgument, "dataset is empty");
  if (d.features.rows() != d.size()) throw Error(ErrorKind::ShapeMismatch, "dataset features/labels row mismatch");
  for (std::size_t y : d.labels)
    if (y >= d.class_count) throw Error(ErrorKind::InvalidArgument, "label exceeds class_count");
  for (double v : d.features.data())
    if (!std::isfinite(v)) throw Error(ErrorKind::InvalidArgument, "non-finite feature value");
}

Dataset subset(const Dataset& d, std::span<const std::size_t> indices) {
  Dataset out;
  out.class_count = d.class_count;
  out.features = Matrix(indices.size(), d.dim());
  out.labels.resize(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto src = d.features.row(indices[i]);
    std::copy(src.begin(), src.end(), out.features.row(i).begin());
    out.labels[i] = d.labels[indices[i]];
  }
  return out;
}

Dataset head(const Dataset& d, std::size_t n) {
  std::vector<std::size_t> idx(std::min(n, d.size()));
  std::iota(idx.begin(), idx.end(), 0);
  return subset(d, idx);
}

void mean_center(Dataset& d) {
  const std::size_t n = d.size();
  if (n == 0) return;
  Vector mean(d.dim(), 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    auto row = d.features.row(r);
    for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += row[j];
  }
  for (double& m : mean) m /= static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r) {
    auto row = d.features.row(r);
    for (std::size_t j = 0; j < mean.size(); ++j) row[j] -= mean[j];
  }
}

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 std::optional<std::size_t> limit) {
  const auto images = read_file(images_path);
  const auto labels = read_file(labels_path);

  if (read_be32(images, 0, images_path) != kImageMagic) {
    throw Error(ErrorKind::BadMagic, "bad IDX image magic in " + images_path.string());
  }
  if (read_be32(labels, 0, labels_path) != kLabelMagic) {
    throw Error(ErrorKind::BadMagic, "bad IDX label magic in " + labels_path.string());
  }
  const std::size_t n_images = read_be32(images, 4, images_path);
  const std::size_t rows = read_be32(images, 8, images_path);
  const std::size_t cols = read_be32(images, 12, images_path);
  const std::size_t n_labels = read_be32(labels, 4, labels_path);
  if (n_images != n_labels) {
    throw Error(ErrorKind::CountMismatch, "IDX image count " + std::to_string(n_images) + " != label count " +
                                              std::to_string(n_labels));
  }
  const std::size_t dim = rows * cols;
  if (images.size() < 16 + n_images * dim) throw Error(ErrorKind::TruncatedFile, "truncated IDX image payload");
  if (labels.size() < 8 + n_labels) throw Error(ErrorKind::TruncatedFile, "truncated IDX label payload");

  const std::size_t n = limit ? std::min(*limit, n_images) : n_images;
  Dataset d;
  d.features = Matrix(n, dim);
  d.labels.resize(n);
  std::size_t max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    auto row = d.features.row(i);
    const std::uint8_t* px = images.data() + 16 + i * dim;
    for (std::size_t j = 0; j < dim; ++j) row[j] = static_cast<double>(px[j]) / 255.0;
    d.labels[i] = labels[8 + i];
    max_label = std::max(max_label, d.labels[i]);
  }
  d.class_count = std::max<std::size_t>(10, max_label + 1);
  mean_center(d);
  validate_dataset(d);
  return d;
}

void write_idx_images(const std::filesystem::path& path, std::size_t count, std::size_t rows, std::size_t cols,
                      std::span<const std::uint8_t> pixels) {
  if (pixels.size() != count * rows * cols) throw Error(ErrorKind::ShapeMismatch, "write_idx_images: size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  put_be32(out, kImageMagic);
  put_be32(out, static_cast<std::uint32_t>(count));
  put_be32(out, static_cast<std::uint32_t>(rows));
  put_be32(out, static_cast<std::uint32_t>(cols));
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

void write_idx_labels(const std::filesystem::path& path, std::span<const std::uint8_t> labels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  put_be32(out, kLabelMagic);
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

Dataset synth_blobs(std::size_t class_count, std::size_t dim, std::size_t n_per_class, double spread,
                    std::uint64_t seed) {
  if (class_count < 2) throw Error(ErrorKind::InvalidArgument, "synth_blobs: class_count must be >= 2");
  if (class_count > dim) throw Error(ErrorKind::InvalidArgument, "synth_blobs: class_count must not exceed dim");
  if (n_per_class == 0) throw Error(ErrorKind::InvalidArgument, "synth_blobs: n_per_class must be >= 1");
  if (!(spread >= 0.0)) throw Error(ErrorKind::InvalidArgument, "synth_blobs: spread must be >= 0");

  Rng rng(derive_seed(seed, 0xb10b5));
  Dataset d;
  d.class_count = class_count;
  const std::size_t n = class_count * n_per_class;
  d.features = Matrix(n, dim);
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % class_count;
    d.labels[i] = c;
    auto row = d.features.row(i);
    for (std::size_t j = 0; j < dim; ++j) row[j] = spread * rng.normal();
    row[c] += 2.0;
  }
  mean_center(d);
  return d;
}

void write_csv(const Dataset& d, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  for (std::size_t j = 0; j < d.dim(); ++j) out << 'f' << j << ',';
  out << "label\n";
  out.precision(17);
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (double v : d.features.row(i)) out << v << ',';
    out << d.labels[i] << '\n';
  }
}

std::vector<std::vector<std::size_t>> batches(std::size_t n, const BatchPlan& plan) {
  if (plan.batch_size == 0) throw Error(ErrorKind::InvalidArgument, "batch_size must be >= 1");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(derive_seed(plan.seed, 0xba7c4000ULL + plan.epoch));
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.next_u64() % i);
    std::swap(perm[i - 1], perm[j]);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += plan.batch_size) {
    const std::size_t end = std::min(n, start + plan.batch_size);
    out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(start), perm.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

}  // namespace weightvol
