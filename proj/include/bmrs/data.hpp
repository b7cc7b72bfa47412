#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bmrs/tensor.hpp"

namespace bmrs {

/// Images scaled to [0, 1] with shape [n, c, h, w] (or [n, dim] for synthetic
/// data) and integer labels in [0, n_classes).
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  std::size_t n_classes = 10;
  std::string split;

  std::size_t size() const { return labels.size(); }
  /// Per-sample shape (images.shape without the leading axis).
  Shape sample_shape() const { return Shape(images.shape.begin() + 1, images.shape.end()); }
};

/// Parses a big-endian IDX image file (magic 0x00000803) and label file
/// (magic 0x00000801). Errors carry the byte offset of the problem.
Dataset load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path);

/// Inverse of load_idx for images that came from 8-bit pixels.
void write_idx(const Dataset& ds, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path);

/// Seeded shuffle, then the first round(train_fraction * n) go to train.
std::pair<Dataset, Dataset> split(const Dataset& ds, double train_fraction, std::uint64_t seed);

Dataset subset(const Dataset& ds, std::span<const std::size_t> indices);

/// Gaussian clusters (unit variance per coordinate); class k is centred at
/// `separation` along axis k mod dim.
Dataset synth_blobs(std::size_t n, std::size_t n_classes, std::size_t dim, double separation,
                    std::uint64_t seed);

struct DataSplits {
  Dataset train;
  Dataset val;
  Dataset test;
};

/// MNIST / Fashion-MNIST directory with the four standard IDX files; the
/// original training set is split 80/20 into train/val.
DataSplits load_mnist_dir(const std::filesystem::path& dir, std::uint64_t split_seed);

/// --data-dir if given, else $BMRS_DATA_DIR, else the build-time default.
std::filesystem::path resolve_data_dir(const std::optional<std::string>& flag);

/// Rows `indices` of ds.images, reshaped to [indices.size()] + sample_shape.
Tensor gather_images(const Dataset& ds, std::span<const std::size_t> indices,
                     const Shape& sample_shape);
std::vector<int> gather_labels(const Dataset& ds, std::span<const std::size_t> indices);

}  // namespace bmrs
