#include "bmrs/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>

#include "bmrs/errors.hpp"
#include "bmrs/rng.hpp"

#ifndef BMRS_DEFAULT_DATA_DIR
#define BMRS_DEFAULT_DATA_DIR "data/mnist"
#endif

namespace bmrs {

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string(), 0);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t offset,
                        const std::string& file) {
  if (offset + 4 > buf.size()) throw ParseError(file + ": truncated header", buf.size());
  return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
         (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

// Header of an IDX file with `rank` dims; returns the dims.
std::vector<std::uint32_t> parse_header(const std::vector<unsigned char>& buf, std::uint32_t magic,
                                        std::size_t rank, const std::string& file) {
  const std::uint32_t got = read_be32(buf, 0, file);
  if (got != magic) {
    char msg[96];
    std::snprintf(msg, sizeof msg, ": bad magic 0x%08x (expected 0x%08x)", got, magic);
    throw ParseError(file + msg, 0);
  }
  std::vector<std::uint32_t> dims(rank);
  std::uint64_t count = 1;
  for (std::size_t d = 0; d < rank; ++d) {
    dims[d] = read_be32(buf, 4 + 4 * d, file);
    count *= dims[d];
    if (count > std::numeric_limits<std::uint32_t>::max()) {
      throw ParseError(file + ": dimension product overflows", 4 + 4 * d);
    }
  }
  const std::size_t header = 4 + 4 * rank;
  if (buf.size() < header + count) {
    throw ParseError(file + ": truncated payload, expected " + std::to_string(count) + " bytes",
                     buf.size());
  }
  if (buf.size() > header + count) {
    throw ParseError(file + ": trailing bytes after payload", header + count);
  }
  return dims;
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  const auto idims = parse_header(img, kImageMagic, 3, images_path.string());
  const auto ldims = parse_header(lab, kLabelMagic, 1, labels_path.string());
  if (idims[0] != ldims[0]) {
    throw ParseError(labels_path.string() + ": " + std::to_string(ldims[0]) + " labels for " +
                         std::to_string(idims[0]) + " images",
                     4);
  }
  Dataset ds;
  ds.images = Tensor({idims[0], 1, idims[1], idims[2]});
  for (std::size_t i = 0; i < ds.images.size(); ++i) ds.images[i] = img[16 + i] / 255.0;
  ds.labels.resize(ldims[0]);
  int max_label = 0;
  for (std::size_t i = 0; i < ds.labels.size(); ++i) {
    ds.labels[i] = lab[8 + i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.n_classes = std::max<std::size_t>(10, static_cast<std::size_t>(max_label) + 1);
  return ds;
}

void write_idx(const Dataset& ds, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path) {
  if (ds.images.rank() != 4 || ds.images.dim(1) != 1) {
    throw ContractError("write_idx: expects [n, 1, h, w] images");
  }
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) throw ContractError("write_idx: cannot open output files");
  put_be32(img, kImageMagic);
  put_be32(img, static_cast<std::uint32_t>(ds.images.dim(0)));
  put_be32(img, static_cast<std::uint32_t>(ds.images.dim(2)));
  put_be32(img, static_cast<std::uint32_t>(ds.images.dim(3)));
  std::vector<char> bytes(ds.images.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(ds.images[i] * 255.0)));
  }
  img.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  put_be32(lab, kLabelMagic);
  put_be32(lab, static_cast<std::uint32_t>(ds.size()));
  for (int l : ds.labels) lab.put(static_cast<char>(l));
}

Dataset subset(const Dataset& ds, std::span<const std::size_t> indices) {
  Dataset out;
  out.n_classes = ds.n_classes;
  out.split = ds.split;
  Shape shape = ds.images.shape;
  shape[0] = indices.size();
  out.images = Tensor(shape);
  const std::size_t row = ds.images.size() / ds.images.dim(0);
  out.labels.reserve(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t i = indices[k];
    if (i >= ds.size()) throw ContractError("subset: index out of range");
    std::copy_n(ds.images.data.begin() + i * row, row, out.images.data.begin() + k * row);
    out.labels.push_back(ds.labels[i]);
  }
  return out;
}

std::pair<Dataset, Dataset> split(const Dataset& ds, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ContractError("split: train_fraction must lie in (0, 1)");
  }
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  // Fisher-Yates with open_uniform so the permutation does not depend on the
  // standard library's distribution implementation.
  for (std::size_t i = idx.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(open_uniform(rng) * static_cast<double>(i));
    std::swap(idx[i - 1], idx[std::min(j, i - 1)]);
  }
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * ds.size()));
  std::span<const std::size_t> all(idx);
  auto train = subset(ds, all.first(n_train));
  auto val = subset(ds, all.subspan(n_train));
  train.split = "train";
  val.split = "val";
  return {std::move(train), std::move(val)};
}

Dataset synth_blobs(std::size_t n, std::size_t n_classes, std::size_t dim, double separation,
                    std::uint64_t seed) {
  if (n_classes < 2 || dim == 0) throw ContractError("synth_blobs: need >= 2 classes and dim >= 1");
  Rng rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  Dataset ds;
  ds.n_classes = n_classes;
  ds.split = "synth";
  ds.images = Tensor({n, dim});
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(open_uniform(rng) * static_cast<double>(n_classes));
    ds.labels[i] = static_cast<int>(std::min(k, n_classes - 1));
    for (std::size_t d = 0; d < dim; ++d) ds.images[i * dim + d] = noise(rng);
    ds.images[i * dim + (ds.labels[i] % dim)] += separation;
  }
  return ds;
}

DataSplits load_mnist_dir(const std::filesystem::path& dir, std::uint64_t split_seed) {
  auto full = load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
  DataSplits s;
  std::tie(s.train, s.val) = split(full, 0.8, split_seed);
  s.test = load_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte");
  s.test.split = "test";
  return s;
}

std::filesystem::path resolve_data_dir(const std::optional<std::string>& flag) {
  if (flag && !flag->empty()) return *flag;
  if (const char* env = std::getenv("BMRS_DATA_DIR"); env && *env) return env;
  return BMRS_DEFAULT_DATA_DIR;
}

Tensor gather_images(const Dataset& ds, std::span<const std::size_t> indices,
                     const Shape& sample_shape) {
  const std::size_t row = ds.images.size() / std::max<std::size_t>(1, ds.images.dim(0));
  if (shape_size(sample_shape) != row) {
    throw ContractError("gather_images: sample shape " + shape_string(sample_shape) +
                        " does not hold " + std::to_string(row) + " values");
  }
  Shape shape{indices.size()};
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  Tensor out(shape);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    std::copy_n(ds.images.data.begin() + indices[k] * row, row, out.data.begin() + k * row);
  }
  return out;
}

std::vector<int> gather_labels(const Dataset& ds, std::span<const std::size_t> indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(ds.labels[i]);
  return out;
}

}  // namespace bmrs
