#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace seqswap {

// Images stored H x W x C, values in [0, 1], one label per image.
struct Dataset {
  std::size_t side = 0;
  std::size_t channels = 1;
  std::size_t classes = 0;
  std::vector<double> images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return side * side * channels; }
  std::span<const double> image(std::size_t i) const {
    return {images.data() + i * image_size(), image_size()};
  }
  // Contiguous copy of the listed samples.
  std::vector<double> gather_images(std::span<const std::size_t> index) const;
  std::vector<int> gather_labels(std::span<const std::size_t> index) const;
  Dataset subset(std::size_t count) const;
};

// Each class owns a binary cell x cell template. A sample of class k is a
// noisy blank image with that template planted at one grid cell chosen
// uniformly at random, so the label is only recoverable by finding the cell.
struct SyntheticSpec {
  std::size_t train = 2000;
  std::size_t val = 500;
  std::size_t side = 28;
  std::size_t cell = 7;
  std::size_t classes = 10;
  double noise = 0.1;
};

struct SyntheticTask {
  std::vector<std::vector<double>> templates;  // cell * cell each
  Dataset train;
  Dataset val;
  std::vector<std::size_t> train_cells;  // planted grid cell per sample
  std::vector<std::size_t> val_cells;
};

SyntheticTask make_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

// IDX (MNIST family) files: u8 image tensors [N x H x W] and u8 label vectors.
Dataset load_idx(const std::string& images_path, const std::string& labels_path, std::size_t classes);

}  // namespace seqswap
