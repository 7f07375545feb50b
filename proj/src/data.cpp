#include "seqswap/data.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>

#include "seqswap/error.hpp"
#include "seqswap/rng.hpp"

namespace seqswap {

std::vector<double> Dataset::gather_images(std::span<const std::size_t> index) const {
  std::vector<double> out;
  out.reserve(index.size() * image_size());
  for (std::size_t i : index) {
    auto img = image(i);
    out.insert(out.end(), img.begin(), img.end());
  }
  return out;
}

std::vector<int> Dataset::gather_labels(std::span<const std::size_t> index) const {
  std::vector<int> out;
  out.reserve(index.size());
  for (std::size_t i : index) out.push_back(labels.at(i));
  return out;
}

Dataset Dataset::subset(std::size_t count) const {
  Dataset d = *this;
  count = std::min(count, size());
  d.labels.resize(count);
  d.images.resize(count * image_size());
  return d;
}

namespace {

void fill_split(Dataset& d, std::vector<std::size_t>& cells, std::size_t count, const SyntheticSpec& spec,
                const std::vector<std::vector<double>>& templates, Rng& rng) {
  const std::size_t grid = spec.side / spec.cell;
  d.side = spec.side;
  d.channels = 1;
  d.classes = spec.classes;
  d.images.assign(count * spec.side * spec.side, 0.0);
  d.labels.resize(count);
  cells.resize(count);
  for (std::size_t n = 0; n < count; ++n) {
    const int label = static_cast<int>(rng.below(spec.classes));
    const std::size_t cell = rng.below(grid * grid);
    double* img = d.images.data() + n * spec.side * spec.side;
    const std::size_t y0 = (cell / grid) * spec.cell, x0 = (cell % grid) * spec.cell;
    const auto& tpl = templates[label];
    for (std::size_t y = 0; y < spec.cell; ++y)
      for (std::size_t x = 0; x < spec.cell; ++x) img[(y0 + y) * spec.side + x0 + x] = tpl[y * spec.cell + x];
    for (std::size_t i = 0; i < spec.side * spec.side; ++i) {
      img[i] = std::clamp(img[i] + rng.normal(0.0, spec.noise), 0.0, 1.0);
    }
    d.labels[n] = label;
    cells[n] = cell;
  }
}

}  // namespace

SyntheticTask make_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  if (spec.cell == 0 || spec.side % spec.cell != 0) {
    throw ConfigError("synthetic task: image side must be a multiple of the cell size");
  }
  if (spec.classes < 2) throw ConfigError("synthetic task: need at least two classes");
  if (spec.noise < 0) throw ConfigError("synthetic task: noise must be nonnegative");
  Rng rng(seed);
  SyntheticTask task;
  const std::size_t px = spec.cell * spec.cell;
  // Templates are redrawn until they are pairwise distinct in at least a
  // quarter of their pixels.
  while (task.templates.size() < spec.classes) {
    std::vector<double> t(px);
    for (double& v : t) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
    bool ok = std::count(t.begin(), t.end(), 1.0) >= static_cast<long>(px / 4);
    for (const auto& other : task.templates) {
      std::size_t diff = 0;
      for (std::size_t i = 0; i < px; ++i) diff += t[i] != other[i];
      ok = ok && diff >= px / 4;
    }
    if (ok) task.templates.push_back(std::move(t));
  }
  fill_split(task.train, task.train_cells, spec.train, spec, task.templates, rng);
  fill_split(task.val, task.val_cells, spec.val, spec, task.templates, rng);
  return task;
}

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off, const std::string& path) {
  if (off + 4 > b.size()) throw FormatError(path + ": truncated IDX header at offset " + std::to_string(off));
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

// Returns dims and the payload offset of a u8 IDX file of the given rank.
std::vector<std::size_t> idx_header(const std::vector<unsigned char>& b, std::size_t rank, const std::string& path) {
  const std::uint32_t magic = be32(b, 0, path);
  const std::uint32_t want = 0x00000800u | static_cast<std::uint32_t>(rank);
  if (magic != want) {
    throw FormatError(path + ": bad IDX magic at offset 0 (expected u8 rank " + std::to_string(rank) + ")");
  }
  std::vector<std::size_t> dims;
  std::size_t total = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    dims.push_back(be32(b, 4 + 4 * i, path));
    total *= dims.back();
  }
  const std::size_t off = 4 + 4 * rank;
  if (b.size() != off + total) {
    throw FormatError(path + ": payload at offset " + std::to_string(off) + " has " +
                      std::to_string(b.size() - off) + " bytes, header declares " + std::to_string(total));
  }
  return dims;
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path, std::size_t classes) {
  const auto ib = read_file(images_path);
  const auto lb = read_file(labels_path);
  const auto idims = idx_header(ib, 3, images_path);
  const auto ldims = idx_header(lb, 1, labels_path);
  if (idims[0] != ldims[0]) throw FormatError("IDX image and label counts differ");
  if (idims[1] != idims[2]) throw FormatError(images_path + ": images must be square");
  Dataset d;
  d.side = idims[1];
  d.channels = 1;
  d.classes = classes;
  d.images.resize(ib.size() - 16);
  std::transform(ib.begin() + 16, ib.end(), d.images.begin(), [](unsigned char v) { return v / 255.0; });
  d.labels.resize(ldims[0]);
  for (std::size_t i = 0; i < ldims[0]; ++i) {
    const int label = lb[8 + i];
    if (static_cast<std::size_t>(label) >= classes) {
      throw ContractError(labels_path + ": label " + std::to_string(label) + " outside the configured " +
                          std::to_string(classes) + " classes");
    }
    d.labels[i] = label;
  }
  return d;
}

}  // namespace seqswap
