#include "seqswap/checkpoint.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "seqswap/config.hpp"
#include "seqswap/error.hpp"

namespace seqswap {

static_assert(std::endian::native == std::endian::little, "checkpoints store little-endian doubles");

using nlohmann::json;

std::string checkpoint_bytes(const Model& model) {
  const auto params = model.parameters();
  json manifest = json::array();
  std::size_t offset = 0;
  for (const auto& p : params) {
    manifest.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"offset", offset}});
    offset += p.tensor.size();
  }
  const json header = {{"format", "seqswap-checkpoint"},
                       {"version", 1},
                       {"config", model_config_json(model.config)},
                       {"elements", offset},
                       {"manifest", manifest}};
  std::string out = header.dump();
  out.push_back('\n');
  std::size_t pos = out.size();
  out.resize(pos + offset * sizeof(double));
  for (const auto& p : params) {
    const auto d = p.tensor.data();
    std::memcpy(out.data() + pos, d.data(), d.size_bytes());
    pos += d.size_bytes();
  }
  return out;
}

Model parse_checkpoint(const std::string& bytes, const std::string& origin) {
  const std::size_t nl = bytes.find('\n');
  if (nl == std::string::npos) throw FormatError(origin + ": missing header line");
  json header;
  try {
    header = json::parse(bytes.substr(0, nl));
  } catch (const json::exception& e) {
    throw FormatError(origin + ": unreadable header: " + e.what());
  }
  if (header.value("format", "") != "seqswap-checkpoint" || header.value("version", 0) != 1) {
    throw FormatError(origin + ": not a version 1 checkpoint");
  }
  ModelConfig config;
  try {
    config = parse_model_config(header.at("config"));
  } catch (const Error& e) {
    throw FormatError(origin + ": bad model config: " + e.what());
  } catch (const json::exception& e) {
    throw FormatError(origin + ": " + e.what());
  }
  Rng rng(0);
  Model model = init_model(config, rng);
  const auto params = model.parameters();

  const std::size_t payload = bytes.size() - nl - 1;
  if (payload % sizeof(double) != 0) throw FormatError(origin + ": payload is not whole float64 values");
  const std::size_t elements = payload / sizeof(double);
  const char* base = bytes.data() + nl + 1;

  const json& manifest = header.at("manifest");
  if (!manifest.is_array() || manifest.size() != params.size()) {
    throw FormatError(origin + ": manifest lists " + std::to_string(manifest.size()) + " tensors, config needs " +
                      std::to_string(params.size()));
  }
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const json& e = manifest[i];
    std::string name;
    Shape shape;
    std::size_t offset = 0;
    try {
      name = e.at("name").get<std::string>();
      shape = e.at("shape").get<Shape>();
      offset = e.at("offset").get<std::size_t>();
    } catch (const json::exception& ex) {
      throw FormatError(origin + ": manifest entry " + std::to_string(i) + ": " + ex.what());
    }
    if (name != params[i].name) {
      throw FormatError(origin + ": manifest entry " + std::to_string(i) + " is '" + name + "', expected '" +
                        params[i].name + "'");
    }
    if (shape != params[i].tensor.shape()) {
      throw FormatError(origin + ": " + name + " has shape " + shape_str(shape) + ", config needs " +
                        shape_str(params[i].tensor.shape()));
    }
    const std::size_t n = params[i].tensor.size();
    if (offset > elements || n > elements - offset) {
      throw FormatError(origin + ": " + name + " at offset " + std::to_string(offset) + " runs past the payload");
    }
    ranges.emplace_back(offset, offset + n);
    std::memcpy(params[i].tensor.data().data(), base + offset * sizeof(double), n * sizeof(double));
  }
  std::sort(ranges.begin(), ranges.end());
  for (std::size_t i = 1; i < ranges.size(); ++i) {
    if (ranges[i].first < ranges[i - 1].second) {
      throw FormatError(origin + ": manifest offsets overlap at element " + std::to_string(ranges[i].first));
    }
  }
  return model;
}

void write_atomic(const std::string& path, const std::string& content) {
  const std::filesystem::path target(path);
  if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
  const std::filesystem::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, target, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path + ": " + ec.message());
}

void save_checkpoint(const Model& model, const std::string& path) { write_atomic(path, checkpoint_bytes(model)); }

Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return parse_checkpoint(bytes, path);
}

}  // namespace seqswap
