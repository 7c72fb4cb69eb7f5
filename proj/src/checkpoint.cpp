#include "adlprune/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include <fmt/format.h>

namespace adlprune {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'A', 'D', 'L', 'P', 'C', 'K', 'P', 'T'};

struct ArrayRef {
  std::string name;
  Shape shape;
  std::span<const double> data;
};

json threshold_to_json(double thr) {
  if (std::isfinite(thr)) return thr;
  return thr > 0 ? "inf" : "-inf";
}

double threshold_from_json(const json& j) {
  if (j.is_number()) return j.get<double>();
  if (j == "inf") return INFINITY;
  if (j == "-inf") return -INFINITY;
  throw CheckpointError("checkpoint: bad prune threshold " + j.dump());
}

}  // namespace

std::string encode_checkpoint(const RunConfig& config, std::int64_t step, const ConformerModel& model,
                              const AdamOptimizer* optimizer, std::optional<double> prune_threshold) {
  std::vector<ArrayRef> arrays;
  for (const auto& p : model.parameters()) arrays.push_back({p.name, p.tensor->shape(), p.tensor->data()});
  if (optimizer != nullptr) {
    for (const auto& p : model.parameters()) {
      auto it = optimizer->moments().find(p.name);
      if (it == optimizer->moments().end()) continue;
      const Shape shape = p.tensor->shape();
      arrays.push_back({"adam.m." + p.name, shape, it->second.m});
      arrays.push_back({"adam.v." + p.name, shape, it->second.v});
    }
  }

  json manifest = json::array();
  std::uint64_t offset = 0;
  for (const auto& a : arrays) {
    manifest.push_back({{"name", a.name}, {"shape", a.shape}, {"offset", offset}});
    offset += a.data.size();
  }
  json header = {
      {"format_version", kCheckpointVersion},
      {"step", step},
      {"pruned", model.pruned()},
      {"rng", {{"seed", config.seed}}},
      {"config", config_to_json(config)},
      {"arrays", std::move(manifest)},
  };
  if (optimizer != nullptr) header["optimizer_step"] = optimizer->step();
  if (prune_threshold) header["prune_threshold"] = threshold_to_json(*prune_threshold);

  const std::string text = header.dump();
  std::string out(kMagic, sizeof kMagic);
  const std::uint64_t len = text.size();
  out.append(reinterpret_cast<const char*>(&len), sizeof len);
  out += text;
  for (const auto& a : arrays) {
    out.append(reinterpret_cast<const char*>(a.data.data()), a.data.size() * sizeof(double));
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof kMagic + 8 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointError("checkpoint: bad magic");
  }
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + sizeof kMagic, sizeof len);
  const std::size_t header_start = sizeof kMagic + sizeof len;
  if (len > bytes.size() - header_start) throw CheckpointError("checkpoint: truncated header");
  json header;
  try {
    header = json::parse(bytes.substr(header_start, len));
  } catch (const json::parse_error& e) {
    throw CheckpointError(fmt::format("checkpoint: unreadable header: {}", e.what()));
  }
  const std::size_t blob_start = header_start + len;
  const std::size_t blob_values = (bytes.size() - blob_start) / sizeof(double);
  if ((bytes.size() - blob_start) % sizeof(double) != 0) throw CheckpointError("checkpoint: ragged data blob");

  try {
    if (header.at("format_version") != kCheckpointVersion) {
      throw CheckpointError(fmt::format("checkpoint: unsupported format_version {}",
                                        header.at("format_version").dump()));
    }
    RunConfig config = config_from_json(header.at("config"));
    if (header.at("rng").at("seed") != config.seed) throw CheckpointError("checkpoint: seed echo mismatch");
    const std::int64_t step = header.at("step").get<std::int64_t>();
    const bool pruned = header.at("pruned").get<bool>();

    std::map<std::string, std::pair<Shape, std::vector<double>>> arrays;
    std::uint64_t expect_offset = 0;
    for (const auto& a : header.at("arrays")) {
      const std::string name = a.at("name").get<std::string>();
      const Shape shape = a.at("shape").get<Shape>();
      const std::uint64_t offset = a.at("offset").get<std::uint64_t>();
      const std::size_t n = numel(shape);
      if (offset != expect_offset || offset + n > blob_values) {
        throw CheckpointError(fmt::format("checkpoint: array {} lies outside the data blob", name));
      }
      std::vector<double> data(n);
      std::memcpy(data.data(), bytes.data() + blob_start + offset * sizeof(double), n * sizeof(double));
      if (!arrays.emplace(name, std::make_pair(shape, std::move(data))).second) {
        throw CheckpointError("checkpoint: duplicate array " + name);
      }
      expect_offset += n;
    }
    if (expect_offset != blob_values) throw CheckpointError("checkpoint: trailing data after last array");

    ConformerModel model(config.model, config.seed);
    if (pruned) model.strip_adl_sites();
    for (auto& p : model.parameters()) {
      auto it = arrays.find(p.name);
      if (it == arrays.end()) throw CheckpointError("checkpoint: missing array " + p.name);
      auto& [shape, data] = it->second;
      if (!pruned && shape != p.tensor->shape()) {
        throw CheckpointError(fmt::format("checkpoint: {} has shape {}, config implies {}", p.name,
                                          shape_str(shape), shape_str(p.tensor->shape())));
      }
      *p.tensor = Tensor::from(shape, std::move(data), true);
      arrays.erase(it);
    }
    model.validate_shapes();

    std::optional<AdamOptimizer> opt;
    if (header.contains("optimizer_step")) {
      opt.emplace(config.optim);
      opt->set_step(header.at("optimizer_step").get<std::int64_t>());
      for (const auto& p : model.parameters()) {
        auto m = arrays.find("adam.m." + p.name);
        auto v = arrays.find("adam.v." + p.name);
        if (m == arrays.end() && v == arrays.end()) continue;
        if (m == arrays.end() || v == arrays.end() || m->second.first != p.tensor->shape() ||
            v->second.first != p.tensor->shape()) {
          throw CheckpointError("checkpoint: inconsistent optimizer moments for " + p.name);
        }
        opt->moments()[p.name] = {std::move(m->second.second), std::move(v->second.second)};
        arrays.erase(m);
        arrays.erase(v);
      }
    }
    if (!arrays.empty()) throw CheckpointError("checkpoint: unexpected array " + arrays.begin()->first);

    std::optional<double> thr;
    if (header.contains("prune_threshold")) thr = threshold_from_json(header.at("prune_threshold"));
    return Checkpoint{std::move(config), step, std::move(model), std::move(opt), thr};
  } catch (const json::exception& e) {
    throw CheckpointError(fmt::format("checkpoint: malformed header: {}", e.what()));
  } catch (const ShapeError& e) {
    throw CheckpointError(fmt::format("checkpoint: {}", e.what()));
  }
}

void save_checkpoint(const std::string& path, const RunConfig& config, std::int64_t step,
                     const ConformerModel& model, const AdamOptimizer* optimizer,
                     std::optional<double> prune_threshold) {
  const std::string bytes = encode_checkpoint(config, step, model, optimizer, prune_threshold);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return decode_checkpoint(buf.str());
}

Checkpoint load_checkpoint(const std::string& path, const RunConfig& expected) {
  Checkpoint c = load_checkpoint(path);
  if (config_to_json(c.config) != config_to_json(expected)) {
    throw CheckpointError(fmt::format("checkpoint {} was written with a different config", path));
  }
  return c;
}

}  // namespace adlprune
