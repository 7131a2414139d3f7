#include "stmoge/archive.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "stmoge/errors.hpp"

namespace stmoge {

namespace {

using nlohmann::json;

uint64_t to_le(uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    return __builtin_bswap64(v);
  }
  return v;
}

void write_u64_block(std::ofstream& out, const uint64_t* data, size_t count) {
  for (size_t i = 0; i < count; ++i) {
    const uint64_t le = to_le(data[i]);
    out.write(reinterpret_cast<const char*>(&le), sizeof(le));
  }
}

std::vector<uint64_t> read_u64_block(const std::string& path, size_t expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open blob: " + path);
  std::vector<uint64_t> raw(expected);
  in.read(reinterpret_cast<char*>(raw.data()),
          static_cast<std::streamsize>(expected * sizeof(uint64_t)));
  if (static_cast<size_t>(in.gcount()) != expected * sizeof(uint64_t)) {
    throw DataError("blob " + path + " shorter than expected " + std::to_string(expected) +
                    " entries");
  }
  for (auto& v : raw) v = to_le(v);
  return raw;
}

}  // namespace

void write_i64_blob(const std::string& path, const std::vector<int64_t>& values) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write blob: " + path);
  write_u64_block(out, reinterpret_cast<const uint64_t*>(values.data()), values.size());
}

void write_f64_blob(const std::string& path, const std::vector<double>& values) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write blob: " + path);
  static_assert(sizeof(double) == sizeof(uint64_t));
  std::vector<uint64_t> raw(values.size());
  std::memcpy(raw.data(), values.data(), values.size() * sizeof(double));
  write_u64_block(out, raw.data(), raw.size());
}

std::vector<int64_t> read_i64_blob(const std::string& path, size_t expected) {
  const auto raw = read_u64_block(path, expected);
  std::vector<int64_t> values(raw.size());
  std::memcpy(values.data(), raw.data(), raw.size() * sizeof(uint64_t));
  return values;
}

std::vector<double> read_f64_blob(const std::string& path, size_t expected) {
  const auto raw = read_u64_block(path, expected);
  std::vector<double> values(raw.size());
  std::memcpy(values.data(), raw.data(), raw.size() * sizeof(uint64_t));
  return values;
}

void save_dataset(const std::string& dir, const RegionGraph& graph, const CrimeTensor& tensor,
                  const Tensor* rates) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  json meta;
  meta["format"] = "stmoge-dataset-v1";
  meta["regions"] = tensor.regions;
  meta["slots"] = tensor.slots;
  meta["categories"] = tensor.categories;
  meta["start_date"] = tensor.start_date();
  meta["grid"] = {{"rows", graph.grid.rows},       {"cols", graph.grid.cols},
                  {"lat_min", graph.grid.lat_min}, {"lat_max", graph.grid.lat_max},
                  {"lon_min", graph.grid.lon_min}, {"lon_max", graph.grid.lon_max}};
  meta["blobs"]["counts"] = "counts.i64";
  if (rates != nullptr) meta["blobs"]["rates"] = "rates.f64";

  std::ofstream meta_out(fs::path(dir) / "meta.json");
  if (!meta_out) throw DataError("cannot write meta.json under " + dir);
  meta_out << meta.dump(2) << "\n";

  write_i64_blob((fs::path(dir) / "counts.i64").string(), tensor.counts);
  if (rates != nullptr) {
    write_f64_blob((fs::path(dir) / "rates.f64").string(), rates->values());
  }
}

DatasetArchive load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream meta_in(fs::path(dir) / "meta.json");
  if (!meta_in) throw DataError("not a dataset archive (missing meta.json): " + dir);
  json meta;
  try {
    meta_in >> meta;
  } catch (const json::exception& e) {
    throw DataError("malformed meta.json in " + dir + ": " + e.what());
  }
  if (meta.value("format", "") != std::string("stmoge-dataset-v1")) {
    throw DataError("unknown archive format in " + dir);
  }

  DatasetArchive archive;
  const auto& g = meta.at("grid");
  GridConfig grid{g.at("rows").get<int64_t>(), g.at("cols").get<int64_t>(),
                  g.at("lat_min").get<double>(), g.at("lat_max").get<double>(),
                  g.at("lon_min").get<double>(), g.at("lon_max").get<double>()};
  archive.graph = build_grid_graph(grid);

  CrimeTensor& t = archive.tensor;
  t.regions = meta.at("regions").get<int64_t>();
  t.slots = meta.at("slots").get<int64_t>();
  t.categories = meta.at("categories").get<std::vector<std::string>>();
  t.start_day = parse_iso_date(meta.at("start_date").get<std::string>());
  const size_t total = static_cast<size_t>(t.regions * t.slots * t.category_count());
  t.counts =
      read_i64_blob((fs::path(dir) / meta.at("blobs").at("counts").get<std::string>()).string(),
                    total);

  if (meta.at("blobs").contains("rates")) {
    auto values =
        read_f64_blob((fs::path(dir) / meta["blobs"]["rates"].get<std::string>()).string(), total);
    archive.rates =
        Tensor::from_values({t.regions, t.slots, t.category_count()}, std::move(values));
  }
  return archive;
}

}  // namespace stmoge
