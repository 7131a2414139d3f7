#pragma once

#include <optional>
#include <string>

#include "stmoge/data.hpp"

namespace stmoge {

// Dataset archive: a directory holding meta.json plus raw little-endian
// binary blobs (64-bit ints for counts, 64-bit floats for rate fields).
// Round-trips are bit-exact.

struct DatasetArchive {
  RegionGraph graph;
  CrimeTensor tensor;
  std::optional<Tensor> rates;  // present for synthetic datasets
};

void save_dataset(const std::string& dir, const RegionGraph& graph, const CrimeTensor& tensor,
                  const Tensor* rates = nullptr);

DatasetArchive load_dataset(const std::string& dir);

// Raw blob helpers shared with the checkpoint writer.
void write_i64_blob(const std::string& path, const std::vector<int64_t>& values);
void write_f64_blob(const std::string& path, const std::vector<double>& values);
std::vector<int64_t> read_i64_blob(const std::string& path, size_t expected);
std::vector<double> read_f64_blob(const std::string& path, size_t expected);

}  // namespace stmoge
