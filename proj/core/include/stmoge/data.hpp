#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "stmoge/rng.hpp"
#include "stmoge/tensor.hpp"

namespace stmoge {

// ---------------------------------------------------------------------------
// Calendar helpers (proleptic Gregorian, no timezone: day indices count civil
// days since 1970-01-01 in the feed's local clock).

int64_t civil_to_days(int year, int month, int day);
void days_to_civil(int64_t days, int& year, int& month, int& day);
std::string format_iso_date(int64_t days);
int64_t parse_iso_date(const std::string& text);  // "YYYY-MM-DD"

// ---------------------------------------------------------------------------

struct GridConfig {
  int64_t rows = 1;
  int64_t cols = 1;
  double lat_min = 0.0;
  double lat_max = 1.0;
  double lon_min = 0.0;
  double lon_max = 1.0;
};

/// Grid-partitioned city: regions are cells, edges connect cells sharing a
/// side or a corner (8-neighborhood).
struct RegionGraph {
  GridConfig grid;
  Tensor adjacency;  // [N,N] binary, symmetric, zero diagonal

  int64_t regions() const { return grid.rows * grid.cols; }
};

RegionGraph build_grid_graph(const GridConfig& grid);

/// Adjacency with self-loops added and rows normalized to sum 1; the form the
/// spatial layers consume unless raw adjacency is requested.
Tensor normalize_adjacency(const Tensor& adjacency);

struct IncidentRecord {
  int64_t day;  // civil day index
  double latitude = 0.0;
  double longitude = 0.0;
  std::string category;
};

/// Counts indexed (region, time slot, category); slot length is one day.
struct CrimeTensor {
  int64_t regions = 0;
  int64_t slots = 0;
  std::vector<std::string> categories;
  std::vector<int64_t> counts;  // row-major [regions][slots][categories]
  int64_t start_day = 0;

  int64_t category_count() const { return static_cast<int64_t>(categories.size()); }
  int64_t& at(int64_t n, int64_t t, int64_t c) {
    return counts[static_cast<size_t>((n * slots + t) * category_count() + c)];
  }
  int64_t at(int64_t n, int64_t t, int64_t c) const {
    return counts[static_cast<size_t>((n * slots + t) * category_count() + c)];
  }
  int64_t total() const;
  std::string start_date() const { return format_iso_date(start_day); }
};

/// One supervised sample: input window of T slots, target slot T+1. Holds a
/// view into the source tensor rather than a copy.
struct WindowSample {
  const CrimeTensor* source = nullptr;
  int64_t start = 0;   // first input slot
  int64_t window = 0;  // number of input slots

  int64_t target_slot() const { return start + window; }
  int64_t input_count(int64_t n, int64_t t, int64_t c) const {
    return source->at(n, start + t, c);
  }
  int64_t target_count(int64_t n, int64_t c) const { return source->at(n, target_slot(), c); }
};

std::vector<WindowSample> make_windows(const CrimeTensor& tensor, int64_t window);

struct DatasetSplit {
  std::vector<WindowSample> train;
  std::vector<WindowSample> val;
  std::vector<WindowSample> test;
};

/// Chronological 8:1:1 split; val/test sizes floor, remainder to train.
DatasetSplit split_811(const std::vector<WindowSample>& samples);

// ---------------------------------------------------------------------------
// CSV ingestion

struct CsvSchema {
  std::string timestamp_column = "timestamp";
  std::string latitude_column = "latitude";
  std::string longitude_column = "longitude";
  std::string category_column = "category";
  /// strptime-style pattern supporting %Y %m %d %H %M %S literals.
  std::string timestamp_format = "%Y-%m-%d %H:%M:%S";
  /// Categories to keep, in channel order. Empty keeps every category seen,
  /// sorted alphabetically.
  std::vector<std::string> retained_categories;
};

struct IngestReport {
  int64_t rows_read = 0;
  int64_t ingested = 0;
  int64_t dropped_out_of_bounds = 0;
  int64_t dropped_unparseable = 0;
  int64_t dropped_category = 0;

  int64_t dropped() const {
    return dropped_out_of_bounds + dropped_unparseable + dropped_category;
  }
};

struct IngestResult {
  RegionGraph graph;
  CrimeTensor tensor;
  IngestReport report;
};

IngestResult ingest_csv(const std::string& path, const CsvSchema& schema, const GridConfig& grid);

// ---------------------------------------------------------------------------
// Synthetic data with controlled cross-category heterogeneity

struct Hotspot {
  double row = 0.0;
  double col = 0.0;
  double sigma = 1.0;
  double intensity = 1.0;
};

struct SyntheticSpec {
  int64_t rows = 8;
  int64_t cols = 8;
  int64_t days = 200;
  std::vector<std::string> categories;
  std::vector<Hotspot> shared_hotspots;
  std::vector<std::vector<Hotspot>> category_hotspots;  // one list per category
  double shared_weight = 0.2;
  double hetero_weight = 0.8;
  double weekly_amplitude = 0.3;
  double base_rate = 0.0;
  uint64_t seed = 1;

  /// Disjoint per-category hotspots far apart on the grid; the benchmark
  /// configuration for heterogeneity experiments.
  static SyntheticSpec heterogeneous_benchmark(int64_t rows, int64_t cols, int64_t categories,
                                               int64_t days, uint64_t seed);
  /// Same geometry with hetero_weight 0: all categories share one field.
  static SyntheticSpec shared_benchmark(int64_t rows, int64_t cols, int64_t categories,
                                        int64_t days, uint64_t seed);
};

struct SyntheticData {
  RegionGraph graph;
  CrimeTensor tensor;
  Tensor rates;  // [N, days, C] latent Poisson rates, the evaluation oracle
};

SyntheticData generate_synthetic(const SyntheticSpec& spec);

}  // namespace stmoge
