#include "stmoge/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "stmoge/errors.hpp"

namespace stmoge {

// Howard Hinnant's days-from-civil algorithm.
int64_t civil_to_days(int year, int month, int day) {
  const int y = year - (month <= 2);
  const int era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153u * static_cast<unsigned>(month + (month > 2 ? -3 : 9)) + 2) / 5 +
                       static_cast<unsigned>(day) - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return static_cast<int64_t>(era) * 146097 + static_cast<int64_t>(doe) - 719468;
}

void days_to_civil(int64_t days, int& year, int& month, int& day) {
  days += 719468;
  const int64_t era = (days >= 0 ? days : days - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(days - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  const int64_t y = static_cast<int64_t>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  day = static_cast<int>(doy - (153 * mp + 2) / 5 + 1);
  month = static_cast<int>(mp < 10 ? mp + 3 : mp - 9);
  year = static_cast<int>(y + (month <= 2));
}

std::string format_iso_date(int64_t days) {
  int y, m, d;
  days_to_civil(days, y, m, d);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d-%02d-%02d", y, m, d);
  return buf;
}

int64_t parse_iso_date(const std::string& text) {
  int y = 0, m = 0, d = 0;
  if (std::sscanf(text.c_str(), "%d-%d-%d", &y, &m, &d) != 3 || m < 1 || m > 12 || d < 1 ||
      d > 31) {
    throw DataError("unparseable ISO date: '" + text + "'");
  }
  return civil_to_days(y, m, d);
}

RegionGraph build_grid_graph(const GridConfig& grid) {
  if (grid.rows < 1 || grid.cols < 1) {
    throw ConfigError("build_grid_graph: grid must be at least 1x1");
  }
  const int64_t rows = grid.rows, cols = grid.cols, n = rows * cols;
  Tensor adj({n, n});
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t c = 0; c < cols; ++c) {
      const int64_t i = r * cols + c;
      for (int64_t dr = -1; dr <= 1; ++dr) {
        for (int64_t dc = -1; dc <= 1; ++dc) {
          if (dr == 0 && dc == 0) continue;
          const int64_t rr = r + dr, cc = c + dc;
          if (rr < 0 || rr >= rows || cc < 0 || cc >= cols) continue;
          adj.at(i, rr * cols + cc) = 1.0;
        }
      }
    }
  }
  return RegionGraph{grid, adj};
}

Tensor normalize_adjacency(const Tensor& adjacency) {
  const int64_t n = adjacency.extent(0);
  Tensor out({n, n});
  for (int64_t i = 0; i < n; ++i) {
    double row_sum = 1.0;  // self-loop
    for (int64_t j = 0; j < n; ++j) row_sum += adjacency.at(i, j);
    for (int64_t j = 0; j < n; ++j) {
      out.at(i, j) = (adjacency.at(i, j) + (i == j ? 1.0 : 0.0)) / row_sum;
    }
  }
  return out;
}

int64_t CrimeTensor::total() const {
  int64_t acc = 0;
  for (int64_t v : counts) acc += v;
  return acc;
}

std::vector<WindowSample> make_windows(const CrimeTensor& tensor, int64_t window) {
  if (window < 1) throw ConfigError("make_windows: window length must be positive");
  if (tensor.slots <= window) {
    throw InsufficientDataError("make_windows: need more than " + std::to_string(window) +
                                " slots, have " + std::to_string(tensor.slots));
  }
  std::vector<WindowSample> samples;
  samples.reserve(static_cast<size_t>(tensor.slots - window));
  for (int64_t s = 0; s + window < tensor.slots; ++s) {
    samples.push_back(WindowSample{&tensor, s, window});
  }
  return samples;
}

DatasetSplit split_811(const std::vector<WindowSample>& samples) {
  const int64_t n = static_cast<int64_t>(samples.size());
  if (n < 10) {
    throw InsufficientDataError("split_811: need at least 10 samples, have " + std::to_string(n));
  }
  const int64_t n_val = n / 10;
  const int64_t n_test = n / 10;
  const int64_t n_train = n - n_val - n_test;
  DatasetSplit split;
  split.train.assign(samples.begin(), samples.begin() + n_train);
  split.val.assign(samples.begin() + n_train, samples.begin() + n_train + n_val);
  split.test.assign(samples.begin() + n_train + n_val, samples.end());
  return split;
}

// ---------------------------------------------------------------------------
// CSV ingestion

namespace {

// RFC-4180 style line split with quote handling. Multi-line quoted fields are
// not supported (incident feeds do not use them).
std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field.push_back(ch);
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      fields.push_back(std::move(field));
      field.clear();
    } else if (ch != '\r') {
      field.push_back(ch);
    }
  }
  fields.push_back(std::move(field));
  return fields;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t");
  size_t b = s.find_last_not_of(" \t");
  return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
}

// Minimal strptime subset: %Y %m %d %H %M %S match digit runs, every other
// pattern character must match the input literally.
bool parse_timestamp(const std::string& text, const std::string& pattern, int64_t& day_out) {
  int y = 0, mo = 0, d = 0;
  size_t ti = 0;
  for (size_t pi = 0; pi < pattern.size(); ++pi) {
    if (pattern[pi] == '%' && pi + 1 < pattern.size()) {
      const char code = pattern[++pi];
      const size_t width = code == 'Y' ? 4 : 2;
      if (ti + width > text.size()) return false;
      int value = 0;
      for (size_t k = 0; k < width; ++k) {
        if (!std::isdigit(static_cast<unsigned char>(text[ti]))) return false;
        value = value * 10 + (text[ti++] - '0');
      }
      switch (code) {
        case 'Y': y = value; break;
        case 'm': mo = value; break;
        case 'd': d = value; break;
        case 'H':
        case 'M':
        case 'S': break;  // time of day does not affect the daily slot
        default: return false;
      }
    } else {
      if (ti >= text.size() || text[ti] != pattern[pi]) return false;
      ++ti;
    }
  }
  if (y == 0 || mo < 1 || mo > 12 || d < 1 || d > 31) return false;
  day_out = civil_to_days(y, mo, d);
  return true;
}

bool parse_double(const std::string& text, double& out) {
  const char* begin = text.c_str();
  char* end = nullptr;
  out = std::strtod(begin, &end);
  return end != begin && end == begin + text.size() && std::isfinite(out);
}

}  // namespace

IngestResult ingest_csv(const std::string& path, const CsvSchema& schema,
                        const GridConfig& grid_config) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open CSV file: " + path);

  std::string line;
  if (!std::getline(in, line)) throw DataError("CSV file has no header row: " + path);
  const auto header = split_csv_line(line);
  auto column_of = [&](const std::string& name) {
    for (size_t i = 0; i < header.size(); ++i) {
      if (trim(header[i]) == name) return static_cast<int64_t>(i);
    }
    throw DataError("schema error: column '" + name + "' not found in " + path);
  };
  const int64_t col_ts = column_of(schema.timestamp_column);
  const int64_t col_lat = column_of(schema.latitude_column);
  const int64_t col_lon = column_of(schema.longitude_column);
  const int64_t col_cat = column_of(schema.category_column);
  const int64_t needed = std::max({col_ts, col_lat, col_lon, col_cat}) + 1;

  IngestReport report;
  std::vector<IncidentRecord> records;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ++report.rows_read;
    const auto fields = split_csv_line(line);
    if (static_cast<int64_t>(fields.size()) < needed) {
      ++report.dropped_unparseable;
      continue;
    }
    IncidentRecord rec;
    double lat = 0.0, lon = 0.0;
    if (!parse_timestamp(trim(fields[static_cast<size_t>(col_ts)]), schema.timestamp_format,
                         rec.day) ||
        !parse_double(trim(fields[static_cast<size_t>(col_lat)]), lat) ||
        !parse_double(trim(fields[static_cast<size_t>(col_lon)]), lon)) {
      ++report.dropped_unparseable;
      continue;
    }
    rec.category = trim(fields[static_cast<size_t>(col_cat)]);
    if (rec.category.empty() || lat < -90.0 || lat > 90.0 || lon < -180.0 || lon > 180.0) {
      ++report.dropped_unparseable;
      continue;
    }
    rec.latitude = lat;
    rec.longitude = lon;
    if (lat < grid_config.lat_min || lat > grid_config.lat_max || lon < grid_config.lon_min ||
        lon > grid_config.lon_max) {
      ++report.dropped_out_of_bounds;
      continue;
    }
    if (!schema.retained_categories.empty() &&
        std::find(schema.retained_categories.begin(), schema.retained_categories.end(),
                  rec.category) == schema.retained_categories.end()) {
      ++report.dropped_category;
      continue;
    }
    records.push_back(std::move(rec));
  }
  if (records.empty()) {
    throw DataError("empty dataset: no in-bounds rows ingested from " + path);
  }

  std::vector<std::string> categories = schema.retained_categories;
  if (categories.empty()) {
    std::set<std::string> seen;
    for (const auto& r : records) seen.insert(r.category);
    categories.assign(seen.begin(), seen.end());
  }

  int64_t day_min = records[0].day, day_max = records[0].day;
  for (const auto& r : records) {
    day_min = std::min(day_min, r.day);
    day_max = std::max(day_max, r.day);
  }

  CrimeTensor tensor;
  tensor.regions = grid_config.rows * grid_config.cols;
  tensor.slots = day_max - day_min + 1;
  tensor.categories = categories;
  tensor.start_day = day_min;
  tensor.counts.assign(
      static_cast<size_t>(tensor.regions * tensor.slots * tensor.category_count()), 0);

  const double cell_h = (grid_config.lat_max - grid_config.lat_min) / grid_config.rows;
  const double cell_w = (grid_config.lon_max - grid_config.lon_min) / grid_config.cols;
  for (const auto& r : records) {
    auto cat = std::find(categories.begin(), categories.end(), r.category);
    const int64_t c = cat - categories.begin();
    const int64_t row = std::min(
        static_cast<int64_t>((r.latitude - grid_config.lat_min) / cell_h), grid_config.rows - 1);
    const int64_t col = std::min(
        static_cast<int64_t>((r.longitude - grid_config.lon_min) / cell_w), grid_config.cols - 1);
    tensor.at(row * grid_config.cols + col, r.day - day_min, c) += 1;
    ++report.ingested;
  }

  return IngestResult{build_grid_graph(grid_config), std::move(tensor), report};
}

// ---------------------------------------------------------------------------
// Synthetic generator

namespace {

double hotspot_field(const std::vector<Hotspot>& spots, double row, double col) {
  double acc = 0.0;
  for (const auto& h : spots) {
    const double dr = row - h.row, dc = col - h.col;
    acc += h.intensity * std::exp(-(dr * dr + dc * dc) / (2.0 * h.sigma * h.sigma));
  }
  return acc;
}

void validate_spec(const SyntheticSpec& spec) {
  if (spec.rows < 1 || spec.cols < 1 || spec.days < 1 || spec.categories.empty()) {
    throw ConfigError("generate_synthetic: rows, cols, days, categories must be positive");
  }
  if (spec.category_hotspots.size() != spec.categories.size()) {
    throw ConfigError("generate_synthetic: need one hotspot list per category");
  }
  if (spec.shared_weight < 0.0 || spec.shared_weight > 1.0 || spec.hetero_weight < 0.0 ||
      spec.hetero_weight > 1.0) {
    throw ConfigError("generate_synthetic: weights must lie in [0,1]");
  }
  auto check_spots = [](const std::vector<Hotspot>& spots) {
    for (const auto& h : spots) {
      if (h.intensity < 0.0 || h.sigma <= 0.0) {
        throw ConfigError("generate_synthetic: hotspot intensities must be >= 0, sigma > 0");
      }
    }
  };
  check_spots(spec.shared_hotspots);
  for (const auto& spots : spec.category_hotspots) check_spots(spots);
}

}  // namespace

SyntheticSpec SyntheticSpec::heterogeneous_benchmark(int64_t rows, int64_t cols,
                                                     int64_t categories, int64_t days,
                                                     uint64_t seed) {
  SyntheticSpec spec;
  spec.rows = rows;
  spec.cols = cols;
  spec.days = days;
  spec.seed = seed;
  const double cr = (rows - 1) / 2.0, cc = (cols - 1) / 2.0;
  spec.shared_hotspots = {Hotspot{cr, cc, std::min(rows, cols) / 3.2, 8.0}};
  const double radius = 0.38 * std::min(rows, cols);
  for (int64_t c = 0; c < categories; ++c) {
    spec.categories.push_back("cat" + std::to_string(c));
    const double angle = 6.283185307179586 * static_cast<double>(c) / categories;
    spec.category_hotspots.push_back(
        {Hotspot{cr + radius * std::cos(angle), cc + radius * std::sin(angle), 1.3, 12.0}});
  }
  return spec;
}

SyntheticSpec SyntheticSpec::shared_benchmark(int64_t rows, int64_t cols, int64_t categories,
                                              int64_t days, uint64_t seed) {
  SyntheticSpec spec = heterogeneous_benchmark(rows, cols, categories, days, seed);
  spec.shared_weight = 1.0;
  spec.hetero_weight = 0.0;
  return spec;
}

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  validate_spec(spec);
  const int64_t n = spec.rows * spec.cols;
  const int64_t c_count = static_cast<int64_t>(spec.categories.size());

  GridConfig grid;
  grid.rows = spec.rows;
  grid.cols = spec.cols;
  grid.lat_max = static_cast<double>(spec.rows);
  grid.lon_max = static_cast<double>(spec.cols);

  CrimeTensor tensor;
  tensor.regions = n;
  tensor.slots = spec.days;
  tensor.categories = spec.categories;
  tensor.start_day = parse_iso_date("2020-01-01");
  tensor.counts.assign(static_cast<size_t>(n * spec.days * c_count), 0);

  Tensor rates({n, spec.days, c_count});
  Rng rng = Rng(spec.seed).split("synth");
  for (int64_t region = 0; region < n; ++region) {
    const double row = static_cast<double>(region / spec.cols);
    const double col = static_cast<double>(region % spec.cols);
    const double shared = hotspot_field(spec.shared_hotspots, row, col);
    for (int64_t t = 0; t < spec.days; ++t) {
      const double season =
          1.0 + spec.weekly_amplitude * std::sin(6.283185307179586 * (t % 7) / 7.0);
      for (int64_t c = 0; c < c_count; ++c) {
        const double hetero =
            hotspot_field(spec.category_hotspots[static_cast<size_t>(c)], row, col);
        const double rate =
            (spec.shared_weight * shared + spec.hetero_weight * hetero) * season + spec.base_rate;
        rates.at(region, t, c) = rate;
        tensor.at(region, t, c) = rng.poisson(rate);
      }
    }
  }

  return SyntheticData{build_grid_graph(grid), std::move(tensor), std::move(rates)};
}

}  // namespace stmoge
