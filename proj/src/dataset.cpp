#include "entsel/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "entsel/format.hpp"
#include "entsel/rng.hpp"

namespace entsel {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::size_t round_half_away(double x) {
  return static_cast<std::size_t>(std::floor(x + 0.5));
}

std::unordered_map<std::uint64_t, std::size_t> build_index(const Dataset& data) {
  std::unordered_map<std::uint64_t, std::size_t> index;
  index.reserve(data.samples.size());
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const auto [it, inserted] = index.emplace(data.samples[i].sample_id, i);
    (void)it;
    if (!inserted)
      throw std::runtime_error("dataset: duplicate sample_id " +
                               std::to_string(data.samples[i].sample_id));
  }
  return index;
}

void validate_config(const SyntheticConfig& c) {
  if (c.n_groups < 3)
    throw std::invalid_argument("generate_synthetic: need at least 3 groups");
  if (c.samples_per_group.min < 1 || c.samples_per_group.max < c.samples_per_group.min)
    throw std::invalid_argument("generate_synthetic: bad samples_per_group range");
  if (c.samples_per_group.heavy_tail_weight < 0.0 || c.samples_per_group.heavy_tail_weight > 1.0)
    throw std::invalid_argument("generate_synthetic: heavy_tail_weight outside [0, 1]");
  if (c.duplicate_fraction < 0.0 || c.duplicate_fraction >= 1.0)
    throw std::invalid_argument("generate_synthetic: duplicate_fraction outside [0, 1)");
  if (c.perturbation_sigma < 0.0)
    throw std::invalid_argument("generate_synthetic: negative perturbation_sigma");
  if (!(c.class_prior > 0.0 && c.class_prior < 1.0))
    throw std::invalid_argument("generate_synthetic: class_prior outside (0, 1)");
  if (c.class_separation < 0.0)
    throw std::invalid_argument("generate_synthetic: negative class_separation");
  const bool has_vec = c.feature_dim > 0;
  const bool has_grid = c.grid.has_value();
  if (has_vec == has_grid)
    throw std::invalid_argument(
        "generate_synthetic: set exactly one of feature_dim or grid");
  if (has_grid && (c.grid->rows == 0 || c.grid->cols == 0))
    throw std::invalid_argument("generate_synthetic: empty grid shape");
}

std::size_t draw_group_size(const GroupSizeSpec& spec, Rng& rng) {
  if (spec.max == spec.min) return spec.min;
  const std::size_t span = spec.max - spec.min;
  const bool heavy = rng.uniform() < spec.heavy_tail_weight;
  std::size_t lo, hi;
  if (heavy) {
    lo = spec.min + (2 * span) / 3;
    hi = spec.max;
  } else {
    lo = spec.min;
    hi = spec.min + span / 3;
  }
  return lo + static_cast<std::size_t>(rng.uniform_index(hi - lo + 1));
}

void fill_base_features(const SyntheticConfig& c, int label, Rng& rng,
                        std::vector<double>& out) {
  if (c.feature_dim > 0) {
    // Two isotropic Gaussians whose means sit class_separation apart along
    // the all-ones direction.
    const double offset =
        label == 1 ? c.class_separation / std::sqrt(static_cast<double>(c.feature_dim)) : 0.0;
    out.resize(c.feature_dim);
    for (double& f : out) f = offset + c.mean_shift + rng.normal();
    return;
  }
  const std::size_t rows = c.grid->rows, cols = c.grid->cols;
  out.resize(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    const double u = (static_cast<double>(i) + 0.5) / static_cast<double>(rows);
    for (std::size_t j = 0; j < cols; ++j) {
      const double v = (static_cast<double>(j) + 0.5) / static_cast<double>(cols);
      // Smooth class-dependent pattern plus unit pixel noise.
      const double pattern = label == 1 ? std::sin(2.0 * kPi * u) * std::sin(2.0 * kPi * v)
                                        : std::sin(kPi * u) * std::sin(kPi * v);
      out[i * cols + j] = c.class_separation * pattern + c.mean_shift + rng.normal();
    }
  }
}

}  // namespace

const SampleRecord& Dataset::by_id(std::uint64_t sample_id) const {
  return samples[index_of(sample_id)];
}

std::size_t Dataset::index_of(std::uint64_t sample_id) const {
  // Datasets are immutable once built, so a one-off linear scan cache would
  // be wasteful; binary search works because both generation and CSV loading
  // leave samples sorted by id (loading enforces it).
  const auto it = std::lower_bound(
      samples.begin(), samples.end(), sample_id,
      [](const SampleRecord& r, std::uint64_t id) { return r.sample_id < id; });
  if (it == samples.end() || it->sample_id != sample_id)
    throw std::runtime_error("dataset: unknown sample_id " + std::to_string(sample_id));
  return static_cast<std::size_t>(it - samples.begin());
}

std::vector<std::uint64_t> Dataset::all_ids() const {
  std::vector<std::uint64_t> ids;
  ids.reserve(samples.size());
  for (const auto& s : samples) ids.push_back(s.sample_id);
  return ids;
}

Dataset generate_synthetic(const SyntheticConfig& config) {
  validate_config(config);
  Dataset data;
  data.feature_dim =
      config.feature_dim > 0 ? config.feature_dim : config.grid->rows * config.grid->cols;
  data.grid = config.grid;

  Rng rng(config.seed);
  std::uint64_t next_id = config.sample_id_offset;
  for (std::size_t g = 0; g < config.n_groups; ++g) {
    const std::uint64_t group_id = config.group_id_offset + g;
    const std::size_t size = draw_group_size(config.samples_per_group, rng);
    std::size_t n_dup = round_half_away(config.duplicate_fraction * static_cast<double>(size));
    if (n_dup > size - 1) n_dup = size - 1;  // every group keeps a base sample
    const std::size_t n_base = size - n_dup;

    const std::size_t first_base = data.samples.size();
    for (std::size_t i = 0; i < n_base; ++i) {
      SampleRecord rec;
      rec.sample_id = next_id++;
      rec.group_id = group_id;
      rec.label = rng.uniform() < config.class_prior ? 1 : 0;
      rec.origin = Origin::base;
      fill_base_features(config, rec.label, rng, rec.features);
      data.samples.push_back(std::move(rec));
    }
    for (std::size_t i = 0; i < n_dup; ++i) {
      const std::size_t parent =
          first_base + static_cast<std::size_t>(rng.uniform_index(n_base));
      SampleRecord rec;
      rec.sample_id = next_id++;
      rec.group_id = group_id;
      rec.label = data.samples[parent].label;
      rec.origin = Origin::duplicate;
      rec.parent_id = data.samples[parent].sample_id;
      rec.features = data.samples[parent].features;
      for (double& f : rec.features) f += config.perturbation_sigma * rng.normal();
      data.samples.push_back(std::move(rec));
    }
  }
  return data;
}

std::string_view split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "validation") return Split::validation;
  if (name == "test") return Split::test;
  throw std::runtime_error("unknown split name '" + std::string(name) + "'");
}

std::vector<std::uint64_t> SplitAssignment::ids_in(Split s) const {
  std::vector<std::uint64_t> ids;
  for (const auto& [id, sp] : sample_split)
    if (sp == s) ids.push_back(id);
  return ids;  // std::map iterates in ascending key order
}

SplitAssignment split_by_group(const Dataset& data, const SplitFractions& fractions,
                               std::uint64_t seed) {
  if (data.samples.empty()) throw std::invalid_argument("split_by_group: empty dataset");
  const double fsum = fractions.train + fractions.validation + fractions.test;
  if (fractions.train <= 0.0 || fractions.validation <= 0.0 || fractions.test <= 0.0 ||
      std::fabs(fsum - 1.0) > 1e-9)
    throw std::invalid_argument("split_by_group: fractions must be positive and sum to 1");

  std::map<std::uint64_t, std::size_t> group_sizes;
  for (const auto& s : data.samples) ++group_sizes[s.group_id];
  if (group_sizes.size() < 3)
    throw std::invalid_argument("split_by_group: need at least 3 groups");

  std::vector<std::pair<std::uint64_t, std::size_t>> groups(group_sizes.begin(),
                                                            group_sizes.end());
  // Seeded shuffle breaks size ties deterministically, then largest-first.
  Rng rng(seed);
  rng.shuffle(groups);
  std::stable_sort(groups.begin(), groups.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });

  const double n = static_cast<double>(data.samples.size());
  const double target[3] = {fractions.train * n, fractions.validation * n,
                            fractions.test * n};
  double assigned[3] = {0.0, 0.0, 0.0};
  SplitAssignment out;
  for (const auto& [gid, size] : groups) {
    int best = 0;
    double best_deficit = target[0] - assigned[0];
    for (int s = 1; s < 3; ++s) {
      const double deficit = target[s] - assigned[s];
      if (deficit > best_deficit) {  // ties keep the earlier split (train < validation < test)
        best = s;
        best_deficit = deficit;
      }
    }
    out.group_split[gid] = static_cast<Split>(best);
    assigned[best] += static_cast<double>(size);
  }

  bool has_class[3][2] = {{false, false}, {false, false}, {false, false}};
  std::size_t counts[3] = {0, 0, 0};
  for (const auto& s : data.samples) {
    const Split sp = out.group_split.at(s.group_id);
    out.sample_split[s.sample_id] = sp;
    ++counts[static_cast<int>(sp)];
    has_class[static_cast<int>(sp)][s.label] = true;
  }
  for (int s = 0; s < 3; ++s) {
    if (counts[s] == 0)
      throw std::runtime_error("split_by_group: split '" +
                               std::string(split_name(static_cast<Split>(s))) +
                               "' received no samples");
    for (int c = 0; c < 2; ++c)
      if (!has_class[s][c])
        throw std::runtime_error("split_by_group: split '" +
                                 std::string(split_name(static_cast<Split>(s))) +
                                 "' has no samples of class " + std::to_string(c));
  }
  out.achieved_train = static_cast<double>(counts[0]) / n;
  out.achieved_validation = static_cast<double>(counts[1]) / n;
  out.achieved_test = static_cast<double>(counts[2]) / n;
  return out;
}

// ---------------------------------------------------------------------------
// CSV round trip

void save_csv(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_csv: cannot open " + path.string());
  if (data.grid)
    out << "# grid=" << data.grid->rows << "x" << data.grid->cols << "\n";
  out << "sample_id,group_id,label,origin,parent_id";
  for (std::size_t d = 0; d < data.feature_dim; ++d) out << ",f" << d;
  out << "\n";
  for (const auto& s : data.samples) {
    out << s.sample_id << "," << s.group_id << "," << s.label << ","
        << (s.origin == Origin::base ? "base" : "duplicate") << ",";
    if (s.parent_id) out << *s.parent_id;
    for (const double f : s.features) out << "," << g17(f);
    out << "\n";
  }
  if (!out) throw std::runtime_error("save_csv: write failed for " + path.string());
}

Dataset load_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_csv: cannot open " + path.string());

  Dataset data;
  std::string line;
  std::size_t line_no = 0;

  if (!std::getline(in, line)) throw std::runtime_error("load_csv: empty file " + path.string());
  ++line_no;
  if (line.starts_with("# grid=")) {
    const std::string spec = line.substr(7);
    const std::size_t x = spec.find('x');
    if (x == std::string::npos)
      throw std::runtime_error("load_csv: row 1: bad grid directive '" + line + "'");
    GridShape g;
    g.rows = parse_u64(spec.substr(0, x), "load_csv: row 1");
    g.cols = parse_u64(spec.substr(x + 1), "load_csv: row 1");
    if (g.rows == 0 || g.cols == 0)
      throw std::runtime_error("load_csv: row 1: grid dimensions must be positive");
    data.grid = g;
    if (!std::getline(in, line))
      throw std::runtime_error("load_csv: missing header in " + path.string());
    ++line_no;
  }

  const auto header = split_fields(line);
  const char* fixed[5] = {"sample_id", "group_id", "label", "origin", "parent_id"};
  if (header.size() < 6)
    throw std::runtime_error("load_csv: row " + std::to_string(line_no) +
                             ": header needs at least one feature column");
  for (int i = 0; i < 5; ++i)
    if (header[static_cast<std::size_t>(i)] != fixed[i])
      throw std::runtime_error("load_csv: row " + std::to_string(line_no) +
                               ": expected header column '" + fixed[i] + "', got '" +
                               header[static_cast<std::size_t>(i)] + "'");
  data.feature_dim = header.size() - 5;
  for (std::size_t d = 0; d < data.feature_dim; ++d)
    if (header[5 + d] != "f" + std::to_string(d))
      throw std::runtime_error("load_csv: row " + std::to_string(line_no) +
                               ": expected feature column 'f" + std::to_string(d) +
                               "', got '" + header[5 + d] + "'");
  if (data.grid && data.grid->rows * data.grid->cols != data.feature_dim)
    throw std::runtime_error("load_csv: grid directive does not match feature count");

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = "load_csv: row " + std::to_string(line_no);
    const auto fields = split_fields(line);
    if (fields.size() != 5 + data.feature_dim)
      throw std::runtime_error(where + ": expected " + std::to_string(5 + data.feature_dim) +
                               " fields, got " + std::to_string(fields.size()));
    SampleRecord rec;
    rec.sample_id = parse_u64(fields[0], where);
    rec.group_id = parse_u64(fields[1], where);
    const std::uint64_t label = parse_u64(fields[2], where);
    if (label > 1) throw std::runtime_error(where + ": label must be 0 or 1");
    rec.label = static_cast<int>(label);
    if (fields[3] == "base") {
      rec.origin = Origin::base;
      if (!fields[4].empty())
        throw std::runtime_error(where + ": base sample must have empty parent_id");
    } else if (fields[3] == "duplicate") {
      rec.origin = Origin::duplicate;
      if (fields[4].empty())
        throw std::runtime_error(where + ": duplicate sample needs a parent_id");
      rec.parent_id = parse_u64(fields[4], where);
    } else {
      throw std::runtime_error(where + ": unknown origin '" + fields[3] + "'");
    }
    rec.features.resize(data.feature_dim);
    for (std::size_t d = 0; d < data.feature_dim; ++d) {
      rec.features[d] = parse_double(fields[5 + d], where);
      if (!std::isfinite(rec.features[d]))
        throw std::runtime_error(where + ": non-finite feature f" + std::to_string(d));
    }
    data.samples.push_back(std::move(rec));
  }

  std::sort(data.samples.begin(), data.samples.end(),
            [](const SampleRecord& a, const SampleRecord& b) {
              return a.sample_id < b.sample_id;
            });
  const auto index = build_index(data);  // also rejects duplicate ids
  for (const auto& s : data.samples) {
    if (!s.parent_id) continue;
    const auto it = index.find(*s.parent_id);
    if (it == index.end())
      throw std::runtime_error("load_csv: sample " + std::to_string(s.sample_id) +
                               " references missing parent " + std::to_string(*s.parent_id));
    const SampleRecord& parent = data.samples[it->second];
    if (parent.group_id != s.group_id || parent.label != s.label)
      throw std::runtime_error("load_csv: sample " + std::to_string(s.sample_id) +
                               " disagrees with parent " + std::to_string(*s.parent_id) +
                               " on group or label");
  }
  return data;
}

void save_splits_csv(const SplitAssignment& splits, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_splits_csv: cannot open " + path.string());
  out << "sample_id,split\n";
  for (const auto& [id, sp] : splits.sample_split)
    out << id << "," << split_name(sp) << "\n";
  if (!out) throw std::runtime_error("save_splits_csv: write failed for " + path.string());
}

SplitAssignment load_splits_csv(const Dataset& data, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_splits_csv: cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line) || line != "sample_id,split")
    throw std::runtime_error("load_splits_csv: bad header in " + path.string());
  ++line_no;

  SplitAssignment out;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = "load_splits_csv: row " + std::to_string(line_no);
    const auto fields = split_fields(line);
    if (fields.size() != 2) throw std::runtime_error(where + ": expected 2 fields");
    const std::uint64_t id = parse_u64(fields[0], where);
    if (out.sample_split.count(id))
      throw std::runtime_error(where + ": sample " + std::to_string(id) + " assigned twice");
    out.sample_split[id] = parse_split(fields[1]);
  }

  std::size_t counts[3] = {0, 0, 0};
  for (const auto& s : data.samples) {
    const auto it = out.sample_split.find(s.sample_id);
    if (it == out.sample_split.end())
      throw std::runtime_error("load_splits_csv: sample " + std::to_string(s.sample_id) +
                               " has no split assignment");
    const Split sp = it->second;
    ++counts[static_cast<int>(sp)];
    const auto [git, inserted] = out.group_split.emplace(s.group_id, sp);
    if (!inserted && git->second != sp)
      throw std::runtime_error("load_splits_csv: group " + std::to_string(s.group_id) +
                               " straddles two splits");
  }
  if (out.sample_split.size() != data.samples.size())
    throw std::runtime_error("load_splits_csv: assignment mentions unknown samples");
  const double n = static_cast<double>(data.samples.size());
  out.achieved_train = static_cast<double>(counts[0]) / n;
  out.achieved_validation = static_cast<double>(counts[1]) / n;
  out.achieved_test = static_cast<double>(counts[2]) / n;
  return out;
}

}  // namespace entsel
