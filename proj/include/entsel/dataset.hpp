#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace entsel {

enum class Origin { base, duplicate };

struct GridShape {
  std::size_t rows = 0;
  std::size_t cols = 0;
};

// One labeled sample.  Duplicates carry the id of the base sample they were
// perturbed from; base samples have no parent.
struct SampleRecord {
  std::uint64_t sample_id = 0;
  std::uint64_t group_id = 0;
  int label = 0;  // 0 = normal, 1 = abnormal
  Origin origin = Origin::base;
  std::optional<std::uint64_t> parent_id;
  std::vector<double> features;
};

struct Dataset {
  std::size_t feature_dim = 0;
  // Set when features are a flattened rows x cols image (conv pathway).
  std::optional<GridShape> grid;
  std::vector<SampleRecord> samples;

  const SampleRecord& by_id(std::uint64_t sample_id) const;
  std::size_t index_of(std::uint64_t sample_id) const;
  std::vector<std::uint64_t> all_ids() const;  // ascending
};

// Group sizes come from a two-band mixture: with probability
// heavy_tail_weight a group lands uniformly in the top third of [min, max],
// otherwise in the bottom third — a minority of groups carries most samples
// when the weight is small and the range is wide.
struct GroupSizeSpec {
  std::size_t min = 1;
  std::size_t max = 1;
  double heavy_tail_weight = 0.0;
};

struct SyntheticConfig {
  std::size_t n_groups = 0;
  GroupSizeSpec samples_per_group;
  // Per-group fraction of samples that are near-duplicates of a base sample
  // from the same group (rounded half away from zero, capped at size-1).
  double duplicate_fraction = 0.0;
  // Std-dev of the isotropic Gaussian perturbation applied to duplicates.
  double perturbation_sigma = 0.0;
  // P(label = 1) for base samples.
  double class_prior = 0.5;
  // Exactly one of feature_dim > 0 (vector pathway) or grid (image pathway).
  std::size_t feature_dim = 0;
  std::optional<GridShape> grid;
  // Euclidean distance between the two class means (vector pathway) or the
  // amplitude of the class-dependent pattern (grid pathway).  Unit noise.
  double class_separation = 1.0;
  // Constant offset added to every feature mean; emulates a domain gap for
  // external test sets.
  double mean_shift = 0.0;
  std::uint64_t seed = 0;
  // External sets draw ids above these offsets so they never collide with
  // the internal set.
  std::uint64_t group_id_offset = 0;
  std::uint64_t sample_id_offset = 0;
};

Dataset generate_synthetic(const SyntheticConfig& config);

enum class Split { train, validation, test };

std::string_view split_name(Split s);
Split parse_split(std::string_view name);

struct SplitFractions {
  double train = 0.7;
  double validation = 0.1;
  double test = 0.2;
};

struct SplitAssignment {
  std::map<std::uint64_t, Split> sample_split;  // sample_id -> split
  std::map<std::uint64_t, Split> group_split;   // group_id -> split
  double achieved_train = 0.0;
  double achieved_validation = 0.0;
  double achieved_test = 0.0;

  std::vector<std::uint64_t> ids_in(Split s) const;  // ascending sample_id
};

// Greedy group-level splitter: groups are shuffled (seeded), stable-sorted by
// size descending, then each goes to the split with the largest remaining
// sample deficit.  Whole groups only — no group straddles two splits.
SplitAssignment split_by_group(const Dataset& data, const SplitFractions& fractions,
                               std::uint64_t seed);

// CSV schema: sample_id,group_id,label,origin,parent_id,f0,...,f{D-1}
// (parent_id empty for base samples; grid datasets start with a
// "# grid=RxC" directive line).  UTF-8, LF line endings, 17 significant
// digits for features.
Dataset load_csv(const std::filesystem::path& path);
void save_csv(const Dataset& data, const std::filesystem::path& path);

void save_splits_csv(const SplitAssignment& splits, const std::filesystem::path& path);
// Rebuilds the group map from the dataset and checks the stored assignment
// is a complete, group-exclusive partition of it.
SplitAssignment load_splits_csv(const Dataset& data, const std::filesystem::path& path);

}  // namespace entsel
