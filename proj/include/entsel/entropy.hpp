#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "entsel/classifier.hpp"
#include "entsel/dataset.hpp"
#include "entsel/metrics.hpp"

namespace entsel {

// Shannon entropy of a discrete distribution, in nats.  0*ln(0) counts as 0;
// the result is clamped to [0, ln K].  Rejects vectors that are not a
// probability distribution (entry outside [0,1] or sum off 1 by > 1e-9).
double prediction_entropy(const std::vector<double>& probs);

// One training sample's uncertainty under a trained model.  Rank 1 is the
// highest entropy; ties rank by ascending sample_id.
struct EntropyScoreRow {
  std::uint64_t sample_id = 0;
  double entropy = 0.0;
  std::size_t rank = 0;
  bool informative = false;
};

struct EntropyScoreTable {
  std::vector<EntropyScoreRow> rows;  // stored in rank order (rank i at index i-1)

  const EntropyScoreRow& by_id(std::uint64_t sample_id) const;
};

EntropyScoreTable score_training_set(const ModelParams& model, const Dataset& data,
                                     const std::vector<std::uint64_t>& train_ids);

// Top round(proportion * N) rows by rank become the informative subset, the
// rest the redundant one.  Rounding is half away from zero; proportion must
// lie in (0, 1].  Updates the flags in place and returns both id lists
// (ascending).
struct Selection {
  std::size_t selected_count = 0;
  std::vector<std::uint64_t> informative_ids;
  std::vector<std::uint64_t> redundant_ids;
};

Selection select_informative(EntropyScoreTable& table, double proportion);

enum class SubsetFilter { all, informative, redundant };

struct EntropyHistogram {
  std::vector<double> bin_left, bin_right;
  std::vector<double> normalized_count;  // sums to 1 unless the subset is empty
};

// Equal-width bins spanning [0, ln 2] (two-class entropy range).
EntropyHistogram entropy_histogram(const EntropyScoreTable& table, std::size_t n_bins,
                                   SubsetFilter filter);

// Welch-style Z test on the informative-vs-redundant mean entropy gap, with
// normal-approximation CIs on each mean; reuses the CI-width machinery used
// for recall comparisons.
struct EntropyGapResult {
  double mean_informative = 0.0, mean_redundant = 0.0;
  RecallComparison stats;  // "recall1" = redundant mean, "recall2" = informative mean
};

EntropyGapResult entropy_gap_test(const EntropyScoreTable& table);

// CSV schema: sample_id,entropy,rank,flag  (flag: informative|redundant).
void save_scores_csv(const EntropyScoreTable& table, const std::filesystem::path& path);
EntropyScoreTable load_scores_csv(const std::filesystem::path& path);

void save_histogram_csv(const EntropyHistogram& informative,
                        const EntropyHistogram& redundant,
                        const std::filesystem::path& path);

}  // namespace entsel
