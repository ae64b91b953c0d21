#include "entsel/entropy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <unordered_set>

#include "entsel/format.hpp"

namespace entsel {

namespace {

constexpr double kLn2 = 0.6931471805599453;

std::size_t round_half_away(double x) {
  return static_cast<std::size_t>(std::floor(x + 0.5));
}

struct MeanCi {
  double mean = 0.0;
  double lower = 0.0, upper = 0.0;
};

MeanCi mean_with_ci(const std::vector<double>& xs, const char* what) {
  if (xs.size() < 2)
    throw std::runtime_error(std::string("entropy_gap_test: ") + what +
                             " subset needs at least 2 samples");
  const double n = static_cast<double>(xs.size());
  double mean = 0.0;
  for (const double x : xs) mean += x;
  mean /= n;
  double ss = 0.0;
  for (const double x : xs) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  const double se = sd / std::sqrt(n);
  return {mean, mean - 1.96 * se, mean + 1.96 * se};
}

}  // namespace

double prediction_entropy(const std::vector<double>& probs) {
  if (probs.size() < 2)
    throw std::invalid_argument("prediction_entropy: need at least 2 probabilities");
  double sum = 0.0;
  for (const double p : probs) {
    if (!(p >= 0.0 && p <= 1.0))
      throw std::invalid_argument("prediction_entropy: probability outside [0, 1]");
    sum += p;
  }
  if (std::fabs(sum - 1.0) > 1e-9)
    throw std::invalid_argument("prediction_entropy: probabilities sum to " +
                                g17(sum) + ", not 1");
  double h = 0.0;
  for (const double p : probs)
    if (p > 0.0) h -= p * std::log(p);
  const double hmax = std::log(static_cast<double>(probs.size()));
  if (h < 0.0) h = 0.0;
  if (h > hmax) h = hmax;
  return h;
}

const EntropyScoreRow& EntropyScoreTable::by_id(std::uint64_t sample_id) const {
  for (const auto& row : rows)
    if (row.sample_id == sample_id) return row;
  throw std::runtime_error("entropy table: unknown sample_id " + std::to_string(sample_id));
}

EntropyScoreTable score_training_set(const ModelParams& model, const Dataset& data,
                                     const std::vector<std::uint64_t>& train_ids) {
  if (train_ids.empty())
    throw std::invalid_argument("score_training_set: empty training set");
  {
    std::unordered_set<std::uint64_t> seen(train_ids.begin(), train_ids.end());
    if (seen.size() != train_ids.size())
      throw std::invalid_argument("score_training_set: duplicate sample ids");
  }
  const auto probs = predict_proba(model, data, train_ids);
  EntropyScoreTable table;
  table.rows.reserve(train_ids.size());
  for (std::size_t i = 0; i < train_ids.size(); ++i)
    table.rows.push_back({train_ids[i], prediction_entropy(probs[i]), 0, false});
  // Highest entropy first; equal entropies rank by ascending id.
  std::sort(table.rows.begin(), table.rows.end(),
            [](const EntropyScoreRow& a, const EntropyScoreRow& b) {
              if (a.entropy != b.entropy) return a.entropy > b.entropy;
              return a.sample_id < b.sample_id;
            });
  for (std::size_t i = 0; i < table.rows.size(); ++i) table.rows[i].rank = i + 1;
  return table;
}

Selection select_informative(EntropyScoreTable& table, double proportion) {
  if (table.rows.empty())
    throw std::invalid_argument("select_informative: empty score table");
  if (!(proportion > 0.0 && proportion <= 1.0))
    throw std::invalid_argument("select_informative: proportion outside (0, 1]");
  std::size_t m = round_half_away(proportion * static_cast<double>(table.rows.size()));
  if (m > table.rows.size()) m = table.rows.size();

  Selection sel;
  sel.selected_count = m;
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    table.rows[i].informative = i < m;
    (i < m ? sel.informative_ids : sel.redundant_ids).push_back(table.rows[i].sample_id);
  }
  std::sort(sel.informative_ids.begin(), sel.informative_ids.end());
  std::sort(sel.redundant_ids.begin(), sel.redundant_ids.end());
  return sel;
}

EntropyHistogram entropy_histogram(const EntropyScoreTable& table, std::size_t n_bins,
                                   SubsetFilter filter) {
  if (n_bins == 0) throw std::invalid_argument("entropy_histogram: need at least 1 bin");
  EntropyHistogram hist;
  hist.bin_left.resize(n_bins);
  hist.bin_right.resize(n_bins);
  hist.normalized_count.assign(n_bins, 0.0);
  const double width = kLn2 / static_cast<double>(n_bins);
  for (std::size_t b = 0; b < n_bins; ++b) {
    hist.bin_left[b] = width * static_cast<double>(b);
    hist.bin_right[b] = b + 1 == n_bins ? kLn2 : width * static_cast<double>(b + 1);
  }
  std::size_t total = 0;
  for (const auto& row : table.rows) {
    if (filter == SubsetFilter::informative && !row.informative) continue;
    if (filter == SubsetFilter::redundant && row.informative) continue;
    std::size_t b = static_cast<std::size_t>(std::floor(row.entropy / width));
    if (b >= n_bins) b = n_bins - 1;  // entropy == ln 2 lands in the last bin
    hist.normalized_count[b] += 1.0;
    ++total;
  }
  if (total > 0)
    for (double& c : hist.normalized_count) c /= static_cast<double>(total);
  return hist;
}

EntropyGapResult entropy_gap_test(const EntropyScoreTable& table) {
  std::vector<double> informative, redundant;
  for (const auto& row : table.rows)
    (row.informative ? informative : redundant).push_back(row.entropy);
  const MeanCi inf = mean_with_ci(informative, "informative");
  const MeanCi red = mean_with_ci(redundant, "redundant");
  EntropyGapResult out;
  out.mean_informative = inf.mean;
  out.mean_redundant = red.mean;
  out.stats = compare_recall(red.mean, {red.lower, red.upper}, inf.mean,
                             {inf.lower, inf.upper});
  return out;
}

void save_scores_csv(const EntropyScoreTable& table, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_scores_csv: cannot open " + path.string());
  out << "sample_id,entropy,rank,flag\n";
  for (const auto& row : table.rows)
    out << row.sample_id << "," << g17(row.entropy) << "," << row.rank << ","
        << (row.informative ? "informative" : "redundant") << "\n";
  if (!out) throw std::runtime_error("save_scores_csv: write failed for " + path.string());
}

EntropyScoreTable load_scores_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_scores_csv: cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line) || line != "sample_id,entropy,rank,flag")
    throw std::runtime_error("load_scores_csv: bad header in " + path.string());
  ++line_no;
  EntropyScoreTable table;
  std::unordered_set<std::uint64_t> seen;
  bool seen_redundant = false;
  double prev_entropy = 0.0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = "load_scores_csv: row " + std::to_string(line_no);
    const auto fields = split_fields(line);
    if (fields.size() != 4) throw std::runtime_error(where + ": expected 4 fields");
    EntropyScoreRow row;
    row.sample_id = parse_u64(fields[0], where);
    row.entropy = parse_double(fields[1], where);
    row.rank = parse_u64(fields[2], where);
    if (fields[3] == "informative")
      row.informative = true;
    else if (fields[3] == "redundant")
      row.informative = false;
    else
      throw std::runtime_error(where + ": unknown flag '" + fields[3] + "'");
    if (!std::isfinite(row.entropy) || row.entropy < 0.0 || row.entropy > kLn2 + 1e-12)
      throw std::runtime_error(where + ": entropy outside [0, ln 2]");
    if (!seen.insert(row.sample_id).second)
      throw std::runtime_error(where + ": duplicate sample_id");
    if (row.rank != table.rows.size() + 1)
      throw std::runtime_error(where + ": ranks out of order");
    if (row.rank > 1 && row.entropy > prev_entropy + 1e-12)
      throw std::runtime_error(where + ": entropy increases with rank");
    if (row.informative && seen_redundant)
      throw std::runtime_error(where + ": informative row after a redundant one");
    if (!row.informative) seen_redundant = true;
    prev_entropy = row.entropy;
    table.rows.push_back(row);
  }
  return table;
}

void save_histogram_csv(const EntropyHistogram& informative,
                        const EntropyHistogram& redundant,
                        const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_histogram_csv: cannot open " + path.string());
  out << "bin_left,bin_right,normalized_count,subset\n";
  const auto dump = [&](const EntropyHistogram& h, const char* name) {
    for (std::size_t b = 0; b < h.normalized_count.size(); ++b)
      out << g17(h.bin_left[b]) << "," << g17(h.bin_right[b]) << ","
          << g17(h.normalized_count[b]) << "," << name << "\n";
  };
  dump(informative, "informative");
  dump(redundant, "redundant");
  if (!out) throw std::runtime_error("save_histogram_csv: write failed for " + path.string());
}

}  // namespace entsel
