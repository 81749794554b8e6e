#pragma once

// Post-training analysis: nearest-neighbor cross-domain image mapping in
// feature space, a domain-confusion probe on frozen features vs raw pixels,
// and learning-curve export/aggregation.

#include <filesystem>
#include <vector>

#include "diffil/data_model.hpp"
#include "diffil/metrics.hpp"
#include "diffil/perception.hpp"

namespace diffil::analysis {

// Scalar task-progress coordinate recoverable from stored states; used as the
// ground truth for mapping fidelity in the toy environments.
double ground_truth_position(const EpisodeFrames& ep, int64_t t);

struct MappingRow {
  int64_t query_index = 0;    // flat frame index in the query corpus
  int64_t nearest_index = 0;  // flat frame index in the reference corpus
  double feature_distance = 0;
  double position_error = 0;
};

struct MappingReport {
  std::vector<MappingRow> rows;
  double median_position_error = 0;
  double fraction_within(double tol) const;
};

// For every query frame, the reference frame with the closest encoder
// feature (Euclidean), plus the ground-truth position error of the match.
MappingReport map_features(Encoder<float>& encoder, const TrajectoryDataset& queries,
                           const TrajectoryDataset& reference);

void write_mapping_csv(const MappingReport& report, const std::filesystem::path& path);

struct ProbeResult {
  double feature_accuracy = 0;   // linear probe on frozen encoder features
  double pixel_accuracy = 0;     // same probe on raw flattened pixels
  double shuffled_accuracy = 0;  // label-shuffled control (should sit near 0.5)
  int64_t train_count = 0, test_count = 0;
};

// Trains fresh logistic-regression probes to predict the domain tag from
// frozen representations, with a held-out split.
ProbeResult probe_domain(Encoder<float>& encoder,
                         const std::vector<const TrajectoryDataset*>& source_sets,
                         const std::vector<const TrajectoryDataset*>& target_sets, uint64_t seed,
                         int64_t max_per_domain = 1500);

struct CurvePoint {
  int64_t iteration = 0;
  int64_t env_steps = 0;
  double mean = 0;
  double std_dev = 0;
};

// Per-iteration mean and std of the eval return across one or more runs'
// metrics logs (rows beyond the shortest run are dropped).
std::vector<CurvePoint> aggregate_curves(const std::vector<std::filesystem::path>& metrics_csvs);

void write_curves_csv(const std::vector<CurvePoint>& points, const std::filesystem::path& path);
void write_curves_svg(const std::vector<CurvePoint>& points, const std::filesystem::path& path);

}  // namespace diffil::analysis
