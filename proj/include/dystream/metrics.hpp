#pragma once

// Desk-scale evaluation against the synthetic oracle. "Exp" metrics use the
// mouth channels, "pose" metrics the remaining channels. The sync proxy
// correlates generated mouth channels with the oracle's noise-free mouth
// signal, standing in for a pretrained audiovisual sync network.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "dystream/synthworld.hpp"
#include "dystream/tensor.hpp"

namespace dystream {

struct SyncResult {
  double confidence = 0.0;
  // Shift tau maximizing corr(generated[i], reference[i + tau]); a generation
  // that lags the reference by d frames peaks at tau = -d.
  int offset = 0;
};

// Both inputs are frames x channels. Throws on constant signals.
SyncResult sync_proxy(const Tensor& generated_mouth, const Tensor& reference_mouth, std::size_t max_offset);
SyncResult sync_proxy(const Tensor& generated, const OracleEpisode& episode, std::size_t max_offset);

// Squared Frechet distance between Gaussians fitted to the rows of a and b
// (unbiased covariances; 1e-6 I added when either set has <= d rows).
double frechet_distance(const Tensor& a, const Tensor& b);

// Sum over the selected channels of the population variance over time.
double variance_metric(const Tensor& motion, const std::vector<std::size_t>& channels);

// Mean-pooled non-overlapping windows of the selected channels.
Tensor pooled_windows(const Tensor& motion, const std::vector<std::size_t>& channels, std::size_t window);

struct KMeans {
  Tensor centroids;  // k x d
  static KMeans fit(const Tensor& points, std::size_t k, std::uint64_t seed, std::size_t iterations = 50);
  std::size_t assign(std::span<const double> point) const;
  std::size_t k() const { return centroids.rows(); }
};

// Natural-log entropy of the histogram of labels in [0, k).
double assignment_entropy(const std::vector<std::size_t>& labels, std::size_t k);

// Mean over sequences of the entropy of each sequence's window assignments.
double sid_metric(const std::vector<Tensor>& motions, const std::vector<std::size_t>& channels,
                  const KMeans& clusters, std::size_t window = 8);

// Mean Euclidean distance of the pose channels from the anchor's over the
// last 20% of frames.
double drift_metric(const Tensor& motion, const Tensor& anchor, const std::vector<std::size_t>& pose_channels);

double mse_metric(const Tensor& a, const Tensor& b);

struct MetricsConfig {
  std::size_t max_offset = 4;
  std::size_t k_exp = 8;
  std::size_t k_pose = 4;
  std::size_t sid_window = 8;
  std::uint64_t seed = 0;
};

struct MetricsReport {
  double sync_proxy = 0.0;
  int sync_offset_frames = 0;
  double fd_exp = 0.0;
  double fd_pose = 0.0;
  double mse = 0.0;
  double var_exp = 0.0;
  double var_pose = 0.0;
  double sid_exp = 0.0;
  double sid_pose = 0.0;
  double drift = 0.0;

  std::string to_key_values() const;
  void write_csv_row(std::ostream& os, const std::string& label) const;
  static const char* csv_header() {
    return "episode,sync,offset,fd_exp,fd_pose,mse,var_exp,var_pose,sid_exp,sid_pose,drift";
  }
};

struct Evaluation {
  MetricsReport aggregate;
  std::vector<MetricsReport> per_episode;
};

std::vector<std::size_t> mouth_channels_of(const WorldConfig& cfg);
std::vector<std::size_t> pose_channels_of(const WorldConfig& cfg);

// generated[e] is compared with episodes[e]; the anchor for drift is the
// episode's first frame. Cluster models are fitted on the ground truth.
Evaluation evaluate(const std::vector<Tensor>& generated, const std::vector<const OracleEpisode*>& episodes,
                    const WorldConfig& world, const MetricsConfig& cfg = {});

}  // namespace dystream
