#include "dystream/metrics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "dystream/config.hpp"
#include "dystream/rng.hpp"

namespace dystream {
namespace {

Tensor select_channels(const Tensor& m, const std::vector<std::size_t>& channels) {
  Tensor out = Tensor::zeros(m.rows(), channels.size());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < channels.size(); ++c) {
      if (channels[c] >= m.cols()) throw ShapeError("channel index out of range");
      out.at(r, c) = m.at(r, channels[c]);
    }
  return out;
}

Eigen::MatrixXd to_eigen(const Tensor& t) {
  Eigen::MatrixXd m(t.rows(), t.cols());
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m(r, c) = t.at(r, c);
  return m;
}

void moments(const Tensor& x, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
  if (x.rows() < 2) throw std::invalid_argument("Frechet distance needs at least 2 samples per set");
  const Eigen::MatrixXd m = to_eigen(x);
  mu = m.colwise().mean();
  const Eigen::MatrixXd centered = m.rowwise() - mu.transpose();
  cov = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
}

// Symmetric PSD square root via eigendecomposition, eigenvalues clamped at 0.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

bool is_constant(const Tensor& t) {
  return std::all_of(t.values.begin(), t.values.end(), [&](double v) { return v == t.values.front(); });
}

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

}  // namespace

SyncResult sync_proxy(const Tensor& gen, const Tensor& ref, std::size_t max_offset) {
  if (gen.shape != ref.shape) throw ShapeError("sync proxy: generated " + shape_string(gen.shape) +
                                               " vs reference " + shape_string(ref.shape));
  if (gen.cols() == 0) throw std::invalid_argument("sync proxy needs at least one mouth channel");
  if (gen.numel() == 0 || is_constant(gen) || is_constant(ref))
    throw std::invalid_argument("sync proxy is undefined for constant signals");
  const auto frames = static_cast<long>(gen.rows());
  SyncResult best{-std::numeric_limits<double>::infinity(), 0};
  const long T = static_cast<long>(max_offset);
  // Visit 0 first, then +-1, +-2, ... so ties resolve toward small shifts.
  for (long mag = 0; mag <= T; ++mag) {
    for (long tau : {-mag, mag}) {
      if (mag == 0 && tau != 0) continue;
      std::vector<double> a, b;
      for (long i = 0; i < frames; ++i) {
        const long j = i + tau;
        if (j < 0 || j >= frames) continue;
        for (std::size_t c = 0; c < gen.cols(); ++c) {
          a.push_back(gen.at(static_cast<std::size_t>(i), c));
          b.push_back(ref.at(static_cast<std::size_t>(j), c));
        }
      }
      if (a.size() < 2) continue;
      const double r = pearson(a, b);
      if (!std::isnan(r) && r > best.confidence) best = {r, static_cast<int>(tau)};
      if (mag == 0) break;
    }
  }
  if (!std::isfinite(best.confidence)) throw std::invalid_argument("sync proxy: no shift with variance");
  return best;
}

SyncResult sync_proxy(const Tensor& generated, const OracleEpisode& ep, std::size_t max_offset) {
  return sync_proxy(select_channels(generated, ep.mouth_channels), ep.deterministic_mouth_signal, max_offset);
}

double frechet_distance(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols())
    throw ShapeError("Frechet distance: dimension " + std::to_string(a.cols()) + " vs " + std::to_string(b.cols()));
  Eigen::VectorXd mu_a, mu_b;
  Eigen::MatrixXd ca, cb;
  moments(a, mu_a, ca);
  moments(b, mu_b, cb);
  const auto d = static_cast<Eigen::Index>(a.cols());
  if (a.rows() <= a.cols() || b.rows() <= b.cols()) {
    ca += 1e-6 * Eigen::MatrixXd::Identity(d, d);
    cb += 1e-6 * Eigen::MatrixXd::Identity(d, d);
  }
  const Eigen::MatrixXd sa = psd_sqrt(ca);
  const Eigen::MatrixXd cross = psd_sqrt(sa * cb * sa);
  const double fd = (mu_a - mu_b).squaredNorm() + ca.trace() + cb.trace() - 2.0 * cross.trace();
  return std::max(0.0, fd);
}

double variance_metric(const Tensor& motion, const std::vector<std::size_t>& channels) {
  if (motion.rows() < 2) throw std::invalid_argument("variance needs at least 2 frames");
  const Tensor x = select_channels(motion, channels);
  const double n = static_cast<double>(x.rows());
  double total = 0.0;
  for (std::size_t c = 0; c < x.cols(); ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < x.rows(); ++r) mean += x.at(r, c);
    mean /= n;
    double v = 0.0;
    for (std::size_t r = 0; r < x.rows(); ++r) v += (x.at(r, c) - mean) * (x.at(r, c) - mean);
    total += v / n;
  }
  return total;
}

Tensor pooled_windows(const Tensor& motion, const std::vector<std::size_t>& channels, std::size_t window) {
  if (window == 0) throw std::invalid_argument("window must be positive");
  const Tensor x = select_channels(motion, channels);
  const std::size_t n = x.rows() / window;
  Tensor out = Tensor::zeros(n, x.cols());
  for (std::size_t w = 0; w < n; ++w)
    for (std::size_t c = 0; c < x.cols(); ++c) {
      double s = 0.0;
      for (std::size_t r = w * window; r < (w + 1) * window; ++r) s += x.at(r, c);
      out.at(w, c) = s / static_cast<double>(window);
    }
  return out;
}

KMeans KMeans::fit(const Tensor& points, std::size_t k, std::uint64_t seed, std::size_t iterations) {
  if (k < 2) throw std::invalid_argument("k-means needs k >= 2");
  const std::size_t n = points.rows(), d = points.cols();
  if (n < k) throw std::invalid_argument("k-means: " + std::to_string(n) + " points for k=" + std::to_string(k));
  Rng rng = Rng(seed).split("kmeans");
  KMeans km;
  km.centroids = Tensor::zeros(k, d);
  // k-means++ seeding.
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  std::size_t pick = rng.below(n);
  for (std::size_t c = 0; c < k; ++c) {
    std::copy(points.row(pick).begin(), points.row(pick).end(), km.centroids.row(c).begin());
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      dist[i] = std::min(dist[i], sq_dist(points.row(i), km.centroids.row(c)));
      total += dist[i];
    }
    if (c + 1 == k) break;
    if (total == 0.0) {
      pick = rng.below(n);
      continue;
    }
    double u = rng.uniform() * total;
    pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      if (u < dist[i]) {
        pick = i;
        break;
      }
      u -= dist[i];
    }
  }
  std::vector<std::size_t> label(n);
  for (std::size_t it = 0; it < iterations; ++it) {
    for (std::size_t i = 0; i < n; ++i) label[i] = km.assign(points.row(i));
    Tensor sums = Tensor::zeros(k, d);
    std::vector<std::size_t> count(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++count[label[i]];
      for (std::size_t j = 0; j < d; ++j) sums.at(label[i], j) += points.at(i, j);
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] == 0) continue;  // empty cluster keeps its centroid
      for (std::size_t j = 0; j < d; ++j) km.centroids.at(c, j) = sums.at(c, j) / static_cast<double>(count[c]);
    }
  }
  return km;
}

std::size_t KMeans::assign(std::span<const double> point) const {
  std::size_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.rows(); ++c) {
    const double dd = sq_dist(point, centroids.row(c));
    if (dd < bd) {
      bd = dd;
      best = c;
    }
  }
  return best;
}

double assignment_entropy(const std::vector<std::size_t>& labels, std::size_t k) {
  if (labels.empty()) throw std::invalid_argument("entropy of an empty assignment");
  std::vector<std::size_t> hist(k, 0);
  for (auto l : labels) {
    if (l >= k) throw std::out_of_range("cluster label out of range");
    ++hist[l];
  }
  double h = 0.0;
  const double n = static_cast<double>(labels.size());
  for (auto c : hist)
    if (c) {
      const double p = static_cast<double>(c) / n;
      h -= p * std::log(p);
    }
  return h;
}

double sid_metric(const std::vector<Tensor>& motions, const std::vector<std::size_t>& channels,
                  const KMeans& clusters, std::size_t window) {
  if (motions.empty()) throw std::invalid_argument("SID of an empty motion set");
  double total = 0.0;
  for (const auto& m : motions) {
    const Tensor w = pooled_windows(m, channels, window);
    if (w.rows() == 0) throw std::invalid_argument("sequence shorter than one SID window");
    std::vector<std::size_t> labels;
    for (std::size_t r = 0; r < w.rows(); ++r) labels.push_back(clusters.assign(w.row(r)));
    total += assignment_entropy(labels, clusters.k());
  }
  return total / static_cast<double>(motions.size());
}

double drift_metric(const Tensor& motion, const Tensor& anchor, const std::vector<std::size_t>& pose) {
  if (motion.rows() == 0) throw std::invalid_argument("drift needs at least one frame");
  if (anchor.numel() != motion.cols()) throw ShapeError("anchor width differs from motion");
  const std::size_t tail = std::max<std::size_t>(1, (motion.rows() + 4) / 5);
  double total = 0.0;
  for (std::size_t r = motion.rows() - tail; r < motion.rows(); ++r) {
    double s = 0.0;
    for (auto c : pose) s += (motion.at(r, c) - anchor.values[c]) * (motion.at(r, c) - anchor.values[c]);
    total += std::sqrt(s);
  }
  return total / static_cast<double>(tail);
}

double mse_metric(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) throw ShapeError("MSE: " + shape_string(a.shape) + " vs " + shape_string(b.shape));
  if (a.numel() == 0) throw std::invalid_argument("MSE of empty tensors");
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += (a.values[i] - b.values[i]) * (a.values[i] - b.values[i]);
  return s / static_cast<double>(a.numel());
}

std::string MetricsReport::to_key_values() const {
  std::ostringstream os;
  os << "# exp = mouth channels, pose = remaining channels; sync_proxy correlates with the oracle mouth signal\n"
     << "sync_proxy=" << format_double(sync_proxy) << '\n'
     << "sync_offset_frames=" << sync_offset_frames << '\n'
     << "fd_exp=" << format_double(fd_exp) << '\n'
     << "fd_pose=" << format_double(fd_pose) << '\n'
     << "mse=" << format_double(mse) << '\n'
     << "var_exp=" << format_double(var_exp) << '\n'
     << "var_pose=" << format_double(var_pose) << '\n'
     << "sid_exp=" << format_double(sid_exp) << '\n'
     << "sid_pose=" << format_double(sid_pose) << '\n'
     << "drift=" << format_double(drift) << '\n';
  return os.str();
}

void MetricsReport::write_csv_row(std::ostream& os, const std::string& label) const {
  os << label << ',' << format_double(sync_proxy) << ',' << sync_offset_frames << ',' << format_double(fd_exp)
     << ',' << format_double(fd_pose) << ',' << format_double(mse) << ',' << format_double(var_exp) << ','
     << format_double(var_pose) << ',' << format_double(sid_exp) << ',' << format_double(sid_pose) << ','
     << format_double(drift) << '\n';
}

std::vector<std::size_t> mouth_channels_of(const WorldConfig& cfg) {
  std::vector<std::size_t> c(cfg.mouth_count());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = i;
  return c;
}

std::vector<std::size_t> pose_channels_of(const WorldConfig& cfg) {
  std::vector<std::size_t> c;
  for (std::size_t i = cfg.mouth_count(); i < cfg.motion_dim; ++i) c.push_back(i);
  return c;
}

Evaluation evaluate(const std::vector<Tensor>& generated, const std::vector<const OracleEpisode*>& episodes,
                    const WorldConfig& world, const MetricsConfig& cfg) {
  if (generated.empty() || generated.size() != episodes.size())
    throw std::invalid_argument("evaluation needs one generated sequence per episode");
  const auto mouth = mouth_channels_of(world), pose = pose_channels_of(world);
  std::vector<Tensor> truth;
  for (const auto* e : episodes) truth.push_back(e->motion);

  auto stack = [](const std::vector<Tensor>& parts) {
    std::vector<double> v;
    std::size_t rows = 0;
    for (const auto& p : parts) {
      v.insert(v.end(), p.values.begin(), p.values.end());
      rows += p.rows();
    }
    return Tensor({rows, parts.front().cols()}, std::move(v));
  };
  auto pooled_all = [&](const std::vector<Tensor>& seqs, const std::vector<std::size_t>& ch) {
    std::vector<Tensor> w;
    for (const auto& s : seqs) w.push_back(pooled_windows(s, ch, cfg.sid_window));
    return stack(w);
  };
  const KMeans km_exp = KMeans::fit(pooled_all(truth, mouth), cfg.k_exp, cfg.seed);
  const KMeans km_pose = KMeans::fit(pooled_all(truth, pose), cfg.k_pose, cfg.seed + 1);

  Evaluation ev;
  std::map<int, std::size_t> offsets;
  for (std::size_t e = 0; e < generated.size(); ++e) {
    const auto& g = generated[e];
    const auto& ep = *episodes[e];
    if (g.shape != ep.motion.shape) throw ShapeError("generated motion shape differs from episode " + std::to_string(e));
    MetricsReport r;
    const auto sync = sync_proxy(g, ep, cfg.max_offset);
    r.sync_proxy = sync.confidence;
    r.sync_offset_frames = sync.offset;
    r.fd_exp = frechet_distance(select_channels(g, mouth), select_channels(ep.motion, mouth));
    r.fd_pose = frechet_distance(select_channels(g, pose), select_channels(ep.motion, pose));
    r.mse = mse_metric(g, ep.motion);
    r.var_exp = variance_metric(g, mouth);
    r.var_pose = variance_metric(g, pose);
    r.sid_exp = sid_metric({g}, mouth, km_exp, cfg.sid_window);
    r.sid_pose = sid_metric({g}, pose, km_pose, cfg.sid_window);
    r.drift = drift_metric(g, ep.motion.slice_rows(0, 1), pose);
    ++offsets[r.sync_offset_frames];
    ev.per_episode.push_back(r);
  }
  auto& a = ev.aggregate;
  const double n = static_cast<double>(generated.size());
  for (const auto& r : ev.per_episode) {
    a.sync_proxy += r.sync_proxy / n;
    a.mse += r.mse / n;
    a.var_exp += r.var_exp / n;
    a.var_pose += r.var_pose / n;
    a.sid_exp += r.sid_exp / n;
    a.sid_pose += r.sid_pose / n;
    a.drift += r.drift / n;
  }
  a.sync_offset_frames = std::max_element(offsets.begin(), offsets.end(), [](const auto& x, const auto& y) {
                           return x.second < y.second;
                         })->first;
  const Tensor g_all = stack(generated), t_all = stack(truth);
  a.fd_exp = frechet_distance(select_channels(g_all, mouth), select_channels(t_all, mouth));
  a.fd_pose = frechet_distance(select_channels(g_all, pose), select_channels(t_all, pose));
  return ev;
}

}  // namespace dystream
