#include "diffil/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "diffil/adam.hpp"
#include "diffil/rng.hpp"

namespace diffil::analysis {

double ground_truth_position(const EpisodeFrames& ep, int64_t t) {
  if (ep.states.empty()) throw data_error("corpus has no stored states for ground-truth positions");
  const float* s = ep.states.data() + t * ep.s_dim;
  if (ep.s_dim == 1) return static_cast<double>(s[0]);
  if (ep.s_dim == 3) return std::atan2(static_cast<double>(s[1]), static_cast<double>(s[0])) / M_PI;
  return static_cast<double>(s[0]);
}

namespace {

double position_distance(double a, double b, bool wrap) {
  double d = std::fabs(a - b);
  if (wrap) d = std::min(d, 2.0 - d);
  return d;
}

// Encodes every frame of a corpus in chunks; rows follow flat frame order.
Tensor<float> encode_corpus(Encoder<float>& encoder, const TrajectoryDataset& ds) {
  const int64_t n = ds.total_frames(), F = encoder.F;
  Tensor<float> out({n, F});
  const int64_t chunk = 256;
  for (int64_t c0 = 0; c0 < n; c0 += chunk) {
    const int64_t c1 = std::min(n, c0 + chunk);
    std::vector<Frame> frames;
    frames.reserve(static_cast<size_t>(c1 - c0));
    for (int64_t i = c0; i < c1; ++i) frames.push_back(ds.frame_at(i));
    nn::Ctx<float> g;
    ag::Var<float> z = encoder.forward(g, ag::constant(frames_to_batch<float>(frames)), nn::Mode::eval());
    for (int64_t i = 0; i < c1 - c0; ++i)
      for (int64_t j = 0; j < F; ++j) out.at(c0 + i, j) = z.value().at(i, j);
  }
  return out;
}

}  // namespace

double MappingReport::fraction_within(double tol) const {
  if (rows.empty()) return 0;
  int64_t n = 0;
  for (const auto& r : rows)
    if (r.position_error <= tol) ++n;
  return static_cast<double>(n) / static_cast<double>(rows.size());
}

MappingReport map_features(Encoder<float>& encoder, const TrajectoryDataset& queries,
                           const TrajectoryDataset& reference) {
  if (queries.total_frames() == 0 || reference.total_frames() == 0)
    throw data_error("map_features: empty corpus");
  Tensor<float> zq = encode_corpus(encoder, queries);
  Tensor<float> zr = encode_corpus(encoder, reference);
  const int64_t nq = queries.total_frames(), nr = reference.total_frames(), F = encoder.F;
  const bool wrap = queries.frame_at(0).ep->s_dim == 3;

  MappingReport report;
  report.rows.reserve(static_cast<size_t>(nq));
  for (int64_t i = 0; i < nq; ++i) {
    int64_t best = 0;
    double best_d2 = std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < nr; ++j) {
      double d2 = 0;
      for (int64_t k = 0; k < F; ++k) {
        const double d = static_cast<double>(zq.at(i, k)) - static_cast<double>(zr.at(j, k));
        d2 += d * d;
      }
      if (d2 < best_d2) {
        best_d2 = d2;
        best = j;
      }
    }
    Frame fq = queries.frame_at(i), fr = reference.frame_at(best);
    MappingRow row;
    row.query_index = i;
    row.nearest_index = best;
    row.feature_distance = std::sqrt(best_d2);
    row.position_error = position_distance(ground_truth_position(*fq.ep, fq.t),
                                           ground_truth_position(*fr.ep, fr.t), wrap);
    report.rows.push_back(row);
  }

  std::vector<double> errs;
  errs.reserve(report.rows.size());
  for (const auto& r : report.rows) errs.push_back(r.position_error);
  std::sort(errs.begin(), errs.end());
  report.median_position_error = errs[errs.size() / 2];
  return report;
}

void write_mapping_csv(const MappingReport& report, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw data_error("cannot write mapping report " + path.string());
  f << "query_index,nearest_index,feature_distance,position_error\n";
  for (const auto& r : report.rows)
    f << r.query_index << "," << r.nearest_index << "," << r.feature_distance << ","
      << r.position_error << "\n";
}

namespace {

struct ProbeData {
  Tensor<double> x;  // [N, D]
  std::vector<int> y;
};

// Balanced frame sample from several corpora, as features or raw pixels.
ProbeData gather(Encoder<float>* encoder, const std::vector<const TrajectoryDataset*>& source_sets,
                 const std::vector<const TrajectoryDataset*>& target_sets, int64_t max_per_domain) {
  auto domain_frames = [&](const std::vector<const TrajectoryDataset*>& sets) {
    std::vector<Frame> frames;
    int64_t total = 0;
    for (auto* ds : sets) total += ds->total_frames();
    const int64_t take = std::min(max_per_domain, total);
    // even stride over the concatenated corpora
    for (int64_t i = 0; i < take; ++i) {
      int64_t flat = i * total / take;
      for (auto* ds : sets) {
        if (flat < ds->total_frames()) {
          frames.push_back(ds->frame_at(flat));
          break;
        }
        flat -= ds->total_frames();
      }
    }
    return frames;
  };
  std::vector<Frame> src = domain_frames(source_sets), tgt = domain_frames(target_sets);

  std::vector<Frame> all = src;
  all.insert(all.end(), tgt.begin(), tgt.end());
  const int64_t N = static_cast<int64_t>(all.size());

  ProbeData data;
  if (encoder) {
    const int64_t F = encoder->F;
    data.x = Tensor<double>({N, F});
    const int64_t chunk = 256;
    for (int64_t c0 = 0; c0 < N; c0 += chunk) {
      const int64_t c1 = std::min(N, c0 + chunk);
      std::vector<Frame> part(all.begin() + c0, all.begin() + c1);
      nn::Ctx<float> g;
      ag::Var<float> z =
          encoder->forward(g, ag::constant(frames_to_batch<float>(part)), nn::Mode::eval());
      for (int64_t i = 0; i < c1 - c0; ++i)
        for (int64_t j = 0; j < F; ++j) data.x.at(c0 + i, j) = static_cast<double>(z.value().at(i, j));
    }
  } else {
    const int64_t D = all[0].ep->frame_bytes();
    data.x = Tensor<double>({N, D});
    for (int64_t i = 0; i < N; ++i) {
      const uint8_t* px = all[static_cast<size_t>(i)].pixels();
      for (int64_t j = 0; j < D; ++j) data.x.at(i, j) = px[j] / 255.0;
    }
  }
  data.y.resize(static_cast<size_t>(N));
  for (int64_t i = 0; i < N; ++i) data.y[static_cast<size_t>(i)] = i < static_cast<int64_t>(src.size()) ? 0 : 1;
  return data;
}

// Logistic regression with Adam, held-out accuracy.
double linear_probe_accuracy(const ProbeData& data, Rng& rng, bool shuffle_labels) {
  const int64_t N = data.x.shape[0], D = data.x.shape[1];
  std::vector<int64_t> order(static_cast<size_t>(N));
  for (int64_t i = 0; i < N; ++i) order[static_cast<size_t>(i)] = i;
  for (int64_t i = N - 1; i > 0; --i) std::swap(order[i], order[rng.randint(i + 1)]);

  std::vector<int> labels = data.y;
  if (shuffle_labels)
    for (int64_t i = N - 1; i > 0; --i) std::swap(labels[i], labels[rng.randint(i + 1)]);

  const int64_t n_train = (N * 8) / 10, n_test = N - n_train;
  if (n_test < 10) throw data_error("probe corpus too small for a held-out split");

  // standardize on the training split
  Tensor<double> mean({D}), stdv({D});
  for (int64_t i = 0; i < n_train; ++i)
    for (int64_t j = 0; j < D; ++j) mean[j] += data.x.at(order[static_cast<size_t>(i)], j) / n_train;
  for (int64_t i = 0; i < n_train; ++i)
    for (int64_t j = 0; j < D; ++j) {
      const double d = data.x.at(order[static_cast<size_t>(i)], j) - mean[j];
      stdv[j] += d * d / n_train;
    }
  for (int64_t j = 0; j < D; ++j) stdv[j] = std::sqrt(stdv[j]) + 1e-8;

  auto standardized = [&](int64_t row, Tensor<double>& into, int64_t into_row) {
    for (int64_t j = 0; j < D; ++j)
      into.at(into_row, j) = (data.x.at(row, j) - mean[j]) / stdv[j];
  };
  Tensor<double> xtr({n_train, D}), xte({n_test, D});
  Tensor<double> ytr({n_train});
  std::vector<int> yte(static_cast<size_t>(n_test));
  for (int64_t i = 0; i < n_train; ++i) {
    standardized(order[static_cast<size_t>(i)], xtr, i);
    ytr[i] = labels[static_cast<size_t>(order[static_cast<size_t>(i)])];
  }
  for (int64_t i = 0; i < n_test; ++i) {
    standardized(order[static_cast<size_t>(n_train + i)], xte, i);
    yte[static_cast<size_t>(i)] = labels[static_cast<size_t>(order[static_cast<size_t>(n_train + i)])];
  }

  Tensor<double> w({D, 1}), b({1});
  nn::Adam<double> opt({&w, &b}, 0.05);
  for (int epoch = 0; epoch < 150; ++epoch) {
    nn::Ctx<double> g;
    ag::Var<double> logits = ag::add_rowvec(ag::matmul(ag::constant(xtr), g.bind(w, true)),
                                            g.bind(b, true));
    ag::Var<double> p = ag::sigmoid_op(ag::reshape(logits, {n_train}));
    ag::Var<double> pc = ag::clamp(p, 1e-7, 1.0 - 1e-7);
    ag::Var<double> y = ag::constant(ytr);
    ag::Var<double> one_minus_y = ag::add_scalar(ag::neg(y), 1.0);
    ag::Var<double> one_minus_p = ag::add_scalar(ag::neg(pc), 1.0);
    ag::Var<double> loss = ag::neg(ag::mean_all(
        ag::add(ag::mul(y, ag::log_op(pc)), ag::mul(one_minus_y, ag::log_op(one_minus_p)))));
    opt.step(ag::grad_tensors(loss, {g.var_of(&w), g.var_of(&b)}));
  }

  int64_t correct = 0;
  for (int64_t i = 0; i < n_test; ++i) {
    double logit = b[0];
    for (int64_t j = 0; j < D; ++j) logit += xte.at(i, j) * w.at(j, 0);
    const int pred = logit > 0 ? 1 : 0;
    if (pred == yte[static_cast<size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n_test);
}

}  // namespace

ProbeResult probe_domain(Encoder<float>& encoder,
                         const std::vector<const TrajectoryDataset*>& source_sets,
                         const std::vector<const TrajectoryDataset*>& target_sets, uint64_t seed,
                         int64_t max_per_domain) {
  ProbeResult out;
  {
    Rng rng(seed);
    ProbeData feat = gather(&encoder, source_sets, target_sets, max_per_domain);
    out.train_count = (feat.x.shape[0] * 8) / 10;
    out.test_count = feat.x.shape[0] - out.train_count;
    out.feature_accuracy = linear_probe_accuracy(feat, rng, false);
    Rng rng_sh(seed + 1);
    out.shuffled_accuracy = linear_probe_accuracy(feat, rng_sh, true);
  }
  {
    Rng rng(seed + 2);
    ProbeData pix = gather(nullptr, source_sets, target_sets, max_per_domain);
    out.pixel_accuracy = linear_probe_accuracy(pix, rng, false);
  }
  return out;
}

std::vector<CurvePoint> aggregate_curves(const std::vector<std::filesystem::path>& metrics_csvs) {
  if (metrics_csvs.empty()) throw data_error("no metrics logs given");
  std::vector<std::vector<MetricsRow>> runs;
  size_t min_len = std::numeric_limits<size_t>::max();
  for (const auto& p : metrics_csvs) {
    runs.push_back(load_metrics(p));
    if (runs.back().empty()) throw data_error("metrics log has no rows: " + p.string());
    min_len = std::min(min_len, runs.back().size());
  }
  std::vector<CurvePoint> out;
  for (size_t i = 0; i < min_len; ++i) {
    CurvePoint pt;
    pt.iteration = runs[0][i].iteration;
    pt.env_steps = runs[0][i].env_steps;
    for (const auto& r : runs) pt.mean += r[i].eval_return_mean / runs.size();
    for (const auto& r : runs) {
      const double d = r[i].eval_return_mean - pt.mean;
      pt.std_dev += d * d / runs.size();
    }
    pt.std_dev = std::sqrt(pt.std_dev);
    out.push_back(pt);
  }
  return out;
}

void write_curves_csv(const std::vector<CurvePoint>& points, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw data_error("cannot write curves to " + path.string());
  f << "iteration,env_steps,eval_return_mean,eval_return_std\n";
  for (const auto& p : points)
    f << p.iteration << "," << p.env_steps << "," << p.mean << "," << p.std_dev << "\n";
}

void write_curves_svg(const std::vector<CurvePoint>& points, const std::filesystem::path& path) {
  if (points.empty()) throw data_error("no curve points to plot");
  const double W = 640, H = 400, ml = 60, mb = 40, mt = 20, mr = 20;
  double ymin = points[0].mean - points[0].std_dev, ymax = points[0].mean + points[0].std_dev;
  for (const auto& p : points) {
    ymin = std::min(ymin, p.mean - p.std_dev);
    ymax = std::max(ymax, p.mean + p.std_dev);
  }
  if (ymax - ymin < 1e-9) ymax = ymin + 1.0;
  const double x0 = points.front().env_steps, x1 = std::max<double>(points.back().env_steps, x0 + 1);
  auto sx = [&](double v) { return ml + (v - x0) / (x1 - x0) * (W - ml - mr); };
  auto sy = [&](double v) { return H - mb - (v - ymin) / (ymax - ymin) * (H - mb - mt); };

  std::ofstream f(path);
  if (!f) throw data_error("cannot write plot to " + path.string());
  f << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
  f << "<rect width='100%' height='100%' fill='white'/>\n";
  // std band
  f << "<polygon fill='#9ecae1' fill-opacity='0.5' points='";
  for (const auto& p : points) f << sx(p.env_steps) << "," << sy(p.mean + p.std_dev) << " ";
  for (auto it = points.rbegin(); it != points.rend(); ++it)
    f << sx(it->env_steps) << "," << sy(it->mean - it->std_dev) << " ";
  f << "'/>\n";
  // mean line
  f << "<polyline fill='none' stroke='#08519c' stroke-width='2' points='";
  for (const auto& p : points) f << sx(p.env_steps) << "," << sy(p.mean) << " ";
  f << "'/>\n";
  // axes
  f << "<line x1='" << ml << "' y1='" << H - mb << "' x2='" << W - mr << "' y2='" << H - mb
    << "' stroke='black'/>\n";
  f << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << H - mb
    << "' stroke='black'/>\n";
  f << "<text x='" << (W / 2) << "' y='" << (H - 8) << "' text-anchor='middle' font-size='13'>"
    << "environment steps</text>\n";
  f << "<text x='14' y='" << (H / 2) << "' font-size='13' transform='rotate(-90 14 " << (H / 2)
    << ")' text-anchor='middle'>eval return</text>\n";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3g", ymax);
  f << "<text x='" << (ml - 6) << "' y='" << (sy(ymax) + 4) << "' text-anchor='end' font-size='11'>"
    << buf << "</text>\n";
  std::snprintf(buf, sizeof(buf), "%.3g", ymin);
  f << "<text x='" << (ml - 6) << "' y='" << (sy(ymin) + 4) << "' text-anchor='end' font-size='11'>"
    << buf << "</text>\n";
  f << "</svg>\n";
}

}  // namespace diffil::analysis
