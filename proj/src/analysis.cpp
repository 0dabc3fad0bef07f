#include "weightvol/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "weightvol/csv.hpp"

namespace weightvol {

const std::vector<std::string>& hyperparameter_registry() {
  static const std::vector<std::string> names = {"dropout_rate", "batch_size", "learning_rate", "depth",
                                                 "activation",   "weight_decay", "width"};
  return names;
}

double record_value(const ExperimentRecord& r, std::string_view key) {
  if (key == "gg_loss") return r.gg_loss;
  if (key == "gg_acc") return r.gg_acc;
  const auto it = r.hyperparams.find(std::string(key));
  if (it != r.hyperparams.end()) {
    try {
      return parse_double(it->second);
    } catch (const Error&) {
      throw Error(ErrorKind::InvalidArgument, "hyperparameter '" + std::string(key) + "' is not numeric");
    }
  }
  return measure_value(r.measures, key);
}

int sign_of_difference(double a, double b) {
  const double d = a - b;
  if (std::abs(d) <= kSignTieThreshold) return 0;
  return d > 0.0 ? 1 : -1;
}

namespace {

struct PairTable {
  double counts[3][3] = {};
  double total = 0.0;
};

double entropy(const double* p, std::size_t n) {
  double h = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    if (p[i] > 0.0) h -= p[i] * std::log(p[i]);
  return h;
}

// Ordered pairs, so the table is unchanged by any relabeling of the records.
PairTable pair_table(const Vector& co, const Vector& pa, const std::vector<ExperimentRecord>& records,
                     const std::vector<std::string>& omega) {
  PairTable t;
  const std::size_t n = co.size();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      bool agree = true;
      for (const std::string& h : omega) {
        const auto a = records[i].hyperparams.find(h);
        const auto b = records[j].hyperparams.find(h);
        const std::string va = a == records[i].hyperparams.end() ? std::string() : a->second;
        const std::string vb = b == records[j].hyperparams.end() ? std::string() : b->second;
        if (va != vb) {
          agree = false;
          break;
        }
      }
      if (!agree) continue;
      t.counts[sign_of_difference(co[i], co[j]) + 1][sign_of_difference(pa[i], pa[j]) + 1] += 1.0;
      t.total += 1.0;
    }
  }
  return t;
}

// Returns -1 when the target sign variable has zero entropy.
double normalized_mi_from_table(const PairTable& t) {
  if (t.total == 0.0) return -1.0;
  double p_co[3] = {};
  double p_pa[3] = {};
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) {
      p_co[a] += t.counts[a][b] / t.total;
      p_pa[b] += t.counts[a][b] / t.total;
    }
  const double h_pa = entropy(p_pa, 3);
  if (h_pa <= 0.0) return -1.0;
  double mi = 0.0;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) {
      const double p = t.counts[a][b] / t.total;
      if (p > 0.0) mi += p * std::log(p / (p_co[a] * p_pa[b]));
    }
  return std::clamp(mi / h_pa, 0.0, 1.0);
}

Vector column(const std::vector<ExperimentRecord>& records, std::string_view key) {
  Vector v;
  v.reserve(records.size());
  for (const ExperimentRecord& r : records) v.push_back(record_value(r, key));
  return v;
}

void require_pairs(const std::vector<ExperimentRecord>& records) {
  if (records.size() < 2) throw Error(ErrorKind::InvalidArgument, "need at least 2 records");
}

void require_varying(const Vector& target, std::string_view key) {
  for (double v : target)
    if (sign_of_difference(v, target.front()) != 0) return;
  throw Error(ErrorKind::DegenerateTarget, "target column '" + std::string(key) + "' has a single value");
}

}  // namespace

double normalized_mi(const std::vector<ExperimentRecord>& records, std::string_view measure_key,
                     std::string_view target_key) {
  require_pairs(records);
  const Vector pa = column(records, target_key);
  require_varying(pa, target_key);
  const Vector co = column(records, measure_key);
  return std::max(0.0, normalized_mi_from_table(pair_table(co, pa, records, {})));
}

double conditional_mi_expectation(const std::vector<ExperimentRecord>& records, std::string_view measure_key,
                                  const std::vector<std::string>& registry, std::size_t j) {
  require_pairs(records);
  if (j > registry.size()) throw Error(ErrorKind::InvalidArgument, "subset size exceeds registry size");
  const Vector pa = column(records, "gg_loss");
  require_varying(pa, "gg_loss");
  const Vector co = column(records, measure_key);

  std::vector<std::size_t> pick(j);
  std::iota(pick.begin(), pick.end(), 0);
  double sum = 0.0;
  std::size_t used = 0;
  while (true) {
    std::vector<std::string> omega;
    for (std::size_t i : pick) omega.push_back(registry[i]);
    const PairTable t = pair_table(co, pa, records, omega);
    if (t.total > 0.0) {
      sum += std::max(0.0, normalized_mi_from_table(t));
      ++used;
    }
    // next combination in lexicographic order
    std::size_t i = j;
    while (i > 0 && pick[i - 1] == registry.size() - j + i - 1) --i;
    if (i == 0) break;
    ++pick[i - 1];
    for (std::size_t k = i; k < j; ++k) pick[k] = pick[k - 1] + 1;
  }
  if (used == 0) throw Error(ErrorKind::EmptySubspace, "no record pairs agree on any hyperparameter subset");
  return sum / static_cast<double>(used);
}

double average_sign_error(const std::vector<ExperimentRecord>& records, std::string_view measure_key) {
  require_pairs(records);
  const Vector co = column(records, measure_key);
  const Vector gg = column(records, "gg_loss");
  std::size_t wrong = 0;
  std::size_t total = 0;
  for (std::size_t i = 0; i < records.size(); ++i)
    for (std::size_t j = i + 1; j < records.size(); ++j) {
      if (sign_of_difference(co[i], co[j]) != sign_of_difference(gg[i], gg[j])) ++wrong;
      ++total;
    }
  return static_cast<double>(wrong) / static_cast<double>(total);
}

std::vector<std::string> default_registry(const std::vector<ExperimentRecord>& records) {
  std::vector<std::string> out;
  for (const std::string& h : hyperparameter_registry()) {
    if (h == "dropout_rate" || records.empty()) continue;
    const auto first = records.front().hyperparams.find(h);
    for (const ExperimentRecord& r : records) {
      const auto it = r.hyperparams.find(h);
      const bool differs = (it == r.hyperparams.end()) != (first == records.front().hyperparams.end()) ||
                           (it != r.hyperparams.end() && it->second != first->second);
      if (differs) {
        out.push_back(h);
        break;
      }
    }
  }
  return out;
}

MIReport mi_report(const std::vector<ExperimentRecord>& records, const std::vector<std::string>& registry) {
  require_pairs(records);
  MIReport report;
  report.registry = registry;
  report.record_count = records.size();
  report.pair_count = records.size() * (records.size() - 1) / 2;
  for (const std::string& m : measure_names()) {
    MIRow row;
    row.measure = m;
    row.mi_dropout = normalized_mi(records, m, "dropout_rate");
    for (std::size_t j = 0; j < 3; ++j) {
      row.mi_gg[j] = j <= registry.size() ? conditional_mi_expectation(records, m, registry, j)
                                          : std::numeric_limits<double>::quiet_NaN();
    }
    row.sign_error = average_sign_error(records, m);
    report.rows.push_back(row);
  }
  return report;
}

std::string mi_report_csv(const MIReport& report) {
  std::string out = "measure,MI_dropout,MI_GG_w0,MI_GG_w1,MI_GG_w2,sign_error\n";
  for (const MIRow& r : report.rows) {
    out += join_csv({r.measure, format_double(r.mi_dropout), format_double(r.mi_gg[0]), format_double(r.mi_gg[1]),
                     format_double(r.mi_gg[2]), format_double(r.sign_error)});
    out += '\n';
  }
  return out;
}

std::string mi_report_json(const MIReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const MIRow& r : report.rows) {
    nlohmann::json gg = nlohmann::json::array();
    for (double v : r.mi_gg) gg.push_back(std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr));
    rows.push_back({{"measure", r.measure}, {"MI_dropout", r.mi_dropout}, {"MI_GG", gg}, {"sign_error", r.sign_error}});
  }
  nlohmann::json doc = {{"schema_version", 1},
                        {"records", report.record_count},
                        {"pairs", report.pair_count},
                        {"registry", report.registry},
                        {"subset_weighting", "uniform"},
                        {"sign_tie_threshold", kSignTieThreshold},
                        {"rows", rows}};
  return doc.dump(1) + "\n";
}

GradientCorrelation gradient_update_correlation(const NetworkParams& params, const Dataset& data,
                                                const ProbeOptions& opts) {
  if (opts.batches_per_probe < 10) {
    throw Error(ErrorKind::TooFewBatches, "gradient correlation needs at least 10 minibatches");
  }
  if (opts.layer >= params.layer_count()) throw Error(ErrorKind::InvalidArgument, "probe layer out of range");
  if (opts.probe_count == 0) throw Error(ErrorKind::InvalidArgument, "probe_count must be >= 1");
  validate_dataset(data);

  const std::size_t layer_size = params.weights[opts.layer].size();
  const std::size_t p = std::min(opts.probe_count, layer_size);
  std::vector<std::size_t> coords(layer_size);
  std::iota(coords.begin(), coords.end(), 0);
  Rng pick(derive_seed(opts.seed, 0x9b0be));
  for (std::size_t i = 0; i < p; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(pick.next_u64() % (layer_size - i));
    std::swap(coords[i], coords[j]);
  }
  coords.resize(p);
  std::sort(coords.begin(), coords.end());

  bool any_dropout = false;
  for (const LayerSpec& s : params.layers) any_dropout = any_dropout || s.dropout_rate > 0.0;
  const bool use_masks = opts.dropout && any_dropout;
  Rng mask_rng(derive_seed(opts.seed, 0x9b0c0));
  const std::uint64_t shuffle = derive_seed(opts.seed, 0x9b0bf);

  Matrix g(opts.batches_per_probe, p);
  std::size_t filled = 0;
  for (std::size_t epoch = 0; filled < opts.batches_per_probe; ++epoch) {
    for (const auto& idx : batches(data.size(), {opts.batch_size, shuffle, epoch})) {
      if (filled == opts.batches_per_probe) break;
      const Dataset b = subset(data, idx);
      DropoutMasks masks;
      if (use_masks) masks = sample_dropout_masks(params.layers, b.size(), mask_rng);
      const ForwardResult fr = forward(params, b.features, b.labels, use_masks ? &masks : nullptr);
      const auto grads = backward(params, fr.trace, b.labels);
      for (std::size_t c = 0; c < p; ++c) g(filled, c) = grads[opts.layer].data()[coords[c]];
      ++filled;
    }
  }

  std::vector<std::size_t> keep;
  for (std::size_t c = 0; c < p; ++c) {
    double lo = g(0, c);
    double hi = g(0, c);
    for (std::size_t r = 1; r < g.rows(); ++r) {
      lo = std::min(lo, g(r, c));
      hi = std::max(hi, g(r, c));
    }
    if (hi > lo) keep.push_back(c);
  }
  if (keep.empty()) {
    throw Error(ErrorKind::TooFewBatches, "probed gradient updates do not vary across minibatches");
  }

  GradientCorrelation out;
  for (std::size_t c : keep) out.coordinates.push_back(coords[c]);
  if (keep.size() == 1) {
    out.abs_correlation = Matrix::identity(1);
    return out;
  }
  Matrix sub(g.rows(), keep.size());
  for (std::size_t r = 0; r < g.rows(); ++r)
    for (std::size_t c = 0; c < keep.size(); ++c) sub(r, c) = g(r, keep[c]);
  Matrix corr = correlation_from_covariance(sample_covariance(sub));
  double off = 0.0;
  for (std::size_t r = 0; r < corr.rows(); ++r)
    for (std::size_t c = 0; c < corr.cols(); ++c) {
      corr(r, c) = std::abs(corr(r, c));
      if (r != c) off += corr(r, c);
    }
  const double k = static_cast<double>(corr.rows());
  out.mean_offdiag = off / (k * (k - 1.0));
  out.abs_correlation = std::move(corr);
  return out;
}

std::vector<GradientCorrelation> track_gradient_correlation(const TrainConfig& config, const Dataset& data,
                                                            std::span<const LayerSpec> layers,
                                                            const std::vector<std::size_t>& checkpoints,
                                                            const ProbeOptions& opts) {
  std::vector<std::pair<std::size_t, NetworkParams>> snaps;
  TrainHooks hooks;
  hooks.on_epoch = [&](std::size_t epoch, const NetworkParams& params) {
    if (std::find(checkpoints.begin(), checkpoints.end(), epoch) != checkpoints.end()) snaps.emplace_back(epoch, params);
  };
  train(config, data, nullptr, layers, hooks);
  std::vector<GradientCorrelation> out;
  for (const auto& [epoch, params] : snaps) {
    GradientCorrelation gc = gradient_update_correlation(params, data, opts);
    gc.epoch = epoch;
    out.push_back(std::move(gc));
  }
  return out;
}

namespace {

struct Moments {
  double mean = 0.0;
  double var = 0.0;
  double var_se = 0.0;
};

Moments moments(const Vector& x) {
  const double n = static_cast<double>(x.size());
  Moments m;
  for (double v : x) m.mean += v;
  m.mean /= n;
  double m2 = 0.0;
  double m4 = 0.0;
  for (double v : x) {
    const double d = (v - m.mean) * (v - m.mean);
    m2 += d;
    m4 += d * d;
  }
  m.var = m2 / n;
  m4 /= n;
  m.var_se = std::sqrt(std::max(m4 - m.var * m.var, 0.0) / n);
  return m;
}

struct CovEstimate {
  double cov = 0.0;
  double se = 0.0;
};

CovEstimate covariance(const Vector& x, const Vector& y, double mx, double my) {
  const double n = static_cast<double>(x.size());
  double s = 0.0;
  double s2 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double t = (x[i] - mx) * (y[i] - my);
    s += t;
    s2 += t * t;
  }
  CovEstimate c;
  c.cov = s / n;
  c.se = std::sqrt(std::max(s2 / n - c.cov * c.cov, 0.0) / n);
  return c;
}

double correlation(const Vector& x, const Vector& y) {
  const Moments a = moments(x);
  const Moments b = moments(y);
  return covariance(x, y, a.mean, b.mean).cov / std::sqrt(a.var * b.var);
}

}  // namespace

LemmaReport lemma2_montecarlo(const LemmaParams& p) {
  if (!(std::abs(p.rho) < 1.0)) throw Error(ErrorKind::InvalidArgument, "|rho| must be < 1");
  if (!(p.q >= 0.0 && p.q < 1.0)) throw Error(ErrorKind::InvalidArgument, "q must lie in [0,1)");
  if (!(p.var[0] > 0.0 && p.var[1] > 0.0 && p.weight_var > 0.0)) {
    throw Error(ErrorKind::InvalidArgument, "variances must be > 0");
  }
  if (!(std::abs(p.weight_rho) < 1.0)) throw Error(ErrorKind::InvalidArgument, "|weight_rho| must be < 1");
  if (p.n_draws < 100) throw Error(ErrorKind::InvalidArgument, "n_draws must be >= 100");

  const std::size_t n = p.n_draws;
  const double s0 = std::sqrt(p.var[0]);
  const double s1 = std::sqrt(p.var[1]);
  const double sw = std::sqrt(p.weight_var);
  const double c_rho = std::sqrt(1.0 - p.rho * p.rho);
  const double c_wrho = std::sqrt(1.0 - p.weight_rho * p.weight_rho);
  const double keep = 1.0 / (1.0 - p.q);

  Vector d0(n), d1(n), w0(n), w1(n), pw0(n), pw1(n);
  Rng rng(derive_seed(p.seed, 0x1e33a2));
  for (std::size_t i = 0; i < n; ++i) {
    const double z0 = rng.normal();
    const double z1 = rng.normal();
    const double a = p.mu[0] + s0 * z0;
    const double b = p.mu[1] + s1 * (p.rho * z0 + c_rho * z1);
    const double m0 = rng.bernoulli(p.q) ? 0.0 : keep;
    const double m1 = rng.bernoulli(p.q) ? 0.0 : keep;
    const double u0 = rng.normal();
    const double u1 = rng.normal();
    const double wa = sw * u0;
    const double wb = sw * (p.weight_rho * u0 + c_wrho * u1);
    d0[i] = m0 * a;
    d1[i] = m1 * b;
    w0[i] = wa + d0[i];
    w1[i] = wb + d1[i];
    pw0[i] = wa + a;
    pw1[i] = wb + b;
  }

  LemmaReport r;
  const double sqrt_n = std::sqrt(static_cast<double>(n));
  const Moments m0 = moments(d0);
  const Moments m1 = moments(d1);

  const CovEstimate c = covariance(d0, d1, m0.mean, m1.mean);
  r.cov_expected = p.rho * s0 * s1;
  r.cov_dropout = c.cov;
  r.cov_se = c.se;
  r.cov_preserved = std::abs(c.cov - r.cov_expected) <= 4.0 * c.se + 1e-12;

  const double v0 = (p.var[0] + p.q * p.mu[0] * p.mu[0]) / (1.0 - p.q);
  const double v1 = (p.var[1] + p.q * p.mu[1] * p.mu[1]) / (1.0 - p.q);
  r.var_expected = v0;
  r.var_dropout = m0.var;
  r.var_se = m0.var_se;
  r.var_formula = std::abs(m0.var - v0) <= 4.0 * m0.var_se + 1e-12 && std::abs(m1.var - v1) <= 4.0 * m1.var_se + 1e-12;

  r.corr_dropout = c.cov / std::sqrt(m0.var * m1.var);
  r.corr_bound_value = (1.0 - p.q) * std::abs(p.rho);
  r.corr_se = (1.0 - r.corr_dropout * r.corr_dropout) / sqrt_n;
  r.corr_bound = std::abs(r.corr_dropout) <= r.corr_bound_value + 4.0 * r.corr_se + 1e-12;

  r.weight_corr_plain = correlation(pw0, pw1);
  r.weight_corr_dropout = correlation(w0, w1);
  const double se_a = (1.0 - r.weight_corr_plain * r.weight_corr_plain) / sqrt_n;
  const double se_b = (1.0 - r.weight_corr_dropout * r.weight_corr_dropout) / sqrt_n;
  r.weight_corr_se = std::sqrt(se_a * se_a + se_b * se_b);
  r.weight_corr_bound = std::abs(r.weight_corr_dropout) <= std::abs(r.weight_corr_plain) + 4.0 * r.weight_corr_se + 1e-12;
  return r;
}

}  // namespace weightvol
