#include "lrdg/divergence.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <spdlog/spdlog.h>

#include "lrdg/random.hpp"

namespace lrdg {

double LinearSvm::error(const FeatureMatrix& x, std::span<const int> labels) const {
  if (x.cols() == 0) return 0.0;
  int wrong = 0;
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    if (predict(x.col(j)) != labels[static_cast<std::size_t>(j)]) ++wrong;
  }
  return static_cast<double>(wrong) / static_cast<double>(x.cols());
}

LinearSvm train_linear_svm(const FeatureMatrix& x, std::span<const int> labels, double reg, std::uint64_t seed,
                           SvmOptions options) {
  if (static_cast<Eigen::Index>(labels.size()) != x.cols()) throw ShapeError("svm: label count does not match samples");
  if (!(reg > 0.0)) throw ConfigError("svm: regularization must be positive");
  if (!x.allFinite()) throw Error("svm: non-finite features");
  int positives = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw Error("svm: labels must be 0 or 1");
    positives += l;
  }
  const int n = static_cast<int>(labels.size());
  if (positives < 2 || n - positives < 2) throw Error("svm: need at least two samples of each class");

  LinearSvm svm;
  svm.weights = Eigen::VectorXd::Zero(x.rows());
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  // t0 = 1 / reg makes the first step size 1.
  const double t0 = 1.0 / reg;
  double t = 0;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    rng.shuffle(order);
    for (int j : order) {
      const double eta = 1.0 / (reg * (t + t0));
      const double s = labels[static_cast<std::size_t>(j)] == 1 ? 1.0 : -1.0;
      const double margin = s * (svm.weights.dot(x.col(j)) + svm.bias);
      const double shrink = 1.0 - eta * reg;
      svm.weights *= shrink;
      svm.bias *= shrink;
      if (margin < 1.0) {
        svm.weights += (eta * s) * x.col(j);
        svm.bias += eta * s;
      }
      t += 1.0;
    }
  }
  return svm;
}

double pad_from_error(double epsilon) { return std::max(0.0, 2.0 * (1.0 - 2.0 * epsilon)); }

PADResult pad(const FeatureMatrix& a, const FeatureMatrix& b, std::span<const double> reg_grid, std::uint64_t seed,
              std::string label, std::string features) {
  if (reg_grid.empty()) throw ConfigError("pad: regularization grid is empty");
  if (a.cols() == 0 || b.cols() == 0) throw Error("pad: both feature sets must be nonempty");
  if (a.rows() != b.rows()) throw ShapeError("pad: feature dimensions differ");
  const Eigen::Index n = a.cols() + b.cols();
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng::derived(seed, 0x706164);
  rng.shuffle(order);
  const Eigen::Index n_train = n / 2;
  auto column = [&](int k) { return k < a.cols() ? a.col(k) : b.col(k - a.cols()); };
  auto label_of = [&](int k) { return k < a.cols() ? 1 : 0; };

  FeatureMatrix train(a.rows(), n_train), test(a.rows(), n - n_train);
  std::vector<int> y_train, y_test;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int k = order[static_cast<std::size_t>(i)];
    if (i < n_train) {
      train.col(i) = column(k);
      y_train.push_back(label_of(k));
    } else {
      test.col(i - n_train) = column(k);
      y_test.push_back(label_of(k));
    }
  }
  const Eigen::VectorXd mean = train.rowwise().mean();
  Eigen::VectorXd stddev = ((train.colwise() - mean).array().square().rowwise().mean()).sqrt().matrix();
  for (Eigen::Index d = 0; d < stddev.size(); ++d) {
    if (!(stddev(d) > 1e-12)) stddev(d) = 1.0;
  }
  train = (train.colwise() - mean).array().colwise() / stddev.array();
  test = (test.colwise() - mean).array().colwise() / stddev.array();

  PADResult r;
  r.label = std::move(label);
  r.features = std::move(features);
  r.seed = seed;
  r.epsilon = 2.0;
  for (double reg : reg_grid) {
    const LinearSvm svm = train_linear_svm(train, y_train, reg, Rng::derived(seed, 0x73766d).next_u64());
    const double err = svm.error(test, y_test);
    if (err < r.epsilon) {
      r.epsilon = err;
      r.reg = reg;
    }
  }
  r.pad = pad_from_error(r.epsilon);
  return r;
}

std::vector<PADResult> pairwise_source_pads(std::span<const FeatureMatrix> sources,
                                            std::span<const std::string> names, std::span<const double> reg_grid,
                                            std::uint64_t seed, const std::string& features) {
  if (sources.size() < 2) throw ConfigError("pairwise PAD needs at least two sources");
  if (names.size() != sources.size()) throw ConfigError("pairwise PAD: one name per source is required");
  std::vector<PADResult> out;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    for (std::size_t j = i + 1; j < sources.size(); ++j) {
      out.push_back(pad(sources[i], sources[j], reg_grid, seed, names[i] + "|" + names[j], features));
    }
  }
  return out;
}

void MixtureSpec::validate() const {
  if (tenths.empty()) throw ConfigError("mixture needs at least one weight");
  int sum = 0;
  for (int t : tenths) {
    if (t < 0 || t > 10) throw ConfigError("mixture weights must be in 0..10 tenths");
    sum += t;
  }
  if (sum != 10) throw ConfigError("mixture weights must sum to 10 tenths, got " + std::to_string(sum));
}

std::string MixtureSpec::to_string() const {
  std::string s = "(";
  for (std::size_t i = 0; i < tenths.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(tenths[i]);
  }
  return s + ")/10";
}

namespace {

void compose(int remaining, int parts, int step, std::vector<int>& prefix, std::vector<MixtureSpec>& out) {
  if (parts == 1) {
    prefix.push_back(remaining);
    out.push_back(MixtureSpec{prefix});
    prefix.pop_back();
    return;
  }
  for (int v = 0; v <= remaining; v += step) {
    prefix.push_back(v);
    compose(remaining - v, parts - 1, step, prefix, out);
    prefix.pop_back();
  }
}

}  // namespace

std::vector<MixtureSpec> enumerate_mixtures(int n, int step_tenths) {
  if (n < 1) throw ConfigError("enumerate_mixtures needs n >= 1");
  if (step_tenths < 1 || 10 % step_tenths != 0) throw ConfigError("step_tenths must divide 10");
  std::vector<MixtureSpec> out;
  std::vector<int> prefix;
  compose(10, n, step_tenths, prefix, out);
  return out;
}

std::vector<int> mixture_counts(const MixtureSpec& spec, int n_t) {
  spec.validate();
  if (n_t < 0) throw ConfigError("mixture sample count must be >= 0");
  const std::size_t n = spec.tenths.size();
  std::vector<int> counts(n);
  std::vector<int> remainders(n);
  int assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const long long scaled = static_cast<long long>(spec.tenths[i]) * n_t;
    counts[i] = static_cast<int>(scaled / 10);
    remainders[i] = static_cast<int>(scaled % 10);
    assigned += counts[i];
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return remainders[a] > remainders[b]; });
  for (std::size_t k = 0; assigned < n_t; ++k, ++assigned) ++counts[order[k]];
  return counts;
}

MixtureDraw sample_mixture(const MixtureSpec& spec, std::span<const int> source_sizes, int n_t, std::uint64_t seed) {
  if (spec.tenths.size() != source_sizes.size()) throw ConfigError("mixture arity does not match the source count");
  MixtureDraw draw;
  draw.counts = mixture_counts(spec, n_t);
  draw.with_replacement.assign(source_sizes.size(), false);
  for (std::size_t i = 0; i < source_sizes.size(); ++i) {
    const int need = draw.counts[i];
    if (need == 0) continue;
    const int size = source_sizes[i];
    if (size < 1) throw Error("mixture source " + std::to_string(i) + " is empty");
    Rng rng = Rng::derived(seed, 0x6d6978 + i);
    if (need <= size) {
      std::vector<int> order(static_cast<std::size_t>(size));
      std::iota(order.begin(), order.end(), 0);
      rng.shuffle(order);
      for (int k = 0; k < need; ++k) draw.picks.emplace_back(static_cast<int>(i), order[static_cast<std::size_t>(k)]);
    } else {
      spdlog::warn("mixture {}: source {} has {} samples but {} are needed; sampling with replacement",
                   spec.to_string(), i, size, need);
      draw.with_replacement[i] = true;
      for (int k = 0; k < need; ++k) {
        draw.picks.emplace_back(static_cast<int>(i), static_cast<int>(rng.below(static_cast<std::uint64_t>(size))));
      }
    }
  }
  return draw;
}

FeatureMatrix gather_mixture(const MixtureDraw& draw, std::span<const FeatureMatrix> sources) {
  if (sources.empty()) throw ConfigError("no sources");
  FeatureMatrix out(sources[0].rows(), static_cast<Eigen::Index>(draw.picks.size()));
  for (std::size_t k = 0; k < draw.picks.size(); ++k) {
    const auto [s, j] = draw.picks[k];
    out.col(static_cast<Eigen::Index>(k)) = sources[static_cast<std::size_t>(s)].col(j);
  }
  return out;
}

ClosestMixture closest_mixture(std::span<const FeatureMatrix> sources, const FeatureMatrix& target,
                               std::span<const double> reg_grid, std::uint64_t seed, const std::string& features,
                               int step_tenths) {
  if (sources.empty()) throw ConfigError("closest_mixture needs at least one source");
  if (target.cols() == 0) throw Error("closest_mixture: target is empty");
  std::vector<int> sizes;
  for (const auto& s : sources) sizes.push_back(static_cast<int>(s.cols()));
  const int n_t = static_cast<int>(target.cols());
  ClosestMixture out;
  bool have = false;
  for (const MixtureSpec& spec : enumerate_mixtures(static_cast<int>(sources.size()), step_tenths)) {
    const MixtureDraw draw = sample_mixture(spec, sizes, n_t, seed);
    const FeatureMatrix mix = gather_mixture(draw, sources);
    PADResult r = pad(mix, target, reg_grid, seed, spec.to_string(), features);
    if (!have || r.pad < out.result.pad) {
      out.spec = spec;
      out.result = r;
      have = true;
    }
    out.evaluated.emplace_back(spec, std::move(r));
  }
  return out;
}

nlohmann::json BoundReport::to_json() const {
  return {{"features", features},
          {"epsilon_hat", epsilon_hat},
          {"gamma_hat", gamma_hat},
          {"weighted_source_risk", weighted_risk},
          {"source_risks", source_risks},
          {"pi", pi.tenths},
          {"partial_bound", partial_bound()},
          {"lambda_pi", "unknown (not estimable: requires the jointly optimal hypothesis)"}};
}

std::string BoundReport::describe() const {
  std::ostringstream os;
  os << "R_t <= " << weighted_risk << " + (" << gamma_hat << " + " << epsilon_hat << ")/2 + lambda_pi = "
     << partial_bound() << " + lambda_pi  [lambda_pi unknown]";
  return os.str();
}

BoundReport bound_report(std::span<const PADResult> pairwise, const PADResult& closest,
                         std::span<const double> source_risks, const MixtureSpec& pi) {
  pi.validate();
  if (source_risks.size() != pi.tenths.size()) throw ConfigError("bound report: one risk per source is required");
  BoundReport r;
  r.features = closest.features;
  for (const PADResult& p : pairwise) {
    if (p.features != closest.features) {
      throw ConfigError("bound report: PADs come from different feature configurations ('" + p.features + "' vs '" +
                        closest.features + "')");
    }
    r.epsilon_hat = std::max(r.epsilon_hat, p.pad);
  }
  r.gamma_hat = closest.pad;
  r.pi = pi;
  r.source_risks.assign(source_risks.begin(), source_risks.end());
  for (std::size_t i = 0; i < source_risks.size(); ++i) r.weighted_risk += pi.weight(static_cast<int>(i)) * source_risks[i];
  return r;
}

void write_pad_report(const std::filesystem::path& path, std::span<const PadRecord> records,
                      const std::string& digest, std::uint64_t run_seed) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "# config_digest=" << digest << " seed=" << run_seed << "\n";
  out << "kind\tlabel\tfeatures\tepsilon\tpad\treg\tseed\n";
  out.precision(17);
  for (const PadRecord& r : records) {
    out << r.kind << '\t' << r.result.label << '\t' << r.result.features << '\t' << r.result.epsilon << '\t'
        << r.result.pad << '\t' << r.result.reg << '\t' << r.result.seed << '\n';
  }
}

std::vector<PadRecord> read_pad_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  std::vector<PadRecord> out;
  std::string line;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      header = true;
      continue;
    }
    std::istringstream row(line);
    PadRecord r;
    std::string eps, pad_value, reg, seed;
    std::getline(row, r.kind, '\t');
    std::getline(row, r.result.label, '\t');
    std::getline(row, r.result.features, '\t');
    std::getline(row, eps, '\t');
    std::getline(row, pad_value, '\t');
    std::getline(row, reg, '\t');
    std::getline(row, seed, '\t');
    r.result.epsilon = std::stod(eps);
    r.result.pad = std::stod(pad_value);
    r.result.reg = std::stod(reg);
    r.result.seed = std::stoull(seed);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace lrdg
