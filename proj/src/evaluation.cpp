#include "lrdg/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

namespace lrdg {

std::string to_string(Method m) { return m == Method::baseline ? "baseline" : "lrdg"; }

Method parse_method(const std::string& name) {
  if (name == "baseline") return Method::baseline;
  if (name == "lrdg") return Method::lrdg;
  throw ConfigError("unknown method '" + name + "' (expected baseline or lrdg)");
}

std::vector<int> argmax_columns(const MatrixR& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.cols()));
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    Eigen::Index arg = 0;
    logits.col(j).maxCoeff(&arg);
    out[static_cast<std::size_t>(j)] = static_cast<int>(arg);
  }
  return out;
}

double accuracy(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) throw ShapeError("accuracy: prediction count does not match labels");
  if (labels.empty()) throw Error("accuracy: empty split");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predictions[i] == labels[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

namespace {

template <typename Model>
double evaluate_impl(const Model& model, int model_classes, const MultiDomainDataset& data, int domain,
                     std::optional<Split> split) {
  if (model_classes != data.num_classes()) {
    throw ConfigError("model predicts " + std::to_string(model_classes) + " classes but the dataset has " +
                      std::to_string(data.num_classes()));
  }
  const DomainTensor t = pack_domain(data, domain, split);
  if (t.size() == 0) throw Error("evaluate: split of domain " + data.domains[static_cast<std::size_t>(domain)].name + " is empty");
  return accuracy(argmax_columns(batched_logits(model, t.images, t.pixels)), t.labels);
}

}  // namespace

double evaluate(const nn::Classifier<Real>& model, const MultiDomainDataset& data, int domain,
                std::optional<Split> split) {
  return evaluate_impl(model, model.spec().num_classes, data, domain, split);
}

double evaluate(const InvariantModel& model, const MultiDomainDataset& data, int domain, std::optional<Split> split) {
  return evaluate_impl(model, model.classifier.spec().num_classes, data, domain, split);
}

std::optional<Split> target_split(const MultiDomainDataset& data) {
  if (data.synthetic) return Split::test;
  return std::nullopt;
}

double ProtocolResult::average(Method m) const {
  double sum = 0;
  int n = 0;
  for (const auto& r : records) {
    if (r.method == m) {
      sum += r.accuracy;
      ++n;
    }
  }
  return n ? sum / n : 0.0;
}

std::pair<double, double> ProtocolResult::seed_mean_std(Method m) const {
  std::vector<double> per_seed;
  for (std::uint64_t s : seeds()) {
    double sum = 0;
    int n = 0;
    for (const auto& r : records) {
      if (r.method == m && r.seed == s) {
        sum += r.accuracy;
        ++n;
      }
    }
    if (n) per_seed.push_back(sum / n);
  }
  if (per_seed.empty()) return {0.0, 0.0};
  double mean = 0;
  for (double v : per_seed) mean += v;
  mean /= static_cast<double>(per_seed.size());
  double var = 0;
  for (double v : per_seed) var += (v - mean) * (v - mean);
  const double sd = per_seed.size() > 1 ? std::sqrt(var / static_cast<double>(per_seed.size() - 1)) : 0.0;
  return {mean, sd};
}

std::vector<Method> ProtocolResult::methods() const {
  std::vector<Method> out;
  for (const auto& r : records) {
    if (std::find(out.begin(), out.end(), r.method) == out.end()) out.push_back(r.method);
  }
  return out;
}

std::vector<std::uint64_t> ProtocolResult::seeds() const {
  std::vector<std::uint64_t> out;
  for (const auto& r : records) {
    if (std::find(out.begin(), out.end(), r.seed) == out.end()) out.push_back(r.seed);
  }
  return out;
}

nlohmann::json ProtocolResult::summary() const {
  nlohmann::json j;
  j["records"] = nlohmann::json::array();
  for (const auto& r : records) {
    j["records"].push_back({{"target", r.target},
                            {"method", to_string(r.method)},
                            {"accuracy", r.accuracy},
                            {"seed", r.seed},
                            {"config_digest", r.digest}});
  }
  j["average"] = nlohmann::json::object();
  for (Method m : methods()) {
    const auto [mean, sd] = seed_mean_std(m);
    j["average"][to_string(m)] = {{"accuracy", average(m)}, {"seed_mean", mean}, {"seed_std", sd}};
  }
  j["seeds"] = seeds();
  return j;
}

ProtocolResult run_protocol(const MultiDomainDataset& data, const TrainConfig& config,
                            const ProtocolOptions& options) {
  config.validate();
  if (options.methods.empty()) throw ConfigError("no methods requested");
  const bool want_lrdg = std::find(options.methods.begin(), options.methods.end(), Method::lrdg) != options.methods.end();
  if (data.num_domains() < 2) throw ConfigError("the leave-one-domain-out protocol needs at least two domains");
  if (want_lrdg && data.num_domains() < 3) {
    throw ConfigError("lrdg needs at least two source domains per fold (three domains in total)");
  }
  const bool search = config.lambda2_grid.size() * config.lambda3_grid.size() > 1;
  std::vector<std::uint64_t> seeds = options.seeds;
  if (seeds.empty()) seeds.push_back(config.seed);

  ProtocolResult result;
  for (std::uint64_t seed : seeds) {
    TrainConfig cfg = config;
    cfg.seed = seed;
    for (const LooFold& fold : make_loo_splits(data)) {
      if (!options.targets.empty() &&
          std::find(options.targets.begin(), options.targets.end(), fold.target) == options.targets.end()) {
        continue;
      }
      const std::string target_name = data.domains[static_cast<std::size_t>(fold.target)].name;
      spdlog::info("fold: target {} (seed {})", target_name, seed);
      FoldOutcome out;
      out.fold = fold;
      out.seed = seed;
      auto hooks = [&](const std::string& run) {
        TrainHooks h = options.hooks_for ? options.hooks_for(out, run) : TrainHooks{};
        h.audit = &out.audit;
        return h;
      };
      std::vector<ProtocolRecord> rows;
      const auto split = target_split(data);
      for (Method m : options.methods) {
        if (m == Method::baseline) {
          out.baseline = train_erm_baseline(data, fold.sources, cfg, hooks("baseline"));
        } else {
          TrainConfig lrdg_cfg = cfg;
          if (search) {
            out.lambdas = select_lambdas(data, fold.sources, cfg, hooks("lambdas"));
          } else {
            out.lambdas = LambdaSelection{cfg.lambda2_grid.empty() ? cfg.weights.lambda2 : cfg.lambda2_grid[0],
                                          cfg.lambda3_grid.empty() ? cfg.weights.lambda3 : cfg.lambda3_grid[0],
                                          {}};
          }
          lrdg_cfg.weights.lambda2 = out.lambdas->lambda2;
          lrdg_cfg.weights.lambda3 = out.lambdas->lambda3;
          out.bank = train_specific_bank(data, fold.sources, lrdg_cfg, hooks("specific"));
          out.bank->freeze();
          out.lrdg = train_domain_invariant(data, *out.bank, lrdg_cfg, hooks("invariant"));
          out.bank->verify();
        }
      }
      if (out.audit.touched(fold.target)) {
        throw Error("target-blindness violated: a sample of target " + target_name + " entered training");
      }
      // Evaluation happens only after every training run of the fold.
      for (Method m : options.methods) {
        const double acc = m == Method::baseline ? evaluate(out.baseline->model, data, fold.target, split)
                                                 : evaluate(out.lrdg->model, data, fold.target, split);
        rows.push_back(ProtocolRecord{target_name, m, acc, seed, options.digest});
        spdlog::info("target {} {} accuracy {:.4f}", target_name, to_string(m), acc);
      }
      if (options.on_fold) options.on_fold(out, rows);
      result.records.insert(result.records.end(), rows.begin(), rows.end());
    }
  }
  return result;
}

void write_protocol_table(const std::filesystem::path& path, const ProtocolResult& result) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(17);
  out << "target\tmethod\tseed\taccuracy\tconfig_digest\n";
  for (const auto& r : result.records) {
    out << r.target << '\t' << to_string(r.method) << '\t' << r.seed << '\t' << r.accuracy << '\t' << r.digest << '\n';
  }
  const std::string digest = result.records.empty() ? "" : result.records.front().digest;
  for (Method m : result.methods()) out << "Avg.\t" << to_string(m) << "\t-\t" << result.average(m) << '\t' << digest << '\n';
}

ProtocolResult read_protocol_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  ProtocolResult result;
  std::string line;
  std::getline(in, line);
  if (line != "target\tmethod\tseed\taccuracy\tconfig_digest") throw Error(path.string() + ": unexpected header");
  std::map<Method, double> averages;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string target, method, seed, acc, digest;
    std::getline(row, target, '\t');
    std::getline(row, method, '\t');
    std::getline(row, seed, '\t');
    std::getline(row, acc, '\t');
    std::getline(row, digest, '\t');
    if (target == "Avg.") {
      averages[parse_method(method)] = std::stod(acc);
      continue;
    }
    result.records.push_back(ProtocolRecord{target, parse_method(method), std::stod(acc), std::stoull(seed), digest});
  }
  for (const auto& [m, avg] : averages) {
    if (std::abs(result.average(m) - avg) > 1e-12) {
      throw Error(path.string() + ": Avg. row of " + to_string(m) + " does not match its records");
    }
  }
  return result;
}

}  // namespace lrdg
