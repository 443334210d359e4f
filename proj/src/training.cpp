#include "lrdg/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <spdlog/spdlog.h>

#include "lrdg/nn/checkpoint.hpp"

namespace lrdg {

namespace {

// Seed streams. Every classifier starts from the same initialization so that
// stage-1, stage-2 and baseline runs are paired; each domain has its own
// batch-order stream shared by all stages.
constexpr std::uint64_t kClassifierInitStream = 17;
constexpr std::uint64_t kMapperInitStream = 23;
constexpr std::uint64_t kSamplerStreamBase = 1000;

Rng sampler_rng(const TrainConfig& config, int domain) {
  return Rng::derived(config.seed, kSamplerStreamBase + static_cast<std::uint64_t>(domain));
}

nn::Classifier<Real> fresh_classifier(const TrainConfig& config, int num_classes) {
  nn::ClassifierSpec spec = config.classifier;
  spec.num_classes = num_classes;
  Rng rng = Rng::derived(config.seed, kClassifierInitStream);
  return nn::Classifier<Real>(spec, rng);
}

nn::Mapper<Real> fresh_mapper(const TrainConfig& config) {
  Rng rng = Rng::derived(config.seed, kMapperInitStream);
  return nn::Mapper<Real>(config.mapper, rng);
}

void check_finite(double value, const std::string& what) {
  if (!std::isfinite(value)) throw DivergenceError(what + ": loss became non-finite; try a smaller learning rate");
}

MatrixR concat_batches(std::span<const MatrixR> parts) {
  Eigen::Index cols = 0;
  for (const auto& p : parts) cols += p.cols();
  MatrixR out(parts.empty() ? 0 : parts[0].rows(), cols);
  Eigen::Index offset = 0;
  for (const auto& p : parts) {
    out.middleCols(offset, p.cols()) = p;
    offset += p.cols();
  }
  return out;
}

std::vector<int> labels_of(const DomainTensor& t, std::span<const int> rows) {
  std::vector<int> out;
  out.reserve(rows.size());
  for (int r : rows) out.push_back(t.labels[static_cast<std::size_t>(r)]);
  return out;
}

void audit(const TrainHooks& hooks, const DomainTensor& t, std::span<const int> rows) {
  if (!hooks.audit) return;
  std::vector<int> ids;
  ids.reserve(rows.size());
  for (int r : rows) ids.push_back(t.indices[static_cast<std::size_t>(r)]);
  hooks.audit->record(t.domain, ids);
}

void audit_all(const TrainHooks& hooks, const DomainTensor& t) {
  if (hooks.audit) hooks.audit->record(t.domain, t.indices);
}

double mean_entropy(const MatrixR& logits) {
  double total = 0;
  for (Eigen::Index j = 0; j < logits.cols(); ++j) total += entropy(logits.col(j));
  return logits.cols() ? total / static_cast<double>(logits.cols()) : 0.0;
}

double mean_uncertainty(const MatrixR& logits, UncertaintyVariant variant) {
  double total = 0;
  for (Eigen::Index j = 0; j < logits.cols(); ++j) total += uncertainty_loss(logits.col(j), variant);
  return logits.cols() ? total / static_cast<double>(logits.cols()) : 0.0;
}

int steps_per_epoch(std::span<const DomainTensor> train, int batch) {
  int n = 0;
  for (const auto& t : train) n = std::max(n, t.size());
  return std::max(1, (n + batch - 1) / batch);
}

// ---------------------------------------------------------------------------
// Shared epoch loop: SGD over several parameter sets, per-epoch validation,
// best-checkpoint selection, patience-based stopping and resumable state.

struct Validation {
  nlohmann::json record;
  std::vector<double> key;  // compared lexicographically, larger is better
};

struct Loop {
  std::string tag;  // identifies the run inside a state file
  int epochs = 1;
  int patience = 0;
  int steps = 1;
  double lr = 0.1;
  double momentum = 0.9;
  std::vector<nn::ParameterSet<Real>*> params;
  std::vector<DomainSampler>* samplers = nullptr;
  // Performs one step: returns the loss terms and the gradients per parameter set.
  // `index` counts steps from the start of the run, so resumed runs see the same value.
  std::function<std::pair<nlohmann::json, std::vector<nn::ParameterSet<Real>>>(long long index)> step;
  std::function<Validation()> validate;
};

struct LoopResult {
  int epochs_run = 0;
  int best_epoch = 0;
  std::vector<double> best_key;
  nlohmann::json best_record;
  std::vector<nlohmann::json> curve;
};

/// Adds clipped Gaussian pixel noise; the stream depends on (seed, step, domain) only.
void add_input_noise(MatrixR& images, double sigma, std::uint64_t seed, long long step, int domain) {
  if (sigma <= 0.0) return;
  Rng rng = Rng::derived(seed ^ 0x6e6f697365ULL, static_cast<std::uint64_t>(step) * 1024 + static_cast<std::uint64_t>(domain));
  for (Eigen::Index i = 0; i < images.size(); ++i) {
    images.data()[i] = std::clamp(images.data()[i] + static_cast<Real>(sigma * rng.normal()), Real(0), Real(1));
  }
}

void add_terms(nlohmann::json& sum, const nlohmann::json& terms) {
  for (auto it = terms.begin(); it != terms.end(); ++it) {
    sum[it.key()] = sum.value(it.key(), 0.0) + it.value().get<double>();
  }
}

void save_state(const std::filesystem::path& path, const Loop& loop, const std::vector<Sgd>& opt,
                const std::vector<nn::ParameterSet<Real>>& best, const LoopResult& result, int next_epoch,
                int since_best, bool finished) {
  nn::Checkpoint ck;
  ck.network = "train-state";
  for (std::size_t k = 0; k < loop.params.size(); ++k) {
    const std::string p = std::to_string(k);
    const auto& cur = *loop.params[k];
    for (int i = 0; i < cur.count(); ++i) ck.params.add("param" + p + "/" + cur.name(i), cur[i]);
    const auto& vel = opt[k].velocity();
    for (int i = 0; i < vel.count(); ++i) ck.params.add("velocity" + p + "/" + vel.name(i), vel[i]);
    for (int i = 0; i < best[k].count(); ++i) ck.params.add("best" + p + "/" + best[k].name(i), best[k][i]);
  }
  nlohmann::json samplers = nlohmann::json::array();
  for (const auto& s : *loop.samplers) samplers.push_back(s.state());
  ck.metadata = {{"tag", loop.tag},
                 {"next_epoch", next_epoch},
                 {"since_best", since_best},
                 {"finished", finished},
                 {"best_epoch", result.best_epoch},
                 {"best_key", result.best_key},
                 {"best_record", result.best_record},
                 {"curve", result.curve},
                 {"samplers", samplers}};
  nn::save_checkpoint(path, ck);
}

nn::ParameterSet<Real> take_prefix(const nn::ParameterSet<Real>& all, const std::string& prefix) {
  nn::ParameterSet<Real> out;
  for (int i = 0; i < all.count(); ++i) {
    if (all.name(i).rfind(prefix, 0) == 0) out.add(all.name(i).substr(prefix.size()), all[i]);
  }
  return out;
}

LoopResult run_loop(Loop& loop, const TrainHooks& hooks) {
  std::vector<Sgd> opt;
  for (std::size_t k = 0; k < loop.params.size(); ++k) opt.emplace_back(loop.lr, loop.momentum);
  std::vector<nn::ParameterSet<Real>> best;
  for (auto* p : loop.params) best.push_back(*p);
  LoopResult result;
  int start = 0;
  int since_best = 0;
  bool finished = false;

  if (!hooks.state_path.empty() && std::filesystem::exists(hooks.state_path)) {
    nn::Checkpoint ck = nn::load_checkpoint(hooks.state_path);
    if (ck.network != "train-state" || ck.metadata.value("tag", "") != loop.tag) {
      throw ConfigError("state file " + hooks.state_path.string() + " belongs to a different run");
    }
    for (std::size_t k = 0; k < loop.params.size(); ++k) {
      const std::string p = std::to_string(k);
      nn::ParameterSet<Real> cur = take_prefix(ck.params, "param" + p + "/");
      if (!cur.same_layout(*loop.params[k])) throw ConfigError("state file parameters do not match the model");
      *loop.params[k] = std::move(cur);
      nn::ParameterSet<Real> vel = take_prefix(ck.params, "velocity" + p + "/");
      if (vel.count() > 0) opt[k].set_velocity(std::move(vel));
      best[k] = take_prefix(ck.params, "best" + p + "/");
    }
    const auto& m = ck.metadata;
    start = m.at("next_epoch").get<int>();
    since_best = m.at("since_best").get<int>();
    finished = m.at("finished").get<bool>();
    result.best_epoch = m.at("best_epoch").get<int>();
    result.best_key = m.at("best_key").get<std::vector<double>>();
    result.best_record = m.at("best_record");
    result.curve = m.at("curve").get<std::vector<nlohmann::json>>();
    for (std::size_t s = 0; s < loop.samplers->size(); ++s) (*loop.samplers)[s].restore(m.at("samplers").at(s));
    spdlog::info("{}: resuming at epoch {}", loop.tag, start);
  }

  int ran = 0;
  for (int epoch = start; epoch < loop.epochs && !finished; ++epoch) {
    nlohmann::json train = nlohmann::json::object();
    for (int s = 0; s < loop.steps; ++s) {
      auto [terms, grads] = loop.step(static_cast<long long>(epoch) * loop.steps + s);
      check_finite(terms.value("total", 0.0), loop.tag);
      for (std::size_t k = 0; k < loop.params.size(); ++k) opt[k].step(*loop.params[k], grads[k]);
      add_terms(train, terms);
    }
    for (auto it = train.begin(); it != train.end(); ++it) it.value() = it.value().get<double>() / loop.steps;
    for (auto* p : loop.params) {
      if (!p->all_finite()) throw DivergenceError(loop.tag + ": parameters became non-finite");
    }

    Validation v = loop.validate();
    const bool improved = result.curve.empty() || v.key > result.best_key;
    if (improved) {
      result.best_key = v.key;
      result.best_epoch = epoch + 1;
      result.best_record = v.record;
      for (std::size_t k = 0; k < loop.params.size(); ++k) best[k] = *loop.params[k];
      since_best = 0;
    } else {
      ++since_best;
    }
    nlohmann::json record = {{"run", loop.tag}, {"epoch", epoch + 1}, {"learning_rate", loop.lr},
                             {"train", train},  {"val", v.record},    {"improved", improved}};
    result.curve.push_back(record);
    if (hooks.on_epoch) hooks.on_epoch(record);
    spdlog::debug("{} epoch {} train {} val {}", loop.tag, epoch + 1, train.dump(), v.record.dump());

    if (epoch + 1 >= loop.epochs || (loop.patience > 0 && since_best >= loop.patience)) finished = true;
    if (!hooks.state_path.empty()) save_state(hooks.state_path, loop, opt, best, result, epoch + 1, since_best, finished);
    ++ran;
    if (!finished && hooks.interrupt_after > 0 && ran >= hooks.interrupt_after) {
      throw TrainingInterrupted(loop.tag + ": interrupted after epoch " + std::to_string(epoch + 1));
    }
  }
  result.epochs_run = static_cast<int>(result.curve.size());
  for (std::size_t k = 0; k < loop.params.size(); ++k) *loop.params[k] = best[k];
  return result;
}

TrainHooks hooks_for_lr(const TrainHooks& hooks, std::size_t lr_index, std::size_t lr_count) {
  TrainHooks h = hooks;
  if (!h.state_path.empty() && lr_count > 1) {
    h.state_path += ".lr" + std::to_string(lr_index);
  }
  return h;
}

std::string config_tag(const TrainConfig& config) {
  Fnv1a h;
  h.update(config.to_json().dump());
  return to_hex(h.digest());
}

}  // namespace

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (learning_rates.empty()) throw ConfigError("learning_rates must not be empty");
  for (double lr : learning_rates) {
    if (!(lr > 0.0)) throw ConfigError("learning rates must be positive");
  }
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");
  if (epochs_specific < 1 || epochs_invariant < 1 || epochs_baseline < 1) {
    throw ConfigError("epoch counts must be positive");
  }
  if (patience < 0) throw ConfigError("patience must be >= 0");
  if (batch_per_domain < 1) throw ConfigError("batch_per_domain must be positive");
  if (specific_noise < 0.0) throw ConfigError("specific_noise must be >= 0");
  weights.validate();
  for (double v : lambda2_grid) {
    if (v < 0.0) throw ConfigError("lambda2 grid values must be >= 0");
  }
  for (double v : lambda3_grid) {
    if (v < 0.0) throw ConfigError("lambda3 grid values must be >= 0");
  }
  classifier.validate();
  mapper.validate();
}

nlohmann::json TrainConfig::to_json() const {
  return {{"learning_rates", learning_rates},
          {"momentum", momentum},
          {"epochs_specific", epochs_specific},
          {"epochs_invariant", epochs_invariant},
          {"epochs_baseline", epochs_baseline},
          {"patience", patience},
          {"batch_per_domain", batch_per_domain},
          {"specific_noise", specific_noise},
          {"seed", seed},
          {"uncertainty", lrdg::to_string(uncertainty)},
          {"reconstruction", lrdg::to_string(reconstruction)},
          {"lambda1", weights.lambda1},
          {"lambda2", weights.lambda2},
          {"lambda3", weights.lambda3},
          {"lambda2_grid", lambda2_grid},
          {"lambda3_grid", lambda3_grid},
          {"classifier", nn::to_json(classifier)},
          {"mapper", nn::to_json(mapper)}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.learning_rates = j.at("learning_rates").get<std::vector<double>>();
  c.momentum = j.at("momentum").get<double>();
  c.epochs_specific = j.at("epochs_specific").get<int>();
  c.epochs_invariant = j.at("epochs_invariant").get<int>();
  c.epochs_baseline = j.at("epochs_baseline").get<int>();
  c.patience = j.at("patience").get<int>();
  c.batch_per_domain = j.at("batch_per_domain").get<int>();
  c.specific_noise = j.value("specific_noise", 0.0);
  c.seed = j.at("seed").get<std::uint64_t>();
  c.uncertainty = parse_uncertainty_variant(j.at("uncertainty").get<std::string>());
  c.reconstruction = parse_reconstruction_kind(j.at("reconstruction").get<std::string>());
  c.weights.lambda1 = j.at("lambda1").get<double>();
  c.weights.lambda2 = j.at("lambda2").get<double>();
  c.weights.lambda3 = j.at("lambda3").get<double>();
  c.lambda2_grid = j.at("lambda2_grid").get<std::vector<double>>();
  c.lambda3_grid = j.at("lambda3_grid").get<std::vector<double>>();
  c.classifier = nn::classifier_spec_from_json(j.at("classifier"));
  c.mapper = nn::mapper_spec_from_json(j.at("mapper"));
  return c;
}

MatrixR DomainTensor::gather(std::span<const int> rows) const {
  MatrixR out(images.rows(), static_cast<Eigen::Index>(rows.size()) * pixels);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    out.middleCols(static_cast<Eigen::Index>(k) * pixels, pixels) =
        images.middleCols(static_cast<Eigen::Index>(rows[k]) * pixels, pixels);
  }
  return out;
}

DomainTensor pack_domain(const MultiDomainDataset& data, int domain, std::optional<Split> split) {
  const Domain& d = data.domains.at(static_cast<std::size_t>(domain));
  DomainTensor t;
  t.domain = domain;
  t.pixels = data.shape.pixels();
  t.indices = split ? d.indices(*split) : d.all_indices();
  t.images = stack_images(d, t.indices);
  for (int i : t.indices) t.labels.push_back(d.samples[static_cast<std::size_t>(i)].label);
  return t;
}

DomainSampler::DomainSampler(int n, Rng rng) : n_(n), rng_(std::move(rng)) {
  if (n < 1) throw ConfigError("cannot sample from an empty split");
  reshuffle();
}

void DomainSampler::reshuffle() {
  order_.resize(static_cast<std::size_t>(n_));
  for (int i = 0; i < n_; ++i) order_[static_cast<std::size_t>(i)] = i;
  rng_.shuffle(order_);
  position_ = 0;
}

std::vector<int> DomainSampler::next(int count) {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(count));
  while (static_cast<int>(out.size()) < count) {
    if (position_ == order_.size()) reshuffle();
    out.push_back(order_[position_++]);
  }
  return out;
}

nlohmann::json DomainSampler::state() const {
  return {{"n", n_}, {"rng", rng_.serialize()}, {"order", order_}, {"position", position_}};
}

void DomainSampler::restore(const nlohmann::json& state) {
  if (state.at("n").get<int>() != n_) throw ConfigError("sampler state does not match the data");
  rng_.deserialize(state.at("rng").get<std::string>());
  order_ = state.at("order").get<std::vector<int>>();
  position_ = state.at("position").get<std::size_t>();
}

void Sgd::step(nn::ParameterSet<Real>& params, const nn::ParameterSet<Real>& grads) {
  if (velocity_.count() == 0) velocity_ = params.zeros_like();
  const auto mu = static_cast<Real>(momentum_);
  const auto lr = static_cast<Real>(lr_);
  for (int i = 0; i < params.count(); ++i) {
    velocity_[i] = mu * velocity_[i] + grads[i];
    params[i] -= lr * velocity_[i];
  }
}

Scored score_logits(const MatrixR& logits, std::span<const int> labels) {
  Scored s;
  if (logits.cols() == 0) return s;
  int correct = 0;
  double loss = 0;
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    Eigen::Index arg = 0;
    logits.col(j).maxCoeff(&arg);
    const int y = labels[static_cast<std::size_t>(j)];
    if (arg == y) ++correct;
    loss += cross_entropy(logits.col(j), y);
  }
  s.accuracy = static_cast<double>(correct) / static_cast<double>(logits.cols());
  s.loss = loss / static_cast<double>(logits.cols());
  return s;
}

StepGradient erm_step_gradient(const nn::Classifier<Real>& model, const MatrixR& images,
                               std::span<const int> labels) {
  nn::Classifier<Real>::Tape tape;
  const MatrixR logits = model.forward(images, &tape);
  LossResult<Real> ce = cross_entropy_batch(logits, labels);
  StepGradient g;
  g.loss = ce.value;
  g.grads = std::move(model.backward(tape, ce.grad).params);
  return g;
}

StepGradient specific_step_gradient(const nn::Classifier<Real>& model, const MatrixR& own,
                                    std::span<const int> labels, std::span<const MatrixR> others,
                                    const TrainConfig& config) {
  if (others.empty() || config.weights.lambda1 == 0.0) return erm_step_gradient(model, own, labels);
  std::vector<MatrixR> parts;
  parts.push_back(own);
  parts.insert(parts.end(), others.begin(), others.end());
  const MatrixR images = concat_batches(parts);
  nn::Classifier<Real>::Tape tape;
  const MatrixR logits = model.forward(images, &tape);
  const Eigen::Index n_own = static_cast<Eigen::Index>(labels.size());
  std::vector<MatrixR> other_logits;
  Eigen::Index offset = n_own;
  const int pixels = config.classifier.image_size * config.classifier.image_size;
  for (const auto& o : others) {
    const Eigen::Index n = o.cols() / pixels;
    other_logits.push_back(logits.middleCols(offset, n));
    offset += n;
  }
  Stage1Loss<Real> loss = stage1_loss<Real>(logits.leftCols(n_own), labels, other_logits, config.weights,
                                            config.uncertainty);
  MatrixR dlogits(logits.rows(), logits.cols());
  dlogits.leftCols(n_own) = loss.grad_own;
  offset = n_own;
  for (const auto& g : loss.grad_others) {
    dlogits.middleCols(offset, g.cols()) = g;
    offset += g.cols();
  }
  StepGradient out;
  out.loss = loss.total;
  out.grads = std::move(model.backward(tape, dlogits).params);
  return out;
}

// ---------------------------------------------------------------------------
// Stage 1

SpecificResult train_domain_specific(const MultiDomainDataset& data, std::span<const int> sources, int domain,
                                     const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  if (std::find(sources.begin(), sources.end(), domain) == sources.end()) {
    throw ConfigError("domain " + std::to_string(domain) + " is not among the sources");
  }
  std::vector<int> others;
  for (int s : sources) {
    if (s != domain) others.push_back(s);
  }
  const bool use_others = !others.empty() && config.weights.lambda1 != 0.0;
  if (others.empty()) {
    spdlog::warn("domain-specific classifier for {}: single source domain, uncertainty term skipped",
                 data.domains[static_cast<std::size_t>(domain)].name);
  }

  const DomainTensor own_train = pack_domain(data, domain, Split::train);
  const DomainTensor own_val = pack_domain(data, domain, Split::val);
  std::vector<DomainTensor> other_train, other_val;
  for (int o : others) {
    other_train.push_back(pack_domain(data, o, Split::train));
    other_val.push_back(pack_domain(data, o, Split::val));
  }
  audit_all(hooks, own_val);
  for (const auto& v : other_val) audit_all(hooks, v);

  const std::string name = data.domains[static_cast<std::size_t>(domain)].name;
  SpecificResult best;
  bool have_best = false;
  for (std::size_t li = 0; li < config.learning_rates.size(); ++li) {
    nn::Classifier<Real> model = fresh_classifier(config, data.num_classes());
    std::vector<DomainSampler> samplers;
    samplers.emplace_back(own_train.size(), sampler_rng(config, domain));
    if (use_others) {
      for (std::size_t k = 0; k < others.size(); ++k) {
        samplers.emplace_back(other_train[k].size(), sampler_rng(config, others[k]));
      }
    }
    const int batch = config.batch_per_domain;

    Loop loop;
    loop.tag = "specific-" + name + "-" + config_tag(config) + "-lr" + std::to_string(li);
    loop.epochs = config.epochs_specific;
    loop.patience = config.patience;
    loop.steps = steps_per_epoch(std::span(&own_train, 1), batch);
    loop.lr = config.learning_rates[li];
    loop.momentum = config.momentum;
    loop.params = {&model.params()};
    loop.samplers = &samplers;
    loop.step = [&](long long index) {
      const std::vector<int> rows = samplers[0].next(batch);
      audit(hooks, own_train, rows);
      MatrixR own = own_train.gather(rows);
      add_input_noise(own, config.specific_noise, config.seed, index, domain);
      const std::vector<int> labels = labels_of(own_train, rows);
      std::vector<MatrixR> other_batches;
      if (use_others) {
        for (std::size_t k = 0; k < others.size(); ++k) {
          const std::vector<int> r = samplers[k + 1].next(batch);
          audit(hooks, other_train[k], r);
          other_batches.push_back(other_train[k].gather(r));
          add_input_noise(other_batches.back(), config.specific_noise, config.seed, index, others[k]);
        }
      }
      StepGradient g = specific_step_gradient(model, own, labels, other_batches, config);
      std::vector<nn::ParameterSet<Real>> grads;
      grads.push_back(std::move(g.grads));
      return std::make_pair(nlohmann::json{{"total", g.loss}}, std::move(grads));
    };
    loop.validate = [&]() {
      const Scored own = score_logits(batched_logits(model, own_val.images, own_val.pixels), own_val.labels);
      int n_other = 0;
      int correct_other = 0;
      double entropy_sum = 0;
      double uncertainty_sum = 0;
      for (const auto& v : other_val) {
        const MatrixR logits = batched_logits(model, v.images, v.pixels);
        const Scored s = score_logits(logits, v.labels);
        correct_other += static_cast<int>(std::lround(s.accuracy * v.size()));
        n_other += v.size();
        entropy_sum += mean_entropy(logits) * v.size();
        uncertainty_sum += mean_uncertainty(logits, config.uncertainty) * v.size();
      }
      const double other_acc = n_other ? static_cast<double>(correct_other) / n_other : 0.0;
      const double other_ent = n_other ? entropy_sum / n_other : 0.0;
      const double other_u = n_other ? uncertainty_sum / n_other : 0.0;
      const double objective = own.loss + (use_others ? config.weights.lambda1 * other_u : 0.0);
      Validation v;
      v.record = {{"own_accuracy", own.accuracy}, {"own_loss", own.loss},        {"other_accuracy", other_acc},
                  {"other_entropy", other_ent},   {"objective", objective}};
      v.key = {-objective, own.accuracy};
      return v;
    };
    LoopResult r = run_loop(loop, hooks_for_lr(hooks, li, config.learning_rates.size()));

    SpecificResult res{std::move(model), {}, std::move(r.curve)};
    res.metrics.domain = domain;
    res.metrics.learning_rate = loop.lr;
    res.metrics.epochs_run = r.epochs_run;
    res.metrics.best_epoch = r.best_epoch;
    res.metrics.own_accuracy = r.best_record.at("own_accuracy").get<double>();
    res.metrics.other_accuracy = r.best_record.at("other_accuracy").get<double>();
    res.metrics.other_entropy = r.best_record.at("other_entropy").get<double>();
    res.metrics.val_objective = r.best_record.at("objective").get<double>();
    spdlog::info("specific[{}] lr={} epochs={} best={} own_acc={:.3f} other_acc={:.3f} other_entropy={:.3f}", name,
                 loop.lr, r.epochs_run, r.best_epoch, res.metrics.own_accuracy, res.metrics.other_accuracy,
                 res.metrics.other_entropy);
    if (!have_best || res.metrics.val_objective < best.metrics.val_objective) {
      best = std::move(res);
      have_best = true;
    }
  }
  return best;
}

void SpecificClassifierBank::add(int domain, nn::Classifier<Real> model, SpecificMetrics metrics) {
  if (frozen_) throw Error("classifier bank is frozen");
  domains_.push_back(domain);
  models_.push_back(std::move(model));
  metrics_.push_back(metrics);
}

void SpecificClassifierBank::freeze() {
  if (frozen_) return;
  checksums_ = current_checksums();
  frozen_ = true;
}

const nn::Classifier<Real>& SpecificClassifierBank::classifier(int i) const {
  return models_.at(static_cast<std::size_t>(i));
}

nn::Classifier<Real>& SpecificClassifierBank::mutable_classifier(int i) {
  if (frozen_) throw Error("classifier bank is frozen; parameters are read-only");
  return models_.at(static_cast<std::size_t>(i));
}

const SpecificMetrics& SpecificClassifierBank::metrics(int i) const { return metrics_.at(static_cast<std::size_t>(i)); }

std::vector<std::uint64_t> SpecificClassifierBank::current_checksums() const {
  std::vector<std::uint64_t> out;
  for (const auto& m : models_) out.push_back(m.params().checksum());
  return out;
}

void SpecificClassifierBank::verify() const {
  if (!frozen_) throw Error("classifier bank is not frozen");
  const auto now = current_checksums();
  for (std::size_t i = 0; i < now.size(); ++i) {
    if (now[i] != checksums_[i]) {
      throw Error("frozen classifier " + std::to_string(domains_[i]) + " changed (checksum " + to_hex(checksums_[i]) +
                  " -> " + to_hex(now[i]) + ")");
    }
  }
}

SpecificClassifierBank train_specific_bank(const MultiDomainDataset& data, std::span<const int> sources,
                                           const TrainConfig& config, const TrainHooks& hooks) {
  SpecificClassifierBank bank;
  for (int d : sources) {
    TrainHooks h = hooks;
    if (!h.state_path.empty()) h.state_path += ".specific-" + std::to_string(d);
    SpecificResult r = train_domain_specific(data, sources, d, config, h);
    bank.add(d, std::move(r.model), r.metrics);
  }
  return bank;
}

// ---------------------------------------------------------------------------
// Stage 2

InvariantStep invariant_step_gradient(const InvariantModel& model, const SpecificClassifierBank& bank,
                                      std::span<const MatrixR> domain_batches,
                                      std::span<const std::vector<int>> domain_labels, const TrainConfig& config) {
  if (!bank.frozen()) throw Error("domain-invariant training requires a frozen classifier bank");
  if (static_cast<int>(domain_batches.size()) != bank.size() || domain_labels.size() != domain_batches.size()) {
    throw ConfigError("one batch per frozen classifier is required");
  }
  const MatrixR x = concat_batches(domain_batches);
  std::vector<int> labels;
  for (const auto& l : domain_labels) labels.insert(labels.end(), l.begin(), l.end());

  nn::Mapper<Real>::Tape mtape;
  const MatrixR z = model.mapper.forward(x, &mtape);
  nn::Classifier<Real>::Tape ftape;
  const MatrixR logits = model.classifier.forward(z, &ftape);

  std::vector<nn::Classifier<Real>::Tape> btapes(domain_batches.size());
  std::vector<MatrixR> bank_logits;
  Eigen::Index offset = 0;
  for (std::size_t i = 0; i < domain_batches.size(); ++i) {
    const Eigen::Index cols = domain_batches[i].cols();
    bank_logits.push_back(bank.classifier(static_cast<int>(i)).forward(z.middleCols(offset, cols), &btapes[i]));
    offset += cols;
  }

  InvariantStep out;
  out.loss = stage2_loss<Real>(logits, labels, bank_logits, z, x, config.weights, config.uncertainty,
                               config.reconstruction);
  auto fg = model.classifier.backward(ftape, out.loss.grad_invariant_logits, true, true);
  out.classifier_grads = std::move(fg.params);
  MatrixR dz = std::move(fg.input);
  dz += out.loss.grad_mapped;
  offset = 0;
  for (std::size_t i = 0; i < domain_batches.size(); ++i) {
    const Eigen::Index cols = domain_batches[i].cols();
    // Input gradient only: the frozen parameters receive nothing.
    auto bg = bank.classifier(static_cast<int>(i)).backward(btapes[i], out.loss.grad_bank_logits[i], false, true);
    dz.middleCols(offset, cols) += bg.input;
    offset += cols;
  }
  out.mapper_grads = std::move(model.mapper.backward(mtape, dz, true, false).params);
  return out;
}

InvariantResult train_domain_invariant(const MultiDomainDataset& data, const SpecificClassifierBank& bank,
                                       const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  if (!bank.frozen()) throw Error("domain-invariant training requires a frozen classifier bank");
  if (bank.size() == 0) throw ConfigError("classifier bank is empty");
  const std::vector<int>& sources = bank.domains();
  for (int i = 0; i < bank.size(); ++i) {
    if (bank.classifier(i).spec().num_classes != data.num_classes()) {
      throw ConfigError("frozen classifier class count does not match the dataset");
    }
  }

  std::vector<DomainTensor> train, val;
  for (int s : sources) {
    train.push_back(pack_domain(data, s, Split::train));
    val.push_back(pack_domain(data, s, Split::val));
  }
  for (const auto& v : val) audit_all(hooks, v);

  InvariantResult best;
  bool have_best = false;
  for (std::size_t li = 0; li < config.learning_rates.size(); ++li) {
    InvariantModel model{fresh_mapper(config), fresh_classifier(config, data.num_classes())};
    std::vector<DomainSampler> samplers;
    for (std::size_t k = 0; k < sources.size(); ++k) samplers.emplace_back(train[k].size(), sampler_rng(config, sources[k]));
    const int batch = config.batch_per_domain;

    Loop loop;
    loop.tag = "invariant-" + config_tag(config) + "-lr" + std::to_string(li);
    loop.epochs = config.epochs_invariant;
    loop.patience = config.patience;
    loop.steps = steps_per_epoch(train, batch);
    loop.lr = config.learning_rates[li];
    loop.momentum = config.momentum;
    loop.params = {&model.mapper.params(), &model.classifier.params()};
    loop.samplers = &samplers;
    loop.step = [&](long long) {
      std::vector<MatrixR> batches;
      std::vector<std::vector<int>> labels;
      for (std::size_t k = 0; k < sources.size(); ++k) {
        const std::vector<int> rows = samplers[k].next(batch);
        audit(hooks, train[k], rows);
        batches.push_back(train[k].gather(rows));
        labels.push_back(labels_of(train[k], rows));
      }
      InvariantStep s = invariant_step_gradient(model, bank, batches, labels, config);
      std::vector<nn::ParameterSet<Real>> grads;
      grads.push_back(std::move(s.mapper_grads));
      grads.push_back(std::move(s.classifier_grads));
      nlohmann::json terms = {{"total", s.loss.total},
                              {"classification", s.loss.classification},
                              {"uncertainty", s.loss.uncertainty},
                              {"reconstruction", s.loss.reconstruction}};
      return std::make_pair(terms, std::move(grads));
    };
    loop.validate = [&]() {
      int n = 0;
      double correct = 0, ce = 0, ent = 0, unc = 0, rec = 0;
      for (std::size_t k = 0; k < sources.size(); ++k) {
        const DomainTensor& v = val[k];
        MatrixR mapped(v.images.rows(), v.images.cols());
        for (int first = 0; first < v.size(); first += 128) {
          const int count = std::min(128, v.size() - first);
          mapped.middleCols(static_cast<Eigen::Index>(first) * v.pixels, static_cast<Eigen::Index>(count) * v.pixels) =
              model.mapper.forward(v.images.middleCols(static_cast<Eigen::Index>(first) * v.pixels,
                                                        static_cast<Eigen::Index>(count) * v.pixels));
        }
        const Scored s = score_logits(batched_logits(model.classifier, mapped, v.pixels), v.labels);
        const MatrixR bl = batched_logits(bank.classifier(static_cast<int>(k)), mapped, v.pixels);
        correct += s.accuracy * v.size();
        ce += s.loss * v.size();
        ent += mean_entropy(bl) * v.size();
        unc += mean_uncertainty(bl, config.uncertainty) * v.size();
        rec += reconstruction_loss(mapped, v.images, config.reconstruction) * v.size();
        n += v.size();
      }
      correct /= n;
      ce /= n;
      ent /= n;
      unc /= n;
      rec /= n;
      const double objective = ce + config.weights.lambda2 * unc + config.weights.lambda3 * rec;
      Validation v;
      v.record = {{"accuracy", correct}, {"classification", ce}, {"entropy", ent},
                  {"reconstruction", rec}, {"objective", objective}};
      v.key = {-objective, correct};
      return v;
    };
    LoopResult r = run_loop(loop, hooks_for_lr(hooks, li, config.learning_rates.size()));
    bank.verify();

    InvariantResult res{std::move(model), {}, std::move(r.curve)};
    res.metrics.learning_rate = loop.lr;
    res.metrics.epochs_run = r.epochs_run;
    res.metrics.best_epoch = r.best_epoch;
    res.metrics.val_accuracy = r.best_record.at("accuracy").get<double>();
    res.metrics.val_entropy = r.best_record.at("entropy").get<double>();
    res.metrics.val_reconstruction = r.best_record.at("reconstruction").get<double>();
    res.metrics.val_objective = r.best_record.at("objective").get<double>();
    spdlog::info("invariant lr={} l2={} l3={} epochs={} best={} val_acc={:.3f} bank_entropy={:.3f} recon={:.4f}",
                 loop.lr, config.weights.lambda2, config.weights.lambda3, r.epochs_run, r.best_epoch,
                 res.metrics.val_accuracy, res.metrics.val_entropy, res.metrics.val_reconstruction);
    if (!have_best || res.metrics.val_objective < best.metrics.val_objective) {
      best = std::move(res);
      have_best = true;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// ERM baseline

BaselineResult train_erm_baseline(const MultiDomainDataset& data, std::span<const int> sources,
                                  const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  if (sources.empty()) throw ConfigError("baseline needs at least one source domain");
  std::vector<DomainTensor> train, val;
  for (int s : sources) {
    train.push_back(pack_domain(data, s, Split::train));
    val.push_back(pack_domain(data, s, Split::val));
  }
  for (const auto& v : val) audit_all(hooks, v);

  BaselineResult best;
  bool have_best = false;
  std::vector<double> best_key;
  for (std::size_t li = 0; li < config.learning_rates.size(); ++li) {
    nn::Classifier<Real> model = fresh_classifier(config, data.num_classes());
    std::vector<DomainSampler> samplers;
    for (std::size_t k = 0; k < sources.size(); ++k) samplers.emplace_back(train[k].size(), sampler_rng(config, sources[k]));
    const int batch = config.batch_per_domain;

    Loop loop;
    loop.tag = "baseline-" + config_tag(config) + "-lr" + std::to_string(li);
    loop.epochs = config.epochs_baseline;
    loop.patience = config.patience;
    loop.steps = steps_per_epoch(train, batch);
    loop.lr = config.learning_rates[li];
    loop.momentum = config.momentum;
    loop.params = {&model.params()};
    loop.samplers = &samplers;
    loop.step = [&](long long) {
      std::vector<MatrixR> batches;
      std::vector<int> labels;
      for (std::size_t k = 0; k < sources.size(); ++k) {
        const std::vector<int> rows = samplers[k].next(batch);
        audit(hooks, train[k], rows);
        batches.push_back(train[k].gather(rows));
        const auto l = labels_of(train[k], rows);
        labels.insert(labels.end(), l.begin(), l.end());
      }
      StepGradient g = erm_step_gradient(model, concat_batches(batches), labels);
      std::vector<nn::ParameterSet<Real>> grads;
      grads.push_back(std::move(g.grads));
      return std::make_pair(nlohmann::json{{"total", g.loss}}, std::move(grads));
    };
    loop.validate = [&]() {
      int n = 0;
      double correct = 0, ce = 0;
      for (const auto& v : val) {
        const Scored s = score_logits(batched_logits(model, v.images, v.pixels), v.labels);
        correct += s.accuracy * v.size();
        ce += s.loss * v.size();
        n += v.size();
      }
      Validation v;
      v.record = {{"accuracy", correct / n}, {"loss", ce / n}};
      v.key = {correct / n, -ce / n};
      return v;
    };
    LoopResult r = run_loop(loop, hooks_for_lr(hooks, li, config.learning_rates.size()));

    BaselineResult res{std::move(model), {}, std::move(r.curve)};
    res.metrics.learning_rate = loop.lr;
    res.metrics.epochs_run = r.epochs_run;
    res.metrics.best_epoch = r.best_epoch;
    res.metrics.val_accuracy = r.best_record.at("accuracy").get<double>();
    int n = 0;
    double correct = 0;
    for (const auto& t : train) {
      correct += score_logits(batched_logits(res.model, t.images, t.pixels), t.labels).accuracy * t.size();
      n += t.size();
    }
    res.metrics.train_accuracy = correct / n;
    spdlog::info("baseline lr={} epochs={} best={} val_acc={:.3f} train_acc={:.3f}", loop.lr, r.epochs_run,
                 r.best_epoch, res.metrics.val_accuracy, res.metrics.train_accuracy);
    if (!have_best || r.best_key > best_key) {
      best_key = r.best_key;
      best = std::move(res);
      have_best = true;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Lambda selection

LambdaSelection pick_lambdas(std::vector<GridScore> scores) {
  if (scores.empty()) throw ConfigError("lambda grid is empty");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    const GridScore& a = scores[i];
    const GridScore& b = scores[best];
    if (a.mean > b.mean || (a.mean == b.mean && (a.lambda2 < b.lambda2 ||
                                                  (a.lambda2 == b.lambda2 && a.lambda3 < b.lambda3)))) {
      best = i;
    }
  }
  LambdaSelection out;
  out.lambda2 = scores[best].lambda2;
  out.lambda3 = scores[best].lambda3;
  out.scores = std::move(scores);
  return out;
}

LambdaSelection select_lambdas(const MultiDomainDataset& data, std::span<const int> sources,
                               const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  if (config.lambda2_grid.empty() || config.lambda3_grid.empty()) throw ConfigError("lambda grid is empty");
  if (config.lambda2_grid.size() == 1 && config.lambda3_grid.size() == 1) {
    return LambdaSelection{config.lambda2_grid[0], config.lambda3_grid[0], {}};
  }
  if (sources.size() < 3) {
    throw ConfigError("lambda selection needs at least 3 source domains (each inner fold trains stage 1 on >= 2), got " +
                      std::to_string(sources.size()));
  }

  std::vector<GridScore> scores;
  for (double l2 : config.lambda2_grid) {
    for (double l3 : config.lambda3_grid) scores.push_back(GridScore{l2, l3, {}, 0.0});
  }
  for (int held_out : sources) {
    std::vector<int> inner;
    for (int s : sources) {
      if (s != held_out) inner.push_back(s);
    }
    TrainHooks inner_hooks = hooks;
    inner_hooks.state_path.clear();
    if (hooks.on_epoch) {
      inner_hooks.on_epoch = [&hooks, held_out](const nlohmann::json& r) {
        nlohmann::json tagged = r;
        tagged["inner_held_out"] = held_out;
        hooks.on_epoch(tagged);
      };
    }
    SpecificClassifierBank bank = train_specific_bank(data, inner, config, inner_hooks);
    bank.freeze();
    const DomainTensor held = pack_domain(data, held_out, std::nullopt);
    audit_all(hooks, held);
    for (GridScore& g : scores) {
      TrainConfig c = config;
      c.weights.lambda2 = g.lambda2;
      c.weights.lambda3 = g.lambda3;
      InvariantResult r = train_domain_invariant(data, bank, c, inner_hooks);
      const double acc = score_logits(batched_logits(r.model, held.images, held.pixels), held.labels).accuracy;
      g.fold_scores.push_back(acc);
      spdlog::info("lambda selection: held-out {} l2={} l3={} accuracy={:.3f}",
                   data.domains[static_cast<std::size_t>(held_out)].name, g.lambda2, g.lambda3, acc);
    }
  }
  for (GridScore& g : scores) {
    double sum = 0;
    for (double s : g.fold_scores) sum += s;
    g.mean = sum / static_cast<double>(g.fold_scores.size());
  }
  return pick_lambdas(std::move(scores));
}

}  // namespace lrdg
