#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "anrl/dcc_losses.hpp"
#include "anrl/model.hpp"
#include "anrl/synth_domains.hpp"

namespace anrl {

enum class MetaMode { FirstOrder, ExactSmall };
enum class OptimizerKind { Sgd, Adam };

const char* meta_mode_name(MetaMode m);
MetaMode parse_meta_mode(const std::string& s);
const char* optimizer_name(OptimizerKind k);
OptimizerKind parse_optimizer(const std::string& s);

struct TrainConfig {
  double beta1 = 0.001;    // base lr and inner meta step
  double beta2 = 0.001;    // outer meta lr
  double lambda1 = 0.1;    // IDC weight
  double lambda2 = 0.01;   // ICS weight
  double gamma = 0.9;      // centroid momentum
  std::size_t epochs = 1;
  /// Overrides epochs when nonzero.
  std::size_t iterations = 0;
  std::size_t batch_per_domain = 8;
  std::uint64_t seed = 0;
  MetaMode meta_mode = MetaMode::FirstOrder;
  OptimizerKind base_optimizer = OptimizerKind::Adam;
  OptimizerKind meta_optimizer = OptimizerKind::Sgd;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double fd_step = 1e-5;  // exact_small Jacobian
  bool use_meta = true;
  bool use_idc = true;
  bool use_ics = true;

  void validate() const;
};

struct DomainSplit {
  std::set<int> trn;
  std::set<int> val;
};

/// Uniform partition with |val| = 1, a pure function of (domains, seed, iteration).
DomainSplit split_domains(const std::set<int>& domains, std::uint64_t seed, std::uint64_t iteration);

/// Elementwise optimizers over a flat parameter vector.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, std::size_t size, double lr, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8);
  void step(std::vector<double>& params, const std::vector<double>& grad);
  OptimizerKind kind() const { return kind_; }
  double lr() const { return lr_; }
  std::size_t steps() const { return t_; }

 private:
  OptimizerKind kind_;
  double lr_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<double> m_, v_;
};

/// Loss terms of one phase. `total` is what the gradient is taken of.
struct LossParts {
  double cls = 0.0;
  double depth = 0.0;
  double idc = 0.0;
  double ics = 0.0;
  double total = 0.0;
  bool idc_active = false;
  bool ics_active = false;
};

/// Gradient of L_trn as a function of the flat F vector, used by exact mode.
using FlatGradFn = std::function<std::vector<double>(const std::vector<double>&)>;

/// g_trn + g_val, with g_val taken at the shadow point.
std::vector<double> meta_gradient_first_order(const std::vector<double>& g_trn, const std::vector<double>& g_val);

/// g_trn + (I - beta1 H)^T g_val where H is the Jacobian of grad_trn at theta,
/// assembled column by column with central differences. theta must have at
/// most 50 entries.
std::vector<double> meta_gradient_exact(const std::vector<double>& theta, const std::vector<double>& g_trn,
                                        const std::vector<double>& g_val, double beta1, const FlatGradFn& grad_trn,
                                        double fd_step);

constexpr std::size_t kExactMetaMaxDim = 50;

/// Training data: lazily rendered sample references per source domain.
struct TrainingSet {
  std::vector<DomainSpec> specs;
  ImageGeometry geom;
  std::map<int, std::vector<SampleRef>> by_domain;

  static TrainingSet from_protocol(const Protocol& protocol, std::vector<DomainSpec> specs, ImageGeometry geom);
  std::set<int> domains() const;
};

/// Per-domain shuffled cursors, reshuffled at every epoch boundary.
class DomainSampler {
 public:
  DomainSampler(const TrainingSet& data, std::uint64_t seed);
  std::vector<SampleRef> draw(const std::set<int>& domains, std::size_t per_domain);
  std::size_t epoch(int domain) const { return epochs_.at(domain); }

 private:
  const TrainingSet* data_;
  std::map<int, Rng> rngs_;
  std::map<int, std::vector<std::size_t>> order_;
  std::map<int, std::size_t> cursor_;
  std::map<int, std::size_t> epochs_;
};

enum class Phase { NormalTrain, SplitDomains, MetaTrain, MetaTest, MetaOptimize, CentroidUpdate };
const char* phase_name(Phase p);

struct IterationRecord {
  std::size_t iteration = 0;
  LossParts base;
  LossParts trn;
  LossParts val;
  DomainSplit split;
  std::vector<double> alpha_mean;  // per AFNM layer, from the normal-train forward
  double meta_grad_norm = 0.0;
};

std::string to_json_line(const IterationRecord& r);

struct MetaTrainResult {
  LossParts loss;
  std::vector<double> grad;    // d L_trn / d theta_F at live theta_F
  std::vector<double> shadow;  // theta_F - beta1 * grad
};

struct MetaTestResult {
  LossParts loss;
  std::vector<double> grad;  // d L_val / d theta_F' at the shadow point
};

struct NormalTrainResult {
  LossParts loss;
  EmbeddingBatch embeddings;  // detached, for the centroid bank
  std::vector<double> alpha_mean;
};

/// Owns the optimizers, centroid bank and samplers for one run.
class MetaTrainer {
 public:
  using Observer = std::function<void(std::size_t iteration, Phase phase, const Model& model)>;

  MetaTrainer(Model& model, TrainConfig cfg, const TrainingSet& data);

  const TrainConfig& config() const { return cfg_; }
  const CentroidBank& bank() const { return bank_; }
  CentroidBank& bank() { return bank_; }
  Model& model() { return *model_; }

  /// Loss on a batch with the given parameter view. DCC terms are included
  /// when enabled and the bank holds the centroids they need.
  LossParts compose_loss(const ForwardTrace& trace, const DomainBatch& batch, bool with_dcc, Tensor* total) const;

  /// One step on theta_base (or on every parameter when meta is disabled).
  NormalTrainResult normal_train_step(const DomainBatch& batch);
  MetaTrainResult meta_train_step(const DomainBatch& batch, const DomainSplit& split);
  /// L_val with the shadow vector substituted for theta_F. Live tensors are
  /// left untouched.
  MetaTestResult meta_test_loss(const std::vector<double>& shadow, const DomainBatch& batch, const DomainSplit& split);
  /// Applies the meta gradient to theta_F and returns it.
  std::vector<double> meta_optimize(const std::vector<double>& g_trn, const std::vector<double>& g_val,
                                    const DomainBatch& trn_batch);
  void update_centroids(const EmbeddingBatch& embeddings);

  IterationRecord run_iteration();
  std::size_t iteration() const { return iter_; }
  std::size_t total_iterations() const;

  /// Runs total_iterations(), writing one JSON line per iteration to `metrics`
  /// when given.
  void run(std::ostream* metrics = nullptr, const Observer& observer = {});
  void set_observer(Observer obs) { observer_ = std::move(obs); }

 private:
  DomainBatch load(const std::vector<SampleRef>& refs) const;
  void notify(Phase p);
  std::vector<double> grad_trn_at(const std::vector<double>& theta_f, const DomainBatch& batch);

  Model* model_;
  TrainConfig cfg_;
  const TrainingSet* data_;
  std::set<int> domains_;
  CentroidBank bank_;
  Optimizer base_opt_;
  Optimizer meta_opt_;
  DomainSampler normal_sampler_;
  DomainSampler meta_sampler_;
  std::size_t iter_ = 0;
  Observer observer_;
};

/// Frozen copy of the selected partition as fresh leaves bound into a view
/// of `store`; other entries are shared.
ParamStore with_partition_values(const ParamStore& store, Partition tag, const std::vector<double>& values);

}  // namespace anrl
