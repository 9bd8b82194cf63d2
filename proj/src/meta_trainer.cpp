#include "anrl/meta_trainer.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace anrl {

namespace {

std::map<int, std::size_t> domain_counts(const std::vector<int>& ids) {
  std::map<int, std::size_t> counts;
  for (int d : ids) ++counts[d];
  return counts;
}

void require_domains_within(const DomainBatch& batch, const std::set<int>& allowed, const char* who) {
  for (int d : batch.domain_ids) {
    if (!allowed.count(d)) throw std::invalid_argument(std::string(who) + ": batch holds a sample from domain " + std::to_string(d) + " outside the split");
  }
  if (batch.size() == 0) throw std::invalid_argument(std::string(who) + ": empty batch");
}

void clip_gates(ParamStore& store) {
  for (const auto& e : store.entries()) {
    if (e.name.size() > 4 && e.name.compare(e.name.size() - 4, 4, ".rho") == 0) {
      Tensor t = e.value;
      clip_bin_gate(t);
    }
  }
}

std::vector<double> alpha_means(const ForwardTrace& trace) {
  std::vector<double> out;
  for (const auto& a : trace.alphas) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    out.push_back(s / static_cast<double>(a.numel()));
  }
  return out;
}

}  // namespace

const char* meta_mode_name(MetaMode m) { return m == MetaMode::FirstOrder ? "first_order" : "exact_small"; }

MetaMode parse_meta_mode(const std::string& s) {
  if (s == "first_order") return MetaMode::FirstOrder;
  if (s == "exact_small") return MetaMode::ExactSmall;
  throw std::invalid_argument("unknown meta mode '" + s + "' (expected first_order or exact_small)");
}

const char* optimizer_name(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adam"; }

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adam") return OptimizerKind::Adam;
  throw std::invalid_argument("unknown optimizer '" + s + "' (expected sgd or adam)");
}

void TrainConfig::validate() const {
  if (!(beta1 >= 0.0) || !(beta2 >= 0.0)) throw std::invalid_argument("TrainConfig: learning rates must be >= 0");
  if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) throw std::invalid_argument("TrainConfig: lambdas must be >= 0");
  if (gamma < 0.0 || gamma >= 1.0) throw std::invalid_argument("TrainConfig: gamma must lie in [0,1)");
  if (batch_per_domain < 2) throw std::invalid_argument("TrainConfig: batch_per_domain must be >= 2");
  if (epochs == 0 && iterations == 0) throw std::invalid_argument("TrainConfig: epochs or iterations must be positive");
  if (!(fd_step > 0.0)) throw std::invalid_argument("TrainConfig: fd_step must be positive");
}

DomainSplit split_domains(const std::set<int>& domains, std::uint64_t seed, std::uint64_t iteration) {
  if (domains.size() < 2) throw std::invalid_argument("split_domains: need at least 2 domains");
  Rng rng(derive_seed(seed, 0x53504C4954ULL, iteration));
  const auto pick = rng.below(domains.size());
  DomainSplit s;
  std::size_t i = 0;
  for (int d : domains) (i++ == pick ? s.val : s.trn).insert(d);
  return s;
}

Optimizer::Optimizer(OptimizerKind kind, std::size_t size, double lr, double b1, double b2, double eps)
    : kind_(kind), lr_(lr), b1_(b1), b2_(b2), eps_(eps) {
  if (kind_ == OptimizerKind::Adam) {
    m_.assign(size, 0.0);
    v_.assign(size, 0.0);
  }
}

void Optimizer::step(std::vector<double>& params, const std::vector<double>& grad) {
  if (params.size() != grad.size()) throw ShapeError("Optimizer::step: parameter/gradient length mismatch");
  ++t_;
  if (kind_ == OptimizerKind::Sgd) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr_ * grad[i];
    return;
  }
  if (m_.size() != params.size()) throw ShapeError("Optimizer::step: size changed since construction");
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = b1_ * m_[i] + (1.0 - b1_) * grad[i];
    v_[i] = b2_ * v_[i] + (1.0 - b2_) * grad[i] * grad[i];
    params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
  }
}

std::vector<double> meta_gradient_first_order(const std::vector<double>& g_trn, const std::vector<double>& g_val) {
  if (g_trn.size() != g_val.size()) throw ShapeError("meta_gradient: gradient length mismatch");
  std::vector<double> g(g_trn.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = g_trn[i] + g_val[i];
  return g;
}

std::vector<double> meta_gradient_exact(const std::vector<double>& theta, const std::vector<double>& g_trn,
                                        const std::vector<double>& g_val, double beta1, const FlatGradFn& grad_trn,
                                        double fd_step) {
  const std::size_t n = theta.size();
  if (n > kExactMetaMaxDim) {
    throw std::invalid_argument("meta_gradient_exact: theta_F has " + std::to_string(n) + " entries, limit is " +
                                std::to_string(kExactMetaMaxDim));
  }
  if (g_trn.size() != n || g_val.size() != n) throw ShapeError("meta_gradient_exact: gradient length mismatch");
  std::vector<double> out(n);
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<double> plus = theta, minus = theta;
    plus[j] += fd_step;
    minus[j] -= fd_step;
    const auto gp = grad_trn(plus), gm = grad_trn(minus);
    // Column j of H dotted with g_val gives (H^T g_val)_j.
    double hv = 0.0;
    for (std::size_t i = 0; i < n; ++i) hv += (gp[i] - gm[i]) / (2.0 * fd_step) * g_val[i];
    out[j] = g_trn[j] + g_val[j] - beta1 * hv;
  }
  return out;
}

ParamStore with_partition_values(const ParamStore& store, Partition tag, const std::vector<double>& values) {
  if (values.size() != store.numel(tag)) throw ShapeError("with_partition_values: length mismatch");
  ParamStore view = store;
  std::size_t at = 0;
  for (const auto& e : store.entries()) {
    if (e.tag != tag) continue;
    const std::size_t n = e.value.numel();
    std::vector<double> slice(values.begin() + static_cast<std::ptrdiff_t>(at),
                              values.begin() + static_cast<std::ptrdiff_t>(at + n));
    view.rebind(e.name, Tensor::parameter(e.value.shape(), std::move(slice)));
    at += n;
  }
  return view;
}

TrainingSet TrainingSet::from_protocol(const Protocol& protocol, std::vector<DomainSpec> specs, ImageGeometry geom) {
  TrainingSet t;
  t.specs = std::move(specs);
  t.geom = geom;
  for (const auto& r : protocol.train) t.by_domain[r.domain].push_back(r);
  return t;
}

std::set<int> TrainingSet::domains() const {
  std::set<int> s;
  for (const auto& [d, _] : by_domain) s.insert(d);
  return s;
}

DomainSampler::DomainSampler(const TrainingSet& data, std::uint64_t seed) : data_(&data) {
  for (const auto& [d, refs] : data.by_domain) {
    if (refs.empty()) throw std::invalid_argument("DomainSampler: domain " + std::to_string(d) + " has no samples");
    auto it = rngs_.emplace(d, Rng(derive_seed(seed, 0x53414D50ULL, static_cast<std::uint64_t>(d)))).first;
    std::vector<std::size_t> order(refs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    it->second.shuffle(order);
    order_[d] = std::move(order);
    cursor_[d] = 0;
    epochs_[d] = 0;
  }
}

std::vector<SampleRef> DomainSampler::draw(const std::set<int>& domains, std::size_t per_domain) {
  std::vector<SampleRef> out;
  for (int d : domains) {
    auto it = order_.find(d);
    if (it == order_.end()) throw std::invalid_argument("DomainSampler: unknown domain " + std::to_string(d));
    auto& order = it->second;
    auto& cur = cursor_[d];
    for (std::size_t i = 0; i < per_domain; ++i) {
      if (cur == order.size()) {
        rngs_.at(d).shuffle(order);
        cur = 0;
        ++epochs_[d];
      }
      out.push_back(data_->by_domain.at(d)[order[cur++]]);
    }
  }
  return out;
}

const char* phase_name(Phase p) {
  switch (p) {
    case Phase::NormalTrain: return "normal_train";
    case Phase::SplitDomains: return "split_domains";
    case Phase::MetaTrain: return "meta_train";
    case Phase::MetaTest: return "meta_test";
    case Phase::MetaOptimize: return "meta_optimize";
    case Phase::CentroidUpdate: return "centroid_update";
  }
  return "unknown";
}

namespace {

nlohmann::ordered_json loss_json(const LossParts& l) {
  nlohmann::ordered_json j;
  j["total"] = l.total;
  j["cls"] = l.cls;
  j["depth"] = l.depth;
  j["idc"] = l.idc_active ? nlohmann::ordered_json(l.idc) : nlohmann::ordered_json(nullptr);
  j["ics"] = l.ics_active ? nlohmann::ordered_json(l.ics) : nlohmann::ordered_json(nullptr);
  return j;
}

}  // namespace

std::string to_json_line(const IterationRecord& r) {
  nlohmann::ordered_json j;
  j["iter"] = r.iteration;
  j["l_base"] = loss_json(r.base);
  if (!r.split.val.empty()) {
    j["meta_trn_domains"] = std::vector<int>(r.split.trn.begin(), r.split.trn.end());
    j["meta_val_domains"] = std::vector<int>(r.split.val.begin(), r.split.val.end());
    j["l_trn"] = loss_json(r.trn);
    j["l_val"] = loss_json(r.val);
    j["meta_grad_norm"] = r.meta_grad_norm;
  }
  j["alpha_mean"] = r.alpha_mean;
  return j.dump();
}

MetaTrainer::MetaTrainer(Model& model, TrainConfig cfg, const TrainingSet& data)
    : model_(&model),
      cfg_(cfg),
      data_(&data),
      domains_(data.domains()),
      bank_(cfg.gamma, model.config.embedding_dim()),
      base_opt_(cfg.base_optimizer, model.params.numel(Partition::Base), cfg.beta1, cfg.adam_beta1, cfg.adam_beta2,
                cfg.adam_eps),
      meta_opt_(cfg.use_meta ? cfg.meta_optimizer : cfg.base_optimizer, model.params.numel(Partition::F),
                cfg.use_meta ? cfg.beta2 : cfg.beta1, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
      normal_sampler_(data, derive_seed(cfg.seed, 0x4E4F524DULL)),
      meta_sampler_(data, derive_seed(cfg.seed, 0x4D455441ULL)) {
  cfg_.validate();
  if (cfg_.use_meta && domains_.size() < 2) throw std::invalid_argument("MetaTrainer: need at least 2 source domains");
  if (domains_.empty()) throw std::invalid_argument("MetaTrainer: no source domains");
}

std::size_t MetaTrainer::total_iterations() const {
  if (cfg_.iterations) return cfg_.iterations;
  std::size_t smallest = SIZE_MAX;
  for (const auto& [_, refs] : data_->by_domain) smallest = std::min(smallest, refs.size());
  return cfg_.epochs * ((smallest + cfg_.batch_per_domain - 1) / cfg_.batch_per_domain);
}

DomainBatch MetaTrainer::load(const std::vector<SampleRef>& refs) const {
  return materialize(refs, data_->specs, data_->geom);
}

void MetaTrainer::notify(Phase p) {
  if (observer_) observer_(iter_, p, *model_);
}

LossParts MetaTrainer::compose_loss(const ForwardTrace& trace, const DomainBatch& batch, bool with_dcc,
                                    Tensor* total) const {
  const auto counts = domain_counts(batch.domain_ids);
  const std::size_t per = counts.begin()->second;
  for (const auto& [d, c] : counts) {
    if (c != per) throw std::invalid_argument("compose_loss: domains must contribute equally many samples");
  }
  // Sum over domains of per-domain means equals K times the pooled mean.
  const double k = static_cast<double>(counts.size());
  LossParts parts;
  Tensor cls = scale(cls_loss(trace.logit, batch.labels), k);
  Tensor dep = scale(depth_loss(trace.depth_pred, batch.depth), k);
  Tensor t = add(cls, dep);
  parts.cls = cls.item();
  parts.depth = dep.item();
  if (with_dcc) {
    EmbeddingBatch emb{trace.embedding, batch.domain_ids, batch.labels};
    bool idc_ready = cfg_.use_idc && cfg_.lambda1 > 0.0 && bank_.domain_count() >= 2;
    for (const auto& [d, _] : counts) idc_ready = idc_ready && bank_.has_domain(d);
    if (idc_ready) {
      Tensor idc = idc_loss(emb, bank_);
      parts.idc = idc.item();
      parts.idc_active = true;
      t = add(t, scale(idc, cfg_.lambda1));
    }
    bool both = std::count(batch.labels.begin(), batch.labels.end(), kReal) > 0 &&
                std::count(batch.labels.begin(), batch.labels.end(), kFake) > 0;
    if (cfg_.use_ics && cfg_.lambda2 > 0.0 && both && bank_.has_real() && bank_.has_fake()) {
      Tensor ics = ics_loss(emb, bank_);
      parts.ics = ics.item();
      parts.ics_active = true;
      t = add(t, scale(ics, cfg_.lambda2));
    }
  }
  parts.total = t.item();
  if (total) *total = t;
  return parts;
}

NormalTrainResult MetaTrainer::normal_train_step(const DomainBatch& batch) {
  for (int d : domains_) {
    if (std::find(batch.domain_ids.begin(), batch.domain_ids.end(), d) == batch.domain_ids.end()) {
      throw std::invalid_argument("normal_train_step: batch is missing source domain " + std::to_string(d));
    }
  }
  auto& params = model_->params;
  params.set_requires_grad(Partition::Base, true);
  params.set_requires_grad(Partition::F, !cfg_.use_meta);
  params.zero_grad();
  ForwardTrace trace = forward(*model_, batch.images, Mode::Train, true);
  Tensor total;
  NormalTrainResult r;
  r.loss = compose_loss(trace, batch, !cfg_.use_meta, &total);
  backward(total);
  auto theta = params.flatten(Partition::Base);
  base_opt_.step(theta, params.flatten_grad(Partition::Base));
  params.assign_flat(Partition::Base, theta);
  if (!cfg_.use_meta) {
    auto theta_f = params.flatten(Partition::F);
    meta_opt_.step(theta_f, params.flatten_grad(Partition::F));
    params.assign_flat(Partition::F, theta_f);
    clip_gates(params);
  }
  params.zero_grad();
  r.embeddings = {trace.embedding.detach(), batch.domain_ids, batch.labels};
  r.alpha_mean = alpha_means(trace);
  return r;
}

MetaTrainResult MetaTrainer::meta_train_step(const DomainBatch& batch, const DomainSplit& split) {
  require_domains_within(batch, split.trn, "meta_train_step");
  auto& params = model_->params;
  params.set_requires_grad(Partition::Base, false);
  params.set_requires_grad(Partition::F, true);
  params.zero_grad();
  ForwardTrace trace = forward(*model_, params, model_->bn, batch.images, Mode::Train, false);
  Tensor total;
  MetaTrainResult r;
  r.loss = compose_loss(trace, batch, true, &total);
  backward(total);
  r.grad = params.flatten_grad(Partition::F);
  params.zero_grad();
  r.shadow = params.flatten(Partition::F);
  for (std::size_t i = 0; i < r.shadow.size(); ++i) r.shadow[i] -= cfg_.beta1 * r.grad[i];
  return r;
}

MetaTestResult MetaTrainer::meta_test_loss(const std::vector<double>& shadow, const DomainBatch& batch,
                                           const DomainSplit& split) {
  require_domains_within(batch, split.val, "meta_test_loss");
  model_->params.set_requires_grad(Partition::Base, false);
  ParamStore view = with_partition_values(model_->params, Partition::F, shadow);
  ForwardTrace trace = forward(*model_, view, model_->bn, batch.images, Mode::Train, false);
  Tensor total;
  MetaTestResult r;
  r.loss = compose_loss(trace, batch, true, &total);
  backward(total);
  r.grad = view.flatten_grad(Partition::F);
  return r;
}

std::vector<double> MetaTrainer::grad_trn_at(const std::vector<double>& theta_f, const DomainBatch& batch) {
  model_->params.set_requires_grad(Partition::Base, false);
  ParamStore view = with_partition_values(model_->params, Partition::F, theta_f);
  ForwardTrace trace = forward(*model_, view, model_->bn, batch.images, Mode::Train, false);
  Tensor total;
  compose_loss(trace, batch, true, &total);
  backward(total);
  return view.flatten_grad(Partition::F);
}

std::vector<double> MetaTrainer::meta_optimize(const std::vector<double>& g_trn, const std::vector<double>& g_val,
                                               const DomainBatch& trn_batch) {
  auto& params = model_->params;
  auto theta = params.flatten(Partition::F);
  std::vector<double> g;
  if (cfg_.meta_mode == MetaMode::FirstOrder) {
    g = meta_gradient_first_order(g_trn, g_val);
  } else {
    g = meta_gradient_exact(
        theta, g_trn, g_val, cfg_.beta1, [&](const std::vector<double>& t) { return grad_trn_at(t, trn_batch); },
        cfg_.fd_step);
  }
  meta_opt_.step(theta, g);
  params.assign_flat(Partition::F, theta);
  clip_gates(params);
  return g;
}

void MetaTrainer::update_centroids(const EmbeddingBatch& embeddings) {
  bank_.update(embeddings, std::vector<int>(domains_.begin(), domains_.end()));
}

IterationRecord MetaTrainer::run_iteration() {
  IterationRecord rec;
  rec.iteration = iter_;
  DomainBatch normal = load(normal_sampler_.draw(domains_, cfg_.batch_per_domain));
  NormalTrainResult nr = normal_train_step(normal);
  rec.base = nr.loss;
  rec.alpha_mean = nr.alpha_mean;
  notify(Phase::NormalTrain);
  if (cfg_.use_meta) {
    rec.split = split_domains(domains_, cfg_.seed, iter_);
    notify(Phase::SplitDomains);
    DomainBatch trn = load(meta_sampler_.draw(rec.split.trn, cfg_.batch_per_domain));
    DomainBatch val = load(meta_sampler_.draw(rec.split.val, cfg_.batch_per_domain));
    MetaTrainResult mt = meta_train_step(trn, rec.split);
    rec.trn = mt.loss;
    notify(Phase::MetaTrain);
    MetaTestResult mv = meta_test_loss(mt.shadow, val, rec.split);
    rec.val = mv.loss;
    notify(Phase::MetaTest);
    auto g = meta_optimize(mt.grad, mv.grad, trn);
    double sq = 0.0;
    for (double v : g) sq += v * v;
    rec.meta_grad_norm = std::sqrt(sq);
    notify(Phase::MetaOptimize);
  }
  update_centroids(nr.embeddings);
  notify(Phase::CentroidUpdate);
  ++iter_;
  return rec;
}

void MetaTrainer::run(std::ostream* metrics, const Observer& observer) {
  if (observer) observer_ = observer;
  const std::size_t n = total_iterations();
  while (iter_ < n) {
    IterationRecord rec = run_iteration();
    if (metrics) *metrics << to_json_line(rec) << '\n';
  }
}

}  // namespace anrl
