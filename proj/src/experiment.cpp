#include "anrl/experiment.hpp"

#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "anrl/checkpoint.hpp"
#include "anrl/metrics.hpp"

namespace anrl {

namespace fs = std::filesystem;

namespace {

const char* threshold_name(ThresholdSource s) { return s == ThresholdSource::TestEer ? "test_eer" : "fixed"; }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream o(path, std::ios::binary | std::ios::trunc);
  if (!o) throw std::runtime_error("cannot write " + path.string());
  o << text;
}

std::string real(double v) {
  std::ostringstream o;
  o << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return o.str();
}

template <typename F>
void for_each_chunk(std::size_t n, std::size_t chunk, F&& f) {
  for (std::size_t at = 0; at < n; at += chunk) f(at, std::min(n, at + chunk));
}

}  // namespace

MetricsReport score_metrics(const std::vector<double>& scores, const std::vector<int>& labels, const EvalConfig& eval) {
  MetricsReport m;
  m.auc = roc_auc(scores, labels);
  if (eval.threshold == ThresholdSource::TestEer) {
    const auto e = eer_threshold(scores, labels);
    m.eer_threshold = e.threshold;
  } else {
    m.eer_threshold = eval.fixed_threshold;
  }
  const auto r = error_rates(scores, labels, m.eer_threshold);
  m.far = r.far;
  m.frr = r.frr;
  m.hter = hter(scores, labels, m.eer_threshold);
  m.threshold_source = threshold_name(eval.threshold);
  return m;
}

Evaluation evaluate_model(Model& model, const std::vector<SampleRef>& refs, const std::vector<DomainSpec>& specs,
                          const ImageGeometry& geom, const EvalConfig& eval) {
  NoGradGuard no_grad;
  Evaluation ev;
  for_each_chunk(refs.size(), eval.eval_batch, [&](std::size_t lo, std::size_t hi) {
    std::vector<SampleRef> part(refs.begin() + static_cast<std::ptrdiff_t>(lo), refs.begin() + static_cast<std::ptrdiff_t>(hi));
    DomainBatch b = materialize(part, specs, geom);
    auto s = liveness_scores(forward(model, b.images, Mode::Eval, false));
    ev.scores.insert(ev.scores.end(), s.begin(), s.end());
    ev.labels.insert(ev.labels.end(), b.labels.begin(), b.labels.end());
    ev.sample_ids.insert(ev.sample_ids.end(), b.sample_ids.begin(), b.sample_ids.end());
  });
  ev.metrics = score_metrics(ev.scores, ev.labels, eval);
  return ev;
}

std::string report_json(const Evaluation& ev, const ExperimentConfig& cfg) {
  nlohmann::ordered_json j;
  const auto& m = ev.metrics;
  j["schema_version"] = kReportSchemaVersion;
  j["config_hash"] = m.config_hash;
  j["seed"] = m.seed;
  j["iteration"] = m.iteration;
  std::vector<std::string> variants;
  for (auto v : cfg.network.norm_variant) variants.emplace_back(variant_name(v));
  j["norm_variant"] = variants;
  j["ablation"] = {{"meta", cfg.train.use_meta}, {"idc", cfg.train.use_idc}, {"ics", cfg.train.use_ics}};
  j["held_out_domain"] = cfg.data.held_out;
  j["threshold_source"] = m.threshold_source;
  j["metrics"] = {{"hter", m.hter}, {"auc", m.auc}, {"eer_threshold", m.eer_threshold}, {"far", m.far}, {"frr", m.frr}};
  j["per_layer_alpha_mean"] = m.per_layer_alpha_mean;
  j["scores"] = ev.scores;
  j["labels"] = ev.labels;
  j["sample_ids"] = ev.sample_ids;
  return j.dump(1) + "\n";
}

Evaluation parse_report(const std::string& text, const EvalConfig& eval_in) {
  const auto j = nlohmann::json::parse(text);
  const int version = j.at("schema_version").get<int>();
  if (version != kReportSchemaVersion) throw std::runtime_error("report: unsupported schema version " + std::to_string(version));
  Evaluation ev;
  ev.scores = j.at("scores").get<std::vector<double>>();
  ev.labels = j.at("labels").get<std::vector<int>>();
  ev.sample_ids = j.at("sample_ids").get<std::vector<std::uint64_t>>();
  auto& m = ev.metrics;
  m.config_hash = j.at("config_hash").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.iteration = j.at("iteration").get<std::size_t>();
  m.threshold_source = j.at("threshold_source").get<std::string>();
  const auto& mj = j.at("metrics");
  m.hter = mj.at("hter").get<double>();
  m.auc = mj.at("auc").get<double>();
  m.eer_threshold = mj.at("eer_threshold").get<double>();
  m.far = mj.at("far").get<double>();
  m.frr = mj.at("frr").get<double>();
  m.per_layer_alpha_mean = j.at("per_layer_alpha_mean").get<std::vector<double>>();

  EvalConfig eval = eval_in;
  if (m.threshold_source == "test_eer") {
    eval.threshold = ThresholdSource::TestEer;
  } else {
    eval.threshold = ThresholdSource::Fixed;
    eval.fixed_threshold = m.eer_threshold;
  }
  const auto again = score_metrics(ev.scores, ev.labels, eval);
  if (again.hter != m.hter || again.auc != m.auc || again.eer_threshold != m.eer_threshold || again.far != m.far ||
      again.frr != m.frr) {
    throw std::runtime_error("report: stored metrics do not match the stored scores");
  }
  return ev;
}

std::vector<double> AlphaStats::layer_means() const {
  std::vector<double> out;
  for (const auto& l : layers) {
    out.push_back(std::accumulate(l.mean.begin(), l.mean.end(), 0.0) / static_cast<double>(l.mean.size()));
  }
  return out;
}

AlphaStats compute_alpha_stats(Model& model, const DomainBatch& probe, std::size_t sample_channels) {
  if (!model.config.uses_afnm()) throw std::invalid_argument("alpha statistics need a model with AFNM layers");
  NoGradGuard no_grad;
  ForwardTrace t = forward(model, probe.images, Mode::Eval, false);
  AlphaStats stats;
  for (std::size_t layer = 0; layer < t.alphas.size(); ++layer) {
    const auto& a = t.alphas[layer];
    const std::size_t n = a.dim(0), c = a.dim(1);
    auto d = a.data();
    AlphaLayerStats ls;
    ls.mean.assign(c, 0.0);
    ls.variance.assign(c, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += d[i * c + ch];
      const double mu = s / static_cast<double>(n);
      double v = 0.0;
      for (std::size_t i = 0; i < n; ++i) v += (d[i * c + ch] - mu) * (d[i * c + ch] - mu);
      ls.mean[ch] = mu;
      ls.variance[ch] = v / static_cast<double>(n);
    }
    std::vector<std::size_t> order(c);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return ls.variance[x] > ls.variance[y]; });
    order.resize(std::min(sample_channels, c));
    std::sort(order.begin(), order.end());
    for (std::size_t ch : order) {
      for (std::size_t i = 0; i < n; ++i) stats.samples.push_back({layer, ch, i, d[i * c + ch]});
    }
    stats.layers.push_back(std::move(ls));
  }
  return stats;
}

void write_alpha_csv(std::ostream& out, const AlphaStats& stats) {
  out << "row,layer,channel,sample,mean,variance,alpha\n";
  for (std::size_t l = 0; l < stats.layers.size(); ++l) {
    const auto& ls = stats.layers[l];
    for (std::size_t c = 0; c < ls.mean.size(); ++c) {
      out << "channel," << l << ',' << c << ",," << real(ls.mean[c]) << ',' << real(ls.variance[c]) << ",\n";
    }
  }
  for (const auto& r : stats.samples) {
    out << "sample," << r.layer << ',' << r.channel << ',' << r.sample << ",,," << real(r.value) << '\n';
  }
}

void write_embeddings_csv(std::ostream& out, Model& model, const DomainBatch& batch, const std::vector<std::string>& roles) {
  if (roles.size() != batch.size()) throw std::invalid_argument("write_embeddings_csv: one role per sample required");
  NoGradGuard no_grad;
  ForwardTrace t = forward(model, batch.images, Mode::Eval, false);
  const std::size_t d = t.embedding.dim(1);
  out << "sample_id,domain,label,role";
  for (std::size_t j = 0; j < d; ++j) out << ",e" << j;
  out << '\n';
  auto e = t.embedding.data();
  for (std::size_t i = 0; i < batch.size(); ++i) {
    out << batch.sample_ids[i] << ',' << batch.domain_ids[i] << ',' << batch.labels[i] << ',' << roles[i];
    for (std::size_t j = 0; j < d; ++j) out << ',' << real(e[i * d + j]);
    out << '\n';
  }
}

DomainBatch alpha_probe(const ExperimentConfig& cfg, const Protocol& protocol) {
  const std::size_t n = std::min(cfg.eval.alpha_probe, protocol.test.size());
  std::vector<SampleRef> refs(protocol.test.begin(), protocol.test.begin() + static_cast<std::ptrdiff_t>(n));
  return materialize(refs, cfg.data.domains, cfg.geometry());
}

namespace {

void write_embeddings(const ExperimentConfig& cfg, const Protocol& protocol, Model& model, const fs::path& path) {
  std::vector<SampleRef> refs;
  std::vector<std::string> roles;
  const std::size_t per = cfg.eval.embedding_source_samples / protocol.source_domains.size();
  for (int d : protocol.source_domains) {
    std::size_t taken = 0;
    for (const auto& r : protocol.train) {
      if (r.domain != d || taken == per) continue;
      refs.push_back(r);
      roles.emplace_back("source");
      ++taken;
    }
  }
  for (const auto& r : protocol.test) {
    refs.push_back(r);
    roles.emplace_back("target");
  }
  std::ofstream o(path, std::ios::binary | std::ios::trunc);
  bool header = true;
  // Chunked so large exports stay within memory; header written once.
  for_each_chunk(refs.size(), cfg.eval.eval_batch, [&](std::size_t lo, std::size_t hi) {
    std::vector<SampleRef> part(refs.begin() + static_cast<std::ptrdiff_t>(lo), refs.begin() + static_cast<std::ptrdiff_t>(hi));
    std::vector<std::string> rp(roles.begin() + static_cast<std::ptrdiff_t>(lo), roles.begin() + static_cast<std::ptrdiff_t>(hi));
    std::ostringstream chunk;
    write_embeddings_csv(chunk, model, materialize(part, cfg.data.domains, cfg.geometry()), rp);
    std::string s = chunk.str();
    if (!header) s.erase(0, s.find('\n') + 1);
    header = false;
    o << s;
  });
  if (!o) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::string& out_dir,
                                const MetaTrainer::Observer& observer) {
  cfg.validate();
  const fs::path dir(out_dir);
  fs::create_directories(dir);
  fs::remove(dir / "FAILED");
  ExperimentResult result;
  result.out_dir = out_dir;
  try {
    write_text(dir / "config.ini", to_text(cfg));
    const Protocol protocol = build_protocol(cfg.data.n_domains, cfg.data.held_out, cfg.data.sizes, cfg.data.data_seed);
    const TrainingSet data = TrainingSet::from_protocol(protocol, cfg.data.domains, cfg.geometry());
    Model model = build_model(cfg.network, cfg.train.seed);
    MetaTrainer trainer(model, cfg.train, data);
    {
      std::ofstream metrics(dir / "metrics.jsonl", std::ios::binary | std::ios::trunc);
      trainer.run(&metrics, observer);
      if (!metrics) throw std::runtime_error("cannot write metrics.jsonl");
    }
    result.iterations = trainer.iteration();
    write_checkpoint((dir / "checkpoint.bin").string(), make_checkpoint(cfg, model));

    Evaluation ev = evaluate_model(model, protocol.test, cfg.data.domains, cfg.geometry(), cfg.eval);
    ev.metrics.config_hash = hex64(config_hash(cfg));
    ev.metrics.seed = cfg.train.seed;
    ev.metrics.iteration = trainer.iteration();
    if (cfg.network.uses_afnm()) {
      AlphaStats stats = compute_alpha_stats(model, alpha_probe(cfg, protocol), cfg.eval.alpha_sample_channels);
      ev.metrics.per_layer_alpha_mean = stats.layer_means();
      std::ofstream a(dir / "alpha.csv", std::ios::binary | std::ios::trunc);
      write_alpha_csv(a, stats);
    }
    if (cfg.eval.export_embeddings) write_embeddings(cfg, protocol, model, dir / "embeddings.csv");
    write_text(dir / "report.json", report_json(ev, cfg));
    result.evaluation = std::move(ev);
  } catch (const std::exception& e) {
    write_text(dir / "FAILED", std::string(e.what()) + "\n");
    throw;
  }
  return result;
}

std::vector<AblationEntry> ablation_matrix(const ExperimentConfig& base, AblationKind kind) {
  std::vector<AblationEntry> out;
  if (kind == AblationKind::Variants) {
    for (auto v : all_variants()) {
      ExperimentConfig c = base;
      c.network.norm_variant = {v};
      out.push_back({variant_name(v), c});
    }
    return out;
  }
  struct Row {
    const char* name;
    bool meta, idc, ics;
  };
  const Row rows[] = {{"no_meta", false, false, false},
                      {"meta", true, false, false},
                      {"meta_idc", true, true, false},
                      {"meta_ics", true, false, true},
                      {"full", true, true, true}};
  for (const auto& r : rows) {
    ExperimentConfig c = base;
    c.network.norm_variant = {NormVariant::AFNM};
    c.train.use_meta = r.meta;
    c.train.use_idc = r.idc;
    c.train.use_ics = r.ics;
    out.push_back({r.name, c});
  }
  return out;
}

std::vector<ExperimentResult> run_ablation(const ExperimentConfig& base, AblationKind kind,
                                           const std::vector<std::uint64_t>& seeds, const std::string& out_dir,
                                           std::ostream* log) {
  fs::create_directories(out_dir);
  std::ofstream summary(fs::path(out_dir) / "summary.csv", std::ios::binary | std::ios::trunc);
  summary << "name,seed,hter,auc,eer_threshold,far,frr\n";
  std::vector<ExperimentResult> results;
  for (const auto& entry : ablation_matrix(base, kind)) {
    for (auto seed : seeds) {
      ExperimentConfig c = entry.config;
      c.train.seed = seed;
      const auto dir = fs::path(out_dir) / entry.name / ("seed" + std::to_string(seed));
      const auto t0 = std::chrono::steady_clock::now();
      auto r = run_experiment(c, dir.string());
      const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
      const auto& m = r.evaluation.metrics;
      summary << entry.name << ',' << seed << ',' << real(m.hter) << ',' << real(m.auc) << ',' << real(m.eer_threshold)
              << ',' << real(m.far) << ',' << real(m.frr) << '\n';
      summary.flush();
      if (log) {
        *log << entry.name << " seed " << seed << ": HTER " << m.hter << " AUC " << m.auc << " (" << dt.count()
             << " s)\n";
      }
      results.push_back(std::move(r));
    }
  }
  return results;
}

}  // namespace anrl
