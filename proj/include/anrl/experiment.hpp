#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "anrl/config.hpp"
#include "anrl/meta_trainer.hpp"
#include "anrl/model.hpp"

namespace anrl {

constexpr int kReportSchemaVersion = 1;

struct MetricsReport {
  double hter = 0.0;
  double auc = 0.0;
  double eer_threshold = 0.0;
  double far = 0.0;
  double frr = 0.0;
  std::vector<double> per_layer_alpha_mean;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::size_t iteration = 0;
  std::string threshold_source;
};

/// Liveness scores on one split and the metrics derived from them.
struct Evaluation {
  MetricsReport metrics;
  std::vector<double> scores;
  std::vector<int> labels;
  std::vector<std::uint64_t> sample_ids;
};

/// Thresholds per eval config and fills everything but run metadata and α.
MetricsReport score_metrics(const std::vector<double>& scores, const std::vector<int>& labels, const EvalConfig& eval);

/// Eval-mode liveness scores for every reference, in order.
Evaluation evaluate_model(Model& model, const std::vector<SampleRef>& refs, const std::vector<DomainSpec>& specs,
                          const ImageGeometry& geom, const EvalConfig& eval);

std::string report_json(const Evaluation& ev, const ExperimentConfig& cfg);
/// Parses a report; throws if its stored metrics differ from a recomputation
/// on its stored scores.
Evaluation parse_report(const std::string& text, const EvalConfig& eval);

struct AlphaLayerStats {
  std::vector<double> mean;      // per channel, over the probe batch
  std::vector<double> variance;  // population variance over the probe batch
};

struct AlphaSampleRow {
  std::size_t layer = 0;
  std::size_t channel = 0;
  std::size_t sample = 0;
  double value = 0.0;
};

struct AlphaStats {
  std::vector<AlphaLayerStats> layers;
  std::vector<AlphaSampleRow> samples;
  std::vector<double> layer_means() const;
};

/// Per-layer, per-channel balance factor statistics on a probe batch, plus
/// per-sample values for the `sample_channels` highest-variance channels of
/// every layer. Rejects models without AFNM layers.
AlphaStats compute_alpha_stats(Model& model, const DomainBatch& probe, std::size_t sample_channels);
void write_alpha_csv(std::ostream& out, const AlphaStats& stats);

/// Eval-mode embeddings, one CSV row per sample: id, domain, label, role, e0..
void write_embeddings_csv(std::ostream& out, Model& model, const DomainBatch& batch, const std::vector<std::string>& roles);

/// Probe batch for α statistics: the first `count` held-out test samples.
DomainBatch alpha_probe(const ExperimentConfig& cfg, const Protocol& protocol);

struct ExperimentResult {
  Evaluation evaluation;
  std::string out_dir;
  std::size_t iterations = 0;
};

/// Generate data, train, evaluate on the held-out domain and write
/// config.ini, metrics.jsonl, checkpoint.bin, report.json, alpha.csv (AFNM
/// models) and embeddings.csv (when enabled). On failure the partial
/// artifacts stay and a FAILED file records the error.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::string& out_dir,
                                const MetaTrainer::Observer& observer = {});

enum class AblationKind { Variants, Components };

struct AblationEntry {
  std::string name;
  ExperimentConfig config;
};

/// Variants: the six normalization layers under the configured schedule.
/// Components: no-meta, meta, meta+IDC, meta+ICS, full, all with AFNM.
std::vector<AblationEntry> ablation_matrix(const ExperimentConfig& base, AblationKind kind);

/// Runs every entry for every seed into out_dir/<name>/seed<k> and writes
/// out_dir/summary.csv.
std::vector<ExperimentResult> run_ablation(const ExperimentConfig& base, AblationKind kind,
                                           const std::vector<std::uint64_t>& seeds, const std::string& out_dir,
                                           std::ostream* log = nullptr);

}  // namespace anrl
