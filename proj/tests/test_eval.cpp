#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "anrl/checkpoint.hpp"
#include "anrl/config.hpp"
#include "anrl/experiment.hpp"
#include "anrl/metrics.hpp"

using namespace anrl;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.network.block_channel_widths = {4, 8};
  c.network.input_side = 16;
  c.network.depth_map_side = 4;
  c.train.iterations = 3;
  c.train.batch_per_domain = 2;
  c.data.sizes = {8, 6};
  c.eval.alpha_probe = 6;
  c.eval.alpha_sample_channels = 2;
  c.eval.eval_batch = 4;
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("anrl_test_eval_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("config text round-trips exactly") {
  ExperimentConfig c = tiny_config();
  c.train.beta1 = 0.1 + 0.2;
  c.train.meta_mode = MetaMode::ExactSmall;
  c.network.norm_variant = {NormVariant::BN, NormVariant::IBN};
  c.data.domains[1].spoof_cast = {0.01, -0.02, 0.03};
  const std::string text = to_text(c);
  const ExperimentConfig back = parse_config(text);
  CHECK(to_text(back) == text);
  CHECK(back.train.beta1 == c.train.beta1);
  CHECK(config_hash(back) == config_hash(c));
  c.train.seed = 1;
  CHECK(config_hash(back) != config_hash(c));
}

TEST_CASE("config parser overrides and rejections") {
  ExperimentConfig c = parse_config("[train]\nbeta1 = 0.01  # comment\n[ablation]\nics = false\n");
  CHECK(c.train.beta1 == 0.01);
  CHECK_FALSE(c.train.use_ics);
  CHECK(c.data.domains.size() == 4);
  CHECK_THROWS_AS(parse_config("[train]\nbogus = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[nowhere]\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[train]\nbeta1 = abc\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[train]\nbeta1 = 1\nbeta1 = 2\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("beta1 = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[data]\nheld_out = 7\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[network]\nembed_dim = 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[train]\nmeta_mode = second_order\n"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/config.ini"), ConfigError);
}

TEST_CASE("checkpoint restores the exact eval-mode scores") {
  const auto dir = scratch("ckpt");
  ExperimentConfig cfg = tiny_config();
  auto r = run_experiment(cfg, dir.string());
  ExperimentConfig loaded;
  Model m = restore_model(read_checkpoint((dir / "checkpoint.bin").string()), &loaded);
  CHECK(to_text(loaded) == to_text(cfg));
  const Protocol p = build_protocol(4, 3, cfg.data.sizes, cfg.data.data_seed);
  Evaluation ev = evaluate_model(m, p.test, cfg.data.domains, cfg.geometry(), cfg.eval);
  CHECK(ev.scores == r.evaluation.scores);
  CHECK(ev.metrics.hter == r.evaluation.metrics.hter);
}

TEST_CASE("corrupt or mismatched checkpoints are rejected") {
  ExperimentConfig cfg = tiny_config();
  Model m = build_model(cfg.network, 0);
  Checkpoint ck = make_checkpoint(cfg, m);
  CHECK_NOTHROW(restore_model(ck));

  Checkpoint bad_hash = ck;
  bad_hash.config_hash ^= 1;
  CHECK_THROWS(restore_model(bad_hash));

  Checkpoint missing = ck;
  missing.arrays.pop_back();
  CHECK_THROWS(restore_model(missing));

  Checkpoint extra = ck;
  extra.arrays.push_back({"stray", {1}, {0.0}});
  CHECK_THROWS(restore_model(extra));

  Checkpoint wrong_shape = ck;
  wrong_shape.arrays[0].shape = {wrong_shape.arrays[0].data.size()};
  CHECK_THROWS(restore_model(wrong_shape));

  const auto dir = scratch("ckpt_bytes");
  const auto path = (dir / "c.bin").string();
  write_checkpoint(path, ck);
  std::string bytes = slurp(path);
  std::ofstream(path, std::ios::binary | std::ios::trunc) << bytes.substr(0, bytes.size() / 2);
  CHECK_THROWS(read_checkpoint(path));
  std::ofstream(path, std::ios::binary | std::ios::trunc) << "XXXXXXXX" << bytes.substr(8);
  CHECK_THROWS(read_checkpoint(path));
}

TEST_CASE("report round trip and recomputation guard") {
  Evaluation ev;
  ev.scores = {0.1, 0.4, 0.35, 0.8, 0.7, 0.2};
  ev.labels = {0, 0, 1, 1, 1, 0};
  ev.sample_ids = {1, 2, 3, 4, 5, 6};
  EvalConfig eval;
  ev.metrics = score_metrics(ev.scores, ev.labels, eval);
  ev.metrics.config_hash = "00ff";
  ExperimentConfig cfg;
  const std::string text = report_json(ev, cfg);
  Evaluation back = parse_report(text, eval);
  CHECK(back.scores == ev.scores);
  CHECK(back.metrics.hter == ev.metrics.hter);
  CHECK(back.metrics.auc == doctest::Approx(roc_auc(ev.scores, ev.labels)));
  CHECK(report_json(back, cfg) == text);

  std::string tampered = text;
  const auto at = tampered.find("0.35");
  REQUIRE(at != std::string::npos);
  tampered.replace(at, 4, "0.05");
  CHECK_THROWS(parse_report(tampered, eval));

  eval.threshold = ThresholdSource::Fixed;
  eval.fixed_threshold = 0.5;
  ev.metrics = score_metrics(ev.scores, ev.labels, eval);
  CHECK(ev.metrics.eer_threshold == 0.5);
  CHECK(ev.metrics.hter == hter(ev.scores, ev.labels, 0.5));
  CHECK_NOTHROW(parse_report(report_json(ev, cfg), EvalConfig{}));
}

TEST_CASE("alpha statistics agree with the forward trace") {
  ExperimentConfig cfg = tiny_config();
  Model m = build_model(cfg.network, 4);
  const Protocol p = build_protocol(4, 3, cfg.data.sizes, cfg.data.data_seed);
  DomainBatch probe = alpha_probe(cfg, p);
  CHECK(probe.size() == 6);
  AlphaStats s = compute_alpha_stats(m, probe, 2);
  ForwardTrace t = forward(m, probe.images, Mode::Eval, false);
  REQUIRE(s.layers.size() == t.alphas.size());
  for (std::size_t l = 0; l < s.layers.size(); ++l) {
    const std::size_t n = t.alphas[l].dim(0), c = t.alphas[l].dim(1);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double mean = 0.0, sq = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean += t.alphas[l].data()[i * c + ch] / n;
      for (std::size_t i = 0; i < n; ++i) sq += std::pow(t.alphas[l].data()[i * c + ch] - mean, 2) / n;
      CHECK(s.layers[l].mean[ch] == doctest::Approx(mean).epsilon(1e-12));
      CHECK(s.layers[l].variance[ch] == doctest::Approx(sq).epsilon(1e-9).scale(1e-12));
    }
  }
  CHECK(s.samples.size() == 2 * 2 * 6);
  std::ostringstream csv;
  write_alpha_csv(csv, s);
  CHECK(csv.str().rfind("row,layer,channel,sample,mean,variance,alpha\n", 0) == 0);

  ExperimentConfig bn = cfg;
  bn.network.norm_variant = {NormVariant::BN};
  Model mb = build_model(bn.network, 4);
  CHECK_THROWS(compute_alpha_stats(mb, probe, 2));
}

TEST_CASE("ablation matrices") {
  ExperimentConfig base = tiny_config();
  auto variants = ablation_matrix(base, AblationKind::Variants);
  REQUIRE(variants.size() == 6);
  CHECK(variants[0].name == "BN");
  CHECK(variants[5].config.network.norm_variant == std::vector<NormVariant>{NormVariant::AFNM});
  auto comps = ablation_matrix(base, AblationKind::Components);
  REQUIRE(comps.size() == 5);
  CHECK(comps[0].name == "no_meta");
  CHECK_FALSE(comps[0].config.train.use_meta);
  CHECK(comps[2].config.train.use_idc);
  CHECK_FALSE(comps[2].config.train.use_ics);
  CHECK(comps[4].config.train.use_ics);
  for (const auto& e : comps) CHECK(e.config.train.seed == base.train.seed);
}

TEST_CASE("experiment writes every artifact and is reproducible") {
  ExperimentConfig cfg = tiny_config();
  cfg.eval.export_embeddings = true;
  cfg.eval.embedding_source_samples = 4;
  const auto a = scratch("run_a"), b = scratch("run_b");
  run_experiment(cfg, a.string());
  run_experiment(cfg, b.string());
  for (const char* f : {"config.ini", "metrics.jsonl", "checkpoint.bin", "report.json", "alpha.csv", "embeddings.csv"}) {
    INFO(f);
    REQUIRE(fs::exists(a / f));
    CHECK(slurp(a / f) == slurp(b / f));
  }
  CHECK_FALSE(fs::exists(a / "FAILED"));
  CHECK(parse_config(slurp(a / "config.ini")).train.iterations == 3);
  CHECK_NOTHROW(parse_report(slurp(a / "report.json"), cfg.eval));
}

TEST_CASE("failed experiments leave a marker") {
  ExperimentConfig cfg = tiny_config();
  cfg.train.meta_mode = MetaMode::ExactSmall;  // far above the exact-mode size limit
  const auto dir = scratch("fail");
  CHECK_THROWS(run_experiment(cfg, dir.string()));
  CHECK(fs::exists(dir / "FAILED"));
}

TEST_CASE("alpha export row count and initial values") {
  ExperimentConfig cfg = tiny_config();
  Model m = build_model(cfg.network, 2);
  const Protocol p = build_protocol(4, 3, cfg.data.sizes, cfg.data.data_seed);
  AlphaStats s = compute_alpha_stats(m, alpha_probe(cfg, p), 2);
  for (const auto& l : s.layers) {
    for (double v : l.mean) CHECK(v == 0.5);
    for (double v : l.variance) CHECK(v == 0.0);
  }
  std::ostringstream csv;
  write_alpha_csv(csv, s);
  const auto text = csv.str();
  const std::size_t rows = static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')) - 1;
  CHECK(rows == (4 + 8) + s.samples.size());
}

TEST_CASE("smoke config trains 200 iterations within a minute") {
  ExperimentConfig cfg = tiny_config();
  cfg.train.iterations = 200;
  cfg.data.sizes = {200, 50};
  const auto dir = scratch("smoke");
  const auto t0 = std::chrono::steady_clock::now();
  auto r = run_experiment(cfg, dir.string());
  const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
  CHECK(dt.count() < 60.0);
  CHECK(r.iterations == 200);
  for (const char* f : {"metrics.jsonl", "checkpoint.bin", "report.json", "alpha.csv"}) CHECK(fs::exists(dir / f));
  const std::string log = slurp(dir / "metrics.jsonl");
  CHECK(std::count(log.begin(), log.end(), '\n') == 200);
}
