#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "json.hpp"

#include "anrl/checkpoint.hpp"
#include "anrl/config.hpp"
#include "anrl/experiment.hpp"
#include "anrl/gradcheck.hpp"
#include "anrl/metrics.hpp"
#include "anrl/synth_domains.hpp"

namespace fs = std::filesystem;
using namespace anrl;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

ExperimentConfig config_or_default(const std::string& path) {
  return path.empty() ? parse_config(to_text(ExperimentConfig{})) : load_config(path);
}

void apply_overrides(ExperimentConfig& cfg, const std::optional<std::uint64_t>& seed,
                     const std::optional<std::size_t>& iterations) {
  if (seed) cfg.train.seed = *seed;
  if (iterations) cfg.train.iterations = *iterations;
  cfg.validate();
}

int generate_data(const ExperimentConfig& cfg, const std::string& out) {
  fs::create_directories(out);
  const Protocol p = build_protocol(cfg.data.n_domains, cfg.data.held_out, cfg.data.sizes, cfg.data.data_seed);
  nlohmann::ordered_json header;
  header["held_out"] = cfg.data.held_out;
  header["data_seed"] = cfg.data.data_seed;
  header["domains"] = nlohmann::ordered_json::array();
  for (const auto& s : cfg.data.domains) header["domains"].push_back(nlohmann::ordered_json::parse(s.to_json()));
  for (auto [name, refs] : {std::pair{"train", &p.train}, std::pair{"test", &p.test}}) {
    header["split"] = name;
    std::ofstream o(fs::path(out) / (std::string(name) + ".split"), std::ios::binary | std::ios::trunc);
    write_split_cache(o, header.dump(), *refs, cfg.data.domains, cfg.geometry());
    std::cout << name << ": " << refs->size() << " samples\n";
  }
  return 0;
}

int evaluate(const std::string& checkpoint, const std::string& out) {
  ExperimentConfig cfg;
  Model model = restore_model(read_checkpoint(checkpoint), &cfg);
  const Protocol p = build_protocol(cfg.data.n_domains, cfg.data.held_out, cfg.data.sizes, cfg.data.data_seed);
  Evaluation ev = evaluate_model(model, p.test, cfg.data.domains, cfg.geometry(), cfg.eval);
  ev.metrics.config_hash = hex64(config_hash(cfg));
  ev.metrics.seed = cfg.train.seed;
  if (cfg.network.uses_afnm()) {
    ev.metrics.per_layer_alpha_mean =
        compute_alpha_stats(model, alpha_probe(cfg, p), cfg.eval.alpha_sample_channels).layer_means();
  }
  const std::string text = report_json(ev, cfg);
  if (out.empty()) {
    std::cout << text;
  } else {
    std::ofstream(out, std::ios::binary | std::ios::trunc) << text;
  }
  std::cerr << "HTER " << ev.metrics.hter << "  AUC " << ev.metrics.auc << "\n";
  return 0;
}

int gradcheck(std::uint64_t first_seed, std::size_t seeds) {
  bool ok = true;
  for (std::uint64_t s = first_seed; s < first_seed + seeds; ++s) {
    for (const auto& r : run_gradient_suite(s)) {
      ok = ok && r.passed();
      std::cout << (r.passed() ? "ok   " : "FAIL ") << "seed " << s << "  " << r.name << "  max_rel_err " << r.max_rel_error
                << " (tol " << r.tolerance << ")\n";
    }
  }
  return ok ? 0 : kExitRuntime;
}

int export_alpha(const std::string& checkpoint, const std::string& out, std::optional<std::size_t> probe) {
  ExperimentConfig cfg;
  Model model = restore_model(read_checkpoint(checkpoint), &cfg);
  if (probe) cfg.eval.alpha_probe = *probe;
  const Protocol p = build_protocol(cfg.data.n_domains, cfg.data.held_out, cfg.data.sizes, cfg.data.data_seed);
  AlphaStats stats = compute_alpha_stats(model, alpha_probe(cfg, p), cfg.eval.alpha_sample_channels);
  std::ofstream o(out, std::ios::binary | std::ios::trunc);
  write_alpha_csv(o, stats);
  const auto means = stats.layer_means();
  for (std::size_t l = 0; l < means.size(); ++l) std::cerr << "layer " << l << " mean alpha " << means[l] << "\n";
  return 0;
}

int export_embeddings(const std::string& checkpoint, const std::string& out, std::size_t per_domain) {
  ExperimentConfig cfg;
  Model model = restore_model(read_checkpoint(checkpoint), &cfg);
  const Protocol p = build_protocol(cfg.data.n_domains, cfg.data.held_out, cfg.data.sizes, cfg.data.data_seed);
  std::vector<SampleRef> refs;
  std::vector<std::string> roles;
  std::map<int, std::size_t> taken;
  for (const auto& r : p.train) {
    if (taken[r.domain]++ < per_domain) {
      refs.push_back(r);
      roles.emplace_back("source");
    }
  }
  for (std::size_t i = 0; i < std::min(per_domain, p.test.size()); ++i) {
    refs.push_back(p.test[i]);
    roles.emplace_back("target");
  }
  std::ofstream o(out, std::ios::binary | std::ios::trunc);
  write_embeddings_csv(o, model, materialize(refs, cfg.data.domains, cfg.geometry()), roles);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive normalized representation learning for face anti-spoofing on synthetic domains"};
  app.require_subcommand(1);

  std::string config_path, out, checkpoint, kind = "variants", seeds_text = "0";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> iterations, probe;
  std::uint64_t grad_seed = 0;
  std::size_t grad_seeds = 1, per_domain = 100;

  auto* gen = app.add_subcommand("generate-data", "Write the train/test split caches");
  gen->add_option("-c,--config", config_path, "Config file");
  gen->add_option("-o,--out", out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train, evaluate and write all artifacts");
  train->add_option("-c,--config", config_path, "Config file");
  train->add_option("-o,--out", out, "Artifacts directory")->required();
  train->add_option("--seed", seed, "Override train.seed");
  train->add_option("--iterations", iterations, "Override train.iterations");

  auto* eval = app.add_subcommand("evaluate", "Score the held-out domain with a checkpoint");
  eval->add_option("-k,--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("-o,--out", out, "Report path (stdout when omitted)");

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  grad->add_option("--seed", grad_seed, "First seed");
  grad->add_option("--seeds", grad_seeds, "Number of seeds");

  auto* abl = app.add_subcommand("ablate", "Run the variant or component ablation matrix");
  abl->add_option("-c,--config", config_path, "Base config file");
  abl->add_option("-o,--out", out, "Output directory")->required();
  abl->add_option("--kind", kind, "variants or components")->check(CLI::IsMember({"variants", "components"}));
  abl->add_option("--seeds", seeds_text, "Comma-separated seeds");
  abl->add_option("--iterations", iterations, "Override train.iterations");

  auto* alpha = app.add_subcommand("export-alpha", "Balance factor statistics CSV");
  alpha->add_option("-k,--checkpoint", checkpoint, "Checkpoint file")->required();
  alpha->add_option("-o,--out", out, "CSV path")->required();
  alpha->add_option("--probe", probe, "Probe batch size");

  auto* emb = app.add_subcommand("export-embeddings", "Embedding CSV for external visualization");
  emb->add_option("-k,--checkpoint", checkpoint, "Checkpoint file")->required();
  emb->add_option("-o,--out", out, "CSV path")->required();
  emb->add_option("--per-domain", per_domain, "Samples per domain");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return generate_data(config_or_default(config_path), out);
    if (train->parsed()) {
      ExperimentConfig cfg = config_or_default(config_path);
      apply_overrides(cfg, seed, iterations);
      const auto t0 = std::chrono::steady_clock::now();
      auto r = run_experiment(cfg, out);
      const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
      std::cout << "iterations " << r.iterations << "  HTER " << r.evaluation.metrics.hter << "  AUC "
                << r.evaluation.metrics.auc << "  (" << dt.count() << " s)\n";
      return 0;
    }
    if (eval->parsed()) return evaluate(checkpoint, out);
    if (grad->parsed()) return gradcheck(grad_seed, grad_seeds);
    if (abl->parsed()) {
      ExperimentConfig cfg = config_or_default(config_path);
      apply_overrides(cfg, std::nullopt, iterations);
      std::vector<std::uint64_t> seeds;
      std::stringstream ss(seeds_text);
      for (std::string s; std::getline(ss, s, ',');) seeds.push_back(std::stoull(s));
      run_ablation(cfg, kind == "variants" ? AblationKind::Variants : AblationKind::Components, seeds, out, &std::cout);
      return 0;
    }
    if (alpha->parsed()) return export_alpha(checkpoint, out, probe);
    if (emb->parsed()) return export_embeddings(checkpoint, out, per_domain);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
