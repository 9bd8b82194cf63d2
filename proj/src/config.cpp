#include "anrl/config.hpp"

#include <charconv>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "anrl/param_store.hpp"

namespace anrl {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

struct Entry {
  std::string value;
  int line;
};

class Reader {
 public:
  Reader(std::string section, const Entry& e) : where_("[" + section + "] line " + std::to_string(e.line)), v_(e.value) {}

  double real() const {
    double out = 0.0;
    const auto* end = v_.data() + v_.size();
    auto [p, ec] = std::from_chars(v_.data(), end, out);
    if (ec != std::errc() || p != end) fail("expected a number");
    return out;
  }
  std::uint64_t u64() const {
    std::uint64_t out = 0;
    const auto* end = v_.data() + v_.size();
    auto [p, ec] = std::from_chars(v_.data(), end, out);
    if (ec != std::errc() || p != end) fail("expected a non-negative integer");
    return out;
  }
  std::size_t size() const { return static_cast<std::size_t>(u64()); }
  int integer() const {
    int out = 0;
    const auto* end = v_.data() + v_.size();
    auto [p, ec] = std::from_chars(v_.data(), end, out);
    if (ec != std::errc() || p != end) fail("expected an integer");
    return out;
  }
  bool boolean() const {
    if (v_ == "true" || v_ == "1" || v_ == "on") return true;
    if (v_ == "false" || v_ == "0" || v_ == "off") return false;
    fail("expected true or false");
  }
  std::array<double, 3> triple() const {
    auto parts = split_list(v_);
    if (parts.size() != 3) fail("expected three comma-separated numbers");
    std::array<double, 3> out{};
    for (int i = 0; i < 3; ++i) out[i] = Reader(parts[i], where_).real();
    return out;
  }
  std::vector<std::size_t> sizes() const {
    std::vector<std::size_t> out;
    for (const auto& p : split_list(v_)) out.push_back(Reader(p, where_).size());
    return out;
  }
  const std::string& text() const { return v_; }
  template <typename F>
  auto wrap(F&& f) const {
    try {
      return f(v_);
    } catch (const std::invalid_argument& e) {
      fail(e.what());
    }
  }
  [[noreturn]] void fail(const std::string& what) const { throw ConfigError(where_ + ": '" + v_ + "': " + what); }

 private:
  Reader(std::string value, std::string where) : where_(std::move(where)), v_(std::move(value)) {}
  std::string where_;
  std::string v_;
};

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return os.str();
}

std::string fmt_triple(const std::array<double, 3>& a) { return fmt(a[0]) + ", " + fmt(a[1]) + ", " + fmt(a[2]); }

const char* bool_str(bool b) { return b ? "true" : "false"; }

}  // namespace

void ExperimentConfig::validate() const {
  try {
    network.validate();
    train.validate();
    for (const auto& d : data.domains) d.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (network.in_channels != 6) throw ConfigError("network.in_channels must be 6 (RGB + HSV input)");
  if (data.domains.size() != data.n_domains) {
    throw ConfigError("data.n_domains = " + std::to_string(data.n_domains) + " but " +
                      std::to_string(data.domains.size()) + " domain specs are defined");
  }
  for (std::size_t i = 0; i < data.domains.size(); ++i) {
    if (data.domains[i].id != static_cast<int>(i)) throw ConfigError("domain specs must have ids 0..n_domains-1 in order");
  }
  if (data.n_domains < 3) throw ConfigError("data.n_domains must be >= 3");
  if (data.held_out < 0 || static_cast<std::size_t>(data.held_out) >= data.n_domains) {
    throw ConfigError("data.held_out out of range");
  }
  if (data.sizes.train_per_domain < train.batch_per_domain) {
    throw ConfigError("data.train_per_domain must be at least train.batch_per_domain");
  }
  if (data.sizes.test_per_domain < 2) throw ConfigError("data.test_per_domain must be >= 2");
  if (eval.eval_batch == 0) throw ConfigError("eval.eval_batch must be positive");
}

ExperimentConfig parse_config(const std::string& text) {
  std::map<std::string, std::map<std::string, Entry>> sections;
  std::vector<std::string> order;
  std::string current;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(line_no) + ": malformed section header");
      current = trim(line.substr(1, line.size() - 2));
      if (sections.count(current)) throw ConfigError("line " + std::to_string(line_no) + ": duplicate section [" + current + "]");
      sections[current];
      order.push_back(current);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    if (current.empty()) throw ConfigError("line " + std::to_string(line_no) + ": key outside of any section");
    const std::string key = trim(line.substr(0, eq));
    if (sections[current].count(key)) {
      throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + key + "' in [" + current + "]");
    }
    sections[current][key] = {trim(line.substr(eq + 1)), line_no};
  }

  ExperimentConfig cfg;
  std::map<int, DomainSpec> domain_overrides;
  for (const auto& name : order) {
    auto& keys = sections[name];
    static const std::set<std::string> kSections{"network", "train", "ablation", "data", "eval"};
    if (!kSections.count(name) && name.rfind("domain.", 0) != 0) throw ConfigError("unknown section [" + name + "]");
    for (const auto& [key, entry] : keys) {
      Reader r(name, entry);
      bool known = true;
      if (name == "network") {
        auto& n = cfg.network;
        if (key == "in_channels") n.in_channels = r.size();
        else if (key == "block_channel_widths") n.block_channel_widths = r.sizes();
        else if (key == "norm_variant") {
          n.norm_variant.clear();
          for (const auto& v : split_list(r.text())) n.norm_variant.push_back(r.wrap([&](const std::string&) { return parse_variant(v); }));
        }
        else if (key == "embed_dim") n.embed_dim = r.size();
        else if (key == "depth_map_side") n.depth_map_side = r.size();
        else if (key == "input_side") n.input_side = r.size();
        else if (key == "norm_eps") n.norm_eps = r.real();
        else if (key == "stat_momentum") n.stat_momentum = r.real();
        else known = false;
      } else if (name == "train") {
        auto& t = cfg.train;
        if (key == "beta1") t.beta1 = r.real();
        else if (key == "beta2") t.beta2 = r.real();
        else if (key == "lambda1") t.lambda1 = r.real();
        else if (key == "lambda2") t.lambda2 = r.real();
        else if (key == "gamma") t.gamma = r.real();
        else if (key == "epochs") t.epochs = r.size();
        else if (key == "iterations") t.iterations = r.size();
        else if (key == "batch_per_domain") t.batch_per_domain = r.size();
        else if (key == "seed") t.seed = r.u64();
        else if (key == "meta_mode") t.meta_mode = r.wrap(parse_meta_mode);
        else if (key == "base_optimizer") t.base_optimizer = r.wrap(parse_optimizer);
        else if (key == "meta_optimizer") t.meta_optimizer = r.wrap(parse_optimizer);
        else if (key == "adam_beta1") t.adam_beta1 = r.real();
        else if (key == "adam_beta2") t.adam_beta2 = r.real();
        else if (key == "adam_eps") t.adam_eps = r.real();
        else if (key == "fd_step") t.fd_step = r.real();
        else known = false;
      } else if (name == "ablation") {
        if (key == "meta") cfg.train.use_meta = r.boolean();
        else if (key == "idc") cfg.train.use_idc = r.boolean();
        else if (key == "ics") cfg.train.use_ics = r.boolean();
        else known = false;
      } else if (name == "data") {
        auto& d = cfg.data;
        if (key == "n_domains") d.n_domains = r.size();
        else if (key == "held_out") d.held_out = r.integer();
        else if (key == "train_per_domain") d.sizes.train_per_domain = r.size();
        else if (key == "test_per_domain") d.sizes.test_per_domain = r.size();
        else if (key == "data_seed") d.data_seed = r.u64();
        else known = false;
      } else if (name == "eval") {
        auto& e = cfg.eval;
        if (key == "threshold") {
          if (r.text() == "test_eer") e.threshold = ThresholdSource::TestEer;
          else if (r.text() == "fixed") e.threshold = ThresholdSource::Fixed;
          else r.fail("expected test_eer or fixed");
        }
        else if (key == "fixed_threshold") e.fixed_threshold = r.real();
        else if (key == "alpha_probe") e.alpha_probe = r.size();
        else if (key == "alpha_sample_channels") e.alpha_sample_channels = r.size();
        else if (key == "export_embeddings") e.export_embeddings = r.boolean();
        else if (key == "embedding_source_samples") e.embedding_source_samples = r.size();
        else if (key == "eval_batch") e.eval_batch = r.size();
        else known = false;
      } else if (name.rfind("domain.", 0) == 0) {
        int id = 0;
        const std::string tail = name.substr(7);
        auto [p, ec] = std::from_chars(tail.data(), tail.data() + tail.size(), id);
        if (ec != std::errc() || p != tail.data() + tail.size() || id < 0) {
          throw ConfigError("section [" + name + "]: expected domain.<non-negative id>");
        }
        auto& spec = domain_overrides[id];
        spec.id = id;
        if (key == "color_gain") spec.color_gain = r.triple();
        else if (key == "color_bias") spec.color_bias = r.triple();
        else if (key == "blur_sigma") spec.blur_sigma = r.real();
        else if (key == "noise_std") spec.noise_std = r.real();
        else if (key == "background_palette") spec.background_palette = r.u64();
        else if (key == "spoof_cast") spec.spoof_cast = r.triple();
        else known = false;
      } else {
        throw ConfigError("unknown section [" + name + "]");
      }
      if (!known) throw ConfigError("[" + name + "] line " + std::to_string(entry.line) + ": unknown key '" + key + "'");
    }
  }
  if (!domain_overrides.empty()) {
    // Domain sections replace the defaults wholesale; keys left out fall back
    // to DomainSpec defaults.
    cfg.data.domains.clear();
    for (auto& [id, spec] : domain_overrides) cfg.data.domains.push_back(spec);
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

std::string to_text(const ExperimentConfig& c) {
  std::ostringstream o;
  const auto& n = c.network;
  o << "[network]\n";
  o << "in_channels = " << n.in_channels << "\n";
  o << "block_channel_widths = ";
  for (std::size_t i = 0; i < n.block_channel_widths.size(); ++i) o << (i ? ", " : "") << n.block_channel_widths[i];
  o << "\nnorm_variant = ";
  for (std::size_t i = 0; i < n.norm_variant.size(); ++i) o << (i ? ", " : "") << variant_name(n.norm_variant[i]);
  o << "\nembed_dim = " << n.embed_dim << "\n";
  o << "depth_map_side = " << n.depth_map_side << "\n";
  o << "input_side = " << n.input_side << "\n";
  o << "norm_eps = " << fmt(n.norm_eps) << "\n";
  o << "stat_momentum = " << fmt(n.stat_momentum) << "\n\n";
  const auto& t = c.train;
  o << "[train]\n";
  o << "beta1 = " << fmt(t.beta1) << "\n";
  o << "beta2 = " << fmt(t.beta2) << "\n";
  o << "lambda1 = " << fmt(t.lambda1) << "\n";
  o << "lambda2 = " << fmt(t.lambda2) << "\n";
  o << "gamma = " << fmt(t.gamma) << "\n";
  o << "epochs = " << t.epochs << "\n";
  o << "iterations = " << t.iterations << "\n";
  o << "batch_per_domain = " << t.batch_per_domain << "\n";
  o << "seed = " << t.seed << "\n";
  o << "meta_mode = " << meta_mode_name(t.meta_mode) << "\n";
  o << "base_optimizer = " << optimizer_name(t.base_optimizer) << "\n";
  o << "meta_optimizer = " << optimizer_name(t.meta_optimizer) << "\n";
  o << "adam_beta1 = " << fmt(t.adam_beta1) << "\n";
  o << "adam_beta2 = " << fmt(t.adam_beta2) << "\n";
  o << "adam_eps = " << fmt(t.adam_eps) << "\n";
  o << "fd_step = " << fmt(t.fd_step) << "\n\n";
  o << "[ablation]\n";
  o << "meta = " << bool_str(t.use_meta) << "\n";
  o << "idc = " << bool_str(t.use_idc) << "\n";
  o << "ics = " << bool_str(t.use_ics) << "\n\n";
  const auto& d = c.data;
  o << "[data]\n";
  o << "n_domains = " << d.n_domains << "\n";
  o << "held_out = " << d.held_out << "\n";
  o << "train_per_domain = " << d.sizes.train_per_domain << "\n";
  o << "test_per_domain = " << d.sizes.test_per_domain << "\n";
  o << "data_seed = " << d.data_seed << "\n\n";
  const auto& e = c.eval;
  o << "[eval]\n";
  o << "threshold = " << (e.threshold == ThresholdSource::TestEer ? "test_eer" : "fixed") << "\n";
  o << "fixed_threshold = " << fmt(e.fixed_threshold) << "\n";
  o << "alpha_probe = " << e.alpha_probe << "\n";
  o << "alpha_sample_channels = " << e.alpha_sample_channels << "\n";
  o << "export_embeddings = " << bool_str(e.export_embeddings) << "\n";
  o << "embedding_source_samples = " << e.embedding_source_samples << "\n";
  o << "eval_batch = " << e.eval_batch << "\n";
  for (const auto& s : d.domains) {
    o << "\n[domain." << s.id << "]\n";
    o << "color_gain = " << fmt_triple(s.color_gain) << "\n";
    o << "color_bias = " << fmt_triple(s.color_bias) << "\n";
    o << "blur_sigma = " << fmt(s.blur_sigma) << "\n";
    o << "noise_std = " << fmt(s.noise_std) << "\n";
    o << "background_palette = " << s.background_palette << "\n";
    o << "spoof_cast = " << fmt_triple(s.spoof_cast) << "\n";
  }
  return o.str();
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
  const std::string t = to_text(cfg);
  return fnv1a(t.data(), t.size());
}

std::string hex64(std::uint64_t v) {
  std::ostringstream o;
  o << std::hex << std::setw(16) << std::setfill('0') << v;
  return o.str();
}

}  // namespace anrl
