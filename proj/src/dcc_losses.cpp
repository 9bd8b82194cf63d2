#include "anrl/dcc_losses.hpp"

#include "json.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

namespace anrl {

namespace {

std::vector<double> indicator_weights(const std::vector<int>& keys, int key, std::size_t& count) {
  count = 0;
  for (int k : keys) count += (k == key);
  std::vector<double> w(keys.size(), 0.0);
  if (count == 0) return w;
  const double inv = 1.0 / static_cast<double>(count);
  for (std::size_t i = 0; i < keys.size(); ++i) {
    if (keys[i] == key) w[i] = inv;
  }
  return w;
}

// Mean of ||O_i - c||^2 over rows selected by the weight vector.
Tensor mean_sq_dist(const Tensor& features, const std::vector<double>& centroid, const std::vector<double>& weights) {
  return weighted_sum(row_sq_dist(features, centroid), weights);
}

}  // namespace

void EmbeddingBatch::validate() const {
  if (features.rank() != 2) throw ShapeError("EmbeddingBatch: features must be [N,D], got " + shape_str(features.shape()));
  if (features.dim(0) != domain_ids.size() || features.dim(0) != labels.size()) {
    throw ShapeError("EmbeddingBatch: sample axis mismatch between features, domain ids and labels");
  }
  for (int l : labels) {
    if (l != kFake && l != kReal) throw std::invalid_argument("EmbeddingBatch: labels must be 0 or 1");
  }
}

CentroidBank::CentroidBank(double gamma, std::size_t dim) : gamma_(0.0), dim_(dim) { set_gamma(gamma); }

void CentroidBank::set_gamma(double gamma) {
  if (gamma < 0.0 || gamma >= 1.0) throw std::invalid_argument("CentroidBank: gamma must lie in [0,1)");
  gamma_ = gamma;
}

const std::vector<double>& CentroidBank::domain(int domain) const {
  auto it = domains_.find(domain);
  if (it == domains_.end()) throw std::out_of_range("CentroidBank: no centroid for domain " + std::to_string(domain));
  return it->second;
}

const std::vector<double>& CentroidBank::real() const {
  if (!real_) throw std::out_of_range("CentroidBank: real centroid not initialized");
  return *real_;
}

const std::vector<double>& CentroidBank::fake() const {
  if (!fake_) throw std::out_of_range("CentroidBank: fake centroid not initialized");
  return *fake_;
}

std::vector<int> CentroidBank::domain_ids() const {
  std::vector<int> ids;
  for (const auto& [k, _] : domains_) ids.push_back(k);
  return ids;
}

std::vector<double> masked_centroid(const Tensor& features, const std::vector<bool>& mask) {
  const std::size_t n = features.dim(0), d = features.dim(1);
  std::vector<double> c(d, 0.0);
  std::size_t count = 0;
  auto f = features.data();
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    ++count;
    for (std::size_t j = 0; j < d; ++j) c[j] += f[i * d + j];
  }
  if (count == 0) throw std::invalid_argument("masked_centroid: empty selection");
  for (auto& v : c) v /= static_cast<double>(count);
  return c;
}

void CentroidBank::blend(std::optional<std::vector<double>>& slot, const std::vector<double>& local) {
  if (!slot) {
    slot = local;
    return;
  }
  for (std::size_t j = 0; j < local.size(); ++j) (*slot)[j] = gamma_ * (*slot)[j] + (1.0 - gamma_) * local[j];
}

CentroidBank::UpdateReport CentroidBank::update(const EmbeddingBatch& batch, const std::vector<int>& expected_domains) {
  batch.validate();
  if (dim_ == 0) dim_ = batch.dim();
  if (batch.dim() != dim_) {
    throw ShapeError("CentroidBank: embedding axis mismatch, bank D=" + std::to_string(dim_) + ", batch D=" +
                     std::to_string(batch.dim()));
  }
  UpdateReport report;
  std::set<int> keys(batch.domain_ids.begin(), batch.domain_ids.end());
  keys.insert(expected_domains.begin(), expected_domains.end());
  for (int k : keys) {
    std::vector<bool> mask(batch.size());
    bool any = false;
    for (std::size_t i = 0; i < batch.size(); ++i) any |= (mask[i] = batch.domain_ids[i] == k);
    const std::string name = "domain:" + std::to_string(k);
    if (!any) {
      report.skipped.push_back(name);
      continue;
    }
    std::optional<std::vector<double>> slot;
    if (auto it = domains_.find(k); it != domains_.end()) slot = std::move(it->second);
    blend(slot, masked_centroid(batch.features, mask));
    domains_[k] = std::move(*slot);
    report.updated.push_back(name);
  }
  for (int cls : {kReal, kFake}) {
    std::vector<bool> mask(batch.size());
    bool any = false;
    for (std::size_t i = 0; i < batch.size(); ++i) any |= (mask[i] = batch.labels[i] == cls);
    const char* name = cls == kReal ? "real" : "fake";
    if (!any) {
      report.skipped.emplace_back(name);
      continue;
    }
    blend(cls == kReal ? real_ : fake_, masked_centroid(batch.features, mask));
    report.updated.emplace_back(name);
  }
  return report;
}

void CentroidBank::check_dim(const std::vector<double>& centroid) {
  if (dim_ == 0) dim_ = centroid.size();
  if (centroid.size() != dim_ || dim_ == 0) {
    throw ShapeError("CentroidBank: centroid width " + std::to_string(centroid.size()) + ", bank D=" + std::to_string(dim_));
  }
}

void CentroidBank::assign_domain(int domain, std::vector<double> centroid) {
  check_dim(centroid);
  domains_[domain] = std::move(centroid);
}

void CentroidBank::assign_real(std::vector<double> centroid) {
  check_dim(centroid);
  real_ = std::move(centroid);
}

void CentroidBank::assign_fake(std::vector<double> centroid) {
  check_dim(centroid);
  fake_ = std::move(centroid);
}

std::string CentroidBank::to_json() const {
  nlohmann::ordered_json j;
  j["gamma"] = gamma_;
  j["dim"] = dim_;
  nlohmann::ordered_json domains = nlohmann::ordered_json::object();
  for (const auto& [k, v] : domains_) domains[std::to_string(k)] = v;
  j["domains"] = domains;
  j["real"] = real_ ? nlohmann::ordered_json(*real_) : nlohmann::ordered_json(nullptr);
  j["fake"] = fake_ ? nlohmann::ordered_json(*fake_) : nlohmann::ordered_json(nullptr);
  return j.dump();
}

Tensor intra_domain_distance(const EmbeddingBatch& batch, const CentroidBank& bank, int domain) {
  batch.validate();
  if (!bank.has_domain(domain)) throw std::invalid_argument("intra_domain_distance: domain " + std::to_string(domain) + " missing from bank");
  std::size_t count = 0;
  auto w = indicator_weights(batch.domain_ids, domain, count);
  if (count == 0) throw std::invalid_argument("intra_domain_distance: domain " + std::to_string(domain) + " missing from batch");
  return mean_sq_dist(batch.features, bank.domain(domain), w);
}

Tensor inter_domain_distance(const EmbeddingBatch& batch, const CentroidBank& bank, int domain) {
  batch.validate();
  const std::size_t k_total = bank.domain_count();
  if (k_total < 2) throw std::invalid_argument("inter_domain_distance: bank needs K >= 2 domains");
  if (!bank.has_domain(domain)) throw std::invalid_argument("inter_domain_distance: domain " + std::to_string(domain) + " missing from bank");
  std::size_t count = 0;
  auto w = indicator_weights(batch.domain_ids, domain, count);
  if (count == 0) throw std::invalid_argument("inter_domain_distance: domain " + std::to_string(domain) + " missing from batch");
  const double inv_others = 1.0 / static_cast<double>(k_total - 1);
  for (auto& v : w) v *= inv_others;
  Tensor total;
  for (int m : bank.domain_ids()) {
    if (m == domain) continue;
    Tensor term = mean_sq_dist(batch.features, bank.domain(m), w);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

Tensor idc_loss(const EmbeddingBatch& batch, const CentroidBank& bank) {
  batch.validate();
  std::set<int> present(batch.domain_ids.begin(), batch.domain_ids.end());
  if (present.empty()) throw std::invalid_argument("idc_loss: empty batch");
  Tensor total;
  for (int k : present) {
    Tensor term = sub(inter_domain_distance(batch, bank, k), intra_domain_distance(batch, bank, k));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

Tensor ics_loss(const EmbeddingBatch& batch, const CentroidBank& bank) {
  batch.validate();
  std::size_t n_real = 0, n_fake = 0;
  auto w_real = indicator_weights(batch.labels, kReal, n_real);
  auto w_fake = indicator_weights(batch.labels, kFake, n_fake);
  if (n_real == 0 || n_fake == 0) throw std::invalid_argument("ics_loss: batch must contain both classes");
  if (!bank.has_real() || !bank.has_fake()) throw std::invalid_argument("ics_loss: class centroids not initialized");
  Tensor d_rr = mean_sq_dist(batch.features, bank.real(), w_real);
  Tensor d_rf = mean_sq_dist(batch.features, bank.fake(), w_real);
  Tensor d_fr = mean_sq_dist(batch.features, bank.real(), w_fake);
  return sub(sub(d_rr, d_rf), d_fr);
}

Tensor depth_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("depth_loss: prediction " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
  }
  if (pred.rank() != 4 || pred.dim(1) != 1) throw ShapeError("depth_loss: expected [N,1,h,h], got " + shape_str(pred.shape()));
  const std::size_t n = pred.dim(0);
  return scale(sum(square(sub(pred, target))), 1.0 / static_cast<double>(n));
}

Tensor cls_loss(const Tensor& logit, const std::vector<int>& labels) {
  if (logit.rank() != 1 || logit.dim(0) != labels.size()) {
    throw ShapeError("cls_loss: logits " + shape_str(logit.shape()) + " vs " + std::to_string(labels.size()) + " labels");
  }
  for (int l : labels) {
    if (l != 0 && l != 1) throw std::invalid_argument("cls_loss: label " + std::to_string(l) + " outside {0,1}");
  }
  const std::size_t n = labels.size();
  if (n == 0) throw ShapeError("cls_loss: empty batch");
  auto z = logit.data();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    // log(1 + e^z) - y z in a form that cannot overflow.
    total += std::max(z[i], 0.0) - z[i] * labels[i] + std::log1p(std::exp(-std::abs(z[i])));
  }
  total /= static_cast<double>(n);
  std::vector<double> y(labels.begin(), labels.end());
  return make_result({}, {total}, {logit}, [y = std::move(y)](detail::Node& self) {
    auto& nz = self.inputs[0];
    const double scale_g = self.grad[0] / static_cast<double>(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double v = nz->data[i];
      const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      nz->grad[i] += (s - y[i]) * scale_g;
    }
  });
}

}  // namespace anrl
