#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "anrl/tensor.hpp"

namespace anrl {

enum Label : int { kFake = 0, kReal = 1 };

/// Embeddings O_i with their domain ids and real/fake labels.
struct EmbeddingBatch {
  Tensor features;  // [N, D]
  std::vector<int> domain_ids;
  std::vector<int> labels;

  std::size_t size() const { return domain_ids.size(); }
  std::size_t dim() const { return features.dim(1); }
  void validate() const;
};

/// Momentum-averaged global centroids per source domain and per class.
/// Stored as plain vectors, never part of a gradient graph.
class CentroidBank {
 public:
  explicit CentroidBank(double gamma = 0.9, std::size_t dim = 0);

  double gamma() const { return gamma_; }
  void set_gamma(double gamma);
  std::size_t dim() const { return dim_; }

  bool has_domain(int domain) const { return domains_.count(domain) != 0; }
  bool has_real() const { return real_.has_value(); }
  bool has_fake() const { return fake_.has_value(); }
  const std::vector<double>& domain(int domain) const;
  const std::vector<double>& real() const;
  const std::vector<double>& fake() const;
  std::vector<int> domain_ids() const;
  std::size_t domain_count() const { return domains_.size(); }

  /// Keys present in the bank that were observed in a batch; keys requested
  /// but absent from the batch are listed in `skipped`.
  struct UpdateReport {
    std::vector<std::string> updated;
    std::vector<std::string> skipped;
  };

  /// C <- gamma C + (1 - gamma) C_local, or C_local on first observation.
  /// `expected_domains` names keys that should have been observed; those with
  /// no samples in the batch are skipped and reported.
  UpdateReport update(const EmbeddingBatch& batch, const std::vector<int>& expected_domains = {});

  /// Direct assignment, e.g. when restoring a saved bank.
  void assign_domain(int domain, std::vector<double> centroid);
  void assign_real(std::vector<double> centroid);
  void assign_fake(std::vector<double> centroid);

  /// JSON object: {"gamma":..,"domains":{"0":[..],..},"real":[..],"fake":[..]}.
  std::string to_json() const;

 private:
  void blend(std::optional<std::vector<double>>& slot, const std::vector<double>& local);
  void check_dim(const std::vector<double>& centroid);
  double gamma_;
  std::size_t dim_;
  std::map<int, std::vector<double>> domains_;
  std::optional<std::vector<double>> real_;
  std::optional<std::vector<double>> fake_;
};

/// Mean of the rows whose mask entry is set.
std::vector<double> masked_centroid(const Tensor& features, const std::vector<bool>& mask);

/// D_sd^k: mean over domain-k samples of ||O_i - C_k||^2.
Tensor intra_domain_distance(const EmbeddingBatch& batch, const CentroidBank& bank, int domain);

/// D_dd^k: mean over the other bank domains m of mean ||O_i^k - C_m||^2.
Tensor inter_domain_distance(const EmbeddingBatch& batch, const CentroidBank& bank, int domain);

/// L_IDC = sum over domains k in the batch of (D_dd^k - D_sd^k).
Tensor idc_loss(const EmbeddingBatch& batch, const CentroidBank& bank);

/// L_ICS = D_rr - D_rf - D_fr. Fake samples are never pulled together.
Tensor ics_loss(const EmbeddingBatch& batch, const CentroidBank& bank);

/// Mean over samples of sum of squared differences, pred/target [N,1,h,h].
Tensor depth_loss(const Tensor& pred, const Tensor& target);

/// Mean binary cross-entropy on sigmoid(logit); label 1 is real.
Tensor cls_loss(const Tensor& logit, const std::vector<int>& labels);

}  // namespace anrl
