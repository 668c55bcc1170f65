#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "hsinet/data.hpp"
#include "hsinet/model.hpp"

namespace hsinet {

struct TrainConfig {
  double lr = 1e-3;
  std::size_t batch = 64;
  std::size_t epochs = 100;
  std::uint64_t seed = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  void validate() const;
};

/// Adam with bias correction; no weight decay.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  /// Applies one update from the accumulated gradients, then clears them.
  void step();
  std::size_t steps() const { return t_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;      // mean over training samples
  double train_oa = 0.0;  // training-mode predictions seen during the epoch
  double seconds = 0.0;
};

/// Mini-batch training on the train split. Each epoch shuffles with
/// seed + epoch. Throws NumericError naming the batch on a non-finite loss.
std::vector<EpochLog> train(Model<float>& model, const PatchSet& data, const TrainConfig& config,
                            const std::function<void(const EpochLog&)>& on_epoch = {});

/// Rows are true classes, columns predictions; indices 0..K-1.
struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::uint64_t> counts;

  explicit ConfusionMatrix(std::size_t k = 0) : classes(k), counts(k * k, 0) {}
  void add(int truth, int predicted) { counts[static_cast<std::size_t>(truth) * classes + predicted] += 1; }
  std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts[truth * classes + predicted]; }
  std::uint64_t total() const;
};

struct MetricsReport {
  double oa = 0.0, aa = 0.0, kappa = 0.0;
  // Recall per class; NaN for classes without samples.
  std::vector<double> per_class;
};

/// OA = trace/total, AA = mean recall over classes present, kappa from the
/// marginals (1 when the agreement is perfect and chance agreement is 1).
MetricsReport compute_metrics(const ConfusionMatrix& cm);

struct Evaluation {
  ConfusionMatrix confusion;
  MetricsReport metrics;
  std::vector<std::size_t> samples;  // indices into the PatchSet
  std::vector<int> predictions;      // 1..K, parallel to samples
};

/// Inference-mode predictions on one split.
Evaluation evaluate(Model<float>& model, const PatchSet& data, Split which = Split::test, std::size_t chunk = 256);

struct AblationCase {
  int id;
  bool tbfe, hpa, cff;
  std::string label() const;
};

/// The six module combinations compared in the ablation study.
const std::array<AblationCase, 6>& ablation_cases();
ModelConfig with_case(ModelConfig config, const AblationCase& c);

struct AblationResult {
  AblationCase which;
  MetricsReport metrics;
  std::size_t parameters = 0;
};

/// Trains and evaluates every case on the same split with the same seed.
std::vector<AblationResult> ablate(const ModelConfig& base, const PatchSet& data, const TrainConfig& config,
                                   const std::vector<AblationCase>& cases,
                                   const std::function<void(const AblationResult&)>& on_case = {});

struct ParamReport {
  std::size_t total = 0;       // trainable scalars
  std::size_t buffers = 0;     // non-trainable scalars (running statistics)
  std::map<std::string, std::size_t> by_component;
};

template <typename T>
ParamReport param_report(const Model<T>& model);

}  // namespace hsinet
