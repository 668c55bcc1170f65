#include "hsinet/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

namespace hsinet {

void TrainConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be finite and non-negative");
  if (batch < 1) throw ConfigError("batch size must be at least 1");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(eps > 0)) throw ConfigError("Adam eps must be positive");
}

template <typename T>
Adam<T>::Adam(std::vector<Tensor<T>> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

template <typename T>
void Adam<T>::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;
    auto value = p.mutable_data();
    const auto grad = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double g = grad[j];
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
      value[j] = static_cast<T>(value[j] - lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_));
    }
    p.zero_grad();
  }
}

template class Adam<float>;
template class Adam<double>;

namespace {

std::vector<int> targets_for(const PatchSet& data, std::span<const std::size_t> idx) {
  std::vector<int> t(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) t[i] = data.labels[idx[i]] - 1;
  return t;
}

}  // namespace

std::vector<EpochLog> train(Model<float>& model, const PatchSet& data, const TrainConfig& config,
                            const std::function<void(const EpochLog&)>& on_epoch) {
  config.validate();
  if (static_cast<std::size_t>(data.classes) != model.config().classes) {
    throw DimensionError("train: data has " + std::to_string(data.classes) + " classes, model expects " +
                         std::to_string(model.config().classes));
  }
  const std::vector<std::size_t> base = data.indices(Split::train);
  if (base.empty()) throw DataError("train: the train split is empty");

  Adam<float> optimizer(model.params().trainable(), config.lr, config.beta1, config.beta2, config.eps);
  model.params().zero_grad();
  Rng dropout_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<EpochLog> log;
  std::size_t batch_index = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::vector<std::size_t> order = base;
    Rng shuffle(config.seed + epoch);
    std::shuffle(order.begin(), order.end(), shuffle.engine());
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < order.size(); b += config.batch, ++batch_index) {
      const std::span<const std::size_t> idx(order.data() + b, std::min(config.batch, order.size() - b));
      const auto targets = targets_for(data, idx);
      const Tensor32 logits = model.forward(data.gather<float>(idx), true, &dropout_rng);
      const Tensor32 loss = cross_entropy(logits, targets);
      if (!std::isfinite(loss.item())) {
        throw NumericError("non-finite loss in epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(b / config.batch) + " (global batch " + std::to_string(batch_index) + ")");
      }
      loss.backward();
      optimizer.step();
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(idx.size());
      const std::size_t k = logits.dim(1);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const float* row = logits.data().data() + i * k;
        if (std::max_element(row, row + k) - row == targets[i]) ++correct;
      }
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log.push_back({epoch, loss_sum / static_cast<double>(order.size()),
                   static_cast<double>(correct) / static_cast<double>(order.size()), seconds});
    if (on_epoch) on_epoch(log.back());
  }
  return log;
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t n = 0;
  for (auto c : counts) n += c;
  return n;
}

MetricsReport compute_metrics(const ConfusionMatrix& cm) {
  const std::size_t k = cm.classes;
  const double n = static_cast<double>(cm.total());
  MetricsReport r;
  r.per_class.assign(k, std::numeric_limits<double>::quiet_NaN());
  if (n == 0) return r;
  double trace = 0, pe = 0, aa = 0;
  std::size_t present = 0;
  for (std::size_t i = 0; i < k; ++i) {
    double row = 0, col = 0;
    for (std::size_t j = 0; j < k; ++j) {
      row += static_cast<double>(cm.at(i, j));
      col += static_cast<double>(cm.at(j, i));
    }
    trace += static_cast<double>(cm.at(i, i));
    pe += (row / n) * (col / n);
    if (row > 0) {
      r.per_class[i] = static_cast<double>(cm.at(i, i)) / row;
      aa += r.per_class[i];
      ++present;
    }
  }
  r.oa = trace / n;
  r.aa = present ? aa / static_cast<double>(present) : 0.0;
  r.kappa = pe < 1.0 ? (r.oa - pe) / (1.0 - pe) : (r.oa == 1.0 ? 1.0 : 0.0);
  return r;
}

Evaluation evaluate(Model<float>& model, const PatchSet& data, Split which, std::size_t chunk) {
  Evaluation e;
  e.confusion = ConfusionMatrix(model.config().classes);
  e.samples = data.indices(which);
  for (std::size_t start = 0; start < e.samples.size(); start += chunk) {
    const std::span<const std::size_t> idx(e.samples.data() + start, std::min(chunk, e.samples.size() - start));
    for (int p : model.predict(data.gather<float>(idx), chunk)) e.predictions.push_back(p + 1);
  }
  for (std::size_t i = 0; i < e.samples.size(); ++i) {
    e.confusion.add(data.labels[e.samples[i]] - 1, e.predictions[i] - 1);
  }
  e.metrics = compute_metrics(e.confusion);
  return e;
}

std::string AblationCase::label() const {
  auto mark = [](bool on) { return on ? std::string("on") : std::string("off"); };
  return "case" + std::to_string(id) + " tbfe=" + (tbfe ? "twin" : "naive") + " hpa=" + mark(hpa) +
         " cff=" + mark(cff);
}

const std::array<AblationCase, 6>& ablation_cases() {
  static const std::array<AblationCase, 6> cases{{{1, false, false, false},
                                                  {2, true, false, false},
                                                  {3, true, false, true},
                                                  {4, true, true, false},
                                                  {5, false, true, true},
                                                  {6, true, true, true}}};
  return cases;
}

ModelConfig with_case(ModelConfig config, const AblationCase& c) {
  config.tbfe = c.tbfe;
  config.hpa = c.hpa;
  config.cff = c.cff;
  return config;
}

std::vector<AblationResult> ablate(const ModelConfig& base, const PatchSet& data, const TrainConfig& config,
                                   const std::vector<AblationCase>& cases,
                                   const std::function<void(const AblationResult&)>& on_case) {
  std::vector<AblationResult> out;
  for (const auto& c : cases) {
    Model<float> model(with_case(base, c), config.seed);
    train(model, data, config);
    out.push_back({c, evaluate(model, data, Split::test).metrics, model.params().count()});
    if (on_case) on_case(out.back());
  }
  return out;
}

template <typename T>
ParamReport param_report(const Model<T>& model) {
  ParamReport r;
  r.total = model.params().count(true);
  r.buffers = model.params().count(false) - r.total;
  r.by_component = model.params().count_by_component(true);
  return r;
}

template ParamReport param_report(const Model<float>&);
template ParamReport param_report(const Model<double>&);

}  // namespace hsinet
