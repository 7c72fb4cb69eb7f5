#include "adlprune/trainkit.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "adlprune/ops.hpp"

namespace adlprune {

void OptimConfig::validate() const {
  if (!(base_lr > 0.0) || !std::isfinite(base_lr)) {
    throw ConfigError(fmt::format("optim: base_lr must be finite and > 0, got {}", base_lr));
  }
  if (warmup < 1) throw ConfigError(fmt::format("optim: warmup must be >= 1, got {}", warmup));
  if (steps < 0) throw ConfigError(fmt::format("optim: steps must be >= 0, got {}", steps));
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("optim: betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw ConfigError("optim: eps must be > 0");
}

double learning_rate(const OptimConfig& cfg, std::int64_t step) {
  const double t = static_cast<double>(std::max<std::int64_t>(step, 1));
  const double w = static_cast<double>(cfg.warmup);
  return cfg.base_lr * std::min(1.0 / std::sqrt(t), t * std::pow(w, -1.5));
}

double AdamOptimizer::update(ConformerModel& model) {
  const std::int64_t t = step_ + 1;
  const double lr = learning_rate(cfg_, t);
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t));
  for (auto& p : model.parameters()) {
    Tensor& w = *p.tensor;
    if (w.numel() == 0) continue;
    Moments& mom = moments_[p.name];
    if (mom.m.size() != w.numel()) {
      mom.m.assign(w.numel(), 0.0);
      mom.v.assign(w.numel(), 0.0);
    }
    if (!w.has_grad()) continue;  // unused this step: moments stay put
    auto g = w.grad();
    auto x = w.mutable_data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      mom.m[i] = cfg_.beta1 * mom.m[i] + (1.0 - cfg_.beta1) * g[i];
      mom.v[i] = cfg_.beta2 * mom.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      x[i] -= lr * (mom.m[i] / c1) / (std::sqrt(mom.v[i] / c2) + cfg_.eps);
    }
    w.zero_grad();
  }
  step_ = t;
  return lr;
}

void TaskConfig::validate() const {
  if (seq_len < 1) throw ConfigError("task: seq_len must be >= 1");
  if (batch_size < 1) throw ConfigError("task: batch_size must be >= 1");
}

ToyTask::ToyTask(std::uint64_t seed, std::size_t input_dim, std::size_t num_classes,
                 std::size_t seq_len)
    : input_dim_(input_dim),
      num_classes_(num_classes),
      seq_len_(seq_len),
      data_(seed, "data") {
  const RandomStream teacher(seed, "teacher");
  teacher_.resize(num_classes * input_dim);
  for (std::size_t c = 0; c < num_classes; ++c) {
    StreamCursor cur(teacher, c);
    double norm = 0.0;
    for (std::size_t j = 0; j < input_dim; ++j) {
      const double v = cur.normal();
      teacher_[c * input_dim + j] = v;
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < input_dim; ++j) teacher_[c * input_dim + j] /= norm;
  }
  // Triangular taps 1 2 3 2 1, normalized.
  for (std::size_t k = 0; k <= 2 * kRadius; ++k) {
    kernel_.push_back(static_cast<double>(kRadius + 1 - (k > kRadius ? k - kRadius : kRadius - k)));
  }
  double total = 0.0;
  for (double v : kernel_) total += v;
  for (double& v : kernel_) v /= total;
}

std::vector<int> ToyTask::label(std::span<const double> features, std::size_t batch) const {
  const std::size_t T = seq_len_, D = input_dim_, C = num_classes_;
  std::vector<int> labels(batch * T);
  std::vector<double> smooth(D);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < T; ++t) {
      std::fill(smooth.begin(), smooth.end(), 0.0);
      for (std::size_t k = 0; k < kernel_.size(); ++k) {
        const std::int64_t s = static_cast<std::int64_t>(t + k) - static_cast<std::int64_t>(kRadius);
        if (s < 0 || s >= static_cast<std::int64_t>(T)) continue;
        const double* x = features.data() + (b * T + static_cast<std::size_t>(s)) * D;
        for (std::size_t j = 0; j < D; ++j) smooth[j] += kernel_[k] * x[j];
      }
      int best = 0;
      double best_score = -INFINITY;
      for (std::size_t c = 0; c < C; ++c) {
        double score = 0.0;
        for (std::size_t j = 0; j < D; ++j) score += teacher_[c * D + j] * smooth[j];
        if (score > best_score) {
          best_score = score;
          best = static_cast<int>(c);
        }
      }
      labels[b * T + t] = best;
    }
  }
  return labels;
}

Batch ToyTask::generate_batch(const std::string& split, std::uint64_t index,
                              std::size_t batch) const {
  StreamCursor cur(data_.child(split), index);
  std::vector<double> x(batch * seq_len_ * input_dim_);
  for (auto& v : x) v = cur.normal();
  Batch out;
  out.labels = label(x, batch);
  out.features = Tensor::from({batch, seq_len_, input_dim_}, std::move(x));
  return out;
}

LossParts total_loss(ConformerModel& model, const Batch& batch, const MaskMode& mode) {
  LossParts out;
  out.logits = model.forward(batch.features, {mode});
  const std::size_t frames = batch.labels.size();
  out.ce = ops::cross_entropy(ops::reshape(out.logits, {frames, model.config().num_classes}),
                              batch.labels);
  Tensor l2;
  for (auto& p : model.parameters()) {
    if (p.kind != ParamKind::kWeight && p.kind != ParamKind::kAdlRaw) continue;
    if (p.tensor->numel() == 0) continue;
    Tensor sq = ops::sum_squares(*p.tensor);
    l2 = l2.defined() ? ops::add(l2, sq) : sq;
  }
  out.total = ops::add(out.ce, ops::scale(l2, model.config().adl.gamma));
  return out;
}

double l2_penalty_value(const ConformerModel& model) {
  double acc = 0.0;
  for (const auto& p : model.parameters()) {
    if (p.kind != ParamKind::kWeight && p.kind != ParamKind::kAdlRaw) continue;
    for (double v : p.tensor->data()) acc += v * v;
  }
  return model.config().adl.gamma * acc;
}

double frame_accuracy(const Tensor& logits, std::span<const int> labels) {
  const std::size_t C = logits.shape().back();
  const std::size_t n = labels.size();
  if (n * C != logits.numel()) throw ShapeError("frame_accuracy: label count mismatch");
  if (n == 0) return 0.0;
  std::size_t hits = 0;
  auto v = logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = v.subspan(i * C, C);
    const auto best = std::max_element(row.begin(), row.end()) - row.begin();
    if (best == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

double overall_survival(const ConformerModel& model, std::int64_t step) {
  std::size_t surviving = 0, total = 0;
  for (const AdlSite* site : model.adl_sites()) {
    const auto s = site->survival(step);
    surviving += s.surviving;
    total += s.total;
  }
  return total == 0 ? 1.0 : static_cast<double>(surviving) / static_cast<double>(total);
}

StepMetrics train_step(ConformerModel& model, AdamOptimizer& opt, const Batch& batch) {
  const std::int64_t t = opt.step() + 1;
  LossParts loss = total_loss(model, batch, MaskMode::train(t));
  const double value = loss.total.item();
  if (!std::isfinite(value)) {
    throw NumericalError(fmt::format("loss is {} at step {}", value, t));
  }
  StepMetrics m;
  m.step = t;
  m.ce = loss.ce.item();
  m.frame_acc = frame_accuracy(loss.logits, batch.labels);
  m.c_t = model.config().adl.scheduler.at(t);
  backward(loss.total);
  m.lr = opt.update(model);
  m.survival_rate_overall = overall_survival(model, t);
  return m;
}

EvalMetrics evaluate(ConformerModel& model, const ToyTask& task, std::size_t n_batches,
                     std::size_t batch_size, std::int64_t step) {
  const NoGradGuard no_grad;
  EvalMetrics out;
  if (n_batches == 0) return out;
  std::size_t total_frames = 0;
  double acc_sum = 0.0, ce_sum = 0.0;
  for (std::size_t n = 0; n < n_batches; ++n) {
    const Batch b = task.generate_batch("eval", n, batch_size);
    const Tensor logits = model.forward(b.features, {MaskMode::eval(step)});
    const std::size_t frames = b.labels.size();
    ce_sum += ops::cross_entropy(ops::reshape(logits, {frames, task.num_classes()}), b.labels).item() *
              static_cast<double>(frames);
    acc_sum += frame_accuracy(logits, b.labels) * static_cast<double>(frames);
    total_frames += frames;
  }
  out.frame_accuracy = acc_sum / static_cast<double>(total_frames);
  out.ce = ce_sum / static_cast<double>(total_frames);
  return out;
}

}  // namespace adlprune
