#pragma once

// Training: cosine schedule with linear warm-up, label-smoothed cross-entropy,
// AdamW, and the two training stages (codebook grounding, head fitting).

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "codebook.hpp"
#include "errors.hpp"
#include "featurestore.hpp"
#include "head.hpp"
#include "numerics.hpp"
#include "rng.hpp"

namespace protoquant {

enum class Trainable : std::uint8_t { Weights = 0, WeightsAndCodes = 1 };

struct TrainConfig {
  double base_lr = 0.05;
  double weight_decay = 5e-4;
  std::size_t epochs = 30;
  std::size_t warmup_epochs = 5;
  double min_lr = 1e-6;
  std::size_t batch_size = 1024;
  double label_smoothing = 0.1;
  double alpha = 0.1;
  /// 0 means "10 x number of classes".
  std::size_t codebook_size = 0;
  std::uint64_t seed = 40;
  TemperatureMode temperature_mode = TemperatureMode::Divide;
  SoftmaxSupport softmax_support = SoftmaxSupport::All;
  Trainable trainable = Trainable::Weights;
  bool normalize_codes_each_step = false;

  void validate() const {
    if (epochs > 0 && warmup_epochs >= epochs) throw DomainError("warmup_epochs must be < epochs");
    if (!(min_lr <= base_lr) || min_lr < 0.0) throw DomainError("need 0 <= min_lr <= base_lr");
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) {
      throw DomainError("label_smoothing must lie in [0, 1)");
    }
    if (batch_size == 0) throw DomainError("batch_size must be positive");
    if (!(weight_decay >= 0.0)) throw DomainError("weight_decay must be >= 0");
    logit_scale(alpha, temperature_mode);
  }

  std::size_t resolved_codebook_size(std::size_t classes) const {
    return codebook_size != 0 ? codebook_size : 10 * classes;
  }

  /// Stable key=value rendering, stored in checkpoints.
  std::string to_text() const {
    std::ostringstream out;
    out.precision(17);
    out << "base_lr=" << base_lr << "\nweight_decay=" << weight_decay << "\nepochs=" << epochs
        << "\nwarmup_epochs=" << warmup_epochs << "\nmin_lr=" << min_lr
        << "\nbatch_size=" << batch_size << "\nlabel_smoothing=" << label_smoothing
        << "\nalpha=" << alpha << "\ncodebook_size=" << codebook_size << "\nseed=" << seed
        << "\ntemperature_mode="
        << (temperature_mode == TemperatureMode::Divide ? "divide" : "multiply")
        << "\nsoftmax_support=" << (softmax_support == SoftmaxSupport::All ? "all" : "active")
        << "\ntrainable=" << (trainable == Trainable::Weights ? "w" : "w+codes")
        << "\nnormalize_codes_each_step=" << (normalize_codes_each_step ? 1 : 0) << "\n";
    return out.str();
  }
};

/// Linear warm-up from min_lr to base_lr, then cosine decay back to min_lr.
inline double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps,
                    const TrainConfig& cfg) {
  if (step >= total_steps) throw DomainError("lr_at: step out of range");
  if (warmup_steps >= total_steps) throw DomainError("lr_at: warm-up must be shorter than training");
  if (step < warmup_steps) {
    return cfg.min_lr + (cfg.base_lr - cfg.min_lr) * static_cast<double>(step) /
                            static_cast<double>(warmup_steps);
  }
  const double t = static_cast<double>(step - warmup_steps) /
                   static_cast<double>(total_steps - warmup_steps);
  return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * t));
}

struct LossAndGrad {
  double loss = 0.0;
  Vector grad;
};

/// Cross-entropy against (1 - eps) * onehot + eps / k.
inline LossAndGrad ce_smoothed(std::span<const double> logits, std::size_t label, double eps) {
  const std::size_t k = logits.size();
  if (label >= k) throw DomainError("ce_smoothed: label out of range");
  const Vector probs = softmax_sharp(logits, 1.0);
  const double top = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - top);
  const double log_z = top + std::log(sum);
  LossAndGrad out{0.0, Vector(k)};
  for (std::size_t c = 0; c < k; ++c) {
    const double target = (c == label ? 1.0 - eps : 0.0) + eps / static_cast<double>(k);
    out.loss -= target * (logits[c] - log_z);
    out.grad[c] = probs[c] - target;
  }
  return out;
}

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Vector m;
  Vector v;
  std::uint64_t t = 0;

  bool operator==(const AdamState&) const = default;
};

/// Decoupled weight decay (p -= lr * wd * p) followed by the bias-corrected
/// adaptive moment update.
inline void adamw_step(std::span<double> params, std::span<const double> grads, AdamState& state,
                       double lr, double weight_decay, const AdamHyper& hp = {}) {
  if (params.size() != grads.size()) throw ShapeError("adamw_step: params and grads differ in size");
  if (state.m.empty() && state.t == 0) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size()) throw ShapeError("adamw_step: state shape mismatch");
  ++state.t;
  const double t = static_cast<double>(state.t);
  const double bc1 = 1.0 - std::pow(hp.beta1, t);
  const double bc2 = 1.0 - std::pow(hp.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i] -= lr * weight_decay * params[i];
    state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * grads[i];
    state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * grads[i] * grads[i];
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + hp.eps);
  }
}

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_acc = std::numeric_limits<double>::quiet_NaN();
  double val_acc = std::numeric_limits<double>::quiet_NaN();
  std::size_t dead_codes = 0;

  bool operator==(const EpochRecord& o) const {
    auto same = [](double a, double b) { return a == b || (std::isnan(a) && std::isnan(b)); };
    return epoch == o.epoch && same(lr, o.lr) && same(train_loss, o.train_loss) &&
           same(train_acc, o.train_acc) && same(val_acc, o.val_acc) && dead_codes == o.dead_codes;
  }
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  /// Epoch (1-based) whose checkpoint was returned; 0 = the initial state.
  std::size_t selected_epoch = 0;
  std::vector<std::size_t> validation_indices;

  bool operator==(const TrainHistory&) const = default;

  /// One comma-separated line per epoch, with a header.
  std::string to_csv() const {
    std::ostringstream out;
    out.precision(10);
    out << "epoch,lr,train_loss,train_acc,val_acc,dead_codes\n";
    for (const auto& r : epochs) {
      out << r.epoch << ',' << r.lr << ',' << r.train_loss << ',' << r.train_acc << ','
          << r.val_acc << ',' << r.dead_codes << '\n';
    }
    return out.str();
  }
};

/// Optional per-step observer, used by tests to audit invariants mid-run.
struct TrainHooks {
  std::function<void(const HeadModel&)> on_head_step;
  std::function<void(const Codebook&)> on_codebook_step;
};

namespace detail {

struct Schedule {
  std::size_t batch = 0;
  std::size_t steps_per_epoch = 0;
  std::size_t total = 0;
  std::size_t warmup = 0;
};

inline Schedule make_schedule(std::size_t n_train, const TrainConfig& cfg) {
  Schedule s;
  s.batch = std::min(cfg.batch_size, n_train);
  s.steps_per_epoch = (n_train + s.batch - 1) / s.batch;
  s.total = s.steps_per_epoch * cfg.epochs;
  s.warmup = s.steps_per_epoch * cfg.warmup_epochs;
  return s;
}

inline void normalize_rows(Matrix& m) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const double n = std::max(norm(row), kNormFloor);
    for (double& v : row) v /= n;
  }
}

}  // namespace detail

/// Percentage of samples whose pretrained-head prediction on the GAP of the
/// quantized feature map matches the label.
inline double quantized_probe_accuracy(const FeatureDataset& ds, const Codebook& cb,
                                       std::span<const std::size_t> samples) {
  if (!ds.pretrained_head || samples.empty()) return std::numeric_limits<double>::quiet_NaN();
  const NormalizedCodes unit(cb);
  std::size_t correct = 0;
  Vector pooled(ds.dim);
  Vector z(ds.dim);
  for (std::size_t s : samples) {
    std::fill(pooled.begin(), pooled.end(), 0.0);
    for (std::size_t loc = 0; loc < ds.locations(); ++loc) {
      auto raw = ds.location(s, loc);
      std::copy(raw.begin(), raw.end(), z.begin());
      auto code = cb.codes.row(unit.assign(z));
      for (std::size_t c = 0; c < ds.dim; ++c) pooled[c] += code[c];
    }
    for (double& v : pooled) v /= static_cast<double>(ds.locations());
    correct += pretrained_predict(*ds.pretrained_head, pooled) == static_cast<std::size_t>(ds.labels[s]);
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(samples.size());
}

/// Percentage of samples whose pretrained head on GAP features (no
/// quantization) predicts the label.
inline double probe_accuracy(const FeatureDataset& ds, std::span<const std::size_t> samples) {
  if (!ds.pretrained_head || samples.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::size_t correct = 0;
  for (std::size_t s : samples) {
    const Vector pooled = global_average_pool(ds.feature_map(s));
    correct += pretrained_predict(*ds.pretrained_head, pooled) == static_cast<std::size_t>(ds.labels[s]);
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(samples.size());
}

/// Top-1 percentage of the interpretable head over the given samples.
inline double head_accuracy(const FeatureDataset& ds, const HeadModel& model,
                            std::span<const std::size_t> samples) {
  if (samples.empty()) throw DomainError("head_accuracy: no samples");
  std::size_t correct = 0;
  for (std::size_t s : samples) {
    const auto res = forward(ds.feature_map(s), model);
    correct += predict(res.logits) == static_cast<std::size_t>(ds.labels[s]);
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(samples.size());
}

inline std::vector<std::size_t> all_indices(const FeatureDataset& ds) {
  std::vector<std::size_t> out(ds.n_samples);
  std::iota(out.begin(), out.end(), std::size_t{0});
  return out;
}

struct Stage1Result {
  Codebook codebook;
  TrainHistory history;
};

/// Unsupervised grounding: orthogonal init, then AdamW on the codebook loss.
/// The pretrained head, when present, only scores checkpoints.
inline Stage1Result stage1_train(const FeatureDataset& ds, const TrainConfig& cfg,
                                 const TrainHooks& hooks = {}) {
  cfg.validate();
  ds.validate();
  const SplitIndices split = resolve_split(ds, cfg.seed);
  if (split.train.empty()) throw DomainError("stage1_train: empty training split");
  const std::size_t n_codes = cfg.resolved_codebook_size(ds.classes);

  Codebook cb(orthogonal_rows(n_codes, ds.dim, mix_seed(cfg.seed, 11)));
  Stage1Result result{cb, {}};
  result.history.validation_indices = split.validation;
  if (cfg.epochs == 0) return result;

  const auto sched = detail::make_schedule(split.train.size(), cfg);
  Rng rng(mix_seed(cfg.seed, 12));
  std::vector<std::size_t> order = split.train;
  AdamState adam;
  const bool scored = ds.pretrained_head.has_value() && !split.validation.empty();
  double best_val = -1.0;

  const std::size_t hw = ds.locations();
  std::vector<double> widened;
  std::vector<std::span<const double>> positions;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(std::span(order));
    std::vector<std::size_t> usage(n_codes, 0);
    double loss_sum = 0.0;
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.lr = lr_at(step, sched.total, sched.warmup, cfg);
    for (std::size_t b = 0; b < sched.steps_per_epoch; ++b, ++step) {
      const std::size_t begin = b * sched.batch;
      const std::size_t end = std::min(begin + sched.batch, order.size());
      widened.resize((end - begin) * hw * ds.dim);
      positions.clear();
      for (std::size_t i = begin; i < end; ++i) {
        const float* src = ds.features.data() + order[i] * hw * ds.dim;
        double* dst = widened.data() + (i - begin) * hw * ds.dim;
        for (std::size_t e = 0; e < hw * ds.dim; ++e) dst[e] = src[e];
        for (std::size_t loc = 0; loc < hw; ++loc) positions.emplace_back(dst + loc * ds.dim, ds.dim);
      }
      const auto g = codebook_grad_over(positions, positions.size(), cb);
      for (std::size_t m = 0; m < n_codes; ++m) usage[m] += g.counts[m];
      loss_sum += g.loss;
      const double lr = lr_at(step, sched.total, sched.warmup, cfg);
      // Codes are not weight-decayed: decay would fight the L2 pull.
      adamw_step(cb.codes.data(), g.grad.data(), adam, lr, 0.0);
      if (cfg.normalize_codes_each_step) detail::normalize_rows(cb.codes);
      if (hooks.on_codebook_step) hooks.on_codebook_step(cb);
    }
    rec.train_loss = loss_sum / static_cast<double>(sched.steps_per_epoch);
    rec.dead_codes = static_cast<std::size_t>(std::count(usage.begin(), usage.end(), 0));
    if (ds.pretrained_head) {
      rec.train_acc = quantized_probe_accuracy(ds, cb, split.train);
      rec.val_acc = quantized_probe_accuracy(ds, cb, split.validation);
    }
    result.history.epochs.push_back(rec);
    // Ties keep the later checkpoint.
    if (!scored || rec.val_acc >= best_val) {
      best_val = scored ? rec.val_acc : best_val;
      result.codebook = cb;
      result.history.selected_epoch = rec.epoch;
    }
  }
  return result;
}

struct Stage2Result {
  HeadModel model;
  TrainHistory history;
};

/// Supervised head fitting from a given starting model. Trains W (and the
/// codes when cfg.trainable says so) on mean smoothed cross-entropy, clamps W
/// at zero after every step, and keeps masked entries untouched.
inline Stage2Result train_head(const FeatureDataset& ds, HeadModel model, const TrainConfig& cfg,
                               const TrainHooks& hooks = {}) {
  cfg.validate();
  ds.validate();
  model.validate();
  if (model.dim() != ds.dim) throw ShapeError("train_head: codebook dim != dataset dim");
  if (model.num_classes() != ds.classes) throw ShapeError("train_head: class count mismatch");
  const SplitIndices split = resolve_split(ds, cfg.seed);
  if (split.train.empty()) throw DomainError("train_head: empty training split");

  Stage2Result result{model, {}};
  result.history.validation_indices = split.validation;
  if (cfg.epochs == 0) return result;

  const bool train_codes = cfg.trainable == Trainable::WeightsAndCodes;
  const std::size_t k = model.num_classes();
  const std::size_t n_codes = model.concepts();

  // With frozen codes the presence scores never change: compute them once.
  std::vector<Vector> cached;
  if (!train_codes) {
    cached.resize(ds.n_samples);
    for (std::size_t s = 0; s < ds.n_samples; ++s) {
      cached[s] = forward(ds.feature_map(s), model).activation.s;
    }
  }
  auto accuracy_on = [&](std::span<const std::size_t> samples) {
    if (samples.empty()) return std::numeric_limits<double>::quiet_NaN();
    if (train_codes) return head_accuracy(ds, model, samples);
    std::size_t correct = 0;
    for (std::size_t s : samples) {
      correct += predict(class_logits(cached[s], model)) == static_cast<std::size_t>(ds.labels[s]);
    }
    return 100.0 * static_cast<double>(correct) / static_cast<double>(samples.size());
  };

  const auto sched = detail::make_schedule(split.train.size(), cfg);
  Rng rng(mix_seed(cfg.seed, 22));
  std::vector<std::size_t> order = split.train;
  AdamState adam_w;
  AdamState adam_codes;
  const bool scored = !split.validation.empty();
  double best_val = -1.0;
  std::size_t step = 0;
  Matrix grad_w(k, n_codes);
  Matrix grad_codes(n_codes, model.dim());
  std::vector<double> frozen_values;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(std::span(order));
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.lr = lr_at(step, sched.total, sched.warmup, cfg);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < sched.steps_per_epoch; ++b, ++step) {
      const std::size_t begin = b * sched.batch;
      const std::size_t end = std::min(begin + sched.batch, order.size());
      const double inv_batch = 1.0 / static_cast<double>(end - begin);
      std::fill(grad_w.data().begin(), grad_w.data().end(), 0.0);
      std::fill(grad_codes.data().begin(), grad_codes.data().end(), 0.0);
      for (std::size_t i = begin; i < end; ++i) {
        const std::size_t s = order[i];
        const auto label = static_cast<std::size_t>(ds.labels[s]);
        if (train_codes) {
          const Tensor3 feat = ds.feature_map(s);
          const ForwardResult fwd = forward(feat, model);
          const LossAndGrad lg = ce_smoothed(fwd.logits, label, cfg.label_smoothing);
          loss_sum += lg.loss * inv_batch;
          correct += predict(fwd.logits) == label;
          const HeadGradients hg = head_backward(feat, model, fwd.activation, lg.grad);
          for (std::size_t e = 0; e < grad_w.size(); ++e) grad_w.data()[e] += hg.weights.data()[e] * inv_batch;
          for (std::size_t e = 0; e < grad_codes.size(); ++e) grad_codes.data()[e] += hg.codes.data()[e] * inv_batch;
        } else {
          const Vector& sv = cached[s];
          const Vector logits = class_logits(sv, model);
          const LossAndGrad lg = ce_smoothed(logits, label, cfg.label_smoothing);
          loss_sum += lg.loss * inv_batch;
          correct += predict(logits) == label;
          for (std::size_t c = 0; c < k; ++c) {
            for (std::size_t m = 0; m < n_codes; ++m) {
              if (model.classes.contributes(c, m)) grad_w(c, m) += lg.grad[c] * sv[m] * inv_batch;
            }
          }
        }
      }
      const double lr = lr_at(step, sched.total, sched.warmup, cfg);
      // Masked or neutralized entries keep their stored values untouched.
      auto w = model.classes.weights.data();
      frozen_values.assign(w.begin(), w.end());
      adamw_step(w, grad_w.data(), adam_w, lr, cfg.weight_decay);
      for (std::size_t c = 0; c < k; ++c) {
        for (std::size_t m = 0; m < n_codes; ++m) {
          double& v = model.classes.weights(c, m);
          if (!model.classes.contributes(c, m)) v = frozen_values[c * n_codes + m];
          if (v < 0.0) v = 0.0;
        }
      }
      if (train_codes) {
        adamw_step(model.codebook.codes.data(), grad_codes.data(), adam_codes, lr, 0.0);
        if (cfg.normalize_codes_each_step) detail::normalize_rows(model.codebook.codes);
      }
      if (hooks.on_head_step) hooks.on_head_step(model);
    }
    rec.train_loss = loss_sum / static_cast<double>(sched.steps_per_epoch);
    rec.train_acc = 100.0 * static_cast<double>(correct) / static_cast<double>(order.size());
    rec.val_acc = accuracy_on(split.validation);
    result.history.epochs.push_back(rec);
    if (!scored || rec.val_acc >= best_val) {
      best_val = scored ? rec.val_acc : best_val;
      result.model = model;
      result.history.selected_epoch = rec.epoch;
    }
  }
  return result;
}

/// Non-negative uniform [0, 1/M] initialization of the class matrix.
inline ClassMatrix initial_class_matrix(std::size_t classes, std::size_t concepts,
                                        std::uint64_t seed) {
  Rng rng(mix_seed(seed, 21));
  Matrix w(classes, concepts);
  for (double& v : w.data()) v = rng.uniform() / static_cast<double>(concepts);
  return ClassMatrix(std::move(w));
}

/// Stage 2: fresh class matrix on top of a (frozen by default) codebook.
inline Stage2Result stage2_train(const FeatureDataset& ds, const Codebook& codebook,
                                 const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  if (codebook.dim() != ds.dim) throw ShapeError("stage2_train: codebook dim != dataset dim");
  HeadModel model;
  model.codebook = codebook;
  model.classes = initial_class_matrix(ds.classes, codebook.size(), cfg.seed);
  model.alpha = cfg.alpha;
  model.temperature_mode = cfg.temperature_mode;
  model.softmax_support = cfg.softmax_support;
  return train_head(ds, std::move(model), cfg, hooks);
}

}  // namespace protoquant
