#include "q4fg/distill.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <random>
#include <stdexcept>

#include "q4fg/ops.hpp"

namespace q4fg {

std::string to_string(AttVariant v) { return v == AttVariant::prenorm ? "prenorm" : "normalized"; }

AttVariant att_variant_from_string(const std::string& s) {
  if (s == "normalized" || s == "att") return AttVariant::normalized;
  if (s == "prenorm" || s == "att_star") return AttVariant::prenorm;
  throw std::invalid_argument("unknown attention variant '" + s + "' (expected normalized or prenorm)");
}

void KDConfig::validate() const {
  for (double w : {w_logit, w_att, w_rep, w_task})
    if (!(w >= 0.0) || !std::isfinite(w)) throw std::invalid_argument("KD weights must be finite and non-negative");
  if (w_logit + w_att + w_rep + w_task <= 0.0) throw std::invalid_argument("at least one KD weight must be positive");
  if (!(temperature > 0.0)) throw std::invalid_argument("KD temperature must be positive");
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (epochs < 1 && steps == 0) throw std::invalid_argument("epochs must be at least 1");
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout must lie in [0, 1)");
  if (eval_every == 0) throw std::invalid_argument("eval_every must be positive");
  strategy.validate();
}

TaskData TaskData::classification(ClassificationData train, ClassificationData eval) {
  TaskData d;
  d.kind = TaskKind::classification;
  d.train_set = std::move(train);
  d.eval_set = std::move(eval);
  return d;
}

TaskData TaskData::language_model(std::vector<std::int32_t> train, std::vector<std::int32_t> eval,
                                  std::size_t window) {
  if (window == 0) throw std::invalid_argument("language-model window must be positive");
  if (train.size() < window + 1) throw std::invalid_argument("training stream is shorter than one window");
  TaskData d;
  d.kind = TaskKind::language_model;
  d.train_stream = std::move(train);
  d.eval_stream = std::move(eval);
  d.window = window;
  return d;
}

std::vector<std::size_t> flat_layer_map(const LayerMapping& mapping, std::size_t teacher_encoder_layers) {
  std::vector<std::size_t> out = mapping.encoder;
  for (auto d : mapping.decoder) out.push_back(teacher_encoder_layers + d);
  return out;
}

namespace {

template <typename T>
BasicTensor<T> output_logits(const ForwardResult<T>& r, TaskKind kind) {
  if (kind == TaskKind::classification) {
    if (!r.class_logits.defined()) throw std::invalid_argument("classification loss needs a classification head");
    return r.class_logits;
  }
  const auto& s = r.logits.shape();
  return reshape(r.logits, Shape{s[0] * s[1], s[2]});
}

std::vector<std::uint8_t> allowed_positions(const Shape& shape, MaskMode mode) {
  if (mode != MaskMode::causal) return {};
  const std::size_t tq = shape[2], tk = shape[3];
  std::vector<std::uint8_t> inc(shape_numel(shape));
  for (std::size_t i = 0; i < inc.size(); ++i) {
    const std::size_t k = i % tk, q = (i / tk) % tq;
    inc[i] = attention_allowed(mode, q, k);
  }
  return inc;
}

}  // namespace

template <typename T>
KDLoss<T> kd_loss(const ForwardResult<T>& student, const ForwardResult<T>& teacher, const KDConfig& cfg,
                  const BatchTargets& targets, std::span<const std::size_t> layer_map) {
  cfg.validate();
  KDLoss<T> out;
  std::vector<BasicTensor<T>> terms;
  const auto s_logits = output_logits(student, targets.kind);

  if (cfg.w_logit > 0.0) {
    const auto kl = soft_target_kl(s_logits, output_logits(teacher, targets.kind), cfg.temperature);
    out.logit = static_cast<double>(kl.item());
    terms.push_back(scale(kl, static_cast<T>(cfg.w_logit)));
  }

  if (cfg.w_att > 0.0 || cfg.w_rep > 0.0) {
    const std::size_t n = student.layers.size();
    std::vector<std::size_t> identity(n);
    std::iota(identity.begin(), identity.end(), 0);
    const std::span<const std::size_t> map = layer_map.empty() ? std::span<const std::size_t>(identity) : layer_map;
    if (map.size() != n) {
      throw std::invalid_argument("layer mapping covers " + std::to_string(map.size()) + " layers but the student has " +
                                  std::to_string(n) + "; mapping undefined for student layer " +
                                  std::to_string(std::min(map.size(), n)));
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (map[i] >= teacher.layers.size()) {
        throw std::invalid_argument("layer mapping undefined for student layer " + std::to_string(i));
      }
    }
    const T inv = static_cast<T>(1.0 / static_cast<double>(n));
    if (cfg.w_att > 0.0) {
      BasicTensor<T> acc;
      for (std::size_t i = 0; i < n; ++i) {
        const auto& sl = student.layers[i];
        const auto& tl = teacher.layers[map[i]];
        const bool pre = cfg.att == AttVariant::prenorm;
        const auto& sa = pre ? sl.scores : sl.probs;
        const auto& ta = pre ? tl.scores : tl.probs;
        const auto inc = allowed_positions(sa.shape(), sl.mask);
        const auto term = mse(sa, ta, inc);
        acc = acc.defined() ? add(acc, term) : term;
      }
      acc = scale(acc, inv);
      out.att = static_cast<double>(acc.item());
      terms.push_back(scale(acc, static_cast<T>(cfg.w_att)));
    }
    if (cfg.w_rep > 0.0) {
      BasicTensor<T> acc;
      for (std::size_t i = 0; i < n; ++i) {
        const auto term = mse(student.layers[i].hidden, teacher.layers[map[i]].hidden);
        acc = acc.defined() ? add(acc, term) : term;
      }
      acc = scale(acc, inv);
      out.rep = static_cast<double>(acc.item());
      terms.push_back(scale(acc, static_cast<T>(cfg.w_rep)));
    }
  }

  if (cfg.w_task > 0.0) {
    const auto ce = cross_entropy(s_logits, targets.targets);
    out.task = static_cast<double>(ce.item());
    terms.push_back(scale(ce, static_cast<T>(cfg.w_task)));
  }

  out.total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) out.total = add(out.total, terms[i]);
  return out;
}

template KDLoss<float> kd_loss<float>(const ForwardResult<float>&, const ForwardResult<float>&, const KDConfig&,
                                      const BatchTargets&, std::span<const std::size_t>);
template KDLoss<double> kd_loss<double>(const ForwardResult<double>&, const ForwardResult<double>&, const KDConfig&,
                                        const BatchTargets&, std::span<const std::size_t>);

void write_train_log(std::ostream& os, std::span<const TrainLogRow> rows) {
  os << kTrainLogHeader << '\n';
  os << std::setprecision(9);
  for (const auto& r : rows) {
    os << r.step << ',' << r.loss << ',' << r.loss_logit << ',' << r.loss_att << ',' << r.loss_rep << ','
       << r.loss_task << ',' << r.eval_metric << '\n';
  }
}

double evaluate(const Transformer<float>& model, const TaskData& data, const QuantStrategy& strategy) {
  if (data.kind == TaskKind::language_model) return perplexity(model, data.eval_stream, strategy, data.window);
  const auto& set = data.eval_set;
  if (set.size() == 0) throw std::invalid_argument("evaluation set is empty");
  ForwardOptions opt;
  opt.strategy = strategy;
  opt.mode = Mode::eval;
  std::size_t correct = 0;
  constexpr std::size_t kBatch = 64;
  std::vector<std::size_t> idx;
  for (std::size_t b0 = 0; b0 < set.size(); b0 += kBatch) {
    idx.resize(std::min(kBatch, set.size() - b0));
    std::iota(idx.begin(), idx.end(), b0);
    const auto res = forward(model, set.batch(idx), opt);
    if (!res.class_logits.defined()) throw std::invalid_argument("classification eval needs a classification head");
    const std::size_t c = res.class_logits.dim(1);
    auto z = res.class_logits.data();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto row = z.subspan(i * c, c);
      const auto pred = static_cast<std::int32_t>(std::max_element(row.begin(), row.end()) - row.begin());
      correct += pred == set.labels[idx[i]];
    }
  }
  return static_cast<double>(correct) / static_cast<double>(set.size());
}

std::size_t best_row(std::span<const TrainLogRow> rows, bool higher_is_better) {
  if (rows.empty()) throw std::invalid_argument("empty training log");
  std::size_t best = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const bool better = higher_is_better ? rows[i].eval_metric > rows[best].eval_metric
                                         : rows[i].eval_metric < rows[best].eval_metric;
    if (better) best = i;
  }
  return best;
}

std::map<std::string, SparsityMask> magnitude_masks(const Transformer<float>& model, const SparsityConfig& cfg) {
  std::map<std::string, SparsityMask> out;
  for (const auto* l : model.linears()) {
    if (!l->quantizable) continue;
    auto m = l1_mask(l->weight, cfg.sparsity, cfg.structure, cfg.pattern);
    out.emplace(l->weight_name(), std::move(m));
  }
  return out;
}

namespace {

class BatchSampler {
 public:
  BatchSampler(const TaskData& data, std::size_t batch, std::uint64_t seed) : data_(data), batch_(batch), rng_(seed) {}

  std::size_t steps_per_epoch() const {
    if (data_.kind == TaskKind::classification) return (data_.train_set.size() + batch_ - 1) / batch_;
    return std::max<std::size_t>(1, data_.train_stream.size() / (batch_ * data_.window));
  }

  std::pair<ModelInput, BatchTargets> next() {
    BatchTargets t;
    t.kind = data_.kind;
    if (data_.kind == TaskKind::classification) {
      const auto& set = data_.train_set;
      if (set.size() == 0) throw std::invalid_argument("training set is empty");
      std::vector<std::size_t> idx;
      while (idx.size() < std::min(batch_, set.size())) {
        if (cursor_ >= order_.size()) {
          order_.resize(set.size());
          std::iota(order_.begin(), order_.end(), 0);
          std::shuffle(order_.begin(), order_.end(), rng_);
          cursor_ = 0;
        }
        idx.push_back(order_[cursor_++]);
      }
      for (auto i : idx) t.targets.push_back(set.labels[i]);
      return {set.batch(idx), std::move(t)};
    }
    const auto& s = data_.train_stream;
    const std::size_t w = data_.window;
    std::uniform_int_distribution<std::size_t> start(0, s.size() - w - 1);
    ModelInput in;
    in.batch = batch_;
    in.seq = w;
    for (std::size_t b = 0; b < batch_; ++b) {
      const std::size_t p = start(rng_);
      in.tokens.insert(in.tokens.end(), s.begin() + static_cast<std::ptrdiff_t>(p),
                       s.begin() + static_cast<std::ptrdiff_t>(p + w));
      t.targets.insert(t.targets.end(), s.begin() + static_cast<std::ptrdiff_t>(p + 1),
                       s.begin() + static_cast<std::ptrdiff_t>(p + w + 1));
    }
    return {std::move(in), std::move(t)};
  }

 private:
  const TaskData& data_;
  std::size_t batch_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

TrainResult run_training(const Transformer<float>& init, const Transformer<float>* teacher, const TaskData& data,
                         const TrainConfig& cfg, const KDConfig& kd, const LayerMapping* mapping) {
  cfg.validate();
  kd.validate();

  auto student = init.clone();
  student.config.dropout = cfg.dropout;
  student.order = cfg.order;
  for (auto* l : student.linears()) l->frozen.reset();
  student.set_requires_grad(true);

  std::optional<Transformer<float>> frozen_teacher;
  if (teacher != nullptr) {
    frozen_teacher = teacher->clone();
    frozen_teacher->config.dropout = 0.0;
    frozen_teacher->set_requires_grad(false);
  }

  std::map<std::string, MovementPruner> pruners;
  if (cfg.sparsity) {
    student.masks = magnitude_masks(frozen_teacher ? *frozen_teacher : student, *cfg.sparsity);
    if (cfg.sparsity->origin == MaskOrigin::movement) {
      for (auto& [name, mask] : student.masks) {
        pruners.emplace(name, MovementPruner(mask, cfg.sparsity->sparsity, cfg.sparsity->score_lr,
                                             cfg.sparsity->refresh_every));
        mask.origin = MaskOrigin::movement;
      }
    }
  }

  std::vector<std::size_t> layer_map;
  if (mapping != nullptr && frozen_teacher) layer_map = flat_layer_map(*mapping, frozen_teacher->config.encoder_layers);

  BatchSampler sampler(data, cfg.batch_size, cfg.seed);
  std::mt19937_64 dropout_rng(cfg.seed ^ 0x9E3779B97F4A7C15ull);
  const std::size_t total_steps = cfg.steps > 0 ? cfg.steps : cfg.epochs * sampler.steps_per_epoch();

  AdamConfig adam = cfg.adam;
  adam.lr = cfg.lr;
  AdamState state;
  auto params = student.parameters();

  ForwardOptions teacher_opt;
  teacher_opt.mode = Mode::eval;

  auto batch_loss = [&](const ModelInput& in, const BatchTargets& targets, Mode mode) {
    ForwardOptions opt;
    opt.strategy = cfg.strategy;
    opt.mode = mode;
    opt.rng = &dropout_rng;
    const auto s_out = forward(student, in, opt);
    if (frozen_teacher) {
      const auto t_out = forward(*frozen_teacher, in, teacher_opt);
      return kd_loss(s_out, t_out, kd, targets, layer_map);
    }
    KDConfig task_only;
    task_only.w_logit = 0.0;
    task_only.w_task = 1.0;
    return kd_loss(s_out, s_out, task_only, targets);
  };

  TrainResult result;
  auto log_row = [&](std::size_t step, const KDLoss<float>& l) {
    TrainLogRow row{step, static_cast<double>(l.total.item()), l.logit, l.att, l.rep, l.task,
                    evaluate(student, data, cfg.strategy)};
    result.log.push_back(row);
    if (result.log.size() == 1 || best_row(result.log, data.higher_is_better()) == result.log.size() - 1) {
      result.best = student.clone();
      result.best_step = step;
      result.best_metric = row.eval_metric;
    }
  };

  auto [first_in, first_targets] = sampler.next();
  log_row(0, batch_loss(first_in, first_targets, Mode::eval));

  for (std::size_t step = 1; step <= total_steps; ++step) {
    auto [in, targets] = step == 1 ? std::pair{std::move(first_in), std::move(first_targets)} : sampler.next();
    KDLoss<float> loss;
    {
      Tape tape;
      TapeScope<float> scope(tape);
      loss = batch_loss(in, targets, Mode::train);
      const double value = static_cast<double>(loss.total.item());
      if (!std::isfinite(value)) throw TrainingError("non-finite loss at step " + std::to_string(step));
      tape.backward(loss.total);
    }
    for (auto& [name, pruner] : pruners) {
      const auto w = student.parameter(name);
      if (!w.has_grad()) continue;
      pruner.update(w.data(), w.grad());
      student.masks[name] = pruner.mask();
    }
    adam_step<float>(params, state, adam);
    student.zero_grad();
    if (step % cfg.eval_every == 0 || step == total_steps) log_row(step, loss);
  }

  result.final_model = student;
  return result;
}

}  // namespace

TrainResult qat_train(const Transformer<float>& student, const Transformer<float>& teacher, const TaskData& data,
                      const TrainConfig& cfg, const KDConfig& kd, const LayerMapping* mapping) {
  return run_training(student, &teacher, data, cfg, kd, mapping);
}

TrainResult train_supervised(const Transformer<float>& model, const TaskData& data, const TrainConfig& cfg) {
  KDConfig task_only;
  task_only.w_logit = 0.0;
  task_only.w_task = 1.0;
  return run_training(model, nullptr, data, cfg, task_only, nullptr);
}

}  // namespace q4fg
