#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "q4fg/adam.hpp"
#include "q4fg/data.hpp"
#include "q4fg/model.hpp"
#include "q4fg/sparsity.hpp"

namespace q4fg {

/// Att aligns attention probabilities; Att★ (prenorm) aligns pre-softmax scores.
enum class AttVariant { normalized, prenorm };

std::string to_string(AttVariant v);
AttVariant att_variant_from_string(const std::string& s);

struct KDConfig {
  double w_logit = 1.0;
  double w_att = 0.0;
  double w_rep = 0.0;
  double w_task = 0.0;
  AttVariant att = AttVariant::normalized;
  double temperature = 1.0;

  void validate() const;
};

enum class TaskKind { classification, language_model };

/// Supervision for one batch. Classification distills `class_logits` and uses
/// `targets` as labels; language modeling distills token logits and uses
/// `targets` as next-token ids (kIgnoreTarget skips a position).
struct BatchTargets {
  TaskKind kind = TaskKind::classification;
  std::vector<std::int32_t> targets;
};

template <typename T>
struct KDLoss {
  BasicTensor<T> total;
  double logit = 0.0;
  double att = 0.0;
  double rep = 0.0;
  double task = 0.0;
};

/// Student layer i (encoder layers, then decoder layers) is aligned with
/// teacher layer map[i] in the same flat numbering.
std::vector<std::size_t> flat_layer_map(const LayerMapping& mapping, std::size_t teacher_encoder_layers);

/// w_logit * T^2 * KL(teacher || student) at temperature T
/// + w_att * mean over layers of the attention MSE (masked positions excluded)
/// + w_rep * mean over layers of the hidden-state MSE
/// + w_task * cross entropy against the batch targets.
/// Terms with zero weight are not evaluated. `layer_map` empty means identity.
template <typename T>
KDLoss<T> kd_loss(const ForwardResult<T>& student, const ForwardResult<T>& teacher, const KDConfig& cfg,
                  const BatchTargets& targets, std::span<const std::size_t> layer_map = {});

struct SparsityConfig {
  double sparsity = 0.5;
  MaskStructure structure = MaskStructure::pair_nm;
  std::optional<NmPattern> pattern = NmPattern{2, 4};
  MaskOrigin origin = MaskOrigin::teacher_magnitude;
  double score_lr = 1e-2;       ///< movement pruning only
  std::size_t refresh_every = 1;  ///< movement pruning only
};

struct TrainConfig {
  double lr = 1e-3;
  std::size_t epochs = 1;
  std::size_t steps = 0;  ///< overrides epochs when > 0
  std::size_t batch_size = 32;
  double dropout = 0.0;
  std::uint64_t seed = 0;
  AdamConfig adam;  ///< lr is taken from `lr`
  QuantStrategy strategy;
  std::optional<SparsityConfig> sparsity;
  CompositionOrder order = CompositionOrder::prune_then_quant;
  std::size_t eval_every = 100;

  void validate() const;
};

/// Training and evaluation data for one task.
struct TaskData {
  TaskKind kind = TaskKind::classification;
  ClassificationData train_set;
  ClassificationData eval_set;
  std::vector<std::int32_t> train_stream;
  std::vector<std::int32_t> eval_stream;
  std::size_t window = 0;  ///< language-model sequence length

  static TaskData classification(ClassificationData train, ClassificationData eval);
  static TaskData language_model(std::vector<std::int32_t> train, std::vector<std::int32_t> eval,
                                 std::size_t window);
  /// Accuracy goes up, perplexity goes down.
  bool higher_is_better() const noexcept { return kind == TaskKind::classification; }
};

struct TrainLogRow {
  std::size_t step = 0;
  double loss = 0.0;
  double loss_logit = 0.0;
  double loss_att = 0.0;
  double loss_rep = 0.0;
  double loss_task = 0.0;
  double eval_metric = 0.0;
  friend bool operator==(const TrainLogRow&, const TrainLogRow&) = default;
};

inline constexpr const char* kTrainLogHeader = "step,loss,loss_logit,loss_att,loss_rep,loss_task,eval_metric";
void write_train_log(std::ostream& os, std::span<const TrainLogRow> rows);

struct TrainResult {
  std::vector<TrainLogRow> log;
  Transformer<float> best;
  Transformer<float> final_model;
  std::size_t best_step = 0;
  double best_metric = 0.0;
};

/// Classification accuracy, or perplexity for language models, in eval mode.
double evaluate(const Transformer<float>& model, const TaskData& data, const QuantStrategy& strategy);

/// Index of the best logged row: first maximum (or minimum) of eval_metric.
std::size_t best_row(std::span<const TrainLogRow> rows, bool higher_is_better);

/// Quantization-aware training with knowledge distillation. The teacher is
/// frozen; the student trains under `cfg.strategy` with masks per
/// `cfg.sparsity`. Row 0 of the log is the untrained student; further rows
/// follow every `eval_every` steps and the last step. Throws TrainingError on
/// a non-finite loss, naming the step.
TrainResult qat_train(const Transformer<float>& student, const Transformer<float>& teacher, const TaskData& data,
                      const TrainConfig& cfg, const KDConfig& kd, const LayerMapping* mapping = nullptr);

/// Supervised float training on the task loss alone (teacher preparation).
TrainResult train_supervised(const Transformer<float>& model, const TaskData& data, const TrainConfig& cfg);

/// Masks for the four quantizable parts of every layer, from the given
/// model's weight magnitudes.
std::map<std::string, SparsityMask> magnitude_masks(const Transformer<float>& model, const SparsityConfig& cfg);

}  // namespace q4fg
