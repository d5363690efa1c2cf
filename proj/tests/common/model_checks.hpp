#pragma once

// Model-level checks shared by the unit and acceptance suites.

#include <random>
#include <sstream>
#include <string>

#include "q4fg/model.hpp"

namespace q4fg::props {

inline ModelInput random_input(const ModelConfig& cfg, std::size_t batch, std::size_t seq, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int32_t> tok(0, static_cast<std::int32_t>(cfg.vocab_size) - 1);
  ModelInput in;
  in.batch = batch;
  in.seq = seq;
  in.tokens.resize(batch * seq);
  for (auto& t : in.tokens) t = tok(rng);
  if (cfg.arch == Arch::encoder_decoder) {
    in.source_seq = seq;
    in.source.resize(batch * seq);
    for (auto& t : in.source) t = tok(rng);
  }
  return in;
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

struct ParityResult {
  std::size_t strategies = 0;
  std::size_t mismatches = 0;
  std::string first_failure;
};

/// Train-mode forward (fake quantization, tape recording, dropout 0) against
/// eval-mode forward (packed integer kernels) for every strategy mask.
inline ParityResult ste_parity(const Transformer<float>& model, const ModelInput& in, const QuantScheme& w,
                               const QuantScheme& a) {
  ParityResult r;
  for (unsigned mask = 0; mask < 16; ++mask, ++r.strategies) {
    ForwardOptions eval;
    eval.strategy = QuantStrategy::from_bits(mask, w, a);
    eval.mode = Mode::eval;
    const auto e = forward(model, in, eval);

    auto trainable = model.clone();
    trainable.config.dropout = 0.0;
    trainable.set_requires_grad(true);
    ForwardOptions train = eval;
    train.mode = Mode::train;
    std::mt19937_64 rng(0);
    train.rng = &rng;
    Tape tape;
    TapeScope<float> scope(tape);
    const auto t = forward(trainable, in, train);
    const bool same = bit_equal(e.logits, t.logits) &&
                      (!e.class_logits.defined() || bit_equal(e.class_logits, t.class_logits));
    if (!same && r.mismatches++ == 0) {
      std::ostringstream os;
      os << "strategy " << eval.strategy.label() << " (" << w.describe() << " / " << a.describe() << ")";
      r.first_failure = os.str();
    }
  }
  return r;
}

}  // namespace q4fg::props
