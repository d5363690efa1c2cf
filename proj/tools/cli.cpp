#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include "q4fg/analysis.hpp"
#include "q4fg/container.hpp"
#include "q4fg/data.hpp"
#include "q4fg/distill.hpp"
#include "q4fg/pack_gemm.hpp"
#include "q4fg/serialize.hpp"
#include "q4fg/strategy_tuner.hpp"
#include "q4fg/threading.hpp"

namespace q4fg::cli {

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep))
    if (!item.empty()) out.push_back(item);
  return out;
}

template <typename F>
auto usage_guard(F&& f) {
  try {
    return f();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

std::array<bool, 4> parse_parts(const std::string& text) {
  std::array<bool, 4> parts{};
  if (text == "all") return {true, true, true, true};
  if (text == "none") return parts;
  const auto names = split(text, ',');
  if (names.empty()) throw UsageError("--parts needs at least one part");
  for (const auto& n : names) parts[static_cast<std::size_t>(usage_guard([&] { return linear_part_from_string(n); }))] = true;
  return parts;
}

/// "row" / "d_in" -> one group per weight row; "tensor" or 1 -> per tensor; N -> N groups.
void apply_groups(QuantScheme& s, const std::string& g) {
  if (g == "row" || g == "d_in" || g == "channel") {
    s.granularity = Granularity::per_channel;
    s.groups = 1;
    return;
  }
  if (g == "tensor") {
    s.granularity = Granularity::per_tensor;
    s.groups = 1;
    return;
  }
  std::size_t used = 0;
  unsigned long n = 0;
  try {
    n = std::stoul(g, &used);
  } catch (const std::logic_error&) {
    used = 0;
  }
  if (used != g.size() || n == 0) throw UsageError("--groups must be a positive integer, row, d_in or tensor");
  s.granularity = n == 1 ? Granularity::per_tensor : Granularity::per_group;
  s.groups = n;
}

ClipRange parse_clip(const std::string& text) {
  const auto parts = split(text, ',');
  if (parts.size() != 2) throw UsageError("--clip expects LO,HI");
  try {
    return ClipRange{std::stof(parts[0]), std::stof(parts[1])};
  } catch (const std::logic_error&) {
    throw UsageError("--clip expects two numbers");
  }
}

std::vector<int> parse_int_list(const std::string& text, const std::string& flag) {
  std::vector<int> out;
  for (const auto& p : split(text, ',')) {
    try {
      out.push_back(std::stoi(p));
    } catch (const std::logic_error&) {
      throw UsageError(flag + " expects comma-separated integers");
    }
  }
  if (out.empty()) throw UsageError(flag + " is empty");
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  f << text;
  if (!f) throw std::runtime_error("failed writing '" + path + "'");
}

/// Writes to `path`, or to `out` when the path is empty.
template <typename W>
void emit(const std::string& path, std::ostream& out, W&& writer) {
  if (path.empty()) {
    writer(out);
    return;
  }
  std::ostringstream os;
  writer(os);
  write_text(path, os.str());
}

// ---------------------------------------------------------------------------
// Tasks shared by train, train-qat and analyze

struct TaskOptions {
  std::string task = "majority";
  std::size_t seq = 16;
  std::size_t examples = 2048;
  std::size_t eval_examples = 512;
  std::size_t length = 20000;
  double sharpness = 2.0;
  std::uint64_t data_seed = 1;

  void add(CLI::App* app) {
    app->add_option("--task", task, "majority | markov")->check(CLI::IsMember({"majority", "markov"}));
    app->add_option("--seq", seq, "sequence length (markov: window)");
    app->add_option("--examples", examples, "training examples (majority)");
    app->add_option("--eval-examples", eval_examples, "evaluation examples (majority)");
    app->add_option("--length", length, "training stream length (markov)");
    app->add_option("--sharpness", sharpness, "transition sharpness (markov)");
    app->add_option("--data-seed", data_seed, "synthetic data seed");
  }
};

TaskData make_task(const TaskOptions& o, const ModelConfig& cfg) {
  if (o.seq == 0 || o.seq > cfg.max_seq) {
    throw UsageError("--seq must be in 1.." + std::to_string(cfg.max_seq));
  }
  if (o.task == "majority") {
    if (cfg.num_classes == 0) throw UsageError("the majority task needs a model with a classification head");
    if (cfg.vocab_size != cfg.num_classes + 1) {
      throw UsageError("the majority task needs vocab_size == num_classes + 1");
    }
    auto train = majority_classification(o.examples, o.seq, cfg.num_classes, o.data_seed);
    auto eval = majority_classification(o.eval_examples, o.seq, cfg.num_classes, o.data_seed + 1);
    return TaskData::classification(std::move(train), std::move(eval));
  }
  if (cfg.arch != Arch::decoder_only) throw UsageError("the markov task needs a decoder-only model");
  const auto chain = random_markov_chain(cfg.vocab_size, o.sharpness, o.data_seed);
  return TaskData::language_model(markov_lm(chain, o.length, o.data_seed + 1),
                                  markov_lm(chain, std::max<std::size_t>(o.length / 4, o.seq + 1), o.data_seed + 2),
                                  o.seq);
}

struct SchemeOptions {
  int bits = 4;
  std::string mapping = "sym";
  std::string groups = "row";
  int act_bits = 0;  ///< 0: same as bits
  std::string act_mapping = "sym";
  std::string clip;

  void add(CLI::App* app, bool with_groups = true) {
    app->add_option("--bits", bits, "weight bits")->check(CLI::IsMember({4, 8}));
    app->add_option("--mapping", mapping, "weight mapping: sym | asym")->check(CLI::IsMember({"sym", "asym"}));
    if (with_groups) app->add_option("--groups", groups, "weight groups: N, row (= d_in) or tensor");
    app->add_option("--act-bits", act_bits, "activation bits (default: --bits; 32 disables)")
        ->check(CLI::IsMember({0, 4, 8, 32}));
    app->add_option("--act-mapping", act_mapping, "activation mapping")->check(CLI::IsMember({"sym", "asym"}));
    app->add_option("--clip", clip, "activation clip range LO,HI");
  }

  QuantScheme weight() const {
    QuantScheme s = mapping == "sym" ? QuantScheme::symmetric(bits) : QuantScheme::asymmetric(bits);
    apply_groups(s, groups);
    usage_guard([&] { check_scheme(s, QuantRole::weight); return 0; });
    return s;
  }

  QuantScheme activation() const {
    const int b = act_bits == 0 ? bits : act_bits;
    if (b == 32) return QuantScheme::passthrough_scheme();
    QuantScheme s = act_mapping == "sym" ? QuantScheme::symmetric(b, Granularity::per_token)
                                         : QuantScheme::asymmetric(b, Granularity::per_token);
    if (!clip.empty()) s.clip = parse_clip(clip);
    usage_guard([&] { check_scheme(s, QuantRole::activation); return 0; });
    return s;
  }
};

QuantStrategy load_strategy_file(const std::string& path) {
  try {
    return strategy_from_json(read_json_file(path));
  } catch (const Json::exception& e) {
    throw std::runtime_error("'" + path + "' is not a strategy: " + e.what());
  }
}

/// none | stored | auto | FILE
QuantStrategy resolve_strategy(const std::string& choice, const ContainerContents& c, const std::string& tune_path,
                               std::size_t m) {
  if (choice == "none") return QuantStrategy::none();
  if (choice == "stored") {
    if (!c.strategy) throw std::runtime_error("the container records no strategy");
    return *c.strategy;
  }
  if (choice == "auto") {
    if (tune_path.empty()) throw std::runtime_error("--strategy auto needs a tune result (--tune FILE)");
    return tune_result_from_json(read_json_file(tune_path)).pick(m);
  }
  return load_strategy_file(choice);
}

std::string default_strategy(const ContainerContents& c) { return c.strategy ? "stored" : "none"; }

// ---------------------------------------------------------------------------
// Commands

struct InitCmd {
  ModelConfig cfg;
  std::string arch = "encoder_only", ln = "post", config_path, out;
  std::uint64_t seed = 0;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("init", "create a randomly initialized model container");
    c->add_option("--config", config_path, "model config JSON (overrides the flags)");
    c->add_option("--arch", arch, "encoder_only | decoder_only | encoder_decoder")
        ->check(CLI::IsMember({"encoder_only", "decoder_only", "encoder_decoder"}));
    c->add_option("--enc", cfg.encoder_layers, "encoder layers");
    c->add_option("--dec", cfg.decoder_layers, "decoder layers");
    c->add_option("--hidden", cfg.hidden, "hidden size");
    c->add_option("--heads", cfg.heads, "attention heads");
    c->add_option("--ffn-mult", cfg.ffn_mult, "FFN width multiplier");
    c->add_option("--ln", ln, "pre | post")->check(CLI::IsMember({"pre", "post"}));
    c->add_option("--vocab", cfg.vocab_size, "vocabulary size");
    c->add_option("--max-seq", cfg.max_seq, "maximum sequence length");
    c->add_option("--classes", cfg.num_classes, "classification head size (0: none)");
    c->add_option("--seed", seed, "initialization seed");
    c->add_option("--out", out, "output container")->required();
    c->callback([this, c] { run(c); });
  }

  void run(CLI::App*) {
    ModelConfig config = cfg;
    if (!config_path.empty()) {
      config = config_from_json(read_json_file(config_path));
    } else {
      config.arch = arch_from_string(arch);
      config.ln = ln_placement_from_string(ln);
      if (config.arch == Arch::decoder_only) {
        if (config.decoder_layers == 0) config.decoder_layers = config.encoder_layers;
        config.encoder_layers = 0;
      }
      usage_guard([&] { config.validate(); return 0; });
    }
    save_container(out, build_model<float>(config, seed));
  }
};

struct QuantizeCmd {
  std::string model, out, parts = "all";
  SchemeOptions scheme;

  void add(CLI::App& app, std::ostream& os) {
    auto* c = app.add_subcommand("quantize", "store weights of the selected parts as integer codes");
    c->add_option("--model", model, "input container")->required()->check(CLI::ExistingFile);
    c->add_option("--out", out, "output container")->required();
    c->add_option("--parts", parts, "comma list of qkv, attn_out, mlp_int, mlp_out, or all");
    scheme.add(c);
    c->callback([this, &os] { run(os); });
  }

  void run(std::ostream& os) {
    const auto selected = parse_parts(parts);
    const auto w = scheme.weight();
    const auto a = scheme.activation();
    auto c = load_container(model);
    quantize_parts(c.model, w, selected);
    QuantStrategy s = c.strategy.value_or(QuantStrategy::none());
    if (c.strategy && (c.strategy->weight_scheme != w || c.strategy->activation_scheme != a)) {
      throw std::runtime_error("the container already records a different quantization scheme");
    }
    s.weight_scheme = w;
    s.activation_scheme = a;
    for (auto p : kLinearParts)
      if (selected[static_cast<std::size_t>(p)]) s.set(p, true);
    s.validate();
    save_container(out, c.model, s);
    os << "quantized " << s.label() << " weight " << w.describe() << " activation " << a.describe() << '\n';
  }
};

struct InferCmd {
  std::string model, input, source, strategy, tune, report;
  std::size_t batch = 1;

  void add(CLI::App& app, std::ostream& os) {
    auto* c = app.add_subcommand("infer", "run a forward pass on a token file");
    c->add_option("--model", model, "container")->required()->check(CLI::ExistingFile);
    c->add_option("--input", input, "token file (little-endian u32)")->required()->check(CLI::ExistingFile);
    c->add_option("--source", source, "encoder token file (encoder-decoder models)");
    c->add_option("--batch", batch, "rows the token file is split into")->check(CLI::PositiveNumber);
    c->add_option("--strategy", strategy, "none | stored | auto | strategy JSON (default: stored if present)");
    c->add_option("--tune", tune, "tune result used by --strategy auto");
    c->add_option("--report", report, "logits CSV (default: stdout)");
    c->callback([this, &os] { run(os); });
  }

  void run(std::ostream& os) {
    const auto c = load_container(model);
    ModelInput in;
    in.tokens = read_tokens(input);
    if (in.tokens.empty() || in.tokens.size() % batch != 0) {
      throw UsageError("token count " + std::to_string(in.tokens.size()) + " is not a multiple of --batch");
    }
    in.batch = batch;
    in.seq = in.tokens.size() / batch;
    if (c.model.config.arch == Arch::encoder_decoder) {
      if (source.empty()) throw UsageError("encoder-decoder models need --source");
      in.source = read_tokens(source);
      if (in.source.size() % batch != 0) throw UsageError("source token count is not a multiple of --batch");
      in.source_seq = in.source.size() / batch;
    }
    ForwardOptions opt;
    opt.mode = Mode::eval;
    opt.workers = worker_count();
    opt.strategy = resolve_strategy(strategy.empty() ? default_strategy(c) : strategy, c, tune, in.batch * in.seq);
    const auto r = forward(c.model, in, opt);
    emit(report, os, [&](std::ostream& o) {
      o << std::setprecision(9);
      if (c.model.config.num_classes > 0) {
        o << "batch";
        for (std::size_t k = 0; k < c.model.config.num_classes; ++k) o << ",class_" << k;
        o << '\n';
        const auto d = r.class_logits.data();
        const std::size_t k = c.model.config.num_classes;
        for (std::size_t b = 0; b < in.batch; ++b) {
          o << b;
          for (std::size_t j = 0; j < k; ++j) o << ',' << d[b * k + j];
          o << '\n';
        }
        return;
      }
      const std::size_t v = c.model.config.vocab_size;
      o << "batch,position";
      for (std::size_t j = 0; j < v; ++j) o << ",logit_" << j;
      o << '\n';
      const auto d = r.logits.data();
      for (std::size_t b = 0; b < in.batch; ++b)
        for (std::size_t t = 0; t < in.seq; ++t) {
          o << b << ',' << t;
          for (std::size_t j = 0; j < v; ++j) o << ',' << d[(b * in.seq + t) * v + j];
          o << '\n';
        }
    });
  }
};

struct TuneCmd {
  std::string model, shapes, out, masks;
  SchemeOptions scheme;
  int repeats = 5;
  std::uint64_t seed = 0;

  void add(CLI::App& app, std::ostream& os) {
    auto* c = app.add_subcommand("tune-strategy", "time every per-part strategy for each shape");
    c->add_option("--model", model, "container")->required()->check(CLI::ExistingFile);
    c->add_option("--shapes", shapes, "\"bs,seq;bs,seq;...\"")->required();
    c->add_option("--out", out, "tune result JSON")->required();
    c->add_option("--repeats", repeats, "timed forwards per strategy (median)")->check(CLI::PositiveNumber);
    c->add_option("--masks", masks, "comma list of strategy masks 0..15 (default: all 16)");
    c->add_option("--seed", seed, "token seed");
    scheme.add(c);
    c->callback([this, &os] { run(os); });
  }

  void run(std::ostream& os) {
    const auto parsed = usage_guard([&] { return parse_shapes(shapes); });
    TuneOptions opt;
    opt.weight = scheme.weight();
    opt.activation = scheme.activation();
    opt.repeats = repeats;
    opt.seed = seed;
    opt.workers = worker_count();
    if (!masks.empty())
      for (int m : parse_int_list(masks, "--masks")) {
        if (m < 0 || m > 15) throw UsageError("--masks entries must be in 0..15");
        opt.masks.push_back(static_cast<unsigned>(m));
      }
    const auto c = load_container(model);
    const auto r = tune_strategy(c.model, parsed, opt);
    write_json_file(out, to_json(r));
    os << "workers " << r.workers << '\n';
    for (const auto& b : r.buckets) {
      os << "bs=" << b.shape.batch << " seq=" << b.shape.seq << " -> " << r.strategy(b).label() << '\n';
    }
  }
};

struct TrainOptions {
  std::size_t steps = 200, batch = 32, eval_every = 100;
  double lr = 1e-3, dropout = 0.0;
  std::uint64_t seed = 0;
  std::string log;

  void add(CLI::App* c) {
    c->add_option("--steps", steps, "optimizer steps")->check(CLI::PositiveNumber);
    c->add_option("--batch", batch, "batch size")->check(CLI::PositiveNumber);
    c->add_option("--eval-every", eval_every, "evaluation cadence")->check(CLI::PositiveNumber);
    c->add_option("--lr", lr, "learning rate");
    c->add_option("--dropout", dropout, "dropout rate");
    c->add_option("--seed", seed, "training seed");
    c->add_option("--log", log, "training log CSV");
  }

  TrainConfig config() const {
    TrainConfig t;
    t.steps = steps;
    t.batch_size = batch;
    t.eval_every = eval_every;
    t.lr = lr;
    t.dropout = dropout;
    t.seed = seed;
    return t;
  }

  void report(const TrainResult& r, std::ostream& os) const {
    if (!log.empty()) emit(log, os, [&](std::ostream& o) { write_train_log(o, r.log); });
    os << "best step " << r.best_step << " metric " << std::setprecision(9) << r.best_metric << '\n';
  }
};

struct TrainCmd {
  std::string model, out;
  TaskOptions task;
  TrainOptions train;

  void add(CLI::App& app, std::ostream& os) {
    auto* c = app.add_subcommand("train", "supervised float training (teacher preparation)");
    c->add_option("--model", model, "initial container")->required()->check(CLI::ExistingFile);
    c->add_option("--out", out, "best checkpoint container")->required();
    task.add(c);
    train.add(c);
    c->callback([this, &os] { run(os); });
  }

  void run(std::ostream& os) {
    const auto c = load_container(model);
    const auto data = make_task(task, c.model.config);
    auto cfg = train.config();
    usage_guard([&] { cfg.validate(); return 0; });
    const auto r = train_supervised(c.model, data, cfg);
    save_container(out, r.best);
    train.report(r, os);
  }
};

struct TrainQatCmd {
  std::string teacher, student, out, parts = "all", att = "normalized", nm, order = "prune_then_quant";
  SchemeOptions scheme;
  TaskOptions task;
  TrainOptions train;
  KDConfig kd;

  void add(CLI::App& app, std::ostream& os) {
    auto* c = app.add_subcommand("train-qat", "quantization-aware training with distillation");
    c->add_option("--teacher", teacher, "teacher container")->required()->check(CLI::ExistingFile);
    c->add_option("--student", student, "student container (default: copy of the teacher)");
    c->add_option("--out", out, "best checkpoint container")->required();
    c->add_option("--parts", parts, "quantized parts");
    c->add_option("--w-logit", kd.w_logit, "logit KD weight");
    c->add_option("--w-att", kd.w_att, "attention KD weight");
    c->add_option("--w-rep", kd.w_rep, "hidden-state KD weight");
    c->add_option("--w-task", kd.w_task, "task loss weight");
    c->add_option("--att", att, "normalized | prenorm")->check(CLI::IsMember({"normalized", "prenorm"}));
    c->add_option("--temperature", kd.temperature, "KD temperature");
    c->add_option("--nm", nm, "train with pair-N:M masks from teacher magnitudes, e.g. 2:4");
    c->add_option("--order", order, "prune_then_quant | quant_then_prune")
        ->check(CLI::IsMember({"prune_then_quant", "quant_then_prune"}));
    scheme.add(c);
    task.add(c);
    train.add(c);
    c->callback([this, &os] { run(os); });
  }

  void run(std::ostream& os) {
    const auto t = load_container(teacher);
    const auto s = student.empty() ? ContainerContents{t.model.clone(), std::nullopt} : load_container(student);
    const auto data = make_task(task, t.model.config);
    auto cfg = train.config();
    const auto selected = parse_parts(parts);
    cfg.strategy = QuantStrategy::from_bits(0, scheme.weight(), scheme.activation());
    cfg.strategy.enabled = selected;
    cfg.order = composition_order_from_string(order);
    if (!nm.empty()) {
      const auto pattern = usage_guard([&] { return parse_nm(nm); });
      SparsityConfig sp;
      sp.pattern = pattern;
      sp.sparsity = static_cast<double>(pattern.n) / static_cast<double>(pattern.m);
      cfg.sparsity = sp;
    }
    kd.att = att_variant_from_string(att);
    usage_guard([&] { cfg.validate(); kd.validate(); return 0; });

    std::optional<LayerMapping> mapping;
    const auto& tc = t.model.config;
    const auto& sc = s.model.config;
    if (sc.encoder_layers != tc.encoder_layers || sc.decoder_layers != tc.decoder_layers) {
      mapping = layer_reduce(tc, sc.encoder_layers, sc.decoder_layers).mapping;
    }
    const auto r = qat_train(s.model, t.model, data, cfg, kd, mapping ? &*mapping : nullptr);
    save_container(out, r.best, cfg.strategy);
    train.report(r, os);
  }
};

struct PruneCmd {
  std::string model, out, nm, order = "prune_then_quant";
  double sparsity = 0.0;

  void add(CLI::App& app, std::ostream& os) {
    auto* c = app.add_subcommand("prune", "attach magnitude masks to the quantizable weights");
    c->add_option("--model", model, "input container")->required()->check(CLI::ExistingFile);
    c->add_option("--out", out, "output container")->required();
    auto* nm_opt = c->add_option("--nm", nm, "pair-N:M pattern, e.g. 2:4");
    c->add_option("--sparsity", sparsity, "unstructured sparsity in [0, 1)")->excludes(nm_opt);
    c->add_option("--order", order, "prune_then_quant | quant_then_prune")
        ->check(CLI::IsMember({"prune_then_quant", "quant_then_prune"}));
    c->callback([this, &os] { run(os); });
  }

  void run(std::ostream& os) {
    SparsityConfig sp;
    if (!nm.empty()) {
      const auto pattern = usage_guard([&] { return parse_nm(nm); });
      sp.structure = MaskStructure::pair_nm;
      sp.pattern = pattern;
      sp.sparsity = static_cast<double>(pattern.n) / static_cast<double>(pattern.m);
    } else {
      if (sparsity <= 0.0 || sparsity >= 1.0) throw UsageError("give --nm N:M or --sparsity in (0, 1)");
      sp.structure = MaskStructure::unstructured;
      sp.pattern.reset();
      sp.sparsity = sparsity;
    }
    auto c = load_container(model);
    c.model.masks = magnitude_masks(c.model, sp);
    c.model.order = composition_order_from_string(order);
    save_container(out, c.model, c.strategy);
    std::size_t pruned = 0, total = 0;
    for (const auto& [name, m] : c.model.masks) {
      pruned += m.pruned_count();
      total += m.keep.size();
    }
    os << "pruned " << pruned << " of " << total << " weights in " << c.model.masks.size() << " tensors\n";
  }
};

struct ReduceCmd {
  std::string model, out, policy = "first_k";
  std::size_t enc = 0, dec = 0;

  void add(CLI::App& app, std::ostream& os) {
    auto* c = app.add_subcommand("reduce-layers", "build a shallower student from a teacher");
    c->add_option("--model", model, "teacher container")->required()->check(CLI::ExistingFile);
    c->add_option("--out", out, "student container")->required();
    c->add_option("--enc", enc, "student encoder layers");
    c->add_option("--dec", dec, "student decoder layers");
    c->add_option("--policy", policy, "first_k | even")->check(CLI::IsMember({"first_k", "even"}));
    c->callback([this, &os] { run(os); });
  }

  void run(std::ostream& os) {
    const auto c = load_container(model);
    const auto p = policy == "even" ? CopyPolicy::even_spacing : CopyPolicy::first_k_even_spacing;
    const auto reduced = usage_guard([&] { return layer_reduce(c.model.config, enc, dec, p); });
    save_container(out, reduce_model(c.model, reduced));
    auto print = [&](const char* label, const std::vector<std::size_t>& m) {
      os << label;
      for (std::size_t i = 0; i < m.size(); ++i) os << (i ? "," : " ") << m[i];
      os << '\n';
    };
    print("encoder", reduced.mapping.encoder);
    print("decoder", reduced.mapping.decoder);
  }
};

struct BenchCmd {
  std::string cases = "qkv_proj,attn_out,mlp_intermediate,mlp_out", bits = "4,8,32", out;
  std::size_t tokens = 32, hidden = 256, repeats = 5;
  std::uint64_t seed = 0;

  void add(CLI::App& app, std::ostream& os, std::ostream& es) {
    auto* c = app.add_subcommand("bench", "time the GEMM kernels on the block shapes");
    c->add_option("--case", cases, "comma list of qkv_proj, attn_out, mlp_intermediate, mlp_out");
    c->add_option("--bits", bits, "comma list of 4, 8, 32");
    c->add_option("--tokens", tokens, "M = batch * seq")->check(CLI::PositiveNumber);
    c->add_option("--hidden", hidden, "hidden size")->check(CLI::PositiveNumber);
    c->add_option("--repeats", repeats, "timed runs (median)")->check(CLI::PositiveNumber);
    c->add_option("--seed", seed, "operand seed");
    c->add_option("--out", out, "CSV (default: stdout)");
    c->callback([this, &os, &es] { run(os, es); });
  }

  void run(std::ostream& os, std::ostream& es) {
    const auto bit_list = parse_int_list(bits, "--bits");
    for (int b : bit_list)
      if (b != 4 && b != 8 && b != 32) throw UsageError("--bits entries must be 4, 8 or 32");
    std::vector<GemmCase> case_list;
    for (const auto& name : split(cases, ',')) case_list.push_back(usage_guard([&] { return gemm_case_from_string(name); }));
    if (case_list.empty()) throw UsageError("--case is empty");
    const int workers = worker_count();
    std::vector<BenchRecord> records;
    for (auto gc : case_list)
      for (int b : bit_list) records.push_back(bench_gemm(GemmShapeCase::make(gc, tokens, hidden), b, repeats, workers, seed));
    (out.empty() ? es : os) << "workers " << workers << '\n';
    emit(out, os, [&](std::ostream& o) { write_bench_csv(o, records); });
  }
};

struct AnalyzeCmd {
  std::string model, what = "range", module = "mlp_int", strategy, out, tensor;
  std::size_t layer = 0, batches = 8, batch = 16, window = 0;
  TaskOptions task;

  void add(CLI::App& app, std::ostream& os) {
    auto* c = app.add_subcommand("analyze", "positional statistics and quantization error reports");
    c->add_option("--model", model, "container")->required()->check(CLI::ExistingFile);
    c->add_option("--what", what, "range | ppl | quant-error")->check(CLI::IsMember({"range", "ppl", "quant-error"}));
    c->add_option("--layer", layer, "flat layer index (range)");
    c->add_option("--module", module, "linear part whose input is captured (range)");
    c->add_option("--batches", batches, "input batches (range)")->check(CLI::PositiveNumber);
    c->add_option("--batch", batch, "rows per batch (range)")->check(CLI::PositiveNumber);
    c->add_option("--window", window, "perplexity window (ppl; default --seq)");
    c->add_option("--tensor", tensor, "weight name (quant-error)");
    c->add_option("--strategy", strategy, "none | stored | strategy JSON");
    c->add_option("--out", out, "CSV (default: stdout)");
    task.add(c);
    c->callback([this, &os] { run(os); });
  }

  void run(std::ostream& os) {
    const auto c = load_container(model);
    const auto s = resolve_strategy(strategy.empty() ? default_strategy(c) : strategy, c, "", 0);
    if (what == "quant-error") {
      if (tensor.empty()) throw UsageError("--what quant-error needs --tensor");
      const auto& w = c.model.parameter(tensor);
      std::vector<QuantScheme> schemes;
      for (int b : {4, 8})
        for (auto g : {Granularity::per_tensor, Granularity::per_channel}) {
          schemes.push_back(QuantScheme::symmetric(b, g));
          schemes.push_back(QuantScheme::asymmetric(b, g));
        }
      const auto rows = quant_error_report(w, schemes);
      emit(out, os, [&](std::ostream& o) { write_quant_error_csv(o, rows); });
      return;
    }
    if (what == "ppl") {
      const auto data = make_task(task, c.model.config);
      const auto stats = positional_perplexity(c.model, data.eval_stream, s, window == 0 ? task.seq : window);
      emit(out, os, [&](std::ostream& o) { write_positional_csv(o, stats); });
      return;
    }
    const auto part = usage_guard([&] { return linear_part_from_string(module); });
    const auto& cfg = c.model.config;
    if (task.seq == 0 || task.seq > cfg.max_seq) throw UsageError("--seq must be in 1.." + std::to_string(cfg.max_seq));
    std::mt19937_64 rng(task.data_seed);
    std::uniform_int_distribution<std::int32_t> tok(0, static_cast<std::int32_t>(cfg.vocab_size) - 1);
    std::vector<ModelInput> inputs;
    for (std::size_t i = 0; i < batches; ++i) {
      ModelInput in;
      in.batch = batch;
      in.seq = task.seq;
      in.tokens.resize(batch * task.seq);
      for (auto& t : in.tokens) t = tok(rng);
      if (cfg.arch == Arch::encoder_decoder) {
        in.source = in.tokens;
        in.source_seq = in.seq;
      }
      inputs.push_back(std::move(in));
    }
    const auto stats = positional_activation_range(c.model, inputs, layer, part, s);
    emit(out, os, [&](std::ostream& o) { write_positional_csv(o, stats); });
  }
};

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"q4fg: low-bit transformer quantization toolkit"};
  app.name("q4fg");
  app.require_subcommand(1);

  InitCmd init;
  QuantizeCmd quantize;
  InferCmd infer;
  TuneCmd tune;
  TrainCmd train;
  TrainQatCmd train_qat;
  PruneCmd prune;
  ReduceCmd reduce;
  BenchCmd bench;
  AnalyzeCmd analyze;
  init.add(app);
  quantize.add(app, out);
  infer.add(app, out);
  tune.add(app, out);
  train.add(app, out);
  train_qat.add(app, out);
  prune.add(app, out);
  reduce.add(app, out);
  bench.add(app, out, err);
  analyze.add(app, out);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace q4fg::cli
