#include "botmoe/training.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "botmoe/keyvalue.hpp"

namespace botmoe {

void LossConfig::validate() const {
  for (double c : {l2, balance, w_importance, w_load}) {
    if (!(c >= 0.0) || !std::isfinite(c)) throw std::invalid_argument("loss coefficients must be finite and >= 0");
  }
}

double l2_penalty(const ParamList& params) {
  double total = 0.0;
  for (const auto& p : params) {
    if (!p.decay) continue;
    for (double w : p.value.data()) total += w * w;
  }
  return total;
}

LossParts total_loss(const Tensor& logits, std::span<const int> labels, const ParamList& params,
                     const std::array<std::optional<LoadStats>, kNumModalities>& stats, const LossConfig& cfg) {
  LossParts parts;
  Tensor total = cross_entropy(logits, labels);
  parts.cross_entropy = total.item();
  if (cfg.l2 > 0.0) {
    Tensor sq;
    for (const auto& p : params) {
      if (!p.decay) continue;
      const Tensor s = sum_squares(p.value);
      sq = sq.defined() ? add(sq, s) : s;
    }
    if (sq.defined()) {
      parts.l2 = sq.item();
      total = add(total, scale(sq, cfg.l2));
    }
  } else {
    parts.l2 = l2_penalty(params);
  }
  for (std::size_t i = 0; i < kNumModalities; ++i) {
    if (!stats[i]) continue;
    const Tensor bl = balance_loss(*stats[i], cfg.w_importance, cfg.w_load);
    parts.balance[i] = bl.item();
    if (cfg.balance > 0.0) total = add(total, scale(bl, cfg.balance));
  }
  parts.total = total;
  return parts;
}

void adam_step(const ParamList& params, AdamState& state, const AdamConfig& cfg) {
  if (state.m.size() != params.size()) {
    state.m.clear();
    state.v.clear();
    for (const auto& p : params) {
      state.m.emplace_back(p.value.numel(), 0.0);
      state.v.emplace_back(p.value.numel(), 0.0);
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor t = params[k].value;
    auto w = t.mutable_data();
    auto g = t.mutable_grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != w.size()) throw std::logic_error("adam_step: moment buffer shape mismatch for " + params[k].name);
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      w[i] -= cfg.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
      g[i] = 0.0;
    }
  }
}

Metrics Metrics::from(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) throw std::invalid_argument("Metrics: prediction/label count mismatch");
  Metrics m;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const bool p = predicted[i] == 1, t = truth[i] == 1;
    if (p && t) ++m.tp;
    else if (p) ++m.fp;
    else if (t) ++m.fn;
    else ++m.tn;
  }
  return m;
}

double Metrics::accuracy() const {
  return total() ? static_cast<double>(tp + tn) / static_cast<double>(total()) : 0.0;
}
double Metrics::precision() const { return tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0; }
double Metrics::recall() const { return tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0; }
double Metrics::f1() const {
  const double p = precision(), r = recall();
  return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
}

namespace {

Metrics score(const Tensor& logits, const Dataset& data, Split split) {
  const auto rows = data.labeled(split);
  const auto predicted = predict(index_rows(logits, rows));
  return Metrics::from(predicted, data.labels_of(rows));
}

std::vector<std::vector<double>> snapshot(const ParamList& params) {
  std::vector<std::vector<double>> out;
  for (const auto& p : params) out.emplace_back(p.value.data().begin(), p.value.data().end());
  return out;
}

void restore(const ParamList& params, const std::vector<std::vector<double>>& values) {
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor t = params[k].value;
    std::copy(values[k].begin(), values[k].end(), t.mutable_data().begin());
  }
}

std::string describe(const LossParts& parts) {
  std::ostringstream os;
  os << "ce=" << parts.cross_entropy << " l2=" << parts.l2 << " bl=" << parts.balance[0] << "," << parts.balance[1]
     << "," << parts.balance[2];
  return os.str();
}

}  // namespace

Metrics evaluate(const BotMoE& model, const InputFeatures& in, const Dataset& data, Split split) {
  if (data.labeled(split).empty()) throw std::invalid_argument("evaluate: split " + std::string(to_string(split)) + " has no labeled users");
  NoGradGuard guard;
  const auto out = model.forward(in, ForwardContext{});
  return score(out.logits, data, split);
}

Metrics evaluate(const BotMoE& model, const Dataset& data, Split split) {
  return evaluate(model, input_features(data), data, split);
}

TrainRun train(const Dataset& data, const TrainConfig& cfg) {
  cfg.loss.validate();
  const auto train_rows = data.labeled(Split::train);
  if (train_rows.empty()) throw std::invalid_argument("train: no labeled train users");
  if (data.labeled(Split::valid).empty()) throw std::invalid_argument("train: no labeled valid users");

  TrainRun run{TrainState{BotMoE(cfg.model, data.embed_dim(), cfg.seed), {}, 0, cfg.seed, 0, {}}, {}};
  auto& state = run.state;
  const ParamList params = state.model.parameters();
  const InputFeatures in = input_features(data);
  const std::size_t batch_size =
      cfg.batch_size == 0 || cfg.batch_size >= train_rows.size() ? train_rows.size() : cfg.batch_size;

  Rng shuffle_rng(Rng::mix(cfg.seed, 0x7368756666ULL));
  std::vector<std::vector<double>> best;
  double best_f1 = -1.0;
  auto& tape = Tape::current();
  std::vector<std::size_t> order = train_rows;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    if (batch_size < order.size()) {
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);
    }
    EpochLog entry;
    entry.epoch = epoch;
    for (std::size_t start = 0, step = 0; start < order.size(); start += batch_size, ++step) {
      const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(std::min(start + batch_size, order.size())));
      Rng step_rng(Rng::mix(cfg.seed, (static_cast<std::uint64_t>(epoch) << 20) + step));
      tape.reset();
      const auto out = state.model.forward(in, ForwardContext{true, cfg.model.dropout, &step_rng});
      std::array<std::optional<LoadStats>, kNumModalities> stats;
      for (std::size_t i = 0; i < kNumModalities; ++i) {
        if (out.routing[i]) stats[i] = out.routing[i]->stats;
      }
      const auto labels = data.labels_of(batch);
      const auto parts = total_loss(index_rows(out.logits, batch), labels, params, stats, cfg.loss);
      const double loss = parts.total.item();
      if (!std::isfinite(loss)) {
        tape.reset();
        throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) + ": non-finite loss (" +
                               describe(parts) + ")");
      }
      tape.backward(parts.total);
      tape.reset();
      adam_step(params, state.adam, cfg.adam);

      entry.loss = loss;
      entry.cross_entropy = parts.cross_entropy;
      entry.l2 = parts.l2;
      entry.balance = parts.balance;
      for (std::size_t i = 0; i < kNumModalities; ++i) {
        if (!out.routing[i]) continue;
        const auto& r = *out.routing[i];
        entry.importance[i].assign(r.stats.importance.data().begin(), r.stats.importance.data().end());
        entry.load[i].assign(r.stats.load.data().begin(), r.stats.load.data().end());
        entry.selections[i].assign(r.gate.experts(), 0.0);
        for (auto j : r.gate.top_k) entry.selections[i][j] += 1.0;
      }
    }
    {
      NoGradGuard guard;
      const auto eval = state.model.forward(in, ForwardContext{});
      entry.train = score(eval.logits, data, Split::train);
      entry.valid = score(eval.logits, data, Split::valid);
    }
    state.epoch = epoch;
    if (entry.valid.f1() > best_f1) {
      best_f1 = entry.valid.f1();
      best = snapshot(params);
      state.best_epoch = epoch;
      state.best_valid = entry.valid;
    }
    run.log.push_back(std::move(entry));
  }
  if (!best.empty()) restore(params, best);
  return run;
}

void write_metrics_header(std::ostream& os, const ModelConfig& cfg) {
  os << "seed,epoch,split,accuracy,f1,precision,recall,train_accuracy,train_f1,loss,cross_entropy,l2,bl_graph,bl_text,bl_metadata";
  for (auto m : kModalities) {
    const auto i = static_cast<std::size_t>(m);
    for (const char* kind : {"importance", "load", "selected"}) {
      for (std::size_t j = 0; j < cfg.experts[i]; ++j) os << ',' << kind << '_' << to_string(m) << '_' << j;
    }
  }
  os << '\n';
}

void write_metrics_rows(std::ostream& os, std::uint64_t seed, const std::vector<EpochLog>& log) {
  for (const auto& e : log) {
    os << seed << ',' << e.epoch << ",valid," << format_double(e.valid.accuracy()) << ',' << format_double(e.valid.f1())
       << ',' << format_double(e.valid.precision()) << ',' << format_double(e.valid.recall()) << ','
       << format_double(e.train.accuracy()) << ',' << format_double(e.train.f1()) << ',' << format_double(e.loss) << ','
       << format_double(e.cross_entropy) << ',' << format_double(e.l2);
    for (double b : e.balance) os << ',' << format_double(b);
    for (std::size_t i = 0; i < kNumModalities; ++i) {
      for (const auto* values : {&e.importance[i], &e.load[i], &e.selections[i]}) {
        for (double v : *values) os << ',' << format_double(v);
      }
    }
    os << '\n';
  }
}

void save_checkpoint(const std::filesystem::path& path, const BotMoE& model) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os << "botmoe-checkpoint 1\n";
  os << "embed_dim " << model.embed_dim() << '\n';
  for (const auto& [key, value] : model.config().entries()) os << "config " << key << '=' << value << '\n';
  const auto params = model.parameters();
  os << "params " << params.size() << '\n';
  for (const auto& p : params) {
    os << "param " << p.name << ' ' << p.value.rank();
    for (auto d : p.value.shape()) os << ' ' << d;
    os << '\n';
    bool first = true;
    for (double v : p.value.data()) {
      os << (first ? "" : " ") << format_double(v);
      first = false;
    }
    os << '\n';
  }
  if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
}

BotMoE load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::size_t line_no = 0;
  std::string line;
  auto fail = [&](const std::string& what) -> std::runtime_error {
    return std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " + what);
  };
  auto next = [&]() {
    if (!std::getline(is, line)) throw fail("unexpected end of file");
    ++line_no;
    return std::string_view(line);
  };
  if (next() != "botmoe-checkpoint 1") throw fail("not a botmoe checkpoint");
  std::string_view l = next();
  if (l.substr(0, 10) != "embed_dim ") throw fail("expected embed_dim");
  const auto embed_dim = parse_number<std::size_t>("embed_dim", l.substr(10));
  ModelConfig cfg;
  for (l = next(); l.substr(0, 7) == "config "; l = next()) {
    const auto kv = l.substr(7);
    const auto eq = kv.find('=');
    if (eq == std::string_view::npos) throw fail("malformed config line");
    if (!cfg.apply(kv.substr(0, eq), kv.substr(eq + 1))) throw fail("unknown config key " + std::string(kv.substr(0, eq)));
  }
  if (l.substr(0, 7) != "params ") throw fail("expected params count");
  const auto count = parse_number<std::size_t>("params", l.substr(7));
  BotMoE model(cfg, embed_dim, 0);
  const auto params = model.parameters();
  if (params.size() != count) throw fail("parameter count does not match the configured model");
  for (const auto& p : params) {
    std::istringstream header{std::string(next())};
    std::string tag, name;
    std::size_t rank = 0;
    header >> tag >> name >> rank;
    Shape shape(rank);
    for (auto& d : shape) header >> d;
    if (tag != "param" || !header) throw fail("malformed param header");
    if (name != p.name || shape != p.value.shape()) {
      throw fail("expected " + p.name + " " + shape_str(p.value.shape()) + ", found " + name + " " + shape_str(shape));
    }
    const auto values = split_list(next(), ' ');
    if (values.size() != p.value.numel()) throw fail("value count mismatch for " + name);
    Tensor t = p.value;
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) data[i] = parse_number<double>(name, values[i]);
  }
  return model;
}

}  // namespace botmoe
