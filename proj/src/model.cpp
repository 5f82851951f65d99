#include "botmoe/model.hpp"

#include <algorithm>
#include <stdexcept>

#include "botmoe/dataset.hpp"
#include "botmoe/keyvalue.hpp"

namespace botmoe {

std::string_view to_string(MoeMode m) {
  switch (m) {
    case MoeMode::sparse: return "sparse";
    case MoeMode::mlp: return "mlp";
    case MoeMode::none: return "none";
  }
  return "?";
}

std::string_view to_string(FusionMode m) {
  switch (m) {
    case FusionMode::transformer: return "transformer";
    case FusionMode::mean: return "mean";
    case FusionMode::max: return "max";
    case FusionMode::min: return "min";
    case FusionMode::mlp: return "mlp";
  }
  return "?";
}

namespace {

const char* kExpertKeys[kNumModalities] = {"experts_graph", "experts_text", "experts_metadata"};

MoeMode parse_moe_mode(std::string_view key, std::string_view v) {
  for (auto m : {MoeMode::sparse, MoeMode::mlp, MoeMode::none})
    if (to_string(m) == v) return m;
  throw std::invalid_argument("bad value for " + std::string(key) + ": '" + std::string(v) + "' (sparse|mlp|none)");
}

FusionMode parse_fusion_mode(std::string_view key, std::string_view v) {
  for (auto m : {FusionMode::transformer, FusionMode::mean, FusionMode::max, FusionMode::min, FusionMode::mlp})
    if (to_string(m) == v) return m;
  throw std::invalid_argument("bad value for " + std::string(key) + ": '" + std::string(v) +
                              "' (transformer|mean|max|min|mlp)");
}

}  // namespace

std::size_t ModelConfig::k_for(Modality m) const {
  const std::size_t n = experts[static_cast<std::size_t>(m)];
  return top_k == 0 ? n : std::min(top_k, n);
}

void ModelConfig::validate() const {
  if (hidden == 0 || hidden % 4 != 0) throw std::invalid_argument("hidden must be a positive multiple of 4");
  for (std::size_t i = 0; i < kNumModalities; ++i) {
    if (experts[i] == 0) throw std::invalid_argument(std::string(kExpertKeys[i]) + " must be at least 1");
  }
  if (heads == 0 || hidden % heads != 0) throw std::invalid_argument("hidden must be divisible by heads");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout must lie in [0, 1)");
  if (gnn_layers == 0) throw std::invalid_argument("gnn_layers must be at least 1");
  if (pool_kernel == 0 || conv_size == 0) throw std::invalid_argument("pool_kernel and conv_size must be positive");
  const std::size_t pooled = pool_kernel >= kNumTokens ? 1 : kNumTokens / pool_kernel;
  if (fusion == FusionMode::transformer && conv_size > pooled) {
    throw std::invalid_argument("conv_size exceeds the pooled attention map");
  }
  if (std::none_of(enabled.begin(), enabled.end(), [](bool b) { return b; })) {
    throw std::invalid_argument("at least one modality must be enabled");
  }
}

std::vector<std::pair<std::string, std::string>> ModelConfig::entries() const {
  std::vector<std::pair<std::string, std::string>> out;
  out.emplace_back("hidden", std::to_string(hidden));
  for (std::size_t i = 0; i < kNumModalities; ++i) out.emplace_back(kExpertKeys[i], std::to_string(experts[i]));
  out.emplace_back("top_k", top_k == 0 ? "all" : std::to_string(top_k));
  out.emplace_back("heads", std::to_string(heads));
  out.emplace_back("dropout", format_double(dropout));
  out.emplace_back("gnn_layers", std::to_string(gnn_layers));
  out.emplace_back("pool_kernel", std::to_string(pool_kernel));
  out.emplace_back("conv_size", std::to_string(conv_size));
  out.emplace_back("ffn_dim", std::to_string(ffn_dim));
  out.emplace_back("noisy_gating", noisy_gating ? "true" : "false");
  out.emplace_back("moe", std::string(to_string(moe)));
  out.emplace_back("fusion", std::string(to_string(fusion)));
  std::string mods;
  for (auto m : kModalities) {
    if (!uses(m)) continue;
    if (!mods.empty()) mods += ",";
    mods += to_string(m);
  }
  out.emplace_back("enabled_modalities", mods);
  return out;
}

bool ModelConfig::apply(std::string_view key, std::string_view raw) {
  const auto value = trim(raw);
  if (key == "hidden") {
    hidden = parse_number<std::size_t>(key, value);
  } else if (key == "top_k") {
    top_k = value == "all" ? 0 : parse_number<std::size_t>(key, value);
    if (top_k == 0 && value != "all") throw std::invalid_argument("top_k must be positive or 'all'");
  } else if (key == "heads") {
    heads = parse_number<std::size_t>(key, value);
  } else if (key == "dropout") {
    dropout = parse_number<double>(key, value);
  } else if (key == "gnn_layers") {
    gnn_layers = parse_number<std::size_t>(key, value);
  } else if (key == "pool_kernel") {
    pool_kernel = parse_number<std::size_t>(key, value);
  } else if (key == "conv_size") {
    conv_size = parse_number<std::size_t>(key, value);
  } else if (key == "ffn_dim") {
    ffn_dim = parse_number<std::size_t>(key, value);
  } else if (key == "noisy_gating") {
    noisy_gating = parse_flag(key, value);
  } else if (key == "moe") {
    moe = parse_moe_mode(key, value);
  } else if (key == "fusion") {
    fusion = parse_fusion_mode(key, value);
  } else if (key == "enabled_modalities") {
    enabled = {false, false, false};
    for (const auto& name : split_list(value)) {
      const auto m = parse_modality(name);
      if (!m) throw std::invalid_argument("bad value for enabled_modalities: unknown modality '" + name + "'");
      enabled[static_cast<std::size_t>(*m)] = true;
    }
  } else {
    for (std::size_t i = 0; i < kNumModalities; ++i) {
      if (key == kExpertKeys[i]) {
        experts[i] = parse_number<std::size_t>(key, value);
        return true;
      }
    }
    return false;
  }
  return true;
}

BotMoE::BotMoE(const ModelConfig& config, std::size_t embed_dim, std::uint64_t seed)
    : config_(config), embed_dim_(embed_dim) {
  config_.validate();
  const std::size_t d = config_.hidden;
  Rng rng(Rng::mix(seed, 0x6d6f64656cULL));
  if (config_.uses(Modality::graph)) graph_ = GraphEncoder(embed_dim, d, config_.gnn_layers, rng);
  if (config_.uses(Modality::text)) text_ = TextEncoder(embed_dim, d, rng);
  if (config_.uses(Modality::metadata)) metadata_ = MetadataEncoder(d, rng);
  for (auto m : kModalities) {
    const auto i = static_cast<std::size_t>(m);
    if (!config_.uses(m)) continue;
    if (config_.moe == MoeMode::sparse) {
      moe_[i] = MoeLayer(d, config_.experts[i], config_.k_for(m), rng);
      moe_[i].noisy_gating = config_.noisy_gating;
    } else if (config_.moe == MoeMode::mlp) {
      mlp_[i] = Mlp2(d, config_.experts[i] * d, d, rng);
    }
  }
  switch (config_.fusion) {
    case FusionMode::transformer:
      transformer_ = FusionTransformer(d, config_.heads, config_.ffn_dim ? config_.ffn_dim : d, rng);
      consistency_ = ConsistencyHead(config_.heads, config_.conv_size, config_.pool_kernel, rng);
      classifier_ = ClassifierHead(kNumTokens * d + consistency_.output_size(), rng);
      break;
    case FusionMode::mlp:
      fusion_mlp_ = Mlp2(kNumTokens * d, d, d, rng);
      classifier_ = ClassifierHead(d, rng);
      break;
    default:
      classifier_ = ClassifierHead(d, rng);
  }
}

Tensor BotMoE::encode(Modality m, const InputFeatures& in, const ForwardContext& ctx) const {
  switch (m) {
    case Modality::graph: return graph_.encode(in, ctx);
    case Modality::text: return text_.encode(in, ctx);
    case Modality::metadata: return metadata_.encode(in, ctx);
  }
  throw std::logic_error("unknown modality");
}

ModelOutput BotMoE::forward(const InputFeatures& in, const ForwardContext& ctx) const {
  const std::size_t n = in.numeric.dim(0);
  const std::size_t d = config_.hidden;
  ModelOutput out;
  for (auto m : kModalities) {
    const auto i = static_cast<std::size_t>(m);
    if (!config_.uses(m)) {
      out.tokens[i] = Tensor::zeros({n, d});
      continue;
    }
    out.embeddings[i] = encode(m, in, ctx);
    switch (config_.moe) {
      case MoeMode::sparse:
        out.routing[i] = moe_[i].forward(out.embeddings[i], ctx);
        out.tokens[i] = out.routing[i]->z;
        break;
      case MoeMode::mlp: out.tokens[i] = mlp_[i].forward(out.embeddings[i], ctx); break;
      case MoeMode::none: out.tokens[i] = out.embeddings[i]; break;
    }
  }

  auto stacked = [&] {
    std::vector<Tensor> rows;
    for (const auto& t : out.tokens) rows.push_back(reshape(t, {n, 1, d}));
    return concat(rows, 1);
  };
  switch (config_.fusion) {
    case FusionMode::transformer: {
      auto fused = transformer_.forward(out.tokens, ctx);
      out.attention = fused.attention;
      out.consistency = consistency_.forward(fused.attention);
      out.logits = classifier_.forward({fused.tokens[0], fused.tokens[1], fused.tokens[2], out.consistency});
      break;
    }
    case FusionMode::mean: out.logits = classifier_.forward({mean_axis(stacked(), 1)}); break;
    case FusionMode::max: out.logits = classifier_.forward({max_axis(stacked(), 1)}); break;
    case FusionMode::min: out.logits = classifier_.forward({min_axis(stacked(), 1)}); break;
    case FusionMode::mlp:
      out.logits = classifier_.forward({fusion_mlp_.forward(concat({out.tokens[0], out.tokens[1], out.tokens[2]}, 1), ctx)});
      break;
  }
  return out;
}

ParamList BotMoE::parameters() const {
  ParamList params;
  if (config_.uses(Modality::graph)) graph_.collect("graph", params);
  if (config_.uses(Modality::text)) text_.collect("text", params);
  if (config_.uses(Modality::metadata)) metadata_.collect("metadata", params);
  for (auto m : kModalities) {
    const auto i = static_cast<std::size_t>(m);
    if (!config_.uses(m)) continue;
    const std::string prefix = std::string(to_string(m));
    if (config_.moe == MoeMode::sparse) moe_[i].collect("moe." + prefix, params);
    if (config_.moe == MoeMode::mlp) mlp_[i].collect("mlp." + prefix, params);
  }
  if (config_.fusion == FusionMode::transformer) {
    transformer_.collect("fusion", params);
    consistency_.collect("consistency", params);
  }
  if (config_.fusion == FusionMode::mlp) fusion_mlp_.collect("fusion_mlp", params);
  classifier_.collect("classifier", params);
  return params;
}

}  // namespace botmoe
