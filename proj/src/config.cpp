// SPDX-License-Identifier: Apache-2.0

#include "blu/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "blu/hash.hpp"

namespace blu {

using nlohmann::json;

namespace {

// Reads one JSON object, remembering which keys were consumed so leftovers
// can be reported as unknown.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  template <class T>
  void get(const char* key, T& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError("expected true or false");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError("expected an integer");
        if constexpr (std::is_unsigned_v<T>)
          if (v.get<std::int64_t>() < 0 && !v.is_number_unsigned()) throw ConfigError("expected a non-negative integer");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError("expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError("expected a string");
      }
      out = v.get<T>();
    } catch (const ConfigError& e) {
      throw ConfigError(where(key) + ": " + e.what());
    } catch (const json::exception& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  template <class T, class Parse>
  void get_enum(const char* key, T& out, Parse parse) {
    std::string s;
    get(key, s);
    if (!j_.contains(key)) return;
    try {
      out = parse(s);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  template <class T>
  void get_list(const char* key, std::vector<T>& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_array()) throw ConfigError(where(key) + ": expected a list");
    std::vector<T> items;
    for (const auto& item : v) {
      if (!item.is_number() || (std::is_integral_v<T> && !item.is_number_integer()))
        throw ConfigError(where(key) + ": expected a list of numbers");
      if (std::is_unsigned_v<T> && item.get<double>() < 0) throw ConfigError(where(key) + ": negative entry");
      items.push_back(item.get<T>());
    }
    out = std::move(items);
  }

  Reader sub(const char* key) {
    seen_.insert(key);
    return Reader(j_.at(key), where(key));
  }

  const json& raw(const char* key) const { return j_.at(key); }
  std::string where(const std::string& key = "") const {
    if (key.empty()) return path_.empty() ? "<root>" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  void finish() const {
    for (const auto& [key, v] : j_.items())
      if (!seen_.count(key)) throw ConfigError("unknown config key '" + where(key) + "'");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class F>
void section(Reader& r, const char* key, F f) {
  if (!r.has(key)) return;
  Reader s = r.sub(key);
  f(s);
  s.finish();
}

void read_mixture(Reader& r, MixtureSpec& m) {
  if (r.has("circle") && r.has("components"))
    throw ConfigError(r.where() + ": give either 'circle' or 'components', not both");
  section(r, "circle", [&](Reader& c) {
    std::size_t count = 8;
    double radius = 5.0, variance = 0.15;
    c.get("count", count);
    c.get("radius", radius);
    c.get("variance", variance);
    const double std_keep = m.data_std;
    m = circle_mixture(count, radius, variance);
    m.data_std = std_keep;
  });
  if (r.has("components")) {
    const json& list = r.raw("components");
    if (!list.is_array() || list.empty()) throw ConfigError(r.where("components") + ": expected a non-empty list");
    m.components.clear();
    for (std::size_t i = 0; i < list.size(); ++i) {
      Reader c(list[i], r.where("components") + "[" + std::to_string(i) + "]");
      MixtureComponent comp;
      c.get_list("mean", comp.mean);
      std::vector<double> cov;
      c.get_list("cov", cov);
      const std::size_t d = comp.mean.size();
      if (cov.size() != d * d)
        throw ConfigError(c.where("cov") + ": expected " + std::to_string(d * d) + " entries (row-major)");
      comp.cov = Tensor(Shape{d, d}, cov);
      c.get("weight", comp.weight);
      c.finish();
      m.components.push_back(std::move(comp));
    }
    m.concept_count = m.components.size() + 1;
  }
  r.get("data_std", m.data_std);
}

ExperimentConfig from_json(const json& root) {
  ExperimentConfig cfg;
  Reader r(root, "");
  r.get("seed", cfg.seed);
  r.get("out", cfg.out);
  section(r, "mixture", [&](Reader& s) { read_mixture(s, cfg.mixture); });
  section(r, "schedule", [&](Reader& s) {
    s.get_enum("kind", cfg.schedule.kind, parse_schedule_kind);
    s.get("T", cfg.schedule.T);
    s.get("beta_start", cfg.schedule.beta_start);
    s.get("beta_end", cfg.schedule.beta_end);
    s.get("time_scale", cfg.schedule.time_scale);
  });
  section(r, "model", [&](Reader& s) {
    s.get_list("hidden", cfg.model.hidden);
    s.get("time_embed_dim", cfg.model.time_embed_dim);
    s.get("concept_embed_dim", cfg.model.concept_embed_dim);
    s.get_list("feature_taps", cfg.model.feature_taps);
  });
  section(r, "train", [&](Reader& s) {
    s.get("iters", cfg.train.iters);
    s.get("batch", cfg.train.batch);
    s.get("lr", cfg.train.lr);
    s.get_enum("optimizer", cfg.train.optimizer, parse_optimizer_kind);
    s.get("cosine_decay", cfg.train.cosine_decay);
    s.get("uncond_drop", cfg.train.uncond_drop);
    s.get("log_every", cfg.train.log_every);
  });
  section(r, "prune", [&](Reader& s) {
    s.get("strategy", cfg.prune.strategy);
    s.get("budget", cfg.prune.options.budget);
    s.get_enum("scope", cfg.prune.options.scope, parse_prune_scope);
    s.get("exempt_embeddings", cfg.prune.options.exempt_embeddings);
    s.get("exempt_biases", cfg.prune.options.exempt_biases);
  });
  auto read_weights = [](Reader& s, FtWeights& w) {
    section(s, "weights", [&](Reader& ws) {
      ws.get("diff", w.diff);
      ws.get("outkd", w.outkd);
      ws.get("featkd", w.featkd);
    });
  };
  section(r, "ft", [&](Reader& s) {
    s.get("iters", cfg.ft.iters);
    s.get("batch", cfg.ft.batch);
    s.get("lr", cfg.ft.lr);
    s.get_enum("optimizer", cfg.ft.optimizer, parse_optimizer_kind);
    read_weights(s, cfg.ft.weights);
    s.get_enum("init", cfg.ft.init, parse_init_mode);
    s.get("log_every", cfg.ft.log_every);
    s.get("uncond_drop", cfg.ft.uncond_drop);
    s.get_list("concepts", cfg.ft.concepts);
  });
  section(r, "unlearn", [&](Reader& s) {
    s.get_enum("mode", cfg.unlearn.spec.mode, parse_unlearn_mode);
    s.get("target", cfg.unlearn.spec.target);
    s.get("anchor", cfg.unlearn.spec.anchor);
    s.get("guidance_eta", cfg.unlearn.spec.guidance_eta);
    s.get("ft_exclude_target", cfg.unlearn.ft_exclude_target);
  });
  section(r, "bilevel", [&](Reader& s) {
    BilevelConfig& b = cfg.bilevel;
    s.get("E", b.E);
    s.get("K", b.K);
    s.get("lambda", b.lambda);
    s.get("eta", b.eta);
    s.get("zeta", b.zeta);
    s.get_enum("vartheta_policy", b.vartheta_policy, parse_vartheta_policy);
    s.get_enum("optimizer", b.optimizer, parse_optimizer_kind);
    s.get("beta1", b.beta1);
    s.get("beta2", b.beta2);
    s.get("batch", b.batch_size);
    read_weights(s, b.ft_weights);
  });
  section(r, "two_stage", [&](Reader& s) {
    s.get("N", cfg.two_stage.N);
    s.get("M", cfg.two_stage.M);
    s.get("lr", cfg.two_stage.lr);
  });
  section(r, "eval", [&](Reader& s) {
    s.get("samples", cfg.eval.samples);
    s.get("heldout_n", cfg.eval.heldout_n);
    s.get("guidance", cfg.eval.guidance);
  });
  r.finish();
  cfg.model.concept_count = cfg.mixture.concept_count;
  cfg.model.input_dim = cfg.mixture.dim();
  cfg.bilevel.unlearn = cfg.unlearn.spec;
  cfg.validate();
  return cfg;
}

json weights_json(const FtWeights& w) { return {{"diff", w.diff}, {"outkd", w.outkd}, {"featkd", w.featkd}}; }

json to_json(const ExperimentConfig& cfg) {
  json comps = json::array();
  for (const auto& c : cfg.mixture.components) {
    const auto cov = c.cov.data();
    comps.push_back({{"mean", c.mean}, {"cov", std::vector<double>(cov.begin(), cov.end())}, {"weight", c.weight}});
  }
  const BilevelConfig& b = cfg.bilevel;
  return {
      {"seed", cfg.seed},
      {"out", cfg.out},
      {"mixture", {{"components", comps}, {"data_std", cfg.mixture.data_std}}},
      {"schedule",
       {{"kind", to_string(cfg.schedule.kind)},
        {"T", cfg.schedule.T},
        {"beta_start", cfg.schedule.beta_start},
        {"beta_end", cfg.schedule.beta_end},
        {"time_scale", cfg.schedule.time_scale}}},
      {"model",
       {{"hidden", cfg.model.hidden},
        {"time_embed_dim", cfg.model.time_embed_dim},
        {"concept_embed_dim", cfg.model.concept_embed_dim},
        {"feature_taps", cfg.model.feature_taps}}},
      {"train",
       {{"iters", cfg.train.iters},
        {"batch", cfg.train.batch},
        {"lr", cfg.train.lr},
        {"optimizer", to_string(cfg.train.optimizer)},
        {"cosine_decay", cfg.train.cosine_decay},
        {"uncond_drop", cfg.train.uncond_drop},
        {"log_every", cfg.train.log_every}}},
      {"prune",
       {{"strategy", cfg.prune.strategy},
        {"budget", cfg.prune.options.budget},
        {"scope", to_string(cfg.prune.options.scope)},
        {"exempt_embeddings", cfg.prune.options.exempt_embeddings},
        {"exempt_biases", cfg.prune.options.exempt_biases}}},
      {"ft",
       {{"iters", cfg.ft.iters},
        {"batch", cfg.ft.batch},
        {"lr", cfg.ft.lr},
        {"optimizer", to_string(cfg.ft.optimizer)},
        {"weights", weights_json(cfg.ft.weights)},
        {"init", to_string(cfg.ft.init)},
        {"log_every", cfg.ft.log_every},
        {"uncond_drop", cfg.ft.uncond_drop},
        {"concepts", cfg.ft.concepts}}},
      {"unlearn",
       {{"mode", to_string(cfg.unlearn.spec.mode)},
        {"target", cfg.unlearn.spec.target},
        {"anchor", cfg.unlearn.spec.anchor},
        {"guidance_eta", cfg.unlearn.spec.guidance_eta},
        {"ft_exclude_target", cfg.unlearn.ft_exclude_target}}},
      {"bilevel",
       {{"E", b.E},
        {"K", b.K},
        {"lambda", b.lambda},
        {"eta", b.eta},
        {"zeta", b.zeta},
        {"vartheta_policy", to_string(b.vartheta_policy)},
        {"optimizer", to_string(b.optimizer)},
        {"beta1", b.beta1},
        {"beta2", b.beta2},
        {"batch", b.batch_size},
        {"weights", weights_json(b.ft_weights)}}},
      {"two_stage", {{"N", cfg.two_stage.N}, {"M", cfg.two_stage.M}, {"lr", cfg.two_stage.lr}}},
      {"eval",
       {{"samples", cfg.eval.samples}, {"heldout_n", cfg.eval.heldout_n}, {"guidance", cfg.eval.guidance}}},
  };
}

}  // namespace

NoiseSchedule ScheduleConfig::build() const {
  NoiseSchedule s = kind == ScheduleKind::Edm ? NoiseSchedule::edm(T, time_scale)
                                              : NoiseSchedule::variance_preserving_linear(T, beta_start, beta_end);
  s.validate();
  return s;
}

void ExperimentConfig::validate() const {
  try {
    mixture.validate();
    model.validate();
    schedule.build();
    if (model.concept_count != mixture.concept_count || model.input_dim != mixture.dim())
      throw std::invalid_argument("model concept count / input dim must match the mixture");
    if (train.iters < 0 || ft.iters < 0 || train.batch == 0 || ft.batch == 0)
      throw std::invalid_argument("iteration counts must be >= 0 and batch sizes positive");
    if (train.log_every < 1 || ft.log_every < 1) throw std::invalid_argument("log_every must be >= 1");
    if (!(train.lr >= 0.0 && ft.lr >= 0.0 && two_stage.lr >= 0.0))
      throw std::invalid_argument("learning rates must be >= 0");
    for (double p : {train.uncond_drop, ft.uncond_drop})
      if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("uncond_drop must lie in [0, 1]");
    if (prune.strategy != "magnitude") throw std::invalid_argument("unknown prune strategy '" + prune.strategy + "'");
    if (!(prune.options.budget >= 0.0 && prune.options.budget <= 1.0))
      throw std::invalid_argument("prune budget must lie in [0, 1]");
    ft.weights.validate();
    unlearn.spec.validate(mixture.concept_count);
    bilevel.validate();
    if (two_stage.N < 0 || two_stage.M < 0) throw std::invalid_argument("two_stage N and M must be >= 0");
    for (int c : ft.concepts) mixture.component(c);
    if (unlearn_ft_concepts().empty()) throw std::invalid_argument("no fine-tuning concepts left after excluding the target");
    if (eval.samples < 500 || eval.heldout_n < 1) throw std::invalid_argument("eval needs >= 500 samples and a held-out set");
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
}

std::vector<int> ExperimentConfig::unlearn_ft_concepts() const {
  std::vector<int> out;
  for (int c : ft.concepts.empty() ? mixture.real_concepts() : ft.concepts)
    if (!unlearn.ft_exclude_target || c != unlearn.spec.target) out.push_back(c);
  return out;
}

EvalOptions ExperimentConfig::eval_options() const {
  EvalOptions o;
  o.samples = eval.samples;
  o.heldout_n = eval.heldout_n;
  o.guidance = eval.guidance;
  o.ft_weights = ft.weights;
  return o;
}

ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return from_json(j);
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string dump_config(const ExperimentConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

std::string config_digest(const ExperimentConfig& cfg) {
  json j = to_json(cfg);
  j.erase("out");
  return sha256_hex(j.dump());
}

void echo_config(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::ofstream os(out_dir / "config.resolved.json", std::ios::binary);
  os << dump_config(cfg);
  if (!os) throw std::runtime_error("cannot write " + (out_dir / "config.resolved.json").string());
}

}  // namespace blu
