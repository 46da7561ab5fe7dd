#pragma once

// TrainConfig and its JSON round-trip. Every field is explicit in release
// configs; validation returns one line per violation so the CLI can report
// them all at once.

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "grpodlab/errors.hpp"
#include "grpodlab/grpo.hpp"
#include "grpodlab/policy.hpp"
#include "grpodlab/tasks.hpp"

namespace grpodlab {

enum class TrainMethod { GrpoConstant, GrpoD, Sft };

inline std::string method_name(TrainMethod m) {
  switch (m) {
    case TrainMethod::GrpoConstant: return "grpo_constant";
    case TrainMethod::GrpoD: return "grpo_d";
    default: return "sft";
  }
}

inline TrainMethod method_from_name(const std::string& s) {
  if (s == "grpo_constant") return TrainMethod::GrpoConstant;
  if (s == "grpo_d") return TrainMethod::GrpoD;
  if (s == "sft") return TrainMethod::Sft;
  throw config_error("unknown method: " + s);
}

// A dataset is either generated in-process from a spec or loaded from disk.
struct DataSource {
  DatasetSpec spec;
  std::string path;  // non-empty: load instead of generate
  bool from_path() const { return !path.empty(); }
  bool operator==(const DataSource&) const = default;
};

struct OptimizerCfg {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool operator==(const OptimizerCfg&) const = default;
};

struct TrainConfig {
  TrainMethod method = TrainMethod::GrpoD;
  DataSource train_data;
  std::vector<DataSource> eval_data;
  KLScheduleCfg schedule{0.04, 0.1, 90, 300};
  ClipCfg clip{0.2};
  double alpha = 1.0;
  int group_size = 8;
  int prompts_per_step = 16;
  int inner_epochs = 1;
  int total_steps = 300;
  int eval_every = 0;  // 0: evaluate only after the final step
  int ckpt_every = 0;  // 0: write only the final checkpoint
  std::uint64_t seed = 1;
  SamplerCfg sampler{1.0, 40, false};
  int d_model = 32;
  int n_heads = 2;
  int n_blocks = 1;
  int max_context = 160;
  int vocab_grid_symbols = 6;
  OptimizerCfg optimizer;
  std::string init_ckpt;       // optional warm-start weights; also pi_ref
  int sft_max_instances = 0;   // few-shot cap for SFT; 0 = whole pool
  bool eval_records = false;
  int threads = 0;  // 0: resolve from env / hardware
  std::string out_dir;

  PolicyArch arch(const Vocab& vocab) const {
    return PolicyArch{vocab.size(), d_model, n_heads, n_blocks, max_context};
  }

  bool operator==(const TrainConfig&) const;
};

inline bool operator==(const SamplerCfg& a, const SamplerCfg& b) {
  return a.temperature == b.temperature &&
         a.max_new_tokens == b.max_new_tokens && a.greedy == b.greedy;
}

inline bool operator==(const KLScheduleCfg& a, const KLScheduleCfg& b) {
  return a.beta_min == b.beta_min && a.beta_max == b.beta_max &&
         a.exploration_steps == b.exploration_steps &&
         a.total_steps == b.total_steps;
}

inline bool operator==(const ClipCfg& a, const ClipCfg& b) {
  return a.epsilon == b.epsilon;
}

inline bool TrainConfig::operator==(const TrainConfig& o) const {
  return method == o.method && train_data == o.train_data &&
         eval_data == o.eval_data && schedule == o.schedule &&
         clip == o.clip && alpha == o.alpha && group_size == o.group_size &&
         prompts_per_step == o.prompts_per_step &&
         inner_epochs == o.inner_epochs && total_steps == o.total_steps &&
         eval_every == o.eval_every && ckpt_every == o.ckpt_every &&
         seed == o.seed && sampler == o.sampler && d_model == o.d_model &&
         n_heads == o.n_heads && n_blocks == o.n_blocks &&
         max_context == o.max_context &&
         vocab_grid_symbols == o.vocab_grid_symbols &&
         optimizer == o.optimizer && init_ckpt == o.init_ckpt &&
         sft_max_instances == o.sft_max_instances &&
         eval_records == o.eval_records && threads == o.threads &&
         out_dir == o.out_dir;
}

// --- JSON ---

inline nlohmann::json to_json(const DatasetSpec& s) {
  return {{"family", dataset_family_name(s.family)},
          {"count", s.count},
          {"grid_rows", s.grid_rows},
          {"grid_cols", s.grid_cols},
          {"alphabet_size", s.alphabet_size},
          {"chain_length", s.chain_length},
          {"value_lo", s.value_range.lo},
          {"value_hi", s.value_range.hi},
          {"seed", s.seed}};
}

inline DatasetSpec dataset_spec_from_json(const nlohmann::json& j) {
  DatasetSpec s;
  s.family = dataset_family_from_name(j.at("family").get<std::string>());
  s.count = j.value("count", 1);
  s.grid_rows = j.value("grid_rows", 3);
  s.grid_cols = j.value("grid_cols", 3);
  s.alphabet_size = j.value("alphabet_size", 6);
  s.chain_length = j.value("chain_length", 3);
  s.value_range.lo = j.value("value_lo", 0);
  s.value_range.hi = j.value("value_hi", 9);
  s.seed = j.value("seed", std::uint64_t{0});
  return s;
}

inline nlohmann::json to_json(const DataSource& d) {
  if (d.from_path()) return {{"path", d.path}};
  return {{"spec", to_json(d.spec)}};
}

inline DataSource data_source_from_json(const nlohmann::json& j) {
  DataSource d;
  if (j.contains("path") && j.contains("spec"))
    throw config_error("data source: give either 'path' or 'spec', not both");
  if (j.contains("path"))
    d.path = j.at("path").get<std::string>();
  else if (j.contains("spec"))
    d.spec = dataset_spec_from_json(j.at("spec"));
  else
    throw config_error("data source: missing 'path' or 'spec'");
  return d;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json eval = nlohmann::json::array();
  for (const auto& e : c.eval_data) eval.push_back(to_json(e));
  return {{"method", method_name(c.method)},
          {"train_data", to_json(c.train_data)},
          {"eval_data", eval},
          {"schedule",
           {{"beta_min", c.schedule.beta_min},
            {"beta_max", c.schedule.beta_max},
            {"exploration_steps", c.schedule.exploration_steps},
            {"total_steps", c.schedule.total_steps}}},
          {"clip_epsilon", c.clip.epsilon},
          {"alpha", c.alpha},
          {"group_size", c.group_size},
          {"prompts_per_step", c.prompts_per_step},
          {"inner_epochs", c.inner_epochs},
          {"total_steps", c.total_steps},
          {"eval_every", c.eval_every},
          {"ckpt_every", c.ckpt_every},
          {"seed", c.seed},
          {"sampler",
           {{"temperature", c.sampler.temperature},
            {"max_new_tokens", c.sampler.max_new_tokens},
            {"greedy", c.sampler.greedy}}},
          {"arch",
           {{"d_model", c.d_model},
            {"n_heads", c.n_heads},
            {"n_blocks", c.n_blocks},
            {"max_context", c.max_context}}},
          {"vocab_grid_symbols", c.vocab_grid_symbols},
          {"optimizer",
           {{"lr", c.optimizer.lr},
            {"beta1", c.optimizer.beta1},
            {"beta2", c.optimizer.beta2},
            {"eps", c.optimizer.eps}}},
          {"init_ckpt", c.init_ckpt},
          {"sft_max_instances", c.sft_max_instances},
          {"eval_records", c.eval_records},
          {"threads", c.threads},
          {"out_dir", c.out_dir}};
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.method = method_from_name(j.at("method").get<std::string>());
  c.train_data = data_source_from_json(j.at("train_data"));
  c.eval_data.clear();
  for (const auto& e : j.value("eval_data", nlohmann::json::array()))
    c.eval_data.push_back(data_source_from_json(e));
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    c.schedule.beta_min = s.value("beta_min", 0.04);
    c.schedule.beta_max = s.value("beta_max", 0.1);
    c.schedule.exploration_steps = s.value("exploration_steps", 90);
    c.schedule.total_steps = s.value("total_steps", 300);
  }
  c.clip.epsilon = j.value("clip_epsilon", 0.2);
  c.alpha = j.value("alpha", 1.0);
  c.group_size = j.value("group_size", 8);
  c.prompts_per_step = j.value("prompts_per_step", 16);
  c.inner_epochs = j.value("inner_epochs", 1);
  c.total_steps = j.value("total_steps", 300);
  c.eval_every = j.value("eval_every", 0);
  c.ckpt_every = j.value("ckpt_every", 0);
  c.seed = j.value("seed", std::uint64_t{1});
  if (j.contains("sampler")) {
    const auto& s = j.at("sampler");
    c.sampler.temperature = s.value("temperature", 1.0);
    c.sampler.max_new_tokens = s.value("max_new_tokens", 40);
    c.sampler.greedy = s.value("greedy", false);
  }
  if (j.contains("arch")) {
    const auto& a = j.at("arch");
    c.d_model = a.value("d_model", 32);
    c.n_heads = a.value("n_heads", 2);
    c.n_blocks = a.value("n_blocks", 1);
    c.max_context = a.value("max_context", 160);
  }
  c.vocab_grid_symbols = j.value("vocab_grid_symbols", 6);
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    c.optimizer.lr = o.value("lr", 1e-3);
    c.optimizer.beta1 = o.value("beta1", 0.9);
    c.optimizer.beta2 = o.value("beta2", 0.999);
    c.optimizer.eps = o.value("eps", 1e-8);
  }
  c.init_ckpt = j.value("init_ckpt", std::string{});
  c.sft_max_instances = j.value("sft_max_instances", 0);
  c.eval_records = j.value("eval_records", false);
  c.threads = j.value("threads", 0);
  c.out_dir = j.value("out_dir", std::string{});
  return c;
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open config: " + path);
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw config_error("config is not valid JSON: " + path);
  return config_from_json(j);
}

// Longest prompt a dataset spec can produce; bounds the context need.
inline int max_prompt_length(const DatasetSpec& s) {
  const int counting = s.grid_rows * s.grid_cols + (s.grid_rows - 1) + 2;
  const int arith = 3 + 6 * (s.chain_length - 1) + 2;
  switch (s.family) {
    case DatasetFamily::Counting: return counting;
    case DatasetFamily::ArithChain: return arith;
    default: return std::max(counting, arith);
  }
}

inline std::vector<std::string> validate_config(const TrainConfig& c) {
  std::vector<std::string> bad;
  const bool rl = c.method != TrainMethod::Sft;

  if (c.total_steps < 1) bad.push_back("total_steps must be >= 1");
  if (c.prompts_per_step < 1) bad.push_back("prompts_per_step must be >= 1");
  if (c.inner_epochs < 1) bad.push_back("inner_epochs must be >= 1");
  if (c.eval_every < 0) bad.push_back("eval_every must be >= 0");
  if (c.ckpt_every < 0) bad.push_back("ckpt_every must be >= 0");
  if (!(c.alpha >= 0.0)) bad.push_back("alpha must be >= 0");
  if (!(c.clip.epsilon > 0.0 && c.clip.epsilon < 1.0))
    bad.push_back("clip_epsilon must be in (0, 1)");
  if (!(c.optimizer.lr > 0.0)) bad.push_back("optimizer.lr must be > 0");

  if (rl) {
    if (c.group_size < 2) bad.push_back("group_size must be >= 2 for GRPO");
    if (c.method == TrainMethod::GrpoConstant &&
        c.schedule.beta_min != c.schedule.beta_max)
      bad.push_back("grpo_constant requires beta_min == beta_max");
    if (c.schedule.total_steps != c.total_steps)
      bad.push_back("schedule.total_steps must equal total_steps");
    try {
      c.schedule.validate();
    } catch (const contract_error& e) {
      bad.push_back(e.what());
    }
    if (c.sampler.greedy)
      bad.push_back("GRPO rollouts require stochastic sampling, not greedy");
    if (!(c.sampler.temperature > 0.0))
      bad.push_back("sampler.temperature must be > 0");
  }
  if (c.sampler.max_new_tokens < 1)
    bad.push_back("sampler.max_new_tokens must be >= 1");

  if (c.d_model < 1 || c.n_heads < 1 || c.d_model % c.n_heads != 0)
    bad.push_back("arch: d_model must be a positive multiple of n_heads");
  if (c.n_blocks < 1) bad.push_back("arch: n_blocks must be >= 1");
  if (c.vocab_grid_symbols < 2 || c.vocab_grid_symbols > Vocab::kMaxGridSymbols)
    bad.push_back("vocab_grid_symbols must be in [2, 20]");

  auto check_source = [&bad, &c](const DataSource& d, const std::string& tag) {
    if (d.from_path()) return;  // checked at load time
    if (d.spec.count < 1) bad.push_back(tag + ": count must be >= 1");
    if (d.spec.family != DatasetFamily::ArithChain) {
      if (d.spec.grid_rows < 1 || d.spec.grid_cols < 1 ||
          d.spec.grid_rows * d.spec.grid_cols > 64)
        bad.push_back(tag + ": need 1 <= grid_rows*grid_cols <= 64");
      if (d.spec.alphabet_size < 2 ||
          d.spec.alphabet_size > c.vocab_grid_symbols)
        bad.push_back(tag + ": alphabet_size must be in [2, vocab_grid_symbols]");
    }
    if (d.spec.family != DatasetFamily::Counting) {
      if (d.spec.chain_length < 2 ||
          d.spec.chain_length > Vocab::kMaxVariables)
        bad.push_back(tag + ": chain_length must be in [2, 6]");
      if (d.spec.value_range.lo < 0 || d.spec.value_range.hi > 9 ||
          d.spec.value_range.lo > d.spec.value_range.hi)
        bad.push_back(tag + ": value range must satisfy 0 <= lo <= hi <= 9");
    }
    if (!d.from_path() &&
        max_prompt_length(d.spec) + c.sampler.max_new_tokens > c.max_context)
      bad.push_back(tag +
                    ": prompt plus max_new_tokens cannot exceed max_context");
  };
  check_source(c.train_data, "train_data");
  for (std::size_t i = 0; i < c.eval_data.size(); ++i) {
    check_source(c.eval_data[i], "eval_data[" + std::to_string(i) + "]");
    if (!c.eval_data[i].from_path() &&
        c.eval_data[i].spec.family == DatasetFamily::Mixed)
      bad.push_back("eval_data[" + std::to_string(i) +
                    "]: eval sets must be single-family");
  }

  if (c.out_dir.empty()) bad.push_back("out_dir must be set");
  return bad;
}

inline void require_valid(const TrainConfig& c) {
  auto bad = validate_config(c);
  if (bad.empty()) return;
  std::string msg = "invalid config:";
  for (const auto& line : bad) msg += "\n  - " + line;
  throw config_error(msg);
}

}  // namespace grpodlab
