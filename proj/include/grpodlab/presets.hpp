#pragma once

// Experiment presets: the alpha sweep, the constant-KL sweep, the same-task
// {base, GRPO, SFT, GRPO-D} comparison, the cross-task 2x2x3 matrix, and the
// reward-curve run. Every preset starts from a shared "base" policy - a
// short SFT run over a mixed-family corpus that stands in for the pretrained
// backbone - and gives each post-training arm an identical budget.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <tuple>
#include <vector>

#include "grpodlab/config.hpp"
#include "grpodlab/trainer.hpp"

namespace grpodlab {

enum class PresetName { AlphaSweep, KlSweep, SameTask, CrossTask, Fig5Curves };

inline std::string preset_name_str(PresetName p) {
  switch (p) {
    case PresetName::AlphaSweep: return "alpha_sweep";
    case PresetName::KlSweep: return "kl_sweep";
    case PresetName::SameTask: return "same_task";
    case PresetName::CrossTask: return "cross_task";
    default: return "fig5_curves";
  }
}

inline PresetName preset_from_name(const std::string& s) {
  if (s == "alpha_sweep") return PresetName::AlphaSweep;
  if (s == "kl_sweep") return PresetName::KlSweep;
  if (s == "same_task") return PresetName::SameTask;
  if (s == "cross_task") return PresetName::CrossTask;
  if (s == "fig5_curves") return PresetName::Fig5Curves;
  throw config_error("unknown preset: " + s);
}

inline const std::vector<double>& alpha_sweep_values() {
  static const std::vector<double> v{0.00, 0.25, 0.50, 0.75, 1.00};
  return v;
}

inline const std::vector<double>& kl_sweep_values() {
  static const std::vector<double> v{0.00, 0.01, 0.02, 0.03, 0.04, 0.05};
  return v;
}

struct PresetOptions {
  std::string out_dir;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<DatasetFamily> families{DatasetFamily::Counting,
                                      DatasetFamily::ArithChain};
  int total_steps = 300;     // post-training budget per arm
  int pretrain_steps = 600;  // backbone-analog SFT on the mixed corpus
  int prompts_per_step = 8;
  int group_size = 8;
  int train_count = 512;
  int eval_count = 200;
  int threads = 0;
  bool quiet = false;
};

struct SummaryRow {
  std::string arm;
  std::string train_family;
  std::string eval_family;
  int seeds = 0;
  std::vector<double> accuracies;  // one per seed, NaN marks a missing cell
  double median = 0.0;
  double iqr = 0.0;
  std::vector<std::string> sources;  // eval report files backing each cell
};

struct PresetResult {
  PresetName name = PresetName::SameTask;
  std::vector<SummaryRow> rows;
  std::string summary_path;
  std::string base_ckpt;
  bool complete = true;
};

inline double median_of(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  if (n == 0) return 0.0;
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

// Tukey hinges: quartiles are medians of the lower/upper halves.
inline double iqr_of(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  if (n < 2) return 0.0;
  std::vector<double> lower(xs.begin(), xs.begin() + static_cast<long>(n / 2));
  std::vector<double> upper(xs.begin() + static_cast<long>((n + 1) / 2), xs.end());
  return median_of(upper) - median_of(lower);
}

// First index whose value reaches 90% of the curve's final value; the final
// value is the mean over the last tenth of the series.
struct CurveMilestone {
  double final_value = 0.0;
  int first_step_at_90pct = -1;
};

inline CurveMilestone curve_milestone(const std::vector<double>& series) {
  CurveMilestone m;
  if (series.empty()) return m;
  const std::size_t tail = std::max<std::size_t>(1, series.size() / 10);
  for (std::size_t i = series.size() - tail; i < series.size(); ++i)
    m.final_value += series[i];
  m.final_value /= static_cast<double>(tail);
  const double threshold = 0.9 * m.final_value;
  for (std::size_t i = 0; i < series.size(); ++i) {
    if (series[i] >= threshold) {
      m.first_step_at_90pct = static_cast<int>(i);
      break;
    }
  }
  return m;
}

namespace detail {

// Fixed corpus seeds: the datasets play the role of GeoQA/ClevR and stay
// identical across arms and run seeds.
constexpr std::uint64_t kTrainSeedCounting = 1001;
constexpr std::uint64_t kTrainSeedArith = 1002;
constexpr std::uint64_t kEvalSeedCounting = 2001;
constexpr std::uint64_t kEvalSeedArith = 2002;
constexpr std::uint64_t kPretrainSeed = 3001;
constexpr std::uint64_t kPretrainRunSeed = 777;

inline DatasetSpec family_spec(DatasetFamily family, int count,
                               std::uint64_t seed) {
  DatasetSpec s;
  s.family = family;
  s.count = count;
  s.grid_rows = 3;
  s.grid_cols = 3;
  s.alphabet_size = 6;
  s.chain_length = 3;
  s.value_range = {0, 9};
  s.seed = seed;
  return s;
}

inline DatasetSpec train_spec(DatasetFamily family, const PresetOptions& opt) {
  return family_spec(family, opt.train_count,
                     family == DatasetFamily::Counting ? kTrainSeedCounting
                                                       : kTrainSeedArith);
}

inline DatasetSpec eval_spec(DatasetFamily family, const PresetOptions& opt) {
  return family_spec(family, opt.eval_count,
                     family == DatasetFamily::Counting ? kEvalSeedCounting
                                                       : kEvalSeedArith);
}

inline TrainConfig arm_base_config(const PresetOptions& opt) {
  TrainConfig cfg;
  cfg.alpha = 1.0;
  cfg.clip = {0.2};
  cfg.group_size = opt.group_size;
  cfg.prompts_per_step = opt.prompts_per_step;
  cfg.inner_epochs = 1;
  cfg.total_steps = opt.total_steps;
  cfg.sampler = {1.0, 40, false};
  cfg.threads = opt.threads;
  return cfg;
}

// The paper's two dynamic regimes: a wider band for the content
// understanding analog, a lower band for the reasoning analog.
inline KLScheduleCfg dynamic_schedule(DatasetFamily family, int total_steps) {
  const int w = std::max(1, static_cast<int>(0.3 * total_steps + 0.5));
  if (family == DatasetFamily::Counting)
    return {0.04, 0.1, w, total_steps};
  return {0.0, 0.02, w, total_steps};
}

// Best constant weights used for the plain-GRPO comparison arms.
inline KLScheduleCfg constant_schedule(DatasetFamily family, int total_steps) {
  const double beta = family == DatasetFamily::Counting ? 0.04 : 0.01;
  return {beta, beta, std::max(1, total_steps / 2), total_steps};
}

}  // namespace detail

// Shared warm start: SFT over a mixed-family demo corpus. All arms of a
// preset initialize from (and anchor their KL to) this checkpoint.
inline std::string train_base_policy(const PresetOptions& opt) {
  TrainConfig cfg = detail::arm_base_config(opt);
  cfg.method = TrainMethod::Sft;
  cfg.total_steps = opt.pretrain_steps;
  cfg.seed = detail::kPretrainRunSeed;
  cfg.train_data.spec = detail::family_spec(DatasetFamily::Mixed,
                                            opt.train_count,
                                            detail::kPretrainSeed);
  cfg.out_dir = opt.out_dir + "/base";
  const std::string ckpt = cfg.out_dir + "/ckpt_final";
  if (std::filesystem::exists(ckpt)) return ckpt;  // reuse across presets
  train(cfg);
  return ckpt;
}

inline void write_summary_csv(const std::vector<SummaryRow>& rows,
                              const std::string& path) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot write " + path);
  out << "arm,train_family,eval_family,seeds,accuracies,median_accuracy,iqr,"
         "sources\n";
  for (const auto& r : rows) {
    out << r.arm << ',' << r.train_family << ',' << r.eval_family << ','
        << r.seeds << ',';
    for (std::size_t i = 0; i < r.accuracies.size(); ++i) {
      if (i) out << ';';
      if (std::isnan(r.accuracies[i]))
        out << "NA";
      else
        out << r.accuracies[i];
    }
    out << ',' << r.median << ',' << r.iqr << ',';
    for (std::size_t i = 0; i < r.sources.size(); ++i) {
      if (i) out << ';';
      out << r.sources[i];
    }
    out << '\n';
  }
}

namespace detail {

struct ArmSpec {
  std::string name;
  DatasetFamily train_family;
  TrainConfig cfg;  // out_dir/seed filled per run
};

inline double read_eval_accuracy(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("missing eval report: " + path);
  nlohmann::json j = nlohmann::json::parse(in);
  return j.at("answer_accuracy").get<double>();
}

// Runs one arm across seeds, collecting final-eval accuracy per eval family.
inline std::vector<SummaryRow> run_arm(const ArmSpec& arm,
                                       const std::vector<DatasetFamily>& evals,
                                       const PresetOptions& opt,
                                       const std::string& preset_dir,
                                       bool& complete) {
  std::vector<SummaryRow> rows(evals.size());
  for (std::size_t e = 0; e < evals.size(); ++e) {
    rows[e].arm = arm.name;
    rows[e].train_family = dataset_family_name(arm.train_family);
    rows[e].eval_family = dataset_family_name(evals[e]);
    rows[e].seeds = static_cast<int>(opt.seeds.size());
  }
  for (std::uint64_t seed : opt.seeds) {
    TrainConfig cfg = arm.cfg;
    cfg.seed = seed;
    cfg.out_dir = preset_dir + "/" + arm.name + "/seed_" + std::to_string(seed);
    bool ok = true;
    try {
      train(cfg);
    } catch (const std::exception& e) {
      ok = false;
      complete = false;
      if (!opt.quiet)
        std::fprintf(stderr, "arm %s seed %llu failed: %s\n", arm.name.c_str(),
                     static_cast<unsigned long long>(seed), e.what());
    }
    for (std::size_t e = 0; e < evals.size(); ++e) {
      const std::string report = cfg.out_dir + "/eval_" +
                                 dataset_family_name(evals[e]) + "_final.json";
      if (ok && std::filesystem::exists(report)) {
        rows[e].accuracies.push_back(read_eval_accuracy(report));
        rows[e].sources.push_back(report);
      } else {
        rows[e].accuracies.push_back(std::nan(""));
        rows[e].sources.push_back("missing");
        complete = false;
      }
    }
  }
  for (auto& row : rows) {
    std::vector<double> valid;
    for (double a : row.accuracies)
      if (!std::isnan(a)) valid.push_back(a);
    row.median = median_of(valid);
    row.iqr = iqr_of(valid);
  }
  return rows;
}

// Evaluates the shared base checkpoint (the no-post-training arm).
inline SummaryRow base_row(const std::string& base_ckpt,
                           DatasetFamily train_family, DatasetFamily eval_fam,
                           const PresetOptions& opt, const Vocab& vocab,
                           const std::string& preset_dir) {
  SummaryRow row;
  row.arm = "base";
  row.train_family = dataset_family_name(train_family);
  row.eval_family = dataset_family_name(eval_fam);
  row.seeds = 1;  // the base policy does not depend on the arm seed
  auto data = generate_dataset(eval_spec(eval_fam, opt), vocab);
  EvalReport rep = cross_task_eval(base_ckpt, data, vocab, 40, false,
                                   resolve_threads(opt.threads));
  const std::string dir = preset_dir + "/base";
  std::filesystem::create_directories(dir);
  const std::string path =
      dir + "/eval_" + dataset_family_name(eval_fam) + "_final.json";
  std::ofstream out(path);
  out << to_json(rep).dump(2) << '\n';
  row.accuracies.push_back(rep.answer_accuracy);
  row.sources.push_back(path);
  row.median = rep.answer_accuracy;
  row.iqr = 0.0;
  return row;
}

}  // namespace detail

// Budget parity: every post-training arm must consume the same number of
// steps and prompts (and rollouts, for RL arms).
inline void verify_budget_parity(const std::vector<detail::ArmSpec>& arms) {
  for (std::size_t i = 1; i < arms.size(); ++i) {
    const TrainConfig& a = arms[0].cfg;
    const TrainConfig& b = arms[i].cfg;
    if (a.total_steps != b.total_steps ||
        a.prompts_per_step != b.prompts_per_step)
      throw config_error("budget parity violated between arms " +
                         arms[0].name + " and " + arms[i].name);
    const bool a_rl = a.method != TrainMethod::Sft;
    const bool b_rl = b.method != TrainMethod::Sft;
    if (a_rl && b_rl && a.group_size != b.group_size)
      throw config_error("rollout budget parity violated between arms " +
                         arms[0].name + " and " + arms[i].name);
  }
}

inline PresetResult run_preset(PresetName name, const PresetOptions& opt) {
  if (opt.out_dir.empty()) throw config_error("preset: out_dir must be set");
  if (opt.seeds.empty()) throw config_error("preset: need at least one seed");
  std::filesystem::create_directories(opt.out_dir);
  const Vocab vocab = Vocab::standard();

  PresetResult result;
  result.name = name;
  result.base_ckpt = train_base_policy(opt);
  const std::string preset_dir = opt.out_dir + "/" + preset_name_str(name);
  std::filesystem::create_directories(preset_dir);

  std::vector<detail::ArmSpec> arms;
  std::vector<SummaryRow> rows;
  bool complete = true;

  auto push_arm_rows = [&](const detail::ArmSpec& arm,
                           const std::vector<DatasetFamily>& evals,
                           const std::string& dir) {
    auto r = detail::run_arm(arm, evals, opt, dir, complete);
    rows.insert(rows.end(), r.begin(), r.end());
  };

  switch (name) {
    case PresetName::AlphaSweep: {
      // GRPO with the default constant KL weight, alpha swept (Fig. 4).
      for (double alpha : alpha_sweep_values()) {
        detail::ArmSpec arm;
        char buf[32];
        std::snprintf(buf, sizeof buf, "alpha_%.2f", alpha);
        arm.name = buf;
        arm.train_family = DatasetFamily::ArithChain;
        arm.cfg = detail::arm_base_config(opt);
        arm.cfg.method = TrainMethod::GrpoConstant;
        arm.cfg.alpha = alpha;
        arm.cfg.schedule = {0.04, 0.04, std::max(1, opt.total_steps / 2),
                            opt.total_steps};
        arm.cfg.train_data.spec =
            detail::train_spec(DatasetFamily::ArithChain, opt);
        arm.cfg.eval_data = {
            {detail::eval_spec(DatasetFamily::ArithChain, opt), ""}};
        arm.cfg.init_ckpt = result.base_ckpt;
        arms.push_back(arm);
      }
      verify_budget_parity(arms);
      for (const auto& arm : arms)
        push_arm_rows(arm, {DatasetFamily::ArithChain}, preset_dir);
      break;
    }
    case PresetName::KlSweep: {
      // constant beta held through training, swept over the Fig. 6 grid
      for (double beta : kl_sweep_values()) {
        detail::ArmSpec arm;
        char buf[32];
        std::snprintf(buf, sizeof buf, "kl_%.2f", beta);
        arm.name = buf;
        arm.train_family = DatasetFamily::ArithChain;
        arm.cfg = detail::arm_base_config(opt);
        arm.cfg.method = TrainMethod::GrpoConstant;
        arm.cfg.schedule = {beta, beta, std::max(1, opt.total_steps / 2),
                            opt.total_steps};
        arm.cfg.train_data.spec =
            detail::train_spec(DatasetFamily::ArithChain, opt);
        arm.cfg.eval_data = {
            {detail::eval_spec(DatasetFamily::ArithChain, opt), ""}};
        arm.cfg.init_ckpt = result.base_ckpt;
        arms.push_back(arm);
      }
      verify_budget_parity(arms);
      for (const auto& arm : arms)
        push_arm_rows(arm, {DatasetFamily::ArithChain}, preset_dir);
      break;
    }
    case PresetName::SameTask: {
      for (DatasetFamily family : opt.families) {
        const std::string fdir =
            preset_dir + "/" + dataset_family_name(family);
        std::filesystem::create_directories(fdir);
        rows.push_back(detail::base_row(result.base_ckpt, family, family, opt,
                                        vocab, fdir));
        std::vector<detail::ArmSpec> fam_arms;
        for (const char* method : {"grpo_constant", "sft", "grpo_d"}) {
          detail::ArmSpec arm;
          arm.name = method;
          arm.train_family = family;
          arm.cfg = detail::arm_base_config(opt);
          arm.cfg.method = method_from_name(method);
          arm.cfg.schedule =
              arm.cfg.method == TrainMethod::GrpoD
                  ? detail::dynamic_schedule(family, opt.total_steps)
                  : detail::constant_schedule(family, opt.total_steps);
          arm.cfg.train_data.spec = detail::train_spec(family, opt);
          arm.cfg.eval_data = {{detail::eval_spec(family, opt), ""}};
          arm.cfg.init_ckpt = result.base_ckpt;
          fam_arms.push_back(arm);
        }
        verify_budget_parity(fam_arms);
        for (const auto& arm : fam_arms) push_arm_rows(arm, {family}, fdir);
      }
      break;
    }
    case PresetName::CrossTask: {
      const std::vector<DatasetFamily> both{DatasetFamily::Counting,
                                            DatasetFamily::ArithChain};
      for (DatasetFamily train_family : both) {
        const std::string fdir =
            preset_dir + "/train_" + dataset_family_name(train_family);
        std::filesystem::create_directories(fdir);
        for (DatasetFamily eval_family : both)
          rows.push_back(detail::base_row(result.base_ckpt, train_family,
                                          eval_family, opt, vocab, fdir));
        std::vector<detail::ArmSpec> fam_arms;
        for (const char* method : {"sft", "grpo_d"}) {
          detail::ArmSpec arm;
          arm.name = method;
          arm.train_family = train_family;
          arm.cfg = detail::arm_base_config(opt);
          arm.cfg.method = method_from_name(method);
          arm.cfg.schedule =
              detail::dynamic_schedule(train_family, opt.total_steps);
          arm.cfg.train_data.spec = detail::train_spec(train_family, opt);
          arm.cfg.eval_data = {
              {detail::eval_spec(DatasetFamily::Counting, opt), ""},
              {detail::eval_spec(DatasetFamily::ArithChain, opt), ""}};
          arm.cfg.init_ckpt = result.base_ckpt;
          fam_arms.push_back(arm);
        }
        verify_budget_parity(fam_arms);
        for (const auto& arm : fam_arms) push_arm_rows(arm, both, fdir);
      }
      break;
    }
    case PresetName::Fig5Curves: {
      detail::ArmSpec arm;
      arm.name = "grpo_d_curves";
      arm.train_family = DatasetFamily::Counting;
      arm.cfg = detail::arm_base_config(opt);
      arm.cfg.method = TrainMethod::GrpoD;
      arm.cfg.group_size = 8;
      arm.cfg.prompts_per_step = 16;
      arm.cfg.total_steps = 300;
      arm.cfg.schedule = detail::dynamic_schedule(DatasetFamily::Counting, 300);
      arm.cfg.train_data.spec = detail::train_spec(DatasetFamily::Counting, opt);
      arm.cfg.eval_data = {
          {detail::eval_spec(DatasetFamily::Counting, opt), ""}};
      arm.cfg.eval_every = 50;
      arm.cfg.init_ckpt = result.base_ckpt;
      PresetOptions single = opt;
      single.seeds = {opt.seeds.front()};
      auto r = detail::run_arm(arm, {DatasetFamily::Counting}, single,
                               preset_dir, complete);
      rows.insert(rows.end(), r.begin(), r.end());
      break;
    }
  }

  result.rows = std::move(rows);
  result.complete = complete;
  result.summary_path = preset_dir + "/summary.csv";
  write_summary_csv(result.rows, result.summary_path);
  return result;
}

// Rebuilds summary.csv from eval reports already on disk (CLI `summarize`).
inline std::string summarize_from_disk(const std::string& preset_dir) {
  std::vector<SummaryRow> rows;
  namespace fs = std::filesystem;
  if (!fs::exists(preset_dir)) throw io_error("no such dir: " + preset_dir);
  for (const auto& entry : fs::recursive_directory_iterator(preset_dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    if (name.rfind("eval_", 0) != 0 || name.find("_final.json") == std::string::npos)
      continue;
    SummaryRow row;
    row.arm = entry.path().parent_path().filename().string();
    row.eval_family = name.substr(5, name.size() - 5 - 11);
    row.train_family = "";
    row.seeds = 1;
    row.accuracies.push_back(detail::read_eval_accuracy(entry.path().string()));
    row.sources.push_back(entry.path().string());
    row.median = row.accuracies[0];
    rows.push_back(row);
  }
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    return std::tie(a.arm, a.eval_family, a.sources) <
           std::tie(b.arm, b.eval_family, b.sources);
  });
  const std::string path = preset_dir + "/summary.csv";
  write_summary_csv(rows, path);
  return path;
}

}  // namespace grpodlab
