#pragma once

// Training orchestration: rollout collection from the per-step pi_old
// snapshot, reward scoring, group advantages, mu optimizer updates against
// the frozen pi_ref, metric emission, periodic greedy evaluation, and
// checkpointing. Every random draw comes from a stream keyed by
// (seed, domain, step, prompt, rollout), so runs are bit-reproducible for
// any rollout parallelism degree.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "grpodlab/config.hpp"
#include "grpodlab/errors.hpp"
#include "grpodlab/grpo.hpp"
#include "grpodlab/parallel.hpp"
#include "grpodlab/policy.hpp"
#include "grpodlab/reward.hpp"
#include "grpodlab/tasks.hpp"

namespace grpodlab {

struct StepMetrics {
  int step = 0;
  double beta = 0.0;
  double reward_total_mean = 0.0, reward_total_std = 0.0;
  double reward_acc_mean = 0.0, reward_acc_std = 0.0;
  double reward_format_mean = 0.0, reward_format_std = 0.0;
  double kl_mean = 0.0;
  double loss = 0.0;
  double clip_fraction = 0.0;
  double wall_ms = 0.0;
};

inline nlohmann::json to_json(const StepMetrics& m) {
  return {{"step", m.step},
          {"beta", m.beta},
          {"reward_total_mean", m.reward_total_mean},
          {"reward_total_std", m.reward_total_std},
          {"reward_acc_mean", m.reward_acc_mean},
          {"reward_acc_std", m.reward_acc_std},
          {"reward_format_mean", m.reward_format_mean},
          {"reward_format_std", m.reward_format_std},
          {"kl_mean", m.kl_mean},
          {"loss", m.loss},
          {"clip_fraction", m.clip_fraction},
          {"wall_ms", m.wall_ms}};
}

struct EvalReport {
  std::string family;
  int n = 0;
  double answer_accuracy = 0.0;
  double format_accuracy = 0.0;
  nlohmann::json records;  // array when requested, null otherwise
};

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j{{"family", r.family},
                   {"n", r.n},
                   {"answer_accuracy", r.answer_accuracy},
                   {"format_accuracy", r.format_accuracy}};
  if (!r.records.is_null()) j["records"] = r.records;
  return j;
}

inline std::string instances_family_label(
    const std::vector<TaskInstance>& instances) {
  bool any_counting = false, any_arith = false;
  for (const auto& inst : instances) {
    any_counting |= inst.family == TaskFamily::Counting;
    any_arith |= inst.family == TaskFamily::ArithChain;
  }
  if (any_counting && any_arith) return "mixed";
  return any_arith ? "arith_chain" : "counting";
}

// Deterministic greedy evaluation with a pluggable decoder; the default
// decoder is the policy itself, tests may replay gold demos instead.
inline EvalReport evaluate_with_decoder(
    const std::function<std::vector<int>(const TaskInstance&)>& decode,
    const std::vector<TaskInstance>& instances, const Vocab& vocab,
    bool with_records = false, int threads = 1) {
  if (instances.empty()) throw contract_error("evaluate: empty dataset");
  const int n = static_cast<int>(instances.size());
  std::vector<double> acc(static_cast<std::size_t>(n), 0.0);
  std::vector<double> fmt(static_cast<std::size_t>(n), 0.0);
  std::vector<std::string> rendered(static_cast<std::size_t>(n));
  parallel_for(n, threads, [&](int i) {
    const TaskInstance& inst = instances[static_cast<std::size_t>(i)];
    std::vector<int> completion = decode(inst);
    acc[static_cast<std::size_t>(i)] =
        accuracy_reward(completion, vocab, inst.ground_truth);
    fmt[static_cast<std::size_t>(i)] = format_reward(completion, vocab);
    if (with_records) rendered[static_cast<std::size_t>(i)] = vocab.render(completion);
  });

  EvalReport report;
  report.family = instances_family_label(instances);
  report.n = n;
  for (int i = 0; i < n; ++i) {
    report.answer_accuracy += acc[static_cast<std::size_t>(i)];
    report.format_accuracy += fmt[static_cast<std::size_t>(i)];
  }
  report.answer_accuracy /= n;
  report.format_accuracy /= n;
  if (with_records) {
    report.records = nlohmann::json::array();
    for (int i = 0; i < n; ++i)
      report.records.push_back(
          {{"ground_truth", instances[static_cast<std::size_t>(i)].ground_truth},
           {"acc", acc[static_cast<std::size_t>(i)]},
           {"format", fmt[static_cast<std::size_t>(i)]},
           {"completion", rendered[static_cast<std::size_t>(i)]}});
  }
  return report;
}

inline EvalReport evaluate(const PolicyParams& params,
                           const std::vector<TaskInstance>& instances,
                           const Vocab& vocab, int max_new_tokens,
                           bool with_records = false, int threads = 1) {
  SamplerCfg greedy{1.0, max_new_tokens, true};
  auto decode = [&params, &greedy, &vocab](const TaskInstance& inst) {
    RngStream unused = RngStream::from_seed(0, RngDomain::Test);
    return sample_completion(params, inst.prompt_tokens, greedy, unused,
                             vocab.eos)
        .tokens;
  };
  return evaluate_with_decoder(decode, instances, vocab, with_records,
                               threads);
}

// Evaluate a checkpoint on a dataset from another family. The shared vocab
// is what makes the transfer meaningful; a hash mismatch is rejected.
inline EvalReport cross_task_eval(const std::string& ckpt_path,
                                  const std::vector<TaskInstance>& dataset,
                                  const Vocab& vocab, int max_new_tokens,
                                  bool with_records = false, int threads = 1) {
  CheckpointData ck = load_checkpoint(ckpt_path);
  if (ck.vocab_hash != vocab.hash_hex())
    throw config_error("checkpoint vocab hash mismatch: " + ckpt_path);
  return evaluate(ck.params, dataset, vocab, max_new_tokens, with_records,
                  threads);
}

struct TrainResult {
  PolicyParams params;
  OptimizerState optimizer;
  std::vector<StepMetrics> metrics;
  std::vector<EvalReport> final_evals;
  std::string final_ckpt;
};

namespace detail {

struct Moments {
  double mean = 0.0;
  double std_dev = 0.0;
};

inline Moments moments(const std::vector<double>& xs) {
  Moments m;
  if (xs.empty()) return m;
  for (double x : xs) m.mean += x;
  m.mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - m.mean) * (x - m.mean);
  m.std_dev = std::sqrt(var / static_cast<double>(xs.size()));
  return m;
}

inline std::vector<TaskInstance> load_instances(const DataSource& src,
                                                const Vocab& vocab) {
  if (src.from_path()) return load_dataset(src.path, vocab);
  return generate_dataset(src.spec, vocab);
}

}  // namespace detail

// Runs the configured method for total_steps optimizer rounds (mu updates
// each). resume_ckpt continues an interrupted run: steps before the
// checkpoint are skipped and the metric stream starts at the resume step.
inline TrainResult train(const TrainConfig& cfg,
                         const std::string& resume_ckpt = "") {
  require_valid(cfg);
  const Vocab vocab = Vocab::standard(cfg.vocab_grid_symbols);
  const PolicyArch arch = cfg.arch(vocab);
  const int threads = resolve_threads(cfg.threads);

  std::vector<TaskInstance> train_set =
      detail::load_instances(cfg.train_data, vocab);
  if (train_set.empty()) throw config_error("train dataset is empty");
  for (const auto& inst : train_set)
    if (static_cast<int>(inst.prompt_tokens.size()) +
            cfg.sampler.max_new_tokens > cfg.max_context)
      throw config_error("train instance exceeds max_context");
  int pool = static_cast<int>(train_set.size());
  if (cfg.method == TrainMethod::Sft && cfg.sft_max_instances > 0)
    pool = std::min(pool, cfg.sft_max_instances);  // few-shot cap

  std::vector<std::vector<TaskInstance>> eval_sets;
  for (const auto& src : cfg.eval_data)
    eval_sets.push_back(detail::load_instances(src, vocab));

  // Initial weights anchor the run: they are also the frozen pi_ref.
  PolicyParams init;
  if (cfg.init_ckpt.empty()) {
    init = init_params(arch, cfg.seed);
  } else {
    CheckpointData ck = load_checkpoint(cfg.init_ckpt);
    if (ck.vocab_hash != vocab.hash_hex())
      throw config_error("init_ckpt vocab hash mismatch: " + cfg.init_ckpt);
    if (!(ck.params.arch == arch))
      throw config_error("init_ckpt arch mismatch: " + cfg.init_ckpt);
    init = std::move(ck.params);
  }
  const PolicyParams ref = snapshot(init);
  PolicyParams params = std::move(init);

  OptimizerState opt;
  opt.lr = cfg.optimizer.lr;
  opt.beta1 = cfg.optimizer.beta1;
  opt.beta2 = cfg.optimizer.beta2;
  opt.eps = cfg.optimizer.eps;

  int start_step = 0;
  if (!resume_ckpt.empty()) {
    CheckpointData ck = load_checkpoint(resume_ckpt);
    if (ck.vocab_hash != vocab.hash_hex())
      throw config_error("resume vocab hash mismatch: " + resume_ckpt);
    if (!(ck.params.arch == arch))
      throw config_error("resume arch mismatch: " + resume_ckpt);
    if (!ck.optimizer.has_value())
      throw config_error("resume checkpoint lacks optimizer state: " +
                         resume_ckpt);
    if (ck.optimizer->step % cfg.inner_epochs != 0)
      throw config_error("resume checkpoint not on a step boundary");
    if (ck.optimizer->lr != opt.lr || ck.optimizer->beta1 != opt.beta1 ||
        ck.optimizer->beta2 != opt.beta2 || ck.optimizer->eps != opt.eps)
      throw config_error("resume optimizer hyperparameters disagree with config");
    params = std::move(ck.params);
    opt = std::move(*ck.optimizer);
    start_step = static_cast<int>(opt.step / cfg.inner_epochs);
    if (start_step >= cfg.total_steps)
      throw config_error("resume checkpoint is already past total_steps");
  }

  std::filesystem::create_directories(cfg.out_dir);
  {  // the resolved config makes every run re-runnable in isolation
    std::ofstream cfg_out(cfg.out_dir + "/config.json");
    cfg_out << to_json(cfg).dump(2) << '\n';
  }
  const std::string metrics_path = cfg.out_dir + "/metrics.jsonl";
  std::ofstream metrics_out(metrics_path, std::ios::trunc);
  if (!metrics_out) throw io_error("cannot open " + metrics_path);

  const std::string vhash = vocab.hash_hex();
  TrainResult result;

  auto run_evals = [&](const std::string& tag, const PolicyParams& p,
                       bool collect) {
    for (const auto& eval_set : eval_sets) {
      if (eval_set.empty()) continue;
      EvalReport rep = evaluate(p, eval_set, vocab, cfg.sampler.max_new_tokens,
                                cfg.eval_records, threads);
      std::string path =
          cfg.out_dir + "/eval_" + rep.family + "_" + tag + ".json";
      std::ofstream out(path);
      out << to_json(rep).dump(2) << '\n';
      if (collect) result.final_evals.push_back(rep);
    }
  };

  for (int s = start_step; s < cfg.total_steps; ++s) {
    const auto t0 = std::chrono::steady_clock::now();
    StepMetrics sm;
    sm.step = s;

    // Draw this step's prompts. SFT shares the stream so both arms see the
    // same instances at the same step.
    RngStream prompt_rng =
        RngStream::from_seed(cfg.seed, RngDomain::PromptDraw, static_cast<std::uint64_t>(s));
    std::vector<int> prompt_idx(static_cast<std::size_t>(cfg.prompts_per_step));
    for (auto& idx : prompt_idx)
      idx = static_cast<int>(prompt_rng.next_below(static_cast<std::uint32_t>(pool)));

    const PolicyParams last_good = snapshot(params);
    const OptimizerState opt_backup = opt;

    double loss_acc = 0.0, kl_acc = 0.0, clip_acc = 0.0;
    try {
      if (cfg.method == TrainMethod::Sft) {
        std::vector<SftPair> batch;
        std::vector<double> r_total, r_acc, r_fmt;
        for (int idx : prompt_idx) {
          const TaskInstance& inst = train_set[static_cast<std::size_t>(idx)];
          std::vector<int> demo = make_sft_demo(inst, vocab);
          RewardBreakdown rb =
              total_reward(demo, vocab, inst.ground_truth, {cfg.alpha});
          r_total.push_back(rb.total);
          r_acc.push_back(rb.acc);
          r_fmt.push_back(rb.format);
          batch.push_back({inst.prompt_tokens, std::move(demo)});
        }
        for (int u = 0; u < cfg.inner_epochs; ++u) {
          SftBatchResult res = sft_batch_loss_and_grad(params, batch, threads);
          if (!std::isfinite(res.loss))
            throw runtime_abort("non-finite SFT loss at step " +
                                std::to_string(s));
          optimizer_step(params, res.grad, opt);
          loss_acc += res.loss;
        }
        auto mt = detail::moments(r_total);
        auto ma = detail::moments(r_acc);
        auto mf = detail::moments(r_fmt);
        sm.beta = 0.0;
        sm.reward_total_mean = mt.mean;
        sm.reward_total_std = mt.std_dev;
        sm.reward_acc_mean = ma.mean;
        sm.reward_acc_std = ma.std_dev;
        sm.reward_format_mean = mf.mean;
        sm.reward_format_std = mf.std_dev;
      } else {
        const PolicyParams pi_old = snapshot(params);
        const int g = cfg.group_size;
        const int n_rollouts = cfg.prompts_per_step * g;

        std::vector<Group> groups(static_cast<std::size_t>(cfg.prompts_per_step));
        for (int i = 0; i < cfg.prompts_per_step; ++i) {
          groups[static_cast<std::size_t>(i)].prompt_id = prompt_idx[static_cast<std::size_t>(i)];
          groups[static_cast<std::size_t>(i)].prompt_tokens =
              train_set[static_cast<std::size_t>(prompt_idx[static_cast<std::size_t>(i)])]
                  .prompt_tokens;
          groups[static_cast<std::size_t>(i)].rollouts.resize(static_cast<std::size_t>(g));
        }

        // Rollouts fan out over (prompt, rollout) with split streams.
        parallel_for(n_rollouts, threads, [&](int r) {
          const int i = r / g, j = r % g;
          const TaskInstance& inst =
              train_set[static_cast<std::size_t>(prompt_idx[static_cast<std::size_t>(i)])];
          RngStream rng = RngStream::from_seed(
              cfg.seed, RngDomain::Rollout, static_cast<std::uint64_t>(s),
              static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(j));
          SampledCompletion sc = sample_completion(
              pi_old, inst.prompt_tokens, cfg.sampler, rng, vocab.eos);
          Rollout& ro =
              groups[static_cast<std::size_t>(i)].rollouts[static_cast<std::size_t>(j)];
          ro.tokens = std::move(sc.tokens);
          ro.old_logps = std::move(sc.logps);
          ro.reward =
              total_reward(ro.tokens, vocab, inst.ground_truth, {cfg.alpha});
        });
        for (const auto& group : groups)
          for (const auto& ro : group.rollouts)
            for (double lp : ro.old_logps)
              if (!std::isfinite(lp))
                throw runtime_abort("non-finite rollout log-prob at step " +
                                    std::to_string(s));

        std::vector<double> r_total, r_acc, r_fmt;
        for (auto& group : groups) {
          std::vector<double> rewards;
          for (const Rollout& ro : group.rollouts) {
            rewards.push_back(ro.reward.total);
            r_total.push_back(ro.reward.total);
            r_acc.push_back(ro.reward.acc);
            r_fmt.push_back(ro.reward.format);
          }
          group.advantages = normalize_advantages(rewards);
        }

        // pi_ref log-probs are constant across the mu updates.
        std::vector<std::vector<std::vector<double>>> ref_cache(
            groups.size());
        for (std::size_t i = 0; i < groups.size(); ++i)
          ref_cache[i].resize(groups[i].rollouts.size());
        parallel_for(n_rollouts, threads, [&](int r) {
          const std::size_t i = static_cast<std::size_t>(r / g);
          const std::size_t j = static_cast<std::size_t>(r % g);
          ref_cache[i][j] = logprobs(ref, groups[i].prompt_tokens,
                                     groups[i].rollouts[j].tokens);
        });

        for (int u = 0; u < cfg.inner_epochs; ++u) {
          GrpoBatchResult res =
              loss_and_grad(params, groups, ref, s, cfg.schedule, cfg.clip,
                            &ref_cache, threads);
          if (!std::isfinite(res.loss))
            throw runtime_abort("non-finite GRPO loss at step " +
                                std::to_string(s));
          optimizer_step(params, res.grad, opt);
          loss_acc += res.loss;
          kl_acc += res.kl_mean;
          clip_acc += res.clip_fraction;
        }

        auto mt = detail::moments(r_total);
        auto ma = detail::moments(r_acc);
        auto mf = detail::moments(r_fmt);
        sm.beta = beta_at(s, cfg.schedule);
        sm.reward_total_mean = mt.mean;
        sm.reward_total_std = mt.std_dev;
        sm.reward_acc_mean = ma.mean;
        sm.reward_acc_std = ma.std_dev;
        sm.reward_format_mean = mf.mean;
        sm.reward_format_std = mf.std_dev;
      }
    } catch (const runtime_abort&) {
      save_checkpoint(cfg.out_dir + "/ckpt_abort", last_good, &opt_backup,
                      vhash);
      throw;
    }

    sm.loss = loss_acc / cfg.inner_epochs;
    sm.kl_mean = kl_acc / cfg.inner_epochs;
    sm.clip_fraction = clip_acc / cfg.inner_epochs;
    sm.wall_ms = std::chrono::duration<double, std::milli>(
                     std::chrono::steady_clock::now() - t0)
                     .count();
    metrics_out << to_json(sm).dump() << '\n';
    metrics_out.flush();
    result.metrics.push_back(sm);

    const int completed = s + 1;
    if (cfg.eval_every > 0 && completed % cfg.eval_every == 0 &&
        completed < cfg.total_steps)
      run_evals(std::to_string(completed), params, false);
    if (cfg.ckpt_every > 0 && completed % cfg.ckpt_every == 0 &&
        completed < cfg.total_steps)
      save_checkpoint(cfg.out_dir + "/ckpt_" + std::to_string(completed),
                      params, &opt, vhash);
  }

  result.final_ckpt = cfg.out_dir + "/ckpt_final";
  save_checkpoint(result.final_ckpt, params, &opt, vhash);
  run_evals("final", params, true);
  result.params = std::move(params);
  result.optimizer = std::move(opt);
  return result;
}

}  // namespace grpodlab
