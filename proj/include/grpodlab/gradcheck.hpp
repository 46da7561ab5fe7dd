#pragma once

// Finite-difference verification of the analytic gradients. Central
// differences with a fixed step, relative error per coordinate
//   |g - g_fd| / (|g| + |g_fd| + 1e-12),
// worst error reported per parameter block.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "grpodlab/policy.hpp"
#include "grpodlab/tasks.hpp"

namespace grpodlab {

struct GradCheckBlockReport {
  std::string block;
  double worst_rel_error = 0.0;
  long worst_index = -1;
};

struct GradCheckReport {
  std::string loss_name;
  double max_rel_error = 0.0;
  std::vector<GradCheckBlockReport> blocks;
  bool passed(double tolerance) const { return max_rel_error < tolerance; }
};

namespace detail {

inline std::vector<std::pair<std::string, std::pair<long, long>>>
layout_blocks(const PolicyArch& arch) {
  ParamLayout lay(arch);
  std::vector<std::pair<std::string, std::pair<long, long>>> out;
  out.push_back({"tok_emb", {lay.tok_emb, lay.pos_emb}});
  long after_pos = lay.blocks.empty() ? lay.lm_head : lay.blocks[0].wq;
  out.push_back({"pos_emb", {lay.pos_emb, after_pos}});
  for (std::size_t b = 0; b < lay.blocks.size(); ++b) {
    const auto& blk = lay.blocks[b];
    const std::string tag = "block" + std::to_string(b) + ".";
    out.push_back({tag + "wq", {blk.wq, blk.wk}});
    out.push_back({tag + "wk", {blk.wk, blk.wv}});
    out.push_back({tag + "wv", {blk.wv, blk.wo}});
    out.push_back({tag + "wo", {blk.wo, blk.w1}});
    out.push_back({tag + "w1", {blk.w1, blk.w2}});
    long w2_end = b + 1 < lay.blocks.size() ? lay.blocks[b + 1].wq : lay.lm_head;
    out.push_back({tag + "w2", {blk.w2, w2_end}});
  }
  out.push_back({"lm_head", {lay.lm_head, lay.total}});
  return out;
}

}  // namespace detail

// Compares an analytic gradient against central differences of the scalar
// loss. step 1e-4 in double precision resolves the 1e-4 tolerance.
inline GradCheckReport check_gradient(
    const PolicyParams& params,
    const std::function<double(const PolicyParams&)>& loss_fn,
    const std::vector<double>& analytic_grad, const std::string& name,
    double fd_step = 1e-4) {
  GradCheckReport report;
  report.loss_name = name;
  PolicyParams probe = params;
  for (const auto& [block, range] : detail::layout_blocks(params.arch)) {
    GradCheckBlockReport br;
    br.block = block;
    for (long i = range.first; i < range.second; ++i) {
      const std::size_t idx = static_cast<std::size_t>(i);
      const double saved = probe.values[idx];
      probe.values[idx] = saved + fd_step;
      const double up = loss_fn(probe);
      probe.values[idx] = saved - fd_step;
      const double down = loss_fn(probe);
      probe.values[idx] = saved;
      const double fd = (up - down) / (2.0 * fd_step);
      const double g = analytic_grad[idx];
      const double rel =
          std::fabs(g - fd) / (std::fabs(g) + std::fabs(fd) + 1e-12);
      if (rel > br.worst_rel_error) {
        br.worst_rel_error = rel;
        br.worst_index = i;
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, br.worst_rel_error);
    report.blocks.push_back(br);
  }
  return report;
}

// A small synthetic GRPO batch on the reduced architecture. pi_old and
// pi_ref are nearby but distinct parameter points so ratios and the KL term
// are both live, with ratios kept away from the clip kinks.
struct GradCheckFixture {
  PolicyParams params;
  PolicyParams ref_params;
  std::vector<Group> groups;
  KLScheduleCfg schedule;
  ClipCfg clip;
  int step = 40;
  std::vector<SftPair> sft_batch;
};

inline GradCheckFixture make_gradcheck_fixture(const Vocab& vocab,
                                               const PolicyArch& arch,
                                               std::uint64_t seed) {
  GradCheckFixture fx;
  fx.params = init_params(arch, seed);
  fx.schedule = {0.04, 0.1, 30, 100};
  fx.step = 40;
  fx.clip = {0.2};

  // Nearby old/ref policies: perturbations small enough that importance
  // ratios stay strictly inside the clip band, clear of the min/clip kinks
  // that would invalidate central differences.
  PolicyParams old_params = fx.params;
  fx.ref_params = fx.params;
  RngStream perturb = RngStream::from_seed(seed, RngDomain::Test, 1);
  for (auto& w : old_params.values) w += 0.003 * perturb.next_normal();
  for (auto& w : fx.ref_params.values) w += 0.003 * perturb.next_normal();

  RngStream rng = RngStream::from_seed(seed, RngDomain::Test, 2);
  SamplerCfg sampler{1.0, 10, false};
  DatasetSpec ds;
  ds.family = DatasetFamily::Mixed;
  ds.count = 2;
  ds.grid_rows = 2;
  ds.grid_cols = 2;
  ds.chain_length = 2;
  ds.seed = seed;

  for (int gi = 0; gi < 2; ++gi) {
    TaskInstance inst = generate_instance(ds, gi, vocab);
    Group group;
    group.prompt_id = gi;
    group.prompt_tokens = inst.prompt_tokens;
    std::vector<double> rewards;
    for (int i = 0; i < 2; ++i) {
      SampledCompletion sc =
          sample_completion(old_params, inst.prompt_tokens, sampler, rng,
                            vocab.eos);
      Rollout ro;
      ro.tokens = sc.tokens;
      ro.old_logps = sc.logps;
      rewards.push_back(i == 0 ? 1.0 : 0.0);  // synthetic spread
      group.rollouts.push_back(std::move(ro));
    }
    group.advantages = normalize_advantages(rewards);
    fx.groups.push_back(std::move(group));

    fx.sft_batch.push_back({inst.prompt_tokens, make_sft_demo(inst, vocab)});
  }
  return fx;
}

struct GradCheckRun {
  GradCheckReport grpo;
  GradCheckReport sft;
  double max_rel_error = 0.0;
};

// Runs both losses through the finite-difference oracle at one parameter
// point. corrupt_gradient is a test hook: it perturbs one analytic entry so
// the check must fail.
inline GradCheckRun run_gradcheck(const Vocab& vocab, const PolicyArch& arch,
                                  std::uint64_t seed,
                                  bool corrupt_gradient = false) {
  GradCheckFixture fx = make_gradcheck_fixture(vocab, arch, seed);

  GrpoBatchResult grpo = loss_and_grad(fx.params, fx.groups, fx.ref_params,
                                       fx.step, fx.schedule, fx.clip);
  if (corrupt_gradient && !grpo.grad.empty()) grpo.grad[7] += 0.5;
  auto grpo_loss = [&fx](const PolicyParams& p) {
    return loss_and_grad(p, fx.groups, fx.ref_params, fx.step, fx.schedule,
                         fx.clip)
        .loss;
  };

  GradCheckRun run;
  run.grpo = check_gradient(fx.params, grpo_loss, grpo.grad, "grpo_d");

  SftBatchResult sft = sft_batch_loss_and_grad(fx.params, fx.sft_batch);
  if (corrupt_gradient && !sft.grad.empty()) sft.grad[3] += 0.5;
  auto sft_loss = [&fx](const PolicyParams& p) {
    return sft_batch_loss_and_grad(p, fx.sft_batch).loss;
  };
  run.sft = check_gradient(fx.params, sft_loss, sft.grad, "sft");

  run.max_rel_error = std::max(run.grpo.max_rel_error, run.sft.max_rel_error);
  return run;
}

}  // namespace grpodlab
