#pragma once

// Core GRPO-D math over log-probabilities and rewards; no model code here.
// Group-relative advantages, the piecewise-linear KL weight schedule, the
// k3 KL estimator, and the clipped-surrogate objective.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "grpodlab/errors.hpp"
#include "grpodlab/reward.hpp"

namespace grpodlab {

struct Rollout {
  std::vector<int> tokens;            // completion token ids, non-empty
  std::vector<double> old_logps;      // per-token log-probs under pi_old
  RewardBreakdown reward;
};

struct Group {
  int prompt_id = 0;
  std::vector<int> prompt_tokens;     // the query q shared by the group
  std::vector<Rollout> rollouts;      // G >= 2 completions for one prompt
  std::vector<double> advantages;     // one value per rollout, all its tokens
};

struct KLScheduleCfg {
  double beta_min = 0.04;
  double beta_max = 0.1;
  int exploration_steps = 300;  // w
  int total_steps = 1000;       // t

  double beta_mid() const { return 0.5 * (beta_min + beta_max); }

  void validate() const {
    if (!(beta_min >= 0.0) || !std::isfinite(beta_min))
      throw contract_error("kl schedule: beta_min must be >= 0");
    if (!(beta_max >= beta_min) || !std::isfinite(beta_max))
      throw contract_error("kl schedule: beta_max must be >= beta_min");
    if (exploration_steps < 1)
      throw contract_error("kl schedule: exploration steps must be >= 1");
    if (total_steps <= exploration_steps)
      throw contract_error("kl schedule: total steps must exceed exploration steps");
  }
};

struct ClipCfg {
  double epsilon = 0.2;

  void validate() const {
    if (!(epsilon > 0.0 && epsilon < 1.0))
      throw contract_error("clip: epsilon must be in (0, 1)");
  }
};

// (r_i - mean) / popstd. Groups with (near) identical rewards carry no
// signal and get all-zero advantages instead of a division blow-up.
inline std::vector<double> normalize_advantages(
    const std::vector<double>& rewards) {
  const std::size_t g = rewards.size();
  if (g < 2)
    throw contract_error("normalize_advantages: need a group of at least 2");
  double mean = 0.0;
  for (double r : rewards) {
    if (!std::isfinite(r))
      throw contract_error("normalize_advantages: non-finite reward");
    mean += r;
  }
  mean /= static_cast<double>(g);
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  double std_dev = std::sqrt(var / static_cast<double>(g));
  std::vector<double> adv(g, 0.0);
  if (std_dev < 1e-8) return adv;
  for (std::size_t i = 0; i < g; ++i) adv[i] = (rewards[i] - mean) / std_dev;
  return adv;
}

// beta(s): beta_mid down to beta_min over the first w steps, then up to
// beta_max by step t. Early exploration, late exploitation. Both branches
// meet at beta_min when s = w; the anchor steps return their values exactly.
inline double beta_at(int s, const KLScheduleCfg& cfg) {
  cfg.validate();
  if (s < 0 || s > cfg.total_steps)
    throw contract_error("beta_at: step " + std::to_string(s) +
                         " outside [0, " + std::to_string(cfg.total_steps) + "]");
  if (s == 0) return cfg.beta_mid();
  if (s == cfg.exploration_steps) return cfg.beta_min;
  if (s == cfg.total_steps) return cfg.beta_max;
  const double w = static_cast<double>(cfg.exploration_steps);
  if (s < cfg.exploration_steps)
    return cfg.beta_mid() -
           (cfg.beta_mid() - cfg.beta_min) * (static_cast<double>(s) / w);
  return cfg.beta_min + (cfg.beta_max - cfg.beta_min) *
                            (static_cast<double>(s) - w) /
                            (static_cast<double>(cfg.total_steps) - w);
}

// k3 estimator: rho - log rho - 1 with rho = pi_ref / pi_theta, computed
// from the log-prob difference. Nonnegative, zero iff the log-probs match.
// expm1 keeps the estimate accurate (and nonnegative) for tiny differences,
// where exp(d) - d - 1 cancels catastrophically.
inline double kl_estimate(double logp_ref, double logp_cur) {
  if (!std::isfinite(logp_ref) || !std::isfinite(logp_cur))
    throw contract_error("kl_estimate: non-finite log-prob");
  const double log_rho = logp_ref - logp_cur;
  return std::expm1(log_rho) - log_rho;
}

// min(ratio * A, clip(ratio, 1-eps, 1+eps) * A) with ratio = pi/pi_old.
inline double per_token_surrogate(double logp_cur, double logp_old,
                                  double advantage, const ClipCfg& clip) {
  if (!std::isfinite(logp_cur) || !std::isfinite(logp_old) ||
      !std::isfinite(advantage))
    throw contract_error("per_token_surrogate: non-finite input");
  clip.validate();
  const double ratio = std::exp(logp_cur - logp_old);
  const double clipped =
      std::clamp(ratio, 1.0 - clip.epsilon, 1.0 + clip.epsilon);
  return std::min(ratio * advantage, clipped * advantage);
}

// The full objective as a loss to minimize: negative group mean of the
// per-rollout token means of [surrogate - beta(s) * kl]. Groups weigh
// equally; reductions run in fixed order so results are bit-stable.
inline double grpo_d_loss(
    const std::vector<Group>& groups,
    const std::vector<std::vector<std::vector<double>>>& cur_logps,
    const std::vector<std::vector<std::vector<double>>>& ref_logps, int step,
    const KLScheduleCfg& schedule, const ClipCfg& clip) {
  if (groups.empty()) throw contract_error("grpo_d_loss: no groups");
  if (cur_logps.size() != groups.size() || ref_logps.size() != groups.size())
    throw contract_error("grpo_d_loss: group count mismatch");
  const double beta = beta_at(step, schedule);

  double loss_sum = 0.0;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const Group& group = groups[gi];
    const std::size_t g = group.rollouts.size();
    if (g < 2) throw contract_error("grpo_d_loss: group size must be >= 2");
    if (group.advantages.size() != g ||
        cur_logps[gi].size() != g || ref_logps[gi].size() != g)
      throw contract_error("grpo_d_loss: per-rollout shape mismatch");

    double group_sum = 0.0;
    for (std::size_t i = 0; i < g; ++i) {
      const Rollout& ro = group.rollouts[i];
      const std::size_t len = ro.tokens.size();
      if (len == 0) throw contract_error("grpo_d_loss: empty rollout");
      if (ro.old_logps.size() != len || cur_logps[gi][i].size() != len ||
          ref_logps[gi][i].size() != len)
        throw contract_error("grpo_d_loss: token-aligned log-probs required");

      double token_sum = 0.0;
      for (std::size_t t = 0; t < len; ++t) {
        const double surr = per_token_surrogate(
            cur_logps[gi][i][t], ro.old_logps[t], group.advantages[i], clip);
        const double kl = kl_estimate(ref_logps[gi][i][t], cur_logps[gi][i][t]);
        token_sum += surr - beta * kl;
      }
      group_sum += token_sum / static_cast<double>(len);
    }
    loss_sum += -group_sum / static_cast<double>(g);
  }
  return loss_sum / static_cast<double>(groups.size());
}

}  // namespace grpodlab
