#pragma once

// Verifiable rewards. Format: the completion is exactly
//   <think> body </think> <answer> body </answer> [<eos>]
// with each tag appearing once and a non-empty answer body. Accuracy: the
// answer body, pad tokens aside, is the single correct digit. Answer
// extraction tolerates a broken think structure so the two signals stay
// independent.

#include <cmath>
#include <cstddef>
#include <vector>

#include "grpodlab/errors.hpp"
#include "grpodlab/vocab.hpp"

namespace grpodlab {

struct RewardWeights {
  double alpha = 1.0;  // weight of the format reward in the total
};

struct RewardBreakdown {
  double acc = 0.0;
  double format = 0.0;
  double total = 0.0;
};

struct TokenSpan {
  std::size_t begin = 0;  // first token of the span body
  std::size_t end = 0;    // one past the last token
  bool present = false;
};

struct ParsedCompletion {
  TokenSpan think_span;
  TokenSpan answer_span;
  bool well_formed = false;
};

// Total on any token sequence: malformed input is data, not an error.
inline ParsedCompletion parse_completion(const std::vector<int>& tokens,
                                         const Vocab& vocab) {
  ParsedCompletion out;

  int n_think_open = 0, n_think_close = 0, n_answer_open = 0,
      n_answer_close = 0;
  std::size_t answer_open_pos = 0, answer_close_pos = 0;
  std::size_t think_open_pos = 0, think_close_pos = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    int t = tokens[i];
    if (t == vocab.think_open) { ++n_think_open; think_open_pos = i; }
    else if (t == vocab.think_close) { ++n_think_close; think_close_pos = i; }
    else if (t == vocab.answer_open) { ++n_answer_open; answer_open_pos = i; }
    else if (t == vocab.answer_close) { ++n_answer_close; answer_close_pos = i; }
  }

  // Answer extraction survives broken think structure: a single ordered
  // <answer>...</answer> pair is enough.
  if (n_answer_open == 1 && n_answer_close == 1 &&
      answer_open_pos < answer_close_pos) {
    out.answer_span = {answer_open_pos + 1, answer_close_pos, true};
  }
  if (n_think_open == 1 && n_think_close == 1 &&
      think_open_pos < think_close_pos) {
    out.think_span = {think_open_pos + 1, think_close_pos, true};
  }

  // Strict shape for the format reward.
  if (n_think_open != 1 || n_think_close != 1 || n_answer_open != 1 ||
      n_answer_close != 1)
    return out;
  if (tokens.empty() || tokens.front() != vocab.think_open) return out;
  std::size_t tail = tokens.size();
  if (tokens.back() == vocab.eos) --tail;
  if (tail == 0 || tokens[tail - 1] != vocab.answer_close) return out;
  if (!(think_open_pos < think_close_pos &&
        think_close_pos + 1 == answer_open_pos &&
        answer_open_pos + 1 < answer_close_pos &&
        answer_close_pos == tail - 1))
    return out;
  // Bodies may not contain eos; a stray eos mid-sequence is malformed.
  for (std::size_t i = 0; i < tail; ++i)
    if (tokens[i] == vocab.eos) return out;

  out.well_formed = true;
  return out;
}

inline double format_reward(const std::vector<int>& tokens,
                            const Vocab& vocab) {
  return parse_completion(tokens, vocab).well_formed ? 1.0 : 0.0;
}

inline double accuracy_reward(const std::vector<int>& tokens,
                              const Vocab& vocab, int ground_truth) {
  if (ground_truth < 0 || ground_truth > 9)
    throw contract_error("accuracy_reward: ground truth must be in [0, 9]");
  ParsedCompletion parsed = parse_completion(tokens, vocab);
  if (!parsed.answer_span.present) return 0.0;
  int digit = -1;
  for (std::size_t i = parsed.answer_span.begin; i < parsed.answer_span.end;
       ++i) {
    int t = tokens[i];
    if (t == vocab.pad) continue;  // whitespace-role token
    if (!vocab.is_digit(t) || digit != -1) return 0.0;  // exactly one digit
    digit = vocab.digit_value(t);
  }
  return digit == ground_truth ? 1.0 : 0.0;
}

// Eq. 1: R = R_acc + alpha * R_format.
inline RewardBreakdown total_reward(const std::vector<int>& tokens,
                                    const Vocab& vocab, int ground_truth,
                                    const RewardWeights& weights) {
  if (!(weights.alpha >= 0.0))
    throw contract_error("total_reward: alpha must be >= 0");
  RewardBreakdown r;
  r.acc = accuracy_reward(tokens, vocab, ground_truth);
  r.format = format_reward(tokens, vocab);
  r.total = r.acc + weights.alpha * r.format;
  return r;
}

}  // namespace grpodlab
