#pragma once

// Synthetic verifiable task families. Counting: a serialized symbol grid plus
// a query symbol, answer = occurrence count. ArithChain: a chain of mod-10
// single-digit assignments, answer = final value. Both keep every ground
// truth inside [0, 9] so the answer span is a single digit token.

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "grpodlab/errors.hpp"
#include "grpodlab/rng.hpp"
#include "grpodlab/vocab.hpp"

namespace grpodlab {

enum class TaskFamily { Counting, ArithChain };

inline std::string family_name(TaskFamily f) {
  return f == TaskFamily::Counting ? "counting" : "arith_chain";
}

inline TaskFamily family_from_name(const std::string& s) {
  if (s == "counting") return TaskFamily::Counting;
  if (s == "arith_chain") return TaskFamily::ArithChain;
  throw config_error("unknown task family: " + s);
}

struct TaskInstance {
  TaskFamily family = TaskFamily::Counting;
  std::vector<int> prompt_tokens;
  int ground_truth = 0;
  std::uint64_t seed = 0;  // sub-seed of the stream that produced it
};

struct ValueRange {
  int lo = 0;
  int hi = 9;
  bool operator==(const ValueRange&) const = default;
};

// Which families a dataset draws from. Mixed interleaves both families and
// stands in for the broad pretraining corpus behind the paper's backbone.
enum class DatasetFamily { Counting, ArithChain, Mixed };

inline std::string dataset_family_name(DatasetFamily f) {
  switch (f) {
    case DatasetFamily::Counting: return "counting";
    case DatasetFamily::ArithChain: return "arith_chain";
    default: return "mixed";
  }
}

inline DatasetFamily dataset_family_from_name(const std::string& s) {
  if (s == "counting") return DatasetFamily::Counting;
  if (s == "arith_chain") return DatasetFamily::ArithChain;
  if (s == "mixed") return DatasetFamily::Mixed;
  throw config_error("unknown dataset family: " + s);
}

struct DatasetSpec {
  DatasetFamily family = DatasetFamily::Counting;
  int count = 1;
  int grid_rows = 3;
  int grid_cols = 3;
  int alphabet_size = 6;
  int chain_length = 3;
  ValueRange value_range;
  std::uint64_t seed = 0;
  bool operator==(const DatasetSpec&) const = default;
};

// grid [[A,B],[A,C]] query A -> prompt "A B ; A C ? A", ground truth 2.
inline TaskInstance gen_counting_task(RngStream& rng, int rows, int cols,
                                      int alphabet_size, const Vocab& vocab) {
  if (rows < 1 || cols < 1 || rows * cols > 64)
    throw config_error("counting task: need 1 <= rows*cols <= 64, got " +
                       std::to_string(rows) + "x" + std::to_string(cols));
  if (alphabet_size < 2 || alphabet_size > vocab.n_grid_symbols())
    throw config_error("counting task: alphabet_size must be in [2, " +
                       std::to_string(vocab.n_grid_symbols()) + "]");

  const int cells = rows * cols;
  std::vector<int> grid(static_cast<std::size_t>(cells));
  int query_sym = 0;
  int count = 0;
  do {  // resample until the count is a single digit
    for (auto& g : grid)
      g = static_cast<int>(rng.next_below(static_cast<std::uint32_t>(alphabet_size)));
    query_sym =
        static_cast<int>(rng.next_below(static_cast<std::uint32_t>(alphabet_size)));
    count = 0;
    for (int g : grid) count += (g == query_sym);
  } while (count > 9);

  TaskInstance inst;
  inst.family = TaskFamily::Counting;
  inst.ground_truth = count;
  inst.prompt_tokens.reserve(static_cast<std::size_t>(cells + rows + 1));
  for (int r = 0; r < rows; ++r) {
    if (r) inst.prompt_tokens.push_back(vocab.sep);
    for (int c = 0; c < cols; ++c)
      inst.prompt_tokens.push_back(
          vocab.grid_symbol(grid[static_cast<std::size_t>(r * cols + c)]));
  }
  inst.prompt_tokens.push_back(vocab.query);
  inst.prompt_tokens.push_back(vocab.grid_symbol(query_sym));
  return inst;
}

// chain "x = 3 ; y = x + 4 ? y" -> ground truth 7. Arithmetic is mod 10.
inline TaskInstance gen_arith_task(RngStream& rng, int chain_length,
                                   ValueRange range, const Vocab& vocab) {
  if (chain_length < 2 || chain_length > Vocab::kMaxVariables)
    throw config_error("arith task: need 2 <= chain_length <= " +
                       std::to_string(Vocab::kMaxVariables));
  if (range.lo < 0 || range.hi > 9 || range.lo > range.hi)
    throw config_error("arith task: value range must satisfy 0 <= lo <= hi <= 9");

  const auto draw = [&rng, range] {
    return range.lo + static_cast<int>(rng.next_below(
                          static_cast<std::uint32_t>(range.hi - range.lo + 1)));
  };

  TaskInstance inst;
  inst.family = TaskFamily::ArithChain;
  int value = draw();
  inst.prompt_tokens = {vocab.variable(0), vocab.assign, vocab.digit(value)};
  for (int k = 1; k < chain_length; ++k) {
    bool add = rng.next_below(2) == 0;
    int operand = draw();
    value = add ? (value + operand) % 10 : ((value - operand) % 10 + 10) % 10;
    inst.prompt_tokens.push_back(vocab.sep);
    inst.prompt_tokens.push_back(vocab.variable(k));
    inst.prompt_tokens.push_back(vocab.assign);
    inst.prompt_tokens.push_back(vocab.variable(k - 1));
    inst.prompt_tokens.push_back(add ? vocab.plus : vocab.minus);
    inst.prompt_tokens.push_back(vocab.digit(operand));
  }
  inst.prompt_tokens.push_back(vocab.query);
  inst.prompt_tokens.push_back(vocab.variable(chain_length - 1));
  inst.ground_truth = value;
  return inst;
}

namespace detail {

inline int oracle_counting(const std::vector<int>& prompt, const Vocab& vocab) {
  // Everything before "?" is grid cells and row separators.
  std::size_t q = 0;
  while (q < prompt.size() && prompt[q] != vocab.query) ++q;
  if (q + 2 != prompt.size())
    throw malformed_error("counting prompt: expected '? <symbol>' suffix");
  int query_sym = prompt[q + 1];
  if (!vocab.is_grid_symbol(query_sym))
    throw malformed_error("counting prompt: query is not a grid symbol");
  int count = 0;
  for (std::size_t i = 0; i < q; ++i) {
    if (prompt[i] == vocab.sep) continue;
    if (!vocab.is_grid_symbol(prompt[i]))
      throw malformed_error("counting prompt: unexpected token in grid");
    count += (prompt[i] == query_sym);
  }
  return count;
}

inline int oracle_arith(const std::vector<int>& prompt, const Vocab& vocab) {
  // Statements separated by ";", then "? <var>". Re-evaluates the chain.
  std::size_t q = 0;
  while (q < prompt.size() && prompt[q] != vocab.query) ++q;
  if (q + 2 != prompt.size())
    throw malformed_error("arith prompt: expected '? <var>' suffix");
  int queried = prompt[q + 1];
  if (!vocab.is_variable(queried))
    throw malformed_error("arith prompt: query is not a variable");

  int values[Vocab::kMaxVariables];
  bool defined[Vocab::kMaxVariables] = {};
  std::size_t i = 0;
  while (i < q) {
    if (i > 0) {
      if (prompt[i] != vocab.sep)
        throw malformed_error("arith prompt: missing statement separator");
      ++i;
    }
    if (i + 2 >= q || !vocab.is_variable(prompt[i]) ||
        prompt[i + 1] != vocab.assign)
      throw malformed_error("arith prompt: bad assignment head");
    int target = vocab.variable_index(prompt[i]);
    i += 2;
    int value = 0;
    if (vocab.is_digit(prompt[i])) {
      value = vocab.digit_value(prompt[i]);
      ++i;
    } else if (vocab.is_variable(prompt[i])) {
      int src = vocab.variable_index(prompt[i]);
      if (!defined[src])
        throw malformed_error("arith prompt: use of undefined variable");
      if (i + 2 >= q)
        throw malformed_error("arith prompt: truncated expression");
      bool add;
      if (prompt[i + 1] == vocab.plus)
        add = true;
      else if (prompt[i + 1] == vocab.minus)
        add = false;
      else
        throw malformed_error("arith prompt: expected '+' or '-'");
      if (!vocab.is_digit(prompt[i + 2]))
        throw malformed_error("arith prompt: expected digit operand");
      int operand = vocab.digit_value(prompt[i + 2]);
      value = add ? (values[src] + operand) % 10
                  : ((values[src] - operand) % 10 + 10) % 10;
      i += 3;
    } else {
      throw malformed_error("arith prompt: bad expression");
    }
    values[target] = value;
    defined[target] = true;
  }
  int qi = vocab.variable_index(queried);
  if (!defined[qi])
    throw malformed_error("arith prompt: queried variable never assigned");
  return values[qi];
}

}  // namespace detail

// Recomputes the answer from the prompt alone, ignoring the stored
// ground_truth. This is the independent check behind the verifiable reward.
inline int oracle_answer(const TaskInstance& inst, const Vocab& vocab) {
  return inst.family == TaskFamily::Counting
             ? detail::oracle_counting(inst.prompt_tokens, vocab)
             : detail::oracle_arith(inst.prompt_tokens, vocab);
}

// Gold completion: <think> trace </think> <answer> d </answer> <eos>.
// Counting trace: for each matching cell in row-major order, the query symbol
// and the running count. Arith trace: each variable with its value.
inline std::vector<int> make_sft_demo(const TaskInstance& inst,
                                      const Vocab& vocab) {
  std::vector<int> out;
  out.push_back(vocab.think_open);
  if (inst.family == TaskFamily::Counting) {
    std::size_t q = 0;
    const auto& p = inst.prompt_tokens;
    while (q < p.size() && p[q] != vocab.query) ++q;
    int query_sym = p[q + 1];
    int running = 0;
    for (std::size_t i = 0; i < q; ++i) {
      if (p[i] == query_sym) {
        ++running;
        out.push_back(query_sym);
        out.push_back(vocab.digit(running));
        out.push_back(vocab.sep);
      }
    }
  } else {
    // Re-walk the chain, emitting "var value ;" per statement.
    const auto& p = inst.prompt_tokens;
    std::size_t q = 0;
    while (q < p.size() && p[q] != vocab.query) ++q;
    int values[Vocab::kMaxVariables] = {};
    std::size_t i = 0;
    while (i < q) {
      if (i > 0) ++i;  // skip ";"
      int target = vocab.variable_index(p[i]);
      int value;
      if (vocab.is_digit(p[i + 2])) {
        value = vocab.digit_value(p[i + 2]);
        i += 3;
      } else {
        int src = vocab.variable_index(p[i + 2]);
        int operand = vocab.digit_value(p[i + 4]);
        value = p[i + 3] == vocab.plus
                    ? (values[src] + operand) % 10
                    : ((values[src] - operand) % 10 + 10) % 10;
        i += 5;
      }
      values[target] = value;
      out.push_back(vocab.variable(target));
      out.push_back(vocab.digit(value));
      out.push_back(vocab.sep);
    }
  }
  out.push_back(vocab.think_close);
  out.push_back(vocab.answer_open);
  out.push_back(vocab.digit(inst.ground_truth));
  out.push_back(vocab.answer_close);
  out.push_back(vocab.eos);
  return out;
}

inline TaskInstance generate_instance(const DatasetSpec& spec, int index,
                                      const Vocab& vocab) {
  RngStream stream = RngStream::from_seed(spec.seed, RngDomain::DatasetInstance,
                                          static_cast<std::uint64_t>(index));
  TaskFamily fam;
  switch (spec.family) {
    case DatasetFamily::Counting: fam = TaskFamily::Counting; break;
    case DatasetFamily::ArithChain: fam = TaskFamily::ArithChain; break;
    default:
      fam = stream.next_below(2) == 0 ? TaskFamily::Counting
                                      : TaskFamily::ArithChain;
  }
  TaskInstance inst =
      fam == TaskFamily::Counting
          ? gen_counting_task(stream, spec.grid_rows, spec.grid_cols,
                              spec.alphabet_size, vocab)
          : gen_arith_task(stream, spec.chain_length, spec.value_range, vocab);
  std::uint64_t mix = spec.seed;
  detail::splitmix64(mix);
  inst.seed = mix ^ static_cast<std::uint64_t>(index);
  return inst;
}

inline std::vector<TaskInstance> generate_dataset(const DatasetSpec& spec,
                                                  const Vocab& vocab) {
  if (spec.count < 1) throw config_error("dataset spec: count must be >= 1");
  std::vector<TaskInstance> out;
  out.reserve(static_cast<std::size_t>(spec.count));
  for (int i = 0; i < spec.count; ++i)
    out.push_back(generate_instance(spec, i, vocab));
  return out;
}

inline constexpr const char* kDatasetFormat = "grpo-d-lab/dataset";
inline constexpr int kDatasetVersion = 1;

inline void save_dataset(const std::vector<TaskInstance>& instances,
                         const Vocab& vocab, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open for writing: " + path);
  nlohmann::json header{{"format", kDatasetFormat},
                        {"version", kDatasetVersion},
                        {"vocab_hash", vocab.hash_hex()}};
  out << header.dump() << '\n';
  for (const auto& inst : instances) {
    nlohmann::json rec{{"family", family_name(inst.family)},
                       {"prompt_ids", inst.prompt_tokens},
                       {"ground_truth", inst.ground_truth},
                       {"seed", inst.seed}};
    out << rec.dump() << '\n';
  }
  if (!out) throw io_error("write failed: " + path);
}

inline std::vector<TaskInstance> load_dataset(const std::string& path,
                                              const Vocab& vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open: " + path);
  std::string line;
  if (!std::getline(in, line)) throw io_error("empty dataset file: " + path);

  nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
  if (header.is_discarded() || !header.is_object() ||
      header.value("format", "") != kDatasetFormat)
    throw io_error("not a dataset file: " + path);
  if (header.value("version", -1) != kDatasetVersion)
    throw io_error("dataset version mismatch in " + path + ": expected " +
                   std::to_string(kDatasetVersion));
  if (header.value("vocab_hash", "") != vocab.hash_hex())
    throw io_error("dataset vocab hash mismatch in " + path);

  std::vector<TaskInstance> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json rec = nlohmann::json::parse(line, nullptr, false);
    if (rec.is_discarded() || !rec.is_object() || !rec.contains("family") ||
        !rec.contains("prompt_ids") || !rec.contains("ground_truth") ||
        !rec.contains("seed"))
      throw io_error("malformed dataset record in " + path);
    TaskInstance inst;
    inst.family = family_from_name(rec["family"].get<std::string>());
    inst.prompt_tokens = rec["prompt_ids"].get<std::vector<int>>();
    inst.ground_truth = rec["ground_truth"].get<int>();
    inst.seed = rec["seed"].get<std::uint64_t>();
    for (int id : inst.prompt_tokens)
      if (id < 0 || id >= vocab.size())
        throw io_error("dataset token id out of vocab range in " + path);
    out.push_back(std::move(inst));
  }
  return out;
}

}  // namespace grpodlab
