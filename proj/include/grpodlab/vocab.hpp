#pragma once

// Token vocabulary shared by both task families. The four structural tags are
// atomic tokens, never decomposed.

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "grpodlab/errors.hpp"
#include "grpodlab/rng.hpp"

namespace grpodlab {

class Vocab {
 public:
  static constexpr int kMaxGridSymbols = 20;  // "A".."T"
  static constexpr int kMaxVariables = 6;     // chain length cap

  // Layout: pad, eos, separator, query marker, the four tags, digits 0-9,
  // grid symbols, chain variables, "=", "+", "-".
  static Vocab standard(int grid_symbols = 6) {
    if (grid_symbols < 2 || grid_symbols > kMaxGridSymbols)
      throw config_error("vocab: grid_symbols must be in [2, 20], got " +
                         std::to_string(grid_symbols));
    Vocab v;
    auto add = [&v](std::string tok) {
      v.ids_.emplace(tok, static_cast<int>(v.tokens_.size()));
      v.tokens_.push_back(std::move(tok));
      return static_cast<int>(v.tokens_.size()) - 1;
    };
    v.pad = add("<pad>");
    v.eos = add("<eos>");
    v.sep = add(";");
    v.query = add("?");
    v.think_open = add("<think>");
    v.think_close = add("</think>");
    v.answer_open = add("<answer>");
    v.answer_close = add("</answer>");
    v.digit0_ = add("0");
    for (int d = 1; d <= 9; ++d) add(std::string(1, char('0' + d)));
    v.grid0_ = static_cast<int>(v.tokens_.size());
    v.n_grid_symbols_ = grid_symbols;
    for (int k = 0; k < grid_symbols; ++k) add(std::string(1, char('A' + k)));
    v.var0_ = static_cast<int>(v.tokens_.size());
    for (const char* name : {"x", "y", "z", "u", "v", "w"}) add(name);
    v.assign = add("=");
    v.plus = add("+");
    v.minus = add("-");
    return v;
  }

  int size() const { return static_cast<int>(tokens_.size()); }

  const std::string& token(int id) const {
    if (id < 0 || id >= size())
      throw contract_error("vocab: token id out of range: " +
                           std::to_string(id));
    return tokens_[static_cast<std::size_t>(id)];
  }

  int id(std::string_view tok) const {
    auto it = ids_.find(std::string(tok));
    if (it == ids_.end())
      throw contract_error("vocab: unknown token: " + std::string(tok));
    return it->second;
  }

  int digit(int d) const {
    if (d < 0 || d > 9) throw contract_error("vocab: digit out of range");
    return digit0_ + d;
  }
  bool is_digit(int id) const { return id >= digit0_ && id < digit0_ + 10; }
  int digit_value(int id) const {
    if (!is_digit(id)) throw contract_error("vocab: not a digit token");
    return id - digit0_;
  }

  int n_grid_symbols() const { return n_grid_symbols_; }
  int grid_symbol(int k) const {
    if (k < 0 || k >= n_grid_symbols_)
      throw contract_error("vocab: grid symbol index out of range");
    return grid0_ + k;
  }
  bool is_grid_symbol(int id) const {
    return id >= grid0_ && id < grid0_ + n_grid_symbols_;
  }

  int variable(int k) const {
    if (k < 0 || k >= kMaxVariables)
      throw contract_error("vocab: variable index out of range");
    return var0_ + k;
  }
  bool is_variable(int id) const {
    return id >= var0_ && id < var0_ + kMaxVariables;
  }
  int variable_index(int id) const {
    if (!is_variable(id)) throw contract_error("vocab: not a variable token");
    return id - var0_;
  }

  bool is_structural_tag(int id) const {
    return id == think_open || id == think_close || id == answer_open ||
           id == answer_close;
  }

  // Renders a token-id sequence for logs and eval records.
  std::string render(const std::vector<int>& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ' ';
      out += token(ids[i]);
    }
    return out;
  }

  // Identity of the vocabulary; datasets and checkpoints record this so
  // mismatched artifacts are rejected at load time.
  std::uint64_t hash() const {
    std::string joined;
    for (const auto& t : tokens_) {
      joined += t;
      joined += '\n';
    }
    return fnv1a64(joined);
  }

  std::string hash_hex() const {
    static const char* kHex = "0123456789abcdef";
    std::uint64_t h = hash();
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
      s[static_cast<std::size_t>(i)] = kHex[h & 0xf];
      h >>= 4;
    }
    return s;
  }

  // Role ids, fixed at construction.
  int pad = -1, eos = -1, sep = -1, query = -1;
  int think_open = -1, think_close = -1, answer_open = -1, answer_close = -1;
  int assign = -1, plus = -1, minus = -1;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
  int digit0_ = -1;
  int grid0_ = -1;
  int var0_ = -1;
  int n_grid_symbols_ = 0;
};

}  // namespace grpodlab
