#include <doctest.h>

#include <vector>

#include "grpodlab/reward.hpp"
#include "grpodlab/rng.hpp"
#include "grpodlab/vocab.hpp"

#include "support/reference_parser.hpp"

using namespace grpodlab;

namespace {

const Vocab& vocab() {
  static Vocab v = Vocab::standard();
  return v;
}

// <think> T </think> <answer> digits... </answer>
std::vector<int> canonical(std::initializer_list<int> answer_body,
                           bool with_eos = false) {
  const Vocab& v = vocab();
  std::vector<int> out{v.think_open, v.grid_symbol(0), v.think_close,
                       v.answer_open};
  out.insert(out.end(), answer_body);
  out.push_back(v.answer_close);
  if (with_eos) out.push_back(v.eos);
  return out;
}

}  // namespace

TEST_CASE("canonical completion is well-formed") {
  const Vocab& v = vocab();
  auto parsed = parse_completion(canonical({v.digit(7)}), v);
  CHECK(parsed.well_formed);
  CHECK(parsed.answer_span.present);
  CHECK(parsed.think_span.present);
  CHECK(format_reward(canonical({v.digit(7)}), v) == 1.0);
  CHECK(format_reward(canonical({v.digit(7)}, true), v) == 1.0);
}

TEST_CASE("empty think body is still well-formed") {
  const Vocab& v = vocab();
  std::vector<int> seq{v.think_open, v.think_close, v.answer_open, v.digit(2),
                       v.answer_close};
  CHECK(parse_completion(seq, v).well_formed);
}

TEST_CASE("answer extraction survives broken think structure") {
  const Vocab& v = vocab();
  std::vector<int> bare{v.answer_open, v.digit(7), v.answer_close};
  auto parsed = parse_completion(bare, v);
  CHECK_FALSE(parsed.well_formed);
  CHECK(parsed.answer_span.present);
  CHECK(accuracy_reward(bare, v, 7) == 1.0);
  CHECK(format_reward(bare, v) == 0.0);
}

TEST_CASE("think without answer leaves the answer span absent") {
  const Vocab& v = vocab();
  std::vector<int> seq{v.think_open, v.grid_symbol(1), v.think_close};
  auto parsed = parse_completion(seq, v);
  CHECK_FALSE(parsed.well_formed);
  CHECK_FALSE(parsed.answer_span.present);
}

TEST_CASE("malformed shapes fail the format reward") {
  const Vocab& v = vocab();
  CHECK(format_reward({}, v) == 0.0);

  // doubled answer tags
  std::vector<int> doubled{v.think_open,  v.think_close, v.answer_open,
                           v.digit(7),    v.answer_close, v.answer_open,
                           v.digit(7),    v.answer_close};
  CHECK(format_reward(doubled, v) == 0.0);
  CHECK_FALSE(parse_completion(doubled, v).answer_span.present);

  // tags out of order
  std::vector<int> reversed{v.answer_open, v.digit(1), v.answer_close,
                            v.think_open, v.think_close};
  CHECK(format_reward(reversed, v) == 0.0);

  // junk between </think> and <answer>
  std::vector<int> gap{v.think_open, v.think_close, v.digit(0), v.answer_open,
                       v.digit(1),  v.answer_close};
  CHECK(format_reward(gap, v) == 0.0);

  // empty answer body
  std::vector<int> empty_ans{v.think_open, v.think_close, v.answer_open,
                             v.answer_close};
  CHECK(format_reward(empty_ans, v) == 0.0);

  // eos buried mid-sequence
  std::vector<int> mid_eos{v.think_open, v.eos,      v.think_close,
                           v.answer_open, v.digit(1), v.answer_close};
  CHECK(format_reward(mid_eos, v) == 0.0);

  // trailing tokens after </answer>
  std::vector<int> tail{v.think_open, v.think_close, v.answer_open,
                        v.digit(1),  v.answer_close, v.digit(1)};
  CHECK(format_reward(tail, v) == 0.0);
}

TEST_CASE("accuracy requires exactly one matching digit") {
  const Vocab& v = vocab();
  CHECK(accuracy_reward(canonical({v.digit(7)}), v, 7) == 1.0);
  CHECK(accuracy_reward(canonical({v.digit(4)}), v, 7) == 0.0);
  CHECK(accuracy_reward(canonical({v.digit(7), v.digit(7)}), v, 7) == 0.0);
  CHECK(accuracy_reward(canonical({v.digit(7), v.grid_symbol(0)}), v, 7) == 0.0);
  CHECK(accuracy_reward(canonical({}), v, 7) == 0.0);
  // pad tokens are whitespace-role and ignored
  CHECK(accuracy_reward(canonical({v.pad, v.digit(7), v.pad}), v, 7) == 1.0);
  CHECK_THROWS_AS(accuracy_reward(canonical({v.digit(7)}), v, 11),
                  contract_error);
}

TEST_CASE("total reward composes per Eq. 1") {
  const Vocab& v = vocab();
  auto good = canonical({v.digit(7)});
  auto r1 = total_reward(good, v, 7, {1.0});
  CHECK(r1.total == doctest::Approx(2.0));

  auto wrong = canonical({v.digit(4)});
  auto r2 = total_reward(wrong, v, 7, {0.5});
  CHECK(r2.acc == 0.0);
  CHECK(r2.format == 1.0);
  CHECK(r2.total == doctest::Approx(0.5));

  std::vector<int> bare{v.answer_open, v.digit(7), v.answer_close};
  auto r3 = total_reward(bare, v, 7, {1.0});
  CHECK(r3.acc == 1.0);
  CHECK(r3.format == 0.0);
  CHECK(r3.total == doctest::Approx(1.0));

  CHECK_THROWS_AS(total_reward(good, v, 7, {-0.5}), contract_error);
}

TEST_CASE("alpha monotonicity and reward range") {
  const Vocab& v = vocab();
  auto rng = RngStream::from_seed(21, RngDomain::Test);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<int> seq(rng.next_below(12));
    for (auto& t : seq)
      t = static_cast<int>(rng.next_below(static_cast<std::uint32_t>(v.size())));
    int gt = static_cast<int>(rng.next_below(10));
    double prev = -1.0;
    bool formatted = format_reward(seq, v) == 1.0;
    for (double alpha : {0.0, 0.25, 0.5, 0.75, 1.0}) {
      auto r = total_reward(seq, v, gt, {alpha});
      CHECK(r.total >= 0.0);
      CHECK(r.total <= 1.0 + alpha);
      CHECK((r.acc == 0.0 || r.acc == 1.0));
      CHECK((r.format == 0.0 || r.format == 1.0));
      if (prev >= 0.0) {
        if (formatted)
          CHECK(r.total > prev);  // strictly increasing in alpha
        else
          CHECK(r.acc == r.total);  // constant in alpha
      }
      prev = r.total;
    }
  }
}



TEST_CASE("parser agrees with the reference scan on short sequences") {
  const Vocab& v = vocab();
  // exhaustive over a 6-token sub-vocabulary up to length 5
  std::vector<int> alphabet{v.think_open, v.think_close, v.answer_open,
                            v.answer_close, v.digit(7), v.eos};
  const int base = static_cast<int>(alphabet.size());
  for (int len = 0; len <= 5; ++len) {
    long total = 1;
    for (int i = 0; i < len; ++i) total *= base;
    for (long code = 0; code < total; ++code) {
      std::vector<int> seq(static_cast<std::size_t>(len));
      long c = code;
      for (int i = 0; i < len; ++i) {
        seq[static_cast<std::size_t>(i)] = alphabet[static_cast<std::size_t>(c % base)];
        c /= base;
      }
      auto mine = parse_completion(seq, v);
      auto ref = reference::parse(seq, v);
      REQUIRE(mine.well_formed == ref.well_formed);
      REQUIRE(mine.answer_span.present == ref.has_answer);
      REQUIRE(accuracy_reward(seq, v, 7) == (ref.digit == 7 ? 1.0 : 0.0));
    }
  }
}

TEST_CASE("parser is total on random garbage") {
  const Vocab& v = vocab();
  auto rng = RngStream::from_seed(22, RngDomain::Test);
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<int> seq(rng.next_below(64));
    for (auto& t : seq)
      t = static_cast<int>(rng.next_below(static_cast<std::uint32_t>(v.size())));
    CHECK_NOTHROW(parse_completion(seq, v));
  }
}
