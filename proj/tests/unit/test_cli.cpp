#include <doctest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "grpodlab/policy.hpp"
#include "grpodlab/vocab.hpp"

#ifndef GRPOD_LAB_BIN
#define GRPOD_LAB_BIN "./grpod-lab"
#endif

namespace {

struct CmdResult {
  int exit_code = -1;
  std::string output;
};

CmdResult run_cli(const std::string& args) {
  const std::string cmd = std::string(GRPOD_LAB_BIN) + " " + args + " 2>&1";
  std::array<char, 4096> buf{};
  CmdResult res;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  while (std::size_t n = fread(buf.data(), 1, buf.size(), pipe))
    res.output.append(buf.data(), n);
  int status = pclose(pipe);
  res.exit_code = WEXITSTATUS(status);
  return res;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name)
      : path(std::filesystem::path("grpodlab_cli_runs") / name) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all("grpodlab_cli_runs"); }
  std::string str() const { return path.string(); }
};

}  // namespace

TEST_CASE("cli: gen-data is reproducible byte for byte") {
  TempDir dir("gendata");
  const std::string spec = dir.str() + "/spec.json";
  {
    std::ofstream out(spec);
    out << R"({"family":"counting","count":50,"grid_rows":3,"grid_cols":3,)"
        << R"("alphabet_size":6,"chain_length":3,"value_lo":0,"value_hi":9,)"
        << R"("seed":7})";
  }
  auto r1 = run_cli("gen-data --spec " + spec + " --out " + dir.str() + "/a.jsonl");
  auto r2 = run_cli("gen-data --spec " + spec + " --out " + dir.str() + "/b.jsonl");
  CHECK(r1.exit_code == 0);
  CHECK(r2.exit_code == 0);
  CHECK(slurp(dir.str() + "/a.jsonl") == slurp(dir.str() + "/b.jsonl"));
}

TEST_CASE("cli: train smoke run writes the metric stream") {
  TempDir dir("train");
  const std::string cfg_path = dir.str() + "/cfg.json";
  nlohmann::json cfg{
      {"method", "grpo_d"},
      {"train_data",
       {{"spec",
         {{"family", "counting"}, {"count", 32}, {"grid_rows", 2},
          {"grid_cols", 2}, {"alphabet_size", 4}, {"chain_length", 3},
          {"value_lo", 0}, {"value_hi", 9}, {"seed", 3}}}}},
      {"eval_data", nlohmann::json::array()},
      {"schedule",
       {{"beta_min", 0.04}, {"beta_max", 0.1}, {"exploration_steps", 3},
        {"total_steps", 10}}},
      {"total_steps", 10},
      {"group_size", 2},
      {"prompts_per_step", 2},
      {"sampler", {{"temperature", 1.0}, {"max_new_tokens", 12}}},
      {"arch", {{"d_model", 16}, {"n_heads", 2}, {"max_context", 48}}},
      {"seed", 5},
      {"threads", 1},
      {"out_dir", dir.str() + "/run"}};
  {
    std::ofstream out(cfg_path);
    out << cfg.dump(2);
  }
  auto res = run_cli("--quiet train --config " + cfg_path);
  CHECK(res.exit_code == 0);
  std::ifstream in(dir.str() + "/run/metrics.jsonl");
  int lines = 0;
  for (std::string l; std::getline(in, l);) lines += !l.empty();
  CHECK(lines == 10);
}

TEST_CASE("cli: invalid config exits 2 with one line per violation") {
  TempDir dir("badcfg");
  const std::string cfg_path = dir.str() + "/bad.json";
  {
    std::ofstream out(cfg_path);
    out << R"({"method":"grpo_d","train_data":{"spec":{"family":"counting"}},)"
        << R"("group_size":1,"alpha":-2,"clip_epsilon":4,"out_dir":""})";
  }
  auto res = run_cli("train --config " + cfg_path);
  CHECK(res.exit_code == 2);
  CHECK(res.output.find("group_size") != std::string::npos);
  CHECK(res.output.find("alpha") != std::string::npos);
  CHECK(res.output.find("clip_epsilon") != std::string::npos);
  CHECK(res.output.find("out_dir") != std::string::npos);
}

TEST_CASE("cli: eval rejects a vocab hash mismatch with exit 2") {
  TempDir dir("evalmismatch");
  const std::string spec = dir.str() + "/spec.json";
  {
    std::ofstream out(spec);
    out << R"({"family":"arith_chain","count":8,"chain_length":3,"seed":2})";
  }
  REQUIRE(run_cli("gen-data --spec " + spec + " --out " + dir.str() +
                  "/data.jsonl").exit_code == 0);

  // checkpoint whose vocab hash comes from a 7-symbol alphabet
  const std::string ckpt = dir.str() + "/ckpt";
  grpodlab::PolicyArch arch;
  arch.vocab_size = grpodlab::Vocab::standard().size();
  grpodlab::PolicyParams p = grpodlab::init_params(arch, 1);
  grpodlab::save_checkpoint(ckpt, p, nullptr,
                            grpodlab::Vocab::standard(7).hash_hex());

  auto bad = run_cli("eval --ckpt " + ckpt + " --data " + dir.str() +
                     "/data.jsonl");
  CHECK(bad.exit_code == 2);
  CHECK(bad.output.find("hash mismatch") != std::string::npos);

  auto missing = run_cli("eval --ckpt " + dir.str() + "/nope --data " +
                         dir.str() + "/data.jsonl");
  CHECK(missing.exit_code == 3);

  grpodlab::save_checkpoint(ckpt, p, nullptr,
                            grpodlab::Vocab::standard().hash_hex());
  auto good = run_cli("cross-eval --ckpt " + ckpt + " --data " + dir.str() +
                      "/data.jsonl");
  CHECK(good.exit_code == 0);
  CHECK(good.output.find("answer_accuracy") != std::string::npos);
}

TEST_CASE("cli: schedule-dump hits the paper endpoints") {
  auto res = run_cli(
      "schedule-dump --beta-min 0.04 --beta-max 0.1 --w 300 --t 1000 "
      "--resolution 100");
  CHECK(res.exit_code == 0);
  CHECK(res.output.find("step,beta") != std::string::npos);
  CHECK(res.output.find("0,0.07") != std::string::npos);
  CHECK(res.output.find("300,0.04") != std::string::npos);
  CHECK(res.output.find("1000,0.1") != std::string::npos);
}

TEST_CASE("cli: corrupted gradient makes gradcheck fail") {
  auto res = run_cli("gradcheck --points 1 --corrupt");
  CHECK(res.exit_code == 3);
  CHECK(res.output.find("FAILED") != std::string::npos);
}
