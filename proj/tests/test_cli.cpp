#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "layerfuse/container.hpp"
#include "layerfuse/merge.hpp"
#include "layerfuse/model.hpp"
#include "test_util.hpp"

using namespace layerfuse;
using namespace layerfuse::testutil;
using nlohmann::json;

namespace {

std::string cli_path() {
  if (const char* env = std::getenv("LAYERFUSE_CLI")) return env;
  return "./layerfuse";
}

struct RunResult {
  int code = -1;
  std::string output;
};

RunResult run_cli(const std::string& args, const TempDir& dir) {
  const std::string log = dir.file("cli_output.txt");
  const std::string command = cli_path() + " " + args + " > " + log + " 2>&1";
  const int status = std::system(command.c_str());
  RunResult result;
  result.code = WEXITSTATUS(status);
  std::ifstream in(log);
  std::stringstream buffer;
  buffer << in.rdbuf();
  result.output = buffer.str();
  return result;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json load_json(const std::string& path) { return json::parse(read_file(path)); }

// 5-layer model with a near-identity block planted at `pos`, saved to disk.
void write_planted_model(const std::string& path, std::uint64_t seed, std::size_t pos) {
  ModelConfig config;
  config.seed = seed;
  const ModelCheckpoint strong = strengthen_blocks(init_model(config), 6.0);
  save_checkpoint(plant_redundancy(strong, pos, 1e-3), path);
}

}  // namespace

TEST_CASE("init-train writes a loadable checkpoint and curve") {
  TempDir dir("cli");
  const RunResult r = run_cli(
      "init-train --steps 5 --batch 4 --seq-len 8 --seed 3 --out " + dir.file("m"), dir);
  REQUIRE(r.code == 0);
  const ModelCheckpoint ckpt = load_checkpoint(dir.file("m/model.ckpt"));
  CHECK(ckpt.config.n_layers == 4);
  CHECK(ckpt.config.d_model == 64);

  const std::string curve = read_file(dir.file("m/training_curve.csv"));
  CHECK(curve.rfind("step,loss\n", 0) == 0);
  CHECK(load_json(dir.file("m/resolved_config.json"))["steps"] == 5);
}

TEST_CASE("init-train is byte-deterministic under a fixed seed") {
  TempDir dir("cli");
  REQUIRE(run_cli("init-train --steps 3 --batch 4 --seq-len 8 --seed 11 --out " +
                      dir.file("a"), dir).code == 0);
  REQUIRE(run_cli("init-train --steps 3 --batch 4 --seq-len 8 --seed 11 --out " +
                      dir.file("b"), dir).code == 0);
  CHECK(read_file(dir.file("a/model.ckpt")) == read_file(dir.file("b/model.ckpt")));
  CHECK(read_file(dir.file("a/training_curve.csv")) == read_file(dir.file("b/training_curve.csv")));
}

TEST_CASE("capture produces the declared tensor shapes deterministically") {
  TempDir dir("cli");
  REQUIRE(run_cli("init-train --steps 0 --seed 4 --out " + dir.file("m"), dir).code == 0);

  const std::string base = "capture --model " + dir.file("m/model.ckpt") +
                           " --n-inputs 128 --seed 4 --out ";
  REQUIRE(run_cli(base + dir.file("c1"), dir).code == 0);
  REQUIRE(run_cli(base + dir.file("c2"), dir).code == 0);

  const TensorStore dump = TensorStore::load(dir.file("c1/activations.ckpt"));
  CHECK(dump.names().size() == 5);
  for (std::size_t l = 0; l <= 4; ++l) {
    const StoredTensor& t = dump.get("layer." + std::to_string(l) + ".activations");
    CHECK(t.shape == std::vector<std::size_t>{128, 64});
  }
  CHECK(read_file(dir.file("c1/activations.ckpt")) == read_file(dir.file("c2/activations.ckpt")));

  const RunResult bad = run_cli("capture --model " + dir.file("m/model.ckpt") +
                                    " --n-inputs 1 --out " + dir.file("c3"), dir);
  CHECK(bad.code == 2);
  CHECK(bad.output.find("at least 2") != std::string::npos);
}

TEST_CASE("similarity exports locate the planted pair") {
  TempDir dir("cli");
  write_planted_model(dir.file("planted.ckpt"), 42, 2);  // plant pair (2,3)
  REQUIRE(run_cli("capture --model " + dir.file("planted.ckpt") +
                      " --n-inputs 96 --seed 42 --out " + dir.file("cap"), dir).code == 0);
  REQUIRE(run_cli("similarity --activations " + dir.file("cap/activations.ckpt") +
                      " --seed 42 --out " + dir.file("sim"), dir).code == 0);

  // parse CSV, check symmetry and the argmax pair
  std::ifstream csv(dir.file("sim/similarity.csv"));
  std::string header;
  std::getline(csv, header);
  CHECK(header == "layer,1,2,3,4,5");
  double matrix[5][5];
  for (int i = 0; i < 5; ++i) {
    std::string line;
    REQUIRE(std::getline(csv, line));
    std::stringstream row(line);
    std::string cell;
    std::getline(row, cell, ',');  // layer id
    for (int j = 0; j < 5; ++j) {
      std::getline(row, cell, ',');
      matrix[i][j] = std::strtod(cell.c_str(), nullptr);
    }
  }
  double best = -1.0;
  std::pair<int, int> argmax{0, 0};
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 5; ++j) {
      CHECK(approx(matrix[i][j], matrix[j][i], 1e-9));
      if (i < j && matrix[i][j] > best) {
        best = matrix[i][j];
        argmax = {i + 1, j + 1};
      }
    }
  }
  CHECK(argmax.first == 2);
  CHECK(argmax.second == 3);

  // PGM: header plus 5x5 values in 0..255
  std::ifstream pgm(dir.file("sim/similarity.pgm"));
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  pgm >> magic >> w >> h >> maxval;
  CHECK(magic == "P2");
  CHECK(w == 5);
  CHECK(h == 5);
  CHECK(maxval == 255);
  for (int i = 0; i < 25; ++i) {
    int v = -1;
    pgm >> v;
    CHECK(v >= 0);
    CHECK(v <= 255);
  }

  const TensorStore embeddings = TensorStore::load(dir.file("sim/embeddings.ckpt"));
  CHECK(embeddings.get("layer.1.embedding").shape[0] == 96);
}

TEST_CASE("similarity on degenerate activations exits with code 4") {
  TempDir dir("cli");
  TensorStore store;
  store.meta()["kind"] = "activations";
  store.meta()["n_inputs"] = 8;
  store.meta()["d_model"] = 4;
  store.meta()["n_layers"] = 2;
  for (int l = 0; l <= 2; ++l) {
    std::vector<float> flat(8 * 4, 1.0f);  // all points identical
    store.put("layer." + std::to_string(l) + ".activations", {8, 4}, flat);
  }
  store.save(dir.file("degenerate.ckpt"));

  const RunResult r = run_cli("similarity --activations " + dir.file("degenerate.ckpt") +
                                  " --out " + dir.file("sim"), dir);
  CHECK(r.code == 4);
  CHECK(r.output.find("fixed sigma") != std::string::npos);
}

TEST_CASE("compress with reverse at full retention reports zero ratio") {
  TempDir dir("cli");
  REQUIRE(run_cli("init-train --steps 0 --seed 6 --out " + dir.file("m"), dir).code == 0);
  const RunResult r = run_cli("compress --model " + dir.file("m/model.ckpt") +
                                  " --method reverse --target-layers 4 --no-loss-impact"
                                  " --eval-batches 2 --seed 6 --out " + dir.file("out"), dir);
  REQUIRE(r.code == 0);
  const json report = load_json(dir.file("out/report.json"));
  CHECK(report["compression"]["ratio_percent"] == "0.00");
  CHECK(report["compression"]["l_retained"] == 4);
}

TEST_CASE("compress mka on a planted model barely moves cross-entropy") {
  TempDir dir("cli");
  write_planted_model(dir.file("planted.ckpt"), 7, 3);
  const RunResult r = run_cli("compress --model " + dir.file("planted.ckpt") +
                                  " --method mka --target-layers 4 --capture-n 96"
                                  " --no-loss-impact --eval-batches 10 --seed 7 --out " +
                                  dir.file("out"), dir);
  REQUIRE(r.code == 0);
  const json report = load_json(dir.file("out/report.json"));
  const double before = report["evaluation"]["original"]["cross_entropy"].get<double>();
  const double after = report["evaluation"]["compressed"]["cross_entropy"].get<double>();
  CHECK(std::fabs(after - before) <= 0.05);
  CHECK(report["steps"].size() == 1);
}

TEST_CASE("compress int4 on a 32-layer model reproduces the published ratio") {
  TempDir dir("cli");
  REQUIRE(run_cli("init-train --steps 0 --layers 32 --d-model 16 --heads 2 --d-ff 16"
                  " --seed 2 --out " + dir.file("m"), dir).code == 0);
  const RunResult r = run_cli("compress --model " + dir.file("m/model.ckpt") +
                                  " --method reverse --target-layers 16 --quant int4"
                                  " --no-loss-impact --eval-batches 1 --seed 2 --out " +
                                  dir.file("out"), dir);
  REQUIRE(r.code == 0);
  const json report = load_json(dir.file("out/report.json"));
  CHECK(report["compression"]["ratio_percent"] == "87.50");
  CHECK(report["compression"]["q"] == 4.0);
  CHECK(report["compression"]["q_storage"] == 8.0);
}

TEST_CASE("compress rejects conflicting stop flags with exit 2") {
  TempDir dir("cli");
  REQUIRE(run_cli("init-train --steps 0 --seed 1 --out " + dir.file("m"), dir).code == 0);
  const RunResult both = run_cli("compress --model " + dir.file("m/model.ckpt") +
                                     " --method mka --target-layers 2 --tau 0.5 --out " +
                                     dir.file("x"), dir);
  CHECK(both.code == 2);
  const RunResult neither = run_cli("compress --model " + dir.file("m/model.ckpt") +
                                        " --method mka --out " + dir.file("y"), dir);
  CHECK(neither.code == 2);
}

TEST_CASE("evaluate: untrained model sits at the uniform baseline") {
  TempDir dir("cli");
  REQUIRE(run_cli("init-train --steps 0 --seed 8 --out " + dir.file("m"), dir).code == 0);
  const RunResult r = run_cli("evaluate --model " + dir.file("m/model.ckpt") +
                                  " --n-batches 20 --seed 8 --out " + dir.file("e1"), dir);
  REQUIRE(r.code == 0);
  const json metrics = load_json(dir.file("e1/metrics.json"));
  CHECK(std::fabs(metrics["cross_entropy"].get<double>() - std::log(16.0)) <= 0.05);

  // repeated run is identical
  REQUIRE(run_cli("evaluate --model " + dir.file("m/model.ckpt") +
                      " --n-batches 20 --seed 8 --out " + dir.file("e2"), dir).code == 0);
  CHECK(read_file(dir.file("e1/metrics.json")) == read_file(dir.file("e2/metrics.json")));

  CHECK(run_cli("evaluate --model " + dir.file("nope.ckpt") + " --out " + dir.file("e3"), dir)
            .code == 2);
}

TEST_CASE("sweep emits one row per method and ratio") {
  TempDir dir("cli");
  REQUIRE(run_cli("init-train --steps 0 --seed 9 --out " + dir.file("m"), dir).code == 0);
  const RunResult r = run_cli("sweep --model " + dir.file("m/model.ckpt") +
                                  " --methods mka,reverse --ratios 0,25 --capture-n 64"
                                  " --eval-batches 2 --seed 9 --out " + dir.file("sw"), dir);
  REQUIRE(r.code == 0);

  std::ifstream csv(dir.file("sw/sweep.csv"));
  std::string line;
  std::getline(csv, line);
  CHECK(line ==
        "method,ratio_requested,retained,ratio,cross_entropy,next_token_accuracy,status");
  std::vector<std::string> rows;
  while (std::getline(csv, line)) {
    if (!line.empty()) rows.push_back(line);
  }
  REQUIRE(rows.size() == 4);

  // ratio-0 rows carry identical metrics for every method
  auto metrics_of = [](const std::string& row) {
    std::stringstream ss(row);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    return std::make_pair(cells[4], cells[5]);
  };
  CHECK(metrics_of(rows[0]) == metrics_of(rows[2]));
  for (const std::string& row : rows) CHECK(row.find("ok") != std::string::npos);
}

TEST_CASE("config file keys apply and flags win") {
  TempDir dir("cli");
  REQUIRE(run_cli("init-train --steps 0 --seed 10 --out " + dir.file("m"), dir).code == 0);
  {
    std::ofstream conf(dir.file("run.conf"));
    conf << "# experiment defaults\n"
         << "n-batches = 7\n"
         << "seed = 10\n";
  }
  REQUIRE(run_cli("evaluate --model " + dir.file("m/model.ckpt") + " --config " +
                      dir.file("run.conf") + " --out " + dir.file("e1"), dir).code == 0);
  CHECK(load_json(dir.file("e1/resolved_config.json"))["n_batches"] == 7);

  REQUIRE(run_cli("evaluate --model " + dir.file("m/model.ckpt") + " --config " +
                      dir.file("run.conf") + " --n-batches 3 --out " + dir.file("e2"), dir)
              .code == 0);
  CHECK(load_json(dir.file("e2/resolved_config.json"))["n_batches"] == 3);
}
