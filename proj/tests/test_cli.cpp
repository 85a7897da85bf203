#include <doctest.h>

#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include <json.hpp>

#include "jumpkit/binary_io.hpp"
#include "jumpkit/metrics.hpp"
#include "jumpkit/shortcut.hpp"
#include "test_util.hpp"

using jumpkit::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunResult run(const std::string& args) {
  static TempDir scratch("jk_cli_io");
  const auto out = scratch / "stdout.txt";
  const auto err = scratch / "stderr.txt";
  const std::string cmd =
      std::string(JUMPKIT_TOOL_PATH) + " " + args + " > '" + out.string() + "' 2> '" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

// A small trained dump shared by the tests below.
const fs::path& tiny_dump() {
  static TempDir dir("jk_cli_dump");
  static bool made = false;
  if (!made) {
    const auto r = run("toy-dump --profile tiny --train-steps 20 --positions-per-sentence 4 --out '" +
                       (dir / "data").string() + "'");
    REQUIRE_MESSAGE(r.code == 0, r.err);
    made = true;
  }
  static const fs::path path = dir / "data";
  return path;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

}  // namespace

TEST_CASE("help lists every flag with its default") {
  const auto r = run("fit --help");
  CHECK(r.code == 0);
  for (const char* needle : {"--lr", "0.001", "--epochs", "20", "--batch-size", "64", "--optimizer", "adam",
                             "--train-fraction", "0.75", "--variant", "nnjtc"}) {
    CHECK_MESSAGE(r.out.find(needle) != std::string::npos, needle);
  }
  const auto toy = run("toy-dump --help");
  CHECK(toy.out.find("--train-steps") != std::string::npos);
  CHECK(toy.out.find("500") != std::string::npos);
}

TEST_CASE("usage errors exit with code 2") {
  CHECK(run("").code == 2);
  CHECK(run("frobnicate").code == 2);
  TempDir out;
  const auto r = run("fit --data " + q(tiny_dump()) + " --variant jtc --from 3 --to 3 --out " + q(out / "x.head"));
  CHECK(r.code == 2);
  CHECK(r.err.find("--from") != std::string::npos);
  CHECK(run("fit --data " + q(tiny_dump()) + " --from 0 --to 1 --lr -1 --out " + q(out / "x.head")).code == 2);
}

TEST_CASE("data-format errors exit with code 3") {
  TempDir dir;
  fs::copy(tiny_dump(), dir / "d", fs::copy_options::recursive);
  fs::resize_file(dir / "d" / "block_1.bin", fs::file_size(dir / "d" / "block_1.bin") - 4);
  const auto r = run("fit --data " + q(dir / "d") + " --from 0 --to 1 --variant id --out " + q(dir / "x.head"));
  CHECK(r.code == 3);
  CHECK(r.err.find("block_1.bin") != std::string::npos);
}

TEST_CASE("divergence exits with code 4") {
  TempDir out;
  const auto r = run("fit --data " + q(tiny_dump()) + " --from 0 --to 2 --variant jtc --optimizer sgd --lr 1e8 --out " +
                     q(out / "x.head"));
  CHECK(r.code == 4);
  CHECK(r.err.find("epoch") != std::string::npos);
}

TEST_CASE("toy-dump default profile writes nine block files") {
  TempDir out;
  const auto r = run("toy-dump --train-steps 0 --out " + q(out / "d"));
  REQUIRE(r.code == 0);
  for (int k = 0; k <= 8; ++k) CHECK(fs::exists(out / "d" / ("block_" + std::to_string(k) + ".bin")));
  CHECK_FALSE(fs::exists(out / "d" / "block_9.bin"));
  const auto m = nlohmann::json::parse(slurp(out / "d" / "manifest.json"));
  CHECK(m["hidden_dim"] == 128);
  CHECK(m["model_name"].get<std::string>().find("train_steps=0") != std::string::npos);
  CHECK(fs::exists(out / "d" / "toy-dump.run.json"));
  CHECK(fs::exists(out / "d" / "model.toylm"));
}

TEST_CASE("identity fit writes a head and an eval-only report") {
  TempDir out;
  const auto r = run("fit --data " + q(tiny_dump()) + " --from 0 --to 2 --variant identity --out " + q(out / "id.head"));
  REQUIRE(r.code == 0);
  CHECK(fs::file_size(out / "id.head") == 28);
  const auto rep = nlohmann::json::parse(slurp(out / "id.head.report.json"));
  CHECK(rep["fit"]["steps"] == 0);
  CHECK(rep["fit"]["train_loss"].empty());
  CHECK(rep["fit"]["val_loss"].is_number());
  CHECK(fs::exists(out / "id.head.run.json"));
}

TEST_CASE("njtc fit on the default width uses rank one") {
  TempDir out;
  REQUIRE(run("toy-dump --train-steps 0 --out " + q(out / "d")).code == 0);
  const auto r = run("fit --data " + q(out / "d") + " --from 2 --to 8 --variant njtc --epochs 2 --out " + q(out / "n.head"));
  REQUIRE(r.code == 0);
  const auto head = jumpkit::shortcut::load_head(out / "n.head");
  CHECK(head.rank == 1);
  CHECK(head.hidden_dim == 128);
  CHECK(head.a.cols() == 1);
}

TEST_CASE("grid fans out, needs no identity heads and round-trips through CSV") {
  TempDir out;
  SUBCASE("identity without a heads directory") {
    const auto r = run("grid --data " + q(tiny_dump()) + " --variant id --out " + q(out / "g"));
    REQUIRE(r.code == 0);
    CHECK(fs::exists(out / "g" / "grid_id_r2.csv"));
  }
  SUBCASE("four variants, all pairs") {
    const auto r = run("grid --data " + q(tiny_dump()) + " --fit-missing --epochs 2 --out " + q(out / "g"));
    REQUIRE_MESSAGE(r.code == 0, r.err);
    for (const char* v : {"id", "jtc", "njtc", "nnjtc"}) {
      const auto csv = out / "g" / ("grid_" + std::string(v) + "_r2.csv");
      REQUIRE(fs::exists(csv));
      const auto text = slurp(csv);
      const auto grid = jumpkit::metrics::grid_from_csv(text, jumpkit::metrics::Metric::R2, v);
      CHECK(grid.cells.size() == 3);  // tiny profile: (0,1), (0,2), (1,2)
      CHECK(jumpkit::metrics::to_csv(grid) == text);
      const auto j = nlohmann::json::parse(slurp(out / "g" / ("grid_" + std::string(v) + "_r2.json")));
      REQUIRE(j["cells"].size() == grid.cells.size());
      for (const auto& c : j["cells"]) {
        CHECK(c["value"].get<double>() == grid.at(c["from_block"], c["to_block"]).value);
      }
    }
    CHECK(fs::exists(out / "g" / "heads" / "jtc_0_1.head"));
    const auto manifest = nlohmann::json::parse(slurp(out / "g" / "grid.run.json"));
    for (const auto& a : manifest["artifacts"]) CHECK(fs::exists(a.get<std::string>()));
  }
  SUBCASE("missing heads are listed before any work") {
    const auto r = run("grid --data " + q(tiny_dump()) + " --variant jtc,njtc --heads " + q(out / "none") + " --out " +
                       q(out / "g"));
    CHECK(r.code == 2);
    CHECK(r.err.find("6 missing head file(s)") != std::string::npos);
    CHECK(r.err.find("njtc_1_2.head") != std::string::npos);
    CHECK_FALSE(fs::exists(out / "g" / "grid_jtc_r2.csv"));
  }
}

TEST_CASE("simulate: lambda sweep, fall-through and missing heads") {
  TempDir out;
  const auto heads = out / "heads";
  REQUIRE(run("grid --data " + q(tiny_dump()) + " --variant nnjtc --cells final --epochs 2 --fit-missing --heads " +
              q(heads) + " --out " + q(out / "g"))
              .code == 0);

  const auto r = run("simulate --data " + q(tiny_dump()) + " --heads " + q(heads) + " --lambda 0.1,0.5,0.9 --out " +
                     q(out / "s"));
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto traces = nlohmann::json::parse(r.out)["traces"];
  REQUIRE(traces.size() == 3);
  CHECK(traces[0]["mean_exit_block"] <= traces[1]["mean_exit_block"]);
  CHECK(traces[1]["mean_exit_block"] <= traces[2]["mean_exit_block"]);
  CHECK(fs::exists(out / "s" / "trace_nnjtc_lambda0.5.csv"));

  const auto one = run("simulate --data " + q(tiny_dump()) + " --heads " + q(heads) + " --lambda 1.0 --out " + q(out / "s1"));
  REQUIRE(one.code == 0);
  CHECK(nlohmann::json::parse(one.out)["traces"][0]["early_exits"] == 0);

  fs::remove(heads / "nnjtc_1_2.head");
  const auto miss = run("simulate --data " + q(tiny_dump()) + " --heads " + q(heads) + " --out " + q(out / "s2"));
  CHECK(miss.code == 2);
  CHECK(miss.err.find("eligible block(s) 1") != std::string::npos);

  CHECK(run("simulate --data " + q(tiny_dump()) + " --heads " + q(heads) + " --lambda 0 --out " + q(out / "s3")).code == 2);
}

TEST_CASE("report annotates the ordering claim") {
  TempDir out;
  const auto r = run("report --data " + q(tiny_dump()) + " --fit-missing --epochs 2 --out " + q(out / "r"));
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto rep = nlohmann::json::parse(slurp(out / "r" / "report.json"));
  const auto status = rep["ordering_claim"]["status"].get<std::string>();
  CHECK((status == "pass" || status == "fail"));
  CHECK(rep["curves"].size() == 4);
  CHECK(slurp(out / "r" / "report_curves.csv").rfind("variant,from_block,to_block,precision,surprisal,r2,parameters\n", 0) == 0);
}

TEST_CASE("toy-dump and grid reruns are byte identical") {
  TempDir a, b;
  for (const auto* dir : {&a, &b}) {
    REQUIRE(run("toy-dump --profile tiny --train-steps 5 --positions-per-sentence 2 --out " + q(*dir / "d")).code == 0);
    REQUIRE(run("grid --data " + q(*dir / "d") + " --fit-missing --epochs 2 --out " + q(*dir / "g")).code == 0);
  }
  for (const auto& entry : fs::directory_iterator(a / "d")) {
    const auto name = entry.path().filename().string();
    if (name.find(".run.json") != std::string::npos) continue;  // records wall time
    CHECK_MESSAGE(jumpkit::io::read_file(entry.path()) == jumpkit::io::read_file(b / "d" / name), name);
  }
  for (const auto& entry : fs::recursive_directory_iterator(a / "g")) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), a.path());
    if (rel.string().find(".run.json") != std::string::npos) continue;
    if (rel.extension() == ".json") {
      // Grid JSON records the dataset path, which differs between the two runs.
      auto ja = nlohmann::json::parse(slurp(entry.path()));
      auto jb = nlohmann::json::parse(slurp(b.path() / rel));
      ja.erase("dataset");
      jb.erase("dataset");
      CHECK_MESSAGE(ja == jb, rel.string());
      continue;
    }
    CHECK_MESSAGE(jumpkit::io::read_file(entry.path()) == jumpkit::io::read_file(b.path() / rel), rel.string());
  }
}
