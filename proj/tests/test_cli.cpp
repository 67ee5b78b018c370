#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cbpsdid/cli.hpp"
#include "cbpsdid/panel.hpp"
#include "test_util.hpp"

#include <json.hpp>

#include <cstdlib>
#include <iomanip>
#include <sstream>
#include <sys/wait.h>

using namespace cbpsdid;
using cbpsdid::testing::read_text;
using cbpsdid::testing::scratch_dir;
using cbpsdid::testing::write_text;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "cbpsdid");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::vector<std::string>> read_csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> fields;
    std::istringstream ls(line);
    for (std::string f; std::getline(ls, f, ',');) fields.push_back(f);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    rows.push_back(fields);
  }
  return rows;
}

std::string three_decimals(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << v;
  return os.str();
}

const char* kToy = "y0,y1,d\n0,3,1\n1,6,1\n2,3,0\n0,1,0\n";

}  // namespace

TEST_CASE("checksum is 64-bit FNV-1a") {
  CHECK(cli::checksum("") == "cbf29ce484222325");
  CHECK(cli::checksum("a") == "af63dc4c8601ec8c");
  CHECK(cli::checksum("foobar") == "85944171f73967e8");
}

TEST_CASE("error kinds map to exit codes") {
  CHECK(cli::exit_code(ErrorKind::MissingColumn) == 2);
  CHECK(cli::exit_code(ErrorKind::InvalidSpec) == 2);
  CHECK(cli::exit_code(ErrorKind::RankDeficient) == 3);
  CHECK(cli::exit_code(ErrorKind::Separation) == 3);
  CHECK(cli::exit_code(ErrorKind::NoConvergence) == 3);
  CHECK(cli::exit_code(ErrorKind::IoError) == 4);
}

TEST_CASE("estimate on the toy file") {
  const auto dir = scratch_dir("estimate");
  write_text(dir / "toy.csv", kToy);
  const auto prefix = (dir / "toy").string();
  const auto r = run({"estimate", "--data", (dir / "toy.csv").string(), "--method", "all", "--out", prefix});
  REQUIRE(r.code == 0);
  for (const char* m : {"IPW", "OR", "AIPW", "CBPS"}) CHECK(r.out.find(m) != std::string::npos);

  const auto rows = read_csv_rows(read_text(prefix + ".csv"));
  REQUIRE(rows.size() == 5);
  CHECK(rows[0][0] == "method");
  for (std::size_t i = 1; i < rows.size(); ++i) {
    CAPTURE(rows[i][0]);
    CHECK(rows[i][1] == "ok");
    CHECK(std::stod(rows[i][2]) == doctest::Approx(3.0).epsilon(1e-12));
  }

  const auto doc = nlohmann::json::parse(read_text(prefix + ".json"));
  CHECK(doc["results"].size() == 4);
  CHECK(doc["n"] == 4);
  const auto manifest = nlohmann::json::parse(read_text(prefix + ".manifest.json"));
  CHECK(manifest["command"] == "estimate");
  CHECK(manifest.contains("version"));
  CHECK(manifest.contains("started_utc"));
  CHECK(manifest["parameters"]["method"] == "all");
}

TEST_CASE("estimate with a spec and renamed columns") {
  const auto dir = scratch_dir("estimate_spec");
  std::ostringstream csv;
  csv << "pre,post,treat,age\n";
  for (int i = 0; i < 40; ++i) {
    const double age = 20 + (i * 7) % 23;
    const int treat = (i % 3 == 0 || age > 36) ? 1 : 0;
    csv << i % 5 << ',' << (i % 5) + 0.1 * age + treat + 0.01 * ((i * 13) % 7) << ',' << treat << ','
        << age << "\n";
  }
  write_text(dir / "d.csv", csv.str());
  write_text(dir / "lin.spec", "# linear\nraw age\n");
  write_text(dir / "bad.spec", "raw height\n");
  const auto ok = run({"estimate", "--data", (dir / "d.csv").string(), "--spec", (dir / "lin.spec").string(),
                       "--method", "cbps", "--y0", "pre", "--y1", "post", "--d", "treat"});
  CHECK(ok.code == 0);
  CHECK(ok.out.find("converged") != std::string::npos);
  CHECK(ok.out.find("overlap") != std::string::npos);

  const auto bad = run({"estimate", "--data", (dir / "d.csv").string(), "--spec", (dir / "bad.spec").string(),
                        "--y0", "pre", "--y1", "post", "--d", "treat"});
  CHECK(bad.code == 2);
  CHECK(bad.err.find("UnknownTerm") != std::string::npos);
}

TEST_CASE("estimate error exits") {
  const auto dir = scratch_dir("estimate_errors");
  write_text(dir / "nod.csv", "y0,y1,treat\n0,1,1\n1,1,0\n");
  const auto missing = run({"estimate", "--data", (dir / "nod.csv").string()});
  CHECK(missing.code == 2);
  CHECK(missing.err.find("MissingColumn") != std::string::npos);

  CHECK(run({"estimate", "--data", (dir / "nope.csv").string()}).code == 4);

  write_text(dir / "all1.csv", "y0,y1,d\n0,1,1\n1,1,1\n");
  CHECK(run({"estimate", "--data", (dir / "all1.csv").string()}).code == 2);

  write_text(dir / "sep.csv", "y0,y1,d,x\n0,1,0,-2\n0,2,0,-1\n0,1,0,-0.5\n0,3,1,0.5\n0,1,1,1\n0,2,1,2\n");
  write_text(dir / "x.spec", "raw x\n");
  const auto sep = run({"estimate", "--data", (dir / "sep.csv").string(), "--spec",
                        (dir / "x.spec").string(), "--method", "ipw"});
  CHECK(sep.code == 3);
  CHECK(sep.err.find("Separation") != std::string::npos);

  CHECK(run({"estimate", "--data", (dir / "sep.csv").string(), "--method", "ols"}).code == 2);
}

TEST_CASE("argument errors") {
  CHECK(run({}).code == 2);
  CHECK(run({"frobnicate"}).code == 2);
  CHECK(run({"simulate", "--dgp", "9"}).code == 2);
  CHECK(run({"simulate", "--dgp", "1", "--bogus"}).code == 2);
  CHECK(run({"simulate", "--dgp", "1", "--z4", "x3", "--reps", "1", "--n", "50", "--bound-draws", "0"}).code == 2);
  CHECK(run({"--help"}).code == 0);
}

TEST_CASE("simulate: table matches CSV, manifest replays bit-identically") {
  const auto dir = scratch_dir("simulate");
  const auto csv = (dir / "s.csv").string();
  const auto r = run({"simulate", "--dgp", "2", "--n", "300", "--reps", "20", "--seed", "5", "--out", csv,
                      "--bound-draws", "20000", "--threads", "2", "--constants",
                      cli::default_constants_path()});
  REQUIRE(r.code == 0);
  const std::string csv_text = read_text(csv);
  const auto rows = read_csv_rows(csv_text);
  REQUIRE(rows.size() == 5);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    // "IPW   av  med  rmse  asyv  cover  cil  fail"
    const auto pos = r.out.find("\n" + rows[i][4] + " ");
    REQUIRE(pos != std::string::npos);
    std::istringstream line(r.out.substr(pos + 1, r.out.find('\n', pos + 1) - pos - 1));
    std::string label;
    line >> label;
    for (std::size_t c = 5; c <= 10; ++c) {
      std::string printed;
      line >> printed;
      CHECK(printed == three_decimals(std::stod(rows[i][c])));
    }
  }

  const auto manifest = nlohmann::json::parse(read_text(csv + ".manifest.json"));
  CHECK(manifest["command"] == "simulate");
  CHECK(manifest["parameters"]["seed"] == 5);
  CHECK(manifest["parameters"]["z4"] == "x1");
  CHECK(manifest["constants"]["checksum"] == cli::checksum(read_text(cli::default_constants_path())));
  CHECK(csv_text.find("UTC") == std::string::npos);
  CHECK(csv_text.find("utc") == std::string::npos);

  const auto replay_csv = (dir / "replayed.csv").string();
  const auto rr = run({"replay", "--manifest", csv + ".manifest.json", "--out", replay_csv});
  REQUIRE(rr.code == 0);
  CHECK(read_text(replay_csv) == csv_text);
}

TEST_CASE("replay refuses a different constants file") {
  const auto dir = scratch_dir("replay_constants");
  const auto csv = (dir / "s.csv").string();
  REQUIRE(run({"simulate", "--dgp", "1", "--n", "100", "--reps", "2", "--out", csv, "--bound-draws", "0",
               "--constants", cli::default_constants_path()})
              .code == 0);
  write_text(dir / "other.txt",
             "cbpsdid-standardization 1\nseed 1\ndraws 1000000\nz1 1 1\nz2 10 1\nz3 0.2 0.05\nz4 400 50\n");
  const auto rr = run({"replay", "--manifest", csv + ".manifest.json", "--constants",
                       (dir / "other.txt").string(), "--out", (dir / "r.csv").string()});
  CHECK(rr.code == 2);
}

TEST_CASE("draw and echo") {
  const auto dir = scratch_dir("draw");
  const auto path = (dir / "rep.csv").string();
  REQUIRE(run({"draw", "--dgp", "4", "--n", "50", "--seed", "3", "--rep", "2", "--out", path}).code == 0);
  const auto ds = load_csv(path);
  CHECK(ds.n() == 50);
  CHECK(ds.covariate_names() == std::vector<std::string>{"z1", "z2", "z3", "z4"});

  auto rng = replication_stream(3, 2);
  const auto direct = draw_replication(DgpConfig::make(4, 50), read_constants(cli::default_constants_path()), rng);
  std::ostringstream os;
  write_csv(os, direct.dataset);
  CHECK(read_text(path) == os.str());

  const auto echoed = run({"echo", "--data", path});
  CHECK(echoed.code == 0);
  CHECK(echoed.out == os.str());
}

TEST_CASE("bound and constants commands") {
  const auto b = run({"bound", "--dgp", "2", "--draws", "20000", "--seed", "1"});
  CHECK(b.code == 0);
  CHECK(b.out.find("MC s.e.") != std::string::npos);
  const auto c = run({"constants", "--draws", "1000"});
  CHECK(c.code == 2);
}

#ifdef CBPSDID_BIN
TEST_CASE("binary exit status") {
  const auto dir = scratch_dir("binary");
  write_text(dir / "nod.csv", "y0,y1\n0,1\n1,1\n");
  const std::string bin = CBPSDID_BIN;
  const int s1 = std::system((bin + " estimate --data " + (dir / "nod.csv").string() + " >/dev/null 2>&1").c_str());
  CHECK(WEXITSTATUS(s1) == 2);
  const int s2 = std::system((bin + " estimate --data " + (dir / "none.csv").string() + " >/dev/null 2>&1").c_str());
  CHECK(WEXITSTATUS(s2) == 4);
  write_text(dir / "toy.csv", kToy);
  const int s3 = std::system((bin + " estimate --data " + (dir / "toy.csv").string() + " >/dev/null").c_str());
  CHECK(WEXITSTATUS(s3) == 0);
}
#endif
