#include "rino/mesh.hpp"
#include "rino/rotations.hpp"
#include "rino/synthetic.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <sys/wait.h>

using namespace rino;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string output;  ///< stdout and stderr
};

CliRun rino_cli(const std::string& args, const std::string& env = {}) {
  const std::string cmd = env + (env.empty() ? "" : " ") + "'" RINO_CLI_PATH "' " + args + " 2>&1";
  CliRun r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  std::size_t got = 0;
  while ((got = fread(buf.data(), 1, buf.size(), pipe)) > 0) r.output.append(buf.data(), got);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

// Small network and bases so every subprocess finishes quickly.
const std::string kSmall = "--k 20 --kq 8 --channels 6 --blocks 1 --out-dim 12 --mlp-hidden 6 --knn 6";

Mesh bar(double bend, std::uint64_t seed) {
  SyntheticParams p;
  p.segments = 10;
  p.bend_angle = bend;
  return perturb_gaussian(gen_synthetic(SyntheticKind::kBentBar, p, 0).mesh, 1e-3, seed);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double agreement(const IndexMap& a, const IndexMap& b) {
  if (a.size() != b.size() || a.empty()) return 0.0;
  long same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == b[i];
  return static_cast<double>(same) / static_cast<double>(a.size());
}

// Per-vertex RGB of an ASCII colored PLY written by export-colors.
std::vector<std::array<int, 3>> ply_colors(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  int n = 0;
  while (std::getline(in, line) && line != "end_header") {
    std::istringstream ls(line);
    std::string a, b;
    ls >> a >> b;
    if (a == "element" && b == "vertex") ls >> n;
  }
  std::vector<std::array<int, 3>> out;
  for (int i = 0; i < n && std::getline(in, line); ++i) {
    std::istringstream ls(line);
    double x, y, z;
    std::array<int, 3> c{};
    ls >> x >> y >> z >> c[0] >> c[1] >> c[2];
    out.push_back(c);
  }
  return out;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    write_mesh(bar(0.0, 1), dir_ / "a.off");
    write_mesh(bar(0.5, 2), dir_ / "b.off");
    write_mesh(bar(0.9, 3), dir_ / "c.off");
    std::mt19937_64 rng(4);
    write_mesh(transformed(bar(0.0, 1), random_rotation(rng), Eigen::Vector3d(0.3, -1.0, 2.0)), dir_ / "a_rot.off");
    std::ofstream(dir_ / "pairs.txt") << "# training pairs\na.off b.off\nb.off c.off\n\nc.off a.off\n";
  }
  test::TempDir dir_{"cli"};
};

}  // namespace

TEST_F(Cli, UsageErrors) {
  EXPECT_EQ(rino_cli("").code, 1);
  EXPECT_EQ(rino_cli("frobnicate").code, 1);
  EXPECT_EQ(rino_cli("match --bogus-flag").code, 1);
  EXPECT_EQ(rino_cli("--help").code, 0);
  EXPECT_EQ(rino_cli("match " + q(dir_ / "a.off") + " " + q(dir_ / "b.off") + " --out " + q(dir_ / "m.txt")).code, 1);
  EXPECT_EQ(rino_cli("precompute " + q(dir_ / "a.off") + " --k 0 --cache-dir " + q(dir_ / "c")).code, 1);
  EXPECT_EQ(rino_cli("precompute " + q(dir_ / "a.off")).code, 1);
}

TEST_F(Cli, DataErrors) {
  std::ofstream(dir_ / "broken.off") << "OFF\n3 1 0\n0 0 0\n";
  const CliRun r = rino_cli("precompute " + q(dir_ / "broken.off") + " --cache-dir " + q(dir_ / "cache"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("broken.off"), std::string::npos);
  std::ofstream(dir_ / "empty_pairs.txt") << "# nothing\n";
  EXPECT_EQ(rino_cli("train --pairs " + q(dir_ / "empty_pairs.txt") + " --out " + q(dir_ / "x.ckpt")).code, 2);
}

TEST_F(Cli, PrecomputeCacheHitCorruptionAndEnvironment) {
  const fs::path cache = dir_ / "cache";
  const std::string args = "precompute " + q(dir_ / "a.off") + " --k 20 --kq 8 --cache-dir " + q(cache);
  const CliRun first = rino_cli(args);
  ASSERT_EQ(first.code, 0) << first.output;
  EXPECT_NE(first.output.find("built"), std::string::npos);
  const CliRun second = rino_cli(args);
  EXPECT_EQ(second.code, 0);
  EXPECT_NE(second.output.find("cache hit"), std::string::npos) << second.output;

  ASSERT_EQ(std::distance(fs::directory_iterator(cache), fs::directory_iterator{}), 1);
  const fs::path file = fs::directory_iterator(cache)->path();
  std::string bytes = slurp(file);
  bytes[bytes.size() / 2] = static_cast<char>(bytes[bytes.size() / 2] ^ 0x11);
  std::ofstream(file, std::ios::binary) << bytes;
  const CliRun third = rino_cli(args);
  EXPECT_EQ(third.code, 0);
  EXPECT_NE(third.output.find("warning: corrupted cache"), std::string::npos) << third.output;
  EXPECT_NE(rino_cli(args).output.find("cache hit"), std::string::npos);

  // The environment variable supplies the directory when the flag is absent
  // and overrides the config file; the flag wins over both.
  const fs::path env_cache = dir_ / "env_cache";
  std::ofstream(dir_ / "run.cfg") << "cache_dir = " << (dir_ / "file_cache").string() << "\n";
  const CliRun env = rino_cli("precompute " + q(dir_ / "b.off") + " --k 20 --kq 8 --config " + q(dir_ / "run.cfg"),
                           "RINO_CACHE_DIR=" + q(env_cache));
  EXPECT_EQ(env.code, 0) << env.output;
  EXPECT_TRUE(fs::exists(env_cache));
  EXPECT_FALSE(fs::exists(dir_ / "file_cache"));
  EXPECT_EQ(rino_cli("precompute " + q(dir_ / "b.off") + " --k 20 --kq 8 --cache-dir " + q(dir_ / "flag_cache"),
                     "RINO_CACHE_DIR=" + q(env_cache))
                .code,
            0);
  EXPECT_TRUE(fs::exists(dir_ / "flag_cache"));
}

TEST_F(Cli, PrecomputeWarnsWhenBasisIsReduced) {
  write_mesh(icosphere(0), dir_ / "tiny.off");
  const CliRun r = rino_cli("precompute " + q(dir_ / "tiny.off") + " --k 20 --kq 8 --cache-dir " + q(dir_ / "cache"));
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("basis size reduced from 20"), std::string::npos) << r.output;
}

TEST_F(Cli, TrainIsDeterministicAndResumable) {
  const std::string common = "train --pairs " + q(dir_ / "pairs.txt") + " " + kSmall + " --lr 0.01";
  const std::string base = common + " --seed 3";
  ASSERT_EQ(rino_cli(base + " --iters 4 --out " + q(dir_ / "r1.ckpt")).code, 0);
  ASSERT_EQ(rino_cli(base + " --iters 4 --out " + q(dir_ / "r2.ckpt")).code, 0);
  EXPECT_EQ(slurp(dir_ / "r1.ckpt"), slurp(dir_ / "r2.ckpt"));
  EXPECT_EQ(slurp(dir_ / "r1.ckpt.loss.csv"), slurp(dir_ / "r2.ckpt.loss.csv"));

  ASSERT_EQ(rino_cli(base + " --iters 2 --out " + q(dir_ / "part.ckpt")).code, 0);
  const CliRun resumed =
      rino_cli(base + " --iters 4 --resume " + q(dir_ / "part.ckpt") + " --out " + q(dir_ / "resumed.ckpt"));
  ASSERT_EQ(resumed.code, 0) << resumed.output;
  EXPECT_NE(resumed.output.find("at step 2"), std::string::npos);
  EXPECT_EQ(slurp(dir_ / "resumed.ckpt"), slurp(dir_ / "r1.ckpt"));

  const CliRun other = rino_cli(common + " --iters 4 --seed 4 --out " + q(dir_ / "r3.ckpt"));
  ASSERT_EQ(other.code, 0);
  EXPECT_NE(slurp(dir_ / "r3.ckpt"), slurp(dir_ / "r1.ckpt"));

  EXPECT_EQ(rino_cli(base + " --channels 7 --iters 4 --resume " + q(dir_ / "part.ckpt") + " --out " +
                     q(dir_ / "bad.ckpt"))
                .code,
            1);
}

TEST_F(Cli, MatchSelfRotatedAndMissingCheckpoint) {
  const std::string net = kSmall + " --random-init --seed 9";
  ASSERT_EQ(rino_cli("match " + q(dir_ / "a.off") + " " + q(dir_ / "a.off") + " " + net + " --out " +
                     q(dir_ / "self.txt"))
                .code,
            0);
  const IndexMap self = read_index_file(dir_ / "self.txt");
  IndexMap identity(self.size());
  for (std::size_t i = 0; i < identity.size(); ++i) identity[i] = static_cast<int>(i);
  EXPECT_GE(agreement(self, identity), 0.99);

  ASSERT_EQ(rino_cli("match " + q(dir_ / "a.off") + " " + q(dir_ / "b.off") + " " + net + " --out " +
                     q(dir_ / "ab.txt") + " --dump-c " + q(dir_ / "c.csv") + " --dump-q " + q(dir_ / "q.csv"))
                .code,
            0);
  ASSERT_EQ(rino_cli("match " + q(dir_ / "a_rot.off") + " " + q(dir_ / "b.off") + " " + net + " --out " +
                     q(dir_ / "ab_rot.txt"))
                .code,
            0);
  EXPECT_GE(agreement(read_index_file(dir_ / "ab.txt"), read_index_file(dir_ / "ab_rot.txt")), 0.99);

  // C is k x k; Q stores each complex column as a (re, im) pair.
  const std::string c = slurp(dir_ / "c.csv");
  EXPECT_EQ(std::count(c.begin(), c.end(), '\n'), 20);
  const std::string qtext = slurp(dir_ / "q.csv");
  EXPECT_EQ(std::count(qtext.begin(), qtext.end(), '\n'), 8);
  const std::string first_row = qtext.substr(0, qtext.find('\n'));
  EXPECT_EQ(std::count(first_row.begin(), first_row.end(), ','), 15);

  const CliRun missing = rino_cli("match " + q(dir_ / "a.off") + " " + q(dir_ / "b.off") + " --checkpoint " +
                               q(dir_ / "nope.ckpt") + " --out " + q(dir_ / "m.txt"));
  EXPECT_NE(missing.code, 0);
  EXPECT_LE(missing.code, 2);
}

TEST_F(Cli, MatchWithTrainedCheckpoint) {
  ASSERT_EQ(rino_cli("train --pairs " + q(dir_ / "pairs.txt") + " " + kSmall + " --iters 2 --out " +
                     q(dir_ / "t.ckpt"))
                .code,
            0);
  // The network shape comes from the checkpoint; only the bases need flags.
  const CliRun r = rino_cli("match " + q(dir_ / "a.off") + " " + q(dir_ / "b.off") + " --k 20 --kq 8 --checkpoint " +
                         q(dir_ / "t.ckpt") + " --out " + q(dir_ / "m.txt"));
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(read_index_file(dir_ / "m.txt").size(), static_cast<std::size_t>(read_mesh(dir_ / "a.off").num_vertices()));
}

TEST_F(Cli, EvalIdentityAndList) {
  const int n = read_mesh(dir_ / "b.off").num_vertices();
  IndexMap id(n);
  for (int i = 0; i < n; ++i) id[i] = i;
  write_index_file(id, dir_ / "id.txt");
  IndexMap shifted = id;
  std::swap(shifted[0], shifted[1]);
  write_index_file(shifted, dir_ / "shift.txt");

  const CliRun r = rino_cli("eval --pred " + q(dir_ / "id.txt") + " --gt " + q(dir_ / "id.txt") + " --mesh-y " +
                         q(dir_ / "b.off") + " --pair-id ab");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("pair_id,setting,mgeo_err,flipped\nab,I/I,0,0\n"), std::string::npos) << r.output;

  std::ofstream(dir_ / "list.txt") << "p0 I/I id.txt id.txt b.off\np1 Y/Y shift.txt id.txt b.off id.txt\n";
  const CliRun l = rino_cli("eval --list " + q(dir_ / "list.txt") + " --csv " + q(dir_ / "report.csv"));
  ASSERT_EQ(l.code, 0) << l.output;
  const std::string csv = slurp(dir_ / "report.csv");
  EXPECT_NE(csv.find("p0,I/I,0,0"), std::string::npos);
  EXPECT_NE(csv.find("p1,Y/Y,"), std::string::npos);
  EXPECT_NE(l.output.find("Y/Y"), std::string::npos);

  EXPECT_EQ(rino_cli("eval --pred " + q(dir_ / "id.txt") + " --gt " + q(dir_ / "id.txt") + " --mesh-y " +
                     q(dir_ / "b.off") + " --setting Z/Z")
                .code,
            1);
  write_index_file({0, 1}, dir_ / "short.txt");
  EXPECT_EQ(rino_cli("eval --pred " + q(dir_ / "short.txt") + " --gt " + q(dir_ / "id.txt") + " --mesh-y " +
                     q(dir_ / "b.off"))
                .code,
            2);
  EXPECT_EQ(rino_cli("eval --pred " + q(dir_ / "id.txt")).code, 1);
}

TEST_F(Cli, ExportColorsRoundTripAndHeatMap) {
  const Mesh b = read_mesh(dir_ / "b.off");
  const int n = b.num_vertices();
  IndexMap id(n);
  for (int i = 0; i < n; ++i) id[i] = i;
  write_index_file(id, dir_ / "id.txt");
  for (const std::string enc : {"", " --binary"}) {
    const fs::path out = dir_ / (enc.empty() ? "t.ply" : "t_bin.ply");
    ASSERT_EQ(rino_cli("export-colors " + q(dir_ / "b.off") + " --correspondence " + q(dir_ / "id.txt") +
                       " --target " + q(dir_ / "b.off") + " --out " + q(out) + enc)
                  .code,
              0);
    const Mesh back = read_mesh(out);
    EXPECT_TRUE(back.triangles() == b.triangles());
    EXPECT_LE((back.vertices() - b.vertices()).cwiseAbs().maxCoeff(), 1e-6);
  }
  const auto colors = ply_colors(dir_ / "t.ply");
  ASSERT_EQ(static_cast<int>(colors.size()), n);
  // The vertex with the smallest x has red 0; the largest has red 255.
  Eigen::Index lo = 0, hi = 0;
  b.vertices().col(0).minCoeff(&lo);
  b.vertices().col(0).maxCoeff(&hi);
  EXPECT_EQ(colors[lo][0], 0);
  EXPECT_EQ(colors[hi][0], 255);

  const int source = 17;
  ASSERT_EQ(rino_cli("export-colors " + q(dir_ / "b.off") + " --heat-vertex " + std::to_string(source) + " " + kSmall +
                     " --random-init --out " + q(dir_ / "heat.ply"))
                .code,
            0);
  const auto heat = ply_colors(dir_ / "heat.ply");
  ASSERT_EQ(static_cast<int>(heat.size()), n);
  for (const auto& c : heat) EXPECT_GE(c[1], heat[source][1]);
  EXPECT_EQ(heat[source][1], 0);

  EXPECT_EQ(rino_cli("export-colors " + q(dir_ / "b.off") + " --out " + q(dir_ / "x.ply")).code, 1);
  write_index_file({0}, dir_ / "short.txt");
  EXPECT_EQ(rino_cli("export-colors " + q(dir_ / "b.off") + " --correspondence " + q(dir_ / "short.txt") +
                     " --target " + q(dir_ / "b.off") + " --out " + q(dir_ / "x.ply"))
                .code,
            2);
}

TEST(CliSelfcheck, PassesAndDetectsInjectedSignFlip) {
  const CliRun ok = rino_cli("selfcheck");
  EXPECT_EQ(ok.code, 0) << ok.output;
  EXPECT_EQ(ok.output.find("FAIL"), std::string::npos) << ok.output;
  const CliRun bad = rino_cli("selfcheck --inject-sign-flip");
  EXPECT_NE(bad.code, 0) << bad.output;
  EXPECT_NE(bad.output.find("FAIL network rotation invariance"), std::string::npos) << bad.output;
  EXPECT_NE(bad.output.find("FAIL gradient aggregate invariance"), std::string::npos) << bad.output;
}
