#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <sstream>

#include "cli.hpp"
#include "oracles.hpp"
#include "speq/container.hpp"
#include "speq/npy.hpp"

namespace fs = std::filesystem;
namespace io = speq::io;

namespace {

struct Run {
    int code;
    std::string out, err;
};

Run run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = speq::cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

bool has(const std::string& text, const std::string& needle) { return text.find(needle) != std::string::npos; }

class Workdir : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() / ("speq_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }
    std::string path(const std::string& name) const { return (dir_ / name).string(); }

    std::string write_weights(const std::string& name, std::size_t K, std::size_t N, std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        io::write_file(path(name), io::encode_npy(oracle::normal_fp16(K, N, 0.05, rng)));
        return path(name);
    }

    fs::path dir_;
};

}  // namespace

TEST(Cli, PerfAtZeroAcceptRate) {
    const auto r = run({"perf", "--r", "0", "--L", "8", "--mc-rounds", "1000", "--no-timestamp"});
    EXPECT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(has(r.out, "accept_len=1 ")) << r.out;
    EXPECT_TRUE(has(r.out, "montecarlo")) << r.out;
}

TEST(Cli, SpecdecGammaOneIsPlainDecoding) {
    const auto r = run({"specdec", "--gamma", "1.0", "--gen-len", "24", "--no-timestamp"});
    EXPECT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(has(r.out, "proposed=0 ")) << r.out;
    EXPECT_TRUE(has(r.out, "lossless=true")) << r.out;
}

TEST(Cli, ReportsAreDeterministicWithoutTimestamp) {
    const std::vector<std::string> args = {"specdec", "--gen-len", "32", "--prompts", "2", "--seed", "4", "--no-timestamp"};
    const auto a = run(args), b = run(args);
    EXPECT_EQ(a.code, 0);
    EXPECT_EQ(a.out, b.out);
    EXPECT_FALSE(has(a.out, "timestamp="));
    EXPECT_TRUE(has(run({"simulate"}).out, "run timestamp="));
}

TEST(Cli, UsageErrorsExitTwo) {
    EXPECT_EQ(run({}).code, speq::cli::kExitUsage);
    EXPECT_EQ(run({"perf", "--bogus"}).code, speq::cli::kExitUsage);
    EXPECT_EQ(run({"frobnicate"}).code, speq::cli::kExitUsage);
    EXPECT_EQ(run({"perf", "--r", "1.5"}).code, speq::cli::kExitUsage);
    EXPECT_EQ(run({"quantize", "--in", "/nonexistent.npy", "--out", "/tmp/x"}).code, speq::cli::kExitUsage);
}

TEST(Cli, SimulateReportsCycles) {
    const auto r = run({"simulate", "--m", "1", "--n", "4096", "--k", "1024", "--mode", "full", "--no-timestamp"});
    EXPECT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(has(r.out, "mac_cycles=4096")) << r.out;
    const auto f = run({"simulate", "--m", "2", "--n", "10", "--k", "300", "--mode", "draft", "--functional", "--no-timestamp"});
    EXPECT_TRUE(has(f.out, "bit_identical=true")) << f.out;
}

TEST_F(Workdir, QuantizeThenRoundtrip) {
    const auto in = write_weights("w.npy", 300, 5, 1);
    const auto out = path("w.speq");
    const auto q = run({"quantize", "--in", in, "--out", out, "--compare", "--no-timestamp"});
    ASSERT_EQ(q.code, 0) << q.err;
    EXPECT_TRUE(has(q.out, "rows=300 cols=5")) << q.out;
    EXPECT_TRUE(has(q.out, "mse format=e2m1")) << q.out;
    EXPECT_EQ(io::read_container(out).rows(), 300u);

    const auto rt = run({"roundtrip", out, "--no-timestamp"});
    EXPECT_EQ(rt.code, 0) << rt.out << rt.err;
    EXPECT_TRUE(has(rt.out, "mismatches=0")) << rt.out;
}

TEST_F(Workdir, ExhaustiveRoundtrip) {
    const auto r = run({"roundtrip", "--no-timestamp"});
    EXPECT_EQ(r.code, 0);
    EXPECT_TRUE(has(r.out, "checked=32768 mismatches=0 ok=true")) << r.out;
}

TEST_F(Workdir, MalformedContainerExitsTwo) {
    const auto in = write_weights("w.npy", 64, 2, 2);
    const auto out = path("w.speq");
    ASSERT_EQ(run({"quantize", "--in", in, "--out", out}).code, 0);
    auto bytes = io::read_file(out);
    bytes[bytes.size() / 2] ^= 0xFF;
    io::write_file(out, bytes);
    const auto r = run({"inspect", out});
    EXPECT_EQ(r.code, speq::cli::kExitUsage);
    EXPECT_TRUE(has(r.err, "checksum")) << r.err;
}

TEST_F(Workdir, InspectHistogram) {
    const auto in = write_weights("w.npy", 128, 4, 3);
    const auto r = run({"inspect", in, "--no-timestamp"});
    EXPECT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(has(r.out, "elements=512")) << r.out;
    EXPECT_TRUE(has(r.out, "frac_unused=0")) << r.out;
    EXPECT_TRUE(has(r.out, "exp exp5=31 ")) << r.out;
}

TEST_F(Workdir, GemmWritesNpy) {
    const auto w = write_weights("w.npy", 256, 3, 4);
    ASSERT_EQ(run({"quantize", "--in", w, "--out", path("w.speq")}).code, 0);
    std::mt19937_64 rng(5);
    const auto a = oracle::normal_fp16(2, 256, 1.0, rng);
    io::write_file(path("a.npy"), io::encode_npy(a));
    for (std::string mode : {"draft", "full"}) {
        const auto r = run({"gemm", "--mode", mode, "--a", path("a.npy"), "--w", path("w.speq"), "--out", path("o.npy"), "--no-timestamp"});
        ASSERT_EQ(r.code, 0) << r.err;
        const auto o = io::parse_npy(io::read_file(path("o.npy")));
        EXPECT_EQ(o.descr, "<f4");
        EXPECT_EQ(o.rows, 2u);
        EXPECT_EQ(o.cols, 3u);
        const auto p = io::read_container(path("w.speq"));
        const auto ref = mode == "full" ? speq::gemm_full(a, p) : speq::gemm_draft(a, p);
        EXPECT_EQ(std::memcmp(o.data.data(), ref.flat().data(), o.data.size()), 0) << mode;
    }
    const auto printed = run({"gemm", "--mode", "full", "--a", path("a.npy"), "--w", path("w.speq"), "--no-timestamp"});
    EXPECT_TRUE(has(printed.out, "output row=1 values=")) << printed.out;
}

TEST_F(Workdir, SavedModelReproducesRun) {
    const auto model = path("m.bin");
    const auto a = run({"specdec", "--gen-len", "20", "--save-model", model, "--no-timestamp"});
    ASSERT_EQ(a.code, 0) << a.err;
    const auto b = run({"specdec", "--gen-len", "20", "--model", model, "--no-timestamp"});
    ASSERT_EQ(b.code, 0) << b.err;
    EXPECT_EQ(a.out, b.out);
}
