#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

struct Sandbox {
    fs::path dir;

    Sandbox() : dir(fs::temp_directory_path() / "erudiff_cli_test") {
        fs::remove_all(dir);
        fs::create_directories(dir);
        std::ofstream(dir / "small.json") << R"({
  "seed": 3,
  "t_inference": 4,
  "network": {"d_embed": 2, "widths": [8], "time_freqs": 1},
  "pretrain": {"iterations": 20, "batch_size": 16, "contract_samples": 32},
  "norl": {"n_filter": 120},
  "trainer": {"iterations": 4, "batch_size": 8, "probe_every": 0}
})";
    }
    ~Sandbox() { fs::remove_all(dir); }

    /// Exit status of the CLI run inside the sandbox; output goes to out.txt.
    int run(const std::string& args) const {
        const std::string cmd = "cd '" + dir.string() + "' && '" ERUDIFF_CLI_PATH "' " + args + " > out.txt 2>&1";
        const int status = std::system(cmd.c_str());
        return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    }

    std::string read(const std::string& name) const {
        std::ifstream in(dir / name, std::ios::binary);
        return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    }

    bool has(const std::string& name) const { return fs::exists(dir / name); }
};

long lines(const std::string& s) { return static_cast<long>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_CASE("world subcommand writes the world and a manifest") {
    Sandbox sb;
    REQUIRE(sb.run("world --entries 8 --found 2 --seed 7 --out w.world") == 0);
    CHECK(sb.has("w.world"));
    CHECK(sb.has("w.world.manifest.json"));
    CHECK(sb.read("w.world").rfind("erudiff-world 1\n", 0) == 0);
    CHECK(sb.read("w.world.manifest.json").find("\"world\"") != std::string::npos);
    const std::string first = sb.read("w.world");

    CHECK(sb.run("world --entries 8 --found 2 --seed 7 --out w.world") == 2);
    CHECK(sb.run("world --entries 8 --found 2 --seed 7 --out w.world --force") == 0);
    CHECK(sb.read("w.world") == first);

    CHECK(sb.run("world --entries 0 --found 2 --out z.world") == 2);
    CHECK(sb.run("world --entries 8 --found 2") == 2);
    CHECK(sb.run("bogus") == 2);
}

TEST_CASE("missing inputs and malformed configs") {
    Sandbox sb;
    CHECK(sb.run("pretrain --world nope.world --out p.ckpt") == 4);
    REQUIRE(sb.run("world --entries 2 --found 1 --seed 1 --out w.world") == 0);
    std::ofstream(sb.dir / "bad.json") << "{ \"pretrain\": ";
    CHECK(sb.run("pretrain --world w.world --config bad.json --out p.ckpt") == 2);
    std::ofstream(sb.dir / "neg.json") << R"({"pretrain": {"batch_size": 0}})";
    CHECK(sb.run("pretrain --world w.world --config neg.json --out p.ckpt") == 2);
    CHECK(sb.run("eval --world w.world --model nope.ckpt --out r.csv") == 4);
}

TEST_CASE("pipeline through filter, refactor and eval") {
    Sandbox sb;
    REQUIRE(sb.run("world --entries 2 --found 1 --seed 1 --out w.world") == 0);
    // Twenty iterations cannot meet the contract; the checkpoint is still written.
    CHECK(sb.run("pretrain --world w.world --config small.json --out ref.ckpt") == 3);
    REQUIRE(sb.has("ref.ckpt"));
    CHECK(sb.has("ref.ckpt.log.csv"));
    CHECK(sb.has("ref.ckpt.manifest.json"));

    REQUIRE(sb.run("filter --world w.world --ref ref.ckpt --config small.json --out f.csv --successes-out s.csv") == 0);
    const long failures = lines(sb.read("f.csv")) - 2;
    const long successes = lines(sb.read("s.csv")) - 2;
    CHECK(failures > 0);
    CHECK(failures + successes == 120);

    CHECK(sb.run("refactor --world w.world --ref ref.ckpt --config small.json --out a.ckpt") == 2);
    REQUIRE(sb.run("refactor --world w.world --ref ref.ckpt --config small.json --no-norl --out a.ckpt") == 0);
    REQUIRE(sb.run("refactor --world w.world --ref ref.ckpt --failures f.csv --config small.json --out b.ckpt") == 0);
    CHECK(lines(sb.read("b.ckpt.log.csv")) == 2 + 2 * 4);

    REQUIRE(sb.run("eval --world w.world --model b.ckpt --baseline ref.ckpt --samples 64 --config small.json "
                   "--out r1.csv --svg r1.svg") == 0);
    REQUIRE(sb.run("eval --world w.world --model b.ckpt --baseline ref.ckpt --samples 64 --config small.json "
                   "--threads 2 --out r2.csv") == 0);
    CHECK(sb.read("r1.csv") == sb.read("r2.csv"));
    CHECK(sb.read("r1.svg").find("<svg") != std::string::npos);

    REQUIRE(sb.run("world --entries 3 --found 1 --seed 1 --out big.world") == 0);
    CHECK(sb.run("eval --world big.world --model b.ckpt --samples 16 --config small.json --out r3.csv") == 2);
}

TEST_CASE("help documents the config keys") {
    Sandbox sb;
    CHECK(sb.run("refactor --help") == 0);
    const std::string help = sb.read("out.txt");
    for (const char* key : {"dkdm.lambda", "norl.beta", "trainer.eta", "trainer.eman_decay", "Exit codes"})
        CHECK(help.find(key) != std::string::npos);
}
