#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <unistd.h>

#include "lcmae/checkpoint.hpp"
#include "lcmae/config.hpp"
#include "lcmae/dataset.hpp"
#include "lcmae/errors.hpp"
#include "lcmae/grad_suite.hpp"

using namespace lcmae;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_train() {
    TrainConfig c;
    c.model = tiny_model_config();
    c.augment.out_size = 8;
    c.epochs = 1;
    c.warmup_epochs = 0;
    c.batch_size = 4;
    return c;
}

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("lcmae_test_" + std::to_string(::getpid()));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

int run_cli(const std::string& args) {
    const std::string cmd = std::string(LCMAE_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("checkpoint round trip") {
    const Dataset data = generate_synthetic({8, 8, 2}, 1);
    const TrainConfig c = tiny_train();
    PretrainResult r = pretrain(c, data);
    const auto bytes = encode_checkpoint(c, 1, r.state, r.optimizer);
    Checkpoint ck = decode_checkpoint(bytes);
    CHECK(ck.epoch == 1);
    CHECK(ck.optimizer.step_count() == r.optimizer.step_count());
    CHECK(dump_config(ck.config) == dump_config(c));
    CHECK(encode_checkpoint(ck.config, ck.epoch, ck.state, ck.optimizer) == bytes);

    TempDir tmp;
    const auto path = (tmp.path / "a.ckpt").string();
    save_checkpoint(path, c, 1, r.state, r.optimizer);
    Checkpoint loaded = load_checkpoint(path);
    const auto path2 = (tmp.path / "b.ckpt").string();
    save_checkpoint(path2, loaded.config, loaded.epoch, loaded.state, loaded.optimizer);
    CHECK(read_bytes(path) == read_bytes(path2));
}

TEST_CASE("checkpoint corruption is rejected") {
    const TrainConfig c = tiny_train();
    ModelState s = ModelState::create(c.model, 2);
    AdamW opt = make_optimizer(s, c);
    const auto bytes = encode_checkpoint(c, 0, s, opt);

    auto cut = bytes;
    cut.resize(bytes.size() / 2);
    CHECK_THROWS_AS(decode_checkpoint(cut), ParseError);
    CHECK_THROWS_AS(decode_checkpoint({}), ParseError);

    auto ver = bytes;
    ver[6] = 99;
    CHECK_THROWS_AS(decode_checkpoint(ver), VersionError);

    auto magic = bytes;
    magic[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(magic), ParseError);

    Rng rng(3);
    for (int i = 0; i < 50; ++i) {
        auto bad = bytes;
        bad[rng.below(bad.size())] ^= static_cast<std::uint8_t>(1 + rng.below(255));
        CHECK_THROWS_AS(decode_checkpoint(bad), ParseError);
    }
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/x.ckpt"), IoError);
}

TEST_CASE("dataset format") {
    const Dataset d = generate_synthetic({24, 8, 4}, 5);
    CHECK(d.size() == 24);
    std::vector<std::size_t> counts(4, 0);
    for (auto l : d.labels) ++counts[l];
    for (auto n : counts) CHECK(n == 6);
    for (const auto& img : d.images) {
        for (double p : img.pixels) {
            CHECK(p >= 0.0);
            CHECK(p <= 1.0);
        }
    }

    const auto bytes = encode_dataset(d);
    CHECK(encode_dataset(generate_synthetic({24, 8, 4}, 5)) == bytes);
    CHECK(encode_dataset(generate_synthetic({24, 8, 4}, 6)) != bytes);
    const Dataset back = decode_dataset(bytes);
    CHECK(back.labels == d.labels);
    CHECK(encode_dataset(back) == bytes);
    for (std::size_t i = 0; i < d.images[0].pixels.size(); ++i) {
        CHECK(std::abs(back.images[0].pixels[i] - d.images[0].pixels[i]) <= 0.5 / 255.0 + 1e-12);
    }

    const Dataset empty = generate_synthetic({0, 8, 4}, 1);
    CHECK(empty.size() == 0);
    CHECK(decode_dataset(encode_dataset(empty)).size() == 0);

    auto cut = bytes;
    cut.pop_back();
    CHECK_THROWS_AS(decode_dataset(cut), ParseError);
    auto magic = bytes;
    magic[1] = 'x';
    CHECK_THROWS_AS(decode_dataset(magic), ParseError);
}

TEST_CASE("config text") {
    TrainConfig c = tiny_train();
    c.model.guidance.alpha = 0.1;
    c.base_lr = 1.0 / 3.0;
    c.model.guidance.distance = Distance::infonce;
    c.augment.crop_mode = CropMode::rrc;
    const std::string text = dump_config(c);
    CHECK(dump_config(parse_config(text)) == text);
    CHECK(parse_config(text).base_lr == c.base_lr);
    CHECK(config_keys().size() > 40);
    for (const auto& k : config_keys()) CHECK(text.find(k + " = ") != std::string::npos);

    const TrainConfig p = parse_config("# comment\nguidance.alpha = 0.5\n\nvit.dim = 16  # trailing\n");
    CHECK(p.model.guidance.alpha == 0.5);
    CHECK(p.model.vit.dim == 16);
    CHECK_THROWS_AS(parse_config("vit.width = 3\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("epochs = -1\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("guidance.distance = l2\n"), ConfigError);

    TrainConfig o;
    apply_override(o, "guidance.alpha=0");
    CHECK(o.model.guidance.alpha == 0.0);
    CHECK(get_config_value(o, "guidance.alpha") == "0");
    CHECK_THROWS_AS(apply_override(o, "no_equals"), ConfigError);
}

TEST_CASE("command line runs are reproducible") {
    TempDir tmp;
    const auto p = tmp.path;
    const std::string data = (p / "d.lcimg").string();
    REQUIRE(run_cli("gen-data --out " + data + " --count 8 --size 8 --classes 2 --seed 4") == 0);
    REQUIRE(run_cli("gen-data --out " + (p / "e.lcimg").string() + " --count 8 --size 8 --classes 2 --seed 4") == 0);
    CHECK(read_bytes(data) == read_bytes(p / "e.lcimg"));

    {
        std::ofstream cfg(p / "tiny.cfg");
        cfg << dump_config(tiny_train());
    }
    const std::string base = "pretrain --quiet --config " + (p / "tiny.cfg").string() + " --data " + data;
    REQUIRE(run_cli(base + " --out " + (p / "r1").string()) == 0);
    REQUIRE(run_cli(base + " --out " + (p / "r2").string()) == 0);
    CHECK(read_bytes(p / "r1" / "log.csv") == read_bytes(p / "r2" / "log.csv"));
    CHECK(read_bytes(p / "r1" / "final.ckpt") == read_bytes(p / "r2" / "final.ckpt"));
    CHECK_FALSE(read_bytes(p / "r1" / "final.ckpt").empty());

    std::ifstream log(p / "r1" / "log.csv");
    std::string header;
    std::getline(log, header);
    CHECK(header == "step,lr,l_mim,l_gg,total");

    CHECK(run_cli("frobnicate") == 2);
    CHECK(run_cli(base + " --out " + (p / "r3").string() + " --override no.such_key=1") == 2);
    CHECK(run_cli("probe --checkpoint " + (p / "missing.ckpt").string()) == 2);
    CHECK(run_cli("analyze-attn --checkpoint " + (p / "r1" / "final.ckpt").string() + " --image 0 --data " + data +
                  " --query 2 --out " + (p / "attn").string()) == 0);
    CHECK(fs::exists(p / "attn.pgm"));
    CHECK(fs::exists(p / "attn.csv"));
}
