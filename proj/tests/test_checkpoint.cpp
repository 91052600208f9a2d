#include <gtest/gtest.h>

#include <filesystem>

#include "varexp/checkpoint.hpp"
#include "varexp/io.hpp"

using namespace varexp;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("varexp-ckpt-" + std::to_string(::getpid()) + "-" +
                                            ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

TrainingConfig small_config() {
    TrainingConfig c;
    c.data.depth = 2;
    c.data.segs_per_branch = 2;
    c.model_depth = 3;
    c.model_hidden = 16;
    c.iterations = 40;
    c.batch_size = 32;
    return c;
}

TokenizerTrainState trained(const TrainingConfig& c, std::int64_t stop_after) {
    auto loop = c.loop();
    auto st = TokenizerTrainState::fresh(c.seed, c.model_depth, c.model_hidden, loop);
    loop.stop_after = stop_after;
    train_tokenizer(build_mixture(c.data), c.loss, loop, st);
    return st;
}

}  // namespace

TEST(Checkpoint, TokenizerRoundTripIsExact) {
    TempDir tmp;
    const auto cfg = small_config();
    const auto st = trained(cfg, 17);
    const auto path = (tmp.path / "tok.ckpt").string();
    write_checkpoint(path, make_checkpoint(st, cfg));
    const auto ck = read_checkpoint(path);
    const auto back = restore_tokenizer(ck);
    EXPECT_TRUE(back.model == st.model);
    EXPECT_EQ(back.iteration, 17);
    EXPECT_EQ(back.data_rng, st.data_rng);
    EXPECT_EQ(back.reparam_rng, st.reparam_rng);
    EXPECT_EQ(back.encoder_opt.step, st.encoder_opt.step);
    EXPECT_TRUE(checkpoint_config(ck) == [&] {
        auto c = cfg;
        c.output_dir = TrainingConfig{}.output_dir;
        c.threads = TrainingConfig{}.threads;
        return c;
    }());
    // restored state re-serializes to the same bytes
    const auto again = (tmp.path / "tok2.ckpt").string();
    write_checkpoint(again, make_checkpoint(back, cfg));
    EXPECT_EQ(read_file(path), read_file(again));
}

TEST(Checkpoint, ReproducibleBytes) {
    TempDir tmp;
    const auto cfg = small_config();
    write_checkpoint((tmp.path / "a").string(), make_checkpoint(trained(cfg, 40), cfg));
    write_checkpoint((tmp.path / "b").string(), make_checkpoint(trained(cfg, 40), cfg));
    EXPECT_EQ(file_hash(tmp.path / "a"), file_hash(tmp.path / "b"));
}

TEST(Checkpoint, ResumeFromFileMatchesUninterrupted) {
    TempDir tmp;
    const auto cfg = small_config();
    const auto full = trained(cfg, 40);
    const auto path = (tmp.path / "mid.ckpt").string();
    write_checkpoint(path, make_checkpoint(trained(cfg, 13), cfg));
    auto resumed = restore_tokenizer(read_checkpoint(path));
    train_tokenizer(build_mixture(cfg.data), cfg.loss, cfg.loop(), resumed);
    EXPECT_TRUE(resumed.model == full.model);
    EXPECT_EQ(make_checkpoint(resumed, cfg).payload, make_checkpoint(full, cfg).payload);
}

TEST(Checkpoint, FlowRoundTripAndResume) {
    TempDir tmp;
    auto cfg = small_config();
    const auto tok = trained(cfg, 40);
    const auto data = build_mixture(cfg.data);
    const LatentSource src{&data, &tok.model, cfg.effective_flow_latent()};
    auto loop = cfg.loop();
    auto full = FlowTrainState::fresh(cfg.seed, 2, cfg.model_depth, cfg.model_hidden, loop);
    auto part = full;
    train_flow(src, loop, full);
    auto stop = loop;
    stop.stop_after = 21;
    train_flow(src, stop, part);
    const auto path = (tmp.path / "flow.ckpt").string();
    write_checkpoint(path, make_checkpoint(part, cfg, "abc"));
    const auto ck = read_checkpoint(path);
    EXPECT_EQ(ck.header["tokenizer_hash"], "abc");
    auto resumed = restore_flow(ck);
    EXPECT_TRUE(resumed.flow == part.flow);
    EXPECT_EQ(resumed.time_rng, part.time_rng);
    train_flow(src, loop, resumed);
    EXPECT_TRUE(resumed.flow == full.flow);
    EXPECT_THROW(restore_tokenizer(ck), std::runtime_error);
}

TEST(Checkpoint, DescribeReadsHeaderOnly) {
    TempDir tmp;
    const auto cfg = small_config();
    const auto path = (tmp.path / "d.ckpt").string();
    write_checkpoint(path, make_checkpoint(trained(cfg, 5), cfg));
    const auto h = describe_checkpoint(path);
    EXPECT_EQ(h["kind"], "tokenizer");
    EXPECT_EQ(h["iteration"], 5);
    EXPECT_EQ(h["loss_mode"], "ve");
    EXPECT_EQ(h["config_hash"], config_hash(cfg));
    EXPECT_EQ(h["networks"][0]["name"], "encoder");
    EXPECT_FALSE(fs::exists(path + ".tmp"));
}

TEST(Checkpoint, CorruptFilesRejected) {
    TempDir tmp;
    const auto cfg = small_config();
    const auto path = tmp.path / "c.ckpt";
    write_checkpoint(path.string(), make_checkpoint(trained(cfg, 3), cfg));
    const std::string bytes = read_file(path);
    write_file(tmp.path / "trunc", bytes.substr(0, bytes.size() - 8));
    EXPECT_THROW(read_checkpoint((tmp.path / "trunc").string()), std::runtime_error);
    write_file(tmp.path / "magic", "NOTACKPT" + bytes.substr(8));
    EXPECT_THROW(read_checkpoint((tmp.path / "magic").string()), std::runtime_error);
    EXPECT_THROW(read_checkpoint((tmp.path / "missing").string()), std::runtime_error);
}

TEST(Io, PointsRoundTripExactly) {
    TempDir tmp;
    RngStream r(1, "p");
    const Eigen::MatrixXd p = draw_normals(r, 2, 100);
    save_points(tmp.path / "p.txt", p);
    EXPECT_EQ(load_points(tmp.path / "p.txt"), p);
}

TEST(Io, LockIsExclusive) {
    TempDir tmp;
    {
        RunLock a(tmp.path);
        EXPECT_THROW(RunLock b(tmp.path), std::runtime_error);
    }
    EXPECT_NO_THROW(RunLock c(tmp.path));
}

TEST(Io, ManifestDetectsChanges) {
    TempDir tmp;
    write_file(tmp.path / "x.txt", "one");
    Manifest m(tmp.path);
    m.add(tmp.path / "x.txt");
    m.save();
    EXPECT_TRUE(m.verify().empty());
    write_file(tmp.path / "x.txt", "two");
    EXPECT_EQ(m.verify(), std::vector<std::string>{"x.txt"});
}
