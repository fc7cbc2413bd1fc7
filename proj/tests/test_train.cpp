#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "taylorseg/checkpoint.hpp"
#include "taylorseg/dataset.hpp"
#include "taylorseg/errors.hpp"
#include "taylorseg/train.hpp"

using namespace taylorseg;
namespace fs = std::filesystem;

namespace {

const Dataset& tiny_suite() {
  static const Dataset data = [] {
    SuiteConfig cfg;
    cfg.scenes = 40;
    cfg.points = 96;
    return synth_dataset(cfg);
  }();
  return data;
}

NetworkConfig tiny_net() {
  NetworkConfig cfg;
  cfg.downsample_ratio = 0.5;
  cfg.k_neighbors = 8;
  cfg.channels = {8, 12, 16};
  cfg.embed_channels = 8;
  cfg.out_channels = 8;
  return cfg;
}

TrainConfig tiny_train(int iterations) {
  TrainConfig cfg;
  cfg.iterations = iterations;
  cfg.lr = 5e-3;
  cfg.seed = 3;
  return cfg;
}

bool same_values(const ParamStore& a, const ParamStore& b, ParamGroup group) {
  for (const auto& name : a.names(group)) {
    if (!(a.get(name) == b.get(name))) return false;
  }
  return true;
}

}  // namespace

TEST(RunConfig, ParsesKeysAndComments) {
  std::istringstream in(
      "# tiny\nchannels = 8, 12, 16\nkernel_s=0\nkernel_p = 2\nlearnable_p=false\n"
      "iterations=12 # inline\nalternation = joint\nsimilarity=neg_sq_euclidean\nuse_app=0\n");
  const RunConfig cfg = parse_run_config(in);
  EXPECT_EQ(cfg.network.channels, (std::vector<int>{8, 12, 16}));
  EXPECT_EQ(cfg.network.kernel.s, 0);
  EXPECT_FALSE(cfg.network.kernel.learnable_p);
  EXPECT_EQ(cfg.train.iterations, 12);
  EXPECT_EQ(cfg.train.alternation, Alternation::Joint);
  EXPECT_EQ(cfg.train.fewshot.similarity, Similarity::NegSquaredEuclidean);
  EXPECT_FALSE(cfg.train.use_app);
}

TEST(RunConfig, ErrorsNameTheLine) {
  std::istringstream unknown("lr=0.1\nbogus=3\n");
  try {
    parse_run_config(unknown);
    FAIL() << "accepted an unknown key";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
  std::istringstream bad_number("lr=fast\n");
  EXPECT_THROW(parse_run_config(bad_number), ConfigError);
  std::istringstream no_eq("lr 0.1\n");
  EXPECT_THROW(parse_run_config(no_eq), ConfigError);
  std::istringstream bad_kernel("kernel_p=1.5\nlearnable_p=false\n");
  EXPECT_THROW(parse_run_config(bad_kernel), ConfigError);
}

TEST(Checkpoint, RoundTripIsExact) {
  const TrainResult r = train_pn(tiny_suite(), SplitConfig::standard(), tiny_train(2), tiny_net());
  const Checkpoint ckpt = checkpoint_of(r.net, FewShotConfig{0.2}, 2);
  std::stringstream buf;
  save_checkpoint(buf, ckpt);
  const Checkpoint back = load_checkpoint(buf);
  EXPECT_EQ(back.iterations, 2u);
  EXPECT_DOUBLE_EQ(back.fewshot.temperature, 0.2);
  EXPECT_EQ(config_hash(back.network), config_hash(ckpt.network));
  ASSERT_EQ(back.params.size(), ckpt.params.size());
  for (const auto& e : ckpt.params.entries()) {
    EXPECT_EQ(back.params.get(e.name), e.value) << e.name;
    EXPECT_EQ(back.params.entry(e.name).group, e.group) << e.name;
  }
}

TEST(Checkpoint, TamperedConfigRejected) {
  const SegNet net = SegNet::make_pn(tiny_net(), 1);
  std::stringstream buf;
  save_checkpoint(buf, checkpoint_of(net, {}, 0));
  std::string text = buf.str();
  const auto at = text.find("\"k_neighbors\":8");
  ASSERT_NE(at, std::string::npos);
  text.replace(at, 15, "\"k_neighbors\":9");
  std::istringstream in(text);
  EXPECT_THROW(load_checkpoint(in), DataError);
  std::istringstream junk("{not json");
  EXPECT_THROW(load_checkpoint(junk), DataError);
}

TEST(Train, ZeroIterationsKeepsInitialization) {
  const TrainResult r = train_pn(tiny_suite(), SplitConfig::standard(), tiny_train(0), tiny_net());
  SegNet init = SegNet::make_pn(tiny_net(), 3);
  register_app_params(init.params(), init.out_channels(), 3);
  EXPECT_TRUE(r.log.empty());
  EXPECT_TRUE(same_values(r.net.params(), init.params(), ParamGroup::Backbone));
  EXPECT_TRUE(same_values(r.net.params(), init.params(), ParamGroup::App));
}

TEST(Train, PerIterationAlternationContract) {
  const TrainResult zero = train_pn(tiny_suite(), SplitConfig::standard(), tiny_train(0), tiny_net());
  const TrainResult one = train_pn(tiny_suite(), SplitConfig::standard(), tiny_train(1), tiny_net());
  const TrainResult two = train_pn(tiny_suite(), SplitConfig::standard(), tiny_train(2), tiny_net());
  // Iteration 0 moves only the backbone; iteration 1 only APP.
  EXPECT_TRUE(same_values(zero.net.params(), one.net.params(), ParamGroup::App));
  EXPECT_FALSE(same_values(zero.net.params(), one.net.params(), ParamGroup::Backbone));
  EXPECT_TRUE(same_values(one.net.params(), two.net.params(), ParamGroup::Backbone));
  EXPECT_FALSE(same_values(one.net.params(), two.net.params(), ParamGroup::App));
  ASSERT_EQ(two.log.size(), 2u);
  EXPECT_EQ(two.log[0].updated, "backbone");
  EXPECT_EQ(two.log[1].updated, "app");
}

TEST(Train, JointModeMovesEverything) {
  TrainConfig cfg = tiny_train(1);
  cfg.alternation = Alternation::Joint;
  const TrainResult zero = train_pn(tiny_suite(), SplitConfig::standard(), tiny_train(0), tiny_net());
  const TrainResult one = train_pn(tiny_suite(), SplitConfig::standard(), cfg, tiny_net());
  EXPECT_FALSE(same_values(zero.net.params(), one.net.params(), ParamGroup::App));
  EXPECT_FALSE(same_values(zero.net.params(), one.net.params(), ParamGroup::Backbone));
  EXPECT_EQ(one.log[0].updated, "all");
}

TEST(Train, WithoutAppHasNoAppParameters) {
  TrainConfig cfg = tiny_train(2);
  cfg.use_app = false;
  const TrainResult r = train_pn(tiny_suite(), SplitConfig::standard(), cfg, tiny_net());
  EXPECT_TRUE(r.net.params().names(ParamGroup::App).empty());
  EXPECT_EQ(r.log[1].updated, "backbone");
}

TEST(Train, LogIsJsonLinesAndDeterministic) {
  std::ostringstream a, b;
  train_pn(tiny_suite(), SplitConfig::standard(), tiny_train(4), tiny_net(), &a);
  train_pn(tiny_suite(), SplitConfig::standard(), tiny_train(4), tiny_net(), &b);
  EXPECT_EQ(a.str(), b.str());
  std::istringstream lines(a.str());
  std::string line;
  int count = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("iteration").get<int>(), count);
    EXPECT_TRUE(j.contains("loss") && j.contains("lr") && j.contains("miou"));
    ++count;
  }
  EXPECT_EQ(count, 4);
}

TEST(Train, WritesCheckpoint) {
  const fs::path path = fs::temp_directory_path() / "taylorseg_train_ckpt.json";
  fs::remove(path);
  TrainConfig cfg = tiny_train(1);
  cfg.checkpoint = path;
  const TrainResult r = train_pn(tiny_suite(), SplitConfig::standard(), cfg, tiny_net());
  const Checkpoint ckpt = load_checkpoint(path);
  EXPECT_EQ(ckpt.iterations, 1u);
  for (const auto& e : r.net.params().entries()) EXPECT_EQ(ckpt.params.get(e.name), e.value);
  fs::remove(path);
}

TEST(Train, RejectsParameterFreeNetwork) {
  EXPECT_THROW(train_pn(tiny_suite(), SplitConfig::standard(), tiny_train(1), NetworkConfig::nn_default()),
               ConfigError);
}

TEST(Evaluate, SameCheckpointSameNumbers) {
  const TrainResult r = train_pn(tiny_suite(), SplitConfig::standard(), tiny_train(2), tiny_net());
  EvalConfig cfg;
  cfg.episodes = 4;
  const SplitConfig split = SplitConfig::standard();
  std::ostringstream ja, jb;
  const EvalReport a = evaluate(r.net, EvalMode::PN, tiny_suite(), split.unseen, cfg, &ja);
  const EvalReport b = evaluate(r.net, EvalMode::PN, tiny_suite(), split.unseen, cfg, &jb);
  EXPECT_EQ(a.mean_miou, b.mean_miou);
  EXPECT_EQ(a.std_miou, b.std_miou);
  EXPECT_EQ(ja.str(), jb.str());
  const auto first = nlohmann::json::parse(ja.str().substr(0, ja.str().find('\n')));
  for (const char* key : {"episode_id", "n_way", "k_shot", "seed", "per_class_iou", "miou", "loss"}) {
    EXPECT_TRUE(first.contains(key)) << key;
  }
}

TEST(Evaluate, ParameterFreeModeNeedsNoCheckpoint) {
  EvalConfig cfg;
  cfg.episodes = 2;
  const SplitConfig split = SplitConfig::standard();
  NetworkConfig nn = NetworkConfig::nn_default();
  nn.k_neighbors = 8;
  nn.downsample_ratio = 0.5;
  const EvalReport r = evaluate(SegNet::make_nn(nn), EvalMode::NN, tiny_suite(), split.unseen, cfg);
  EXPECT_EQ(r.episodes.size(), 2u);
  EXPECT_GE(r.mean_miou, 0.0);
  EXPECT_LE(r.mean_miou, 1.0);
}

TEST(Evaluate, ModeAndNetworkMustAgree) {
  EvalConfig cfg;
  cfg.episodes = 1;
  const SplitConfig split = SplitConfig::standard();
  const SegNet pn = SegNet::make_pn(tiny_net(), 1);
  EXPECT_THROW(evaluate(pn, EvalMode::NN, tiny_suite(), split.unseen, cfg), ConfigError);
  EXPECT_THROW(evaluate(pn, EvalMode::PN, tiny_suite(), split.unseen, cfg), ConfigError);
  EXPECT_NO_THROW(evaluate(pn, EvalMode::PNNoApp, tiny_suite(), split.unseen, cfg));
  EXPECT_THROW(evaluate(SegNet::make_nn(), EvalMode::PN, tiny_suite(), split.unseen, cfg), ConfigError);
}

TEST(Evaluate, EpisodeSeedsAreIndependentStreams) {
  EXPECT_NE(eval_episode_seed(1, 0), eval_episode_seed(1, 1));
  EXPECT_NE(eval_episode_seed(1, 0), train_episode_seed(1, 0));
  EXPECT_EQ(eval_episode_seed(5, 3), eval_episode_seed(5, 3));
}
