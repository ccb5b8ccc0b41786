#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "lqseg/checkpoint.hpp"
#include "lqseg/cli.hpp"
#include "lqseg/config.hpp"
#include "lqseg/dataset_io.hpp"
#include "lqseg/image_io.hpp"

using namespace lqseg;

namespace {

int run_cli(std::initializer_list<const char*> args) {
  std::vector<const char*> argv = {"lqseg"};
  argv.insert(argv.end(), args.begin(), args.end());
  return cli::run(static_cast<int>(argv.size()), argv.data());
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)),
                     std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  f << content;
}

}  // namespace

TEST_CASE("config parses dotted keys, comments and quoted strings") {
  const std::string text =
      "# a comment\n"
      "model.d = 32\n"
      "train.base_lr = 5e-4   # trailing comment\n"
      "data.path = \"/tmp/ds.bin\"\n"
      "infer.auto_pad = true\n"
      "\n";
  RunConfig cfg = parse_config(text, "test");
  CHECK(cfg.train.d == 32);
  CHECK(cfg.train.base_lr == doctest::Approx(5e-4));
  CHECK(cfg.train.dataset_path == "/tmp/ds.bin");
  CHECK(cfg.infer_auto_pad);
}

TEST_CASE("config rejects unknown keys and malformed lines") {
  CHECK_THROWS_AS(parse_config("model.depth = 3\n", "test"), ParseError);
  CHECK_THROWS_AS(parse_config("model.d 3\n", "test"), ParseError);
  CHECK_THROWS_AS(parse_config("model.d = zebra\n", "test"), ParseError);
  CHECK_THROWS_AS(parse_config("train.base_lr =\n", "test"), ParseError);
}

TEST_CASE("overrides take precedence over file values") {
  RunConfig cfg = parse_config("model.d = 32\n", "test");
  apply_overrides(cfg, {"model.d=64", "train.seed=9"});
  CHECK(cfg.train.d == 64);
  CHECK(cfg.train.seed == 9);
  CHECK_THROWS_AS(apply_overrides(cfg, {"nope=1"}), ParseError);
}

TEST_CASE("synth writes the requested number of scenes deterministically") {
  const std::string out1 = "/tmp/lqseg_cli_ds1.bin";
  const std::string out2 = "/tmp/lqseg_cli_ds2.bin";
  CHECK(run_cli({"synth", "--out", out1.c_str(), "--scenes", "10", "--image-size", "64",
                 "--seed", "5"}) == 0);
  CHECK(run_cli({"synth", "--out", out2.c_str(), "--scenes", "10", "--image-size", "64",
                 "--seed", "5"}) == 0);
  CHECK(read_file(out1) == read_file(out2));
  auto scenes = load_dataset(out1);
  CHECK(scenes.size() == 10);
  std::filesystem::remove(out1);
  std::filesystem::remove(out2);
}

TEST_CASE("synth with full scale mix keeps every instance small") {
  const std::string out = "/tmp/lqseg_cli_small.bin";
  CHECK(run_cli({"synth", "--out", out.c_str(), "--scenes", "6", "--image-size", "64",
                 "--seed", "3", "--scale-mix", "1.0"}) == 0);
  for (const auto& [img, ann] : load_dataset(out))
    for (const auto& inst : ann.instances) {
      int area = 0;
      for (auto v : inst.mask) area += v;
      CHECK(area < 0.10 * 64 * 64);
    }
  std::filesystem::remove(out);
}

TEST_CASE("invalid flag values exit with code 2") {
  CHECK(run_cli({"synth", "--out", "/tmp/x.bin", "--scale-mix", "3.0"}) == 2);
  CHECK(run_cli({"bogus-subcommand"}) == 2);
  CHECK(run_cli({"synth"}) == 2);  // missing required --out
}

namespace {

struct TrainedFixture {
  std::string dataset = "/tmp/lqseg_cli_train_ds.bin";
  std::string out_dir = "/tmp/lqseg_cli_train_out";
  std::string config = "/tmp/lqseg_cli_train.cfg";
  std::string checkpoint;

  TrainedFixture() {
    std::filesystem::remove_all(out_dir);
    run_cli({"synth", "--out", dataset.c_str(), "--scenes", "4", "--image-size", "64",
             "--seed", "7"});
    write_file(config,
               "model.d = 16\n"
               "model.n_q = 5\n"
               "model.stages = 3\n"
               "data.path = " + dataset + "\n"
               "data.image_size = 64\n"
               "train.iterations = 6\n"
               "train.batch_size = 1\n"
               "train.warmup_iters = 3\n"
               "train.checkpoint_every = 3\n"
               "train.seed = 21\n"
               "train.out_dir = " + out_dir + "\n");
    checkpoint = out_dir + "/checkpoint_final.lqsg";
  }
};

}  // namespace

TEST_CASE("train/eval/infer round trip through the CLI") {
  TrainedFixture fx;
  CHECK(run_cli({"train", "--config", fx.config.c_str()}) == 0);
  CHECK(std::filesystem::exists(fx.checkpoint));
  // log has one line per iteration
  int lines = 0;
  {
    std::ifstream f(fx.out_dir + "/train_log.jsonl");
    std::string line;
    while (std::getline(f, line))
      if (!line.empty()) ++lines;
  }
  CHECK(lines == 6);

  // eval on the training set emits a report with the dominance invariant
  const std::string report_path = fx.out_dir + "/report.json";
  CHECK(run_cli({"eval", "--checkpoint", fx.checkpoint.c_str(), "--dataset",
                 fx.dataset.c_str(), "--out", report_path.c_str()}) == 0);
  nlohmann::json report = nlohmann::json::parse(read_file(report_path));
  CHECK(report.contains("ap_iou"));
  CHECK(report.contains("ap_iou_f1"));
  CHECK(report["ap_iou_f1"].get<double>() <= report["ap_iou"].get<double>() + 1e-12);
  CHECK(report["n_images"].get<int>() == 4);

  // infer on a dataset image exported as PPM
  auto scenes = load_dataset(fx.dataset);
  const std::string ppm = fx.out_dir + "/scene0.ppm";
  write_ppm(ppm, scenes[0].first);
  const std::string infer_dir = fx.out_dir + "/infer";
  CHECK(run_cli({"infer", "--checkpoint", fx.checkpoint.c_str(), "--image", ppm.c_str(),
                 "--out-dir", infer_dir.c_str()}) == 0);
  nlohmann::json sidecar =
      nlohmann::json::parse(read_file(infer_dir + "/detections.json"));
  REQUIRE(sidecar.contains("detections"));
  for (const auto& det : sidecar["detections"]) {
    CHECK(det["class_id"].get<int>() >= 0);
    CHECK(det["class_id"].get<int>() < kNumClasses);
    for (const auto& a : det["attributes"]) {
      CHECK(a.get<int>() >= 0);
      CHECK(a.get<int>() < kNumAttributes);
    }
    CHECK(std::filesystem::exists(infer_dir + "/" + det["mask_file"].get<std::string>()));
  }
}

TEST_CASE("train resume continues iteration numbering") {
  TrainedFixture fx;
  // first half
  CHECK(run_cli({"train", "--config", fx.config.c_str(), "--set",
                 "train.iterations=3"}) == 0);
  CHECK(run_cli({"train", "--config", fx.config.c_str(), "--resume",
                 fx.checkpoint.c_str()}) == 0);
  std::ifstream f(fx.out_dir + "/train_log.jsonl");
  std::string line, last;
  std::vector<int> iters;
  while (std::getline(f, line))
    if (!line.empty()) iters.push_back(nlohmann::json::parse(line)["iter"].get<int>());
  REQUIRE(iters.size() == 6);
  CHECK(iters == std::vector<int>{1, 2, 3, 4, 5, 6});
}

TEST_CASE("eval rejects missing and mismatched inputs with exit 2") {
  TrainedFixture fx;
  REQUIRE(run_cli({"train", "--config", fx.config.c_str()}) == 0);
  // dataset at a different image size
  const std::string other = "/tmp/lqseg_cli_other.bin";
  run_cli({"synth", "--out", other.c_str(), "--scenes", "2", "--image-size", "96",
           "--seed", "2"});
  CHECK(run_cli({"eval", "--checkpoint", fx.checkpoint.c_str(), "--dataset",
                 other.c_str()}) == 2);
  // empty dataset file
  const std::string empty = "/tmp/lqseg_cli_empty.bin";
  serialize_dataset({}, empty);
  CHECK(run_cli({"eval", "--checkpoint", fx.checkpoint.c_str(), "--dataset",
                 empty.c_str()}) == 2);
  std::filesystem::remove(other);
  std::filesystem::remove(empty);
}

TEST_CASE("corrupt checkpoint on resume exits 2 and names the offset") {
  TrainedFixture fx;
  REQUIRE(run_cli({"train", "--config", fx.config.c_str(), "--set",
                   "train.iterations=3"}) == 0);
  std::string bytes = read_file(fx.checkpoint);
  bytes[bytes.size() - 3] = static_cast<char>(bytes[bytes.size() - 3] ^ 0x77);
  write_file(fx.checkpoint, bytes);
  CHECK(run_cli({"train", "--config", fx.config.c_str(), "--resume",
                 fx.checkpoint.c_str()}) == 2);
}

TEST_CASE("infer requires divisible-by-32 input unless auto-pad is set") {
  TrainedFixture fx;
  REQUIRE(run_cli({"train", "--config", fx.config.c_str()}) == 0);
  // 50x70 image: not divisible by 32
  Tensor odd = Tensor::full({3, 50, 70}, 0.5);
  const std::string ppm = fx.out_dir + "/odd.ppm";
  write_ppm(ppm, odd);
  const std::string infer_dir = fx.out_dir + "/infer_odd";
  CHECK(run_cli({"infer", "--checkpoint", fx.checkpoint.c_str(), "--image", ppm.c_str(),
                 "--out-dir", infer_dir.c_str()}) == 2);
  CHECK(run_cli({"infer", "--checkpoint", fx.checkpoint.c_str(), "--image", ppm.c_str(),
                 "--out-dir", infer_dir.c_str(), "--auto-pad"}) == 0);
  // masks, if any, come back at the original resolution
  nlohmann::json sidecar =
      nlohmann::json::parse(read_file(infer_dir + "/detections.json"));
  CHECK(sidecar.contains("detections"));
  // unreadable image
  CHECK(run_cli({"infer", "--checkpoint", fx.checkpoint.c_str(), "--image",
                 "/tmp/does_not_exist.ppm", "--out-dir", infer_dir.c_str()}) == 2);
}

TEST_CASE("ppm round trip preserves 8-bit pixels") {
  Rng rng(3);
  std::vector<double> d(3 * 32 * 32);
  for (double& v : d) v = rng.uniform(0.0, 1.0);
  Tensor img = Tensor::from_data({3, 32, 32}, d);
  const std::string path = "/tmp/lqseg_cli_rt.ppm";
  write_ppm(path, img);
  Tensor back = read_ppm(path);
  REQUIRE(back.shape() == img.shape());
  for (std::int64_t i = 0; i < img.numel(); ++i)
    CHECK(std::abs(back.data()[i] - img.data()[i]) <= 0.5 / 255.0 + 1e-12);
  std::filesystem::remove(path);
}
