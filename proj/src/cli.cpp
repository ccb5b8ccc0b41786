#include "lqseg/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"
#include "lqseg/checkpoint.hpp"
#include "lqseg/config.hpp"
#include "lqseg/image_io.hpp"
#include "lqseg/trainer.hpp"

namespace lqseg::cli {

namespace {

Model model_from_checkpoint(const CheckpointData& ck) {
  const TrainConfig saved = train_config_from_json(ck.config);
  ModelConfig mc{saved.d, saved.n_q, saved.stages, kNumClasses, kNumAttributes};
  Model model(mc, saved.seed);
  std::size_t found = 0;
  for (auto& [name, param] : model.parameters())
    for (const auto& [ck_name, ck_tensor] : ck.tensors)
      if (ck_name == name) {
        if (ck_tensor.shape() != param.shape())
          throw SchemaError("checkpoint tensor " + name + " has shape " +
                            shape_str(ck_tensor.shape()) + ", expected " +
                            shape_str(param.shape()));
        std::copy(ck_tensor.data(), ck_tensor.data() + ck_tensor.numel(), param.data());
        ++found;
      }
  if (found != model.parameters().size())
    throw SchemaError("checkpoint does not cover every model tensor");
  return model;
}

int cmd_synth(const std::string& out, int scenes, int image_size, std::uint64_t seed,
              double scale_mix, int instances) {
  if (scenes <= 0) throw ContractError("synth: --scenes must be positive");
  std::vector<Scene> data;
  data.reserve(static_cast<std::size_t>(scenes));
  for (int i = 0; i < scenes; ++i) {
    SceneSpec spec;
    spec.image_size = image_size;
    spec.scale_mix = scale_mix;
    spec.seed = derive_seed(seed, static_cast<std::uint64_t>(i));
    spec.num_instances =
        instances > 0
            ? instances
            : 2 + static_cast<int>(Rng(derive_seed(seed, 0xC0FFEE00u + static_cast<std::uint64_t>(i))).uniform_int(5));
    data.push_back(generate_scene(spec));
  }
  serialize_dataset(data, out);
  std::cout << "wrote " << scenes << " scenes to " << out << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::optional<std::string>& resume,
              const std::vector<std::string>& overrides) {
  RunConfig cfg = load_config_file(config_path);
  apply_overrides(cfg, overrides);
  if (cfg.train.dataset_path.empty())
    throw ContractError("train: data.path is required");
  if (!std::filesystem::exists(cfg.train.dataset_path))
    throw ContractError("train: dataset " + cfg.train.dataset_path + " does not exist");
  if (cfg.train.out_dir.empty()) throw ContractError("train: train.out_dir is required");

  std::filesystem::create_directories(cfg.train.out_dir);
  const std::string log_path = cfg.train.out_dir + "/train_log.jsonl";
  std::ofstream log(log_path, resume ? std::ios::app : std::ios::trunc);
  if (!log) throw ContractError("train: cannot open log " + log_path);
  TrainOutcome outcome = run_training(cfg.train, resume, log);
  std::cout << "finished " << outcome.iterations_run << " iterations; checkpoint at "
            << outcome.final_checkpoint << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& dataset_path,
             const std::string& out_path, double f1_threshold) {
  CheckpointData ck = load_checkpoint(checkpoint_path);
  const TrainConfig saved = train_config_from_json(ck.config);
  if (ck.config.value("k_cls", kNumClasses) != kNumClasses)
    throw SchemaError("eval: checkpoint/dataset mismatch on field k_cls");
  if (ck.config.value("k_attr", kNumAttributes) != kNumAttributes)
    throw SchemaError("eval: checkpoint/dataset mismatch on field k_attr");
  std::vector<Scene> scenes = load_dataset(dataset_path);
  if (scenes.empty()) throw ContractError("eval: dataset is empty");
  if (scenes[0].second.height != saved.image_size)
    throw SchemaError("eval: checkpoint/dataset mismatch on field image_size (" +
                      std::to_string(saved.image_size) + " vs " +
                      std::to_string(scenes[0].second.height) + ")");
  Model model = model_from_checkpoint(ck);
  EvalReport report = evaluate_model(model, scenes, f1_threshold);
  const std::string json = eval_report_json(report);
  if (out_path.empty() || out_path == "-") {
    std::cout << json << "\n";
  } else {
    std::ofstream f(out_path, std::ios::trunc);
    if (!f) throw ContractError("eval: cannot open " + out_path);
    f << json << "\n";
    std::cout << "ap_iou=" << report.ap_iou << " ap_iou_f1=" << report.ap_iou_f1
              << " -> " << out_path << "\n";
  }
  return 0;
}

int cmd_infer(const std::string& checkpoint_path, const std::string& image_path,
              const std::string& out_dir, bool auto_pad) {
  CheckpointData ck = load_checkpoint(checkpoint_path);
  Model model = model_from_checkpoint(ck);

  Tensor image = read_ppm(image_path);
  const int orig_h = image.dim(1), orig_w = image.dim(2);
  int h = orig_h, w = orig_w;
  if (h % 32 != 0 || w % 32 != 0) {
    if (!auto_pad)
      throw ContractError("infer: image " + std::to_string(orig_h) + "x" +
                          std::to_string(orig_w) +
                          " is not divisible by 32; pass --auto-pad");
    h = (orig_h + 31) / 32 * 32;
    w = (orig_w + 31) / 32 * 32;
    std::vector<double> padded(static_cast<std::size_t>(3) * h * w);
    Rng rng(derive_seed(0x504144, static_cast<std::uint64_t>(orig_h) * 10007 + orig_w));
    fill_background(padded.data(), h, w, rng);
    const std::size_t dst_hw = static_cast<std::size_t>(h) * w;
    const std::size_t src_hw = static_cast<std::size_t>(orig_h) * orig_w;
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < orig_h; ++y)
        for (int x = 0; x < orig_w; ++x)
          padded[c * dst_hw + static_cast<std::size_t>(y) * w + x] =
              image.data()[c * src_hw + static_cast<std::size_t>(y) * orig_w + x];
    image = Tensor::from_data({3, h, w}, std::move(padded));
  }

  NoGradGuard guard;
  ForwardOutput fwd = model.forward(image);
  std::vector<Detection> dets = detections_from_prediction(fwd.stages.back(), h, w);

  std::filesystem::create_directories(out_dir);
  nlohmann::json sidecar;
  sidecar["detections"] = nlohmann::json::array();
  int index = 0;
  for (const Detection& det : dets) {
    // crop back to the original frame and export as 0/255 grayscale
    std::vector<std::uint8_t> pixels(static_cast<std::size_t>(orig_h) * orig_w, 0);
    for (int y = 0; y < orig_h; ++y)
      for (int x = 0; x < orig_w; ++x)
        pixels[static_cast<std::size_t>(y) * orig_w + x] =
            det.mask[static_cast<std::size_t>(y) * w + x] ? 255 : 0;
    const std::string mask_file = "mask_" + std::to_string(index) + ".png";
    write_png_gray(out_dir + "/" + mask_file, pixels, orig_w, orig_h);
    nlohmann::json d;
    d["class_id"] = det.class_id;
    d["score"] = det.score;
    d["attributes"] = det.attributes;
    d["mask_file"] = mask_file;
    sidecar["detections"].push_back(std::move(d));
    ++index;
  }
  std::ofstream f(out_dir + "/detections.json", std::ios::trunc);
  if (!f) throw ContractError("infer: cannot write sidecar in " + out_dir);
  f << sidecar.dump(2) << "\n";
  std::cout << dets.size() << " detections -> " << out_dir << "\n";
  return 0;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"layered-query instance segmentation and attribute recognition"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  std::string synth_out;
  int synth_scenes = 20, synth_size = 128, synth_instances = 0;
  std::uint64_t synth_seed = 1;
  double synth_mix = 0.5;
  synth->add_option("--out", synth_out, "output dataset file")->required();
  synth->add_option("--scenes", synth_scenes, "number of scenes");
  synth->add_option("--image-size", synth_size, "square image size (multiple of 32)");
  synth->add_option("--seed", synth_seed, "master seed");
  synth->add_option("--scale-mix", synth_mix, "fraction of small instances")
      ->check(CLI::Range(0.0, 1.0));
  synth->add_option("--instances", synth_instances,
                    "instances per scene (0 = varied 2..6)");

  auto* train = app.add_subcommand("train", "train a model");
  std::string train_config;
  std::string train_resume;
  std::vector<std::string> train_overrides;
  train->add_option("--config", train_config, "config file")->required();
  train->add_option("--resume", train_resume, "checkpoint to resume from");
  train->add_option("--set", train_overrides, "override config key=value");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  std::string eval_ck, eval_data, eval_out;
  double eval_f1 = -1.0;
  eval->add_option("--checkpoint", eval_ck, "checkpoint file")->required();
  eval->add_option("--dataset", eval_data, "dataset file")->required();
  eval->add_option("--out", eval_out, "report JSON path ('-' for stdout)");
  eval->add_option("--f1-threshold", eval_f1,
                   "fixed attribute-F1 threshold (default: sweep with IoU)");

  auto* infer = app.add_subcommand("infer", "run inference on one image");
  std::string infer_ck, infer_image, infer_out;
  bool infer_pad = false;
  infer->add_option("--checkpoint", infer_ck, "checkpoint file")->required();
  infer->add_option("--image", infer_image, "input image (binary PPM)")->required();
  infer->add_option("--out-dir", infer_out, "output directory")->required();
  infer->add_flag("--auto-pad", infer_pad, "pad image to a multiple of 32");

  try {
    app.parse(argc, argv);
    if (synth->parsed())
      return cmd_synth(synth_out, synth_scenes, synth_size, synth_seed, synth_mix,
                       synth_instances);
    if (train->parsed())
      return cmd_train(train_config,
                       train_resume.empty() ? std::nullopt
                                            : std::make_optional(train_resume),
                       train_overrides);
    if (eval->parsed()) return cmd_eval(eval_ck, eval_data, eval_out, eval_f1);
    if (infer->parsed()) return cmd_infer(infer_ck, infer_image, infer_out, infer_pad);
    return 2;
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what();
    if (e.offset() >= 0) std::cerr << " (offset " << e.offset() << ")";
    std::cerr << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace lqseg::cli
