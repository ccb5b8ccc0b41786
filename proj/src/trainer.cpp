#include "lqseg/trainer.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <thread>

#include "lqseg/checkpoint.hpp"
#include "lqseg/errors.hpp"

namespace lqseg {

AdamW::AdamW(const std::vector<std::pair<std::string, Tensor>>& params,
             double weight_decay, double beta1, double beta2, double eps)
    : weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& [name, t] : params) {
    names_.push_back(name);
    m_.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
  }
}

void AdamW::step(std::vector<std::pair<std::string, Tensor>>& params, double lr) {
  ++step_count_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i].second;
    if (!p.has_grad()) continue;
    const double* g = p.grad();
    double* m = m_[i].data();
    double* v = v_[i].data();
    double* w = p.data();
    for (std::int64_t j = 0; j < p.numel(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      w[j] -= lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * w[j]);
    }
  }
}

void AdamW::zero_grad(std::vector<std::pair<std::string, Tensor>>& params) {
  for (auto& [name, t] : params) t.zero_grad();
}

void AdamW::export_state(std::vector<std::pair<std::string, Tensor>>& out) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    out.emplace_back("opt.m." + names_[i],
                     Tensor::from_data({static_cast<int>(m_[i].size())}, m_[i]));
    out.emplace_back("opt.v." + names_[i],
                     Tensor::from_data({static_cast<int>(v_[i].size())}, v_[i]));
  }
}

void AdamW::import_state(const std::vector<std::pair<std::string, Tensor>>& tensors) {
  for (const auto& [name, t] : tensors) {
    const bool is_m = name.rfind("opt.m.", 0) == 0;
    const bool is_v = name.rfind("opt.v.", 0) == 0;
    if (!is_m && !is_v) continue;
    const std::string param = name.substr(6);
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == param) {
        auto& dst = is_m ? m_[i] : v_[i];
        if (static_cast<std::int64_t>(dst.size()) != t.numel())
          throw SchemaError("AdamW::import_state: size mismatch for " + name);
        dst.assign(t.data(), t.data() + t.numel());
      }
  }
}

void AdamW::round_state_to_f32() {
  for (auto* buf : {&m_, &v_})
    for (auto& vec : *buf)
      for (double& x : vec) x = static_cast<double>(static_cast<float>(x));
}

double clip_global_norm(std::vector<std::pair<std::string, Tensor>>& params,
                        double max_norm) {
  double sq = 0.0;
  for (auto& [name, t] : params) {
    if (!t.has_grad()) continue;
    const double* g = t.grad();
    for (std::int64_t i = 0; i < t.numel(); ++i) sq += g[i] * g[i];
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (auto& [name, t] : params) {
      if (!t.has_grad()) continue;
      double* g = t.grad_vec().data();
      for (std::int64_t i = 0; i < t.numel(); ++i) g[i] *= scale;
    }
  }
  return norm;
}

Scene lsj_apply(const Tensor& image, const SceneAnnotation& ann, double ratio,
                Rng& rng) {
  NoGradGuard guard;
  const int size = ann.height;  // square frames throughout
  const int scaled = std::max(1, static_cast<int>(std::lround(ratio * size)));

  Tensor resized = scaled == size ? image.detach_copy()
                                  : resize_bilinear(image, scaled, scaled);
  std::vector<std::vector<std::uint8_t>> masks;
  masks.reserve(ann.instances.size());
  for (const InstanceAnnotation& inst : ann.instances)
    masks.push_back(scaled == size
                        ? inst.mask
                        : resize_mask_nearest(inst.mask, size, size, scaled, scaled));

  Tensor out_img;
  std::vector<std::vector<std::uint8_t>> out_masks(masks.size());
  if (scaled == size) {
    out_img = std::move(resized);
    out_masks = std::move(masks);
  } else if (scaled > size) {
    const int span = scaled - size;
    const int ox = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(span) + 1));
    const int oy = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(span) + 1));
    std::vector<double> pixels(static_cast<std::size_t>(3) * size * size);
    const std::size_t src_hw = static_cast<std::size_t>(scaled) * scaled;
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
          pixels[(static_cast<std::size_t>(c) * size + y) * size + x] =
              resized.data()[c * src_hw + static_cast<std::size_t>(oy + y) * scaled +
                             (ox + x)];
    out_img = Tensor::from_data({3, size, size}, std::move(pixels));
    for (std::size_t i = 0; i < masks.size(); ++i) {
      out_masks[i].assign(static_cast<std::size_t>(size) * size, 0);
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
          out_masks[i][static_cast<std::size_t>(y) * size + x] =
              masks[i][static_cast<std::size_t>(oy + y) * scaled + (ox + x)];
    }
  } else {
    const int span = size - scaled;
    const int ox = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(span) + 1));
    const int oy = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(span) + 1));
    std::vector<double> pixels(static_cast<std::size_t>(3) * size * size);
    fill_background(pixels.data(), size, size, rng);
    const std::size_t dst_hw = static_cast<std::size_t>(size) * size;
    const std::size_t src_hw = static_cast<std::size_t>(scaled) * scaled;
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < scaled; ++y)
        for (int x = 0; x < scaled; ++x)
          pixels[c * dst_hw + static_cast<std::size_t>(oy + y) * size + (ox + x)] =
              resized.data()[c * src_hw + static_cast<std::size_t>(y) * scaled + x];
    out_img = Tensor::from_data({3, size, size}, std::move(pixels));
    for (std::size_t i = 0; i < masks.size(); ++i) {
      out_masks[i].assign(dst_hw, 0);
      for (int y = 0; y < scaled; ++y)
        for (int x = 0; x < scaled; ++x)
          out_masks[i][static_cast<std::size_t>(oy + y) * size + (ox + x)] =
              masks[i][static_cast<std::size_t>(y) * scaled + x];
    }
  }

  SceneAnnotation out_ann;
  out_ann.height = size;
  out_ann.width = size;
  for (std::size_t i = 0; i < out_masks.size(); ++i) {
    bool any = false;
    for (std::uint8_t v : out_masks[i])
      if (v) {
        any = true;
        break;
      }
    if (!any) continue;  // instance fully lost by the crop
    InstanceAnnotation inst;
    inst.class_id = ann.instances[i].class_id;
    inst.attributes = ann.instances[i].attributes;
    inst.layer_order = ann.instances[i].layer_order;
    inst.mask = std::move(out_masks[i]);
    out_ann.instances.push_back(std::move(inst));
  }
  return {std::move(out_img), std::move(out_ann)};
}

Scene lsj_augment(const Tensor& image, const SceneAnnotation& ann, Rng& rng) {
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double ratio = rng.uniform(0.5, 2.0);
    Scene out = lsj_apply(image, ann, ratio, rng);
    if (!out.second.instances.empty()) return out;
  }
  return {image.detach_copy(), ann};
}

double lr_schedule(int step, const TrainConfig& cfg) {
  if (step < cfg.warmup_iters)
    return cfg.base_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_iters);
  double lr = cfg.base_lr;
  if (step >= (2 * cfg.iterations) / 3) lr *= 0.1;
  if (step >= (8 * cfg.iterations) / 9) lr *= 0.1;
  return lr;
}

LossReport train_step(const std::vector<Scene>& batch, Model& model, AdamW& opt,
                      const TrainConfig& cfg, double lr) {
  if (batch.empty()) throw ContractError("train_step: empty batch");
  const LossWeights weights{cfg.lambda_cls, cfg.lambda_mask, cfg.lambda_attr};
  const MatchWeights match_weights{cfg.lambda_cls, cfg.lambda_mask, cfg.lambda_attr};

  const std::size_t n_stages = static_cast<std::size_t>(cfg.stages);
  LossReport agg;
  agg.cls.assign(n_stages, 0.0);
  agg.mask_focal.assign(n_stages, 0.0);
  agg.mask_dice.assign(n_stages, 0.0);
  agg.attr.assign(n_stages, 0.0);

  Tensor batch_total;
  for (const Scene& scene : batch) {
    ForwardOutput fwd = model.forward(scene.first);
    std::vector<Assignment> assignments;
    assignments.reserve(fwd.stages.size());
    for (const StagePrediction& sp : fwd.stages)
      assignments.push_back(hungarian(cost_matrix(sp, scene.second, match_weights)));
    LossReport r = total_loss(fwd.stages, scene.second, assignments, weights);
    for (std::size_t s = 0; s < n_stages; ++s) {
      agg.cls[s] += r.cls[s];
      agg.mask_focal[s] += r.mask_focal[s];
      agg.mask_dice[s] += r.mask_dice[s];
      agg.attr[s] += r.attr[s];
    }
    batch_total = batch_total.defined() ? add(batch_total, r.total) : r.total;
  }
  batch_total = mul_scalar(batch_total, 1.0 / static_cast<double>(batch.size()));

  for (std::size_t s = 0; s < n_stages; ++s) {
    agg.cls[s] /= static_cast<double>(batch.size());
    agg.mask_focal[s] /= static_cast<double>(batch.size());
    agg.mask_dice[s] /= static_cast<double>(batch.size());
    agg.attr[s] /= static_cast<double>(batch.size());
  }
  // logged total is recomposed from the logged components
  agg.total_value = 0.0;
  for (std::size_t s = 0; s < n_stages; ++s)
    agg.total_value += cfg.lambda_cls * agg.cls[s] +
                       cfg.lambda_mask * (agg.mask_focal[s] + agg.mask_dice[s]) +
                       cfg.lambda_attr * agg.attr[s];
  agg.total = batch_total;

  if (!std::isfinite(agg.total_value)) {
    std::ostringstream os;
    os << "train_step: non-finite loss;";
    for (std::size_t s = 0; s < n_stages; ++s)
      os << " stage" << s + 1 << "{cls=" << agg.cls[s] << ", focal=" << agg.mask_focal[s]
         << ", dice=" << agg.mask_dice[s] << ", attr=" << agg.attr[s] << "}";
    Graph::current().clear();
    throw NumericError(os.str());
  }

  opt.zero_grad(model.parameters());
  backward(batch_total);
  clip_global_norm(model.parameters(), cfg.clip_norm);
  opt.step(model.parameters(), lr);
  return agg;
}

nlohmann::json train_config_json(const TrainConfig& cfg) {
  nlohmann::json j;
  j["iterations"] = cfg.iterations;
  j["batch_size"] = cfg.batch_size;
  j["warmup_iters"] = cfg.warmup_iters;
  j["checkpoint_every"] = cfg.checkpoint_every;
  j["base_lr"] = cfg.base_lr;
  j["weight_decay"] = cfg.weight_decay;
  j["clip_norm"] = cfg.clip_norm;
  j["lambda_cls"] = cfg.lambda_cls;
  j["lambda_mask"] = cfg.lambda_mask;
  j["lambda_attr"] = cfg.lambda_attr;
  j["seed"] = cfg.seed;
  j["stages"] = cfg.stages;
  j["d"] = cfg.d;
  j["n_q"] = cfg.n_q;
  j["image_size"] = cfg.image_size;
  j["k_cls"] = kNumClasses;
  j["k_attr"] = kNumAttributes;
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  cfg.iterations = j.value("iterations", cfg.iterations);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.warmup_iters = j.value("warmup_iters", cfg.warmup_iters);
  cfg.checkpoint_every = j.value("checkpoint_every", cfg.checkpoint_every);
  cfg.base_lr = j.value("base_lr", cfg.base_lr);
  cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
  cfg.clip_norm = j.value("clip_norm", cfg.clip_norm);
  cfg.lambda_cls = j.value("lambda_cls", cfg.lambda_cls);
  cfg.lambda_mask = j.value("lambda_mask", cfg.lambda_mask);
  cfg.lambda_attr = j.value("lambda_attr", cfg.lambda_attr);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.stages = j.value("stages", cfg.stages);
  cfg.d = j.value("d", cfg.d);
  cfg.n_q = j.value("n_q", cfg.n_q);
  cfg.image_size = j.value("image_size", cfg.image_size);
  return cfg;
}

namespace {

void write_checkpoint_and_sync(const std::string& path, const TrainConfig& cfg,
                               int iteration, Model& model, AdamW& opt) {
  CheckpointData data;
  data.config = train_config_json(cfg);
  data.iteration = iteration;
  data.opt_step = opt.step_count();
  data.tensors = model.parameters();
  opt.export_state(data.tensors);
  save_checkpoint(path, data);
  // continue from exactly what a resume would load
  for (auto& [name, t] : model.parameters()) round_to_f32(t);
  opt.round_state_to_f32();
}

std::string checkpoint_name(const std::string& dir, int iteration, bool final) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06d", iteration);
  return dir + (final ? "/checkpoint_final.lqsg"
                      : "/checkpoint_" + std::string(buf) + ".lqsg");
}

}  // namespace

TrainOutcome run_training(const TrainConfig& cfg,
                          const std::optional<std::string>& resume_path,
                          std::ostream& log) {
  if (cfg.stages != 1 && cfg.stages != 3)
    throw ContractError("run_training: stages must be 1 or 3");
  if (cfg.iterations <= 0) throw ContractError("run_training: iterations must be > 0");
  std::vector<Scene> dataset = load_dataset(cfg.dataset_path);
  if (dataset.empty()) throw ContractError("run_training: dataset is empty");
  if (dataset[0].second.height != cfg.image_size)
    throw SchemaError("run_training: dataset image_size " +
                      std::to_string(dataset[0].second.height) + " != configured " +
                      std::to_string(cfg.image_size));

  std::filesystem::create_directories(cfg.out_dir);
  {  // fail before training if the checkpoint directory is not writable
    const std::string probe = cfg.out_dir + "/.write_probe";
    std::ofstream f(probe, std::ios::trunc);
    if (!f) throw ContractError("run_training: checkpoint path " + cfg.out_dir +
                                " is not writable");
    f.close();
    std::filesystem::remove(probe);
  }

  ModelConfig mc{cfg.d, cfg.n_q, cfg.stages, kNumClasses, kNumAttributes};
  Model model(mc, cfg.seed);
  AdamW opt(model.parameters(), cfg.weight_decay);

  int start_iter = 0;
  if (resume_path) {
    CheckpointData ck = load_checkpoint(*resume_path);
    const TrainConfig saved = train_config_from_json(ck.config);
    if (saved.d != cfg.d || saved.n_q != cfg.n_q || saved.stages != cfg.stages)
      throw SchemaError("run_training: resume config mismatch (d/n_q/stages)");
    std::size_t found = 0;
    for (auto& [name, param] : model.parameters())
      for (const auto& [ck_name, ck_tensor] : ck.tensors)
        if (ck_name == name) {
          if (ck_tensor.shape() != param.shape())
            throw SchemaError("run_training: checkpoint tensor " + name +
                              " has shape " + shape_str(ck_tensor.shape()) +
                              ", expected " + shape_str(param.shape()));
          std::copy(ck_tensor.data(), ck_tensor.data() + ck_tensor.numel(), param.data());
          ++found;
        }
    if (found != model.parameters().size())
      throw SchemaError("run_training: checkpoint is missing model tensors");
    opt.import_state(ck.tensors);
    opt.set_step_count(ck.opt_step);
    start_iter = static_cast<int>(ck.iteration);
  }

  TrainOutcome outcome;
  for (int iter = start_iter; iter < cfg.iterations; ++iter) {
    Rng it_rng(derive_seed(cfg.seed, 0x49544552AA000000ull + static_cast<std::uint64_t>(iter)));
    std::vector<Scene> batch;
    batch.reserve(static_cast<std::size_t>(cfg.batch_size));
    for (int b = 0; b < cfg.batch_size; ++b) {
      const std::size_t idx = it_rng.uniform_int(dataset.size());
      batch.push_back(lsj_augment(dataset[idx].first, dataset[idx].second, it_rng));
    }
    const double lr = lr_schedule(iter, cfg);
    LossReport report = train_step(batch, model, opt, cfg, lr);

    nlohmann::json line;
    line["iter"] = iter + 1;
    line["total"] = report.total_value;
    line["cls"] = report.cls;
    line["focal"] = report.mask_focal;
    line["dice"] = report.mask_dice;
    line["attr"] = report.attr;
    line["lr"] = lr;
    log << line.dump() << "\n";

    if ((iter + 1) % cfg.checkpoint_every == 0 && iter + 1 < cfg.iterations)
      write_checkpoint_and_sync(checkpoint_name(cfg.out_dir, iter + 1, false), cfg,
                                iter + 1, model, opt);
  }
  outcome.final_checkpoint = checkpoint_name(cfg.out_dir, cfg.iterations, true);
  write_checkpoint_and_sync(outcome.final_checkpoint, cfg, cfg.iterations, model, opt);
  outcome.iterations_run = cfg.iterations - start_iter;
  return outcome;
}

EvalReport evaluate_model(const Model& model, const std::vector<Scene>& scenes,
                          double fixed_f1_threshold, int threads) {
  if (scenes.empty()) throw ContractError("evaluate_model: empty dataset");
  const int n = static_cast<int>(scenes.size());
  int n_threads = threads > 0 ? threads
                              : static_cast<int>(std::thread::hardware_concurrency());
  if (n_threads < 1) n_threads = 1;
  n_threads = std::min(n_threads, n);

  std::vector<std::vector<Detection>> detections(static_cast<std::size_t>(n));
  std::vector<SceneAnnotation> gts(static_cast<std::size_t>(n));
  std::atomic<int> next{0};
  auto worker = [&] {
    NoGradGuard guard;  // per-thread graph stays empty
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= n) return;
      ForwardOutput fwd = model.forward(scenes[static_cast<std::size_t>(i)].first);
      detections[static_cast<std::size_t>(i)] = detections_from_prediction(
          fwd.stages.back(), scenes[static_cast<std::size_t>(i)].second.height,
          scenes[static_cast<std::size_t>(i)].second.width);
      gts[static_cast<std::size_t>(i)] = scenes[static_cast<std::size_t>(i)].second;
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  for (std::thread& t : pool) t.join();
  return evaluate_detections(detections, gts, fixed_f1_threshold);
}

}  // namespace lqseg
