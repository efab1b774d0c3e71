#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poselift/checkpoint.hpp"
#include "poselift/config.hpp"
#include "poselift/diffusion.hpp"
#include "poselift/dualstream.hpp"
#include "poselift/metrics.hpp"
#include "poselift/pose_io.hpp"
#include "poselift/rng.hpp"
#include "poselift/skeleton.hpp"

namespace poselift::harness {

using skeleton::JointSequence2D;
using skeleton::JointSequence3D;

// Poses are stored in millimetres; the network sees metres so that unit
// Gaussian diffusion noise is on the scale of the body.
inline constexpr double kModelUnitsPerMm = 1e-3;

struct Dataset {
  std::vector<JointSequence2D> x2d;
  std::vector<JointSequence3D> y3d;

  std::size_t size() const { return x2d.size(); }
};

inline Dataset make_dataset(const RunConfig& cfg, const std::string& split) {
  const std::size_t count = split == "train" ? cfg.train_sequences : cfg.test_sequences;
  const auto topo = cfg.topology();
  Dataset ds;
  for (std::size_t i = 0; i < count; ++i) {
    auto s = skeleton::synth_sequence(cfg.synth, topo, derive_seed(cfg.seed, "data." + split, i));
    ds.x2d.push_back(std::move(s.pose2d));
    ds.y3d.push_back(std::move(s.pose3d));
  }
  return ds;
}

inline void save_dataset(const std::string& dir, const std::string& split, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  io::write_pose_jsonl(dir + "/" + split + "_2d.jsonl", ds.x2d);
  io::write_pose_jsonl(dir + "/" + split + "_3d.jsonl", ds.y3d);
}

inline Dataset load_dataset(const std::string& dir, const std::string& split, std::size_t joints) {
  Dataset ds;
  ds.x2d = io::read_pose_jsonl<2>(dir + "/" + split + "_2d.jsonl", joints);
  ds.y3d = io::read_pose_jsonl<3>(dir + "/" + split + "_3d.jsonl", joints);
  if (ds.x2d.size() != ds.y3d.size())
    throw IoError(dir + ": " + split + " 2D and 3D files hold different sequence counts");
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds.x2d[i].frames() != ds.y3d[i].frames())
      throw IoError(dir + ": sequence " + std::to_string(i) + " frame counts differ");
  return ds;
}

inline void require_shape(const RunConfig& cfg, const Dataset& ds) {
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.x2d[i].joints() != cfg.backbone.joints || ds.x2d[i].frames() < 2)
      throw ConfigError("sequence " + std::to_string(i) + " is " +
                        std::to_string(ds.x2d[i].frames()) + "x" +
                        std::to_string(ds.x2d[i].joints()) + ", model expects " +
                        std::to_string(cfg.backbone.joints) + " joints and >= 2 frames");
  }
}

// Sequences must share a frame count to be batched.
template <class T>
void stack_sample(const JointSequence2D& x, const JointSequence3D& y, std::size_t b,
                  Tensor<T>& x2d, Tensor<T>& y0) {
  const std::size_t nx = x.tensor().size(), ny = y.tensor().size();
  if (nx * (b + 1) > x2d.size() || ny * (b + 1) > y0.size())
    throw DimensionError("training sequences must share one frame count");
  for (std::size_t i = 0; i < nx; ++i) x2d[b * nx + i] = static_cast<T>(x.tensor()[i]);
  for (std::size_t i = 0; i < ny; ++i)
    y0[b * ny + i] = static_cast<T>(y.tensor()[i] * kModelUnitsPerMm);
}

// Decoupled weight decay (AdamW); decay touches weight matrices only.
template <class T>
class AdamW {
 public:
  explicit AdamW(const numerics::ParamStore<T>& store) {
    for (const auto& p : store.params()) {
      m_.emplace_back(p.value.shape());
      v_.emplace_back(p.value.shape());
    }
  }

  void step(numerics::ParamStore<T>& store, double lr, const RunConfig& cfg) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t_));
    auto& params = store.params();
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& p = params[k];
      const bool decay = p.value.rank() == 2 && p.name.rfind("pos.", 0) != 0;
      const T b1 = T(cfg.beta1), b2 = T(cfg.beta2);
      const T step = T(lr / c1), root_c2 = T(std::sqrt(c2)), eps = T(cfg.adam_eps);
      const T shrink = decay ? T(1.0 - lr * cfg.weight_decay) : T(1);
      auto w = numerics::detail::arr(p.value);
      auto g = numerics::detail::arr(p.grad);
      auto m = numerics::detail::arr(m_[k]);
      auto v = numerics::detail::arr(v_[k]);
      m = b1 * m + (T(1) - b1) * g;
      v = b2 * v + (T(1) - b2) * g * g;
      w = shrink * w - step * m / (v.sqrt() / root_c2 + eps);
    }
  }

 private:
  std::vector<Tensor<T>> m_, v_;
  std::size_t t_ = 0;
};

struct TrainResult {
  std::vector<double> epoch_loss;
  Checkpoint checkpoint;
};

using EpochCallback = std::function<void(std::size_t epoch, double loss, double seconds)>;

inline std::string loss_log_csv(const std::vector<double>& losses, const RunConfig& cfg) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,lr,loss\n";
  for (std::size_t e = 0; e < losses.size(); ++e)
    os << e + 1 << ',' << cfg.lr * std::pow(cfg.lr_decay, static_cast<double>(e)) << ','
       << losses[e] << '\n';
  return os.str();
}

namespace detail {

template <class T>
void dump_batch(const std::string& path, const diffusion::TrainBatch<T>& batch,
                const std::vector<std::size_t>& indices, std::size_t epoch, std::size_t step) {
  nlohmann::json j;
  j["epoch"] = epoch + 1;
  j["step"] = step;
  j["sequences"] = indices;
  j["diffusion_steps"] = batch.steps;
  j["x2d_shape"] = batch.x2d.shape();
  j["x2d"] = std::vector<double>(batch.x2d.storage().begin(), batch.x2d.storage().end());
  j["y0"] = std::vector<double>(batch.y0.storage().begin(), batch.y0.storage().end());
  j["eps"] = std::vector<double>(batch.eps.storage().begin(), batch.eps.storage().end());
  std::ofstream(path) << j.dump() << '\n';
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << text;
}

}  // namespace detail

// Optimizes the x0-prediction loss. With a non-empty out_dir, writes
// config.txt, loss_log.csv and checkpoint.bin there.
template <class T>
TrainResult train(const RunConfig& cfg, const Dataset& data, const std::string& out_dir = "",
                  const EpochCallback& on_epoch = {}) {
  cfg.validate();
  require_shape(cfg, data);
  const auto topo = cfg.topology();
  dualstream::Backbone<T> model(cfg.backbone, topo);
  model.init(derive_seed(cfg.seed, "model"));
  const auto sched = diffusion::make_schedule(cfg.diffusion_t, cfg.schedule);
  AdamW<T> opt(model.params());
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    detail::write_text(out_dir + "/config.txt", to_text(cfg));
  }

  const std::size_t n = data.size();
  const std::size_t frames = data.x2d.front().frames(), joints = cfg.backbone.joints;
  TrainResult result;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const double lr = cfg.lr * std::pow(cfg.lr_decay, static_cast<double>(epoch));
    Rng rng = make_rng(cfg.seed, "epoch", epoch);
    Rng dropout_rng = make_rng(cfg.seed, "dropout", epoch);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::bernoulli_distribution flip(cfg.hflip_prob);

    dualstream::ForwardContext<T> ctx;
    ctx.training = true;
    ctx.rng = &dropout_rng;
    ctx.dropout = T(cfg.backbone.dropout);

    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t first = 0; first < n; first += cfg.batch_size) {
      const std::size_t bsz = std::min(cfg.batch_size, n - first);
      std::vector<std::size_t> indices(order.begin() + first, order.begin() + first + bsz);
      diffusion::TrainBatch<T> batch;
      batch.x2d = Tensor<T>({bsz, frames, joints, 2});
      batch.y0 = Tensor<T>({bsz, frames, joints, 3});
      for (std::size_t b = 0; b < bsz; ++b) {
        const auto& x = data.x2d[indices[b]];
        const auto& y = data.y3d[indices[b]];
        if (flip(rng)) {
          const auto [fx, fy] = skeleton::hflip(x, y, topo);
          stack_sample(fx, fy, b, batch.x2d, batch.y0);
        } else {
          stack_sample(x, y, b, batch.x2d, batch.y0);
        }
      }
      diffusion::draw_noise(batch, sched, rng);

      model.params().zero_grad();
      numerics::Tape<T> tape;
      numerics::Binding<T> bind(tape, model.params());
      numerics::Var<T> loss = diffusion::training_loss(bind, model, batch, sched, ctx);
      const double value = static_cast<double>(loss.value()[0]);
      if (!std::isfinite(value)) {
        std::string where = "training loss is not finite at epoch " + std::to_string(epoch + 1) +
                            ", step " + std::to_string(steps);
        if (!out_dir.empty()) {
          const std::string dump = out_dir + "/nonfinite_batch.json";
          detail::dump_batch(dump, batch, indices, epoch, steps);
          where += "; batch written to " + dump;
        }
        throw NumericError(where);
      }
      tape.backward(loss);
      bind.accumulate_into(model.params());
      opt.step(model.params(), lr, cfg);
      loss_sum += value;
      ++steps;
    }
    const double epoch_loss = loss_sum / static_cast<double>(steps);
    result.epoch_loss.push_back(epoch_loss);
    if (on_epoch) {
      const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - start;
      on_epoch(epoch + 1, epoch_loss, dt.count());
    }
  }
  result.checkpoint = make_checkpoint(cfg, model.params());
  if (!out_dir.empty()) {
    detail::write_text(out_dir + "/loss_log.csv", loss_log_csv(result.epoch_loss, cfg));
    save_checkpoint(out_dir + "/checkpoint.bin", result.checkpoint);
  }
  return result;
}

inline TrainResult train(const RunConfig& cfg, const Dataset& data, const std::string& out_dir = "",
                         const EpochCallback& on_epoch = {}) {
  return cfg.precision == Precision::f32 ? train<float>(cfg, data, out_dir, on_epoch)
                                         : train<double>(cfg, data, out_dir, on_epoch);
}

template <class T>
dualstream::Backbone<T> load_model(const Checkpoint& ck) {
  dualstream::Backbone<T> model(ck.config.backbone, ck.config.topology());
  restore_params(ck, model.params());
  return model;
}

// Denoiser for sequence `index` of a dataset; sampling always runs in double.
using DenoiserFactory = std::function<diffusion::Denoiser<double>(std::size_t index)>;

template <class T>
DenoiserFactory model_denoisers(const dualstream::Backbone<T>& model,
                                const std::vector<JointSequence2D>& x2d) {
  return [&model, &x2d](std::size_t index) -> diffusion::Denoiser<double> {
    const auto& t = x2d.at(index).tensor();
    Tensor<T> x = t.template cast<T>().reshaped({1, t.dim(0), t.dim(1), 2});
    return [&model, x = std::move(x)](const Tensor<double>& y, std::size_t step) {
      Tensor<T> yt = y.template cast<T>();
      return dualstream::backbone_forward(model, x, yt, {step}).template cast<double>();
    };
  };
}

// Oracle pathway: ignores the noisy state and returns the ground truth.
inline DenoiserFactory ground_truth_denoisers(const std::vector<JointSequence3D>& y3d) {
  return [&y3d](std::size_t index) -> diffusion::Denoiser<double> {
    const auto& t = y3d.at(index).tensor();
    Tensor<double> y0 = t.reshaped({1, t.dim(0), t.dim(1), 3});
    for (auto& v : y0.storage()) v *= kModelUnitsPerMm;
    return [y0 = std::move(y0)](const Tensor<double>&, std::size_t) { return y0; };
  };
}

struct SamplingSetup {
  diffusion::DiffusionSchedule schedule;
  diffusion::TauSchedule tau;
  diffusion::CoeffMode mode = diffusion::CoeffMode::standard;
  std::uint64_t seed = 0;
};

inline SamplingSetup sampling_setup(const RunConfig& cfg, std::size_t steps, std::uint64_t seed) {
  SamplingSetup s;
  s.schedule = diffusion::make_schedule(cfg.diffusion_t, cfg.schedule);
  s.tau = diffusion::make_tau(cfg.diffusion_t, steps);
  s.mode = cfg.coeff_mode;
  s.seed = seed;
  return s;
}

// One sample() per sequence with its own seed stream; returns millimetres.
inline std::vector<JointSequence3D> predict(const DenoiserFactory& denoisers,
                                            const std::vector<JointSequence2D>& x2d,
                                            const SamplingSetup& setup) {
  std::vector<JointSequence3D> out;
  for (std::size_t i = 0; i < x2d.size(); ++i) {
    const Shape shape{1, x2d[i].frames(), x2d[i].joints(), 3};
    Tensor<double> y = diffusion::sample(denoisers(i), shape, setup.tau,
                                         derive_seed(setup.seed, "eval", i), setup.schedule,
                                         setup.mode);
    if (!y.all_finite())
      throw NumericError("non-finite prediction for sequence " + std::to_string(i));
    for (auto& v : y.storage()) v /= kModelUnitsPerMm;
    out.emplace_back(y.reshaped({shape[1], shape[2], 3}));
  }
  return out;
}

inline metrics::MetricsReport evaluate_with(const DenoiserFactory& denoisers,
                                            const std::vector<JointSequence2D>& x2d,
                                            const std::vector<JointSequence3D>& y3d,
                                            const SamplingSetup& setup) {
  return metrics::evaluate(predict(denoisers, x2d, setup), y3d);
}

template <class T>
metrics::MetricsReport evaluate(const dualstream::Backbone<T>& model, const Dataset& data,
                                const SamplingSetup& setup) {
  return evaluate_with(model_denoisers(model, data.x2d), data.x2d, data.y3d, setup);
}

// Dispatches on the checkpoint's precision.
inline metrics::MetricsReport evaluate(const Checkpoint& ck, const Dataset& data,
                                       std::size_t steps, std::uint64_t seed) {
  require_shape(ck.config, data);
  const auto setup = sampling_setup(ck.config, steps, seed);
  if (ck.config.precision == Precision::f32) return evaluate(load_model<float>(ck), data, setup);
  return evaluate(load_model<double>(ck), data, setup);
}

inline std::vector<double> default_sigmas() { return {0.0, 0.001, 0.005, 0.01, 0.05, 0.1, 0.5}; }

struct SweepResult {
  std::vector<std::pair<double, metrics::MetricsReport>> rows;

  std::string csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "sigma," << metrics::MetricsReport::csv_header() << '\n';
    for (const auto& [sigma, r] : rows) os << sigma << ',' << r.csv_row() << '\n';
    return os.str();
  }
};

inline std::vector<double> sweep_sigmas(std::vector<double> sigmas) {
  if (sigmas.empty() || sigmas.front() != 0.0) sigmas.insert(sigmas.begin(), 0.0);
  for (std::size_t i = 1; i < sigmas.size(); ++i)
    if (!(sigmas[i] > sigmas[i - 1]))
      throw ConfigError("noise sigmas must be non-negative and strictly increasing");
  return sigmas;
}

// Evaluates with Gaussian noise of each sigma added to the 2D inputs.
template <class T>
SweepResult noise_sweep(const dualstream::Backbone<T>& model, const Dataset& data,
                        const std::vector<double>& sigmas, const SamplingSetup& setup) {
  SweepResult res;
  for (double sigma : sweep_sigmas(sigmas)) {
    std::vector<JointSequence2D> noisy;
    for (std::size_t i = 0; i < data.size(); ++i)
      noisy.push_back(skeleton::add_noise(data.x2d[i], sigma, derive_seed(setup.seed, "sweep", i)));
    res.rows.emplace_back(sigma, evaluate_with(model_denoisers(model, noisy), noisy, data.y3d, setup));
  }
  return res;
}

inline SweepResult noise_sweep(const Checkpoint& ck, const Dataset& data,
                               const std::vector<double>& sigmas, std::size_t steps,
                               std::uint64_t seed) {
  require_shape(ck.config, data);
  const auto setup = sampling_setup(ck.config, steps, seed);
  if (ck.config.precision == Precision::f32)
    return noise_sweep(load_model<float>(ck), data, sigmas, setup);
  return noise_sweep(load_model<double>(ck), data, sigmas, setup);
}

// "Copy 2D, predict z = 0": back-projects each 2D joint at the root depth.
inline JointSequence3D zero_depth_prediction(const JointSequence2D& x2d, const skeleton::Camera& cam) {
  JointSequence3D out(x2d.frames(), x2d.joints());
  const double k = cam.kind == skeleton::ProjectionKind::pinhole ? cam.depth_offset / cam.focal
                                                                 : 1.0 / cam.focal;
  for (std::size_t f = 0; f < x2d.frames(); ++f)
    for (std::size_t j = 0; j < x2d.joints(); ++j) {
      out.at(f, j, 0) = k * x2d.at(f, j, 0);
      out.at(f, j, 1) = k * x2d.at(f, j, 1);
    }
  return out;
}

inline metrics::MetricsReport zero_depth_baseline(const Dataset& data, const skeleton::Camera& cam) {
  std::vector<JointSequence3D> pred;
  for (const auto& x : data.x2d) pred.push_back(zero_depth_prediction(x, cam));
  return metrics::evaluate(pred, data.y3d);
}

struct BenchResult {
  std::size_t window = 0;
  std::size_t repeats = 0;
  std::size_t sampling_steps = 0;
  double median_fps = 0.0;
  double min_fps = 0.0;
  double max_fps = 0.0;
  double median_latency_ms = 0.0;

  nlohmann::json to_json() const {
    return {{"window", window},
            {"repeats", repeats},
            {"sampling_steps", sampling_steps},
            {"median_fps", median_fps},
            {"min_fps", min_fps},
            {"max_fps", max_fps},
            {"median_latency_ms", median_latency_ms},
            {"note", "hardware dependent; not compared against any reference"}};
  }
};

// Wall-clock of full 2D -> 3D inference over one window, repeated.
template <class T>
BenchResult bench(const dualstream::Backbone<T>& model, const RunConfig& cfg, std::size_t window,
                  std::size_t repeats, std::size_t steps) {
  if (window < 2) throw ConfigError("bench window must be >= 2 frames");
  if (repeats < 1) throw ConfigError("bench repeats must be >= 1");
  skeleton::SynthConfig synth = cfg.synth;
  synth.frames = window;
  const auto s = skeleton::synth_sequence(synth, cfg.topology(), derive_seed(cfg.seed, "bench"));
  const std::vector<JointSequence2D> x2d{s.pose2d};
  const auto setup = sampling_setup(cfg, steps, cfg.seed);
  const auto denoisers = model_denoisers(model, x2d);
  std::vector<double> seconds;
  for (std::size_t r = 0; r < repeats; ++r) {
    const auto start = std::chrono::steady_clock::now();
    predict(denoisers, x2d, setup);
    const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - start;
    seconds.push_back(dt.count());
  }
  std::sort(seconds.begin(), seconds.end());
  const double median = repeats % 2 ? seconds[repeats / 2]
                                    : 0.5 * (seconds[repeats / 2 - 1] + seconds[repeats / 2]);
  BenchResult b;
  b.window = window;
  b.repeats = repeats;
  b.sampling_steps = steps;
  b.median_fps = static_cast<double>(window) / median;
  b.min_fps = static_cast<double>(window) / seconds.back();
  b.max_fps = static_cast<double>(window) / seconds.front();
  b.median_latency_ms = 1e3 * median;
  return b;
}

inline BenchResult bench(const Checkpoint& ck, std::size_t window, std::size_t repeats,
                         std::size_t steps) {
  if (ck.config.precision == Precision::f32)
    return bench(load_model<float>(ck), ck.config, window, repeats, steps);
  return bench(load_model<double>(ck), ck.config, window, repeats, steps);
}

struct ParamReport {
  std::size_t total = 0;
  std::map<std::string, std::size_t> by_component;  // embed, pos, blocks.i, head
  std::map<std::string, std::size_t> by_module;     // block modules summed over depth

  nlohmann::json to_json() const {
    return {{"total", total}, {"by_component", by_component}, {"by_module", by_module}};
  }
};

inline ParamReport param_count(const dualstream::BackboneConfig& bcfg,
                               const skeleton::SkeletonTopology& topo) {
  dualstream::Backbone<float> model(bcfg, topo);
  ParamReport r;
  for (const auto& p : model.params().params()) {
    const std::size_t n = p.value.size();
    r.total += n;
    const auto dot = p.name.find('.');
    const std::string head = p.name.substr(0, dot);
    if (head == "blocks") {
      const auto dot2 = p.name.find('.', dot + 1);
      const auto dot3 = p.name.find('.', dot2 + 1);
      r.by_component[p.name.substr(0, dot2)] += n;
      r.by_module[p.name.substr(dot2 + 1, dot3 - dot2 - 1)] += n;
    } else {
      r.by_component[head] += n;
    }
  }
  return r;
}

inline ParamReport param_count(const RunConfig& cfg) {
  cfg.validate();
  return param_count(cfg.backbone, cfg.topology());
}

}  // namespace poselift::harness
