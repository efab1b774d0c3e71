// Prints one PASS/FAIL line per acceptance criterion; exits non-zero on any FAIL.
#include <CLI11.hpp>
#include <Eigen/Dense>
#include <Eigen/Geometry>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "poselift.hpp"

using namespace poselift;
using namespace poselift::harness;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kGradTol = 1e-3;
constexpr double kGradSeconds = 60.0;
constexpr double kOracleTol = 1e-9;
constexpr double kOracleSeconds = 5.0;
constexpr double kMomentRel = 0.02;
constexpr double kMomentSeconds = 10.0;
constexpr double kExpmTol = 1e-3;
constexpr double kHalvingBand = 0.2;
constexpr double kSimilarityTol = 1e-6;
constexpr double kLearningGain = 0.30;
constexpr double kDeskCpuSeconds = 15.0 * 60.0;
constexpr double kAblationSlack = 1.02;
constexpr double kSweepJitter = 0.05;
constexpr double kReferenceParams = 7.50e6;
constexpr double kParamBand = 0.60;
constexpr std::size_t kMicroParams = 2027;

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

Tensor<double> gaussian(const Shape& shape, std::uint64_t seed, double scale = 1.0) {
  Rng rng = make_rng(seed, "acceptance");
  std::normal_distribution<double> n(0.0, scale);
  Tensor<double> t(shape);
  for (auto& v : t.storage()) v = n(rng);
  return t;
}

Mat to_mat(const Tensor<double>& t) {
  return Eigen::Map<const Mat>(t.data().data(), static_cast<Eigen::Index>(t.dim(0)),
                               static_cast<Eigen::Index>(t.dim(1)));
}

Tensor<double> to_tensor(const Mat& m) {
  Tensor<double> t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  Eigen::Map<Mat>(t.data().data(), m.rows(), m.cols()) = m;
  return t;
}

const diffusion::DiffusionSchedule& cosine() {
  static const auto s = diffusion::make_schedule(1000, diffusion::ScheduleKind::cosine);
  return s;
}

dualstream::BackboneConfig micro_backbone() {
  dualstream::BackboneConfig c;
  c.d = 8;
  c.d_prime = 16;
  c.depth = 1;
  c.heads = 2;
  c.k = 2;
  c.mlp_ratio = 2;
  c.dropout = 0.0;
  c.frames = 4;
  c.joints = 5;
  return c;
}

Outcome gradient_check() {
  const auto start = std::chrono::steady_clock::now();
  dualstream::Backbone<double> model(micro_backbone(), skeleton::micro_topology());
  model.init(11);
  diffusion::TrainBatch<double> batch;
  batch.x2d = gaussian({2, 4, 5, 2}, 12, 0.3);
  batch.y0 = gaussian({2, 4, 5, 3}, 13, 0.5);
  Rng rng = make_rng(14, "noise");
  diffusion::draw_noise(batch, cosine(), rng);
  numerics::LossFn<double> loss = [&](numerics::Binding<double>& bind) {
    return diffusion::training_loss(bind, model, batch, cosine(), dualstream::ForwardContext<double>{});
  };
  numerics::GradCheckOptions opts;
  opts.eps = 1e-4;
  const double err = numerics::grad_check(loss, model.params(), opts);
  const double secs = seconds_since(start);
  return {err < kGradTol && secs < kGradSeconds,
          "max rel err " + fmt(err) + " over " + std::to_string(model.params().total_size()) +
              " params, " + fmt(secs, 3) + " s"};
}

Outcome ddim_oracle() {
  const auto start = std::chrono::steady_clock::now();
  const auto y0 = gaussian({1, 27, 17, 3}, 21, 0.3);
  const diffusion::Denoiser<double> oracle = [&](const Tensor<double>&, std::size_t) { return y0; };
  double worst = 0.0;
  for (std::size_t steps : {1, 2, 5, 10})
    worst = std::max(worst, max_abs_diff(diffusion::sample(oracle, y0.shape(), diffusion::make_tau(1000, steps),
                                                           22, cosine()),
                                         y0));
  const double secs = seconds_since(start);
  return {worst < kOracleTol && secs < kOracleSeconds,
          "max abs err " + fmt(worst) + " over S in {1,2,5,10}, " + fmt(secs, 3) + " s"};
}

// |y0| >= 1.5 per coordinate puts the 2% relative mean bound at least four
// Monte Carlo standard errors out.
Outcome forward_marginal() {
  const auto start = std::chrono::steady_clock::now();
  const auto raw = gaussian({51}, 31);
  Tensor<double> y0({51});
  for (std::size_t i = 0; i < y0.size(); ++i)
    y0[i] = std::copysign(1.5 + 0.5 * std::abs(raw[i]), raw[i]);
  const std::size_t t = 500;
  const double a = std::sqrt(cosine().alpha_bar[t]), b = std::sqrt(1.0 - cosine().alpha_bar[t]);
  Rng rng = make_rng(32, "moments");
  std::normal_distribution<double> normal(0.0, 1.0);
  const int draws = 20000;
  std::vector<double> sum(y0.size(), 0.0), sq(y0.size(), 0.0);
  Tensor<double> eps(y0.shape());
  for (int n = 0; n < draws; ++n) {
    for (auto& v : eps.storage()) v = normal(rng);
    const auto yt = diffusion::q_sample(y0, t, eps, cosine());
    for (std::size_t i = 0; i < y0.size(); ++i) {
      sum[i] += yt[i];
      sq[i] += yt[i] * yt[i];
    }
  }
  double worst_mean = 0.0, worst_sd = 0.0;
  for (std::size_t i = 0; i < y0.size(); ++i) {
    const double mean = sum[i] / draws;
    const double sd = std::sqrt(sq[i] / draws - mean * mean);
    const double target = a * y0[i];
    worst_mean = std::max(worst_mean, std::abs(mean - target) / std::abs(target));
    worst_sd = std::max(worst_sd, std::abs(sd - b) / b);
  }
  const double secs = seconds_since(start);
  return {worst_mean <= kMomentRel && worst_sd <= kMomentRel && secs < kMomentSeconds,
          "worst mean dev " + fmt(100 * worst_mean, 3) + "%, worst std dev " + fmt(100 * worst_sd, 3) +
              "% over 51 coords at t=500, " + fmt(secs, 3) + " s"};
}

// exp(m) y by a 20-term Taylor series.
Mat expm_apply(const Mat& m, const Mat& y) {
  Mat term = y, sum = y;
  for (int k = 1; k < 20; ++k) {
    term = m * term / static_cast<double>(k);
    sum += term;
  }
  return sum;
}

Outcome pde_vs_expm() {
  Tensor<double> a = gaussian({5, 5}, 41);
  for (std::size_t i = 0; i < 5; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 5; ++j) s += (a.at(i, j) = std::exp(a.at(i, j)));
    for (std::size_t j = 0; j < 5; ++j) a.at(i, j) /= s;
  }
  const auto y = gaussian({5, 3}, 42);
  auto fixed = [&](const Tensor<double>&) { return a; };
  const auto exact = to_tensor(expm_apply(to_mat(a) - Mat::Identity(5, 5), to_mat(y)));
  const double e1000 = max_abs_diff(pde::pde_integrate<double>(y, fixed, 1.0, 1000), exact);
  const double e2000 = max_abs_diff(pde::pde_integrate<double>(y, fixed, 1.0, 2000), exact);
  const double ratio = e1000 / e2000;
  return {e1000 < kExpmTol && std::abs(ratio - 2.0) <= 2.0 * kHalvingBand,
          "err(1000) " + fmt(e1000) + ", err(1000)/err(2000) " + fmt(ratio)};
}

// Path graph with Metropolis weights: symmetric and row-stochastic.
Tensor<double> path_graph_metropolis(std::size_t n) {
  Mat w = Mat::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  auto degree = [n](std::size_t i) { return (i == 0 || i + 1 == n) ? 1.0 : 2.0; };
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    w(r, r + 1) = w(r + 1, r) = 1.0 / (1.0 + std::max(degree(i), degree(i + 1)));
  }
  for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, i) = 1.0 - w.row(i).sum();
  return to_tensor(w);
}

Outcome deceleration() {
  const std::size_t n = 10;
  const auto a = to_tensor(0.5 * (Mat::Identity(n, n) + to_mat(path_graph_metropolis(n))));
  std::size_t held = 0;
  double min_ratio = std::numeric_limits<double>::infinity();
  for (std::uint64_t init = 0; init < 100; ++init) {
    Tensor<double> half = gaussian({n, 4}, 500 + init), full = half;
    for (int k = 0; k < 10; ++k) {
      half = pde::pde_step(half, a, 0.5);
      full = pde::pde_step(full, a, 1.0);
    }
    const double vh = pde::token_variance(half), vf = pde::token_variance(full);
    if (vh > vf) ++held;
    min_ratio = std::min(min_ratio, vh / vf);
  }
  return {held == 100, std::to_string(held) + "/100 inits with var(h=0.5) > var(h=1), min ratio " +
                           fmt(min_ratio)};
}

std::vector<double> brute_errors(const JointSequence3D& pred, const JointSequence3D& gt) {
  std::vector<double> err;
  for (std::size_t f = 0; f < gt.frames(); ++f)
    for (std::size_t j = 0; j < gt.joints(); ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < 3; ++c) {
        const double d = (pred.at(f, j, c) - pred.at(f, 0, c)) - (gt.at(f, j, c) - gt.at(f, 0, c));
        s += d * d;
      }
      err.push_back(std::sqrt(s));
    }
  return err;
}

double brute_pck(const std::vector<double>& err, double threshold) {
  std::size_t hits = 0;
  for (double e : err) hits += e < threshold ? 1 : 0;
  return 100.0 * static_cast<double>(hits) / static_cast<double>(err.size());
}

Outcome metric_oracles() {
  std::size_t exact = 0, ordered = 0;
  double worst_similarity = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    JointSequence3D gt(3, 17), pred(3, 17);
    gt.tensor() = gaussian({3, 17, 3}, 600 + seed, 300.0);
    pred.tensor() = gt.tensor();
    const auto noise = gaussian({3, 17, 3}, 700 + seed, 20.0 + static_cast<double>(seed));
    for (std::size_t i = 0; i < noise.size(); ++i) pred.tensor()[i] += noise[i];

    const auto err = brute_errors(pred, gt);
    double sum = 0.0, auc = 0.0;
    for (double e : err) sum += e;
    for (int k = 1; k <= 30; ++k) auc += brute_pck(err, 5.0 * k);
    const auto r = metrics::evaluate(pred, gt);
    if (r.mpjpe == sum / static_cast<double>(err.size()) && r.pck150 == brute_pck(err, 150.0) &&
        r.auc == auc / 30.0)
      ++exact;
    if (r.p_mpjpe <= r.mpjpe) ++ordered;

    const auto q = gaussian({4}, 800 + seed);
    const Eigen::Matrix3d rot = Eigen::Quaterniond(q[0], q[1], q[2], q[3]).normalized().toRotationMatrix();
    const double scale = 0.5 + 0.015 * static_cast<double>(seed);
    const auto shift = gaussian({3}, 900 + seed, 500.0);
    JointSequence3D moved = gt;
    for (std::size_t f = 0; f < 3; ++f)
      for (std::size_t j = 0; j < 17; ++j) {
        const Eigen::Vector3d x(gt.at(f, j, 0), gt.at(f, j, 1), gt.at(f, j, 2));
        const Eigen::Vector3d v = scale * rot * x + Eigen::Vector3d(shift[0], shift[1], shift[2]);
        for (int c = 0; c < 3; ++c) moved.at(f, j, static_cast<std::size_t>(c)) = v[c];
      }
    worst_similarity = std::max(worst_similarity, metrics::p_mpjpe(moved, gt));
  }
  return {exact == 100 && ordered == 100 && worst_similarity < kSimilarityTol,
          "exact " + std::to_string(exact) + "/100, p_mpjpe<=mpjpe " + std::to_string(ordered) +
              "/100, similarity copy p_mpjpe " + fmt(worst_similarity)};
}

// Trained desk-scale runs, shared across criteria and cached per variant.
class DeskRuns {
 public:
  explicit DeskRuns(fs::path work) : work_(std::move(work)) {}

  struct Run {
    RunConfig cfg;
    Checkpoint checkpoint;
    metrics::MetricsReport test;
    double cpu_seconds = 0.0;
  };

  const Dataset& test_data() {
    if (!test_) test_ = make_dataset(default_config(), "test");
    return *test_;
  }

  double baseline_mpjpe() {
    const RunConfig cfg = default_config();
    return zero_depth_baseline(test_data(), cfg.synth.camera).mpjpe;
  }

  const Run& get(const std::string& name, const std::map<std::string, std::string>& overrides) {
    if (auto it = runs_.find(name); it != runs_.end()) return it->second;
    Run run;
    run.cfg = default_config();
    for (const auto& [k, v] : overrides) set_value(run.cfg, k, v);
    run.cfg.sync();
    if (!train_) train_ = make_dataset(default_config(), "train");
    const fs::path dir = work_ / name;
    fs::create_directories(dir);
    std::cerr << "training " << name << " ..." << std::endl;
    const double cpu0 = cpu_seconds();
    auto res = train(run.cfg, *train_, dir.string());
    run.test = evaluate(res.checkpoint, test_data(), run.cfg.sampling_steps, run.cfg.seed);
    run.cpu_seconds = cpu_seconds() - cpu0;
    run.checkpoint = std::move(res.checkpoint);
    std::ofstream(dir / "metrics.json") << run.test.to_json().dump(2) << '\n';
    std::cerr << name << ": test MPJPE " << run.test.mpjpe << " mm, " << run.cpu_seconds << " s CPU"
              << std::endl;
    return runs_.emplace(name, std::move(run)).first->second;
  }

  const Run& desk() { return get("desk", {}); }

  const fs::path& work() const { return work_; }

 private:
  fs::path work_;
  std::optional<Dataset> train_, test_;
  std::map<std::string, Run> runs_;
};

Outcome desk_learning(DeskRuns& runs) {
  const auto& run = runs.desk();
  const double base = runs.baseline_mpjpe();
  const double gain = 1.0 - run.test.mpjpe / base;
  return {gain >= kLearningGain && run.cpu_seconds <= kDeskCpuSeconds,
          "test MPJPE " + fmt(run.test.mpjpe) + " mm vs zero-depth " + fmt(base) + " mm (" +
              fmt(100 * gain, 3) + "% below, need " + fmt(100 * kLearningGain, 3) + "%), train+eval " +
              fmt(run.cpu_seconds, 4) + " s CPU"};
}

Outcome ablations(DeskRuns& runs) {
  const auto& pde_on = runs.get("depth8_pde", {{"backbone.depth", "8"}});
  const auto& pde_off = runs.get("depth8_nopde", {{"backbone.depth", "8"}, {"pde.enabled", "false"}});
  const auto& parallel = runs.desk();
  const auto& transformer = runs.get("transformer", {{"backbone.mode", "transformer"}});
  const bool a = pde_on.test.mpjpe <= pde_off.test.mpjpe * kAblationSlack;
  const bool b = parallel.test.mpjpe <= transformer.test.mpjpe * kAblationSlack;
  return {a && b, std::string("(a) ") + (a ? "ok" : "FAIL") + " PDE " + fmt(pde_on.test.mpjpe) +
                      " vs no-PDE " + fmt(pde_off.test.mpjpe) + " at depth 8; (b) " + (b ? "ok" : "FAIL") +
                      " parallel " + fmt(parallel.test.mpjpe) + " vs transformer " +
                      fmt(transformer.test.mpjpe)};
}

Outcome noise_trend(DeskRuns& runs) {
  const auto& run = runs.desk();
  const auto sweep = noise_sweep(run.checkpoint, runs.test_data(), default_sigmas(), run.cfg.sampling_steps,
                                 run.cfg.seed);
  std::ofstream(runs.work() / "desk" / "noise_sweep.csv") << sweep.csv();
  bool ok = true;
  double peak = 0.0;
  std::string curve;
  for (const auto& [sigma, r] : sweep.rows) {
    if (r.mpjpe < (1.0 - kSweepJitter) * peak) ok = false;
    peak = std::max(peak, r.mpjpe);
    curve += (curve.empty() ? "" : ", ") + fmt(r.mpjpe);
  }
  return {ok, "MPJPE over sigma " + curve};
}

Outcome param_report() {
  RunConfig cfg = default_config();
  cfg.backbone = dualstream::BackboneConfig{};
  cfg.sync();
  const auto full = param_count(cfg);
  const double rel = static_cast<double>(full.total) / kReferenceParams - 1.0;

  RunConfig micro = default_config();
  micro.skeleton = "micro";
  micro.synth.frames = 4;
  micro.backbone = micro_backbone();
  micro.sync();
  const std::size_t got = param_count(micro).total;
  // embed 112 + pos 72 + block (2 x 304 attn, 2 x 296 mlp, 2 x 80 gcn, 272 fusion) + head 211
  const std::size_t hand = 112 + 72 + (2 * 304 + 2 * 296 + 2 * 80 + 272) + 211;
  return {std::abs(rel) <= kParamBand && got == hand && hand == kMicroParams,
          "d=128/d'=512/depth 8: " + std::to_string(full.total) + " (" + fmt(100 * rel, 3) +
              "% vs 7.50M); micro " + std::to_string(got) + " vs hand " + std::to_string(hand)};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

Outcome reproducibility(const std::string& cli, const fs::path& work) {
  if (cli.empty()) return {false, "no --cli given"};
  const std::string args = " --data.train 40 --data.test 10 --train.epochs 2";
  for (const char* tag : {"repro_a", "repro_b"}) {
    const fs::path dir = work / tag;
    fs::remove_all(dir);
    fs::create_directories(dir);
    const std::string train_cmd = cli + " train --quiet --out " + dir.string() + args + " > /dev/null";
    const std::string eval_cmd = cli + " eval --checkpoint " + (dir / "checkpoint.bin").string() + " --out " +
                                 (dir / "eval").string() + " > /dev/null";
    if (std::system(train_cmd.c_str()) != 0 || std::system(eval_cmd.c_str()) != 0)
      return {false, std::string("command failed in ") + tag};
  }
  std::string detail;
  bool ok = true;
  for (const char* file : {"loss_log.csv", "checkpoint.bin", "eval/metrics.json", "eval/metrics.csv"}) {
    const auto a = slurp(work / "repro_a" / file), b = slurp(work / "repro_b" / file);
    const bool same = !a.empty() && a == b;
    ok = ok && same;
    detail += (detail.empty() ? "" : ", ") + std::string(file) + (same ? " identical" : " DIFFERS");
  }
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::vector<int> only;
  std::string cli, work = "acceptance_work";
  app.add_option("criteria", only, "criterion numbers to run (default: all)")->check(CLI::Range(1, 11));
  app.add_option("--cli", cli, "poselift executable for the train/eval reproducibility check");
  app.add_option("--work", work, "directory for trained runs and reports");
  CLI11_PARSE(app, argc, argv);
  const std::set<int> selected(only.begin(), only.end());

  fs::create_directories(work);
  DeskRuns runs{fs::path(work)};
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient check", gradient_check},
      {"DDIM oracle", ddim_oracle},
      {"forward marginal", forward_marginal},
      {"PDE vs expm", pde_vs_expm},
      {"smoothing deceleration", deceleration},
      {"metric oracles", metric_oracles},
      {"desk learning", [&] { return desk_learning(runs); }},
      {"ablations", [&] { return ablations(runs); }},
      {"noise sweep", [&] { return noise_trend(runs); }},
      {"param report", param_report},
      {"reproducibility", [&] { return reproducibility(cli, fs::path(work)); }},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << id << ". " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
