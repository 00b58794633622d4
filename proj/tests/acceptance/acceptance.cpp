// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
// failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "guie/cli.hpp"
#include "guie/guie.hpp"
#include "oracles/oracles.hpp"

using namespace guie;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Verdict {
  bool pass;
  std::string detail;
};

int failures = 0;

void report(int n, const std::string& name, const std::function<Verdict()>& body) {
  Verdict v;
  try {
    v = body();
  } catch (const std::exception& e) {
    v = {false, std::string("exception: ") + e.what()};
  }
  if (!v.pass) ++failures;
  std::printf("[%s] criterion %d: %s (%s)\n", v.pass ? "PASS" : "FAIL", n, name.c_str(), v.detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), f, a);
  return buf;
}

Matrix<double> random_matrix(Eigen::Index r, Eigen::Index c, SplitMix64& rng, double scale = 1.0) {
  Matrix<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

Verdict gradient_check() {
  const auto t0 = Clock::now();
  SplitMix64 rng(101);
  const ArcFaceConfig cfg{30.0, 0.5};
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    const auto x = random_matrix(4, 11, rng, 2.0);
    const auto p = HeadParams<double>::init(11, 6, 5, rng);
    std::vector<std::uint32_t> y(4);
    for (auto& v : y) v = static_cast<std::uint32_t>(rng.below(5));
    auto st = BatchNormState<double>::fresh(11);
    const auto out = chain_loss(x, p, st, y, cfg);
    for (std::size_t k = 0; k < 3; ++k) {
      const auto num = oracle::central_difference(
          [&](const Matrix<double>& v) {
            auto q = p;
            q.tensors[k] = v;
            auto s = BatchNormState<double>::fresh(11);
            return chain_loss(x, q, s, y, cfg).loss;
          },
          p.tensors[k], 1e-5);
      worst = std::max(worst, oracle::max_relative_error(out.grads[k], num));
    }
    const auto dx = oracle::central_difference(
        [&](const Matrix<double>& v) {
          auto s = BatchNormState<double>::fresh(11);
          return chain_loss(v, p, s, y, cfg).loss;
        },
        x, 1e-5);
    worst = std::max(worst, oracle::max_relative_error(out.d_input, dx));
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 5.0, fmt("max rel err %.3g", worst) + fmt(", %.2fs", secs)};
}

Verdict arcface_reductions() {
  SplitMix64 rng(102);
  Matrix<double> e = random_matrix(6, 5, rng);
  for (Eigen::Index i = 0; i < e.rows(); ++i) e.row(i).normalize();
  Matrix<double> w = random_matrix(4, 5, rng);
  const std::vector<std::uint32_t> y{0, 1, 2, 3, 0, 1};
  const auto plain = arcface_loss(e, w, y, {1.0, 0.0});
  Matrix<double> wn = w;
  for (Eigen::Index i = 0; i < wn.rows(); ++i) wn.row(i).normalize();
  const double cos_err = (plain.logits - e * wn.transpose()).cwiseAbs().maxCoeff();

  Matrix<double> a(1, 5);
  a << 0, 0, 1, 0, 0;
  Matrix<double> wa = random_matrix(3, 5, rng);
  wa.row(1) = 3.0 * a;
  const std::vector<std::uint32_t> ya{1};
  const double target_err = std::abs(arcface_loss(a, wa, ya, {30.0, 0.5}).logits(0, 1) - 30.0 * std::cos(0.5));
  return {cos_err < 1e-6 && target_err < 1e-9, fmt("cosine err %.3g", cos_err) + fmt(", target err %.3g", target_err)};
}

Verdict optimizer() {
  SplitMix64 rng(103);
  double norm_err = 0.0;
  for (int t = 0; t < 100; ++t) {
    TensorList<double> g{random_matrix(3, 7, rng, 10.0 * rng.uniform() + 1e-3), random_matrix(1, 4, rng)};
    norm_err = std::max(norm_err, std::abs(global_norm(sam_perturbation(g, 0.05)) - 0.05));
  }

  TensorList<double> w{Matrix<double>::Constant(1, 1, 1.0)};
  AdamWConfig no_decay;
  no_decay.weight_decay = 0.0;
  auto st = AdamWState<double>::for_params(w, no_decay);
  const GradientFn<double> grad = [](const TensorList<double>& p) { return p; };
  for (int i = 0; i < 200; ++i) sam_step(w, grad, st, SamConfig{}, 0.1);
  const double final_w = std::abs(w[0](0, 0));

  TensorList<double> d{random_matrix(2, 3, rng)};
  const auto start = d;
  auto ds = AdamWState<double>::for_params(d, AdamWConfig{});
  const TensorList<double> zero{Matrix<double>::Zero(2, 3)};
  const double lr = 0.01;
  bool exact = true;
  for (int i = 1; i <= 50; ++i) {
    const Matrix<double> before = d[0];
    adamw_step(d, zero, ds, lr);
    exact = exact && d[0] == (before * (1.0 - lr * 0.1)).eval();
  }
  return {norm_err < 1e-9 && final_w < 1e-2 && exact,
          fmt("perturbation norm err %.3g", norm_err) + fmt(", |w| after 200 steps %.3g", final_w) +
              (exact ? ", decay exact" : ", decay inexact")};
}

Verdict schedule() {
  const ScheduleSpec s;
  const double e0 = std::abs(lr_at(0, s) - 1e-4);
  const double e3 = std::abs(lr_at(3, s) - 1e-2);
  const double ef = std::abs(lr_at(s.total_epochs - 1, s) - 1e-4);
  bool mono = true;
  for (std::uint32_t e = 1; e < s.total_epochs; ++e) {
    const double prev = lr_at(e - 1, s), cur = lr_at(e, s);
    mono = mono && (e <= s.warmup_epochs ? cur >= prev : cur <= prev);
  }
  const bool ok = e0 < 1e-12 && e3 < 1e-12 && ef < 1e-12 && mono;
  return {ok, fmt("endpoint errs %.3g", std::max({e0, e3, ef})) + (mono ? ", monotone" : ", not monotone")};
}

Verdict metric_oracle() {
  const auto t0 = Clock::now();
  SplitMix64 rng(105);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    std::vector<std::string> pool;
    for (std::uint64_t i = 0, n = 1 + rng.below(50); i < n; ++i) pool.push_back("p" + std::to_string(i));
    const auto nq = 1 + rng.below(20);
    std::vector<Ranking> rankings;
    RelevanceMap rel;
    double sum = 0.0;
    for (std::uint64_t q = 0; q < nq; ++q) {
      const std::string qid = "q" + std::to_string(q);
      auto& set = rel[qid];
      while (set.empty())
        for (const auto& id : pool)
          if (rng.below(3) == 0) set.insert(id);
      auto order = pool;
      shuffle<std::string>(order, rng);
      order.resize(std::min<std::size_t>(order.size(), rng.below(6)));
      Ranking r{qid, {}, false};
      for (const auto& id : order) r.neighbors.push_back({id, 0.0});
      rankings.push_back(std::move(r));
      sum += oracle::brute_force_ap(order, set, 5);
    }
    worst = std::max(worst, std::abs(map_at_k(rankings, rel, 5) - sum / static_cast<double>(nq)));
  }
  const auto hand = [](std::vector<std::string> ids, std::unordered_set<std::string> relevant) {
    Ranking r{"q", {}, false};
    for (auto& id : ids) r.neighbors.push_back({id, 0.0});
    return map_at_k({r}, RelevanceMap{{"q", std::move(relevant)}}, 5);
  };
  const bool hands = hand({"r", "a", "b", "c", "d"}, {"r"}) == 1.0 && hand({"a", "r", "b", "c", "d"}, {"r"}) == 0.5 &&
                     std::abs(hand({"r", "a", "s", "c", "d"}, {"r", "s"}) - 5.0 / 6.0) <= 2e-16;
  const double secs = seconds_since(t0);
  return {worst <= 1e-12 && hands && secs < 10.0,
          fmt("max diff %.3g", worst) + (hands ? ", hand cases exact" : ", hand cases differ") + fmt(", %.2fs", secs)};
}

struct E2E {
  std::string checkpoint_bytes;
  std::string best_line;
  double trained = 0.0;
  double untrained = 0.0;
  double seconds = 0.0;
};

int cli(std::vector<std::string> args, std::string* out = nullptr) {
  std::ostringstream o, e;
  const int code = cli::run_cli(std::move(args), o, e);
  if (code != 0) throw std::runtime_error("guie exited " + std::to_string(code) + ": " + e.str());
  if (out) *out = o.str();
  return code;
}

E2E end_to_end(const fs::path& dir, const std::string& ckpt_name) {
  const auto t0 = Clock::now();
  const auto p = [&](const std::string& n) { return (dir / n).string(); };
  cli({"synth", "--classes", "60", "--per-class", "40", "--dim", "1024", "--separation", "6", "--seed", "1", "--out",
       p("syn.guiefeat")});
  cli({"split", "--manifest", p("syn.jsonl"), "--zeroshot-classes", "10", "--train-frac", "0.8", "--out-prefix",
       p("split")});
  std::string out;
  cli({"train", "--store", p("syn.guiefeat"), "--splits", p("split"), "--epochs", "60", "--eval-every", "5", "--batch",
       "128", "--log-file", p(ckpt_name + ".log"), "--out", p(ckpt_name)},
      &out);

  E2E r;
  r.seconds = seconds_since(t0);
  r.best_line = out;
  r.checkpoint_bytes = read_file_bytes(p(ckpt_name));
  r.trained = read_checkpoint(r.checkpoint_bytes).zeroshot_map5;

  // Untrained head: the same random initialization fit() starts from, with
  // fresh batchnorm statistics, scored by the same protocol.
  const auto store = cli::load_store(p("syn.guiefeat"));
  const auto train = cli::load_manifest(cli::split_path(p("split"), "train"));
  const auto zeroshot = cli::load_manifest(cli::split_path(p("split"), "zeroshot"));
  TrainConfig cfg;
  SplitMix64 rng(cfg.seed);
  const auto st = TrainState::init(static_cast<Eigen::Index>(store.dimension() + kGeometryDim), cfg,
                                   LabelIndex(train).size(), rng);
  auto bn = st.bn;
  bn.mode = NormMode::eval;
  r.untrained = evaluate_retrieval(store, zeroshot, st.params, bn, 5);
  return r;
}

Verdict formats() {
  SplitMix64 rng(108);
  int feature_ok = 0, ckpt_ok = 0;
  for (int t = 0; t < 100; ++t) {
    const auto dim = static_cast<std::uint32_t>(1 + rng.below(40));
    FeatureStore s(dim);
    for (std::uint64_t i = 0, n = rng.below(30); i < n; ++i) {
      FeatureRecord r;
      r.image_id = "img/" + std::to_string(rng.next());
      r.class_id = rng.below(4) == 0 ? kUnlabeled : static_cast<std::uint32_t>(rng.next());
      r.width = static_cast<std::uint16_t>(1 + rng.below(65535));
      r.height = static_cast<std::uint16_t>(1 + rng.below(65535));
      r.category = static_cast<Category>(rng.below(5));
      for (std::uint32_t d = 0; d < dim; ++d) r.feature.push_back(static_cast<float>(rng.normal() * 100.0));
      s.add(std::move(r));
    }
    const auto bytes = write_feature_file(s);
    const auto back = read_feature_file(bytes);
    if (back == s && write_feature_file(back) == bytes) ++feature_ok;

    Checkpoint c;
    const auto d_in = 1 + rng.below(20), d_out = 1 + rng.below(10), n = 1 + rng.below(8);
    c.params = HeadParams<double>::init(static_cast<Eigen::Index>(d_in), static_cast<Eigen::Index>(d_out),
                                        static_cast<Eigen::Index>(n), rng)
                   .cast<float>();
    c.params.proj_bias().setRandom();
    c.bn = BatchNormState<float>::fresh(static_cast<Eigen::Index>(d_in));
    c.bn.running_mean.setRandom();
    c.bn.running_var = c.bn.running_var.array() + 0.5f;
    c.bn.mode = NormMode::eval;
    c.arcface = {1.0 + 60.0 * rng.uniform(), 1.5 * rng.uniform()};
    for (std::uint64_t i = 0; i < n; ++i) c.class_ids.push_back(static_cast<std::uint32_t>(rng.next()));
    c.epoch = static_cast<std::uint32_t>(rng.below(1000));
    c.zeroshot_map5 = rng.uniform();
    c.config_json = "{\"trial\":" + std::to_string(t) + "}";
    const auto cb = write_checkpoint(c);
    const auto cr = read_checkpoint(cb);
    if (write_checkpoint(cr) == cb && cr.params.tensors == c.params.tensors && cr.class_ids == c.class_ids &&
        cr.bn.running_mean == c.bn.running_mean && cr.bn.running_var == c.bn.running_var)
      ++ckpt_ok;
  }
  return {feature_ok == 100 && ckpt_ok == 100,
          "feature " + std::to_string(feature_ok) + "/100, checkpoint " + std::to_string(ckpt_ok) + "/100"};
}

Verdict dataset_rules() {
  Manifest m;
  for (int i = 0; i < 49; ++i) m.entries.push_back({"a" + std::to_string(i), 1, "d", 10, 10, Category::unknown, {}});
  for (int i = 0; i < 50; ++i) m.entries.push_back({"b" + std::to_string(i), 2, "d", 10, 10, Category::unknown, {}});
  const auto kept = distinct_classes(filter_min_class_size(m, 50));
  const bool filter_ok = kept == std::vector<std::uint32_t>{2};

  SplitMix64 rng(109);
  bool cap_ok = true;
  for (int t = 0; t < 100 && cap_ok; ++t) {
    Manifest r;
    for (std::uint64_t i = 0, n = rng.below(400); i < n; ++i)
      r.entries.push_back({"x" + std::to_string(i), static_cast<std::uint32_t>(rng.below(8)), "d", 10, 10,
                           Category::unknown, {}});
    std::unordered_map<std::uint32_t, std::size_t> count;
    for (const auto& e : cap_per_class(r, 30, rng.next()).entries) ++count[e.class_id];
    for (auto [c, n] : count) cap_ok = cap_ok && n <= 30;
  }
  return {filter_ok && cap_ok, std::string(filter_ok ? "49 dropped, 50 kept" : "filter wrong") +
                                   (cap_ok ? ", cap holds on 100 manifests" : ", cap exceeded")};
}

Verdict tta_routing() {
  const auto a = tta_variants(224, 224, Category::other).size();
  const auto b = tta_variants(448, 224, Category::other).size();
  const auto c = tta_variants(448, 224, Category::apparel).size();
  SplitMix64 rng(110);
  std::size_t bad = 0;
  for (int t = 0; t < 10000; ++t) {
    const auto w = static_cast<std::uint32_t>(1 + rng.below(6000));
    const auto h = static_cast<std::uint32_t>(1 + rng.below(6000));
    for (const auto& p : tta_variants(w, h, static_cast<Category>(rng.below(5)))) bad += !p.crop_inside_canvas();
  }
  return {a == 1 && b == 2 && c == 4 && bad == 0, "plans " + std::to_string(a) + "/" + std::to_string(b) + "/" +
                                                      std::to_string(c) + ", containment violations " +
                                                      std::to_string(bad)};
}

Verdict resampler() {
  SplitMix64 rng(111);
  double constant = 0.0, identity = 0.0, dense = 0.0;
  for (int t = 0; t < 20; ++t) {
    const auto h = 1 + static_cast<int>(rng.below(40)), w = 1 + static_cast<int>(rng.below(40));
    const auto th = 1 + static_cast<int>(rng.below(40)), tw = 1 + static_cast<int>(rng.below(40));
    const double v = 255.0 * rng.uniform();
    const auto out = resize_bicubic(Matrix<double>::Constant(h, w, v).eval(), tw, th, true);
    constant = std::max(constant, (out.array() - v).abs().maxCoeff());
    const auto img = random_matrix(h, w, rng, 50.0);
    identity = std::max(identity, (resize_bicubic(img, w, h, true) - img).cwiseAbs().maxCoeff());
  }
  Matrix<double> ramp(8, 8);
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c) ramp(r, c) = 3.0 * c + 5.0 * r;
  dense = (resize_bicubic(ramp, 4, 4, true) - oracle::dense_resample(ramp, 4, 4, true)).cwiseAbs().maxCoeff();
  for (int t = 0; t < 10; ++t) {
    const auto img = random_matrix(12 + static_cast<int>(rng.below(10)), 12 + static_cast<int>(rng.below(10)), rng);
    const int tw = 1 + static_cast<int>(rng.below(11)), th = 1 + static_cast<int>(rng.below(11));
    dense = std::max(dense, (resize_bicubic(img, tw, th, true) - oracle::dense_resample(img, tw, th, true))
                                .cwiseAbs()
                                .maxCoeff());
  }
  return {constant < 1e-6 && identity < 1e-6 && dense < 1e-5,
          fmt("constant %.3g", constant) + fmt(", identity %.3g", identity) + fmt(", dense oracle %.3g", dense)};
}

}  // namespace

int main() {
  report(1, "full-chain gradients vs central differences", gradient_check);
  report(2, "ArcFace reductions", arcface_reductions);
  report(3, "SAM perturbation, quadratic convergence, exact decoupled decay", optimizer);
  report(4, "warmup + cosine schedule", schedule);
  report(5, "mAP@5 vs brute-force oracle", metric_oracle);

  const fs::path dir = fs::temp_directory_path() / "guie_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::optional<E2E> first, second;
  try {
    first = end_to_end(dir, "run1.ckpt");
  } catch (const std::exception& e) {
    std::printf("end-to-end run failed: %s\n", e.what());
  }
  report(6, "synthetic zero-shot end to end", [&]() -> Verdict {
    if (!first) return {false, "run failed"};
    const bool ok = first->trained >= 0.8 && first->trained - first->untrained >= 0.2 && first->seconds < 300.0;
    return {ok, fmt("trained mAP@5 %.6f", first->trained) + fmt(", untrained %.6f", first->untrained) +
                    fmt(", margin %.6f", first->trained - first->untrained) + fmt(", %.1fs", first->seconds)};
  });
  report(7, "determinism of the end-to-end run", [&]() -> Verdict {
    if (!first) return {false, "first run failed"};
    second = end_to_end(dir, "run2.ckpt");
    const bool same = second->checkpoint_bytes == first->checkpoint_bytes && second->best_line == first->best_line;
    return {same, std::string(same ? "checkpoints byte-identical, " : "runs differ, ") + "printed " +
                      first->best_line.substr(0, first->best_line.find('\n'))};
  });
  fs::remove_all(dir);

  report(8, "feature file and checkpoint round trips", formats);
  report(9, "dataset filter and per-class cap", dataset_rules);
  report(10, "TTA routing and containment", tta_routing);
  report(11, "bicubic resampler", resampler);

  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
