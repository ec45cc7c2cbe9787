// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "ccps/ccps.hpp"
#include "ccps/gradcheck.hpp"
#include "test_support.hpp"

namespace ccps {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::size_t worker_count() { return std::max(1u, std::thread::hardware_concurrency()); }

// log1p(sum_{v != t} exp(z_v - z_t)) on freshly computed logit gaps.
double oracle_loss(const BasicLMHead<double>& W, const std::vector<double>& h, std::size_t t) {
  std::vector<double> gap(W.vocab_size);
  double m = 0.0;
  for (std::size_t v = 0; v < W.vocab_size; ++v) {
    gap[v] = W.has_bias() ? W.bias[v] - W.bias[t] : 0.0;
    for (std::size_t j = 0; j < W.hidden_dim; ++j)
      gap[v] += (W.weights[v * W.hidden_dim + j] - W.weights[t * W.hidden_dim + j]) * h[j];
    if (v != t) m = std::max(m, gap[v]);
  }
  double s = m > 0.0 ? std::exp(-m) : 0.0;
  for (std::size_t v = 0; v < W.vocab_size; ++v)
    if (v != t) s += std::exp(gap[v] - m);
  return m > 0.0 ? m + std::log(s) : std::log1p(s);
}

Outcome jacobian_vs_finite_differences() {
  const auto t0 = Clock::now();
  SplitMix64 rng(2024);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t V = 2 + rng.below(40), d = 1 + rng.below(16);
    const auto head = testing::random_head<double>(rng, V, d, 1.0, trial % 3 == 0);
    auto h = testing::random_vector<double>(rng, d, 1.5);
    const auto t = static_cast<std::uint32_t>(rng.below(V));
    const auto g = compute_jacobian(head, std::span<const double>(h), t);
    std::vector<double> fd(d);
    const double step = 1e-4;
    for (std::size_t j = 0; j < d; ++j) {
      const double orig = h[j];
      h[j] = orig + step;
      const double up = oracle_loss(head, h, t);
      h[j] = orig - step;
      const double down = oracle_loss(head, h, t);
      h[j] = orig;
      fd[j] = (up - down) / (2 * step);
    }
    worst = std::max(worst, nn::tensor_relative_error(g.jacobian, fd));
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-6 && secs < 10.0, fmt("max rel err %.3e over 100 instances, %.3f s", worst, secs)};
}

std::vector<BasicExample<double>> random_batch(SplitMix64& rng, AnswerFormat format, std::size_t n, std::size_t L) {
  std::vector<BasicExample<double>> batch;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = format == AnswerFormat::MC ? 1 : L;
    batch.push_back({testing::random_vector<double>(rng, len * kFeatureDim), len, static_cast<std::uint32_t>(i % 2)});
  }
  return batch;
}

double dense_layer_check(SplitMix64& rng, nn::Activation act) {
  nn::Dense<double> layer(7, 5, "d");
  layer.init(rng);
  for (auto& b : layer.bias.value) b = rng.normal();
  const auto x = testing::random_vector<double>(rng, 7);
  const auto c = testing::random_vector<double>(rng, 5);
  auto loss = [&] {
    std::vector<double> y(5);
    layer.forward(x, y);
    double s = 0.0;
    for (std::size_t i = 0; i < 5; ++i) s += c[i] * nn::activate(act, y[i]);
    return s;
  };
  auto grad = [&] {
    layer.weight.zero_grad();
    layer.bias.zero_grad();
    std::vector<double> y(5), dy(5), dx(7);
    layer.forward(x, y);
    for (std::size_t i = 0; i < 5; ++i) dy[i] = c[i] * nn::activate_grad(act, y[i]);
    layer.backward(x, dy, dx);
  };
  return nn::gradient_check({&layer.weight, &layer.bias}, loss, grad).max_rel_error;
}

double conv_layer_check(SplitMix64& rng, std::size_t L) {
  nn::Conv1d<double> conv(4, 3, 3, "c");
  conv.init(rng);
  for (auto& b : conv.bias.value) b = 0.3 * rng.normal();
  const auto x = testing::random_vector<double>(rng, L * 4);
  const auto c = testing::random_vector<double>(rng, L * 3);
  auto loss = [&] {
    std::vector<double> y(L * 3);
    conv.forward(x, L, y);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += c[i] * nn::activate(nn::Activation::Relu, y[i]);
    return s;
  };
  auto grad = [&] {
    conv.weight.zero_grad();
    conv.bias.zero_grad();
    std::vector<double> y(L * 3), dy(L * 3), dx(L * 4);
    conv.forward(x, L, y);
    for (std::size_t i = 0; i < y.size(); ++i) dy[i] = c[i] * nn::activate_grad(nn::Activation::Relu, y[i]);
    conv.backward(x, L, dy, dx);
  };
  return nn::gradient_check({&conv.weight, &conv.bias}, loss, grad).max_rel_error;
}

Outcome backprop_checks() {
  SplitMix64 rng(77);
  double worst = 0.0;
  std::string where;
  auto note = [&](double err, const std::string& what) {
    if (err >= worst) {
      worst = err;
      where = what;
    }
  };
  for (auto format : {AnswerFormat::MC, AnswerFormat::OE}) {
    auto net = ConfidenceNet<double>::initialized(format, 5);
    for (auto* p : net.params())
      if (p->name.ends_with(".bias"))
        for (auto& v : p->value) v = 0.1 * rng.normal();
    auto batch = random_batch(rng, format, format == AnswerFormat::MC ? 4 : 2, 6);
    if (format == AnswerFormat::OE) batch.push_back({testing::random_vector<double>(rng, kFeatureDim), 1, 1});
    const std::string name(to_string(format));
    const auto ce = nn::backprop_check(net, batch, nn::CheckedLoss::CrossEntropy);
    note(ce.max_rel_error, name + " cross-entropy " + ce.worst_param);
    const auto wide = nn::backprop_check(net, batch, nn::CheckedLoss::Contrastive, 50.0);
    note(wide.max_rel_error, name + " contrastive " + wide.worst_param);
    const auto hinge = nn::backprop_check(net, batch, nn::CheckedLoss::Contrastive, 1.0);
    note(hinge.max_rel_error, name + " contrastive(m=1) " + hinge.worst_param);
  }
  note(dense_layer_check(rng, nn::Activation::Elu), "dense+elu");
  note(dense_layer_check(rng, nn::Activation::Relu), "dense+relu");
  for (std::size_t L : {1u, 2u, 5u}) note(conv_layer_check(rng, L), "conv+relu L=" + std::to_string(L));
  return {worst < 1e-4, fmt("max rel err %.3e (worst: %s)", worst, where.c_str())};
}

Outcome parameter_counts() {
  const auto mc = ConfidenceNet<float>(AnswerFormat::MC).parameter_count();
  const auto oe = ConfidenceNet<float>(AnswerFormat::OE).parameter_count();
  return {mc == 9542 && oe == 21778, fmt("MC %zu, OE %zu", mc, oe)};
}

Outcome feature_count() {
  const bool groups = kOriginalFeatureCount == 12 && kOverallFeatureCount == 3 && kPerturbedFeatureCount == 32 &&
                      kComparisonFeatureCount == 28 && kFeatureDim == 75;
  const auto& names = feature_names();
  bool named = std::set<std::string>(names.begin(), names.end()).size() == kFeatureDim &&
               names[kOverallOffset] == "jacobian_norm_token" &&
               names[kPerturbedOffset].starts_with("perturbed_") && names[kComparisonOffset].starts_with("delta_") &&
               names[kFeatureDim - 1].starts_with("l2_dist_hidden");
  std::size_t rows = 0, bad = 0;
  for (auto format : {AnswerFormat::MC, AnswerFormat::OE}) {
    ToyLMConfig cfg;
    cfg.format = format;
    cfg.n_records = 200;
    cfg.max_len = 30;
    cfg.seed = 4;
    const auto dump = generate(cfg);
    for (const auto& fm : extract_all(dump.records, dump.lm_head, {}, worker_count())) {
      rows += fm.rows();
      if (fm.values.size() != fm.rows() * 75) ++bad;
      for (float v : fm.values)
        if (!std::isfinite(v)) ++bad;
    }
  }
  return {groups && named && bad == 0 && rows > 400,
          fmt("%zu rows checked, groups 12/3/32/28 = 75, %zu malformed", rows, bad)};
}

Outcome fixed_points() {
  // Identical head rows: every logit moves together and the gradient vanishes.
  BasicLMHead<float> head{3, 2, {0.5f, -1.0f, 0.5f, -1.0f, 0.5f, -1.0f}, {0.1f, 0.2f, -0.3f}};
  const auto traj = perturb(head, std::span<const float>(std::vector<float>{0.3f, 2.0f}), 1);
  bool ok = traj.zero_direction();
  const auto overall = overall_features(traj);
  ok = ok && overall[0] == 0.0 && overall[1] == 24.0 && overall[2] == 0.0;
  const auto c = comparison_features(traj);
  // delta log P, argmax change, KL, JS, cos logits, cos hidden, L2 hidden
  const double fixed[] = {0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0};
  std::size_t mismatches = 0;
  for (std::size_t m = 0; m < 7; ++m) {
    for (std::size_t k = 0; k < 3; ++k) mismatches += c[4 * m + k] != fixed[m];
    mismatches += c[4 * m + 3] != 0.0;
  }
  // Same check through the full extractor.
  AnswerRecord rec;
  rec.answer_id = "0";
  rec.format = AnswerFormat::MC;
  rec.token_ids = {1};
  rec.hidden_states = {0.3f, 2.0f};
  const auto fm = extract(rec, head);
  for (std::size_t m = 0; m < 7; ++m)
    for (std::size_t k = 0; k < 4; ++k)
      mismatches += fm.values[kComparisonOffset + 4 * m + k] != static_cast<float>(k == 3 ? 0.0 : fixed[m]);
  mismatches += fm.values[kOverallOffset + 1] != 24.0f;
  return {ok && mismatches == 0, fmt("zero direction %s, epsilon_to_flip %.1f, %zu mismatches",
                                     traj.zero_direction() ? "yes" : "no", overall[1], mismatches)};
}

double pairwise_auroc(const std::vector<EvalRecord>& r) {
  double wins = 0.0, pairs = 0.0;
  for (const auto& a : r)
    for (const auto& b : r)
      if (a.o == 1 && b.o == 0) {
        pairs += 1.0;
        wins += a.p > b.p ? 1.0 : (a.p == b.p ? 0.5 : 0.0);
      }
  return wins / pairs;
}

double threshold_aucpr(const std::vector<EvalRecord>& r) {
  std::set<double, std::greater<>> thresholds;
  double positives = 0.0;
  for (const auto& x : r) {
    thresholds.insert(x.p);
    positives += x.o;
  }
  double ap = 0.0, prev_recall = 0.0;
  for (double t : thresholds) {
    double tp = 0.0, predicted = 0.0;
    for (const auto& x : r)
      if (x.p >= t) {
        predicted += 1.0;
        tp += x.o;
      }
    ap += (tp / positives - prev_recall) * tp / predicted;
    prev_recall = tp / positives;
  }
  return ap;
}

Outcome metric_oracles() {
  const std::vector<EvalRecord> hand{{0.9, 1}, {0.8, 0}, {0.1, 0}};
  double worst = std::max(std::abs(ece(hand, 10).ece - 1.0 / 3.0), std::abs(brier(hand) - 0.22));
  worst = std::max(worst, std::abs(accuracy(hand) - 1.0 / 3.0));
  SplitMix64 rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<EvalRecord> r(200);
    for (auto& x : r) {
      x.p = trial % 2 ? static_cast<double>(rng.below(21)) / 20.0 : rng.uniform();  // odd trials are tie-heavy
      x.o = rng.uniform() < 0.2 + 0.6 * x.p ? 1 : 0;
    }
    worst = std::max(worst, std::abs(auroc(r) - pairwise_auroc(r)));
    worst = std::max(worst, std::abs(aucpr(r) - threshold_aucpr(r)));
  }
  return {worst <= 1e-12, fmt("max abs deviation %.3e (hand cases + 10 x 200 random records)", worst)};
}

struct SeedRun {
  double accuracy = 0.0;  // (p >= 0.5) == label
  double ece = 0.0;
  double auroc = 0.0;
  double seconds = 0.0;
};

SeedRun train_and_validate(AnswerFormat format, double separability, std::uint64_t seed) {
  const auto t0 = Clock::now();
  ToyLMConfig cfg;
  cfg.format = format;
  cfg.separability = separability;
  cfg.seed = seed;
  cfg.n_records = 2000;
  auto val_cfg = cfg;
  val_cfg.n_records = 500;
  val_cfg.record_offset = 2000;
  const auto train_dump = generate(cfg);
  const auto val_dump = generate(val_cfg);
  const auto train = extract_all(train_dump.records, train_dump.lm_head, {}, worker_count());
  const auto val = extract_all(val_dump.records, val_dump.lm_head, {}, worker_count());
  TrainConfig tc;
  tc.seed = seed;
  const auto result = train_confidence_model(train, format, tc);
  std::vector<EvalRecord> recs;
  SeedRun out;
  for (const auto& fm : val) {
    const double p = result.model.predict(fm);
    recs.push_back({p, static_cast<int>(fm.label)});
    out.accuracy += (p >= 0.5) == (fm.label == 1);
  }
  out.accuracy /= static_cast<double>(val.size());
  out.ece = ece(recs).ece;
  out.auroc = auroc(recs);
  out.seconds = seconds_since(t0);
  return out;
}

Outcome end_to_end_learning() {
  double min_acc = 1.0, max_ece = 0.0, min_auroc = 1.0, slowest = 0.0;
  std::string detail;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto mc = train_and_validate(AnswerFormat::MC, 1.0, seed);
    const auto oe = train_and_validate(AnswerFormat::OE, 1.0, seed);
    std::printf("  seed %llu: MC acc %.4f ece %.4f (%.1f s) | OE auroc %.4f acc %.4f ece %.4f (%.1f s)\n",
                static_cast<unsigned long long>(seed), mc.accuracy, mc.ece, mc.seconds, oe.auroc, oe.accuracy, oe.ece,
                oe.seconds);
    std::fflush(stdout);
    min_acc = std::min(min_acc, mc.accuracy);
    max_ece = std::max(max_ece, mc.ece);
    min_auroc = std::min(min_auroc, oe.auroc);
    slowest = std::max({slowest, mc.seconds, oe.seconds});
  }
  return {min_acc >= 0.95 && max_ece <= 0.10 && min_auroc >= 0.90 && slowest < 300.0,
          fmt("MC min acc %.4f, max ECE %.4f; OE min AUROC %.4f; slowest run %.1f s", min_acc, max_ece, min_auroc,
              slowest)};
}

Outcome null_signal() {
  double sum = 0.0;
  std::string per_seed;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto run = train_and_validate(AnswerFormat::MC, 0.0, seed);
    sum += run.auroc;
    per_seed += fmt(" %.3f", run.auroc);
  }
  const double mean = sum / 5.0;
  return {mean >= 0.45 && mean <= 0.55, fmt("mean AUROC %.4f (per seed:%s)", mean, per_seed.c_str())};
}

int shell(const std::string& args) {
  const std::string cmd = std::string(CCPS_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome determinism() {
  testing::TempDir dir;
  auto pipeline = [&](const std::string& tag, std::size_t threads) {
    const auto p = [&](const std::string& name) { return dir / (tag + "_" + name); };
    const std::string th = " --threads " + std::to_string(threads);
    int rc = shell("gen --format OE --seed 3 --n-records 400 --out " + p("train"));
    rc |= shell("gen --format OE --seed 3 --n-records 100 --record-offset 400 --out " + p("val"));
    rc |= shell("extract --quiet --dump " + p("train") + " --out " + p("train.ccpf") + th);
    rc |= shell("extract --quiet --dump " + p("val") + " --out " + p("val.ccpf") + th);
    rc |= shell("train --seed 3 --pretrain-steps 1000 --finetune-steps 1000 --train " + p("train.ccpf") + " --out " +
                p("model.ccpm"));
    rc |= shell("predict --model " + p("model.ccpm") + " --features " + p("val.ccpf") + " --out " + p("pred.jsonl"));
    return rc;
  };
  const std::vector<std::pair<std::string, std::size_t>> runs{{"a", 1}, {"b", 1}, {"c", 8}};
  int rc = 0;
  for (const auto& [tag, threads] : runs) rc |= pipeline(tag, threads);
  if (rc != 0) return {false, "a pipeline command failed"};
  const char* artifacts[] = {"train/records.bin", "train/lm_head.bin", "train/manifest.json", "val/records.bin",
                             "train.ccpf",        "val.ccpf",          "model.ccpm",          "model.pretrain_loss.csv",
                             "model.finetune_loss.csv", "pred.jsonl"};
  std::size_t compared = 0, differing = 0;
  for (const char* a : artifacts)
    for (const char* other : {"b", "c"}) {
      ++compared;
      differing += io::read_file(dir / (std::string("a_") + a)) != io::read_file(dir / (std::string(other) + "_" + a));
    }
  return {differing == 0, fmt("%zu artifact pairs compared (repeat run and 8-thread extraction), %zu differ", compared,
                              differing)};
}

Outcome two_token() {
  const auto head = testing::two_token_head<float>();
  const auto traj = perturb(head, std::span<const float>(std::vector<float>{3.0f}), 0);
  const double flip = overall_features(traj)[1];
  // J = -2 sigma(-6) < 0, so h moves down: h_s = 3 - 4 s, log P(t0) = -log(1 + e^{-2 h_s}).
  auto log_p = [](std::span<const float> z) { return static_cast<double>(z[0]) - log_sum_exp(z); };
  std::vector<double> lp{log_p(traj.z0)};
  double worst = std::abs(lp[0] + std::log1p(std::exp(-6.0)));
  for (std::size_t s = 0; s < traj.steps(); ++s) {
    lp.push_back(log_p(traj.logits(s)));
    const double h = 3.0 - 4.0 * static_cast<double>(s + 1);
    worst = std::max(worst, std::abs(lp.back() + std::log1p(std::exp(-2.0 * h))) / std::max(1.0, std::abs(lp.back())));
  }
  bool decreasing = true;
  for (std::size_t i = 1; i < lp.size(); ++i) decreasing = decreasing && lp[i] < lp[i - 1];
  return {flip == 4.0 && decreasing && worst < 1e-6,
          fmt("epsilon_to_flip %.1f, log P(t0) %s, max rel deviation from oracle %.2e", flip,
              decreasing ? "strictly decreasing" : "NOT decreasing", worst)};
}

}  // namespace
}  // namespace ccps

int main() {
  using namespace ccps;
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"Jacobian vs central finite differences", jacobian_vs_finite_differences},
      {"backprop finite-difference checks", backprop_checks},
      {"parameter counts 9542 / 21778", parameter_counts},
      {"feature vector length 75", feature_count},
      {"zero-Jacobian fixed points", fixed_points},
      {"metric oracles", metric_oracles},
      {"end-to-end learning (separability 1)", end_to_end_learning},
      {"null signal (separability 0)", null_signal},
      {"determinism", determinism},
      {"two-token analytic scenario", two_token},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s %2zu %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
