// ccps: command-line driver for the confidence-estimation pipeline.
//
//   gen       synthetic probe dump from a toy LM
//   extract   per-token perturbation features from a dump
//   pretrain  contrastive encoder pre-training only
//   train     pre-training + joint fine-tuning, with validation metrics
//   predict   per-answer confidences (JSONL)
//   evaluate  ECE / Brier / ACC / AUCPR / AUROC report
//
// Exit codes: 0 success, 2 validation error, 3 I/O error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ccps/ccps.hpp"

namespace fs = std::filesystem;
using namespace ccps;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitIo = 3;

nlohmann::json read_json_file(const std::string& path) {
  try {
    return nlohmann::json::parse(io::read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(path + ": invalid JSON: " + e.what());
  }
}

std::string sibling(const std::string& path, const std::string& suffix) {
  fs::path p(path);
  return (p.parent_path() / (p.stem().string() + suffix)).string();
}

void ensure_parent(const std::string& path) {
  const auto parent = fs::path(path).parent_path();
  if (parent.empty()) return;
  std::error_code ec;
  fs::create_directories(parent, ec);
  if (ec) throw IoError("cannot create directory " + parent.string() + ": " + ec.message());
}

// ---------------------------------------------------------------- gen

struct GenOptions {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed, record_offset;
  std::optional<std::size_t> n_records, d_h, vocab, max_len;
  std::optional<double> separability;
  std::optional<std::string> format;
};

int run_gen(const GenOptions& o) {
  nlohmann::json j = o.config.empty() ? nlohmann::json::object() : read_json_file(o.config);
  if (!j.is_object()) throw ValidationError(o.config + ": config must be a JSON object");
  if (o.seed) j["seed"] = *o.seed;
  if (o.record_offset) j["record_offset"] = *o.record_offset;
  if (o.n_records) j["n_records"] = *o.n_records;
  if (o.d_h) j["d_h"] = *o.d_h;
  if (o.vocab) j["V"] = *o.vocab;
  if (o.max_len) j["max_len"] = *o.max_len;
  if (o.separability) j["separability"] = *o.separability;
  if (o.format) j["format"] = *o.format;
  const auto cfg = toy_config_from_json(j);
  const auto dump = generate(cfg);
  write_dump(dump, o.out);
  std::cerr << "wrote " << dump.records.size() << " " << to_string(cfg.format) << " records to " << o.out << "\n";
  return 0;
}

// ---------------------------------------------------------------- extract

struct ExtractOptions {
  std::string dump;
  std::string out;
  double eps_max = 20.0;
  std::size_t steps = 5;
  std::size_t threads = 1;
  std::string csv, jsonl;
  bool quiet = false;
};

int run_extract(const ExtractOptions& o) {
  const PerturbationConfig pc{o.eps_max, o.steps};
  pc.validate();
  if (o.threads == 0) throw ValidationError("--threads must be positive");
  const auto dump = read_dump(o.dump);

  FeatureSet set;
  set.format = dump.manifest.format;
  // Extract in chunks so progress can be reported; each chunk fans out over
  // the worker threads and lands in input order.
  const std::size_t n = dump.records.size();
  const std::size_t chunk = std::max<std::size_t>(1, std::max<std::size_t>(n / 10, 64));
  set.answers.reserve(n);
  for (std::size_t begin = 0; begin < n; begin += chunk) {
    const auto count = std::min(chunk, n - begin);
    auto part = extract_all(std::span(dump.records).subspan(begin, count), dump.lm_head, pc, o.threads);
    for (auto& fm : part) set.answers.push_back(std::move(fm));
    if (!o.quiet) std::cerr << "extracted " << set.answers.size() << "/" << n << " records\n";
  }

  const auto bytes = encode_feature_set(set);
  ensure_parent(o.out);
  io::write_file(o.out, bytes);
  if (!o.csv.empty()) io::write_text(o.csv, features_to_csv(set));
  if (!o.jsonl.empty()) io::write_text(o.jsonl, features_to_jsonl(set));
  std::size_t rows = 0;
  for (const auto& fm : set.answers) rows += fm.rows();
  std::cerr << "wrote " << set.answers.size() << " answers (" << rows << " token rows x " << kFeatureDim
            << " features) to " << o.out << "\n";
  return 0;
}

// ---------------------------------------------------------------- pretrain / train

struct TrainOptions {
  std::string train, val, out, config, format, init;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr, weight_decay, margin;
  std::optional<std::size_t> batch_size, pretrain_steps, finetune_steps;
  std::vector<double> class_weights;
  std::size_t ece_bins = 10;
};

TrainConfig train_config(const TrainOptions& o) {
  TrainConfig c;
  if (!o.config.empty()) {
    const auto j = read_json_file(o.config);
    if (!j.is_object()) throw ValidationError(o.config + ": config must be a JSON object");
    for (const auto& [key, v] : j.items()) {
      auto number = [&](double& out) {
        if (!v.is_number()) throw ValidationError("invalid value for '" + key + "': expected a number");
        out = v.get<double>();
      };
      auto count = [&](std::size_t& out) {
        if (!v.is_number_unsigned()) throw ValidationError("invalid value for '" + key + "': expected a non-negative integer");
        out = v.get<std::size_t>();
      };
      if (key == "lr") number(c.lr);
      else if (key == "weight_decay") number(c.weight_decay);
      else if (key == "margin") number(c.margin);
      else if (key == "batch_size") count(c.batch_size);
      else if (key == "pretrain_steps") count(c.pretrain_steps);
      else if (key == "finetune_steps") count(c.finetune_steps);
      else if (key == "seed") {
        if (!v.is_number_unsigned()) throw ValidationError("invalid value for 'seed': expected a non-negative integer");
        c.seed = v.get<std::uint64_t>();
      } else if (key == "class_weights") {
        if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number())
          throw ValidationError("invalid value for 'class_weights': expected [w0, w1]");
        c.class_weights = {v[0].get<double>(), v[1].get<double>()};
      } else {
        throw ValidationError("unknown training config key '" + key + "'");
      }
    }
  }
  if (o.seed) c.seed = *o.seed;
  if (o.lr) c.lr = *o.lr;
  if (o.weight_decay) c.weight_decay = *o.weight_decay;
  if (o.margin) c.margin = *o.margin;
  if (o.batch_size) c.batch_size = *o.batch_size;
  if (o.pretrain_steps) c.pretrain_steps = *o.pretrain_steps;
  if (o.finetune_steps) c.finetune_steps = *o.finetune_steps;
  if (!o.class_weights.empty()) {
    if (o.class_weights.size() != 2) throw ValidationError("--class-weights takes exactly two values");
    c.class_weights = {o.class_weights[0], o.class_weights[1]};
  }
  c.validate();
  return c;
}

FeatureSet load_features(const std::string& path, const std::string& format_flag) {
  auto set = read_feature_set(path);
  if (set.answers.empty()) throw ValidationError(path + ": no answers");
  if (!format_flag.empty() && parse_format(format_flag, "--format") != set.format)
    throw ValidationError(path + ": holds " + std::string(to_string(set.format)) + " features but --format is " +
                          format_flag);
  return set;
}

void print_metrics(const std::string& title, const MetricReport& rep, double classifier_accuracy) {
  std::cout << reports_to_table({{title, rep}});
  std::printf("classifier accuracy (p >= 0.5 vs label): %.4f\n", classifier_accuracy);
}

double classifier_accuracy(std::span<const EvalRecord> recs) {
  std::size_t hit = 0;
  for (const auto& r : recs) hit += (r.p >= 0.5) == (r.o == 1);
  return static_cast<double>(hit) / static_cast<double>(recs.size());
}

int run_pretrain(const TrainOptions& o) {
  const auto cfg = train_config(o);
  const auto train = load_features(o.train, o.format);
  check_format(train.answers, train.format);
  require_both_classes(train.answers);

  ConfidenceModel model;
  model.format = train.format;
  model.config = cfg;
  model.standardizer = Standardizer::fit(train.answers);
  const auto data = standardize(train.answers, model.standardizer);
  model.net = ConfidenceNet<float>::initialized(train.format, derive_seed(cfg.seed, train_streams::kInit));
  const auto curve = contrastive_pretrain(model.net, data, cfg);

  const auto bytes = encode_model(model);
  ensure_parent(o.out);
  io::write_file(o.out, bytes);
  io::write_text(sibling(o.out, ".pretrain_loss.csv"), loss_curve_csv(curve));
  std::cerr << "pre-trained " << to_string(train.format) << " encoder for " << cfg.pretrain_steps
            << " steps; final contrastive loss " << (curve.empty() ? 0.0 : curve.back().loss) << "\n";
  return 0;
}

int run_train(const TrainOptions& o) {
  auto cfg = train_config(o);
  const auto train = load_features(o.train, o.format);
  std::optional<FeatureSet> val;
  if (!o.val.empty()) {
    val = load_features(o.val, o.format);
    if (val->format != train.format) throw ValidationError("training and validation features differ in format");
    check_format(val->answers, val->format);
  }
  check_format(train.answers, train.format);
  require_both_classes(train.answers);

  TrainResult result;
  if (!o.init.empty()) {
    // Start from a pre-trained encoder: reuse its weights and standardizer and
    // skip the contrastive stage.
    auto pre = load_model(o.init);
    if (pre.format != train.format) throw ValidationError(o.init + ": pre-trained model format does not match features");
    cfg.pretrain_steps = pre.config.pretrain_steps;
    result.model = joint_finetune(pre.net, train.answers, cfg, &pre.standardizer, &result.finetune_curve);
  } else {
    result = train_confidence_model(train.answers, train.format, cfg);
  }

  const auto bytes = encode_model(result.model);
  ensure_parent(o.out);
  io::write_file(o.out, bytes);
  if (!result.pretrain_curve.empty())
    io::write_text(sibling(o.out, ".pretrain_loss.csv"), loss_curve_csv(result.pretrain_curve));
  io::write_text(sibling(o.out, ".finetune_loss.csv"), loss_curve_csv(result.finetune_curve));
  std::cerr << "trained " << to_string(train.format) << " model (" << result.model.net.parameter_count()
            << " parameters), wrote " << o.out << "\n";

  if (val) {
    std::vector<EvalRecord> recs;
    for (const auto& fm : val->answers) recs.push_back({result.model.predict(fm), static_cast<int>(fm.label)});
    print_metrics("validation", evaluate(recs, o.ece_bins), classifier_accuracy(recs));
  }
  return 0;
}

// ---------------------------------------------------------------- predict

struct PredictOptions {
  std::string model, features, out, task;
};

int run_predict(const PredictOptions& o) {
  const auto model = load_model(o.model);
  const auto set = read_feature_set(o.features);
  if (set.format != model.format)
    throw ValidationError("model is " + std::string(to_string(model.format)) + " but " + o.features + " holds " +
                          std::string(to_string(set.format)) + " features");
  check_format(set.answers, set.format);
  std::string out;
  for (const auto& fm : set.answers) {
    nlohmann::ordered_json j;
    j["answer_id"] = fm.answer_id;
    j["p"] = model.predict(fm);
    j["label"] = fm.label;
    if (!o.task.empty()) j["task"] = o.task;
    out += j.dump() + "\n";
  }
  ensure_parent(o.out);
  io::write_text(o.out, out);
  std::cerr << "wrote " << set.answers.size() << " predictions to " << o.out << "\n";
  return 0;
}

// ---------------------------------------------------------------- evaluate

struct EvaluateOptions {
  std::string predictions, out, scorer = "model", dump;
  std::size_t ece_bins = 10;
};

std::map<std::string, std::vector<EvalRecord>> load_predictions(const std::string& path) {
  std::map<std::string, std::vector<EvalRecord>> by_task;
  const auto text = io::read_text(path);
  std::size_t line_no = 0, start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    const auto line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = path + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ValidationError(where + ": invalid JSON");
    }
    if (!j.is_object() || !j.contains("p") || !j["p"].is_number() || !j.contains("label") ||
        !j["label"].is_number_integer())
      throw ValidationError(where + ": expected an object with numeric 'p' and integer 'label'");
    const std::string task = j.contains("task") && j["task"].is_string() ? j["task"].get<std::string>() : "";
    by_task[task].push_back({j["p"].get<double>(), j["label"].get<int>()});
  }
  if (by_task.empty()) throw ValidationError(path + ": no predictions");
  return by_task;
}

int run_evaluate(const EvaluateOptions& o) {
  if (o.ece_bins == 0) throw ValidationError("--ece-bins must be positive");
  std::map<std::string, std::vector<EvalRecord>> by_task;
  if (o.scorer == "msp") {
    if (o.dump.empty()) throw ValidationError("--scorer msp needs --dump");
    const auto dump = read_dump(o.dump);
    auto& recs = by_task[""];
    for (const auto& r : dump.records) recs.push_back({msp_confidence(r, dump.lm_head), static_cast<int>(r.label)});
    if (recs.empty()) throw ValidationError(o.dump + ": dump has no records");
  } else if (o.scorer == "model") {
    if (o.predictions.empty()) throw ValidationError("--predictions is required with --scorer model");
    by_task = load_predictions(o.predictions);
  } else {
    throw ValidationError("invalid value for '--scorer': \"" + o.scorer + "\" (expected model or msp)");
  }

  std::vector<EvalRecord> all;
  std::vector<std::pair<std::string, MetricReport>> rows;
  nlohmann::ordered_json report;
  report["scorer"] = o.scorer;
  report["ece_bins"] = o.ece_bins;
  auto& tasks = report["tasks"] = nlohmann::ordered_json::object();
  std::string bins_csv = "task,lower,upper,count,confidence,accuracy\n";
  const bool multi = by_task.size() > 1 || !by_task.begin()->first.empty();
  for (const auto& [task, recs] : by_task) {
    all.insert(all.end(), recs.begin(), recs.end());
    if (!multi) continue;
    auto rep = evaluate(recs, o.ece_bins);
    tasks[task] = report_to_json(rep);
    bins_csv += bins_to_csv(rep.bins, task);
    rows.emplace_back(task, std::move(rep));
  }
  const auto aggregate = evaluate(all, o.ece_bins);
  report["aggregate"] = report_to_json(aggregate);
  bins_csv += bins_to_csv(aggregate.bins, "all");
  rows.emplace_back("all", aggregate);

  const auto table = reports_to_table(rows);
  ensure_parent(o.out);
  io::write_text(o.out, report.dump(2) + "\n");
  io::write_text(sibling(o.out, ".txt"), table);
  io::write_text(sibling(o.out, ".bins.csv"), bins_csv);
  std::cout << table;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Confidence estimation from perturbed hidden-state stability"};
  app.require_subcommand(1);

  GenOptions gen;
  auto* gen_cmd = app.add_subcommand("gen", "Generate a synthetic probe dump");
  gen_cmd->add_option("--config", gen.config, "ToyLM config JSON");
  gen_cmd->add_option("--out", gen.out, "Output dump directory")->required();
  gen_cmd->add_option("--seed", gen.seed, "Overrides config seed");
  gen_cmd->add_option("--n-records", gen.n_records, "Overrides config n_records");
  gen_cmd->add_option("--record-offset", gen.record_offset, "Index of the first record (for disjoint splits)");
  gen_cmd->add_option("--d-h", gen.d_h, "Hidden dimension");
  gen_cmd->add_option("--vocab", gen.vocab, "Vocabulary size");
  gen_cmd->add_option("--max-len", gen.max_len, "Longest OE answer");
  gen_cmd->add_option("--separability", gen.separability, "Class separation in [0, 1]");
  gen_cmd->add_option("--format", gen.format, "MC or OE");

  ExtractOptions ex;
  auto* ex_cmd = app.add_subcommand("extract", "Extract perturbation features from a dump");
  ex_cmd->add_option("--dump", ex.dump, "Probe dump directory")->required();
  ex_cmd->add_option("--out", ex.out, "Output feature file")->required();
  ex_cmd->add_option("--eps-max", ex.eps_max, "Largest perturbation radius")->capture_default_str();
  ex_cmd->add_option("--steps", ex.steps, "Number of perturbation steps S")->capture_default_str();
  ex_cmd->add_option("--threads", ex.threads, "Worker threads")->capture_default_str();
  ex_cmd->add_option("--csv", ex.csv, "Also write a per-token CSV");
  ex_cmd->add_option("--jsonl", ex.jsonl, "Also write a per-token JSONL");
  ex_cmd->add_flag("--quiet", ex.quiet, "No progress output");

  TrainOptions tr;
  auto add_train_flags = [&tr](CLI::App* cmd) {
    cmd->add_option("--train", tr.train, "Training feature file")->required();
    cmd->add_option("--format", tr.format, "MC or OE (checked against the features)");
    cmd->add_option("--out", tr.out, "Output model file")->required();
    cmd->add_option("--config", tr.config, "Training config JSON");
    cmd->add_option("--seed", tr.seed, "Random seed (default 0)");
    cmd->add_option("--lr", tr.lr, "AdamW learning rate (default 1e-4)");
    cmd->add_option("--weight-decay", tr.weight_decay, "AdamW decoupled weight decay (default 0.1)");
    cmd->add_option("--batch-size", tr.batch_size, "Mini-batch size (default 32)");
    cmd->add_option("--pretrain-steps", tr.pretrain_steps, "Contrastive steps (default 5000)");
    cmd->add_option("--finetune-steps", tr.finetune_steps, "Fine-tuning steps (default 5000)");
    cmd->add_option("--margin", tr.margin, "Contrastive margin (default 1.0)");
    cmd->add_option("--class-weights", tr.class_weights, "Cross-entropy weights for labels 0 and 1")->expected(2);
  };
  auto* pre_cmd = app.add_subcommand("pretrain", "Contrastive encoder pre-training only");
  add_train_flags(pre_cmd);
  auto* train_cmd = app.add_subcommand("train", "Pre-train and fine-tune a confidence model");
  add_train_flags(train_cmd);
  train_cmd->add_option("--val", tr.val, "Validation feature file");
  train_cmd->add_option("--init", tr.init, "Start from a pre-trained model (skips pre-training)");
  train_cmd->add_option("--ece-bins", tr.ece_bins, "Bins for validation ECE")->capture_default_str();

  PredictOptions pr;
  auto* pr_cmd = app.add_subcommand("predict", "Score answers with a trained model");
  pr_cmd->add_option("--model", pr.model, "Model file")->required();
  pr_cmd->add_option("--features", pr.features, "Feature file")->required();
  pr_cmd->add_option("--out", pr.out, "Output JSONL")->required();
  pr_cmd->add_option("--task", pr.task, "Task name attached to every prediction");

  EvaluateOptions ev;
  auto* ev_cmd = app.add_subcommand("evaluate", "Calibration and discrimination metrics");
  ev_cmd->add_option("--predictions", ev.predictions, "Prediction JSONL (answer_id, p, label[, task])");
  ev_cmd->add_option("--out", ev.out, "Report JSON; .txt table and .bins.csv written alongside")->required();
  ev_cmd->add_option("--ece-bins", ev.ece_bins, "Number of ECE bins")->capture_default_str();
  ev_cmd->add_option("--scorer", ev.scorer, "model (read predictions) or msp (score a dump)")->capture_default_str();
  ev_cmd->add_option("--dump", ev.dump, "Probe dump for --scorer msp");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitValidation;
  }

  try {
    if (*gen_cmd) return run_gen(gen);
    if (*ex_cmd) return run_extract(ex);
    if (*pre_cmd) return run_pretrain(tr);
    if (*train_cmd) return run_train(tr);
    if (*pr_cmd) return run_predict(pr);
    if (*ev_cmd) return run_evaluate(ev);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
