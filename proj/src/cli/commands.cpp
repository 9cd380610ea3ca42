#include "commands.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"

#include "fcn/checkpoint.hpp"
#include "fcn/data.hpp"
#include "fcn/metrics.hpp"
#include "fcn/training.hpp"
#include "run_config.hpp"

namespace fcn::cli {

namespace {

struct TrainFlags {
  std::string config;
  std::optional<std::string> variant, train, val, test, vocab, out, report, history, placement;
  std::optional<std::uint64_t> seed;
  std::optional<Index> epochs, batch_size, embed_dim, init_kernel, stack_layers, stack_kernel,
      stack_channels, local_kernel, bucket_width;
  std::optional<double> lr, l2, dropout;
  std::optional<std::size_t> min_count;
  std::optional<unsigned> threads;
};

struct EvalFlags {
  std::string checkpoint, data, vocab, report;
  Index batch_size = 32;
  unsigned threads = 1;
};

struct PredictFlags {
  std::string checkpoint, vocab;
  bool full = false;
};

template <typename T>
void apply(const std::optional<T>& flag, T& slot) {
  if (flag) slot = *flag;
}

void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path);
  os << j.dump(2) << '\n';
}

std::string sidecar(const std::string& vocab, const std::string& checkpoint) {
  return vocab.empty() ? checkpoint + ".vocab.json" : vocab;
}

const std::string& class_name(std::size_t c, std::string& scratch) {
  const LabelRegistry& labels = LabelRegistry::itamoji();
  if (c < labels.size()) return labels.label(c);
  scratch = std::to_string(c);
  return scratch;
}

std::vector<Sample> load_split(const std::string& path, const char* what) {
  std::vector<Sample> samples = load_jsonl(path);
  if (samples.empty()) throw DataError(std::string(what) + " file " + path + " holds no samples");
  return samples;
}

RunConfig effective_config(const TrainFlags& f) {
  RunConfig rc = f.config.empty() ? default_run_config() : load_run_config(f.config);
  apply(f.variant, rc.variant);
  apply(f.train, rc.paths.train);
  apply(f.val, rc.paths.val);
  apply(f.test, rc.paths.test);
  apply(f.vocab, rc.paths.vocab);
  apply(f.out, rc.paths.checkpoint);
  apply(f.report, rc.paths.report);
  apply(f.history, rc.paths.history);
  apply(f.seed, rc.seed);
  apply(f.epochs, rc.train.epochs);
  apply(f.batch_size, rc.train.batch_size);
  apply(f.bucket_width, rc.train.bucket_width);
  apply(f.lr, rc.train.learning_rate);
  apply(f.embed_dim, rc.model.embed_dim);
  apply(f.init_kernel, rc.model.init_kernel);
  apply(f.stack_layers, rc.model.stack_layers);
  apply(f.stack_kernel, rc.model.stack_kernel);
  apply(f.stack_channels, rc.model.stack_channels);
  apply(f.local_kernel, rc.model.attention.local_kernel);
  apply(f.dropout, rc.model.dropout_p);
  apply(f.min_count, rc.min_count);
  apply(f.threads, rc.threads);
  if (f.l2) rc.model.l2_scale = rc.train.l2_scale = *f.l2;
  if (f.placement) {
    if (*f.placement == "before_output") {
      rc.model.attention.placement = AttentionPlacement::before_output;
    } else if (*f.placement == "after_output") {
      rc.model.attention.placement = AttentionPlacement::after_output;
    } else {
      throw ConfigError("unknown placement '" + *f.placement + "'");
    }
  }
  if (const char* env = std::getenv("FCN_SEED")) {
    try {
      std::size_t used = 0;
      rc.seed = std::stoull(env, &used);
      if (used != std::string(env).size()) throw std::invalid_argument(env);
    } catch (const std::exception&) {
      throw ConfigError(std::string("FCN_SEED is not an unsigned integer: ") + env);
    }
  }
  if (rc.paths.train.empty()) throw ConfigError("no training data: set paths.train or --train");
  if (rc.paths.checkpoint.empty()) {
    throw ConfigError("no checkpoint path: set paths.checkpoint or --out");
  }
  if (rc.paths.history.empty()) rc.paths.history = rc.paths.checkpoint + ".history.jsonl";
  if (rc.paths.report.empty()) rc.paths.report = rc.paths.checkpoint + ".report.json";
  rc.resolve();
  return rc;
}

int cmd_train(const TrainFlags& flags, std::ostream& out, std::ostream& err) {
  RunConfig rc = effective_config(flags);
  const std::vector<Sample> train_samples = load_split(rc.paths.train, "training");
  const std::vector<Sample> val_samples =
      rc.paths.val.empty() ? train_samples : load_split(rc.paths.val, "validation");
  const Vocab vocab = Vocab::build(train_samples, rc.min_count);
  rc.model.vocab_size = static_cast<Index>(vocab.size());
  rc.model.validate();

  const EncodedDataset train = encode_dataset(train_samples, vocab);
  const EncodedDataset val = encode_dataset(val_samples, vocab);
  Model<float> model(rc.model);

  std::ofstream history(rc.paths.history, std::ios::binary);
  if (!history) throw DataError("cannot write " + rc.paths.history);
  FitHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& r) {
    nlohmann::json line = to_json(r);
    line.erase("seconds");
    history << line.dump() << '\n';
    char buf[160];
    std::snprintf(buf, sizeof buf, "epoch %zu/%lld  loss %.5f  val macro %.4f  micro %.4f  (%.1f s)\n",
                  r.epoch, static_cast<long long>(rc.train.epochs), r.train_loss,
                  r.val_macro_f1, r.val_micro_f1, r.seconds);
    err << buf << std::flush;
  };
  const std::vector<EpochRecord> records = fit(model, train, val, rc.train, hooks);
  history.close();

  save(model, rc.paths.checkpoint);
  vocab.save(rc.vocab_path());

  const bool has_test = !rc.paths.test.empty();
  const EncodedDataset scored =
      has_test ? encode_dataset(load_split(rc.paths.test, "test"), vocab) : val;
  const ConfusionMatrix cm = evaluate(model, scored, rc.train.batch_size, rc.threads);
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& r : records) hist.push_back(to_json(r));
  nlohmann::json report = report_json(cm);
  report["split"] = has_test ? "test" : rc.paths.val.empty() ? "train" : "val";
  report["config"] = to_json(rc);
  report["history"] = hist;
  write_json(rc.paths.report, report);

  out << report_table(cm);
  out << "checkpoint " << rc.paths.checkpoint << "\nreport " << rc.paths.report << '\n';
  return kOk;
}

int cmd_eval(const EvalFlags& f, std::ostream& out) {
  if (f.threads < 1) throw ConfigError("threads must be at least 1");
  const Model<float> model = load(f.checkpoint);
  const Vocab vocab = Vocab::load(sidecar(f.vocab, f.checkpoint));
  const EncodedDataset data = encode_dataset(load_split(f.data, "evaluation"), vocab);
  const ConfusionMatrix cm = evaluate(model, data, f.batch_size, f.threads);
  out << report_table(cm);
  if (!f.report.empty()) {
    nlohmann::json report = report_json(cm);
    report["checkpoint"] = f.checkpoint;
    report["data"] = f.data;
    write_json(f.report, report);
  }
  return kOk;
}

int cmd_predict(const PredictFlags& f, std::istream& in, std::ostream& out, std::ostream& err) {
  const Model<float> model = load(f.checkpoint);
  const Vocab vocab = Vocab::load(sidecar(f.vocab, f.checkpoint));
  std::string line, scratch;
  std::size_t number = 0;
  char buf[32];
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      err << "warning: line " << number << " is empty, skipped\n";
      continue;
    }
    const std::vector<std::int32_t> ids = encode(line, vocab);
    IdMatrix batch(1, static_cast<Index>(ids.size()));
    for (std::size_t t = 0; t < ids.size(); ++t) batch(0, static_cast<Index>(t)) = ids[t];
    const Matrix<float> logits = model.forward(batch, LengthMask::full(1, batch.cols()));
    const Matrix<double> probs = softmax(logits.cast<double>().eval(), Axis::row);
    Index best = 0;
    probs.row(0).maxCoeff(&best);
    std::snprintf(buf, sizeof buf, "%.6f", probs(0, best));
    out << class_name(static_cast<std::size_t>(best), scratch) << '\t' << buf;
    if (f.full) {
      for (Index c = 0; c < probs.cols(); ++c) {
        std::snprintf(buf, sizeof buf, "%.9g", probs(0, c));
        out << '\t' << buf;
      }
    }
    out << '\n';
  }
  return kOk;
}

int cmd_inspect(const std::string& path, std::ostream& out) {
  const CheckpointInfo info = inspect(read_file(path));
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x", info.crc);
  out << "format FCNC version " << info.version << "  crc32 " << buf << '\n';
  out << "config " << nlohmann::json::parse(info.config_json).dump(2) << '\n';
  std::uint64_t total = 0;
  for (const auto& p : info.params) {
    std::uint64_t n = 1;
    std::string dims;
    for (std::uint32_t d : p.dims) {
      n *= d;
      dims += (dims.empty() ? "" : " x ") + std::to_string(d);
    }
    total += n;
    out << "  " << p.name << "  [" << dims << "]\n";
  }
  out << info.params.size() << " tensors, " << total << " parameters\n";
  return kOk;
}

}  // namespace

int cmd_gradcheck(const std::vector<GradCheckCase>& cases, std::ostream& out, std::ostream& err) {
  const GradCheckReport report = run_gradcheck(cases);
  out << format_gradcheck(report);
  if (report.passed) return kOk;
  err << "gradcheck failed:";
  for (const auto& row : report.rows) {
    if (!row.passed) err << ' ' << row.name;
  }
  err << '\n';
  return kGradCheckFailed;
}

int run(const std::vector<std::string>& args, std::istream& in, std::ostream& out,
        std::ostream& err) {
  CLI::App app("Fully convolutional character-level text classifier", "fcn");
  app.require_subcommand(0, 1);
  bool print_default = false;
  app.add_flag("--print-default-config", print_default,
               "Print the reference configuration as a run config and exit");

  TrainFlags tf;
  CLI::App* train = app.add_subcommand("train", "Train a model and write checkpoint, history, report");
  train->add_option("--config", tf.config, "Run config JSON");
  train->add_option("--variant", tf.variant, "none, dot1, dot8, simp1, simp8, local1 or local8");
  train->add_option("--train", tf.train, "Training JSONL");
  train->add_option("--val", tf.val, "Validation JSONL (default: the training set)");
  train->add_option("--test", tf.test, "Test JSONL scored in the final report");
  train->add_option("--vocab", tf.vocab, "Vocabulary output (default: <out>.vocab.json)");
  train->add_option("--out", tf.out, "Checkpoint output");
  train->add_option("--report", tf.report, "Report JSON (default: <out>.report.json)");
  train->add_option("--history", tf.history, "History JSONL (default: <out>.history.jsonl)");
  train->add_option("--seed", tf.seed);
  train->add_option("--epochs", tf.epochs);
  train->add_option("--batch-size", tf.batch_size);
  train->add_option("--bucket-width", tf.bucket_width);
  train->add_option("--lr", tf.lr);
  train->add_option("--l2", tf.l2);
  train->add_option("--dropout", tf.dropout);
  train->add_option("--embed-dim", tf.embed_dim);
  train->add_option("--init-kernel", tf.init_kernel);
  train->add_option("--stack-layers", tf.stack_layers);
  train->add_option("--stack-kernel", tf.stack_kernel);
  train->add_option("--stack-channels", tf.stack_channels);
  train->add_option("--local-kernel", tf.local_kernel);
  train->add_option("--placement", tf.placement, "before_output or after_output");
  train->add_option("--min-count", tf.min_count, "Minimum character frequency for the vocabulary");
  train->add_option("--threads", tf.threads, "Workers for the final evaluation");

  EvalFlags ef;
  CLI::App* eval = app.add_subcommand("eval", "Score a JSONL file with a checkpoint");
  eval->add_option("--checkpoint", ef.checkpoint)->required();
  eval->add_option("--data", ef.data)->required();
  eval->add_option("--vocab", ef.vocab);
  eval->add_option("--report", ef.report);
  eval->add_option("--batch-size", ef.batch_size);
  eval->add_option("--threads", ef.threads);

  PredictFlags pf;
  CLI::App* predict = app.add_subcommand("predict", "Label one text per line of standard input");
  predict->add_option("--checkpoint", pf.checkpoint)->required();
  predict->add_option("--vocab", pf.vocab);
  predict->add_flag("--full", pf.full, "Also print all class probabilities");

  app.add_subcommand("gradcheck", "Check every analytic gradient against central differences");

  std::string inspect_path;
  CLI::App* insp = app.add_subcommand("inspect", "Print a checkpoint's header and tensor shapes");
  insp->add_option("checkpoint", inspect_path)->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (print_default) {
      out << to_json(default_run_config()).dump(2) << '\n';
      return kOk;
    }
    if (*train) return cmd_train(tf, out, err);
    if (*eval) return cmd_eval(ef, out);
    if (*predict) return cmd_predict(pf, in, out, err);
    if (app.got_subcommand("gradcheck")) return cmd_gradcheck(default_gradcheck_cases(), out, err);
    if (*insp) return cmd_inspect(inspect_path, out);
    out << app.help();
    return kConfigError;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const DivergenceError& e) {
    err << "training diverged: " << e.what() << '\n';
    return kDiverged;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::exception& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  }
}

}  // namespace fcn::cli
