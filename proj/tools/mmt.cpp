// mmt: command-line driver for BPE, vocabulary, training and decoding.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mmt/bpe.hpp"
#include "mmt/checkpoint.hpp"
#include "mmt/corpus.hpp"
#include "mmt/errors.hpp"
#include "mmt/evaluation.hpp"
#include "mmt/features.hpp"
#include "mmt/run_config.hpp"
#include "mmt/trainer.hpp"
#include "mmt/vocab.hpp"

namespace fs = std::filesystem;
using namespace mmt;

namespace {

enum Exit { kOk = 0, kUsage = 2, kData = 3, kCheckpoint = 4, kNumerics = 5 };

// Anything wrong with a checkpoint or its fit to the vocabulary.
struct CheckpointMismatch : Error {
  using Error::Error;
};

void require_file(const std::string& path) {
  if (!fs::exists(path)) throw DataError("no such file: '" + path + "'");
}

Checkpoint load_ckpt(const std::string& path) {
  require_file(path);
  try {
    return load_checkpoint(path);
  } catch (const FormatError& e) {
    throw CheckpointMismatch(e.what());
  }
}

struct ModelSource {
  std::string checkpoint;
  std::string dir;
  int average_last = 10;

  void add(CLI::App* app) {
    auto* one = app->add_option("--checkpoint", checkpoint, "single checkpoint file");
    auto* many = app->add_option("--checkpoint-dir", dir, "directory of checkpoint_<step>.mmtb files");
    one->excludes(many);
    app->add_option("--average-last", average_last, "average this many latest checkpoints from --checkpoint-dir")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
  }

  Model load(const Vocabulary* vocab) const {
    if (checkpoint.empty() == dir.empty()) throw ConfigError("give exactly one of --checkpoint or --checkpoint-dir");
    Checkpoint ckpt;
    if (!checkpoint.empty()) {
      ckpt = load_ckpt(checkpoint);
    } else {
      auto paths = list_step_checkpoints(dir);
      if (paths.empty()) throw DataError("no checkpoints in '" + dir + "'");
      if (paths.size() > static_cast<std::size_t>(average_last))
        paths.erase(paths.begin(), paths.end() - average_last);
      std::vector<Checkpoint> ckpts;
      for (const auto& p : paths) ckpts.push_back(load_ckpt(p));
      try {
        ckpt = average_checkpoints(ckpts);
      } catch (const FormatError& e) {
        throw CheckpointMismatch(e.what());
      }
    }
    try {
      Model model = model_from_checkpoint(ckpt);
      if (vocab && vocab->size() != model.config().vocab_size)
        throw CheckpointMismatch("vocabulary has " + std::to_string(vocab->size()) + " symbols, checkpoint expects " +
                                 std::to_string(model.config().vocab_size));
      return model;
    } catch (const FormatError& e) {
      throw CheckpointMismatch(e.what());
    } catch (const ConfigError& e) {
      throw CheckpointMismatch(e.what());
    }
  }
};

// Source sentences plus their image ids, for decoding.
std::vector<ParallelExample> decode_inputs(const std::string& src_path, const std::string& images_path,
                                           const Vocabulary& vocab) {
  require_file(src_path);
  require_file(images_path);
  const auto src = read_lines(src_path);
  const auto images = read_lines(images_path);
  if (src.size() != images.size())
    throw DataError("source has " + std::to_string(src.size()) + " lines but the image index has " +
                    std::to_string(images.size()));
  if (src.empty()) throw DataError("empty source corpus '" + src_path + "'");
  std::vector<ParallelExample> out;
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto ids = vocab.encode(src[i]);
    if (ids.empty()) throw DataError(src_path + ":" + std::to_string(i + 1) + ": empty sentence");
    out.push_back({std::move(ids), {}, images[i]});
  }
  return out;
}

std::vector<FeatureVector> gather_features(const std::vector<ParallelExample>& corpus, const FeatureTable* table,
                                           Index dim, bool zero) {
  std::vector<FeatureVector> out;
  for (const auto& ex : corpus) {
    if (zero) {
      out.push_back(FeatureVector::Zero(dim));
    } else {
      out.push_back(table->at(ex.image_id));
    }
  }
  return out;
}

void write_output(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream os(path, std::ios::binary);
  os << text;
  if (!os) throw DataError("cannot write '" + path + "'");
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string step_line(const StepReport& r) {
  std::string s = "step=" + std::to_string(r.step) + " epoch=" + std::to_string(r.epoch) + " lr=";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6e", r.lr);
  s += buf;
  s += " l_syn=" + fmt(r.loss.l_syn) + " l_aut=" + fmt(r.loss.l_aut) + " l_trans=" + fmt(r.loss.l_trans) +
       " l_kl=" + fmt(r.loss.l_kl) + " l_ot=" + fmt(r.loss.l_ot) + " total=" + fmt(r.loss.total) +
       " tokens=" + std::to_string(r.target_tokens);
  if (r.skipped) s += " skipped=1 message=\"" + r.message + "\"";
  return s;
}

nlohmann::json step_json(const StepReport& r) {
  nlohmann::json j = {{"step", r.step},          {"epoch", r.epoch},         {"lr", r.lr},
                      {"l_syn", r.loss.l_syn},   {"l_aut", r.loss.l_aut},    {"l_trans", r.loss.l_trans},
                      {"l_kl", r.loss.l_kl},     {"l_ot", r.loss.l_ot},      {"total", r.loss.total},
                      {"tokens", r.target_tokens}, {"skipped", r.skipped}};
  if (r.skipped) j["message"] = r.message;
  return j;
}

// Keeps the newest `keep` step checkpoints in `dir`.
void prune_checkpoints(const std::string& dir, int keep) {
  auto paths = list_step_checkpoints(dir);
  if (paths.size() <= static_cast<std::size_t>(keep)) return;
  for (std::size_t i = 0; i + keep < paths.size(); ++i) fs::remove(paths[i]);
}

// "--section.key value" and "--section.key=value" pairs.
std::map<std::string, std::string> parse_overrides(const std::vector<std::string>& extras) {
  std::map<std::string, std::string> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const auto& arg = extras[i];
    if (arg.rfind("--", 0) != 0 || arg.find('.') == std::string::npos)
      throw ConfigError("unexpected argument '" + arg + "'");
    const auto eq = arg.find('=');
    if (eq != std::string::npos) {
      out[arg.substr(2, eq - 2)] = arg.substr(eq + 1);
    } else {
      if (i + 1 >= extras.size()) throw ConfigError("override '" + arg + "' needs a value");
      out[arg.substr(2)] = extras[++i];
    }
  }
  return out;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& extras, const std::string& resume) {
  if (!fs::exists(config_path)) throw ConfigError("no such config file: '" + config_path + "'");
  RunConfig cfg = load_run_config(config_path, parse_overrides(extras));
  cfg.validate();

  const auto vocab = Vocabulary::load(cfg.vocab);
  if (cfg.model.vocab_size != 0 && cfg.model.vocab_size != vocab.size())
    throw ConfigError("model.vocab_size disagrees with the vocabulary (" + std::to_string(vocab.size()) + ")");
  cfg.model.vocab_size = vocab.size();
  cfg.model.validate();

  auto examples = load_examples(cfg.src, cfg.tgt, cfg.images, vocab);
  auto syn = FeatureTable::load(cfg.syn_features);
  auto aut = FeatureTable::load(cfg.aut_features);

  fs::create_directories(cfg.output_dir);
  const fs::path out(cfg.output_dir);
  write_output((out / "config.resolved").string(), cfg.echo());

  Trainer trainer(Model(cfg.model, cfg.trainer.seed), cfg.trainer, std::move(examples), std::move(syn),
                  std::move(aut));
  if (!resume.empty()) {
    const auto ckpt = load_ckpt(resume);
    try {
      trainer.resume(ckpt);
    } catch (const FormatError& e) {
      throw CheckpointMismatch(e.what());
    }
  }

  std::ofstream log((out / "train.log").string(), std::ios::app);
  std::ofstream jsonl((out / "train.jsonl").string(), std::ios::app);
  auto save = [&](long step) {
    const auto path = (out / ("checkpoint_" + std::to_string(step) + ".mmtb")).string();
    save_checkpoint(trainer.checkpoint(), path);
    prune_checkpoints(cfg.output_dir, cfg.trainer.keep_last);
  };
  long last_saved = -1;
  int skipped_in_a_row = 0;
  while (!trainer.done()) {
    const StepReport r = trainer.step();
    skipped_in_a_row = r.skipped ? skipped_in_a_row + 1 : 0;
    const auto line = step_line(r);
    log << line << '\n' << std::flush;
    jsonl << step_json(r).dump() << '\n' << std::flush;
    std::cout << line << '\n';
    const long every = cfg.trainer.checkpoint_every;
    if ((every > 0 && r.step % every == 0) || (every == 0 && r.epoch_end)) {
      save(r.step);
      last_saved = r.step;
    }
    if (skipped_in_a_row >= 10) throw NumericsError("ten consecutive updates rolled back: " + r.message);
  }
  if (last_saved != trainer.steps()) save(trainer.steps());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal translation with synthetic and authentic image features"};
  app.require_subcommand(1);

  // learn-bpe
  std::vector<std::string> bpe_inputs;
  std::string bpe_output;
  std::size_t merges = 10000;
  auto* learn = app.add_subcommand("learn-bpe", "learn BPE merges from tokenised text");
  learn->add_option("-i,--input", bpe_inputs, "training text (one or more files)")->required();
  learn->add_option("-o,--output", bpe_output, "merge list to write")->required();
  learn->add_option("--merges", merges, "number of merge operations")->capture_default_str();

  // apply-bpe
  std::string codes;
  std::string apply_in;
  std::string apply_out;
  auto* apply = app.add_subcommand("apply-bpe", "segment text with learned merges");
  apply->add_option("-c,--codes", codes, "merge list")->required();
  apply->add_option("-i,--input", apply_in, "text to segment")->required();
  apply->add_option("-o,--output", apply_out, "segmented output (default stdout)");

  // build-vocab
  std::vector<std::string> vocab_inputs;
  std::string vocab_out;
  auto* build_vocab = app.add_subcommand("build-vocab", "shared vocabulary from segmented corpora");
  build_vocab->add_option("-i,--input", vocab_inputs, "segmented corpora")->required();
  build_vocab->add_option("-o,--output", vocab_out, "vocabulary file")->required();

  // train
  std::string config_path;
  std::string resume;
  auto* train = app.add_subcommand("train", "train from a key=value config; override with --section.key value");
  train->add_option("config", config_path, "run configuration")->required();
  train->add_option("--resume", resume, "continue from a checkpoint");
  train->allow_extras();

  // translate / evaluate / probe-similarity
  ModelSource source;
  std::string vocab_path;
  std::string input;
  std::string images;
  std::string features;
  std::string output;
  std::string reference;
  bool zero_features = false;
  bool incongruent = false;
  int beam = 5;
  int max_len = 0;
  auto decode_options = [&](CLI::App* sub) {
    source.add(sub);
    sub->add_option("--vocab", vocab_path, "vocabulary file")->required();
    sub->add_option("-i,--input", input, "segmented source text")->required();
    sub->add_option("--images", images, "image id per source line")->required();
    sub->add_option("--features", features, "feature table for the image ids");
    sub->add_option("--beam", beam, "beam size")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--max-len", max_len, "output length cap (0: 1.5 * source + 10)")->capture_default_str();
  };
  auto* translate_cmd = app.add_subcommand("translate", "decode a corpus");
  decode_options(translate_cmd);
  translate_cmd->add_flag("--zero-features", zero_features, "replace every feature vector with zeros");
  translate_cmd->add_option("-o,--output", output, "detokenised translations (default stdout)");

  auto* evaluate = app.add_subcommand("evaluate", "decode and score with corpus BLEU");
  decode_options(evaluate);
  evaluate->add_option("-r,--reference", reference, "reference translations")->required();
  evaluate->add_flag("--zero-features", zero_features, "replace every feature vector with zeros");
  evaluate->add_flag("--incongruent", incongruent, "also decode with zeroed features and report the BLEU change");

  std::string syn_path;
  std::string aut_path;
  std::string jsonl_out;
  auto* probe = app.add_subcommand("probe-similarity", "cosine similarity of projected synthetic/authentic features");
  source.add(probe);
  probe->add_option("--images", images, "image index")->required();
  probe->add_option("--syn", syn_path, "synthetic feature table")->required();
  probe->add_option("--aut", aut_path, "authentic feature table")->required();
  probe->add_option("--jsonl", jsonl_out, "per-example similarities");

  std::string avg_dir;
  std::vector<std::string> avg_inputs;
  int avg_last = 10;
  std::string avg_out;
  auto* average = app.add_subcommand("average-checkpoints", "element-wise parameter mean");
  average->add_option("inputs", avg_inputs, "checkpoint files");
  average->add_option("--dir", avg_dir, "take the latest checkpoints from this directory");
  average->add_option("--last", avg_last, "how many from --dir")->capture_default_str()->check(CLI::PositiveNumber);
  average->add_option("-o,--output", avg_out, "averaged checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*learn) {
      std::vector<std::string> lines;
      for (const auto& p : bpe_inputs) {
        require_file(p);
        for (auto& l : read_lines(p)) lines.push_back(std::move(l));
      }
      learn_bpe(lines, merges).save(bpe_output);
    } else if (*apply) {
      require_file(codes);
      require_file(apply_in);
      const auto model = BpeModel::load(codes);
      std::string text;
      for (const auto& l : read_lines(apply_in)) text += model.segment_line(l) + "\n";
      write_output(apply_out, text);
    } else if (*build_vocab) {
      std::vector<std::string> lines;
      for (const auto& p : vocab_inputs) {
        require_file(p);
        for (auto& l : read_lines(p)) lines.push_back(std::move(l));
      }
      Vocabulary::build(lines).save(vocab_out);
    } else if (*train) {
      return cmd_train(config_path, train->remaining(), resume);
    } else if (*translate_cmd || *evaluate) {
      require_file(vocab_path);
      const auto vocab = Vocabulary::load(vocab_path);
      const Model model = source.load(&vocab);
      const auto corpus = decode_inputs(input, images, vocab);
      std::optional<FeatureTable> table;
      if (!features.empty()) {
        require_file(features);
        table = FeatureTable::load(features);
        if (table->dim() != model.config().d_feat) throw DataError("feature dimension does not match the model");
      }
      if (!table && (!zero_features || incongruent)) throw ConfigError("--features is required");
      const auto feats = gather_features(corpus, table ? &*table : nullptr, model.config().d_feat, zero_features);
      std::vector<std::vector<int>> srcs;
      for (const auto& ex : corpus) srcs.push_back(ex.src);
      const auto hyps = translate(model, srcs, feats, beam, max_len);
      if (*translate_cmd) {
        std::string text;
        for (const auto& h : hyps) text += to_sentence(vocab, h.tokens) + "\n";
        write_output(output, text);
      } else {
        require_file(reference);
        std::vector<Tokens> refs;
        for (const auto& l : read_lines(reference)) refs.push_back(split_whitespace(detokenize_line(l)));
        std::vector<Tokens> cands;
        for (const auto& h : hyps) cands.push_back(to_words(vocab, h.tokens));
        std::cout << corpus_bleu(cands, refs).to_text();
        if (incongruent) {
          std::cout << incongruent_decode(model, vocab, corpus, *table, refs, beam, max_len).to_text();
        }
      }
    } else if (*probe) {
      const Model model = source.load(nullptr);
      require_file(images);
      require_file(syn_path);
      require_file(aut_path);
      std::vector<ParallelExample> corpus;
      for (auto& id : read_lines(images)) corpus.push_back({{}, {}, std::move(id)});
      const auto syn = FeatureTable::load(syn_path);
      const auto aut = FeatureTable::load(aut_path);
      if (syn.dim() != model.config().d_feat || aut.dim() != model.config().d_feat)
        throw DataError("feature dimension does not match the model");
      const auto report = similarity_probe(model, corpus, syn, aut);
      std::cout << report.to_text();
      if (!jsonl_out.empty()) write_output(jsonl_out, report.to_jsonl());
    } else if (*average) {
      std::vector<std::string> paths = avg_inputs;
      if (!avg_dir.empty()) {
        auto found = list_step_checkpoints(avg_dir);
        if (found.size() > static_cast<std::size_t>(avg_last)) found.erase(found.begin(), found.end() - avg_last);
        paths.insert(paths.end(), found.begin(), found.end());
      }
      if (paths.empty()) throw ConfigError("no checkpoints to average");
      std::vector<Checkpoint> ckpts;
      for (const auto& p : paths) ckpts.push_back(load_ckpt(p));
      Checkpoint avg;
      try {
        avg = average_checkpoints(ckpts);
      } catch (const FormatError& e) {
        throw CheckpointMismatch(e.what());
      }
      save_checkpoint(avg, avg_out);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const CheckpointMismatch& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return kCheckpoint;
  } catch (const NumericsError& e) {
    std::cerr << "numerics error: " << e.what() << '\n';
    return kNumerics;
  } catch (const DegenerateMassError& e) {
    std::cerr << "numerics error: " << e.what() << '\n';
    return kNumerics;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  }
  return kOk;
}
