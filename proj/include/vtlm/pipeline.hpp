#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "vtlm/bleu.hpp"
#include "vtlm/checkpoint.hpp"
#include "vtlm/config.hpp"
#include "vtlm/corpus.hpp"
#include "vtlm/probes.hpp"
#include "vtlm/trainer.hpp"

#ifndef VTLM_BUILD_ID
#define VTLM_BUILD_ID "unknown"
#endif

namespace vtlm {

inline std::string build_id() { return VTLM_BUILD_ID; }

/// Provenance block embedded in every artifact.
inline nlohmann::json provenance(const RunConfig& cfg, const std::string& command) {
  return {{"command", command}, {"build", build_id()}, {"config", cfg.to_json()}};
}

namespace fs = std::filesystem;

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << text;
  if (!out) throw DataError("write failed for " + path);
}

inline nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataSummary {
  std::size_t train = 0;
  std::size_t valid = 0;
  std::size_t test = 0;
  double centroid_accuracy = 0;
  std::string fingerprint;
};

/// Writes train/valid/test triplet files, the joint BPE merges (learned on
/// both sides of the training split), the vocabulary and a manifest.
inline GenDataSummary gen_data(const RunConfig& cfg, const std::string& out_dir, bool force) {
  if (cfg.train_examples < 1 || cfg.valid_examples < 0 || cfg.test_examples < 0) throw ConfigError("split sizes must be positive");
  if (cfg.bpe_merges <= 0) throw ConfigError("bpe_merges must be positive");
  const auto gen = cfg.gen_config();
  gen.validate();
  if (fs::exists(out_dir) && !fs::is_empty(out_dir) && !force) {
    throw ConfigError("output directory " + out_dir + " is not empty (use --force to overwrite)");
  }
  fs::create_directories(out_dir);
  const auto corpus = generate_synthetic(gen, cfg.seed);
  const auto& recs = corpus.records;
  const auto n_train = static_cast<std::size_t>(cfg.train_examples);
  const auto n_valid = static_cast<std::size_t>(cfg.valid_examples);
  std::vector<TripletRecord> train(recs.begin(), recs.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<TripletRecord> valid(recs.begin() + static_cast<std::ptrdiff_t>(n_train),
                                   recs.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid));
  std::vector<TripletRecord> test(recs.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid), recs.end());

  std::vector<std::string> sentences;
  for (const auto& r : train) {
    sentences.push_back(r.src);
    sentences.push_back(r.tgt);
  }
  const auto merges = learn_bpe(sentences, cfg.bpe_merges);
  const auto vocab = build_vocab(merges, sentences);

  write_triplets(out_dir + "/train.jsonl", corpus.header, train);
  write_triplets(out_dir + "/valid.jsonl", corpus.header, valid);
  write_triplets(out_dir + "/test.jsonl", corpus.header, test);
  merges.save(out_dir + "/bpe.merges");
  vocab.save(out_dir + "/vocab.txt");

  GenDataSummary s{train.size(), valid.size(), test.size(), nearest_centroid_accuracy(corpus), vocab.fingerprint()};
  nlohmann::json manifest = provenance(cfg, "gen-data");
  manifest["splits"] = {{"train", s.train}, {"valid", s.valid}, {"test", s.test}};
  manifest["header"] = {{"version", corpus.header.version}, {"D", corpus.header.feat_dim}, {"o", corpus.header.regions},
                        {"label_vocab", corpus.header.label_vocab}};
  manifest["bpe"] = {{"merges_requested", cfg.bpe_merges}, {"merges_learned", merges.size()}, {"vocab_size", vocab.size()}};
  manifest["vocab_fingerprint"] = s.fingerprint;
  manifest["nearest_centroid_last_word_accuracy"] = s.centroid_accuracy;
  manifest["label_words"] = corpus.label_words;
  write_text(out_dir + "/manifest.json", manifest.dump(2) + "\n");
  return s;
}

// ---------------------------------------------------------------------------
// Corpus loading

struct LoadedCorpus {
  CorpusHeader header;
  Tokenizer tokenizer{MergeTable(std::vector<SymbolPair>{}), Vocab()};
  std::string fingerprint;
  std::vector<TripletExample> train;
  std::vector<TripletExample> valid;
  std::vector<TripletExample> test;
};

inline LoadedCorpus load_corpus(const std::string& dir) {
  LoadedCorpus c;
  const auto manifest = read_json(dir + "/manifest.json");
  auto vocab = Vocab::load(dir + "/vocab.txt");
  c.fingerprint = vocab.fingerprint();
  if (manifest.value("vocab_fingerprint", std::string()) != c.fingerprint) {
    throw DataError(dir + ": vocabulary fingerprint " + c.fingerprint + " does not match the corpus manifest");
  }
  c.tokenizer = Tokenizer(MergeTable::load(dir + "/bpe.merges"), std::move(vocab));
  auto load = [&](const std::string& name, std::vector<TripletExample>& out) {
    const auto f = load_triplets(dir + "/" + name);
    if (name == "train.jsonl") {
      c.header = f.header;
    } else if (!(f.header == c.header)) {
      throw SchemaError(name + ": header differs from train.jsonl");
    }
    out = tokenize_all(f.records, c.tokenizer);
  };
  load("train.jsonl", c.train);
  load("valid.jsonl", c.valid);
  load("test.jsonl", c.test);
  return c;
}

// ---------------------------------------------------------------------------
// pretrain / finetune

inline std::string system_id_pretrain(Objective obj, double visual_select_ratio) {
  std::string s = obj == Objective::VTLM ? "vtlm" : "tlm";
  if (obj == Objective::VTLM && visual_select_ratio <= 0) s += "-vis0";
  return s;
}

inline TrainResult pretrain(const RunConfig& cfg, const std::string& data_dir, const std::string& out_dir, bool resume) {
  const auto corpus = load_corpus(data_dir);
  const auto tc = cfg.train_config(Phase::Pretrain);
  const auto obj = cfg.pretrain_objective();
  auto ecfg = cfg.encoder_config(corpus.tokenizer.vocab().size(), tc.dropout);
  ecfg.feat_dim = corpus.header.feat_dim;
  ecfg.label_vocab = corpus.header.label_vocab;
  auto model = VtlmModel<float>::create(ecfg, obj, cfg.seed);
  PretrainTask task(model, corpus.train, corpus.valid, cfg.mask_policy(), cfg.seed, tc.batch_size, cfg.max_len);
  auto prov = provenance(cfg, "pretrain");
  prov["vocab_fingerprint"] = corpus.fingerprint;
  prov["system"] = system_id_pretrain(obj, cfg.visual_select_ratio);
  return train(task, tc, {out_dir}, prov, resume);
}

inline TrainResult finetune(const RunConfig& cfg, const std::string& data_dir, const std::string& init, const std::string& out_dir,
                            bool resume) {
  const auto corpus = load_corpus(data_dir);
  const MtTask task = cfg.mt_task();
  const bool scratch = init == "scratch";
  const auto tc = cfg.train_config(scratch ? Phase::Scratch : Phase::Finetune);
  MtModel<float> model;
  std::string system;
  if (scratch) {
    auto ecfg = cfg.encoder_config(corpus.tokenizer.vocab().size(), tc.dropout);
    ecfg.feat_dim = corpus.header.feat_dim;
    ecfg.label_vocab = corpus.header.label_vocab;
    model = MtModel<float>::scratch(ecfg, task, cfg.seed);
    system = "scratch";
  } else {
    const auto ck = load_checkpoint(init);
    if (ck.header.value("vocab_fingerprint", std::string()) != corpus.fingerprint) {
      throw DataError(init + ": checkpoint vocabulary does not match the corpus at " + data_dir);
    }
    const auto pre = load_pretrained(ck);
    auto ecfg = pre.cfg;
    ecfg.dropout = tc.dropout;
    ecfg.feat_dim = corpus.header.feat_dim;
    model = MtModel<float>::from_pretrained(pre.params, ecfg, task, cfg.copy_cross_attn, cfg.seed);
    system = ck.header.value("system", std::string(pre.objective == Objective::VTLM ? "vtlm" : "tlm"));
    if (!cfg.copy_cross_attn) system += "-nocopy";
  }
  system += std::string("-") + to_string(task);
  std::vector<TripletExample> train_set = corpus.train;
  if (cfg.train_limit > 0 && static_cast<std::size_t>(cfg.train_limit) < train_set.size()) {
    train_set.resize(static_cast<std::size_t>(cfg.train_limit));
  }
  TranslationTask tt(model, train_set, corpus.valid, tc.batch_size);
  auto prov = provenance(cfg, "finetune");
  prov["vocab_fingerprint"] = corpus.fingerprint;
  prov["system"] = system;
  prov["init"] = init;
  return train(tt, tc, {out_dir}, prov, resume);
}

// ---------------------------------------------------------------------------
// translate

/// Reads sources from a triplet file, or from plain text (one sentence per
/// line, NMT only). Writes one detokenised hypothesis per line plus a
/// `<output>.meta.json` provenance sidecar.
inline std::size_t translate_file(const RunConfig& cfg, const std::string& data_dir, const std::string& ckpt_path,
                                  const std::string& input, const std::string& output) {
  const auto corpus = load_corpus(data_dir);
  const auto ck = load_checkpoint(ckpt_path);
  if (ck.header.value("vocab_fingerprint", std::string()) != corpus.fingerprint) {
    throw DataError(ckpt_path + ": checkpoint vocabulary does not match the corpus at " + data_dir);
  }
  const auto model = load_translation(ck);
  std::vector<TripletExample> src;
  std::ifstream in(input);
  if (!in) throw DataError("cannot read " + input);
  std::string first;
  std::getline(in, first);
  in.close();
  bool triplets = false;
  try {
    triplets = nlohmann::json::parse(first).contains("D");
  } catch (const nlohmann::json::exception&) {
  }
  if (triplets) {
    src = tokenize_all(load_triplets(input).records, corpus.tokenizer);
  } else {
    if (model.task == MtTask::MMT) throw ConfigError("MMT translation needs a triplet file with regions");
    std::ifstream txt(input);
    std::string line;
    std::size_t n = 0;
    while (std::getline(txt, line)) {
      TripletExample ex;
      ex.id = std::to_string(n++);
      ex.src = corpus.tokenizer.encode(line);
      src.push_back(std::move(ex));
    }
  }
  const auto hyps = translate_all(model, src, corpus.tokenizer, cfg.beam_options());
  std::string text;
  for (const auto& h : hyps) text += h + "\n";
  write_text(output, text);
  auto meta = provenance(cfg, "translate");
  meta["checkpoint"] = ckpt_path;
  meta["system"] = ck.header.value("system", std::string());
  meta["input"] = input;
  meta["sentences"] = hyps.size();
  write_text(output + ".meta.json", meta.dump(2) + "\n");
  return hyps.size();
}

// ---------------------------------------------------------------------------
// probe

enum class ProbeKind { LastWord, Incongruence, Entity, AttnMass };

inline const char* to_string(ProbeKind k) {
  switch (k) {
    case ProbeKind::LastWord:
      return "last-word";
    case ProbeKind::Incongruence:
      return "incongruence";
    case ProbeKind::Entity:
      return "entity";
    case ProbeKind::AttnMass:
      return "attn-mass";
  }
  return "?";
}

inline std::vector<ProbeKind> probe_kinds(const std::string& name) {
  if (name == "all") return {ProbeKind::LastWord, ProbeKind::Incongruence, ProbeKind::Entity, ProbeKind::AttnMass};
  if (name == "last-word") return {ProbeKind::LastWord};
  if (name == "incongruence" || name == "shuffle") return {ProbeKind::Incongruence};
  if (name == "entity") return {ProbeKind::Entity};
  if (name == "attn-mass") return {ProbeKind::AttnMass};
  throw ConfigError("unknown probe '" + name + "' (last-word, incongruence, entity, attn-mass, all)");
}

inline ProbeReport last_word_report(const VtlmModel<float>& model, const std::string& system, const std::vector<TripletExample>& test,
                                    const Vocab& vocab, std::uint64_t seed) {
  ProbeReport r{"last-word", system, {}, static_cast<long>(test.size()), seed};
  for (auto c : {LastWordCondition::EN, LastWordCondition::DE, LastWordCondition::BOTH}) {
    const auto res = last_word_probe(model, test, vocab, c, false, seed);
    r.metrics.emplace_back(to_string(c), res.accuracy);
    r.extra[std::string(to_string(c)) + "_skipped"] = res.skipped;
  }
  return r;
}

inline ProbeReport incongruence_report(const VtlmModel<float>& model, const std::string& system,
                                       const std::vector<TripletExample>& test, const Vocab& vocab, std::uint64_t seed) {
  ProbeReport r{"incongruence", system, {}, static_cast<long>(test.size()), seed};
  for (auto c : {LastWordCondition::EN, LastWordCondition::DE, LastWordCondition::BOTH}) {
    const double clean = last_word_probe(model, test, vocab, c, false, seed).accuracy;
    const double shuf = last_word_probe(model, test, vocab, c, true, seed).accuracy;
    r.metrics.emplace_back(to_string(c), clean);
    r.metrics.emplace_back(std::string(to_string(c)) + "_shuf", shuf);
    r.metrics.emplace_back(std::string(to_string(c)) + "_drop", clean - shuf);
  }
  return r;
}

inline ProbeReport entity_report(const MtModel<float>& model, const std::string& system, const std::vector<TripletExample>& test,
                                 const Tokenizer& tok, const BeamOptions& opt, std::uint64_t seed) {
  ProbeReport r{"entity", system, {}, static_cast<long>(test.size()), seed};
  for (auto a : {EntityAction::None, EntityAction::Mask, EntityAction::Remove}) {
    const auto res = entity_probe(model, test, tok, a, opt);
    r.metrics.emplace_back(std::string("bleu_") + to_string(a), res.bleu.bleu);
    if (a != EntityAction::None) {
      r.extra[std::string(to_string(a)) + "_corrupted"] = res.corrupted;
      r.extra[std::string(to_string(a)) + "_passthrough"] = res.passthrough;
    }
  }
  return r;
}

inline ProbeReport attn_mass_report(const MtModel<float>& model, const std::string& system, const std::vector<TripletExample>& test,
                                    std::uint64_t seed) {
  const auto m = attention_mass(model, test);
  ProbeReport r{"attn-mass", system, {}, static_cast<long>(test.size()), seed};
  r.metrics.emplace_back("mean", m.mean_visual());
  nlohmann::json series = nlohmann::json::array();
  for (std::size_t l = 0; l < m.visual.size(); ++l) {
    r.metrics.emplace_back("layer" + std::to_string(l), m.visual[l]);
    series.push_back({{"layer", l}, {"visual", m.visual[l]}, {"text", m.text[l]}, {"pad", m.pad[l]}});
  }
  r.extra["series"] = series;
  r.extra["target_positions"] = m.positions;
  return r;
}

/// Writes `<stem>.json` (all systems) and `<stem>.csv` (one row each).
inline void write_reports(const std::string& stem, const std::vector<ProbeReport>& reports, const nlohmann::json& prov) {
  nlohmann::json j = {{"provenance", prov}, {"reports", nlohmann::json::array()}};
  std::string csv;
  for (const auto& r : reports) {
    j["reports"].push_back(r.to_json());
    if (csv.empty()) csv = r.csv_header() + "\n";
    csv += r.csv_row() + "\n";
  }
  write_text(stem + ".json", j.dump(2) + "\n");
  write_text(stem + ".csv", csv);
}

struct ProbeRun {
  std::vector<ProbeKind> kinds;
  std::vector<std::vector<ProbeReport>> reports;  // per kind
};

/// Runs the requested probes over the given checkpoints. Pre-training
/// checkpoints feed the last-word and incongruence probes, translation
/// checkpoints the entity and attention-mass probes (MMT only for the
/// latter). Asking for a probe no checkpoint can serve is a usage error.
inline ProbeRun run_probes(const RunConfig& cfg, const std::string& data_dir, const std::vector<std::string>& ckpts,
                           const std::string& probe, const std::string& out_dir, int limit) {
  const auto corpus = load_corpus(data_dir);
  std::vector<TripletExample> test = corpus.test;
  if (limit > 0 && static_cast<std::size_t>(limit) < test.size()) test.resize(static_cast<std::size_t>(limit));
  if (test.empty()) throw DataError("empty test split");
  ProbeRun run;
  run.kinds = probe_kinds(probe);
  run.reports.resize(run.kinds.size());
  const bool all = probe == "all";
  for (const auto& path : ckpts) {
    const auto ck = load_checkpoint(path);
    if (ck.header.value("vocab_fingerprint", std::string()) != corpus.fingerprint) {
      throw DataError(path + ": checkpoint vocabulary does not match the corpus at " + data_dir);
    }
    const std::string kind = ck.header.at("model").at("kind");
    const std::string system = ck.header.value("system", fs::path(path).parent_path().filename().string());
    for (std::size_t k = 0; k < run.kinds.size(); ++k) {
      const auto pk = run.kinds[k];
      const bool wants_pretrain = pk == ProbeKind::LastWord || pk == ProbeKind::Incongruence;
      if (wants_pretrain != (kind == "pretrain")) {
        if (all) continue;
        throw UsageError(std::string(to_string(pk)) + " probe cannot use " + kind + " checkpoint " + path);
      }
      if (wants_pretrain) {
        const auto model = load_pretrained(ck);
        run.reports[k].push_back(pk == ProbeKind::LastWord ? last_word_report(model, system, test, corpus.tokenizer.vocab(), cfg.seed)
                                                           : incongruence_report(model, system, test, corpus.tokenizer.vocab(), cfg.seed));
      } else {
        const auto model = load_translation(ck);
        if (pk == ProbeKind::AttnMass) {
          if (model.task != MtTask::MMT) {
            if (all) continue;
            throw UsageError("attention mass needs an MMT checkpoint; " + path + " is NMT");
          }
          run.reports[k].push_back(attn_mass_report(model, system, test, cfg.seed));
        } else {
          run.reports[k].push_back(entity_report(model, system, test, corpus.tokenizer, cfg.beam_options(), cfg.seed));
        }
      }
    }
  }
  fs::create_directories(out_dir);
  auto prov = provenance(cfg, "probe");
  prov["checkpoints"] = ckpts;
  nlohmann::json summary = {{"provenance", prov}};
  for (std::size_t k = 0; k < run.kinds.size(); ++k) {
    const std::string name = to_string(run.kinds[k]);
    write_reports(out_dir + "/" + name, run.reports[k], prov);
    nlohmann::json table = nlohmann::json::object();
    for (const auto& r : run.reports[k]) table[r.system] = r.to_json()["metrics"];
    summary[name] = table;
    if (run.kinds[k] == ProbeKind::AttnMass) {
      std::string series = "system,layer,visual_mass\n";
      for (const auto& r : run.reports[k]) {
        for (const auto& p : r.extra["series"]) {
          char buf[64];
          std::snprintf(buf, sizeof buf, "%.6g", p["visual"].get<double>());
          series += r.system + "," + std::to_string(p["layer"].get<int>()) + "," + buf + "\n";
        }
      }
      write_text(out_dir + "/attn-mass-series.csv", series);
    }
  }
  if (all) write_text(out_dir + "/summary.json", summary.dump(2) + "\n");
  return run;
}

}  // namespace vtlm
