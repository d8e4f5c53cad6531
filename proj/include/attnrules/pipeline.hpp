#pragma once

// Run configuration, run-directory bookkeeping and the pipeline stages:
// synth, train-sae, extract, eval, intervene, verify.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <fcntl.h>
#include <unistd.h>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>
#include <spdlog/spdlog.h>

#include "attnrules/atrw.hpp"
#include "attnrules/error.hpp"
#include "attnrules/eval.hpp"
#include "attnrules/model.hpp"
#include "attnrules/rules.hpp"
#include "attnrules/sae.hpp"
#include "attnrules/synth.hpp"

namespace attnrules {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr int kManifestSchema = 1;

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Configuration

/// Every recognised key with its default, in echo order.
inline const std::vector<std::pair<std::string, std::string>>& config_defaults() {
  static const std::vector<std::pair<std::string, std::string>> d = {
      {"run.dir", ""},
      {"run.seed", "0"},
      {"run.heads", "L0H0"},
      {"model.path", ""},
      {"synth.skipgram", "0"},
      {"synth.absence", "0"},
      {"synth.counting", "0"},
      {"synth.vocab_size", "64"},
      {"synth.max_len", "64"},
      {"synth.logit_gain", "8"},
      {"synth.value_gain", "1"},
      {"synth.distractor_gain", "8.2"},
      {"synth.distractor_value", "-0.25"},
      {"synth.bos_logit", "4"},
      {"synth.sink_weight", "4"},
      {"corpus.path", ""},
      {"corpus.n_sequences", "2000"},
      {"corpus.length", "16"},
      {"corpus.match_fraction", "0.9"},
      {"corpus.max_plants", "4"},
      {"corpus.max_count", "5"},
      {"sae.source", "auto"},
      {"sae.in_path", ""},
      {"sae.out_path", ""},
      {"sae.n_features", "0"},
      {"sae.l1", "0.0005"},
      {"sae.lr", "0.0012"},
      {"sae.beta1", "0.9"},
      {"sae.beta2", "0.99"},
      {"sae.batch", "4096"},
      {"sae.steps", "1000"},
      {"sae.checkpoints", "25000,50000,75000,100000"},
      {"sae.dead_window", "12500"},
      {"extract.method", "weight"},
      {"extract.k_keys", "100"},
      {"extract.k_queries", "100"},
      {"extract.max_rules", "100"},
      {"extract.absence", "true"},
      {"extract.counting", "true"},
      {"extract.counting_threshold", "0.5"},
      {"extract.max_sequences", "0"},
      {"eval.n", "150"},
      {"eval.seed", ""},
      {"eval.top_n", "1,3,5,10"},
      {"eval.max_target", "64"},
      {"eval.absence_aware", "false"},
      {"intervene.feature", ""},
      {"intervene.head", ""},
      {"intervene.token", ""},
      {"intervene.repeats", "4"},
      {"intervene.sample", "10"},
      {"server.host", "127.0.0.1"},
      {"server.port", "8080"},
      {"server.sample", "10"},
      {"server.max_repeats", "8"},
  };
  return d;
}

class RunConfig {
 public:
  RunConfig() {
    for (const auto& [k, v] : config_defaults()) values_[k] = v;
  }

  static RunConfig from_ini_string(const std::string& text) {
    RunConfig cfg;
    boost::property_tree::ptree tree;
    std::istringstream in(text);
    try {
      boost::property_tree::ini_parser::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
    for (const auto& [section, body] : tree) {
      if (body.empty()) throw ConfigError("config: key '" + section + "' is outside any section");
      for (const auto& [key, value] : body) cfg.set(section + "." + key, value.get_value<std::string>());
    }
    return cfg;
  }

  static RunConfig from_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return from_ini_string(ss.str());
  }

  void set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
    explicit_.insert(key);
  }

  /// `--section.key value` and `--section.key=value` pairs.
  void apply_overrides(const std::vector<std::string>& args) {
    for (std::size_t i = 0; i < args.size(); ++i) {
      const std::string& a = args[i];
      if (a.rfind("--", 0) != 0 || a.find('.') == std::string::npos) {
        throw ConfigError("unexpected argument '" + a + "'; overrides look like --section.key value");
      }
      const auto eq = a.find('=');
      if (eq != std::string::npos) {
        set(a.substr(2, eq - 2), a.substr(eq + 1));
      } else {
        if (i + 1 >= args.size()) throw ConfigError("override " + a + " has no value");
        set(a.substr(2), args[++i]);
      }
    }
  }

  bool is_set(const std::string& key) const { return explicit_.count(key) > 0; }

  bool section_set(const std::string& section) const {
    return std::any_of(explicit_.begin(), explicit_.end(),
                       [&](const std::string& k) { return k.rfind(section + ".", 0) == 0; });
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  double num(const std::string& key) const {
    const auto& s = str(key);
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "' expects a number, got '" + s + "'");
    }
  }

  std::uint64_t count(const std::string& key) const {
    const auto& s = str(key);
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
      throw ConfigError("config key '" + key + "' expects a non-negative integer, got '" + s + "'");
    }
    try {
      return std::stoull(s);
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "' is out of range");
    }
  }

  bool flag(const std::string& key) const {
    const auto& s = str(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError("config key '" + key + "' expects true or false, got '" + s + "'");
  }

  std::vector<std::uint64_t> counts(const std::string& key) const {
    std::vector<std::uint64_t> out;
    std::stringstream ss(str(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      item.erase(0, item.find_first_not_of(' '));
      item.erase(item.find_last_not_of(' ') + 1);
      if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos) {
        throw ConfigError("config key '" + key + "' expects a comma-separated integer list");
      }
      out.push_back(std::stoull(item));
    }
    return out;
  }

  fs::path run_dir() const {
    if (str("run.dir").empty()) throw ConfigError("run.dir is not set");
    return fs::path(str("run.dir"));
  }

  bool synth_source() const { return section_set("synth"); }

  void validate() const {
    const bool has_model = !str("model.path").empty();
    if (has_model == synth_source()) throw ConfigError("set exactly one of model.path or a [synth] section");
    const auto top = counts("eval.top_n");
    if (top.empty()) throw ConfigError("eval.top_n is empty");
    for (std::size_t i = 0; i < top.size(); ++i) {
      if (top[i] == 0) throw ConfigError("eval.top_n values must be positive");
      if (i > 0 && top[i] <= top[i - 1]) throw ConfigError("eval.top_n values must be strictly ascending");
    }
    if (top.back() > count("extract.max_rules")) throw ConfigError("eval.top_n exceeds extract.max_rules");
    rank_method_from_string(str("extract.method"));
    const auto& src = str("sae.source");
    if (src != "auto" && src != "planted" && src != "trained" && src != "paths") {
      throw ConfigError("sae.source must be auto, planted, trained or paths");
    }
    if (src == "planted" && has_model) throw ConfigError("sae.source=planted needs a [synth] run");
    for (const char* k : {"run.seed", "synth.skipgram", "synth.absence", "synth.counting", "corpus.n_sequences",
                          "corpus.length", "sae.batch", "sae.steps", "extract.k_keys", "extract.k_queries", "eval.n"}) {
      count(k);
    }
    for (const char* k : {"synth.logit_gain", "synth.value_gain", "corpus.match_fraction", "sae.l1", "sae.lr"}) num(k);
    flag("extract.absence");
    flag("extract.counting");
    flag("eval.absence_aware");
  }

  /// Effective configuration grouped by section; the run directory itself is
  /// left out so relocated runs stay comparable.
  ojson echo() const {
    ojson j = ojson::object();
    for (const auto& [k, def] : config_defaults()) {
      if (k == "run.dir") continue;
      const auto dot = k.find('.');
      j[k.substr(0, dot)][k.substr(dot + 1)] = values_.at(k);
    }
    return j;
  }

 private:
  std::map<std::string, std::string> values_;
  std::set<std::string> explicit_;
};

// ---------------------------------------------------------------------------
// Hashing, files, seeds

inline std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 digest failed");
  }
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", digest[i]);
  return hex;
}

inline std::string sha256_file(const fs::path& p) { return sha256_hex(atrw::read_file(p)); }

inline void write_text(const fs::path& p, std::string_view text) {
  fs::create_directories(p.parent_path());
  atrw::write_file(p, text);
}

inline nlohmann::json read_json(const fs::path& p) {
  try {
    return nlohmann::json::parse(atrw::read_file(p));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

enum class SeedStream : std::uint64_t { synth = 1, corpus = 2, train_sae = 3, datasets = 4 };

inline std::uint64_t derive_seed(std::uint64_t root, SeedStream s) {
  return Rng(root).split(static_cast<std::uint64_t>(s)).next_u64();
}

/// `L<layer>H<head>` names, or every head of the model for "all".
inline std::vector<HeadSelector> parse_heads(const std::string& spec, const ToyModel& model) {
  std::vector<HeadSelector> out;
  if (spec == "all") {
    for (const auto& h : model.heads()) out.push_back({h.layer, h.head, Stream::output});
    return out;
  }
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    int l = 0, h = 0;
    char tail = 0;
    if (std::sscanf(item.c_str(), " L%dH%d%c", &l, &h, &tail) != 2) {
      throw ConfigError("head '" + item + "' is not of the form L<layer>H<head>");
    }
    try {
      model.head(l, h);
    } catch (const Error&) {
      throw ConfigError("model has no head " + item);
    }
    out.push_back({l, h, Stream::output});
  }
  if (out.empty()) throw ConfigError("run.heads is empty");
  return out;
}

inline std::string head_name(const HeadSelector& h) {
  return "L" + std::to_string(h.layer) + "H" + std::to_string(h.head);
}

// ---------------------------------------------------------------------------
// Run directory: manifest, lock, versioned stage directories

/// Exclusive ownership of a run directory while a stage writes.
class RunLock {
 public:
  explicit RunLock(const fs::path& root) : path_(root / ".lock") {
    fs::create_directories(root);
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) throw Error("run directory " + root.string() + " is locked (" + path_.string() + " exists)");
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto n = ::write(fd_, pid.data(), pid.size());
  }
  ~RunLock() {
    ::close(fd_);
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
  int fd_ = -1;
};

inline ojson load_manifest(const fs::path& root) {
  const fs::path p = root / "manifest.json";
  if (!fs::exists(p)) {
    ojson m;
    m["schema_version"] = kManifestSchema;
    m["tool"] = {{"name", "attnrules"}, {"version", kToolVersion}};
    m["stages"] = ojson::array();
    return m;
  }
  try {
    return ojson::parse(atrw::read_file(p));
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError("manifest.json is unreadable: " + std::string(e.what()));
  }
}

inline std::optional<ojson> latest_stage(const ojson& manifest, const std::string& stage) {
  std::optional<ojson> best;
  for (const auto& e : manifest.at("stages"))
    if (e.at("stage") == stage && (!best || e.at("version") > best->at("version"))) best = e;
  return best;
}

inline ojson require_stage(const ojson& manifest, const std::string& stage) {
  auto e = latest_stage(manifest, stage);
  if (!e) throw DependencyError("run the '" + stage + "' stage first");
  return *e;
}

/// Files of a new stage version go to `<stage>/v<N>.partial` and move to
/// `<stage>/v<N>` on commit, when the manifest entry is written.
class StageWriter {
 public:
  StageWriter(fs::path root, std::string stage, const RunConfig& cfg)
      : root_(std::move(root)), stage_(std::move(stage)), manifest_(load_manifest(root_)) {
    std::uint64_t v = 1;
    if (auto prev = latest_stage(manifest_, stage_)) v = prev->at("version").get<std::uint64_t>() + 1;
    while (fs::exists(root_ / stage_ / ("v" + std::to_string(v)))) ++v;
    version_ = v;
    rel_ = stage_ + "/v" + std::to_string(v);
    tmp_ = root_ / stage_ / ("v" + std::to_string(v) + ".partial");
    fs::remove_all(tmp_);
    fs::create_directories(tmp_);
    entry_["stage"] = stage_;
    entry_["version"] = version_;
    entry_["dir"] = rel_;
    entry_["config"] = cfg.echo();
    entry_["inputs"] = ojson::object();
  }

  ~StageWriter() {
    if (!committed_) {
      std::error_code ec;
      fs::remove_all(tmp_, ec);
    }
  }

  const ojson& manifest() const { return manifest_; }
  /// Scratch location of a file in this stage.
  fs::path path(const std::string& rel) const { return tmp_ / rel; }
  /// Run-relative name the file will have after commit.
  std::string final_name(const std::string& rel) const { return rel_ + "/" + rel; }
  ojson& inputs() { return entry_["inputs"]; }
  ojson& entry() { return entry_; }

  void write(const std::string& rel, std::string_view text) const { write_text(path(rel), text); }

  void commit() {
    const fs::path final_dir = root_ / rel_;
    fs::rename(tmp_, final_dir);
    committed_ = true;
    std::vector<std::string> files;
    for (const auto& f : fs::recursive_directory_iterator(final_dir))
      if (f.is_regular_file()) files.push_back(fs::relative(f.path(), root_).generic_string());
    std::sort(files.begin(), files.end());
    ojson hashes = ojson::object();
    for (const auto& f : files) hashes[f] = sha256_file(root_ / f);
    entry_["files"] = hashes;
    manifest_["stages"].push_back(entry_);
    const fs::path tmp = root_ / "manifest.json.partial";
    atrw::write_file(tmp, manifest_.dump(2) + "\n");
    fs::rename(tmp, root_ / "manifest.json");
    spdlog::info("{}: wrote {} ({} files)", stage_, rel_, files.size());
  }

 private:
  fs::path root_;
  std::string stage_;
  ojson manifest_;
  std::uint64_t version_ = 1;
  std::string rel_;
  fs::path tmp_;
  ojson entry_;
  bool committed_ = false;
};

/// Resolves a manifest input: run-relative names live under the run
/// directory, anything else is an external path.
inline fs::path resolve_input(const fs::path& root, const std::string& name) {
  const fs::path p(name);
  return p.is_absolute() ? p : (fs::exists(root / p) ? root / p : p);
}

// ---------------------------------------------------------------------------
// Sources: model, corpus and SAEs for a stage

struct Sources {
  ToyModel model;
  Corpus corpus;
  std::string model_name, corpus_name;
  std::vector<HeadSelector> heads;
  SaeDictionary sae_in;
  std::vector<SaeDictionary> sae_out;  // parallel to heads
  std::string sae_in_name;
  std::vector<std::string> sae_out_names;
};

inline Corpus read_corpus(const ToyModel& model, const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read corpus " + path.string());
  Corpus c;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      c.push_back(tokenize(model, line));
    } catch (const Error& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
    if (c.back().size() > model.max_len()) throw FormatError(path.string() + ": sequence longer than max_len");
  }
  if (c.empty()) throw ConfigError("corpus " + path.string() + " is empty");
  return c;
}

inline std::string corpus_text(const ToyModel& model, const Corpus& corpus) {
  std::string out;
  for (const auto& s : corpus) out += detokenize(model, s) + "\n";
  return out;
}

/// Model and corpus: the latest synth stage, or model.path plus corpus.path.
inline void load_model_and_corpus(const RunConfig& cfg, const fs::path& root, const ojson& manifest, Sources& src) {
  if (cfg.synth_source()) {
    const auto synth = require_stage(manifest, "synth");
    const std::string dir = synth.at("dir");
    src.model_name = dir + "/model.atrw";
    src.corpus_name = dir + "/corpus.txt";
  } else {
    src.model_name = cfg.str("model.path");
    if (cfg.str("corpus.path").empty()) throw ConfigError("corpus.path is required with model.path");
    src.corpus_name = cfg.str("corpus.path");
  }
  const fs::path mp = resolve_input(root, src.model_name);
  if (!fs::exists(mp)) throw ConfigError("model file " + mp.string() + " does not exist");
  src.model = load_model(mp);
  src.corpus = read_corpus(src.model, resolve_input(root, src.corpus_name));
  src.heads = parse_heads(cfg.str("run.heads"), src.model);
}

inline void load_saes(const RunConfig& cfg, const fs::path& root, const ojson& manifest, Sources& src) {
  std::string mode = cfg.str("sae.source");
  if (mode == "auto") mode = cfg.synth_source() ? "planted" : "trained";
  if (mode == "paths") {
    src.sae_in_name = cfg.str("sae.in_path");
    std::stringstream ss(cfg.str("sae.out_path"));
    std::string item;
    while (std::getline(ss, item, ',')) src.sae_out_names.push_back(item);
    if (src.sae_in_name.empty() || src.sae_out_names.size() != src.heads.size()) {
      throw ConfigError("sae.source=paths needs sae.in_path and one sae.out_path entry per head");
    }
  } else {
    const auto stage = require_stage(manifest, mode == "planted" ? "synth" : "train-sae");
    const std::string dir = stage.at("dir");
    src.sae_in_name = dir + "/sae_in.atrw";
    for (const auto& h : src.heads) src.sae_out_names.push_back(dir + "/sae_out_" + head_name(h) + ".atrw");
  }
  auto load = [&](const std::string& name) {
    const fs::path p = resolve_input(root, name);
    if (!fs::exists(p)) throw DependencyError("SAE file " + p.string() + " does not exist");
    return load_sae(p);
  };
  src.sae_in = load(src.sae_in_name);
  if (src.sae_in.dim() != src.model.d_model()) throw ConfigError("input SAE width differs from the model's d_model");
  for (std::size_t i = 0; i < src.heads.size(); ++i) {
    src.sae_out.push_back(load(src.sae_out_names[i]));
    const auto& h = src.model.head(src.heads[i].layer, src.heads[i].head).weights;
    if (src.sae_out.back().dim() != h.d_head()) throw ConfigError("output SAE width differs from d_head");
  }
}

/// Records external input files with their hashes so verify can check them.
inline void record_inputs(StageWriter& w, const fs::path& root, const Sources& src, bool with_saes) {
  auto& in = w.inputs();
  in["model"] = src.model_name;
  in["corpus"] = src.corpus_name;
  ojson heads = ojson::array();
  for (const auto& h : src.heads) heads.push_back(head_name(h));
  in["heads"] = heads;
  if (with_saes) {
    in["sae_in"] = src.sae_in_name;
    ojson outs = ojson::object();
    for (std::size_t i = 0; i < src.heads.size(); ++i) outs[head_name(src.heads[i])] = src.sae_out_names[i];
    in["sae_out"] = outs;
  }
  ojson external = ojson::object();
  auto add = [&](const std::string& name) {
    if (fs::path(name).is_absolute() || !fs::exists(root / name)) {
      const fs::path p = resolve_input(root, name);
      external[name] = sha256_file(p);
      if (name == src.model_name) external[name + ".meta.json"] = sha256_file(meta_path(p));
    }
  };
  add(src.model_name);
  add(src.corpus_name);
  if (with_saes) {
    add(src.sae_in_name);
    for (const auto& n : src.sae_out_names) add(n);
  }
  if (!external.empty()) w.entry()["external"] = external;
}

// ---------------------------------------------------------------------------
// synth

inline SynthParams synth_params(const RunConfig& cfg) {
  SynthParams p;
  p.vocab_size = cfg.count("synth.vocab_size");
  p.d_model = p.vocab_size;
  p.d_head = p.vocab_size;
  p.max_len = cfg.count("synth.max_len");
  p.bos_logit = cfg.num("synth.bos_logit");
  p.sink_weight = cfg.num("synth.sink_weight");
  return p;
}

inline void cmd_synth(const RunConfig& cfg) {
  cfg.validate();
  if (!cfg.synth_source()) throw ConfigError("synth needs a [synth] section");
  const fs::path root = cfg.run_dir();
  RunLock lock(root);
  StageWriter w(root, "synth", cfg);
  const std::uint64_t seed = cfg.count("run.seed");

  PlantSpec proto;
  proto.logit_gain = cfg.num("synth.logit_gain");
  proto.value_gain = cfg.num("synth.value_gain");
  proto.distractor_gain = cfg.num("synth.distractor_gain");
  proto.distractor_value = cfg.num("synth.distractor_value");
  if (!(proto.logit_gain > 0.0) || !(proto.value_gain > 0.0)) throw ConfigError("synth gains must be positive");
  const SynthParams params = synth_params(cfg);
  const PlantCounts counts{cfg.count("synth.skipgram"), cfg.count("synth.absence"), cfg.count("synth.counting")};
  const auto gt = plant(params, random_plants(counts, params, derive_seed(seed, SeedStream::synth), proto));

  CorpusParams cp;
  cp.n_sequences = cfg.count("corpus.n_sequences");
  cp.length = cfg.count("corpus.length");
  cp.match_fraction = cfg.num("corpus.match_fraction");
  cp.max_plants_per_sequence = cfg.count("corpus.max_plants");
  cp.max_count = cfg.count("corpus.max_count");
  cp.seed = derive_seed(seed, SeedStream::corpus);
  const auto corpus = gen_corpus(gt, cp);

  save_model(gt.model, w.path("model.atrw"));
  save_sae(gt.sae_in, w.path("sae_in.atrw"));
  save_sae(gt.sae_out, w.path("sae_out_L0H0.atrw"));
  w.write("corpus.txt", corpus_text(gt.model, corpus.sequences));
  w.write("plants.json", plants_to_json(gt, cp, corpus.labels).dump(2) + "\n");
  w.entry()["seed"] = seed;
  w.commit();
}

// ---------------------------------------------------------------------------
// train-sae

inline TrainConfig train_config(const RunConfig& cfg, std::uint64_t seed) {
  TrainConfig tc;
  tc.l1_coefficient = cfg.num("sae.l1");
  tc.lr = cfg.num("sae.lr");
  tc.beta1 = cfg.num("sae.beta1");
  tc.beta2 = cfg.num("sae.beta2");
  tc.batch_size = cfg.count("sae.batch");
  tc.steps = cfg.count("sae.steps");
  const auto cps = cfg.counts("sae.checkpoints");
  tc.resample_checkpoints.assign(cps.begin(), cps.end());
  tc.dead_window = cfg.count("sae.dead_window");
  tc.seed = seed;
  if (tc.batch_size == 0) throw ConfigError("sae.batch must be positive");
  return tc;
}

inline std::string history_csv(const std::vector<TrainRecord>& h) {
  std::string out = "step,mse,l1,total,dead\n";
  for (const auto& r : h) out += fmt::format("{},{},{},{},{}\n", r.step, r.mse, r.l1, r.total, r.dead);
  return out;
}

inline void save_checkpoint(const SaeTrainer& t, const fs::path& atrw_path, const fs::path& json_path) {
  const auto& o = t.optimizer();
  const auto& s = t.sae();
  atrw::save(atrw_path, {{"encoder", s.encoder},
                         {"decoder", s.decoder},
                         {"b_enc", s.b_enc},
                         {"b_dec", s.b_dec},
                         {"adam.encoder.m", o.encoder.first_moment},
                         {"adam.encoder.v", o.encoder.second_moment},
                         {"adam.decoder.m", o.decoder.first_moment},
                         {"adam.decoder.v", o.decoder.second_moment},
                         {"adam.b_enc.m", o.b_enc.first_moment},
                         {"adam.b_enc.v", o.b_enc.second_moment},
                         {"adam.b_dec.m", o.b_dec.first_moment},
                         {"adam.b_dec.v", o.b_dec.second_moment}});
  const auto& c = t.config();
  ojson j;
  j["schema_version"] = 1;
  j["step"] = t.steps_done();
  j["config"] = {{"l1", c.l1_coefficient}, {"lr", c.lr},     {"beta1", c.beta1},
                 {"beta2", c.beta2},       {"batch", c.batch_size}, {"seed", c.seed},
                 {"checkpoints", c.resample_checkpoints}, {"dead_window", c.dead_window}};
  j["adam_steps"] = {o.encoder.step_count, o.decoder.step_count, o.b_enc.step_count, o.b_dec.step_count};
  j["last_fired"] = t.last_fired();
  ojson hist = ojson::array();
  for (const auto& r : t.history()) hist.push_back({r.step, r.mse, r.l1, r.total, r.dead});
  j["history"] = hist;
  atrw::write_file(json_path, j.dump() + "\n");
}

inline void restore_checkpoint(SaeTrainer& t, const fs::path& atrw_path, const fs::path& json_path) {
  const auto tensors = atrw::load(atrw_path);
  const auto j = read_json(json_path);
  const auto& c = t.config();
  const auto& jc = j.at("config");
  if (jc.at("l1") != c.l1_coefficient || jc.at("lr") != c.lr || jc.at("beta1") != c.beta1 ||
      jc.at("beta2") != c.beta2 || jc.at("batch") != c.batch_size || jc.at("seed") != c.seed ||
      jc.at("checkpoints").get<std::vector<std::size_t>>() != c.resample_checkpoints ||
      jc.at("dead_window") != c.dead_window) {
    throw ConfigError("resume: training settings differ from the checkpoint");
  }
  const std::size_t step = j.at("step");
  if (step > c.steps) throw ConfigError("resume: checkpoint is at step " + std::to_string(step) + ", beyond sae.steps");
  SaeDictionary sae{atrw::find(tensors, "encoder"), atrw::find(tensors, "decoder"), atrw::find(tensors, "b_enc"),
                    atrw::find(tensors, "b_dec")};
  SaeOptimizerState opt(sae, c);
  AdamState* states[] = {&opt.encoder, &opt.decoder, &opt.b_enc, &opt.b_dec};
  const char* names[] = {"encoder", "decoder", "b_enc", "b_dec"};
  for (int i = 0; i < 4; ++i) {
    states[i]->first_moment = atrw::find(tensors, std::string("adam.") + names[i] + ".m");
    states[i]->second_moment = atrw::find(tensors, std::string("adam.") + names[i] + ".v");
    states[i]->step_count = j.at("adam_steps").at(i);
  }
  std::vector<TrainRecord> hist;
  for (const auto& r : j.at("history"))
    hist.push_back({r.at(0).get<std::size_t>(), r.at(1).get<double>(), r.at(2).get<double>(), r.at(3).get<double>(),
                    r.at(4).get<std::size_t>()});
  t.restore(std::move(sae), std::move(opt), j.at("last_fired").get<std::vector<std::size_t>>(), step, std::move(hist));
}

/// Uniform draws of stream rows; batch `step` depends only on (seed, step).
class RowSampler {
 public:
  RowSampler(TensorF32 rows, std::size_t batch, std::uint64_t seed)
      : rows_(std::move(rows)), batch_(batch), seed_(seed) {}
  TensorF32 operator()(std::size_t step) const {
    Rng rng = Rng(seed_).split(step);
    TensorF32 b({batch_, rows_.cols()});
    for (std::size_t i = 0; i < batch_; ++i) {
      const auto src = rows_.row(rng.below(rows_.rows()));
      std::copy(src.begin(), src.end(), b.row(i).begin());
    }
    return b;
  }

 private:
  TensorF32 rows_;
  std::size_t batch_;
  std::uint64_t seed_;
};

/// Every corpus position of one stream, stacked.
inline TensorF32 stream_rows(const ToyModel& model, const Corpus& corpus, const HeadSelector& sel, std::size_t dim) {
  std::size_t total = 0;
  for (const auto& s : corpus) total += s.size();
  TensorF32 out({total, dim});
  std::size_t r = 0;
  for (const auto& s : corpus) {
    const TensorF32 x = embed(model, s);
    const TensorF32 y = sel.stream == Stream::input ? x : attention_forward(model.head(sel.layer, sel.head).weights, x).y;
    for (std::size_t p = 0; p < s.size(); ++p, ++r) std::copy(y.row(p).begin(), y.row(p).end(), out.row(r).begin());
  }
  return out;
}

inline void cmd_train_sae(const RunConfig& cfg, bool resume = false) {
  cfg.validate();
  const fs::path root = cfg.run_dir();
  RunLock lock(root);
  StageWriter w(root, "train-sae", cfg);
  Sources src;
  load_model_and_corpus(cfg, root, w.manifest(), src);
  std::optional<ojson> prev;
  if (resume) {
    prev = latest_stage(w.manifest(), "train-sae");
    if (!prev) throw DependencyError("resume: no earlier train-sae stage");
    w.inputs()["resumed_from"] = prev->at("dir");
  }
  const std::uint64_t seed = derive_seed(cfg.count("run.seed"), SeedStream::train_sae);

  struct Job {
    std::string name;
    HeadSelector sel;
    std::size_t dim;
  };
  std::vector<Job> jobs{{"in", {0, 0, Stream::input}, src.model.d_model()}};
  for (const auto& h : src.heads)
    jobs.push_back({"out_" + head_name(h), h, src.model.head(h.layer, h.head).weights.d_head()});

  for (std::size_t j = 0; j < jobs.size(); ++j) {
    const auto& job = jobs[j];
    const std::uint64_t s = Rng(seed).split(j).next_u64();
    const TrainConfig tc = train_config(cfg, s);
    const std::size_t n = cfg.count("sae.n_features") ? cfg.count("sae.n_features") : job.dim;
    SaeTrainer trainer(tc, init_sae(n, job.dim, Rng(s).split(1).next_u64()));
    if (prev) {
      const fs::path dir = root / prev->at("dir").get<std::string>();
      restore_checkpoint(trainer, dir / ("checkpoint_" + job.name + ".atrw"), dir / ("checkpoint_" + job.name + ".json"));
    }
    const RowSampler sampler(stream_rows(src.model, src.corpus, job.sel, job.dim), tc.batch_size,
                             Rng(s).split(2).next_u64());
    for (std::size_t step = trainer.steps_done(); step < tc.steps; ++step) {
      const auto rec = trainer.step(sampler(step));
      if (rec.step % 1000 == 0) spdlog::info("sae {}: step {} mse {:.6g} l1 {:.6g} dead {}", job.name, rec.step, rec.mse, rec.l1, rec.dead);
    }
    save_sae(trainer.sae(), w.path("sae_" + job.name + ".atrw"));
    save_checkpoint(trainer, w.path("checkpoint_" + job.name + ".atrw"), w.path("checkpoint_" + job.name + ".json"));
    w.write("history_" + job.name + ".csv", history_csv(trainer.history()));
  }
  record_inputs(w, root, src, false);
  w.entry()["seed"] = seed;
  w.commit();
}

// ---------------------------------------------------------------------------
// extract

inline std::uint64_t dataset_seed(const RunConfig& cfg, std::size_t head_index, std::uint32_t feature) {
  const std::uint64_t base = cfg.str("eval.seed").empty() ? derive_seed(cfg.count("run.seed"), SeedStream::datasets)
                                                          : cfg.count("eval.seed");
  return Rng(base).split(head_index).split(feature).next_u64();
}

/// Per-sequence input-SAE features, computed on first use.
class InputFeatureCache {
 public:
  InputFeatureCache(const ToyModel& model, const SaeDictionary& sae_in, const Corpus& corpus)
      : model_(model), sae_(sae_in), corpus_(corpus) {}
  const FeatureSequence& operator()(std::uint32_t seq) {
    auto it = cache_.find(seq);
    if (it == cache_.end()) {
      if (seq >= corpus_.size()) throw FormatError("sequence " + std::to_string(seq) + " is not in the corpus");
      it = cache_.emplace(seq, sequence_features(model_, {0, 0, Stream::input}, sae_, corpus_[seq])).first;
    }
    return it->second;
  }

 private:
  const ToyModel& model_;
  const SaeDictionary& sae_;
  const Corpus& corpus_;
  std::map<std::uint32_t, FeatureSequence> cache_;
};

inline void cmd_extract(const RunConfig& cfg) {
  cfg.validate();
  const fs::path root = cfg.run_dir();
  RunLock lock(root);
  StageWriter w(root, "extract", cfg);
  Sources src;
  load_model_and_corpus(cfg, root, w.manifest(), src);
  load_saes(cfg, root, w.manifest(), src);
  const RankMethod method = rank_method_from_string(cfg.str("extract.method"));
  const std::size_t max_seqs = cfg.count("extract.max_sequences") ? cfg.count("extract.max_sequences") : src.corpus.size();
  const auto labels = token_labels(src.model, src.sae_in);
  InputFeatureCache inputs(src.model, src.sae_in, src.corpus);
  DatasetOptions dopt{cfg.count("eval.n"), cfg.count("eval.max_target")};
  CountingOptions copt;
  copt.threshold = cfg.num("extract.counting_threshold");

  std::size_t eligible = 0;
  ojson summary;
  summary["schema_version"] = 1;
  summary["method"] = to_string(method);
  summary["heads"] = ojson::array();
  for (std::size_t hi = 0; hi < src.heads.size(); ++hi) {
    const auto& sel = src.heads[hi];
    const std::string hn = head_name(sel);
    const auto& head = src.model.head(sel.layer, sel.head).weights;
    const auto& sae_out = src.sae_out[hi];
    const auto index = collect_activations(src.model, sel, sae_out, src.corpus, max_seqs);
    w.write(hn + "/index.jsonl", index_to_jsonl(index));
    w.write(hn + "/index_summary.json", index_summary(index).dump(2) + "\n");

    ojson hs;
    hs["layer"] = sel.layer;
    hs["head"] = sel.head;
    hs["features"] = ojson::array();
    for (std::uint32_t g = 0; g < sae_out.n(); ++g) {
      const std::size_t active = index.active_sequence_count(g);
      if (active == 0) continue;
      ojson fs_entry{{"feature", g}, {"active_sequences", active}};
      const FeatureRef fref{hn, g, ""};
      ExemplarDataset ds;
      try {
        ds = build_exemplar_dataset(index, fref, dataset_seed(cfg, hi, g), dopt);
      } catch (const EligibilityError& e) {
        spdlog::debug("{} feature {}: {}", hn, g, e.what());
        fs_entry["eligible"] = false;
        fs_entry["reason"] = e.what();
        hs["features"].push_back(fs_entry);
        continue;
      }
      ++eligible;
      w.write(hn + "/datasets/" + std::to_string(g) + ".json", dataset_to_json(ds).dump() + "\n");

      const ScoreContext ctx(src.sae_in, head, sae_out.encoder.row(g), "in", labels);
      auto candidates = select_candidates(ctx, cfg.count("extract.k_keys"), cfg.count("extract.k_queries"));
      RuleSet rs;
      rs.output_feature = fref;
      rs.method = method;
      if (method == RankMethod::weight) {
        rs.rules = rank_weight_based(std::move(candidates));
      } else {
        std::vector<GradientExample> train;
        for (const auto* side : {&ds.positives, &ds.negatives})
          for (const auto& e : *side)
            if (e.split == Split::train) train.push_back({inputs(e.seq), e.pos});
        rs.rules = rank_gradient_based(ctx, std::move(candidates), train);
      }
      if (rs.rules.size() > cfg.count("extract.max_rules")) rs.rules.resize(cfg.count("extract.max_rules"));
      if (cfg.flag("extract.absence") && !rs.rules.empty()) rs.absence = detect_distractor(rs, ctx);
      if (cfg.flag("extract.counting") && !rs.rules.empty()) {
        std::vector<CountingSample> samples;
        // Every active sequence: the top-n positives alone cover too few counts.
        for (const auto& pk : index.peaks(g))
          samples.push_back({pk.act, key_count(inputs(pk.seq), pk.pos, rs.rules.front().key.index)});
        rs.counting = detect_counting(rs, samples, copt);
      }
      w.write(hn + "/rules/" + std::to_string(g) + ".json", ruleset_to_json(rs).dump(2) + "\n");
      fs_entry["eligible"] = true;
      fs_entry["has_absence"] = rs.absence.has_value();
      fs_entry["has_counting"] = rs.counting.has_value();
      hs["features"].push_back(fs_entry);
    }
    fs::create_directories(w.path(hn + "/rules"));
    fs::create_directories(w.path(hn + "/datasets"));
    summary["heads"].push_back(hs);
  }
  if (eligible == 0) {
    if (method == RankMethod::gradient) {
      throw DependencyError("gradient ranking needs exemplar datasets, but no feature is eligible");
    }
    spdlog::warn("extract: no feature meets the exemplar eligibility bounds; no rules written");
  }
  w.write("summary.json", summary.dump(2) + "\n");
  record_inputs(w, root, src, true);
  w.entry()["seed"] = cfg.count("run.seed");
  w.commit();
}

// ---------------------------------------------------------------------------
// Loaded extract stage, shared by eval, intervene and the server

struct ExtractedFeature {
  std::uint32_t feature = 0;
  std::size_t active_sequences = 0;
  std::optional<RuleSet> rules;
  std::optional<ExemplarDataset> dataset;
};

struct ExtractedHead {
  HeadSelector sel;
  SaeDictionary sae_out;
  std::vector<ExtractedFeature> features;  // ascending feature id, eligible ones only

  const ExtractedFeature* find(std::uint32_t g) const {
    for (const auto& f : features)
      if (f.feature == g) return &f;
    return nullptr;
  }
};

struct ExtractedRun {
  fs::path root;
  ojson entry;
  ToyModel model;
  Corpus corpus;
  SaeDictionary sae_in;
  std::vector<ExtractedHead> heads;

  const ExtractedHead& head(const std::string& name) const {
    for (const auto& h : heads)
      if (head_name(h.sel) == name) return h;
    throw NotFoundError("head " + name + " was not extracted");
  }
};

inline ExtractedRun load_extracted(const fs::path& root) {
  const auto manifest = load_manifest(root);
  ExtractedRun run;
  run.root = root;
  run.entry = require_stage(manifest, "extract");
  const auto& in = run.entry.at("inputs");
  run.model = load_model(resolve_input(root, in.at("model")));
  run.corpus = read_corpus(run.model, resolve_input(root, in.at("corpus")));
  run.sae_in = load_sae(resolve_input(root, in.at("sae_in")));
  const fs::path dir = root / run.entry.at("dir").get<std::string>();
  const auto summary = read_json(dir / "summary.json");
  for (const auto& hs : summary.at("heads")) {
    ExtractedHead h;
    h.sel = {hs.at("layer").get<int>(), hs.at("head").get<int>(), Stream::output};
    const std::string hn = head_name(h.sel);
    h.sae_out = load_sae(resolve_input(root, in.at("sae_out").at(hn)));
    for (const auto& fj : hs.at("features")) {
      if (!fj.at("eligible").get<bool>()) continue;
      ExtractedFeature f;
      f.feature = fj.at("feature");
      f.active_sequences = fj.at("active_sequences");
      const fs::path rp = dir / hn / "rules" / (std::to_string(f.feature) + ".json");
      const fs::path dp = dir / hn / "datasets" / (std::to_string(f.feature) + ".json");
      if (fs::exists(rp)) f.rules = ruleset_from_json(read_json(rp));
      if (fs::exists(dp)) f.dataset = dataset_from_json(read_json(dp));
      h.features.push_back(std::move(f));
    }
    run.heads.push_back(std::move(h));
  }
  return run;
}

// ---------------------------------------------------------------------------
// eval

inline std::vector<FeatureMetricsRow> evaluate_run(const ExtractedRun& run, const std::vector<std::uint64_t>& top_n,
                                                   const PredictOptions& opt = {}) {
  InputFeatureCache inputs(run.model, run.sae_in, run.corpus);
  std::vector<FeatureMetricsRow> rows;
  for (const auto& h : run.heads) {
    for (const auto& f : h.features) {
      if (!f.rules || !f.dataset) continue;
      for (auto n : top_n) {
        rows.push_back({h.sel.layer, h.sel.head, f.feature, f.rules->method, n,
                        evaluate_rules(*f.rules, *f.dataset, Split::test, n, inputs, opt)});
      }
    }
  }
  return rows;
}

inline void cmd_eval(const RunConfig& cfg) {
  cfg.validate();
  const fs::path root = cfg.run_dir();
  RunLock lock(root);
  StageWriter w(root, "eval", cfg);
  const auto run = load_extracted(root);
  bool any = false;
  for (const auto& h : run.heads)
    for (const auto& f : h.features) any |= f.dataset.has_value();
  if (!any) throw DependencyError("no exemplar datasets to evaluate on");

  PredictOptions opt;
  opt.absence_aware = cfg.flag("eval.absence_aware");
  const auto rows = evaluate_run(run, cfg.counts("eval.top_n"), opt);
  w.write("reports/features.csv", feature_metrics_csv(rows));
  for (const auto g : {Grouping::layer, Grouping::head}) {
    const std::string name = g == Grouping::layer ? "layer" : "head";
    const auto agg = aggregate_report(rows, g);
    w.write("reports/aggregate_" + name + ".csv", aggregate_csv(agg));
    w.write("reports/aggregate_" + name + ".json", aggregate_json(agg, g).dump(2) + "\n");
  }
  ojson m;
  m["schema_version"] = 1;
  m["rows"] = ojson::array();
  for (const auto& r : rows) {
    m["rows"].push_back({{"layer", r.layer},
                         {"head", r.head},
                         {"feature", r.feature},
                         {"method", to_string(r.method)},
                         {"top_n", r.top_n},
                         {"precision", r.metrics.precision},
                         {"recall", r.metrics.recall},
                         {"f1", r.metrics.f1},
                         {"tp", r.metrics.tp},
                         {"fp", r.metrics.fp},
                         {"fn", r.metrics.fn},
                         {"tn", r.metrics.tn}});
  }
  w.write("metrics.json", m.dump(2) + "\n");
  w.inputs()["extract"] = run.entry.at("dir");
  w.commit();
}

// ---------------------------------------------------------------------------
// intervene

/// The token to prepend: an explicit token, else the best token for the
/// feature's detected distractor.
inline TokenId intervention_token(const ExtractedRun& run, const ExtractedFeature& f, const std::string& token) {
  if (!token.empty()) {
    try {
      return run.model.token_id(token);
    } catch (const Error&) {
      throw NotFoundError("unknown token '" + token + "'");
    }
  }
  if (!f.rules || !f.rules->absence) {
    throw ConfigError("feature " + std::to_string(f.feature) + " has no distractor annotation; set intervene.token");
  }
  return pick_distractor_token(run.sae_in, f.rules->absence->distractor.index, run.model.token_embeddings());
}

inline void cmd_intervene(const RunConfig& cfg) {
  cfg.validate();
  const fs::path root = cfg.run_dir();
  RunLock lock(root);
  StageWriter w(root, "intervene", cfg);
  const auto run = load_extracted(root);
  if (cfg.str("intervene.feature").empty()) throw ConfigError("intervene.feature is not set");
  const auto g = static_cast<std::uint32_t>(cfg.count("intervene.feature"));
  const std::string hn = cfg.str("intervene.head").empty() ? head_name(run.heads.at(0).sel) : cfg.str("intervene.head");
  const auto& h = run.head(hn);
  const auto* f = h.find(g);
  if (!f || !f->dataset) throw NotFoundError("feature " + std::to_string(g) + " has no exemplar dataset on " + hn);
  const TokenId token = intervention_token(run, *f, cfg.str("intervene.token"));
  const auto res = intervention_sweep(run.model, h.sel, h.sae_out, *f->dataset, run.corpus, token,
                                      cfg.count("intervene.repeats"), cfg.count("intervene.sample"));
  w.write("intervention.csv", intervention_csv(res));
  ojson j;
  j["schema_version"] = 1;
  j["head"] = hn;
  j["feature"] = g;
  j["token"] = run.model.token(token);
  j["mean"] = res.mean;
  w.write("intervention.json", j.dump(2) + "\n");
  w.inputs()["extract"] = run.entry.at("dir");
  w.commit();
}

// ---------------------------------------------------------------------------
// verify

/// Problems found by re-hashing every artifact the manifest lists; empty
/// when the run directory is intact.
inline std::vector<std::string> verify_run(const fs::path& root) {
  std::vector<std::string> problems;
  if (!fs::exists(root / "manifest.json")) return {"manifest.json is missing"};
  const auto m = load_manifest(root);
  for (const auto& e : m.at("stages")) {
    auto check = [&](const std::string& name, const fs::path& p, const std::string& expected) {
      if (!fs::exists(p)) {
        problems.push_back(name + ": missing");
      } else if (sha256_file(p) != expected) {
        problems.push_back(name + ": hash mismatch");
      }
    };
    for (const auto& [name, hash] : e.at("files").items()) check(name, root / name, hash);
    if (e.contains("external"))
      for (const auto& [name, hash] : e.at("external").items()) check(name, resolve_input(root, name), hash);
  }
  return problems;
}

inline void cmd_verify(const RunConfig& cfg) {
  const auto problems = verify_run(cfg.run_dir());
  for (const auto& p : problems) spdlog::error("verify: {}", p);
  if (!problems.empty()) throw IntegrityError(std::to_string(problems.size()) + " artifact(s) failed verification");
  spdlog::info("verify: all artifacts match the manifest");
}

// ---------------------------------------------------------------------------
// Exit codes

inline int exit_code(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const NotFoundError*>(&e)) return 2;
  if (dynamic_cast<const EligibilityError*>(&e) || dynamic_cast<const DependencyError*>(&e)) return 3;
  if (dynamic_cast<const IntegrityError*>(&e)) return 4;
  return 1;
}

}  // namespace attnrules
