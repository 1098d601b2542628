#include "cli.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "ieegclip/arr1.hpp"
#include "ieegclip/corpus.hpp"
#include "ieegclip/encoder.hpp"
#include "ieegclip/error.hpp"
#include "ieegclip/eval.hpp"
#include "ieegclip/probes.hpp"
#include "ieegclip/rng.hpp"
#include "ieegclip/synth.hpp"
#include "ieegclip/trainer.hpp"

#ifndef IEEGCLIP_VERSION
#define IEEGCLIP_VERSION "0.0.0"
#endif

namespace ieegclip::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

json default_config() {
  encoder::EncoderConfig enc;
  json enc_json = encoder::to_json(enc);
  enc_json.erase("n_channels");  // taken from the data
  enc_json.erase("out_dim");
  enc_json.erase("seed");
  json train_json = trainer::to_json(trainer::TrainConfig{});
  train_json.erase("seed");
  json synth_json = synth::to_json(synth::SynthConfig{});
  synth_json.erase("seed");
  return {
      {"manifest", ""},
      {"output_dir", "out"},
      {"dtype", "f32"},
      {"pairs", [] {
         json p = corpus::to_json(corpus::PairConfig{});
         p["task_policy"] = "auto";
         return p;
       }()},
      {"hour_range", nullptr},
      {"channels", nullptr},
      {"roi", nullptr},
      {"split", {{"kind", "weeklong"}, {"path", nullptr}}},
      {"seeds", {{"split_seed", 0}, {"init_seed", 0}, {"shuffle_seed", 0}, {"synth_seed", 0}}},
      {"encoder", enc_json},
      {"train", train_json},
      {"checkpoint", nullptr},
      {"synth", synth_json},
      {"materialize", false},
      {"evaluate", {{"split", "test"}, {"zero_shot", true}}},
      {"scaling", {{"fractions", {0.1, 0.2, 0.4, 0.6, 0.8, 1.0}}}},
      {"probe", {{"split", "test"}, {"spaces", {"brain_embedding", "audio_features", "raw_window"}}, {"seed", 0}}},
      {"export", {{"split", "all"}}},
      {"compare", {{"a", ""}, {"b", ""}}},
  };
}

void apply_override(json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw Error(ErrorKind::config, "override '" + assignment + "' is not key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  json* node = &cfg;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw Error(ErrorKind::config, "override key '" + key + "' has an empty component");
    if (!node->is_object()) throw Error(ErrorKind::config, "override key '" + key + "' descends into a non-object");
    if (dot == std::string::npos) {
      // Keys holding strings stay strings ("variant=true" is the name "true").
      if (node->contains(part) && node->at(part).is_string()) value = raw;
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

std::string config_hash(const json& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash_name(cfg.dump())));
  return buf;
}

namespace {

// Objects merge key by key; everything else replaces.
void merge_into(json& base, const json& patch) {
  if (!patch.is_object() || !base.is_object()) {
    base = patch;
    return;
  }
  for (const auto& [k, v] : patch.items()) {
    if (base.contains(k) && base[k].is_object() && v.is_object()) {
      merge_into(base[k], v);
    } else {
      base[k] = v;
    }
  }
}

template <class V>
V get(const json& cfg, const std::string& dotted) {
  const json* node = &cfg;
  std::size_t start = 0;
  while (true) {
    const auto dot = dotted.find('.', start);
    const std::string part = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw Error(ErrorKind::config, "missing config key '" + dotted + "'");
    node = &node->at(part);
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  try {
    return node->get<V>();
  } catch (const json::exception&) {
    throw Error(ErrorKind::config, "config key '" + dotted + "' has the wrong type");
  }
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw Error(ErrorKind::format, path.string() + " is not valid JSON");
  return j;
}

// --- run bookkeeping --------------------------------------------------------

struct Run {
  std::string verb;
  json cfg;
  fs::path out;
  std::vector<std::string> args;
  json artifacts = json::array();

  fs::path path(const std::string& name) const { return out / name; }

  void write_json(const std::string& name, const json& j) {
    std::ofstream(path(name)) << j.dump(2) << '\n';
    artifacts.push_back(name);
  }
  void write_text(const std::string& name, const std::string& text) {
    std::ofstream(path(name)) << text;
    artifacts.push_back(name);
  }
  void add(const std::string& name) { artifacts.push_back(name); }

  void finish() const {
    json meta = {{"verb", verb},
                 {"args", args},
                 {"config", cfg},
                 {"config_hash", config_hash(cfg)},
                 {"seeds", cfg.at("seeds")},
                 {"version", IEEGCLIP_VERSION},
                 {"libraries",
                  {{"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                 std::to_string(EIGEN_MINOR_VERSION)},
                   {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                         std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                         std::to_string(NLOHMANN_JSON_VERSION_PATCH)}}},
                 {"artifacts", artifacts}};
    std::ofstream(out / "run.json") << meta.dump(2) << '\n';
  }
};

std::string ranks_csv(const eval::RetrievalReport& r, const corpus::PairSet& pairs) {
  std::ostringstream os;
  os.precision(17);
  os << "index,chunk_id,rank\n";
  for (std::size_t i = 0; i < r.ranks.size(); ++i) os << i << ',' << pairs.pairs[i].chunk_id << ',' << r.ranks[i] << '\n';
  return os.str();
}

// --- data -------------------------------------------------------------------

// task_policy "auto" excludes task time from week-long data and keeps only
// task time for task datasets.
corpus::PairConfig pair_config(const json& cfg) {
  json pj = cfg.at("pairs");
  if (pj.value("task_policy", std::string{"auto"}) == "auto") {
    pj["task_policy"] = get<std::string>(cfg, "split.kind") == "task" ? "only" : "exclude";
  }
  return corpus::pair_config_from_json(pj);
}

corpus::RecordingManifest load_manifest(const json& cfg) {
  const auto path = get<std::string>(cfg, "manifest");
  if (path.empty()) throw Error(ErrorKind::config, "config key 'manifest' is empty");
  return corpus::load_manifest(path);
}

corpus::SplitManifest make_split(const json& cfg, const corpus::RecordingManifest& m, const corpus::PairConfig& pc) {
  const json& sj = cfg.at("split");
  if (sj.contains("path") && !sj.at("path").is_null()) return corpus::split_from_json(read_json_file(sj.at("path").get<std::string>()));
  const auto seed = get<std::uint64_t>(cfg, "seeds.split_seed");
  const auto kind = get<std::string>(cfg, "split.kind");
  if (kind == "weeklong") return corpus::split_weeklong(m, seed);
  if (kind == "task") {
    std::vector<std::string> ids;
    for (const auto& c : corpus::enumerate_chunks(m, pc)) ids.push_back(c.chunk.id);
    return corpus::split_task(ids, seed, m.subject_id + ":task");
  }
  throw Error(ErrorKind::config, "split.kind must be 'weeklong' or 'task'");
}

struct Data {
  corpus::RecordingManifest manifest;
  std::unique_ptr<corpus::SignalSource> source;
  corpus::PairConfig pc;
  corpus::SplitManifest split;
  corpus::PairSet pairs;
  std::vector<corpus::Interval> gaps;
};

Data load_data(const json& cfg) {
  Data d;
  d.manifest = load_manifest(cfg);
  d.source = synth::source_for(d.manifest);
  d.pc = pair_config(cfg);
  d.split = make_split(cfg, d.manifest, d.pc);
  auto built = corpus::build_pairs(d.manifest, d.split, d.pc, *d.source);
  d.pairs = std::move(built.pairs);
  d.gaps = std::move(built.gaps);

  const json& hr = cfg.at("hour_range");
  if (!hr.is_null()) {
    if (!hr.is_array() || hr.size() != 2) throw Error(ErrorKind::config, "hour_range must be [lo, hi]");
    d.pairs = corpus::hour_filter(d.pairs, hr[0].get<double>(), hr[1].get<double>());
  }
  std::vector<std::string> subset;
  if (!cfg.at("channels").is_null()) subset = cfg.at("channels").get<std::vector<std::string>>();
  if (!cfg.at("roi").is_null()) {
    const auto roi = corpus::roi_channels(d.manifest, cfg.at("roi").get<std::string>());
    if (roi.empty()) throw Error(ErrorKind::config, "no channel has ROI '" + cfg.at("roi").get<std::string>() + "'");
    subset.insert(subset.end(), roi.begin(), roi.end());
  }
  if (!subset.empty()) d.pairs = corpus::channel_mask(d.pairs, subset);
  return d;
}

corpus::PairSet split_pairs(const corpus::PairSet& all, const std::string& which) {
  if (which == "all") return all;
  return all.select(corpus::split_from_string(which));
}

encoder::EncoderConfig encoder_config(const json& cfg, const corpus::PairSet& pairs) {
  json ej = cfg.at("encoder");
  ej["n_channels"] = static_cast<int>(pairs.channel_ids.size());
  ej["out_dim"] = static_cast<int>(pairs.feature_dim);
  ej["seed"] = get<std::uint64_t>(cfg, "seeds.init_seed");
  return encoder::encoder_config_from_json(ej);
}

trainer::TrainConfig train_config(const json& cfg, trainer::TrainMode mode) {
  json tj = cfg.at("train");
  tj["seed"] = get<std::uint64_t>(cfg, "seeds.shuffle_seed");
  tj["mode"] = mode == trainer::TrainMode::finetune ? "finetune" : "pretrain";
  return trainer::train_config_from_json(tj);
}

json checkpoint_meta(const json& cfg, const Data& d, const features::ZScoreStats& z,
                     const trainer::TrainHistory& h) {
  return {{"zscore", features::to_json(z)},
          {"pairs", corpus::to_json(d.pc)},
          {"channel_ids", d.pairs.channel_ids},
          {"feature_dim", d.pairs.feature_dim},
          {"dataset_id", d.pairs.dataset_id},
          {"config_hash", config_hash(cfg)},
          {"history_digest", h.digest()}};
}

template <class T>
encoder::Checkpoint<T> load_model(const json& cfg) {
  const json& p = cfg.at("checkpoint");
  if (p.is_null() || p.get<std::string>().empty()) throw Error(ErrorKind::config, "config key 'checkpoint' is required");
  return encoder::load_checkpoint<T>(p.get<std::string>());
}

void check_shape(const json& meta, const corpus::PairSet& pairs) {
  if (meta.contains("channel_ids") && meta.at("channel_ids").get<std::vector<std::string>>() != pairs.channel_ids) {
    throw Error(ErrorKind::shape_mismatch, "checkpoint channels differ from the dataset channels");
  }
  if (meta.contains("feature_dim") && meta.at("feature_dim").get<std::size_t>() != pairs.feature_dim) {
    throw Error(ErrorKind::shape_mismatch, "checkpoint feature dimension differs from the dataset");
  }
}

// --- verbs ------------------------------------------------------------------

void verb_synth(Run& run) {
  json sj = run.cfg.at("synth");
  sj["seed"] = get<std::uint64_t>(run.cfg, "seeds.synth_seed");
  const auto sc = synth::synth_config_from_json(sj);
  const auto b = synth::write_bundle(sc, run.out, get<bool>(run.cfg, "materialize"));
  run.add("weeklong.json");
  if (!b.task.files.empty()) run.add("task.json");
  run.add("coupling.json");
  run.add("synth_config.json");
}

void verb_split(Run& run) {
  const auto m = load_manifest(run.cfg);
  const auto s = make_split(run.cfg, m, pair_config(run.cfg));
  run.write_json("split.json", corpus::to_json(s));
}

void verb_preprocess(Run& run) {
  const auto m = load_manifest(run.cfg);
  const auto source = synth::source_for(m);
  const auto pc = pair_config(run.cfg);
  fs::create_directories(run.path("prepared"));
  json sessions = json::array();
  for (const auto& session : m.sessions()) {
    const auto* f = m.find(session, corpus::FileKind::neural);
    if (!f) continue;
    const auto prep = corpus::prepare_neural(m, *f, pc, *source);
    Arr1 a;
    a.shape = {static_cast<std::size_t>(prep.data.rows()), static_cast<std::size_t>(prep.data.cols())};
    a.data.resize(a.shape[0] * a.shape[1]);
    for (Eigen::Index r = 0; r < prep.data.rows(); ++r) {
      for (Eigen::Index c = 0; c < prep.data.cols(); ++c) a.data[static_cast<std::size_t>(r) * a.shape[1] + c] = prep.data(r, c);
    }
    const auto valid = static_cast<std::size_t>(std::count(prep.valid.begin(), prep.valid.end(), true));
    a.meta = {{"sample_rate_hz", prep.rate_hz}, {"t0", prep.t0}, {"channel_ids", prep.channel_ids},
              {"preprocessing", corpus::to_string(pc.preprocessing)}};
    const std::string name = "prepared/" + session + ".arr1";
    write_arr1(run.path(name), a);
    run.add(name);
    sessions.push_back({{"session", session},
                        {"channels", prep.channel_ids.size()},
                        {"samples", prep.data.cols()},
                        {"valid_fraction", prep.valid.empty() ? 0.0 : static_cast<double>(valid) / prep.valid.size()}});
  }
  run.write_json("preprocess.json", {{"pairs", corpus::to_json(pc)}, {"sessions", sessions}});
}

template <class T>
void verb_pretrain(Run& run) {
  const Data d = load_data(run.cfg);
  const auto train = d.pairs.select(corpus::Split::train);
  const auto val = d.pairs.select(corpus::Split::val);
  const auto test = d.pairs.select(corpus::Split::test);
  const auto res = trainer::pretrain<T>(encoder_config(run.cfg, d.pairs), train, val,
                                        train_config(run.cfg, trainer::TrainMode::pretrain));
  encoder::Checkpoint<T> ck{res.params, {}, 0, checkpoint_meta(run.cfg, d, res.zscore, res.history)};
  encoder::save_checkpoint(run.path("model.ckpt"), ck);
  run.add("model.ckpt");
  run.write_json("history.json", trainer::to_json(res.history));
  run.write_json("split.json", corpus::to_json(d.split));
  if (!test.empty()) {
    const auto rep = eval::evaluate<T>(res.params, test, res.zscore, "pretrain:" + config_hash(run.cfg));
    run.write_json("test_report.json", eval::to_json(rep));
    run.write_text("test_ranks.csv", ranks_csv(rep, test));
  }
}

template <class T>
void verb_finetune(Run& run) {
  const auto base = load_model<T>(run.cfg);
  const Data d = load_data(run.cfg);
  check_shape(base.meta, d.pairs);
  const auto train = d.pairs.select(corpus::Split::train);
  const auto val = d.pairs.select(corpus::Split::val);
  const auto test = d.pairs.select(corpus::Split::test);
  const auto res = trainer::finetune<T>(base.params, train, val, train_config(run.cfg, trainer::TrainMode::finetune));
  json meta = checkpoint_meta(run.cfg, d, res.zscore, res.history);
  meta["pretrained"] = run.cfg.at("checkpoint");
  encoder::Checkpoint<T> ck{res.params, {}, 0, meta};
  encoder::save_checkpoint(run.path("model.ckpt"), ck);
  run.add("model.ckpt");
  run.write_json("history.json", trainer::to_json(res.history));
  run.write_json("split.json", corpus::to_json(d.split));
  if (!test.empty()) {
    const auto rep = eval::evaluate<T>(res.params, test, res.zscore, "finetune:" + config_hash(run.cfg));
    run.write_json("test_report.json", eval::to_json(rep));
    run.write_text("test_ranks.csv", ranks_csv(rep, test));
  }
}

template <class T>
void verb_evaluate(Run& run) {
  const auto model = load_model<T>(run.cfg);
  const Data d = load_data(run.cfg);
  check_shape(model.meta, d.pairs);
  features::ZScoreStats z;
  if (get<bool>(run.cfg, "evaluate.zero_shot")) {
    if (!model.meta.contains("zscore")) throw Error(ErrorKind::format, "checkpoint carries no z-score statistics");
    z = features::zscore_from_json(model.meta.at("zscore"));
  } else {
    z = trainer::fit_audio_zscore(d.pairs.select(corpus::Split::train));
  }
  const auto set = split_pairs(d.pairs, get<std::string>(run.cfg, "evaluate.split"));
  const auto rep = eval::evaluate<T>(model.params, set, z, config_hash(run.cfg.at("checkpoint")));
  run.write_json("report.json", eval::to_json(rep));
  run.write_text("ranks.csv", ranks_csv(rep, set));
}

template <class T>
void verb_scaling(Run& run) {
  const Data d = load_data(run.cfg);
  const auto val = d.pairs.select(corpus::Split::val);
  const auto test = d.pairs.select(corpus::Split::test);
  const auto fractions = get<std::vector<double>>(run.cfg, "scaling.fractions");
  if (fractions.empty()) throw Error(ErrorKind::config, "scaling.fractions is empty");
  const auto seed = get<std::uint64_t>(run.cfg, "seeds.split_seed");
  const auto enc = encoder_config(run.cfg, d.pairs);
  const auto tc = train_config(run.cfg, trainer::TrainMode::pretrain);

  std::vector<std::pair<double, double>> points;
  std::ostringstream csv;
  csv.precision(17);
  csv << "fraction,train_units,train_pairs,hours,mean_rank,median_rank\n";
  json reports = json::array();
  for (double f : fractions) {
    const auto sub = corpus::subsample_train(d.split, f, seed);
    const auto train = corpus::restrict_to_split(d.pairs, sub).select(corpus::Split::train);
    const auto res = trainer::pretrain<T>(enc, train, val, tc);
    const auto rep = eval::evaluate<T>(res.params, test, res.zscore);
    const double hours = static_cast<double>(train.size()) * d.pc.window_s / 3600.0;
    points.emplace_back(hours, rep.mean);
    csv << f << ',' << sub.count(corpus::Split::train) << ',' << train.size() << ',' << hours << ',' << rep.mean << ','
        << rep.median << '\n';
    json r = eval::to_json(rep);
    r["fraction"] = f;
    r["hours"] = hours;
    reports.push_back(r);
  }
  run.write_text("scaling.csv", csv.str());
  run.write_json("scaling_reports.json", reports);
  if (points.size() >= 3) run.write_json("scaling_fit.json", eval::to_json(eval::fit_log_linear(points)));
}

template <class T>
void verb_probe(Run& run) {
  const Data d = load_data(run.cfg);
  const auto set = split_pairs(d.pairs, get<std::string>(run.cfg, "probe.split"));
  const auto spaces = get<std::vector<std::string>>(run.cfg, "probe.spaces");
  std::optional<encoder::Checkpoint<T>> model;
  probes::ProbeReport report;
  for (const auto& name : spaces) {
    const auto space = probes::space_from_string(name);
    if (space == probes::Space::brain_embedding && !model) {
      model = load_model<T>(run.cfg);
      check_shape(model->meta, set);
    }
    const auto m = probes::build_probe_matrix<T>(space, set, model ? &model->params : nullptr);
    probes::run_probes(m, report, get<std::uint64_t>(run.cfg, "probe.seed"));
  }
  run.write_json("probe_report.json", probes::to_json(report));
  std::ostringstream csv;
  csv.precision(17);
  csv << "space,target,fold,r,alpha\n";
  for (const auto& e : report.entries) {
    for (std::size_t k = 0; k < e.result.fold_r.size(); ++k) {
      csv << probes::to_string(e.space) << ',' << probes::to_string(e.target) << ',' << k << ',' << e.result.fold_r[k]
          << ',' << e.result.fold_alpha[k] << '\n';
    }
  }
  run.write_text("probe_folds.csv", csv.str());
}

template <class T>
void verb_export(Run& run) {
  const auto model = load_model<T>(run.cfg);
  const Data d = load_data(run.cfg);
  check_shape(model.meta, d.pairs);
  const auto set = split_pairs(d.pairs, get<std::string>(run.cfg, "export.split"));
  if (set.empty()) throw Error(ErrorKind::empty_dataset, "nothing to export");
  const auto u = eval::embed<T>(model.params, eval::stack_brain<T>(set));
  std::ostringstream csv;
  csv.precision(9);
  csv << "chunk_id,unit_id,split,day,hour,mel_centroid,voice_flag";
  for (Eigen::Index k = 0; k < u.cols(); ++k) csv << ",e" << k;
  csv << '\n';
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& p = set.pairs[i];
    csv << p.chunk_id << ',' << p.unit_id << ',' << corpus::to_string(p.split_tag) << ',' << p.day_index << ','
        << p.hour << ',' << p.mel_centroid << ',' << p.voice_flag;
    for (Eigen::Index k = 0; k < u.cols(); ++k) csv << ',' << u(static_cast<Eigen::Index>(i), k);
    csv << '\n';
  }
  run.write_text("embeddings.csv", csv.str());
  run.write_json("embeddings_meta.json", {{"rows", set.size()},
                                          {"dim", u.cols()},
                                          {"umap", {{"n_neighbors", 50}, {"min_dist", 0.8}}}});
}

void verb_compare(Run& run) {
  const auto a_path = get<std::string>(run.cfg, "compare.a");
  const auto b_path = get<std::string>(run.cfg, "compare.b");
  if (a_path.empty() || b_path.empty()) throw Error(ErrorKind::config, "compare.a and compare.b are required");
  const auto a = eval::report_from_json(read_json_file(a_path));
  const auto b = eval::report_from_json(read_json_file(b_path));
  const auto mw = eval::mann_whitney_u(a.ranks, b.ranks);
  json out = {{"a", a_path},
              {"b", b_path},
              {"mean_a", a.mean},
              {"mean_b", b.mean},
              {"delta_rank", eval::delta_rank(a, b)},
              {"u", mw.u},
              {"p", mw.p},
              {"exact", mw.exact}};
  if (mw.exact) out["p_rational"] = {mw.p_numerator, mw.p_denominator};
  run.write_json("compare.json", out);
}

template <class T>
void dispatch_typed(Run& run) {
  if (run.verb == "pretrain") return verb_pretrain<T>(run);
  if (run.verb == "finetune") return verb_finetune<T>(run);
  if (run.verb == "evaluate") return verb_evaluate<T>(run);
  if (run.verb == "scaling") return verb_scaling<T>(run);
  if (run.verb == "probe") return verb_probe<T>(run);
  if (run.verb == "export-embeddings") return verb_export<T>(run);
}

void dispatch(Run& run) {
  if (run.verb == "synth") return verb_synth(run);
  if (run.verb == "split") return verb_split(run);
  if (run.verb == "preprocess") return verb_preprocess(run);
  if (run.verb == "compare") return verb_compare(run);
  const auto dtype = get<std::string>(run.cfg, "dtype");
  if (dtype == "f32") return dispatch_typed<float>(run);
  if (dtype == "f64") return dispatch_typed<double>(run);
  throw Error(ErrorKind::config, "dtype must be 'f32' or 'f64'");
}

const std::vector<std::pair<std::string, std::string>> kVerbs = {
    {"synth", "Generate a synthetic bundle"},
    {"preprocess", "Run the neural pipeline and write prepared arrays"},
    {"split", "Assign units to train/val/test"},
    {"pretrain", "Train an encoder with the contrastive objective"},
    {"finetune", "Finetune a checkpoint on a new dataset"},
    {"evaluate", "Retrieval ranks of a checkpoint"},
    {"scaling", "Train over a sweep of training fractions and fit the log-linear trend"},
    {"probe", "Ridge probes over embedding spaces"},
    {"export-embeddings", "Write segment embeddings with metadata as CSV"},
    {"compare", "Mann-Whitney U test on two rank reports"},
};

void write_error(const fs::path& out, const std::string& verb, const std::string& kind, const std::string& message) {
  const json doc = {{"error", {{"kind", kind}, {"message", message}, {"verb", verb}}}};
  std::cerr << doc.dump() << '\n';
  if (out.empty()) return;
  std::error_code ec;
  fs::create_directories(out, ec);
  if (fs::is_directory(out, ec)) std::ofstream(out / "error.json") << doc.dump(2) << '\n';
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"ieegclip: contrastive brain-to-audio encoders", "ieegclip"};
  app.require_subcommand(1);
  std::string config_path, out_override;
  std::vector<std::string> sets;
  for (const auto& [name, desc] : kVerbs) {
    auto* sub = app.add_subcommand(name, desc);
    sub->add_option("-c,--config", config_path, "JSON config file");
    sub->add_option("-s,--set", sets, "Override a config key: key.path=value")->take_all();
    sub->add_option("-o,--out", out_override, "Output directory");
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }
  const std::string verb = app.get_subcommands().front()->get_name();

  Run run;
  run.verb = verb;
  run.args = args;
  try {
    run.cfg = default_config();
    if (!config_path.empty()) {
      const json user = read_json_file(config_path);
      if (!user.is_object()) throw Error(ErrorKind::config, "config must be a JSON object");
      merge_into(run.cfg, user);
    }
    for (const auto& s : sets) {
      apply_override(run.cfg, s);
    }
    if (const char* env = std::getenv("IEEGCLIP_OUTPUT_DIR"); env && *env) run.cfg["output_dir"] = env;
    if (!out_override.empty()) run.cfg["output_dir"] = out_override;
    run.out = get<std::string>(run.cfg, "output_dir");
    fs::create_directories(run.out);
    fs::remove(run.out / "error.json");
    dispatch(run);
    run.finish();
  } catch (const Error& e) {
    write_error(run.out, verb, std::string(to_string(e.kind())), e.what());
    return kExitRuntime;
  } catch (const std::exception& e) {
    write_error(run.out, verb, "internal", e.what());
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace ieegclip::cli
