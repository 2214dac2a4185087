// koff: drives the offloading pipeline from a flat key=value config.
//
//   koff gen-data       --config desk.cfg
//   koff train-teacher  --config desk.cfg
//   koff offload        --config desk.cfg --variant koff
//   koff materialize    --config desk.cfg --variant koff
//   koff train-router   --config desk.cfg
//   koff eval           --config desk.cfg --variant koff --ppl --swap --profile
//   koff probe | lape | sweep | generate
//
// Artifacts land in <root>/<run_id>, root being $KOFF_RUN_DIR or ./runs.

#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "koff/analysis.hpp"
#include "koff/checkpoint.hpp"
#include "koff/config.hpp"
#include "koff/errors.hpp"
#include "koff/experiment.hpp"
#include "koff/materialize.hpp"
#include "koff/router.hpp"
#include "koff/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kUsage = 2, kMissing = 3, kNumeric = 4 };

struct Options {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string variant = "koff";
  bool ppl = false, swap = false, profile = false;
  std::string prompt;
  int n_tokens = 16;
  int domain = -1;
  bool quiet = false;
};

class Run {
 public:
  Run(const Options& opt, const std::string& command) : opt_(opt), command_(command) {
    if (!opt.config_path.empty()) cfg_ = koff::Config::load(opt.config_path);
    for (const auto& o : opt.overrides) cfg_.apply_override(o);
    run_id_ = cfg_.get_string("run_id", "desk");
    desk_ = koff::DeskConfig::from_config(cfg_);
    cfg_.require_all_used();
    const char* env = std::getenv("KOFF_RUN_DIR");
    dir_ = fs::path(env && *env ? env : "runs") / run_id_;
    fs::create_directories(dir_);
  }

  const koff::DeskConfig& desk() const { return desk_; }
  const Options& opt() const { return opt_; }
  fs::path path(const std::string& rel) const { return dir_ / rel; }
  std::string tag(const std::string& stem) const { return stem + "_" + opt_.variant; }

  koff::TrainPlan plan() const { return koff::variant_plan(desk_.plan, opt_.variant); }

  void log(const char* fmt, ...) const __attribute__((format(printf, 2, 3))) {
    if (opt_.quiet) return;
    va_list ap;
    va_start(ap, fmt);
    std::vfprintf(stdout, fmt, ap);
    va_end(ap);
    std::fflush(stdout);
  }

  // Inputs are hashed on load so the manifest captures exactly what was read.
  void input(const fs::path& p) { inputs_[rel(p)] = koff::hex64(koff::hash_file(p)); }
  void output(const fs::path& p) { outputs_.push_back(p); }

  void checkpoint_input(const fs::path& manifest) {
    input(manifest);
    input(koff::Checkpoint::blob_path(manifest));
  }
  void checkpoint_output(const fs::path& manifest) {
    output(manifest);
    output(koff::Checkpoint::blob_path(manifest));
  }

  koff::CorpusSet corpora() {
    const auto dir = path("data");
    if (!fs::exists(dir)) throw koff::MissingDependency("corpus in " + dir.string(), "gen-data");
    auto set = koff::load_corpus_set(dir);
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().extension() == ".tok") input(e.path());
    return set;
  }

  koff::Checkpoint load(const std::string& name, const std::string& producer) {
    const auto p = path(name);
    if (!fs::exists(p)) throw koff::MissingDependency(p.string(), producer);
    checkpoint_input(p);
    return koff::Checkpoint::load(p);
  }

  koff::DenseModel<float> teacher() {
    auto model = koff::load_model(load("teacher.json", "train-teacher"));
    if (!(model.config == desk_.model)) throw koff::ConfigError("teacher.json was trained with a different model config");
    return model;
  }

  koff::OffloadState offload_state() {
    auto ck = load(tag("offload") + ".json", "offload --variant " + opt_.variant);
    koff::OffloadState s;
    s.gates = koff::load_gates(ck);
    for (int d = 0; d < desk_.corpus.n_domains; ++d) s.modules.push_back(koff::load_module(ck, d, desk_.model));
    s.step = std::stoi(ck.meta().at("offload.step"));
    return s;
  }

  koff::CompactBackbone backbone() {
    return koff::load_backbone(load(tag("compact") + ".json", "materialize --variant " + opt_.variant));
  }

  koff::Router router() { return koff::load_router(load("router.json", "train-router")); }

  void write_json(const fs::path& p, const json& j) {
    std::ofstream out(p);
    out << j.dump(2) << "\n";
    if (!out) throw koff::InputError("cannot write " + p.string());
    output(p);
  }

  void write_csv(const fs::path& p, const std::vector<std::string>& header,
                 const std::vector<std::vector<std::string>>& rows) {
    koff::write_csv(p, header, rows);
    output(p);
  }

  // manifests/<command>[_<variant>].json
  void finish(bool per_variant) {
    json m;
    m["command"] = command_;
    if (per_variant) m["variant"] = opt_.variant;
    m["run_id"] = run_id_;
    m["config_hash"] = koff::hex64(koff::fnv1a(cfg_.dump().data(), cfg_.dump().size()));
    m["config"] = cfg_.values();
    m["inputs"] = inputs_;
    json outs = json::object();
    for (const auto& p : outputs_) outs[rel(p)] = koff::hex64(koff::hash_file(p));
    m["outputs"] = outs;
    fs::create_directories(path("manifests"));
    std::ofstream out(path("manifests") / ((per_variant ? tag(command_) : command_) + ".json"));
    out << m.dump(2) << "\n";
  }

 private:
  std::string rel(const fs::path& p) const { return fs::relative(p, dir_).generic_string(); }

  Options opt_;
  std::string command_;
  koff::Config cfg_;
  std::string run_id_;
  koff::DeskConfig desk_;
  fs::path dir_;
  std::map<std::string, std::string> inputs_;
  std::vector<fs::path> outputs_;
};

using koff::fmt;

void save_state(Run& run, const koff::OffloadState& s, const koff::TrainPlan& plan) {
  koff::Checkpoint ck;
  koff::save_gates(ck, s.gates);
  for (const auto& m : s.modules) koff::save_module(ck, m, run.desk().model);
  run.desk().model.write_meta(ck.meta());
  plan.write_meta(ck.meta());
  ck.meta()["offload.variant"] = run.opt().variant;
  ck.meta()["offload.step"] = std::to_string(s.step);
  const auto p = run.path(run.tag("offload") + ".json");
  ck.save(p);
  run.checkpoint_output(p);
}

json sparsity_json(const koff::SparsityReport& r) {
  json j;
  j["dense_params"] = r.dense_params;
  j["removed_params"] = r.removed_params;
  j["global_sparsity"] = r.global_sparsity();
  j["gated_row_sparsity"] = r.gated_row_sparsity();
  json local = json::object();
  for (const auto& [s, v] : r.local) local[s.str()] = v;
  j["local"] = local;
  return j;
}

int cmd_gen_data(Run& run) {
  auto set = koff::generate_corpora(run.desk().corpus);
  for (const auto& p : koff::save_corpus_set(run.path("data"), set)) run.output(p);
  json j;
  j["vocab_size"] = set.vocab_size;
  j["doc_len"] = set.doc_len;
  for (const auto& d : set.domains)
    j["domains"].push_back({{"domain", d.domain}, {"train_tokens", d.train.tokens.size()},
                            {"eval_tokens", d.eval.tokens.size()}});
  j["retention_train_tokens"] = set.retention_train.tokens.size();
  run.write_json(run.path("data_summary.json"), j);
  run.log("generated %d domains into %s\n", set.n_domains(), run.path("data").c_str());
  run.finish(false);
  return kOk;
}

int cmd_train_teacher(Run& run) {
  auto set = run.corpora();
  std::ofstream log(run.path("teacher_log.jsonl"));
  auto model = koff::train_teacher(run.desk().model, run.desk().teacher, set, [&](const koff::TeacherStep& s) {
    log << json{{"step", s.step}, {"loss", s.loss}}.dump() << "\n";
    run.log("step %d loss %.4f\n", s.step, s.loss);
  });
  log.close();
  run.output(run.path("teacher_log.jsonl"));
  koff::Checkpoint ck;
  koff::save_model(ck, model);
  ck.save(run.path("teacher.json"));
  run.checkpoint_output(run.path("teacher.json"));
  auto ppl = koff::teacher_perplexities(model, set, run.desk().eval);
  json j;
  j["ppl"] = ppl;
  j["mean_ppl"] = std::accumulate(ppl.begin(), ppl.end(), 0.0) / ppl.size();
  run.write_json(run.path("teacher_eval.json"), j);
  run.log("teacher mean ppl %.4f\n", j["mean_ppl"].get<double>());
  run.finish(false);
  return kOk;
}

int cmd_offload(Run& run) {
  auto set = run.corpora();
  auto teacher = run.teacher();
  const auto plan = run.plan();
  const auto log_path = run.path(run.tag("train_log") + ".jsonl");
  std::ofstream log(log_path);
  auto res = koff::run_schedule(teacher, plan, set, [&](const koff::StepMetrics& m) {
    log << koff::metrics_json(m) << "\n";
    if (m.mode == "domain")
      run.log("step %d loss %.4f task %.4f hinge %.4f sparsity %.3f\n", m.step, m.loss, m.task, m.hinge,
              m.global_sparsity);
  });
  log.close();
  run.output(log_path);
  save_state(run, res.state, plan);
  run.finish(true);
  return kOk;
}

int cmd_materialize(Run& run) {
  auto teacher = run.teacher();
  auto state = run.offload_state();
  const auto plan = run.plan();
  auto backbone = plan.prune ? koff::materialize(teacher, state.gates, plan.gates)
                             : koff::materialize(teacher, koff::init_gates(teacher, 30.0), plan.gates);
  koff::Checkpoint ck;
  koff::save_backbone(ck, backbone);
  const auto p = run.path(run.tag("compact") + ".json");
  ck.save(p);
  run.checkpoint_output(p);
  auto report = koff::sparsity_report(backbone);
  auto j = sparsity_json(report);
  j["backbone_hash"] = koff::hex64(koff::hash_backbone(backbone));
  run.write_json(run.path(run.tag("sparsity") + ".json"), j);
  run.log("global sparsity %.4f (gated rows %.4f)\n", report.global_sparsity(), report.gated_row_sparsity());
  run.finish(true);
  return kOk;
}

int cmd_train_router(Run& run) {
  auto set = run.corpora();
  auto teacher = run.teacher();
  const auto& rp = run.desk().router;
  koff::Rng rng(rp.seed, koff::Stream::kRouter);
  auto train = koff::sample_texts(set, false, rp.texts_per_domain, rp.text_len, rng);
  auto held = koff::sample_texts(set, true, rp.texts_per_domain, rp.text_len, rng);
  auto router = koff::train_router(teacher.tok_emb, train, set.n_domains(), rp);
  koff::Checkpoint ck;
  koff::save_router(ck, router);
  const double acc = koff::router_accuracy(router, teacher.tok_emb, held);
  ck.meta()["router.heldout_accuracy"] = fmt(acc);
  ck.save(run.path("router.json"));
  run.checkpoint_output(run.path("router.json"));
  run.write_json(run.path("router_eval.json"),
                 {{"train_accuracy", koff::router_accuracy(router, teacher.tok_emb, train)}, {"heldout_accuracy", acc}});
  run.log("router held-out accuracy %.4f\n", acc);
  run.finish(false);
  return kOk;
}

int cmd_eval(Run& run) {
  auto opt = run.opt();
  if (!opt.ppl && !opt.swap && !opt.profile) opt.ppl = true;
  auto set = run.corpora();
  auto backbone = run.backbone();
  auto state = run.offload_state();
  std::vector<koff::MemoryModule<float>> modules;
  for (const auto& m : state.modules) modules.push_back(koff::compact_module(m, backbone));
  const auto& eo = run.desk().eval;

  if (opt.ppl) {
    auto teacher = run.teacher();
    auto tp = koff::teacher_perplexities(teacher, set, eo);
    std::vector<std::vector<std::string>> rows;
    json j;
    double mean = 0;
    for (const auto& d : set.domains) {
      const double p = koff::perplexity(koff::compact_logits_fn(backbone, &modules[d.domain]), d.eval,
                                        set.vocab_size, eo);
      rows.push_back({std::to_string(d.domain), fmt(tp[d.domain]), fmt(p)});
      j["ppl"].push_back(p);
      mean += p / set.n_domains();
    }
    j["teacher_ppl"] = tp;
    j["mean_ppl"] = mean;
    j["teacher_mean_ppl"] = std::accumulate(tp.begin(), tp.end(), 0.0) / tp.size();
    j["sparsity"] = sparsity_json(koff::sparsity_report(backbone));
    run.write_csv(run.path(run.tag("eval_ppl") + ".csv"), {"domain", "teacher_ppl", "ppl"}, rows);
    run.write_json(run.path(run.tag("eval_ppl") + ".json"), j);
    run.log("mean ppl %.4f (teacher %.4f)\n", mean, j["teacher_mean_ppl"].get<double>());
  }
  if (opt.swap) {
    auto m = koff::swap_matrix(backbone, modules, set, eo);
    std::vector<std::string> header = {"eval_domain"};
    for (size_t c = 0; c < m.size(); ++c) header.push_back("module" + std::to_string(c));
    std::vector<std::vector<std::string>> rows;
    for (size_t r = 0; r < m.size(); ++r) {
      rows.push_back({std::to_string(r)});
      for (double v : m[r]) rows.back().push_back(fmt(v));
    }
    run.write_csv(run.path(run.tag("swap") + ".csv"), header, rows);
    run.log("swap matrix written (%zux%zu)\n", m.size(), m.size());
  }
  if (opt.profile) {
    const auto plan = run.plan();
    std::vector<std::vector<std::string>> rows;
    for (const auto& r : koff::layer_sparsity_profile(state.gates, plan.gates))
      rows.push_back({std::to_string(r.site.layer), std::string(koff::proj_name(r.site.proj)),
                      std::to_string(r.channels), std::to_string(r.pruned), fmt(r.sparsity)});
    run.write_csv(run.path(run.tag("profile") + ".csv"), {"layer", "proj", "channels", "pruned", "sparsity"},
                  rows);
  }
  run.finish(true);
  return kOk;
}

int cmd_probe(Run& run) {
  auto set = run.corpora();
  auto teacher = run.teacher();
  auto backbone = run.backbone();
  const auto& d = run.desk();
  koff::Rng rng(d.plan.seed, koff::Stream::kEval);
  auto texts = koff::sample_texts(set, true, d.probe_texts_per_domain, d.eval.seq_len, rng);
  auto r = koff::backbone_probes(teacher, backbone, texts, d.probe_k);
  run.write_json(run.path(run.tag("probe") + ".json"),
                 {{"cka", r.cka}, {"knn_overlap", r.knn_overlap}, {"centroid_cosine", r.centroid_cos},
                  {"k", d.probe_k}, {"texts", texts.size()}});
  run.log("cka %.4f knn %.4f centroid %.4f\n", r.cka, r.knn_overlap, r.centroid_cos);
  run.finish(true);
  return kOk;
}

int cmd_lape(Run& run) {
  auto set = run.corpora();
  auto teacher = run.teacher();
  auto state = run.offload_state();
  const auto plan = run.plan();
  auto r = koff::lape_crossref(teacher, state.gates, plan.gates, set, run.desk().lape);
  std::vector<std::vector<std::string>> rows;
  json j;
  j["n_specific"] = r.n_specific;
  j["n_general"] = r.n_general;
  j["n_excluded"] = r.profile.n_excluded;
  for (const auto& row : r.rows) {
    rows.push_back({row.proj, fmt(row.sparsity), fmt(row.p_pruned_specific), fmt(row.p_pruned_general),
                    fmt(row.ratio_general)});
    j["rows"].push_back({{"proj", row.proj}, {"sparsity", row.sparsity}, {"p_pruned_specific", row.p_pruned_specific},
                         {"p_pruned_general", row.p_pruned_general}, {"ratio_general", row.ratio_general}});
  }
  run.write_csv(run.path(run.tag("lape") + ".csv"),
                {"proj", "sparsity", "p_pruned_specific", "p_pruned_general", "ratio_general"}, rows);
  run.write_json(run.path(run.tag("lape") + ".json"), j);
  run.finish(true);
  return kOk;
}

int cmd_sweep(Run& run) {
  auto set = run.corpora();
  auto teacher = run.teacher();
  const auto& d = run.desk();
  auto rows = koff::sparsity_sweep(teacher, run.plan(), set, d.sweep_targets, d.eval);
  std::vector<std::vector<std::string>> csv;
  json j = json::array();
  for (const auto& r : rows) {
    csv.push_back({fmt(r.s_star), r.ok ? "1" : "0", fmt(r.global_sparsity), fmt(r.gated_row_sparsity),
                   fmt(r.mean_ppl), r.error});
    j.push_back({{"s_star", r.s_star}, {"ok", r.ok}, {"error", r.error}, {"global_sparsity", r.global_sparsity},
                 {"gated_row_sparsity", r.gated_row_sparsity}, {"ppl", r.ppl}, {"mean_ppl", r.mean_ppl}});
    run.log("s*=%.3f ok=%d global %.4f mean ppl %.4f %s\n", r.s_star, r.ok, r.global_sparsity, r.mean_ppl,
            r.error.c_str());
  }
  run.write_csv(run.path(run.tag("sweep") + ".csv"),
                {"s_star", "ok", "global_sparsity", "gated_row_sparsity", "mean_ppl", "error"}, csv);
  run.write_json(run.path(run.tag("sweep") + ".json"), j);
  run.finish(true);
  return kOk;
}

std::vector<int32_t> parse_tokens(const std::string& text) {
  std::vector<int32_t> out;
  std::istringstream in(text);
  std::string tok;
  while (in >> tok) {
    try {
      size_t used = 0;
      const long v = std::stol(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
      out.push_back(static_cast<int32_t>(v));
    } catch (const std::exception&) {
      throw koff::InputError("prompt token '" + tok + "' is not an integer id");
    }
  }
  return out;
}

int cmd_generate(Run& run) {
  auto prompt = parse_tokens(run.opt().prompt);
  if (prompt.empty()) throw koff::InputError("generate needs a non-empty --prompt");
  auto backbone = run.backbone();
  auto state = run.offload_state();
  int domain = run.opt().domain;
  if (domain < 0) domain = koff::route(run.router(), backbone.tok_emb, prompt);
  if (domain >= static_cast<int>(state.modules.size()))
    throw koff::InputError("no memory module for domain " + std::to_string(domain));
  auto module = koff::compact_module(state.modules[domain], backbone);
  auto out = koff::generate(backbone, &module, prompt, run.opt().n_tokens);
  std::string text;
  for (size_t i = 0; i < out.size(); ++i) text += (i ? " " : "") + std::to_string(out[i]);
  std::cout << text << "\n";
  run.write_json(run.path(run.tag("generate") + ".json"), {{"domain", domain}, {"prompt", prompt}, {"output", out}});
  run.finish(true);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"koff: knowledge offloading into per-domain memory modules"};
  app.require_subcommand(1);
  Options opt;

  struct Spec {
    const char* name;
    const char* help;
    int (*fn)(Run&);
    bool variant;
  };
  const std::vector<Spec> specs = {
      {"gen-data", "generate the synthetic domain corpora", cmd_gen_data, false},
      {"train-teacher", "train the dense teacher", cmd_train_teacher, false},
      {"offload", "jointly learn the shared mask and per-domain modules", cmd_offload, true},
      {"materialize", "compact the backbone under the learned mask", cmd_materialize, true},
      {"train-router", "train the domain router", cmd_train_router, false},
      {"eval", "perplexity, swap matrix and sparsity profile", cmd_eval, true},
      {"probe", "dense vs compact backbone representation probes", cmd_probe, true},
      {"lape", "cross-reference pruning with neuron specialization", cmd_lape, true},
      {"sweep", "offloading runs over several sparsity targets", cmd_sweep, true},
      {"generate", "greedy continuation with a routed module", cmd_generate, true},
  };
  std::vector<std::pair<CLI::App*, const Spec*>> subs;
  for (const auto& s : specs) {
    auto* sub = app.add_subcommand(s.name, s.help);
    sub->add_option("-c,--config", opt.config_path, "key=value config file")->check(CLI::ExistingFile);
    sub->add_option("--set", opt.overrides, "override one key (key=value)")->take_all();
    sub->add_flag("-q,--quiet", opt.quiet, "suppress progress output");
    if (s.variant)
      sub->add_option("--variant", opt.variant, "koff, pruning_only, lora_only, kv_only, prune_recover, "
                                                "all_layers, no_retention, sft or blended");
    if (std::string(s.name) == "eval") {
      sub->add_flag("--ppl", opt.ppl, "per-domain perplexity with the matched module");
      sub->add_flag("--swap", opt.swap, "every (domain, module) pairing");
      sub->add_flag("--profile", opt.profile, "per-layer sparsity profile");
    }
    if (std::string(s.name) == "generate") {
      sub->add_option("--prompt", opt.prompt, "space-separated token ids")->required();
      sub->add_option("-n,--tokens", opt.n_tokens, "tokens to generate")->check(CLI::PositiveNumber);
      sub->add_option("--domain", opt.domain, "module to attach (default: routed)");
    }
    subs.emplace_back(sub, &s);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  for (const auto& [sub, spec] : subs) {
    if (!sub->parsed()) continue;
    try {
      if (spec->variant) koff::variant_plan(koff::TrainPlan{}, opt.variant);
      Run run(opt, spec->name);
      return spec->fn(run);
    } catch (const koff::MissingDependency& e) {
      std::cerr << "koff " << spec->name << ": " << e.what() << "\n";
      return kMissing;
    } catch (const koff::NumericError& e) {
      std::cerr << "koff " << spec->name << ": numeric failure: " << e.what() << "\n";
      return kNumeric;
    } catch (const koff::MaterializationError& e) {
      std::cerr << "koff " << spec->name << ": " << e.what() << "\n";
      return kNumeric;
    } catch (const koff::Error& e) {
      std::cerr << "koff " << spec->name << ": " << e.what() << "\n";
      return kUsage;
    } catch (const std::exception& e) {
      std::cerr << "koff " << spec->name << ": " << e.what() << "\n";
      return kFailure;
    }
  }
  return kUsage;
}
