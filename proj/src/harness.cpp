#include "fmfl/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

#include "json.hpp"

namespace fmfl {

ExperimentResult run_config(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto& task = cfg.task;
  const std::uint64_t seed = cfg.seed;
  const SyntheticSource src =
      task.mode == InputMode::vector
          ? make_vector_source(task.dim, task.classes, task.separation, derive_seed(seed, "source"))
          : make_token_source(task.vocab_size, task.classes, task.seq_len, task.separation,
                              derive_seed(seed, "source"));

  const Dataset synthetic =
      sample_clean(src, cfg.data.synthetic_size / task.classes, derive_seed(seed, "synthetic"));

  const int total = cfg.fl.clients * cfg.data.client_samples;
  const Dataset pool = sample_clean(src, (total + task.classes - 1) / task.classes,
                                    derive_seed(seed, "client-pool"));
  const PartitionPlan plan =
      cfg.data.partition == PartitionKind::iid
          ? partition_iid(pool, cfg.fl.clients, derive_seed(seed, "partition"))
          : partition_dirichlet(pool, cfg.fl.clients, cfg.data.beta, derive_seed(seed, "partition"));
  std::vector<Dataset> clients;
  for (const auto& idx : plan.assignments) clients.push_back(pool.subset(idx));

  EvalSets eval = build_eval_sets(src, cfg.trigger, cfg.data.eval_per_class, derive_seed(seed, "eval"));

  ScenarioSpec spec = cfg.scenario;
  spec.trigger = cfg.trigger;
  ScenarioData wired = build_scenario(spec, synthetic, clients, derive_seed(seed, "scenario"));

  FLConfig fl = cfg.fl;
  fl.seed = seed;
  FLState state = make_state(fl, build_arches(cfg), std::move(wired.client_data),
                             std::move(wired.init_data), std::move(wired.distill_data),
                             std::move(eval), cfg.trigger.target);

  Hooks hooks;
  hooks.aggregate = make_aggregator(cfg.defense);
  hooks.transform = std::move(wired.transform);
  if (cfg.defense.pruning)
    hooks.post_training = make_pruning_hook(cfg.defense.pruning_rate, cfg.defense.pruning_samples);
  hooks.defense_name = cfg.defense.name();
  hooks.scenario_name = to_string(cfg.scenario.kind);

  ExperimentResult out;
  out.config = cfg;
  out.records = run_experiment(state, hooks);
  for (const auto& r : out.records) {
    if (r.round <= 5) out.max_asr_early = std::max(out.max_asr_early, r.mean_asr);
    out.total_filtered += r.filtered;
    out.total_fallbacks += r.fallbacks;
  }
  return out;
}

std::string format_real(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw Error("format_real: conversion failed");
  return std::string(buf, end);
}

void write_rounds_csv(std::ostream& os, const std::vector<RoundRecord>& records) {
  const std::size_t protos = records.empty() ? 0 : records.front().proto_acc.size();
  os << "round,mean_acc,mean_asr,defense,scenario,filtered,selected,teachers,fallbacks";
  for (std::size_t p = 0; p < protos; ++p) os << ",proto" << p << "_acc,proto" << p << "_asr";
  os << '\n';
  for (const auto& r : records) {
    os << r.round << ',' << format_real(r.mean_acc) << ',' << format_real(r.mean_asr) << ','
       << r.defense << ',' << r.scenario << ',' << r.filtered << ',' << r.selected << ','
       << r.teachers << ',' << r.fallbacks;
    for (std::size_t p = 0; p < protos; ++p)
      os << ',' << format_real(r.proto_acc[p]) << ',' << format_real(r.proto_asr[p]);
    os << '\n';
  }
}

std::string summary_json(const ExperimentResult& result) {
  using nlohmann::ordered_json;
  const auto& last = result.final_record();
  ordered_json j;
  j["seed"] = result.config.seed;
  j["scenario"] = last.scenario;
  j["defense"] = last.defense;
  j["rounds"] = result.records.size();
  j["final"] = {{"round", last.round},
                {"mean_acc", last.mean_acc},
                {"mean_asr", last.mean_asr},
                {"proto_acc", last.proto_acc},
                {"proto_asr", last.proto_asr}};
  j["max_asr_rounds_0_5"] = result.max_asr_early;
  j["total_filtered"] = result.total_filtered;
  j["total_fallbacks"] = result.total_fallbacks;
  j["config"] = ordered_json::parse(config_json(result.config));
  return j.dump(2) + "\n";
}

namespace {

std::string fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

void write_curves_svg(std::ostream& os, const std::vector<RoundRecord>& records,
                      const std::string& title) {
  constexpr double W = 640, H = 400, L = 60, R = 130, T = 40, B = 50;
  const double pw = W - L - R, ph = H - T - B;
  const int last = records.empty() ? 1 : std::max(1, records.back().round);
  auto x = [&](double round) { return L + pw * round / last; };
  auto y = [&](double v) { return T + ph * (1 - v); };

  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << fixed(L + pw / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">"
     << title << "</text>\n";
  for (int i = 0; i <= 5; ++i) {
    const double v = i / 5.0;
    os << "<line x1=\"" << fixed(L) << "\" y1=\"" << fixed(y(v)) << "\" x2=\"" << fixed(L + pw)
       << "\" y2=\"" << fixed(y(v)) << "\" stroke=\"#ddd\"/>\n";
    os << "<text x=\"" << fixed(L - 8) << "\" y=\"" << fixed(y(v) + 4)
       << "\" text-anchor=\"end\">" << fixed(v, 1) << "</text>\n";
  }
  const int step = std::max(1, last / 6);
  for (int r = 0; r <= last; r += step)
    os << "<text x=\"" << fixed(x(r)) << "\" y=\"" << fixed(T + ph + 18)
       << "\" text-anchor=\"middle\">" << r << "</text>\n";
  os << "<rect x=\"" << fixed(L) << "\" y=\"" << fixed(T) << "\" width=\"" << fixed(pw)
     << "\" height=\"" << fixed(ph) << "\" fill=\"none\" stroke=\"black\"/>\n";
  os << "<text x=\"" << fixed(L + pw / 2) << "\" y=\"" << fixed(H - 10)
     << "\" text-anchor=\"middle\">round</text>\n";
  os << "<text x=\"16\" y=\"" << fixed(T + ph / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
     << fixed(T + ph / 2) << ")\">rate</text>\n";

  struct Series {
    const char* name;
    const char* color;
    double RoundRecord::*field;
  };
  const Series series[] = {{"ACC", "#1f77b4", &RoundRecord::mean_acc},
                           {"ASR", "#d62728", &RoundRecord::mean_asr}};
  int k = 0;
  for (const auto& s : series) {
    os << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < records.size(); ++i)
      os << (i ? " " : "") << fixed(x(records[i].round)) << ',' << fixed(y(records[i].*s.field));
    os << "\"/>\n";
    const double ly = T + 10 + 20 * k++;
    os << "<line x1=\"" << fixed(L + pw + 15) << "\" y1=\"" << fixed(ly) << "\" x2=\""
       << fixed(L + pw + 40) << "\" y2=\"" << fixed(ly) << "\" stroke=\"" << s.color
       << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << fixed(L + pw + 46) << "\" y=\"" << fixed(ly + 4) << "\">" << s.name
       << "</text>\n";
  }
  os << "</svg>\n";
}

namespace {

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << content;
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

}  // namespace

void write_outputs(const ExperimentResult& result, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error("cannot create output directory '" + dir.string() + "': " + ec.message());
  std::ostringstream csv;
  write_rounds_csv(csv, result.records);
  write_file(dir / "rounds.csv", csv.str());
  write_file(dir / "summary.json", summary_json(result));
  if (result.config.output.svg) {
    std::ostringstream svg;
    const auto& last = result.final_record();
    write_curves_svg(svg, result.records, last.scenario + " / " + last.defense);
    write_file(dir / "curves.svg", svg.str());
  }
}

std::string to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::poison_ratio: return "poison_ratio";
    case SweepAxis::ldi_ratio: return "ldi_ratio";
    case SweepAxis::beta: return "beta";
    case SweepAxis::alpha: return "alpha";
    case SweepAxis::tau: return "tau";
  }
  return "poison_ratio";
}

SweepAxis parse_sweep_axis(const std::string& s) {
  for (auto a : {SweepAxis::poison_ratio, SweepAxis::ldi_ratio, SweepAxis::beta, SweepAxis::alpha,
                 SweepAxis::tau})
    if (to_string(a) == s) return a;
  throw Error("unknown sweep axis '" + s + "'");
}

ExperimentConfig apply_axis(ExperimentConfig cfg, SweepAxis axis, double value) {
  switch (axis) {
    case SweepAxis::poison_ratio:
      cfg.trigger.poison_ratio = value;
      break;
    case SweepAxis::ldi_ratio:
      if (cfg.fl.distill_epochs == 0) throw Error("ldi_ratio sweep needs fl.distill_epochs > 0");
      if (!(value >= 0)) throw Error("ldi_ratio must be >= 0");
      cfg.fl.local_epochs = static_cast<int>(std::lround(value * cfg.fl.distill_epochs));
      break;
    case SweepAxis::beta:
      cfg.data.partition = PartitionKind::dirichlet;
      cfg.data.beta = value;
      break;
    case SweepAxis::alpha:
      cfg.fl.alpha = value;
      break;
    case SweepAxis::tau:
      cfg.fl.tau = value;
      break;
  }
  cfg.scenario.trigger = cfg.trigger;
  cfg.validate();
  return cfg;
}

std::vector<SweepRow> run_sweep(const ExperimentConfig& cfg, SweepAxis axis,
                                const std::vector<double>& values) {
  if (values.empty()) throw Error("sweep: no values");
  std::vector<ExperimentConfig> points;
  for (double v : values) points.push_back(apply_axis(cfg, axis, v));
  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < points.size(); ++i)
    rows.push_back({values[i], run_config(points[i]).final_record()});
  return rows;
}

void write_sweep_csv(std::ostream& os, SweepAxis axis, const std::vector<SweepRow>& rows) {
  os << to_string(axis) << ",round,mean_acc,mean_asr,defense,scenario\n";
  for (const auto& r : rows)
    os << format_real(r.value) << ',' << r.final.round << ',' << format_real(r.final.mean_acc)
       << ',' << format_real(r.final.mean_asr) << ',' << r.final.defense << ','
       << r.final.scenario << '\n';
}

void set_defense_strength(DefenseConfig& d, double value) {
  switch (d.kind) {
    case DefenseKind::none: throw Error("set_defense_strength: no defense selected");
    case DefenseKind::norm_thr: d.norm_threshold = value; break;
    case DefenseKind::dp: d.dp_sigma = value; break;
    case DefenseKind::krum: d.krum_f = static_cast<int>(std::lround(value)); break;
    case DefenseKind::clip_cluster: d.clip_cluster_c = value; break;
    case DefenseKind::sign_guard: d.sign_guard_hi = value; break;
    case DefenseKind::rfout: d.rfout_k = value; break;
  }
  d.validate();
}

TuneResult tune_defense(const ExperimentConfig& cfg, const std::vector<double>& candidates,
                        double reference_acc, double max_drop) {
  if (candidates.empty()) throw Error("tune_defense: no candidates");
  TuneResult best;
  bool have = false;
  for (double v : candidates) {
    ExperimentConfig c = cfg;
    set_defense_strength(c.defense, v);
    const auto res = run_config(c);
    TuneResult t{c.defense, v, res.final_record().mean_acc, res.final_record().mean_asr,
                 res.final_record().mean_acc >= reference_acc - max_drop};
    if (t.within_budget) return t;
    if (!have || t.final_acc > best.final_acc) best = t;
    have = true;
  }
  return best;
}

}  // namespace fmfl
