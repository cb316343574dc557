#include "fmfl/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace fmfl {
namespace {

struct Entry {
  std::string value;
  int line = 0;
  bool used = false;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool valid_key(const std::string& k) {
  if (k.empty() || k.front() == '.' || k.back() == '.') return false;
  for (char c : k)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.')) return false;
  return true;
}

[[noreturn]] void fail(int line, const std::string& msg) {
  throw ConfigError("config line " + std::to_string(line) + ": " + msg);
}

class Table {
 public:
  explicit Table(const std::string& text) {
    std::istringstream in(text);
    std::string raw, section;
    int lineno = 0;
    while (std::getline(in, raw)) {
      ++lineno;
      std::string line = raw;
      if (const auto h = line.find('#'); h != std::string::npos &&
                                         (h == 0 || line[h - 1] == ' ' || line[h - 1] == '\t'))
        line.erase(h);
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') fail(lineno, "unterminated section header");
        section = trim(line.substr(1, line.size() - 2));
        if (!valid_key(section)) fail(lineno, "invalid section name '" + section + "'");
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) fail(lineno, "expected 'key = value'");
      const std::string key = trim(line.substr(0, eq));
      std::string value = trim(line.substr(eq + 1));
      if (!valid_key(key)) fail(lineno, "invalid key '" + key + "'");
      if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
        value = value.substr(1, value.size() - 2);
      const std::string path = section.empty() ? key : section + "." + key;
      if (entries_.count(path)) fail(lineno, "duplicate key '" + path + "'");
      entries_[path] = {value, lineno};
    }
  }

  const Entry* find(const std::string& key) {
    auto it = entries_.find(key);
    if (it == entries_.end()) return nullptr;
    it->second.used = true;
    return &it->second;
  }

  int line_of(const std::string& key) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? 0 : it->second.line;
  }

  void reject_unused() const {
    for (const auto& [k, e] : entries_)
      if (!e.used) fail(e.line, "unknown key '" + k + "'");
  }

  template <typename T>
  bool get(const std::string& key, T& out);

 private:
  std::map<std::string, Entry> entries_;
};

template <typename T>
T parse_number(const std::string& key, const Entry& e) {
  T v{};
  const char* end = e.value.data() + e.value.size();
  auto [p, ec] = std::from_chars(e.value.data(), end, v);
  if (ec != std::errc() || p != end || e.value.empty())
    fail(e.line, "key '" + key + "': expected a number, got '" + e.value + "'");
  if constexpr (std::is_floating_point_v<T>)
    if (!std::isfinite(v)) fail(e.line, "key '" + key + "': value must be finite");
  return v;
}

template <typename T>
T parse_value(const std::string& key, const Entry& e) {
  if constexpr (std::is_same_v<T, std::string>) {
    return e.value;
  } else if constexpr (std::is_same_v<T, bool>) {
    if (e.value == "true") return true;
    if (e.value == "false") return false;
    fail(e.line, "key '" + key + "': expected true or false, got '" + e.value + "'");
  } else {
    return parse_number<T>(key, e);
  }
}

template <typename T>
bool Table::get(const std::string& key, T& out) {
  const Entry* e = find(key);
  if (!e) return false;
  if constexpr (requires { typename T::value_type; } && !std::is_same_v<T, std::string>) {
    out.clear();
    std::istringstream in(e->value);
    std::string item;
    while (std::getline(in, item, ',')) {
      Entry sub{trim(item), e->line};
      out.push_back(parse_value<typename T::value_type>(key, sub));
    }
    if (out.empty()) fail(e->line, "key '" + key + "': empty list");
  } else {
    out = parse_value<T>(key, *e);
  }
  return true;
}

template <typename Enum, typename Parse>
void get_enum(Table& t, const std::string& key, Enum& out, Parse parse) {
  std::string s;
  if (!t.get(key, s)) return;
  try {
    out = parse(s);
  } catch (const Error& err) {
    fail(t.line_of(key), "key '" + key + "': " + err.what());
  }
}

InputMode parse_mode(const std::string& s) {
  if (s == "vector") return InputMode::vector;
  if (s == "token") return InputMode::token;
  throw Error("expected vector or token, got '" + s + "'");
}

PartitionKind parse_partition(const std::string& s) {
  if (s == "iid") return PartitionKind::iid;
  if (s == "dirichlet") return PartitionKind::dirichlet;
  throw Error("expected iid or dirichlet, got '" + s + "'");
}

Regime parse_regime(const std::string& s) {
  if (s == "cross_silo") return Regime::cross_silo;
  if (s == "cross_device") return Regime::cross_device;
  throw Error("expected cross_silo or cross_device, got '" + s + "'");
}

KlDirection parse_kl(const std::string& s) {
  if (s == "student_first") return KlDirection::student_first;
  if (s == "teacher_first") return KlDirection::teacher_first;
  throw Error("expected student_first or teacher_first, got '" + s + "'");
}

InsertAt parse_insert(const std::string& s) {
  if (s == "front") return InsertAt::front;
  if (s == "back") return InsertAt::back;
  throw Error("expected front or back, got '" + s + "'");
}

PatchTrigger default_patch(int dim) {
  PatchTrigger p;
  for (int i = std::max(0, dim - 4); i < dim; ++i) {
    p.positions.push_back(i);
    p.values.push_back(4.0);
  }
  return p;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (task.dim <= 0) throw Error("task.dim must be positive");
  if (task.classes < 2) throw Error("task.classes must be >= 2");
  if (!(task.separation > 0)) throw Error("task.separation must be positive");
  if (task.mode == InputMode::token) {
    if (task.vocab_size < task.classes) throw Error("task.vocab_size must be >= task.classes");
    if (task.seq_len <= 0) throw Error("task.seq_len must be positive");
  }
  for (int h : model.hidden)
    if (h <= 0) throw Error("model.hidden sizes must be positive");
  if (!(model.width_scale > 0)) throw Error("model.width_scale must be positive");
  if (data.synthetic_size < task.classes) throw Error("data.synthetic_size must be >= task.classes");
  if (data.client_samples <= 0) throw Error("data.client_samples must be positive");
  if (!(data.beta > 0)) throw Error("data.beta must be positive");
  if (data.eval_per_class <= 0) throw Error("data.eval_per_class must be positive");
  fl.validate();
  if (trigger.is_patch() != (task.mode == InputMode::vector))
    throw Error("trigger.kind must be patch for vector tasks and token for token tasks");
  trigger.validate(task.mode == InputMode::vector ? task.dim : task.vocab_size, task.classes);
  scenario.validate(fl.clients);
  defense.validate();
}

ExperimentConfig default_config() {
  ExperimentConfig cfg;
  cfg.trigger.variant = default_patch(cfg.task.dim);
  return cfg;
}

ExperimentConfig parse_config(const std::string& text) {
  Table t(text);
  ExperimentConfig cfg;

  t.get("seed", cfg.seed);

  get_enum(t, "task.mode", cfg.task.mode, parse_mode);
  t.get("task.dim", cfg.task.dim);
  t.get("task.classes", cfg.task.classes);
  t.get("task.separation", cfg.task.separation);
  t.get("task.vocab_size", cfg.task.vocab_size);
  t.get("task.seq_len", cfg.task.seq_len);

  t.get("model.hidden", cfg.model.hidden);
  t.get("model.hete", cfg.model.hete);
  t.get("model.width_scale", cfg.model.width_scale);

  t.get("data.synthetic_size", cfg.data.synthetic_size);
  t.get("data.client_samples", cfg.data.client_samples);
  get_enum(t, "data.partition", cfg.data.partition, parse_partition);
  t.get("data.beta", cfg.data.beta);
  t.get("data.eval_per_class", cfg.data.eval_per_class);

  auto& fl = cfg.fl;
  t.get("fl.rounds", fl.rounds);
  t.get("fl.clients", fl.clients);
  get_enum(t, "fl.regime", fl.regime, parse_regime);
  if (!t.get("fl.participation", fl.participation))
    fl.participation = fl.regime == Regime::cross_device ? 0.2 : 1.0;
  t.get("fl.local_epochs", fl.local_epochs);
  t.get("fl.distill_epochs", fl.distill_epochs);
  t.get("fl.pretrain_epochs", fl.pretrain_epochs);
  t.get("fl.lr_pretrain", fl.lr_pretrain);
  t.get("fl.lr_local", fl.lr_local);
  t.get("fl.lr_distill", fl.lr_distill);
  t.get("fl.batch_size", fl.batch_size);
  t.get("fl.alpha", fl.alpha);
  t.get("fl.tau", fl.tau);
  get_enum(t, "fl.kl_direction", fl.kl_direction, parse_kl);
  t.get("fl.prototypes", fl.prototypes);
  fl.seed = cfg.seed;

  std::string kind = cfg.task.mode == InputMode::vector ? "patch" : "token";
  t.get("trigger.kind", kind);
  if (kind == "patch") {
    PatchTrigger p = default_patch(cfg.task.dim);
    const bool has_pos = t.get("trigger.positions", p.positions);
    std::vector<double> values;
    if (t.get("trigger.values", values)) {
      if (values.size() == 1) values.assign(p.positions.size(), values.front());
      p.values = values;
    } else if (has_pos) {
      p.values.assign(p.positions.size(), 4.0);
    }
    cfg.trigger.variant = p;
  } else if (kind == "token") {
    TokenTrigger tok;
    tok.tokens = {cfg.task.vocab_size - 1};
    t.get("trigger.tokens", tok.tokens);
    get_enum(t, "trigger.insert_at", tok.at, parse_insert);
    cfg.trigger.variant = tok;
  } else {
    fail(t.line_of("trigger.kind"), "key 'trigger.kind': expected patch or token, got '" + kind + "'");
  }
  t.get("trigger.target", cfg.trigger.target);
  t.get("trigger.poison_ratio", cfg.trigger.poison_ratio);

  auto& sc = cfg.scenario;
  get_enum(t, "scenario.kind", sc.kind, parse_scenario_kind);
  if (!t.get("scenario.compromised", sc.compromised) && sc.kind == ScenarioKind::BD_FL)
    sc.compromised = {0};
  t.get("scenario.replacement_scale", sc.replacement_scale);
  t.get("scenario.local_poison_ratio", sc.local_poison_ratio);
  t.get("scenario.distill_inject_ratio", sc.distill_inject_ratio);
  sc.trigger = cfg.trigger;

  auto& d = cfg.defense;
  get_enum(t, "defense.kind", d.kind, parse_defense_kind);
  t.get("defense.norm_threshold", d.norm_threshold);
  t.get("defense.dp_sigma", d.dp_sigma);
  t.get("defense.krum_f", d.krum_f);
  t.get("defense.clip_cluster_c", d.clip_cluster_c);
  t.get("defense.sign_guard_lo", d.sign_guard_lo);
  t.get("defense.sign_guard_hi", d.sign_guard_hi);
  t.get("defense.sign_guard_fraction", d.sign_guard_fraction);
  t.get("defense.rfout_k", d.rfout_k);
  t.get("defense.pruning", d.pruning);
  t.get("defense.pruning_rate", d.pruning_rate);
  t.get("defense.pruning_samples", d.pruning_samples);

  t.get("output.dir", cfg.output.dir);
  t.get("output.svg", cfg.output.svg);

  t.reject_unused();
  try {
    cfg.validate();
  } catch (const Error& err) {
    // messages start with the offending key path
    const std::string msg = err.what();
    const std::string key = msg.substr(0, msg.find(' '));
    if (const int line = t.line_of(key)) fail(line, msg);
    throw ConfigError(std::string("config: ") + msg);
  }
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string config_json(const ExperimentConfig& cfg) {
  using nlohmann::ordered_json;
  ordered_json j;
  j["seed"] = cfg.seed;
  j["task"] = {{"mode", to_string(cfg.task.mode)},
               {"dim", cfg.task.dim},
               {"classes", cfg.task.classes},
               {"separation", cfg.task.separation},
               {"vocab_size", cfg.task.vocab_size},
               {"seq_len", cfg.task.seq_len}};
  j["model"] = {{"hidden", cfg.model.hidden},
                {"hete", cfg.model.hete},
                {"width_scale", cfg.model.width_scale}};
  j["data"] = {{"synthetic_size", cfg.data.synthetic_size},
               {"client_samples", cfg.data.client_samples},
               {"partition", cfg.data.partition == PartitionKind::iid ? "iid" : "dirichlet"},
               {"beta", cfg.data.beta},
               {"eval_per_class", cfg.data.eval_per_class}};
  const auto& fl = cfg.fl;
  j["fl"] = {{"rounds", fl.rounds},
             {"clients", fl.clients},
             {"regime", fl.regime == Regime::cross_silo ? "cross_silo" : "cross_device"},
             {"participation", fl.participation},
             {"local_epochs", fl.local_epochs},
             {"distill_epochs", fl.distill_epochs},
             {"pretrain_epochs", fl.pretrain_epochs},
             {"lr_pretrain", fl.lr_pretrain},
             {"lr_local", fl.lr_local},
             {"lr_distill", fl.lr_distill},
             {"batch_size", fl.batch_size},
             {"alpha", fl.alpha},
             {"tau", fl.tau},
             {"kl_direction",
              fl.kl_direction == KlDirection::student_first ? "student_first" : "teacher_first"},
             {"prototypes", fl.prototypes}};
  ordered_json trig;
  if (const auto* p = std::get_if<PatchTrigger>(&cfg.trigger.variant)) {
    trig["kind"] = "patch";
    trig["positions"] = p->positions;
    trig["values"] = p->values;
  } else {
    const auto& tok = std::get<TokenTrigger>(cfg.trigger.variant);
    trig["kind"] = "token";
    trig["tokens"] = tok.tokens;
    trig["insert_at"] = tok.at == InsertAt::front ? "front" : "back";
  }
  trig["target"] = cfg.trigger.target;
  trig["poison_ratio"] = cfg.trigger.poison_ratio;
  j["trigger"] = trig;
  const auto& sc = cfg.scenario;
  j["scenario"] = {{"kind", to_string(sc.kind)},
                   {"compromised", sc.compromised},
                   {"replacement_scale", sc.replacement_scale},
                   {"local_poison_ratio", sc.local_poison_ratio},
                   {"distill_inject_ratio",
                    sc.distill_inject_ratio}};
  const auto& d = cfg.defense;
  j["defense"] = {{"kind", to_string(d.kind)},
                  {"norm_threshold", d.norm_threshold},
                  {"dp_sigma", d.dp_sigma},
                  {"krum_f", d.krum_f},
                  {"clip_cluster_c", d.clip_cluster_c},
                  {"sign_guard_lo", d.sign_guard_lo},
                  {"sign_guard_hi", d.sign_guard_hi},
                  {"sign_guard_fraction", d.sign_guard_fraction},
                  {"rfout_k", d.rfout_k},
                  {"pruning", d.pruning},
                  {"pruning_rate", d.pruning_rate},
                  {"pruning_samples", d.pruning_samples}};
  j["output"] = {{"dir", cfg.output.dir}, {"svg", cfg.output.svg}};
  return j.dump(2);
}

std::vector<ArchSpec> build_arches(const ExperimentConfig& cfg) {
  static constexpr int kExtraWidths[] = {128, 192, 256};
  std::vector<ArchSpec> out;
  for (int p = 0; p < cfg.fl.prototypes; ++p) {
    ArchSpec a;
    a.input_dim = cfg.task.dim;
    a.hidden_sizes = cfg.model.hidden;
    a.num_classes = cfg.task.classes;
    a.mode = cfg.task.mode;
    a.vocab_size = cfg.task.mode == InputMode::token ? cfg.task.vocab_size : 0;
    if (cfg.model.hete) {
      a.extra_pairs = 1 + p % 3;
      a.extra_width = std::max(
          1, static_cast<int>(std::lround(kExtraWidths[p % 3] * cfg.model.width_scale)));
    }
    a.validate();
    out.push_back(std::move(a));
  }
  return out;
}

}  // namespace fmfl
