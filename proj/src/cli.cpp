#include "lenskit/cli.hpp"

#include <signal.h>

#include <CLI11.hpp>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

#include "lenskit/error.hpp"
#include "lenskit/http_api.hpp"
#include "lenskit/session.hpp"

namespace lenskit::cli {

namespace fs = std::filesystem;
using session::KeyType;
using session::SessionStore;

namespace {

constexpr const char* kExitCodes =
    "Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.";

std::string flag_name(const std::string& key) {
  std::string s = key;
  for (auto& c : s) {
    if (c == '_') c = '-';
  }
  return s;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Reads `key = value` lines into --key value pairs. Blank lines and lines
// starting with '#' or ';' are skipped.
std::vector<std::pair<std::string, std::string>> read_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read config file " + path.string());
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw UsageError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    }
    std::string key = flag_name(trim(t.substr(0, eq)));
    std::string value = trim(t.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') {
      value = value.substr(1, value.size() - 2);
    }
    if (key.empty()) throw UsageError(path.string() + ":" + std::to_string(lineno) + ": empty key");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

json typed_value(const session::ConfigKey& key, const std::string& raw) {
  try {
    std::size_t pos = 0;
    switch (key.type) {
      case KeyType::integer: {
        if (!raw.empty() && raw[0] == '-') break;
        const unsigned long long v = std::stoull(raw, &pos);
        if (pos == raw.size()) return v;
        break;
      }
      case KeyType::real: {
        const double v = std::stod(raw, &pos);
        if (pos == raw.size()) return v;
        break;
      }
      case KeyType::boolean:
        if (raw == "true" || raw == "1" || raw == "yes" || raw == "on") return true;
        if (raw == "false" || raw == "0" || raw == "no" || raw == "off") return false;
        break;
      case KeyType::text:
      case KeyType::list:
        return raw;
    }
  } catch (const std::exception&) {
  }
  throw UsageError("invalid value '" + raw + "' for --" + flag_name(key.name));
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Options {
  std::string data_dir;
  std::string session;
  std::string kind = "lda";
  std::string data;
  std::map<std::string, std::string> config;
  std::string lens_file;
  std::optional<double> threshold;
  std::optional<std::size_t> iteration;
  bool no_train = false;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string out_dir;
  std::string format = "both";
};

session::SessionConfig build_config(ModelKind kind, const std::map<std::string, std::string>& raw) {
  json j = json::object();
  for (const auto& [name, value] : raw) {
    for (const auto& key : session::config_keys()) {
      if (name == key.name) j[name] = typed_value(key, value);
    }
  }
  return session::SessionConfig::from_json(kind, j);
}

void write_csv(const fs::path& path, const std::vector<std::vector<std::string>>& rows) {
  std::string text;
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) text += ',';
      text += csv_field(row[i]);
    }
    text += '\n';
  }
  write_file_atomic(path, text);
}

std::size_t latest_trained(const session::LensingSession& s) {
  for (std::size_t i = s.iterations.size(); i-- > 0;) {
    if (!s.iterations[i].model_ref.empty()) return i;
  }
  throw StateError("no iteration of session " + s.id + " has been trained");
}

void export_session(SessionStore& store, const Options& o, std::ostream& out) {
  const auto s = store.load(o.session);
  const std::size_t i = o.iteration.value_or(latest_trained(s));
  if (i >= s.iterations.size()) throw UsageError("no iteration " + std::to_string(i));
  const bool want_json = o.format == "json" || o.format == "both";
  const bool want_csv = o.format == "csv" || o.format == "both";
  const fs::path dir = o.out_dir;
  fs::create_directories(dir);
  const auto lens = store.stored_lens(s, i) ? store.stored_lens(s, i) : store.applied_lens(s, i);

  json dims = json::array();
  std::vector<std::vector<std::string>> top_rows;
  std::vector<std::vector<std::string>> item_rows;
  const std::string item_word = s.kind == ModelKind::lda ? "token" : "factor";
  top_rows.push_back({"dim", "label", "rank", item_word, "weight"});
  auto add_dim = [&](std::uint32_t d, const std::vector<std::pair<std::string, double>>& top) {
    json entries = json::array();
    const std::string label = lens && lens->label_of(d) ? *lens->label_of(d) : "";
    for (std::size_t r = 0; r < top.size(); ++r) {
      entries.push_back({{item_word, top[r].first}, {"weight", top[r].second}});
      top_rows.push_back({std::to_string(d), label, std::to_string(r + 1), top[r].first, fmt(top[r].second)});
    }
    json card = {{"dim", d}, {"top", entries}};
    if (!label.empty()) card["label"] = label;
    dims.push_back(card);
  };

  if (s.kind == ModelKind::lda) {
    const Corpus corpus = store.load_corpus(s, i);
    const auto state = store.load_lda(s, i);
    for (std::uint32_t d = 0; d < state.k; ++d) add_dim(d, lda::top_words(state, corpus.vocab, d, s.config.top_n));
    std::vector<std::string> header{"doc_id"};
    for (std::size_t d = 0; d < state.k; ++d) header.push_back("p" + std::to_string(d));
    item_rows.push_back(header);
    for (std::size_t doc = 0; doc < corpus.num_docs(); ++doc) {
      std::vector<std::string> row{corpus.docs[doc].id};
      for (double p : lda::doc_topic_proportions(state, doc)) row.push_back(fmt(p));
      item_rows.push_back(std::move(row));
    }
  } else {
    const BehaviorMatrix matrix = store.load_matrix(s, i);
    const auto state = store.load_hpmf(s, i);
    for (auto d : state.active_dims()) add_dim(d, hpmf::top_factors(state, matrix, d, s.config.top_n));
    std::vector<std::string> header{"user_id"};
    for (std::size_t d = 0; d < state.k; ++d) header.push_back("p" + std::to_string(d));
    item_rows.push_back(header);
    for (std::size_t m = 0; m < matrix.n_users(); ++m) {
      std::vector<std::string> row{matrix.user_ids()[m]};
      for (double p : hpmf::user_preference_proportions(state, m).values) row.push_back(fmt(p));
      item_rows.push_back(std::move(row));
    }
  }

  const std::string top_name = s.kind == ModelKind::lda ? "topics" : "factors";
  const std::string item_name = s.kind == ModelKind::lda ? "doc_topics" : "user_preferences";
  if (want_json) {
    write_json_atomic(dir / (top_name + ".json"), {{"iteration", i}, {"dims", dims}});
  }
  if (want_csv) {
    write_csv(dir / (top_name + ".csv"), top_rows);
    write_csv(dir / (item_name + ".csv"), item_rows);
  }

  const json report = store.report(o.session);
  for (const auto& r : report["reports"]) {
    char name[32];
    std::snprintf(name, sizeof name, "eval-iter-%03zu", r["metadata"]["iteration"].get<std::size_t>());
    if (want_json) write_json_atomic(dir / (std::string(name) + ".json"), r);
    if (want_csv) {
      std::vector<std::vector<std::string>> rows{{"metric", "value"}};
      if (!r["heldout_ll"].is_null()) rows.push_back({"heldout_ll", fmt(r["heldout_ll"].get<double>())});
      for (const char* key : {"micro_f1", "macro_f1"}) {
        if (!r[key].is_null()) rows.push_back({key, fmt(r[key].get<double>())});
      }
      for (const auto& [label, sc] : r["per_label_f1"].items()) {
        rows.push_back({"f1[" + label + "]", fmt(sc["f1"].get<double>())});
      }
      for (const auto& [label, v] : r["roc_auc"].items()) rows.push_back({"auc[" + label + "]", fmt(v.get<double>())});
      for (const auto& [dim, v] : r["ppc_scores"].items()) {
        rows.push_back({"ppc_mi[" + dim + "]", v.is_null() ? "" : fmt(v.get<double>())});
      }
      write_csv(dir / (std::string(name) + ".csv"), rows);
    }
  }
  if (!report["comparison"].is_null()) {
    if (want_json) write_json_atomic(dir / "comparison.json", report["comparison"]);
    if (want_csv) {
      std::vector<std::vector<std::string>> rows{{"metric", "a", "b", "delta"}};
      for (const auto& row : report["comparison"]["rows"]) {
        rows.push_back({row["metric"].get<std::string>(), fmt(row["a"].get<double>()),
                        fmt(row["b"].get<double>()), fmt(row["delta"].get<double>())});
      }
      write_csv(dir / "comparison.csv", rows);
    }
    write_file_atomic(dir / "comparison.txt", report["comparison_text"].get<std::string>());
  }
  out << dir.string() << "\n";
}

int serve(SessionStore& store, const Options& o, std::ostream& err) {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  http::ApiServer server(store);
  const int port = server.bind(o.host, o.port);
  err << "listening on " << o.host << ":" << port << std::endl;
  std::thread waiter([&] {
    int sig = 0;
    sigwait(&set, &sig);
    server.stop();
  });
  server.listen();
  // Wake the waiter if the server stopped for another reason.
  pthread_kill(waiter.native_handle(), SIGTERM);
  waiter.join();
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  CLI::App app("Interpretive lensing for topic models and preference factorization", "lenskit");
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  app.footer(kExitCodes);

  Options o;
  const char* env_dir = std::getenv("LENSKIT_DATA_DIR");
  o.data_dir = env_dir && *env_dir ? env_dir : "lenskit-data";
  app.add_option("--data-dir", o.data_dir, "session root directory (env LENSKIT_DATA_DIR)");
  std::string config_path;
  app.add_option("--config", config_path, "key = value file; keys are flag names without dashes");

  auto add_session = [&](CLI::App* sub, bool required = true) {
    auto* opt = sub->add_option("--session", o.session, "session id");
    if (required) opt->required();
  };
  auto add_config_flags = [&](CLI::App* sub) {
    for (const auto& key : session::config_keys()) {
      const std::string name = key.name;
      std::string help = key.help;
      if (key.lda && !key.hpmf) help += " (LDA)";
      if (key.hpmf && !key.lda) help += " (HPMF)";
      sub->add_option_function<std::string>(
          "--" + flag_name(name), [&o, name](const std::string& v) { o.config[name] = v; }, help);
    }
  };

  auto* ingest = app.add_subcommand("ingest", "validate data and create a session (prints its id)");
  ingest->add_option("--kind", o.kind, "lda or hpmf")->check(CLI::IsMember({"lda", "hpmf"}));
  ingest->add_option("--data", o.data, "JSON-lines transcripts (LDA) or matrix TSV (HPMF)")->required();
  add_config_flags(ingest);

  auto* train = app.add_subcommand("train", "train the current iteration and produce review cards");
  add_session(train, false);
  train->add_option("--kind", o.kind, "with --data: lda or hpmf")->check(CLI::IsMember({"lda", "hpmf"}));
  train->add_option("--data", o.data, "create a session from this file first");
  add_config_flags(train);

  auto* review = app.add_subcommand("review-import", "submit a scripted review from a lens JSON file");
  add_session(review);
  review->add_option("--lens", o.lens_file, "file with an 'assignments' array of judgments")->required();
  review->add_option("--threshold", o.threshold, "overrides the file's threshold");

  auto* iterate = app.add_subcommand("iterate", "start the next lensed iteration and train it");
  add_session(iterate);
  iterate->add_flag("--no-train", o.no_train, "only append the iteration");

  auto* evaluate = app.add_subcommand("evaluate", "evaluate one trained iteration");
  add_session(evaluate);
  evaluate->add_option("--iteration", o.iteration, "iteration index (default: latest trained)");

  auto* finalize = app.add_subcommand("finalize", "compare the first and last iterations and close the session");
  add_session(finalize);

  auto* status = app.add_subcommand("status", "print the session summary");
  add_session(status);

  auto* serve_cmd = app.add_subcommand("serve", "run the HTTP API");
  serve_cmd->add_option("--host", o.host, "bind address");
  serve_cmd->add_option("--port", o.port, "port (0 picks a free one)");

  auto* export_cmd = app.add_subcommand("export", "write top-word/factor tables and reports");
  add_session(export_cmd);
  export_cmd->add_option("--out", o.out_dir, "output directory")->required();
  export_cmd->add_option("--iteration", o.iteration, "iteration index (default: latest trained)");
  export_cmd->add_option("--format", o.format, "json, csv or both")->check(CLI::IsMember({"json", "csv", "both"}));

  for (auto* sub : app.get_subcommands({})) sub->footer(kExitCodes);

  try {
    // Config file entries go in front of the command line so explicit
    // flags win.
    std::vector<std::string> args;
    std::vector<std::string> rest;
    for (std::size_t i = 0; i < raw_args.size(); ++i) {
      const std::string& a = raw_args[i];
      if (a == "--config" && i + 1 < raw_args.size()) {
        config_path = raw_args[++i];
      } else if (a.rfind("--config=", 0) == 0) {
        config_path = a.substr(9);
      } else {
        rest.push_back(a);
      }
    }
    std::size_t sub_pos = rest.size();
    for (std::size_t i = 0; i < rest.size(); ++i) {
      if (app.get_subcommand_no_throw(rest[i]) != nullptr) {
        sub_pos = i;
        break;
      }
    }
    std::vector<std::string> global_from_file, sub_from_file;
    if (!config_path.empty()) {
      for (const auto& [key, value] : read_config_file(config_path)) {
        auto& target = key == "data-dir" ? global_from_file : sub_from_file;
        target.push_back("--" + key);
        target.push_back(value);
      }
    }
    args.insert(args.end(), global_from_file.begin(), global_from_file.end());
    args.insert(args.end(), rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(std::min(sub_pos + 1, rest.size())));
    if (sub_pos < rest.size()) {
      args.insert(args.end(), sub_from_file.begin(), sub_from_file.end());
      args.insert(args.end(), rest.begin() + static_cast<std::ptrdiff_t>(sub_pos + 1), rest.end());
    }

    std::vector<const char*> argv{"lenskit"};
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
      app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
      const int code = app.exit(e, out, err);
      return code == 0 ? 0 : static_cast<int>(ExitCode::usage);
    }

    SessionStore store(o.data_dir);
    if (ingest->parsed() || (train->parsed() && !o.data.empty())) {
      if (train->parsed() && !o.session.empty()) {
        throw UsageError("train takes either --session or --data, not both");
      }
      const ModelKind kind = model_kind_from_string(o.kind);
      const auto cfg = build_config(kind, o.config);
      const auto s = store.create(kind, o.data, cfg);
      if (ingest->parsed()) {
        out << s.id << "\n";
        return 0;
      }
      o.session = s.id;
    } else if (train->parsed()) {
      if (o.session.empty()) throw UsageError("train needs --session or --data");
      if (!o.config.empty()) throw UsageError("config flags apply when creating a session (ingest)");
    }

    if (train->parsed()) {
      const auto s = store.train(o.session);
      out << s.id << " " << session::to_string(s.status) << "\n";
    } else if (review->parsed()) {
      const json lens = read_json(o.lens_file);
      const json& list = lens.is_array() ? lens : lens.value("assignments", json::array());
      if (!list.is_array() || list.empty()) throw UsageError(o.lens_file + ": no judgments found");
      std::map<std::uint32_t, DimensionJudgment> judgments;
      for (const auto& j : list) {
        if (!j.contains("dim") || !j["dim"].is_number_unsigned()) {
          throw UsageError(o.lens_file + ": every judgment needs a non-negative 'dim'");
        }
        const auto dim = j["dim"].get<std::uint32_t>();
        if (!judgments.emplace(dim, judgment_from_json(j)).second) {
          throw UsageError(o.lens_file + ": dimension " + std::to_string(dim) + " judged twice");
        }
      }
      std::optional<double> tau = o.threshold;
      if (!tau && lens.is_object() && lens.contains("threshold")) tau = lens["threshold"].get<double>();
      const auto s = store.submit_review(o.session, judgments, tau);
      out << s.id << " " << session::to_string(s.status) << "\n";
    } else if (iterate->parsed()) {
      auto s = store.next_iteration(o.session);
      if (!o.no_train) s = store.train(o.session);
      out << s.id << " " << session::to_string(s.status) << "\n";
    } else if (evaluate->parsed()) {
      const auto s = store.load(o.session);
      const auto report = store.evaluate(o.session, o.iteration.value_or(latest_trained(s)));
      out << report.to_json().dump(2) << "\n";
    } else if (finalize->parsed()) {
      store.finalize(o.session);
      out << store.report(o.session)["comparison_text"].get<std::string>();
    } else if (status->parsed()) {
      out << session::session_summary(store, store.load(o.session)).dump(2) << "\n";
    } else if (serve_cmd->parsed()) {
      return serve(store, o, err);
    } else if (export_cmd->parsed()) {
      export_session(store, o, out);
    }
    return 0;
  } catch (const Error& e) {
    err << "lenskit: " << e.what() << "\n";
    return static_cast<int>(e.exit_code());
  } catch (const InvariantError& e) {
    err << "lenskit: internal error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::numerical);
  } catch (const std::filesystem::filesystem_error& e) {
    err << "lenskit: " << e.what() << "\n";
    return static_cast<int>(ExitCode::data);
  }
}

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace lenskit::cli
