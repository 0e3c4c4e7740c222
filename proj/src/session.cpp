#include "lenskit/session.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <cerrno>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <random>
#include <regex>
#include <set>
#include <sstream>

#include "lenskit/error.hpp"

namespace lenskit::session {

namespace fs = std::filesystem;

namespace {

constexpr std::array<ConfigKey, 28> kKeys{{
    {"k", KeyType::integer, true, true, "number of latent dimensions"},
    {"seed", KeyType::integer, true, true, "random seed"},
    {"threshold", KeyType::real, true, true, "lens binarization threshold"},
    {"top_n", KeyType::integer, true, true, "words or factors shown per card"},
    {"heldout", KeyType::text, true, true, "held-out transcripts (LDA) or matrix (HPMF)"},
    {"gold", KeyType::text, true, true, "gold label annotations (JSON)"},
    {"alpha", KeyType::real, true, false, "initial symmetric document-topic prior"},
    {"eta", KeyType::real, true, false, "topic-word prior"},
    {"sweeps", KeyType::integer, true, false, "Gibbs sweeps"},
    {"burn_in", KeyType::integer, true, false, "sweeps before hyperparameter updates"},
    {"hyper_opt_interval", KeyType::integer, true, false, "sweeps between alpha updates, 0 = off"},
    {"hyper_opt_steps", KeyType::integer, true, false, "fixed-point steps per alpha update"},
    {"average_interval", KeyType::integer, true, false, "thinning for averaged estimates, 0 = off"},
    {"fold_in_sweeps", KeyType::integer, true, false, "held-out fold-in sweeps"},
    {"fold_in_burn_in", KeyType::integer, true, false, "held-out fold-in burn-in"},
    {"lowercase", KeyType::boolean, true, false, "lowercase tokens"},
    {"min_length", KeyType::integer, true, false, "minimum token length in characters"},
    {"stopwords", KeyType::list, true, false, "comma-separated stopwords"},
    {"a", KeyType::real, false, true, "user preference shape"},
    {"a_prime", KeyType::real, false, true, "user activity shape"},
    {"b_prime", KeyType::real, false, true, "user activity mean"},
    {"c", KeyType::real, false, true, "factor attribute shape"},
    {"c_prime", KeyType::real, false, true, "factor popularity shape"},
    {"d_prime", KeyType::real, false, true, "factor popularity mean"},
    {"max_iters", KeyType::integer, false, true, "maximum CAVI iterations"},
    {"elbo_tol", KeyType::real, false, true, "relative ELBO convergence tolerance"},
    {"convergence_window", KeyType::integer, false, true, "consecutive converged iterations"},
    {"jitter", KeyType::real, false, true, "relative initialization jitter"},
}};

const std::regex kIdPattern("[A-Za-z0-9][A-Za-z0-9_-]{0,63}");

std::string iter_dir(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "iter-%03zu", i);
  return buf;
}

std::string now_iso() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string new_session_id() {
  std::random_device rd;
  std::uint64_t x = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
  x ^= static_cast<std::uint64_t>(
      std::chrono::steady_clock::now().time_since_epoch().count());
  char buf[24];
  std::snprintf(buf, sizeof buf, "s%012llx",
                static_cast<unsigned long long>(x & 0xffffffffffffULL));
  return buf;
}

class SessionLock {
 public:
  explicit SessionLock(const fs::path& dir) {
    const fs::path p = dir / ".lock";
    fd_ = ::open(p.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) throw DataError("cannot open lock " + p.string() + ": " + std::strerror(errno));
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      throw BusyError("session is locked by another writer");
    }
  }
  ~SessionLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  SessionLock(const SessionLock&) = delete;
  SessionLock& operator=(const SessionLock&) = delete;

 private:
  int fd_ = -1;
};

void require_status(const LensingSession& s, std::initializer_list<Status> allowed,
                    const std::string& op) {
  for (Status st : allowed) {
    if (s.status == st) return;
  }
  throw StateError(op + " is not allowed while the session is " + to_string(s.status));
}

std::string join_dims(const std::vector<std::uint32_t>& dims) {
  std::string out;
  for (auto d : dims) {
    if (!out.empty()) out += ", ";
    out += std::to_string(d);
  }
  return out;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ',')) {
    const auto b = cur.find_first_not_of(" \t");
    const auto e = cur.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(cur.substr(b, e - b + 1));
  }
  return out;
}

// Maps a held-out matrix onto the training matrix's user and factor order.
BehaviorMatrix align_matrix(const BehaviorMatrix& train, const BehaviorMatrix& heldout) {
  std::map<std::string, std::uint32_t> users, factors;
  for (std::size_t m = 0; m < train.n_users(); ++m) {
    users[train.user_ids()[m]] = static_cast<std::uint32_t>(m);
  }
  for (std::size_t n = 0; n < train.n_factors(); ++n) {
    factors[train.factor_names()[n]] = static_cast<std::uint32_t>(n);
  }
  std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;
  for (const auto& [m, n] : heldout.entries()) {
    auto u = users.find(heldout.user_ids()[m]);
    auto f = factors.find(heldout.factor_names()[n]);
    if (u == users.end()) throw DataError("held-out user '" + heldout.user_ids()[m] + "' not in training data");
    if (f == factors.end()) {
      throw DataError("held-out factor '" + heldout.factor_names()[n] + "' not in training data");
    }
    pairs.emplace_back(u->second, f->second);
  }
  return BehaviorMatrix(train.user_ids(), train.factor_names(), std::move(pairs));
}

}  // namespace

std::string to_string(Status status) {
  switch (status) {
    case Status::training: return "training";
    case Status::awaiting_review: return "awaiting_review";
    case Status::augmenting: return "augmenting";
    case Status::done: return "done";
  }
  return "unknown";
}

Status status_from_string(const std::string& s) {
  if (s == "training") return Status::training;
  if (s == "awaiting_review") return Status::awaiting_review;
  if (s == "augmenting") return Status::augmenting;
  if (s == "done") return Status::done;
  throw DataError("unknown session status '" + s + "'");
}

std::span<const ConfigKey> config_keys() {
  return kKeys;
}

void SessionConfig::validate(ModelKind kind) const {
  if (kind == ModelKind::lda) {
    lda.validate();
    if (fold_in_sweeps == 0 || fold_in_burn_in >= fold_in_sweeps) {
      throw UsageError("fold_in_burn_in must be < fold_in_sweeps");
    }
  } else {
    hpmf.validate();
  }
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw UsageError("threshold must lie in [0, 1]");
  if (top_n == 0) throw UsageError("top_n must be >= 1");
}

json SessionConfig::to_json(ModelKind kind) const {
  json j = kind == ModelKind::lda ? lda.to_json() : hpmf.to_json();
  j["threshold"] = threshold;
  j["top_n"] = top_n;
  j["heldout"] = heldout_ref;
  j["gold"] = gold_ref;
  if (kind == ModelKind::lda) {
    j["fold_in_sweeps"] = fold_in_sweeps;
    j["fold_in_burn_in"] = fold_in_burn_in;
    j["lowercase"] = tokenizer.lowercase;
    j["min_length"] = tokenizer.min_length;
    j["stopwords"] = std::vector<std::string>(tokenizer.stopwords.begin(), tokenizer.stopwords.end());
  }
  return j;
}

SessionConfig SessionConfig::from_json(ModelKind kind, const json& j) {
  if (j.is_null()) return from_json(kind, json::object());
  if (!j.is_object()) throw UsageError("config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const auto& ck : config_keys()) {
      if (key == ck.name && (kind == ModelKind::lda ? ck.lda : ck.hpmf)) known = true;
    }
    if (!known) throw UsageError("unknown config key '" + key + "' for " + lenskit::to_string(kind));
  }
  SessionConfig c;
  try {
    if (kind == ModelKind::lda) {
      c.lda = lda::LdaConfig::from_json(j);
      c.fold_in_sweeps = j.value("fold_in_sweeps", c.fold_in_sweeps);
      c.fold_in_burn_in = j.value("fold_in_burn_in", c.fold_in_burn_in);
      c.tokenizer.lowercase = j.value("lowercase", c.tokenizer.lowercase);
      c.tokenizer.min_length = j.value("min_length", c.tokenizer.min_length);
      if (j.contains("stopwords")) {
        const auto& sw = j["stopwords"];
        std::vector<std::string> words =
            sw.is_string() ? split_list(sw.get<std::string>()) : sw.get<std::vector<std::string>>();
        for (auto& w : words) {
          if (c.tokenizer.lowercase) {
            std::transform(w.begin(), w.end(), w.begin(), [](unsigned char ch) {
              return static_cast<char>(std::tolower(ch));
            });
          }
          c.tokenizer.stopwords.insert(w);
        }
      }
    } else {
      c.hpmf = hpmf::HpmfConfig::from_json(j);
    }
    c.threshold = j.value("threshold", c.threshold);
    c.top_n = j.value("top_n", c.top_n);
    c.heldout_ref = j.value("heldout", std::string());
    c.gold_ref = j.value("gold", std::string());
  } catch (const json::exception& e) {
    throw UsageError(std::string("malformed config: ") + e.what());
  }
  c.validate(kind);
  return c;
}

json LensingSession::to_json() const {
  json iters = json::array();
  for (const auto& r : iterations) {
    iters.push_back({{"index", r.index},
                     {"data_ref", r.data_ref},
                     {"model_ref", r.model_ref},
                     {"cards_ref", r.cards_ref},
                     {"lens_ref", r.lens_ref},
                     {"eval_ref", r.eval_ref},
                     {"error", r.error ? json(*r.error) : json(nullptr)}});
  }
  return {{"format", "lenskit-session"},
          {"version", 1},
          {"id", id},
          {"model_kind", lenskit::to_string(kind)},
          {"status", to_string(status)},
          {"created_at", created_at},
          {"config", config.to_json(kind)},
          {"iterations", iters},
          {"report_ref", report_ref}};
}

LensingSession LensingSession::from_json(const json& j) {
  LensingSession s;
  try {
    if (j.value("format", "") != "lenskit-session") throw DataError("not a session file");
    s.id = j.at("id").get<std::string>();
    s.kind = model_kind_from_string(j.at("model_kind").get<std::string>());
    s.status = status_from_string(j.at("status").get<std::string>());
    s.created_at = j.value("created_at", "");
    s.config = SessionConfig::from_json(s.kind, j.at("config"));
    for (const auto& r : j.at("iterations")) {
      IterationRecord rec;
      rec.index = r.at("index").get<std::size_t>();
      rec.data_ref = r.at("data_ref").get<std::string>();
      rec.model_ref = r.value("model_ref", "");
      rec.cards_ref = r.value("cards_ref", "");
      rec.lens_ref = r.value("lens_ref", "");
      rec.eval_ref = r.value("eval_ref", "");
      if (r.contains("error") && !r["error"].is_null()) rec.error = r["error"].get<std::string>();
      if (rec.index != s.iterations.size()) throw DataError("iteration indices are not contiguous");
      s.iterations.push_back(std::move(rec));
    }
    s.report_ref = j.value("report_ref", "");
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed session file: ") + e.what());
  } catch (const UsageError& e) {
    throw DataError(std::string("session file has invalid config: ") + e.what());
  }
  if (s.iterations.empty()) throw DataError("session file has no iterations");
  return s;
}

SessionStore::SessionStore(fs::path root) : root_(std::move(root)) {
  std::error_code ec;
  fs::create_directories(root_, ec);
  if (ec) throw DataError("cannot create session root " + root_.string() + ": " + ec.message());
}

fs::path SessionStore::session_dir(const std::string& id) const {
  if (!std::regex_match(id, kIdPattern)) throw NotFoundError("no session '" + id + "'");
  return root_ / id;
}

void SessionStore::save(const LensingSession& s) const {
  write_json_atomic(session_dir(s.id) / "session.json", s.to_json());
}

LensingSession SessionStore::create(ModelKind kind, const fs::path& data,
                                    const SessionConfig& config) {
  config.validate(kind);
  SessionConfig cfg = config;

  std::optional<Corpus> corpus;
  std::optional<BehaviorMatrix> matrix;
  std::string heldout_text;
  std::optional<eval::GoldAnnotations> gold;
  if (kind == ModelKind::lda) {
    corpus = ingest_transcripts(data, cfg.tokenizer);
    if (!cfg.heldout_ref.empty()) {
      ingest_transcripts(cfg.heldout_ref, cfg.tokenizer);
      heldout_text = read_file(cfg.heldout_ref);
    }
  } else {
    matrix = ingest_behavior_matrix(data);
    if (!cfg.heldout_ref.empty()) {
      heldout_text = behavior_matrix_to_tsv(
          align_matrix(*matrix, ingest_behavior_matrix(cfg.heldout_ref)));
    }
  }
  if (!cfg.gold_ref.empty()) gold = eval::GoldAnnotations::load(cfg.gold_ref);

  LensingSession s;
  s.kind = kind;
  s.status = Status::training;
  s.created_at = now_iso();
  do {
    s.id = new_session_id();
  } while (fs::exists(root_ / s.id));

  const fs::path staging = root_ / (".staging-" + s.id);
  fs::create_directories(staging);
  try {
    IterationRecord rec;
    rec.index = 0;
    if (kind == ModelKind::lda) {
      rec.data_ref = iter_dir(0) + "/corpus.json";
      write_json_atomic(staging / rec.data_ref, corpus_to_json(*corpus));
    } else {
      rec.data_ref = "data/matrix.tsv";
      write_file_atomic(staging / rec.data_ref, behavior_matrix_to_tsv(*matrix));
    }
    if (!cfg.heldout_ref.empty()) {
      cfg.heldout_ref = kind == ModelKind::lda ? "data/heldout.jsonl" : "data/heldout.tsv";
      write_file_atomic(staging / cfg.heldout_ref, heldout_text);
    }
    if (gold) {
      cfg.gold_ref = "data/gold.json";
      write_json_atomic(staging / cfg.gold_ref, gold->to_json());
    }
    s.config = cfg;
    s.iterations.push_back(rec);
    write_json_atomic(staging / "progress.json",
                      {{"iteration", 0}, {"phase", "queued"}, {"completed", 0}, {"total", 0}});
    write_json_atomic(staging / "session.json", s.to_json());
    fs::rename(staging, root_ / s.id);
  } catch (...) {
    std::error_code ec;
    fs::remove_all(staging, ec);
    throw;
  }
  return s;
}

LensingSession SessionStore::load(const std::string& id) const {
  const fs::path p = session_dir(id) / "session.json";
  if (!fs::exists(p)) throw NotFoundError("no session '" + id + "'");
  return LensingSession::from_json(read_json(p));
}

std::vector<std::string> SessionStore::list() const {
  std::vector<std::string> out;
  for (const auto& entry : fs::directory_iterator(root_)) {
    const auto name = entry.path().filename().string();
    if (entry.is_directory() && std::regex_match(name, kIdPattern) &&
        fs::exists(entry.path() / "session.json")) {
      out.push_back(name);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

Progress SessionStore::progress(const std::string& id) const {
  Progress p;
  const fs::path f = session_dir(id) / "progress.json";
  if (!fs::exists(f)) return p;
  const json j = read_json(f);
  p.iteration = j.value("iteration", std::size_t{0});
  p.phase = j.value("phase", "");
  p.completed = j.value("completed", std::size_t{0});
  p.total = j.value("total", std::size_t{0});
  return p;
}

void SessionStore::set_progress(const std::string& id, const Progress& p) const {
  write_json_atomic(session_dir(id) / "progress.json", {{"iteration", p.iteration},
                                                         {"phase", p.phase},
                                                         {"completed", p.completed},
                                                         {"total", p.total}});
}

std::optional<Lens> SessionStore::stored_lens(const LensingSession& s, std::size_t i) const {
  if (i >= s.iterations.size() || s.iterations[i].lens_ref.empty()) return std::nullopt;
  return Lens::from_json(read_json(session_dir(s.id) / s.iterations[i].lens_ref));
}

std::optional<Lens> SessionStore::applied_lens(const LensingSession& s, std::size_t i) const {
  if (i == 0) return std::nullopt;
  auto lens = stored_lens(s, i - 1);
  if (!lens) throw DataError("iteration " + std::to_string(i - 1) + " has no stored lens");
  return lens;
}

Corpus SessionStore::load_corpus(const LensingSession& s, std::size_t i) const {
  return corpus_from_json(read_json(session_dir(s.id) / s.iterations.at(i).data_ref));
}

BehaviorMatrix SessionStore::load_matrix(const LensingSession& s, std::size_t i) const {
  return ingest_behavior_matrix(session_dir(s.id) / s.iterations.at(i).data_ref);
}

lda::TopicModelState SessionStore::load_lda(const LensingSession& s, std::size_t i) const {
  const auto& rec = s.iterations.at(i);
  if (rec.model_ref.empty()) throw StateError("iteration " + std::to_string(i) + " is not trained");
  return lda::snapshot_from_json(read_json(session_dir(s.id) / rec.model_ref), load_corpus(s, i));
}

hpmf::HpmfState SessionStore::load_hpmf(const LensingSession& s, std::size_t i) const {
  const auto& rec = s.iterations.at(i);
  if (rec.model_ref.empty()) throw StateError("iteration " + std::to_string(i) + " is not trained");
  return hpmf::snapshot_from_json(read_json(session_dir(s.id) / rec.model_ref));
}

LensingSession SessionStore::train(const std::string& id) {
  const fs::path dir = session_dir(id);
  LensingSession s = load(id);
  SessionLock lock(dir);
  s = load(id);
  require_status(s, {Status::training}, "training");
  const std::size_t i = s.iterations.size() - 1;
  auto& rec = s.iterations.back();
  const std::string model_ref = iter_dir(i) + "/model.json";

  Progress prog{i, "training", 0, 0};
  try {
    const auto lens = applied_lens(s, i);
    if (s.kind == ModelKind::lda) {
      const Corpus corpus = load_corpus(s, i);
      const auto& cfg = s.config.lda;
      prog.total = cfg.sweeps;
      set_progress(id, prog);
      const std::size_t every = std::max<std::size_t>(1, cfg.sweeps / 50);
      auto state = lda::train(corpus, cfg, lens ? &*lens : nullptr,
                              [&](const lda::TopicModelState& st) {
                                if (st.sweep_count % every == 0) {
                                  prog.completed = st.sweep_count;
                                  set_progress(id, prog);
                                }
                              });
      write_json_atomic(dir / model_ref, lda::snapshot_to_json(state, cfg));
    } else {
      const BehaviorMatrix matrix = load_matrix(s, i);
      const auto& cfg = s.config.hpmf;
      prog.total = cfg.max_iters;
      set_progress(id, prog);
      auto state = hpmf::train(matrix, cfg, lens ? &*lens : nullptr,
                               [&](const hpmf::HpmfState& st) {
                                 if (st.elbo_trace.size() % 10 == 0) {
                                   prog.completed = st.elbo_trace.size();
                                   set_progress(id, prog);
                                 }
                               });
      write_json_atomic(dir / model_ref, hpmf::snapshot_to_json(state, cfg));
    }
  } catch (const std::exception& e) {
    rec.error = e.what();
    rec.model_ref.clear();
    save(s);
    set_progress(id, {i, "failed", prog.completed, prog.total});
    throw;
  }
  rec.model_ref = model_ref;
  rec.error.reset();
  s = advance_locked(std::move(s));
  set_progress(id, {i, "idle", prog.total, prog.total});
  return s;
}

std::vector<std::uint32_t> SessionStore::card_dims(const LensingSession& s) const {
  const std::size_t i = s.iterations.size() - 1;
  if (s.kind == ModelKind::hpmf) return load_hpmf(s, i).active_dims();
  const auto lens = applied_lens(s, i);
  if (lens) return lens->non_discarded_dims();
  std::vector<std::uint32_t> all(s.config.lda.k);
  for (std::uint32_t d = 0; d < all.size(); ++d) all[d] = d;
  return all;
}

LensingSession SessionStore::advance_locked(LensingSession s) {
  require_status(s, {Status::training}, "advancing to review");
  const std::size_t i = s.iterations.size() - 1;
  auto& rec = s.iterations.back();
  if (rec.model_ref.empty()) throw StateError("iteration " + std::to_string(i) + " has no trained model");
  const fs::path dir = session_dir(s.id);
  const auto lens = applied_lens(s, i);
  const auto dims = card_dims(s);

  json cards = json::array();
  if (s.kind == ModelKind::lda) {
    const Corpus corpus = load_corpus(s, i);
    const auto state = load_lda(s, i);
    for (auto d : dims) {
      json top = json::array();
      for (const auto& [tok, w] : lda::top_words(state, corpus.vocab, d, s.config.top_n)) {
        top.push_back({{"token", tok}, {"weight", w}});
      }
      json card = {{"dim", d}, {"top", top}};
      if (lens && lens->label_of(d)) card["prior_label"] = *lens->label_of(d);
      cards.push_back(card);
    }
  } else {
    const BehaviorMatrix matrix = load_matrix(s, i);
    const auto state = load_hpmf(s, i);
    for (auto d : dims) {
      json top = json::array();
      for (const auto& [name, w] : hpmf::top_factors(state, matrix, d, s.config.top_n)) {
        top.push_back({{"factor", name}, {"weight", w}});
      }
      json card = {{"dim", d}, {"top", top}};
      if (lens && lens->label_of(d)) card["prior_label"] = *lens->label_of(d);
      cards.push_back(card);
    }
  }
  rec.cards_ref = iter_dir(i) + "/cards.json";
  write_json_atomic(dir / rec.cards_ref, {{"iteration", i}, {"model_kind", lenskit::to_string(s.kind)},
                                          {"dims", cards}});
  s.status = Status::awaiting_review;
  save(s);
  return s;
}

LensingSession SessionStore::advance_after_training(const std::string& id) {
  SessionLock lock(session_dir(id));
  LensingSession s = load(id);
  if (s.status == Status::awaiting_review && !s.current().cards_ref.empty()) return s;
  return advance_locked(std::move(s));
}

LensingSession SessionStore::record_judgment(const std::string& id, std::uint32_t dim,
                                             const DimensionJudgment& judgment) {
  const fs::path dir = session_dir(id);
  LensingSession s = load(id);
  SessionLock lock(dir);
  s = load(id);
  require_status(s, {Status::awaiting_review}, "recording a judgment");
  judgment.validate();
  const auto dims = card_dims(s);
  if (std::find(dims.begin(), dims.end(), dim) == dims.end()) {
    throw UsageError("dimension " + std::to_string(dim) + " is not under review");
  }
  auto drafts = draft_judgments(id);
  drafts[dim] = judgment;
  json arr = json::array();
  for (const auto& [d, jd] : drafts) arr.push_back(judgment_to_json(d, jd));
  write_json_atomic(dir / iter_dir(s.iterations.size() - 1) / "judgments.json", {{"judgments", arr}});
  return s;
}

std::map<std::uint32_t, DimensionJudgment> SessionStore::draft_judgments(const std::string& id) const {
  const LensingSession s = load(id);
  const fs::path f = session_dir(id) / iter_dir(s.iterations.size() - 1) / "judgments.json";
  std::map<std::uint32_t, DimensionJudgment> out;
  if (!fs::exists(f)) return out;
  const json doc = read_json(f);
  for (const auto& j : doc.at("judgments")) {
    out[j.at("dim").get<std::uint32_t>()] = judgment_from_json(j);
  }
  return out;
}

LensingSession SessionStore::submit_review(const std::string& id,
                                           const std::map<std::uint32_t, DimensionJudgment>& judgments,
                                           std::optional<double> threshold) {
  const fs::path dir = session_dir(id);
  LensingSession s = load(id);
  SessionLock lock(dir);
  return submit_locked(load(id), judgments, threshold);
}

LensingSession SessionStore::complete_review(const std::string& id, std::optional<double> threshold) {
  const fs::path dir = session_dir(id);
  LensingSession s = load(id);
  SessionLock lock(dir);
  return submit_locked(load(id), draft_judgments(id), threshold);
}

LensingSession SessionStore::submit_locked(LensingSession s,
                                           const std::map<std::uint32_t, DimensionJudgment>& judgments,
                                           std::optional<double> threshold) {
  require_status(s, {Status::awaiting_review}, "submitting a review");
  const std::size_t i = s.iterations.size() - 1;
  const std::size_t k = s.config.k(s.kind);
  const double tau = threshold.value_or(s.config.threshold);
  const auto dims = card_dims(s);
  const std::set<std::uint32_t> active(dims.begin(), dims.end());

  for (const auto& [dim, jd] : judgments) {
    if (dim >= k) {
      throw UsageError("dimension " + std::to_string(dim) + " out of range (k = " + std::to_string(k) + ")");
    }
    if (!active.count(dim) && jd.status == JudgmentStatus::labeled) {
      throw UsageError("dimension " + std::to_string(dim) + " was discarded in an earlier iteration");
    }
    jd.validate();
  }
  std::vector<std::uint32_t> missing;
  for (auto d : dims) {
    if (!judgments.count(d)) missing.push_back(d);
  }
  if (!missing.empty()) throw UsageError("unjudged dimensions: " + join_dims(missing));

  Lens lens(s.kind, k, tau);
  const auto prior = applied_lens(s, i);
  for (std::uint32_t d = 0; d < k; ++d) {
    if (active.count(d)) {
      lens = lens.record_judgment(d, judgments.at(d));
    } else if (prior && prior->is_discarded(d)) {
      lens = lens.record_judgment(d, prior->assignments().at(d));
    } else {
      lens = lens.record_judgment(d, DimensionJudgment::discarded());
    }
  }
  if (lens.k_star() == 0) throw UsageError("at least one labeled dimension required");

  std::map<std::string, std::vector<double>> per_item;
  if (s.kind == ModelKind::lda) {
    const Corpus corpus = load_corpus(s, i);
    const auto state = load_lda(s, i);
    for (std::size_t d = 0; d < corpus.num_docs(); ++d) {
      per_item[corpus.docs[d].id] = lda::doc_topic_proportions(state, d);
    }
  } else {
    const BehaviorMatrix matrix = load_matrix(s, i);
    const auto state = load_hpmf(s, i);
    for (std::size_t m = 0; m < matrix.n_users(); ++m) {
      per_item[matrix.user_ids()[m]] = hpmf::user_preference_proportions(state, m).values;
    }
  }
  lens = lens.build_item_labels(per_item);

  json submitted = json::array();
  for (const auto& [d, jd] : judgments) submitted.push_back(judgment_to_json(d, jd));
  write_json_atomic(session_dir(s.id) / iter_dir(i) / "judgments.json", {{"judgments", submitted}});

  auto& rec = s.iterations.back();
  rec.lens_ref = iter_dir(i) + "/lens.json";
  write_json_atomic(session_dir(s.id) / rec.lens_ref, lens.to_json());
  s.status = Status::augmenting;
  save(s);
  return s;
}

LensingSession SessionStore::next_iteration(const std::string& id) {
  const fs::path dir = session_dir(id);
  LensingSession s = load(id);
  SessionLock lock(dir);
  s = load(id);
  require_status(s, {Status::augmenting}, "starting the next iteration");
  const std::size_t i = s.iterations.size() - 1;
  const auto lens = stored_lens(s, i);
  if (!lens) throw StateError("iteration " + std::to_string(i) + " has no lens");

  IterationRecord rec;
  rec.index = i + 1;
  if (s.kind == ModelKind::lda) {
    const Corpus augmented = augment_with_sentences(load_corpus(s, i), *lens, s.config.tokenizer);
    rec.data_ref = iter_dir(i + 1) + "/corpus.json";
    write_json_atomic(dir / rec.data_ref, corpus_to_json(augmented));
  } else {
    rec.data_ref = s.iterations[i].data_ref;
  }
  s.iterations.push_back(rec);
  s.status = Status::training;
  set_progress(id, {i + 1, "queued", 0, 0});
  save(s);
  return s;
}

eval::EvalReport SessionStore::evaluate_locked(const LensingSession& s, std::size_t i) {
  if (i >= s.iterations.size()) throw UsageError("no iteration " + std::to_string(i));
  if (s.iterations[i].model_ref.empty()) {
    throw StateError("iteration " + std::to_string(i) + " is not trained");
  }
  const fs::path dir = session_dir(s.id);
  eval::EvalReport r;
  r.model_id = iter_dir(i);
  r.iteration = i;
  r.timestamp = now_iso();

  const auto applied = applied_lens(s, i);
  std::optional<Lens> labels = stored_lens(s, i);
  if (!labels) labels = applied;

  std::map<std::string, std::vector<double>> per_item;
  if (s.kind == ModelKind::lda) {
    const Corpus corpus = load_corpus(s, i);
    const auto state = load_lda(s, i);
    if (!s.config.heldout_ref.empty()) {
      const Corpus heldout = ingest_transcripts(dir / s.config.heldout_ref, s.config.tokenizer);
      lda::HeldoutOptions opts;
      opts.fold_in_sweeps = s.config.fold_in_sweeps;
      opts.fold_in_burn_in = s.config.fold_in_burn_in;
      opts.seed = s.config.lda.seed;
      if (applied) opts.topics = applied->non_discarded_dims();
      const auto res = lda::heldout_loglik(state, corpus.vocab, heldout, opts);
      r.heldout_ll = res.per_token_loglik;
      if (res.oov_tokens > 0) {
        r.notices.push_back(std::to_string(res.oov_tokens) +
                            " held-out tokens outside the training vocabulary were skipped");
      }
    } else {
      r.notices.push_back("no held-out data configured; held-out log-likelihood omitted");
    }
    const auto ppc = eval::ppc_topic_discrepancy(state);
    for (std::uint32_t d = 0; d < ppc.size(); ++d) {
      if (!applied || !applied->is_discarded(d)) r.ppc_scores[d] = ppc[d];
    }
    for (std::size_t d = 0; d < corpus.num_docs(); ++d) {
      if (corpus.docs[d].source == DocSource::original) {
        per_item[corpus.docs[d].id] = lda::doc_topic_proportions(state, d);
      }
    }
  } else {
    const BehaviorMatrix matrix = load_matrix(s, i);
    const auto state = load_hpmf(s, i);
    if (!s.config.heldout_ref.empty()) {
      r.heldout_ll = hpmf::heldout_loglik(
          state, align_matrix(matrix, ingest_behavior_matrix(dir / s.config.heldout_ref)));
    } else {
      r.heldout_ll = hpmf::heldout_loglik(state, matrix);
      r.notices.push_back("no held-out matrix configured; log-likelihood is in-sample");
    }
    r.notices.push_back("posterior predictive discrepancy is computed for topic models only");
    for (std::size_t m = 0; m < matrix.n_users(); ++m) {
      per_item[matrix.user_ids()[m]] = hpmf::user_preference_proportions(state, m).values;
    }
  }

  if (s.config.gold_ref.empty()) {
    r.notices.push_back("no gold annotations; F1 and ROC AUC omitted");
  } else if (!labels) {
    r.notices.push_back("no lens for iteration " + std::to_string(i) + "; F1 and ROC AUC omitted");
  } else {
    const auto gold = eval::GoldAnnotations::load(dir / s.config.gold_ref);
    const auto dims = labels->labeled_dims();
    eval::PredictedLabels pred;
    for (auto d : dims) pred.label_names.push_back(*labels->label_of(d));
    std::map<std::string, std::map<std::string, double>> scores;
    for (const auto& [item, props] : per_item) {
      pred.items[item] = labels->binarize(props);
      for (auto d : dims) scores[*labels->label_of(d)][item] += props[d];
    }
    const auto f1 = eval::f1_against_gold(pred, gold);
    r.per_label_f1 = f1.per_label;
    r.micro_f1 = f1.micro_f1;
    r.macro_f1 = f1.macro_f1;
    if (!f1.unmatched_labels.empty()) {
      std::string names;
      for (const auto& l : f1.unmatched_labels) names += (names.empty() ? "" : ", ") + l;
      r.notices.push_back("lens labels outside the gold label space: " + names);
    }
    if (!f1.unscored_labels.empty()) {
      std::string names;
      for (const auto& l : f1.unscored_labels) names += (names.empty() ? "" : ", ") + l;
      r.notices.push_back("gold labels carried by no lens dimension, not scored: " + names);
    }
    const auto auc = eval::roc_auc(scores, gold);
    r.roc_auc = auc.auc;
    for (const auto& l : auc.skipped) {
      r.notices.push_back("ROC AUC for '" + l + "' skipped: needs positive and negative items");
    }
  }
  return r;
}

eval::EvalReport SessionStore::evaluate(const std::string& id, std::size_t iteration) {
  const fs::path dir = session_dir(id);
  LensingSession s = load(id);
  SessionLock lock(dir);
  s = load(id);
  auto report = evaluate_locked(s, iteration);
  auto& rec = s.iterations.at(iteration);
  rec.eval_ref = iter_dir(iteration) + "/eval.json";
  write_json_atomic(dir / rec.eval_ref, report.to_json());
  save(s);
  return report;
}

LensingSession SessionStore::finalize(const std::string& id) {
  const fs::path dir = session_dir(id);
  LensingSession s = load(id);
  SessionLock lock(dir);
  s = load(id);
  if (s.status == Status::done) return s;
  require_status(s, {Status::awaiting_review, Status::augmenting}, "finalizing");
  if (s.iterations.size() < 2) {
    throw StateError("finalize needs an unlensed and at least one lensed iteration");
  }
  const std::size_t last = s.iterations.size() - 1;
  const auto first_report = evaluate_locked(s, 0);
  const auto last_report = evaluate_locked(s, last);
  const auto table = eval::compare_models(first_report, last_report);

  for (const auto* r : {&first_report, &last_report}) {
    auto& rec = s.iterations[r->iteration];
    rec.eval_ref = iter_dir(r->iteration) + "/eval.json";
    write_json_atomic(dir / rec.eval_ref, r->to_json());
  }
  s.report_ref = "report.json";
  write_json_atomic(dir / s.report_ref, {{"reports", {first_report.to_json(), last_report.to_json()}},
                                         {"comparison", table.to_json()},
                                         {"comparison_text", table.to_text()}});
  s.status = Status::done;
  save(s);
  return s;
}

json SessionStore::cards(const std::string& id) const {
  const LensingSession s = load(id);
  if (s.current().cards_ref.empty()) {
    throw StateError("iteration " + std::to_string(s.current().index) + " has no review cards yet");
  }
  return read_json(session_dir(id) / s.current().cards_ref);
}

json SessionStore::report(const std::string& id) const {
  const LensingSession s = load(id);
  const fs::path dir = session_dir(id);
  if (!s.report_ref.empty()) return read_json(dir / s.report_ref);
  json reports = json::array();
  for (const auto& rec : s.iterations) {
    if (!rec.eval_ref.empty()) reports.push_back(read_json(dir / rec.eval_ref));
  }
  return {{"reports", reports}, {"comparison", nullptr}, {"comparison_text", nullptr}};
}

json session_summary(const SessionStore& store, const LensingSession& s) {
  const Progress p = store.progress(s.id);
  json j = s.to_json();
  j.erase("format");
  j.erase("version");
  j["current_iteration"] = s.current().index;
  j["progress"] = {{"iteration", p.iteration},
                   {"phase", p.phase},
                   {"completed", p.completed},
                   {"total", p.total}};
  return j;
}

}  // namespace lenskit::session
