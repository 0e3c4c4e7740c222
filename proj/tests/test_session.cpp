#include <doctest.h>
#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <set>

#include "fixtures.hpp"
#include "lenskit/error.hpp"
#include "lenskit/session.hpp"

using namespace lenskit;
using namespace lenskit::session;
namespace fs = std::filesystem;

namespace {

struct LdaFixture {
  fixtures::TempDir dir;
  fs::path data, heldout, gold;
  fixtures::PlantedCorpus planted;

  explicit LdaFixture(std::size_t docs = 40) {
    planted = fixtures::planted_corpus(docs, 24, 2, 12, 5);
    data = dir / "train.jsonl";
    fixtures::write_jsonl(data, planted.records);
    heldout = dir / "heldout.jsonl";
    fixtures::write_jsonl(heldout, fixtures::planted_corpus(10, 24, 2, 12, 6, "h").records);
    json items = json::object();
    for (std::size_t d = 0; d < planted.records.size(); ++d) {
      items[planted.records[d].first] = {"L" + std::to_string(planted.topic_of[d])};
    }
    gold = dir / "gold.json";
    fixtures::write_text(gold, json{{"label_space", {"L0", "L1"}}, {"items", items}}.dump());
  }

  SessionConfig config(std::size_t k = 4, bool with_extras = true) const {
    SessionConfig c;
    c.lda.k = k;
    c.lda.sweeps = 30;
    c.lda.burn_in = 10;
    c.fold_in_sweeps = 10;
    c.fold_in_burn_in = 2;
    if (with_extras) {
      c.heldout_ref = heldout.string();
      c.gold_ref = gold.string();
    }
    return c;
  }
};

struct HpmfFixture {
  fixtures::TempDir dir;
  fs::path data;

  HpmfFixture() {
    data = dir / "matrix.tsv";
    fixtures::write_text(data, behavior_matrix_to_tsv(fixtures::to_matrix(fixtures::random_binary(20, 15, 0.3, 9))));
  }

  SessionConfig config(std::size_t k) const {
    SessionConfig c;
    c.hpmf.k = k;
    c.hpmf.max_iters = 20;
    return c;
  }
};

// Labels dims 0 and 1, discards the rest of the dims under review.
std::map<std::uint32_t, DimensionJudgment> review_of(const json& cards,
                                                     std::vector<std::string> sentences = {}) {
  std::map<std::uint32_t, DimensionJudgment> out;
  std::size_t labeled = 0;
  for (const auto& card : cards["dims"]) {
    const auto dim = card["dim"].get<std::uint32_t>();
    if (labeled < 2) {
      out[dim] = DimensionJudgment::labeled("L" + std::to_string(labeled),
                                            labeled == 0 ? sentences : std::vector<std::string>{});
      ++labeled;
    } else {
      out[dim] = DimensionJudgment::discarded();
    }
  }
  return out;
}

std::string session_file(const SessionStore& store, const std::string& id) {
  return fixtures::slurp(store.session_dir(id) / "session.json");
}

}  // namespace

TEST_CASE("create validates before writing anything") {
  LdaFixture fx;
  fixtures::TempDir root;
  SessionStore store(root.path());
  auto bad = fx.config(1);
  CHECK_THROWS_AS(store.create(ModelKind::lda, fx.data, bad), UsageError);
  CHECK_THROWS_AS(store.create(ModelKind::lda, fx.dir / "missing.jsonl", fx.config()), DataError);
  auto bad_gold = fx.config();
  bad_gold.gold_ref = (fx.dir / "nope.json").string();
  CHECK_THROWS_AS(store.create(ModelKind::lda, fx.data, bad_gold), DataError);
  CHECK(store.list().empty());

  const auto a = store.create(ModelKind::lda, fx.data, fx.config());
  const auto b = store.create(ModelKind::lda, fx.data, fx.config());
  CHECK(a.id != b.id);
  CHECK(a.status == Status::training);
  CHECK(a.iterations.size() == 1);
  CHECK(store.list().size() == 2);
  CHECK_FALSE(fs::path(a.config.heldout_ref).is_absolute());
  CHECK(fs::exists(store.session_dir(a.id) / a.config.heldout_ref));
  CHECK(store.progress(a.id).phase == "queued");
  CHECK_THROWS_AS(store.load("../etc"), NotFoundError);
  CHECK_THROWS_AS(store.load("nothere"), NotFoundError);
}

TEST_CASE("config JSON rejects keys of the other model kind") {
  SessionConfig c;
  c.lda.k = 3;
  const auto j = c.to_json(ModelKind::lda);
  CHECK(SessionConfig::from_json(ModelKind::lda, j).to_json(ModelKind::lda) == j);
  CHECK_THROWS_AS(SessionConfig::from_json(ModelKind::hpmf, j), UsageError);
  CHECK_THROWS_AS(SessionConfig::from_json(ModelKind::lda, json{{"bogus", 1}}), UsageError);
  std::set<std::string> names;
  for (const auto& key : config_keys()) {
    CHECK(names.insert(key.name).second);
    CHECK((key.lda || key.hpmf));
  }
}

TEST_CASE("training produces one card per topic") {
  LdaFixture fx;
  fixtures::TempDir root;
  SessionStore store(root.path());
  const auto created = store.create(ModelKind::lda, fx.data, fx.config(10));
  const auto s = store.train(created.id);
  CHECK(s.status == Status::awaiting_review);
  CHECK_FALSE(s.current().model_ref.empty());
  const auto cards = store.cards(s.id);
  REQUIRE(cards["dims"].size() == 10);
  for (const auto& card : cards["dims"]) {
    CHECK(card["top"].size() <= 20);
    CHECK(card["top"].size() >= 1);
  }
  CHECK(store.progress(s.id).phase == "idle");

  const auto before = fixtures::slurp(store.session_dir(s.id) / s.current().cards_ref);
  const auto again = store.advance_after_training(s.id);
  CHECK(again.to_json() == s.to_json());
  CHECK(fixtures::slurp(store.session_dir(s.id) / s.current().cards_ref) == before);
  CHECK_THROWS_AS(store.train(s.id), StateError);
}

TEST_CASE("review errors leave the session untouched") {
  LdaFixture fx;
  fixtures::TempDir root;
  SessionStore store(root.path());
  const auto id = store.create(ModelKind::lda, fx.data, fx.config()).id;
  CHECK_THROWS_AS(store.submit_review(id, {}), StateError);
  CHECK_THROWS_AS(store.record_judgment(id, 0, DimensionJudgment::discarded()), StateError);
  store.train(id);
  const auto snapshot = session_file(store, id);

  auto full = review_of(store.cards(id));
  auto missing = full;
  missing.erase(3);
  CHECK_THROWS_WITH_AS(store.submit_review(id, missing), doctest::Contains("unjudged"), UsageError);
  auto out_of_range = full;
  out_of_range[9] = DimensionJudgment::discarded();
  CHECK_THROWS_AS(store.submit_review(id, out_of_range), UsageError);
  std::map<std::uint32_t, DimensionJudgment> nothing;
  for (std::uint32_t d = 0; d < 4; ++d) nothing[d] = DimensionJudgment::discarded();
  CHECK_THROWS_AS(store.submit_review(id, nothing), UsageError);
  CHECK_THROWS_AS(store.submit_review(id, full, 2.0), UsageError);
  CHECK_THROWS_AS(store.next_iteration(id), StateError);
  CHECK_THROWS_AS(store.finalize(id), StateError);
  CHECK(session_file(store, id) == snapshot);

  store.record_judgment(id, 0, DimensionJudgment::labeled("draft"));
  CHECK(store.draft_judgments(id).at(0).label == "draft");
  CHECK_THROWS_AS(store.complete_review(id, std::nullopt), UsageError);
}

TEST_CASE("an LDA loop grows the corpus by the informant's sentences") {
  LdaFixture fx;
  fixtures::TempDir root;
  SessionStore store(root.path());
  const auto id = store.create(ModelKind::lda, fx.data, fx.config()).id;
  store.train(id);
  const std::vector<std::string> sentences{"w0_1 w0_2", "w0_3", "w0_4 fresh", "w0_5", "w0_6", "w0_7"};
  auto s = store.submit_review(id, review_of(store.cards(id), sentences), 0.25);
  CHECK(s.status == Status::augmenting);
  const auto lens = store.stored_lens(s, 0);
  REQUIRE(lens);
  CHECK(lens->threshold() == 0.25);
  CHECK(lens->item_labels_built());
  CHECK(lens->item_labels().size() == 40);

  s = store.next_iteration(id);
  CHECK(s.status == Status::training);
  CHECK(s.iterations.size() == 2);
  CHECK(store.load_corpus(s, 1).num_docs() == store.load_corpus(s, 0).num_docs() + 6);
  CHECK(*store.applied_lens(s, 1) == *lens);
  CHECK_FALSE(store.applied_lens(s, 0).has_value());

  s = store.train(id);
  // Discarded topics do not come back for review.
  CHECK(store.cards(id)["dims"].size() == 2);
  auto second = store.submit_review(id, review_of(store.cards(id)));
  const auto lens1 = store.stored_lens(second, 1);
  CHECK(lens1->discarded_dims() == lens->discarded_dims());
  CHECK(store.load(id).to_json() == second.to_json());
}

TEST_CASE("HPMF iterations keep the matrix and drop discarded dims") {
  HpmfFixture fx;
  fixtures::TempDir root;
  SessionStore store(root.path());
  const auto id = store.create(ModelKind::hpmf, fx.data, fx.config(8)).id;
  store.train(id);
  REQUIRE(store.cards(id)["dims"].size() == 8);
  std::map<std::uint32_t, DimensionJudgment> judgments;
  for (std::uint32_t d = 0; d < 8; ++d) {
    judgments[d] = d < 3 ? DimensionJudgment::discarded() : DimensionJudgment::labeled("g" + std::to_string(d % 2));
  }
  store.submit_review(id, judgments);
  auto s = store.next_iteration(id);
  CHECK(s.iterations[1].data_ref == s.iterations[0].data_ref);
  s = store.train(id);
  CHECK(store.cards(id)["dims"].size() == 5);
  const auto state = store.load_hpmf(s, 1);
  for (std::size_t m = 0; m < state.n_users; ++m) CHECK(state.expected_theta(m, 0) == 0.0);

  std::map<std::uint32_t, DimensionJudgment> revive;
  for (std::uint32_t d = 3; d < 8; ++d) revive[d] = DimensionJudgment::labeled("x");
  revive[0] = DimensionJudgment::labeled("back");
  CHECK_THROWS_WITH_AS(store.submit_review(id, revive), doctest::Contains("discarded in an earlier"),
                       UsageError);

  const auto report = store.evaluate(id, 1);
  bool in_sample = false;
  for (const auto& n : report.notices) in_sample |= n.find("in-sample") != std::string::npos;
  CHECK(in_sample);
  CHECK(report.heldout_ll.has_value());
}

TEST_CASE("finalize compares the first and last iterations") {
  LdaFixture fx;
  fixtures::TempDir root;
  SessionStore store(root.path());
  const auto id = store.create(ModelKind::lda, fx.data, fx.config()).id;
  store.train(id);
  CHECK_THROWS_AS(store.finalize(id), StateError);
  for (int round = 0; round < 2; ++round) {
    store.submit_review(id, review_of(store.cards(id)));
    store.next_iteration(id);
    store.train(id);
  }
  const auto done = store.finalize(id);
  CHECK(done.status == Status::done);
  CHECK(done.iterations.size() == 3);
  const auto report = store.report(id);
  CHECK(report["comparison"]["model_a"] == "iter-000");
  CHECK(report["comparison"]["model_b"] == "iter-002");
  CHECK(report["reports"].size() == 2);
  CHECK(report["reports"][1]["heldout_ll"].is_number());
  CHECK(report["reports"][1]["micro_f1"].is_number());

  const auto before = session_file(store, id);
  CHECK(store.finalize(id).to_json() == done.to_json());
  CHECK(session_file(store, id) == before);
  CHECK_THROWS_AS(store.next_iteration(id), StateError);
  CHECK_THROWS_AS(store.train(id), StateError);
}

TEST_CASE("evaluation without gold annotations carries a notice") {
  LdaFixture fx;
  fixtures::TempDir root;
  SessionStore store(root.path());
  const auto id = store.create(ModelKind::lda, fx.data, fx.config(4, false)).id;
  store.train(id);
  store.submit_review(id, review_of(store.cards(id)));
  const auto r = store.evaluate(id, 0);
  CHECK_FALSE(r.micro_f1.has_value());
  CHECK_FALSE(r.heldout_ll.has_value());
  std::set<std::string> notices(r.notices.begin(), r.notices.end());
  CHECK(notices.count("no gold annotations; F1 and ROC AUC omitted"));
  CHECK(r.ppc_scores.size() == 4);
  CHECK_THROWS_AS(store.evaluate(id, 5), UsageError);
}

TEST_CASE("a held lock makes writers fail with BusyError") {
  LdaFixture fx;
  fixtures::TempDir root;
  SessionStore store(root.path());
  const auto id = store.create(ModelKind::lda, fx.data, fx.config()).id;
  const int fd = ::open((store.session_dir(id) / ".lock").c_str(), O_RDWR | O_CREAT, 0644);
  REQUIRE(fd >= 0);
  REQUIRE(::flock(fd, LOCK_EX) == 0);
  CHECK_THROWS_AS(store.train(id), BusyError);
  CHECK(store.load(id).status == Status::training);
  ::flock(fd, LOCK_UN);
  ::close(fd);
  CHECK(store.train(id).status == Status::awaiting_review);
}

TEST_CASE("random operation sequences respect the status machine") {
  LdaFixture fx(16);
  fixtures::TempDir root;
  SessionStore store(root.path());
  auto cfg = fx.config(3, false);
  cfg.lda.sweeps = 8;
  cfg.lda.burn_in = 2;
  Rng rng(77);
  std::set<Status> seen;
  for (int run = 0; run < 4; ++run) {
    const auto id = store.create(ModelKind::lda, fx.data, cfg).id;
    for (int step = 0; step < 25; ++step) {
      const auto before = store.load(id);
      const auto before_bytes = session_file(store, id);
      const auto op = uniform_index(rng, 6);
      bool ok = true;
      try {
        switch (op) {
          case 0: store.train(id); break;
          case 1: {
            std::map<std::uint32_t, DimensionJudgment> j;
            if (before.status == Status::awaiting_review) j = review_of(store.cards(id));
            if (uniform01(rng) < 0.3 && !j.empty()) j.erase(j.begin());
            store.submit_review(id, j);
            break;
          }
          case 2: store.next_iteration(id); break;
          case 3: store.finalize(id); break;
          case 4: store.record_judgment(id, 0, DimensionJudgment::discarded()); break;
          default: store.advance_after_training(id); break;
        }
      } catch (const Error&) {
        ok = false;
      }
      const auto after = store.load(id);
      if (!ok) {
        REQUIRE(session_file(store, id) == before_bytes);
        continue;
      }
      const auto from = before.status, to = after.status;
      seen.insert(to);
      const bool allowed = from == to || (from == Status::training && to == Status::awaiting_review) ||
                           (from == Status::awaiting_review && to == Status::augmenting) ||
                           (from == Status::augmenting && to == Status::training) ||
                           (from != Status::training && to == Status::done);
      REQUIRE(allowed);
      if (to == Status::training && from == Status::augmenting) {
        REQUIRE(after.iterations.size() == before.iterations.size() + 1);
      } else {
        REQUIRE(after.iterations.size() == before.iterations.size());
      }
      for (std::size_t i = 1; i < after.iterations.size(); ++i) {
        REQUIRE(*store.applied_lens(after, i) == *store.stored_lens(after, i - 1));
      }
    }
  }
  CHECK(seen.size() == 4);
}

TEST_CASE("session state survives a reload") {
  HpmfFixture fx;
  fixtures::TempDir root;
  std::string id;
  json expected;
  {
    SessionStore store(root.path());
    id = store.create(ModelKind::hpmf, fx.data, fx.config(3)).id;
    expected = store.train(id).to_json();
  }
  SessionStore reopened(root.path());
  const auto s = reopened.load(id);
  CHECK(s.to_json() == expected);
  CHECK(reopened.load_hpmf(s, 0).elbo_trace.size() >= 1);
  const auto summary = session_summary(reopened, s);
  CHECK(summary["current_iteration"] == 0);
  CHECK(summary["status"] == "awaiting_review");
  CHECK(fs::exists(root / id / "session.json"));
  for (const auto& entry : fs::directory_iterator(root.path())) {
    CHECK(entry.path().filename().string().rfind(".staging", 0) != 0);
  }
}
