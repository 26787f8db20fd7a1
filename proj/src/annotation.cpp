#include "spurious/annotation.hpp"

#include <algorithm>
#include <cctype>
#include <ctime>
#include <random>
#include <set>
#include <sstream>

namespace spurious::annotation {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Study study) { return study == Study::kDiscovery ? "discovery" : "validation"; }

Study parse_study(const std::string& text) {
  if (text == "discovery") return Study::kDiscovery;
  if (text == "validation") return Study::kValidation;
  throw InvalidInput("unknown study '" + text + "' (expected discovery or validation)");
}

std::string to_string(HitStatus status) { return status == HitStatus::kOpen ? "open" : "complete"; }

const std::vector<std::string>& legal_answers(Study study) {
  return study == Study::kDiscovery ? kDiscoveryAnswers : kValidationAnswers;
}

json to_json(const Hit& hit) {
  json assets = json::array();
  for (const auto& a : hit.assets) assets.push_back({{"role", a.role}, {"path", a.path}});
  return {{"hit_id", hit.id},         {"study", to_string(hit.study)}, {"class_id", hit.class_id},
          {"feature_id", hit.feature_id}, {"assets", assets},              {"class_info", hit.class_info}};
}

Hit hit_from_json(const json& j) {
  Hit hit;
  hit.id = j.at("hit_id").get<std::string>();
  hit.study = parse_study(j.at("study").get<std::string>());
  hit.class_id = j.at("class_id").get<int>();
  hit.feature_id = j.at("feature_id").get<std::size_t>();
  for (const auto& a : j.at("assets")) hit.assets.push_back({a.at("role"), a.at("path")});
  hit.class_info = j.value("class_info", json::object());
  return hit;
}

namespace {
std::string bundle_dir(const char* study, int class_id, std::size_t feature_id) {
  return std::string(study) + "/" + std::to_string(class_id) + "/" + std::to_string(feature_id) + "/";
}

std::string hit_id(Study study, int class_id, std::size_t feature_id) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%c-%04d-%04zu", study == Study::kDiscovery ? 'd' : 'v', class_id, feature_id);
  return buf;
}
}  // namespace

std::vector<AssetRef> discovery_assets(int class_id, std::size_t feature_id) {
  const std::string dir = bundle_dir("discovery", class_id, feature_id);
  std::vector<AssetRef> out;
  for (int k = 0; k < 5; ++k) {
    for (const char* kind : {"image", "heatmap", "attack"}) {
      const std::string n = std::to_string(k);
      out.push_back({"top/" + n + "/" + kind, dir + n + "_" + kind + ".png"});
    }
  }
  return out;
}

std::vector<AssetRef> validation_assets(int class_id, std::size_t feature_id) {
  const std::string dir = bundle_dir("validation", class_id, feature_id);
  std::vector<AssetRef> out;
  for (const char* side : {"top", "bottom"}) {
    for (int k = 0; k < 5; ++k) {
      for (const char* kind : {"image", "heatmap"}) {
        const std::string n = std::to_string(k);
        out.push_back({std::string(side) + "/" + n + "/" + kind, dir + side + "_" + n + "_" + kind + ".png"});
      }
    }
  }
  return out;
}

std::vector<Hit> build_discovery_hits(const ClassSubset& subset,
                                      const std::map<int, std::vector<std::size_t>>& top_features,
                                      const fs::path& asset_root, const std::map<int, ClassInfo>& class_info) {
  std::vector<Hit> hits;
  for (int cls : subset.classes) {
    const auto it = top_features.find(cls);
    if (it == top_features.end()) {
      throw InvalidInput("build_discovery_hits: no top features for class " + std::to_string(cls));
    }
    for (std::size_t feature : it->second) {
      Hit hit{hit_id(Study::kDiscovery, cls, feature), Study::kDiscovery, cls, feature,
              discovery_assets(cls, feature), json::object()};
      for (const auto& asset : hit.assets) {
        if (!fs::exists(asset_root / asset.path)) {
          throw InvalidInput("build_discovery_hits: missing asset " + asset.path + " for (class " +
                             std::to_string(cls) + ", feature " + std::to_string(feature) + ")");
        }
      }
      if (auto info = class_info.find(cls); info != class_info.end()) {
        hit.class_info = {{"name", info->second.name},
                          {"definition", info->second.definition},
                          {"examples", info->second.examples}};
      }
      hits.push_back(std::move(hit));
    }
  }
  return hits;
}

std::vector<Hit> build_validation_hits(std::span<const FeatureImageSet> spurious_sets, std::size_t n) {
  std::vector<Hit> hits;
  for (const auto& set : spurious_sets) {
    extremes_for_validation(set, n);
    hits.push_back({hit_id(Study::kValidation, set.class_id, set.feature_id), Study::kValidation, set.class_id,
                    set.feature_id, validation_assets(set.class_id, set.feature_id), json::object()});
  }
  return hits;
}

json to_json(const AnnotationRecord& r) {
  return {{"hit_id", r.hit_id}, {"worker_id", r.worker_id}, {"answer", r.answer},
          {"confidence", r.confidence}, {"reason", r.reason}, {"timestamp", r.timestamp}};
}

AnnotationRecord record_from_json(const json& j) {
  if (!j.is_object()) throw MalformedRecord("response must be a JSON object");
  AnnotationRecord r;
  try {
    r.hit_id = j.value("hit_id", "");
    r.worker_id = j.at("worker_id").get<std::string>();
    r.answer = j.at("answer").get<std::string>();
    r.confidence = j.at("confidence").get<int>();
    r.reason = j.at("reason").get<std::string>();
    r.timestamp = j.value("timestamp", "");
  } catch (const json::exception& e) {
    throw MalformedRecord(std::string("malformed response: ") + e.what());
  }
  return r;
}

namespace {
std::string trim_lower(const std::string& text) {
  auto begin = text.begin();
  auto end = text.end();
  while (begin != end && std::isspace(static_cast<unsigned char>(*begin))) ++begin;
  while (end != begin && std::isspace(static_cast<unsigned char>(*(end - 1)))) --end;
  std::string out(begin, end);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}
}  // namespace

QcResult validate_response(const AnnotationRecord& record, Study study) {
  if (record.worker_id.empty()) throw MalformedRecord("worker_id is empty");
  if (record.confidence < 1 || record.confidence > 5) {
    throw MalformedRecord("confidence " + std::to_string(record.confidence) + " outside 1..5");
  }
  const auto& legal = legal_answers(study);
  if (std::find(legal.begin(), legal.end(), record.answer) == legal.end()) {
    throw MalformedRecord("answer '" + record.answer + "' is not legal for the " + to_string(study) + " study");
  }
  const std::string reason = trim_lower(record.reason);
  if (reason.size() < 10) return {false, "reason is shorter than 10 characters"};
  if (std::find(kReasonStoplist.begin(), kReasonStoplist.end(), reason) != kReasonStoplist.end()) {
    return {false, "reason is too generic"};
  }
  return {true, ""};
}

json to_json(const Verdict& v) {
  return {{"hit_id", v.hit_id}, {"study", to_string(v.study)}, {"class_id", v.class_id},
          {"feature_id", v.feature_id}, {"kind", v.kind}, {"votes", v.votes}};
}

Verdict verdict_from_json(const json& j) {
  return {j.at("hit_id").get<std::string>(), parse_study(j.at("study").get<std::string>()),
          j.at("class_id").get<int>(),       j.at("feature_id").get<std::size_t>(),
          j.at("kind").get<std::string>(),   j.at("votes").get<std::map<std::string, int>>()};
}

std::string aggregate_discovery_kind(std::span<const std::string> answers) {
  std::size_t main = 0;
  for (const auto& a : answers) main += a == "main-object";
  return 2 * main > answers.size() ? "causal" : "spurious";
}

std::string aggregate_validation_kind(std::span<const std::string> answers) {
  const auto same = std::count(answers.begin(), answers.end(), "same");
  return same >= 3 ? "validated" : "not-validated";
}

namespace {
Verdict tally(const Hit& hit, std::span<const AnnotationRecord> responses, Study study) {
  if (hit.study != study) throw InvalidInput("aggregate: HIT " + hit.id + " belongs to the " + to_string(hit.study) + " study");
  if (responses.size() < kResponsesPerHit) {
    throw IncompleteHit("HIT " + hit.id + " has " + std::to_string(responses.size()) + " of " +
                        std::to_string(kResponsesPerHit) + " responses");
  }
  if (responses.size() > kResponsesPerHit) throw InvalidInput("HIT " + hit.id + " has too many responses");
  Verdict v{hit.id, study, hit.class_id, hit.feature_id, "", {}};
  std::vector<std::string> answers;
  for (const auto& a : legal_answers(study)) v.votes[a] = 0;
  for (const auto& r : responses) {
    if (!v.votes.count(r.answer)) throw MalformedRecord("answer '" + r.answer + "' is not legal for " + hit.id);
    ++v.votes[r.answer];
    answers.push_back(r.answer);
  }
  v.kind = study == Study::kDiscovery ? aggregate_discovery_kind(answers) : aggregate_validation_kind(answers);
  return v;
}
}  // namespace

Verdict aggregate_discovery(const Hit& hit, std::span<const AnnotationRecord> responses) {
  return tally(hit, responses, Study::kDiscovery);
}

Verdict aggregate_validation(const Hit& hit, std::span<const AnnotationRecord> responses) {
  return tally(hit, responses, Study::kValidation);
}

Verdict aggregate(const Hit& hit, std::span<const AnnotationRecord> responses) {
  return tally(hit, responses, hit.study);
}

VerdictMap discovery_verdict_map(std::span<const Verdict> verdicts) {
  VerdictMap out;
  for (const auto& v : verdicts) {
    if (v.study != Study::kDiscovery) continue;
    out[{v.class_id, v.feature_id}] = parse_feature_kind(v.kind);
  }
  return out;
}

bool qualified(const WorkerProfile& w) {
  return w.approval_rate >= kMinApprovalRate && w.approved_hits >= kMinApprovedHits;
}

json to_json(const WorkerProfile& w) {
  return {{"worker_id", w.worker_id}, {"approval_rate", w.approval_rate}, {"approved_hits", w.approved_hits}};
}

WorkerProfile worker_from_json(const json& j) {
  return {j.at("worker_id").get<std::string>(), j.at("approval_rate").get<double>(),
          j.at("approved_hits").get<std::size_t>()};
}

std::vector<WorkerProfile> synthetic_workers(std::size_t n_qualified, std::size_t n_unqualified, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<WorkerProfile> out;
  char id[32];
  for (std::size_t n = 0; n < n_qualified + n_unqualified; ++n) {
    std::snprintf(id, sizeof id, "W%04zu", n);
    WorkerProfile w{id, 0.0, 0};
    if (n < n_qualified) {
      w.approval_rate = std::uniform_real_distribution<double>(0.95, 1.0)(rng);
      w.approved_hits = std::uniform_int_distribution<std::size_t>(1000, 20000)(rng);
    } else if (n % 2 == 0) {
      w.approval_rate = std::uniform_real_distribution<double>(0.5, 0.9499)(rng);
      w.approved_hits = std::uniform_int_distribution<std::size_t>(1000, 20000)(rng);
    } else {
      w.approval_rate = std::uniform_real_distribution<double>(0.95, 1.0)(rng);
      w.approved_hits = std::uniform_int_distribution<std::size_t>(0, 999)(rng);
    }
    out.push_back(w);
  }
  return out;
}

std::string to_string(SubmitStatus status) {
  switch (status) {
    case SubmitStatus::kAccepted: return "accepted";
    case SubmitStatus::kRejected: return "rejected";
    case SubmitStatus::kHitComplete: return "hit-complete";
    case SubmitStatus::kUnqualified: return "unqualified";
    case SubmitStatus::kUnknownHit: return "unknown-hit";
  }
  return "unknown";
}

json to_json(const Receipt& r) {
  return {{"status", to_string(r.status)}, {"message", r.message}, {"replaced", r.replaced},
          {"hit_status", to_string(r.hit_status)}, {"accepted_count", r.accepted_count}, {"sequence", r.sequence}};
}

json to_json(const StoreStats& s) {
  return {{"open_hits", s.open_hits}, {"complete_hits", s.complete_hits},
          {"accepted_responses", s.accepted_responses}, {"rejected_responses", s.rejected_responses},
          {"workers", s.workers}};
}

StudyState::StudyState(std::vector<Hit> hits) : hits_(std::move(hits)) {
  std::sort(hits_.begin(), hits_.end(), [](const Hit& a, const Hit& b) { return a.id < b.id; });
  for (std::size_t n = 0; n < hits_.size(); ++n) {
    if (!index_.emplace(hits_[n].id, n).second) throw InvalidInput("duplicate HIT id " + hits_[n].id);
  }
}

const Hit* StudyState::find(const std::string& id) const {
  const auto it = index_.find(id);
  return it == index_.end() ? nullptr : &hits_[it->second];
}

HitStatus StudyState::status(const std::string& id) const {
  return responses(id).size() >= kResponsesPerHit ? HitStatus::kComplete : HitStatus::kOpen;
}

const std::vector<AnnotationRecord>& StudyState::responses(const std::string& id) const {
  static const std::vector<AnnotationRecord> kNone;
  const auto it = responses_.find(id);
  return it == responses_.end() ? kNone : it->second;
}

bool StudyState::apply(const AnnotationRecord& record, bool* replaced) {
  if (!find(record.hit_id)) throw InvalidInput("unknown HIT " + record.hit_id);
  if (replaced) *replaced = false;
  if (status(record.hit_id) == HitStatus::kComplete) return false;
  auto& list = responses_[record.hit_id];
  for (auto& existing : list) {
    if (existing.worker_id == record.worker_id) {
      existing = record;
      if (replaced) *replaced = true;
      return true;
    }
  }
  list.push_back(record);
  return true;
}

std::vector<Verdict> StudyState::verdicts() const {
  std::vector<Verdict> out;
  for (const auto& hit : hits_) {
    if (status(hit.id) == HitStatus::kComplete) out.push_back(aggregate(hit, responses(hit.id)));
  }
  return out;
}

std::optional<Hit> StudyState::next_open(Study study, const std::string& worker_id) const {
  for (const auto& hit : hits_) {
    if (hit.study != study || status(hit.id) == HitStatus::kComplete) continue;
    const auto& list = responses(hit.id);
    if (std::none_of(list.begin(), list.end(), [&](const AnnotationRecord& r) { return r.worker_id == worker_id; })) {
      return hit;
    }
  }
  return std::nullopt;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[40];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char out[48];
  std::snprintf(out, sizeof out, "%s.%03dZ", buf, static_cast<int>(ms));
  return out;
}

namespace {

constexpr const char* kHitsFile = "hits.json";
constexpr const char* kWorkersFile = "workers.json";
constexpr const char* kLogFile = "responses.ndjson";
constexpr const char* kSnapshotFile = "snapshot.json";

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("annotation store: missing " + path.string());
  return json::parse(in);
}

void write_json_atomic(const fs::path& path, const json& j) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    out << j.dump(2) << '\n';
  }
  fs::rename(tmp, path);
}

std::vector<Hit> read_hits(const fs::path& dir) {
  std::vector<Hit> hits;
  const json hits_doc = read_json(dir / kHitsFile);
  for (const auto& h : hits_doc.at("hits")) hits.push_back(hit_from_json(h));
  return hits;
}

}  // namespace

void AnnotationStore::initialize(const fs::path& dir, std::span<const Hit> hits,
                                 std::span<const WorkerProfile> workers) {
  fs::create_directories(dir);
  std::map<std::string, Hit> merged;
  if (fs::exists(dir / kHitsFile)) {
    for (auto& h : read_hits(dir)) merged.emplace(h.id, std::move(h));
  }
  for (const auto& h : hits) merged.emplace(h.id, h);
  json hj = json::array();
  for (const auto& [id, h] : merged) hj.push_back(to_json(h));
  write_json_atomic(dir / kHitsFile, {{"format_version", 1}, {"hits", hj}});

  std::map<std::string, WorkerProfile> wmerged;
  if (fs::exists(dir / kWorkersFile)) {
    const json workers_doc = read_json(dir / kWorkersFile);
    for (const auto& w : workers_doc.at("workers")) {
      auto p = worker_from_json(w);
      wmerged.emplace(p.worker_id, p);
    }
  }
  for (const auto& w : workers) wmerged[w.worker_id] = w;
  json wj = json::array();
  for (const auto& [id, w] : wmerged) wj.push_back(to_json(w));
  write_json_atomic(dir / kWorkersFile, {{"format_version", 1}, {"workers", wj}});
  if (!fs::exists(dir / kLogFile)) std::ofstream(dir / kLogFile).close();
}

StudyState AnnotationStore::replay(const fs::path& dir) {
  StudyState state(read_hits(dir));
  std::ifstream in(dir / kLogFile);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json entry;
    try {
      entry = json::parse(line);
    } catch (const json::parse_error&) {
      break;  // torn final line from an interrupted write
    }
    if (entry.at("type") != "response") continue;
    bool replaced = false;
    state.apply(record_from_json(entry.at("record")), &replaced);
  }
  return state;
}

AnnotationStore::AnnotationStore(fs::path dir, std::size_t snapshot_every, Clock clock)
    : dir_(std::move(dir)), snapshot_every_(snapshot_every), clock_(clock ? std::move(clock) : Clock(utc_timestamp)) {
  const json workers_doc = read_json(dir_ / kWorkersFile);
  for (const auto& w : workers_doc.at("workers")) {
    auto p = worker_from_json(w);
    workers_.emplace(p.worker_id, p);
  }
  state_ = replay(dir_);
  {
    std::ifstream in(dir_ / kLogFile);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      try {
        const json entry = json::parse(line);
        if (entry.at("type") == "response") sequence_ = std::max(sequence_, entry.at("seq").get<std::uint64_t>());
        else ++rejected_;
      } catch (const json::parse_error&) {
        break;
      }
    }
  }
  log_.open(dir_ / kLogFile, std::ios::app);
  if (!log_) throw std::runtime_error("annotation store: cannot open " + (dir_ / kLogFile).string());
  writer_ = std::thread([this] { writer_loop(); });
}

AnnotationStore::~AnnotationStore() {
  try {
    flush();
  } catch (...) {
  }
  {
    std::lock_guard lock(queue_mutex_);
    stopping_ = true;
  }
  queue_cv_.notify_all();
  if (writer_.joinable()) writer_.join();
}

void AnnotationStore::writer_loop() {
  std::unique_lock lock(queue_mutex_);
  for (;;) {
    queue_cv_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
    if (queue_.empty() && stopping_) return;
    std::deque<std::string> batch;
    batch.swap(queue_);
    in_flight_ = batch.size();
    lock.unlock();
    for (const auto& line : batch) log_ << line << '\n';
    log_.flush();
    lock.lock();
    in_flight_ = 0;
    drained_cv_.notify_all();
  }
}

void AnnotationStore::enqueue(json line) {
  {
    std::lock_guard lock(queue_mutex_);
    queue_.push_back(line.dump());
  }
  queue_cv_.notify_one();
}

void AnnotationStore::write_snapshot_locked() {
  json hits = json::array();
  for (const auto& hit : state_.hits()) {
    json responses = json::array();
    for (const auto& r : state_.responses(hit.id)) responses.push_back(to_json(r));
    hits.push_back({{"hit_id", hit.id}, {"status", to_string(state_.status(hit.id))}, {"responses", responses}});
  }
  json verdicts = json::array();
  for (const auto& v : state_.verdicts()) verdicts.push_back(to_json(v));
  write_json_atomic(dir_ / kSnapshotFile,
                    {{"format_version", 1}, {"sequence", sequence_}, {"hits", hits}, {"verdicts", verdicts}});
  since_snapshot_ = 0;
}

Receipt AnnotationStore::submit(AnnotationRecord record) {
  Receipt receipt;
  Study study;
  {
    std::shared_lock lock(state_mutex_);
    const Hit* hit = state_.find(record.hit_id);
    if (!hit) {
      receipt.status = SubmitStatus::kUnknownHit;
      receipt.message = "no HIT with id " + record.hit_id;
      return receipt;
    }
    study = hit->study;
  }
  const QcResult qc = validate_response(record, study);
  record.timestamp = clock_();
  if (!qc.accepted) {
    std::unique_lock lock(state_mutex_);
    ++rejected_;
    enqueue({{"type", "rejected"}, {"reason", qc.reason}, {"record", to_json(record)}});
    receipt.status = SubmitStatus::kRejected;
    receipt.message = qc.reason;
    receipt.hit_status = state_.status(record.hit_id);
    receipt.accepted_count = state_.responses(record.hit_id).size();
    return receipt;
  }
  const auto worker = workers_.find(record.worker_id);
  if (worker == workers_.end() || !qualified(worker->second)) {
    std::shared_lock lock(state_mutex_);
    receipt.status = SubmitStatus::kUnqualified;
    receipt.message = worker == workers_.end() ? "unknown worker " + record.worker_id
                                               : "worker " + record.worker_id + " does not meet the qualification";
    receipt.hit_status = state_.status(record.hit_id);
    receipt.accepted_count = state_.responses(record.hit_id).size();
    return receipt;
  }
  std::unique_lock lock(state_mutex_);
  bool replaced = false;
  if (!state_.apply(record, &replaced)) {
    receipt.status = SubmitStatus::kHitComplete;
    receipt.message = "HIT " + record.hit_id + " is complete";
    receipt.hit_status = HitStatus::kComplete;
    receipt.accepted_count = state_.responses(record.hit_id).size();
    return receipt;
  }
  receipt.sequence = ++sequence_;
  // Enqueued under the state lock so log order matches apply order.
  enqueue({{"type", "response"}, {"seq", receipt.sequence}, {"replaced", replaced}, {"record", to_json(record)}});
  receipt.replaced = replaced;
  receipt.hit_status = state_.status(record.hit_id);
  receipt.accepted_count = state_.responses(record.hit_id).size();
  if (snapshot_every_ > 0 && ++since_snapshot_ >= snapshot_every_) write_snapshot_locked();
  return receipt;
}

std::optional<Hit> AnnotationStore::hit(const std::string& id) const {
  std::shared_lock lock(state_mutex_);
  const Hit* h = state_.find(id);
  return h ? std::optional<Hit>(*h) : std::nullopt;
}

HitStatus AnnotationStore::hit_status(const std::string& id) const {
  std::shared_lock lock(state_mutex_);
  return state_.status(id);
}

std::optional<Hit> AnnotationStore::next_hit(Study study, const std::string& worker_id) const {
  std::shared_lock lock(state_mutex_);
  return state_.next_open(study, worker_id);
}

std::vector<Verdict> AnnotationStore::verdicts() const {
  std::shared_lock lock(state_mutex_);
  return state_.verdicts();
}

StudyState AnnotationStore::state() const {
  std::shared_lock lock(state_mutex_);
  return state_;
}

StoreStats AnnotationStore::stats() const {
  std::shared_lock lock(state_mutex_);
  StoreStats s;
  for (const char* study : {"discovery", "validation"}) {
    s.open_hits[study] = 0;
    s.complete_hits[study] = 0;
  }
  std::set<std::string> workers;
  for (const auto& hit : state_.hits()) {
    const auto name = to_string(hit.study);
    if (state_.status(hit.id) == HitStatus::kComplete) ++s.complete_hits[name];
    else ++s.open_hits[name];
    for (const auto& r : state_.responses(hit.id)) workers.insert(r.worker_id);
    s.accepted_responses += state_.responses(hit.id).size();
  }
  s.rejected_responses = rejected_;
  s.workers = workers.size();
  return s;
}

void AnnotationStore::flush() {
  {
    std::unique_lock lock(queue_mutex_);
    drained_cv_.wait(lock, [this] { return queue_.empty() && in_flight_ == 0; });
  }
  std::unique_lock lock(state_mutex_);
  write_snapshot_locked();
}

std::size_t simulate_study(AnnotationStore& store, std::span<const WorkerProfile> workers, Study study,
                           const AnnotatorRule& rule) {
  std::size_t accepted = 0;
  for (const auto& worker : workers) {
    if (!qualified(worker)) continue;
    while (auto hit = store.next_hit(study, worker.worker_id)) {
      const SimulatedResponse r = rule(*hit, worker);
      AnnotationRecord record{hit->id, worker.worker_id, r.answer, r.confidence,
                              "simulated annotator judged the highlighted region against the class", ""};
      const Receipt receipt = store.submit(record);
      if (receipt.status != SubmitStatus::kAccepted) break;
      ++accepted;
    }
  }
  return accepted;
}

}  // namespace spurious::annotation
