#pragma once

// Discovery and validation studies: HIT generation, response quality control,
// durable response storage and majority aggregation.

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "spurious/dataset_builder.hpp"
#include "spurious/importance.hpp"

namespace spurious::annotation {

enum class Study { kDiscovery, kValidation };
std::string to_string(Study study);
Study parse_study(const std::string& text);

enum class HitStatus { kOpen, kComplete };
std::string to_string(HitStatus status);

/// Responses needed to complete a HIT.
inline constexpr std::size_t kResponsesPerHit = 5;

inline const std::vector<std::string> kDiscoveryAnswers = {"main-object", "separate-object", "background"};
inline const std::vector<std::string> kValidationAnswers = {"same", "different", "unclear-A", "unclear-B"};
const std::vector<std::string>& legal_answers(Study study);

struct AssetRef {
  std::string role;  // e.g. "top/0/image", "top/0/heatmap", "top/0/attack"
  std::string path;  // relative to the asset root

  friend bool operator==(const AssetRef&, const AssetRef&) = default;
};

struct Hit {
  std::string id;
  Study study = Study::kDiscovery;
  int class_id = 0;
  std::size_t feature_id = 0;
  std::vector<AssetRef> assets;
  nlohmann::json class_info = nlohmann::json::object();  // name, definition, example images

  friend bool operator==(const Hit&, const Hit&) = default;
};

nlohmann::json to_json(const Hit& hit);
Hit hit_from_json(const nlohmann::json& j);

/// Asset paths for one (class, feature) discovery bundle: five
/// (image, heatmap, attack) triplets.
std::vector<AssetRef> discovery_assets(int class_id, std::size_t feature_id);
/// Five (image, heatmap) pairs for the top members and five for the bottom.
std::vector<AssetRef> validation_assets(int class_id, std::size_t feature_id);

struct ClassInfo {
  std::string name;
  std::string definition;
  std::vector<std::string> examples;  // asset paths
};

/// One HIT per (class in subset, top feature of that class). Every asset must
/// exist under `asset_root`.
std::vector<Hit> build_discovery_hits(const ClassSubset& subset,
                                      const std::map<int, std::vector<std::size_t>>& top_features,
                                      const std::filesystem::path& asset_root,
                                      const std::map<int, ClassInfo>& class_info = {});

/// One HIT per spurious feature set. Extremes are taken from each set, so a
/// set that is too small raises FeatureSetTooSmall.
std::vector<Hit> build_validation_hits(std::span<const FeatureImageSet> spurious_sets, std::size_t n = 5);

struct AnnotationRecord {
  std::string hit_id;
  std::string worker_id;
  std::string answer;
  int confidence = 0;  // Likert 1..5
  std::string reason;
  std::string timestamp;  // ISO-8601 UTC, set by the store

  friend bool operator==(const AnnotationRecord&, const AnnotationRecord&) = default;
};

nlohmann::json to_json(const AnnotationRecord& record);
AnnotationRecord record_from_json(const nlohmann::json& j);

class MalformedRecord : public InvalidInput {
 public:
  using InvalidInput::InvalidInput;
};

class IncompleteHit : public InvalidInput {
 public:
  using InvalidInput::InvalidInput;
};

struct QcResult {
  bool accepted = true;
  std::string reason;
};

inline const std::vector<std::string> kReasonStoplist = {
    "good", "nice", "ok", "okay", "fine", "great", "yes", "no", "none", "n/a", "na", "idk",
    "i don't know", "i dont know", "not sure", "no idea", "no comment", "nothing", "very good",
    "good job", "nice job", "looks good", "same", "different"};

/// Malformed records (unknown answer for the study, confidence outside 1..5,
/// empty worker id) throw MalformedRecord. Short or generic reasons are
/// rejected.
QcResult validate_response(const AnnotationRecord& record, Study study);

struct Verdict {
  std::string hit_id;
  Study study = Study::kDiscovery;
  int class_id = 0;
  std::size_t feature_id = 0;
  std::string kind;  // causal / spurious, or validated / not-validated
  std::map<std::string, int> votes;

  friend bool operator==(const Verdict&, const Verdict&) = default;
};

nlohmann::json to_json(const Verdict& verdict);
Verdict verdict_from_json(const nlohmann::json& j);

/// Binarized majority: main-object against separate-object or background.
std::string aggregate_discovery_kind(std::span<const std::string> answers);
/// validated iff at least three answers are "same".
std::string aggregate_validation_kind(std::span<const std::string> answers);

Verdict aggregate_discovery(const Hit& hit, std::span<const AnnotationRecord> responses);
Verdict aggregate_validation(const Hit& hit, std::span<const AnnotationRecord> responses);
Verdict aggregate(const Hit& hit, std::span<const AnnotationRecord> responses);

/// Discovery verdicts as the (class, feature) -> kind map used for dataset
/// assembly.
VerdictMap discovery_verdict_map(std::span<const Verdict> verdicts);

struct WorkerProfile {
  std::string worker_id;
  double approval_rate = 0.0;
  std::size_t approved_hits = 0;
};

inline constexpr double kMinApprovalRate = 0.95;
inline constexpr std::size_t kMinApprovedHits = 1000;

bool qualified(const WorkerProfile& worker);

nlohmann::json to_json(const WorkerProfile& worker);
WorkerProfile worker_from_json(const nlohmann::json& j);

/// Synthetic profiles: `qualified` workers that pass the gate followed by
/// `unqualified` ones that fail it.
std::vector<WorkerProfile> synthetic_workers(std::size_t qualified, std::size_t unqualified, std::uint64_t seed);

enum class SubmitStatus { kAccepted, kRejected, kHitComplete, kUnqualified, kUnknownHit };
std::string to_string(SubmitStatus status);

struct Receipt {
  SubmitStatus status = SubmitStatus::kAccepted;
  std::string message;
  bool replaced = false;
  HitStatus hit_status = HitStatus::kOpen;
  std::size_t accepted_count = 0;
  std::uint64_t sequence = 0;  // position in the response log, accepted only
};

nlohmann::json to_json(const Receipt& receipt);

struct StoreStats {
  std::map<std::string, std::size_t> open_hits;      // per study
  std::map<std::string, std::size_t> complete_hits;  // per study
  std::size_t accepted_responses = 0;
  std::size_t rejected_responses = 0;
  std::size_t workers = 0;
};

nlohmann::json to_json(const StoreStats& stats);

/// The in-memory state of the studies. Applying the same accepted records in
/// the same order always yields the same state.
class StudyState {
 public:
  StudyState() = default;
  explicit StudyState(std::vector<Hit> hits);

  const std::vector<Hit>& hits() const { return hits_; }
  const Hit* find(const std::string& hit_id) const;
  HitStatus status(const std::string& hit_id) const;
  const std::vector<AnnotationRecord>& responses(const std::string& hit_id) const;

  /// Applies an accepted record; a worker's resubmission replaces their
  /// earlier one. Returns false when the HIT is already complete.
  bool apply(const AnnotationRecord& record, bool* replaced);

  /// Verdicts of every complete HIT, ordered by HIT id.
  std::vector<Verdict> verdicts() const;

  std::optional<Hit> next_open(Study study, const std::string& worker_id) const;

  friend bool operator==(const StudyState&, const StudyState&) = default;

 private:
  std::vector<Hit> hits_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, std::vector<AnnotationRecord>> responses_;
};

/// Durable store: hits.json, workers.json, an append-only responses.ndjson
/// written by one writer thread, and a snapshot.json refreshed every
/// `snapshot_every` accepted responses and on flush.
class AnnotationStore {
 public:
  using Clock = std::function<std::string()>;

  explicit AnnotationStore(std::filesystem::path dir, std::size_t snapshot_every = 100, Clock clock = {});
  ~AnnotationStore();
  AnnotationStore(const AnnotationStore&) = delete;
  AnnotationStore& operator=(const AnnotationStore&) = delete;

  /// Creates a store directory with the given HITs and worker profiles.
  /// HITs already present (by id) are kept.
  static void initialize(const std::filesystem::path& dir, std::span<const Hit> hits,
                         std::span<const WorkerProfile> workers);

  /// Quality control, qualification gate, then the state transition. Safe to
  /// call from many threads.
  Receipt submit(AnnotationRecord record);

  std::optional<Hit> hit(const std::string& hit_id) const;
  HitStatus hit_status(const std::string& hit_id) const;
  std::optional<Hit> next_hit(Study study, const std::string& worker_id) const;
  std::vector<Verdict> verdicts() const;
  StoreStats stats() const;
  StudyState state() const;

  /// Blocks until every queued log line is written, then snapshots.
  void flush();

  /// Rebuilds the state from hits.json and the response log alone.
  static StudyState replay(const std::filesystem::path& dir);

  const std::filesystem::path& dir() const { return dir_; }

 private:
  void writer_loop();
  void enqueue(nlohmann::json line);
  void write_snapshot_locked();

  std::filesystem::path dir_;
  std::size_t snapshot_every_;
  Clock clock_;
  std::map<std::string, WorkerProfile> workers_;

  mutable std::shared_mutex state_mutex_;
  StudyState state_;
  std::uint64_t sequence_ = 0;
  std::size_t rejected_ = 0;
  std::size_t since_snapshot_ = 0;

  std::mutex queue_mutex_;
  std::condition_variable queue_cv_;
  std::condition_variable drained_cv_;
  std::deque<std::string> queue_;
  std::size_t in_flight_ = 0;
  bool stopping_ = false;
  std::ofstream log_;
  std::thread writer_;
};

std::string utc_timestamp();

/// Deterministic stand-in annotator: answers from a caller-supplied rule,
/// with a substantive reason and confidence.
struct SimulatedResponse {
  std::string answer;
  int confidence = 4;
};
using AnnotatorRule = std::function<SimulatedResponse(const Hit& hit, const WorkerProfile& worker)>;

/// Submits one response per (open HIT, qualified worker) until every HIT is
/// complete or the workers run out. Returns the number of accepted responses.
std::size_t simulate_study(AnnotationStore& store, std::span<const WorkerProfile> workers, Study study,
                           const AnnotatorRule& rule);

}  // namespace spurious::annotation
