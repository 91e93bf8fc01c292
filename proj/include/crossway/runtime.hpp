#pragma once

// Simulated coordinator<->agent message fabric.
//
// Coordination rounds execute over a virtual-time channel with Bernoulli
// packet loss and per-transmission latency jitter.  Reliability comes from
// stop-and-wait retransmission: the coordinator re-sends a request whenever
// its reply misses the timeout, and agents answer duplicates from a reply
// cache keyed by the request's sequence number.  Replies are pure functions
// of the request payload, so losing packets can delay a round but never
// change its outcome: given enough retransmissions, a lossy run reproduces
// the lossless coordination result exactly.  All randomness is drawn from a
// single seeded generator consumed in deterministic event order, so one
// (scenario, channel, seed) triple always replays the same message trace.

#include <cstdint>
#include <map>
#include <ostream>
#include <queue>
#include <random>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "crossway/agent.hpp"
#include "crossway/errors.hpp"
#include "crossway/sqp.hpp"

namespace crossway {

// Node id of the central coordinator; agents use their vehicle index.
inline constexpr int kCoordinatorId = -1;

enum class MessageKind : std::uint8_t {
  eval_request,      // coordinator asks for an evaluation / bounds / curvature
  eval_reply,        // agent answers an evaluate or curvature request
  bounds_reply,      // agent answers a free-flow (hello) request
  step_broadcast,    // coordinator announces an accepted iterate
  final_assignment,  // coordinator distributes the agreed schedule
  ack,               // agent acknowledges a broadcast
};

inline const char* to_string(MessageKind k) {
  switch (k) {
    case MessageKind::eval_request: return "eval_request";
    case MessageKind::eval_reply: return "eval_reply";
    case MessageKind::bounds_reply: return "bounds_reply";
    case MessageKind::step_broadcast: return "step_broadcast";
    case MessageKind::final_assignment: return "final_assignment";
    case MessageKind::ack: return "ack";
  }
  return "unknown";
}

struct ChannelConfig {
  double drop_probability = 0.0;  // per-transmission Bernoulli loss
  int latency_base = 1;           // ticks every delivery takes at minimum
  int latency_jitter = 0;         // extra delay drawn uniformly from [0, jitter]
  std::uint64_t seed = 1;
  int retransmit_timeout = 16;    // ticks to wait for a response
  int max_retransmissions = 25;   // re-sends allowed per message

  void validate() const {
    if (!(drop_probability >= 0.0 && drop_probability < 1.0))
      throw invalid_parameter("drop probability must lie in [0, 1)");
    if (latency_base < 0 || latency_jitter < 0)
      throw invalid_parameter("latency must be nonnegative");
    if (retransmit_timeout < 1)
      throw invalid_parameter("retransmission timeout must be at least one tick");
    if (max_retransmissions < 0)
      throw invalid_parameter("retransmission budget must be nonnegative");
  }
};

// Typed envelope for everything that crosses the channel.
struct Message {
  MessageKind kind = MessageKind::eval_request;
  int sender = kCoordinatorId;
  int receiver = kCoordinatorId;
  std::uint64_t sequence = 0;     // strictly increasing per (sender, kind)
  std::uint64_t in_reply_to = 0;  // sequence of the message being answered
  std::variant<std::monostate, EvalRequest, EvalReply, std::vector<TimePair>>
      payload;
};

// One transmission attempt, as recorded in the channel trace.
struct TraceEvent {
  long tick = 0;
  MessageKind kind = MessageKind::eval_request;
  int sender = kCoordinatorId;
  int receiver = kCoordinatorId;
  std::uint64_t sequence = 0;
  bool dropped = false;

  friend bool operator==(const TraceEvent&, const TraceEvent&) = default;
};

// Evaluation service that routes every request through the lossy channel to
// in-process agent nodes and collects the replies at a per-round barrier.
class SimulatedChannelService final : public EvaluationService {
 public:
  SimulatedChannelService(std::vector<const LocalAgent*> agents,
                          ChannelConfig config, double sensitivity_step = 1e-3)
      : backend_(std::move(agents), sensitivity_step),
        num_agents_(backend_.num_agents()),
        cfg_(config),
        rng_(config.seed) {
    cfg_.validate();
    if (num_agents_ < 1)
      throw invalid_parameter("channel needs at least one agent");
  }

  std::vector<EvalReply> round(const std::vector<EvalRequest>& reqs) override {
    if (reqs.empty()) return {};
    const long start = now_;
    std::vector<Message> out;
    out.reserve(reqs.size());
    for (const auto& r : reqs) {
      Message m;
      m.kind = MessageKind::eval_request;
      m.receiver = r.vehicle;
      m.sequence = next_sequence(kCoordinatorId, m.kind);
      m.payload = r;
      out.push_back(std::move(m));
    }
    std::vector<Message> in = exchange(out);
    std::vector<EvalReply> replies;
    replies.reserve(in.size());
    for (const auto& m : in) {
      const auto* rep = std::get_if<EvalReply>(&m.payload);
      if (rep == nullptr)
        throw protocol_error("evaluation reply arrived without a payload");
      replies.push_back(*rep);
    }
    round_ticks_.push_back(now_ - start);
    return replies;
  }

  void commit(const std::vector<TimePair>& times) override {
    broadcast(MessageKind::step_broadcast, times);
  }

  void finalize(const std::vector<TimePair>& times) override {
    broadcast(MessageKind::final_assignment, times);
    last_assignment_ = times;
  }

  long now() const { return now_; }
  long retransmissions() const { return retransmissions_; }
  const std::vector<long>& round_ticks() const { return round_ticks_; }
  const std::vector<TraceEvent>& trace() const { return trace_; }
  const std::vector<TimePair>& last_assignment() const {
    return last_assignment_;
  }

  // Line-delimited transmission log: tick kind sender receiver sequence D|-.
  void write_trace(std::ostream& os) const {
    for (const auto& e : trace_)
      os << e.tick << ' ' << to_string(e.kind) << ' ' << e.sender << ' '
         << e.receiver << ' ' << e.sequence << ' ' << (e.dropped ? 'D' : '-')
         << '\n';
  }

 private:
  enum class EventKind : std::uint8_t { delivery, send, timer };

  struct Event {
    long tick = 0;
    std::uint64_t order = 0;  // schedule order breaks same-tick ties
    EventKind what = EventKind::delivery;
    Message msg;              // delivery and send events
    int timer_agent = 0;      // retransmission checks
    std::uint64_t generation = 0;
  };

  struct EventLater {
    bool operator()(const Event& a, const Event& b) const {
      return a.tick != b.tick ? a.tick > b.tick : a.order > b.order;
    }
  };

  struct Pending {
    Message request;
    int attempts = 1;
    bool done = false;
    Message response;
    std::size_t slot = 0;  // position in the exchange result
  };

  std::uint64_t next_sequence(int sender, MessageKind kind) {
    return ++sequences_[{sender, static_cast<int>(kind)}];
  }

  double uniform01() {
    return static_cast<double>(rng_() >> 11) * 0x1.0p-53;
  }

  void schedule(Event e) {
    e.order = ++event_counter_;
    queue_.push(std::move(e));
  }

  // One transmission attempt: traced, possibly dropped, otherwise delivered
  // after the sampled latency.  The latency draw happens only on delivery so
  // the trace alone pins down the generator state.
  void transmit(const Message& m, long tick) {
    const bool dropped = uniform01() < cfg_.drop_probability;
    trace_.push_back({tick, m.kind, m.sender, m.receiver, m.sequence, dropped});
    if (dropped) return;
    long latency = cfg_.latency_base;
    if (cfg_.latency_jitter > 0)
      latency += static_cast<long>(
          rng_() % static_cast<std::uint64_t>(cfg_.latency_jitter + 1));
    Event e;
    e.tick = tick + latency;
    e.msg = m;
    schedule(std::move(e));
  }

  // Sends one message per agent and runs the event loop until every agent's
  // response has arrived.  Responses are matched by in_reply_to, so delayed
  // duplicates and leftovers from earlier exchanges are discarded; stale
  // retransmission timers are retired by the generation stamp.
  std::vector<Message> exchange(const std::vector<Message>& outbound) {
    ++generation_;
    std::map<int, Pending> pending;
    for (std::size_t k = 0; k < outbound.size(); ++k) {
      const Message& m = outbound[k];
      if (m.receiver < 0 || m.receiver >= num_agents_)
        throw protocol_error("message addresses an unknown vehicle");
      Pending p;
      p.request = m;
      p.slot = k;
      if (!pending.emplace(m.receiver, std::move(p)).second)
        throw protocol_error("one exchange may address each vehicle once");
      transmit(m, now_);
      arm_timer(m.receiver);
    }

    std::size_t open = pending.size();
    while (open > 0) {
      if (queue_.empty())
        throw round_failure("message fabric stalled with replies outstanding");
      Event e = queue_.top();
      queue_.pop();
      now_ = std::max(now_, e.tick);

      switch (e.what) {
        case EventKind::send:
          transmit(e.msg, now_);
          break;
        case EventKind::timer: {
          if (e.generation != generation_) break;
          auto it = pending.find(e.timer_agent);
          if (it == pending.end() || it->second.done) break;
          Pending& p = it->second;
          if (p.attempts > cfg_.max_retransmissions)
            throw round_failure(
                "vehicle " + std::to_string(e.timer_agent) +
                " unreachable after " +
                std::to_string(cfg_.max_retransmissions) +
                " retransmissions");
          ++p.attempts;
          ++retransmissions_;
          transmit(p.request, now_);
          arm_timer(e.timer_agent);
          break;
        }
        case EventKind::delivery:
          if (e.msg.receiver == kCoordinatorId) {
            auto it = pending.find(e.msg.sender);
            if (it == pending.end() || it->second.done) break;
            if (e.msg.in_reply_to != it->second.request.sequence) break;
            it->second.response = std::move(e.msg);
            it->second.done = true;
            --open;
          } else {
            receive_at_agent(e.msg);
          }
          break;
      }
    }

    std::vector<Message> responses(outbound.size());
    for (auto& [agent, p] : pending)
      responses[p.slot] = std::move(p.response);
    return responses;
  }

  void arm_timer(int agent) {
    Event t;
    t.tick = now_ + cfg_.retransmit_timeout;
    t.what = EventKind::timer;
    t.timer_agent = agent;
    t.generation = generation_;
    schedule(std::move(t));
  }

  // Agent-side handling.  First receipt of a sequence number computes the
  // response and caches it; duplicates re-send the cached message verbatim,
  // which is what makes retransmission loss-transparent.
  void receive_at_agent(const Message& m) {
    auto& cache = answered_[m.receiver];
    const std::pair<int, std::uint64_t> key{static_cast<int>(m.kind),
                                            m.sequence};
    if (auto hit = cache.find(key); hit != cache.end()) {
      transmit(hit->second, now_);
      return;
    }

    Message reply;
    reply.sender = m.receiver;
    reply.receiver = kCoordinatorId;
    reply.in_reply_to = m.sequence;
    long ready = now_;
    switch (m.kind) {
      case MessageKind::eval_request: {
        const auto* req = std::get_if<EvalRequest>(&m.payload);
        if (req == nullptr)
          throw protocol_error("evaluation request without a payload");
        // The agent's LP pass (bounds, sensitivities) runs inside answer()
        // ahead of its QP, preserving the LPs-before-QP data dependency.
        reply.kind = req->kind == EvalRequest::Kind::free_flow
                         ? MessageKind::bounds_reply
                         : MessageKind::eval_reply;
        reply.payload = backend_.answer(*req);
        ready += kComputeTicks;
        break;
      }
      case MessageKind::step_broadcast:
      case MessageKind::final_assignment:
        reply.kind = MessageKind::ack;
        break;
      default:
        throw protocol_error("agent received an unexpected message kind");
    }
    reply.sequence = next_sequence(m.receiver, reply.kind);
    cache.emplace(key, reply);

    Event e;
    e.tick = ready;
    e.what = EventKind::send;
    e.msg = std::move(reply);
    schedule(std::move(e));
  }

  void broadcast(MessageKind kind, const std::vector<TimePair>& times) {
    std::vector<Message> out;
    out.reserve(static_cast<std::size_t>(num_agents_));
    for (int i = 0; i < num_agents_; ++i) {
      Message m;
      m.kind = kind;
      m.receiver = i;
      m.sequence = next_sequence(kCoordinatorId, kind);
      m.payload = times;
      out.push_back(std::move(m));
    }
    exchange(out);
  }

  static constexpr long kComputeTicks = 1;  // agent turnaround per request

  DirectEvaluationService backend_;
  int num_agents_;
  ChannelConfig cfg_;
  std::mt19937_64 rng_;
  std::priority_queue<Event, std::vector<Event>, EventLater> queue_;
  std::map<std::pair<int, int>, std::uint64_t> sequences_;
  std::map<int, std::map<std::pair<int, std::uint64_t>, Message>> answered_;
  std::vector<TraceEvent> trace_;
  std::vector<long> round_ticks_;
  std::vector<TimePair> last_assignment_;
  long now_ = 0;
  long retransmissions_ = 0;
  std::uint64_t event_counter_ = 0;
  std::uint64_t generation_ = 0;
};

}  // namespace crossway
