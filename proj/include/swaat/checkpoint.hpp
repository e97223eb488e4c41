#pragma once

#include <fstream>
#include <optional>

#include "swaat/swa.hpp"

namespace swaat {

// Checkpoint layout, all integers little-endian:
//   "SWAT" | u32 version | u32 len | descriptor | f64 x P params |
//   f64 x S BN stats (layer order) | u8 has_aggregator
//   [ u8 mode | u64 window | u64 updates | f64 x P theta_swa ] | u64 FNV-1a of all prior bytes
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct AggregatorState {
  AggregatorMode mode = AggregatorMode::Recurrence;
  std::uint64_t window = 1;
  std::uint64_t updates = 0;
  std::vector<double> theta;
};

struct CheckpointData {
  std::string descriptor;
  std::vector<double> params;
  std::vector<double> bn_state;
  std::optional<AggregatorState> aggregator;
  std::uint64_t checksum = 0;
};

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  template <Real T>
  void reals(std::span<const T> v) {
    for (const T x : v) f64(static_cast<double>(x));
  }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& b, std::size_t end, std::string path)
      : b_(b), end_(end), path_(std::move(path)) {}

  void need(std::size_t n) const {
    if (pos_ + n > end_) throw FormatError("checkpoint '" + path_ + "' is truncated");
  }
  std::uint8_t u8() {
    need(1);
    return b_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{b_[pos_++]} << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{b_[pos_++]} << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::vector<double> reals(std::size_t n) {
    need(n * 8);
    std::vector<double> v(n);
    for (auto& x : v) x = f64();
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(b_.begin() + static_cast<std::ptrdiff_t>(pos_), b_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t end_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <Real T>
std::vector<std::uint8_t> encode_checkpoint(const Network<T>& net, const WeightAggregator<T>* agg = nullptr) {
  detail::ByteWriter w;
  w.bytes("SWAT", 4);
  w.u32(kCheckpointVersion);
  const std::string desc = net.descriptor();
  w.u32(static_cast<std::uint32_t>(desc.size()));
  w.bytes(desc.data(), desc.size());
  w.reals(net.params());
  w.reals(net.bn_state());
  w.u8(agg ? 1 : 0);
  if (agg) {
    w.u8(agg->mode() == AggregatorMode::Recurrence ? 0 : 1);
    w.u64(agg->window());
    w.u64(agg->updates());
    w.reals(agg->theta().values());
  }
  Fnv1a64 h;
  h.update(std::span<const std::uint8_t>(w.buffer()));
  w.u64(h.digest());
  return std::move(w.buffer());
}

// The trailing checksum of an encoded checkpoint.
inline std::uint64_t stored_checksum(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8) throw FormatError("checkpoint is truncated");
  std::uint64_t sum = 0;
  for (int i = 0; i < 8; ++i) sum |= std::uint64_t{bytes[bytes.size() - 8 + static_cast<std::size_t>(i)]} << (8 * i);
  return sum;
}

template <Real T>
std::uint64_t checkpoint_checksum(const Network<T>& net, const WeightAggregator<T>* agg = nullptr) {
  return stored_checksum(encode_checkpoint(net, agg));
}

// Returns the checksum that was written.
template <Real T>
std::uint64_t save_checkpoint(const std::string& path, const Network<T>& net,
                              const WeightAggregator<T>* agg = nullptr) {
  const auto bytes = encode_checkpoint(net, agg);
  detail::write_file(path, bytes);
  return stored_checksum(bytes);
}

inline CheckpointData decode_checkpoint(const std::vector<std::uint8_t>& b, const std::string& path = "<memory>") {
  if (b.size() < 4 + 4 + 4 + 1 + 8) throw FormatError("checkpoint '" + path + "' is truncated");
  if (std::string(b.begin(), b.begin() + 4) != "SWAT") throw FormatError("checkpoint '" + path + "': bad magic");
  const std::size_t body = b.size() - 8;
  Fnv1a64 h;
  h.update(std::span<const std::uint8_t>(b.data(), body));
  const std::uint64_t stored = stored_checksum(b);
  if (stored != h.digest()) throw FormatError("checkpoint '" + path + "': checksum mismatch");

  detail::ByteReader r(b, body, path);
  r.str(4);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint '" + path + "': unsupported version " + std::to_string(version));
  CheckpointData d;
  d.descriptor = r.str(r.u32());
  // Parameter and state counts follow from the architecture.
  const auto net = Network<double>::from_descriptor(d.descriptor);
  d.params = r.reals(net.param_count());
  d.bn_state = r.reals(net.state_count());
  if (r.u8()) {
    AggregatorState a;
    a.mode = r.u8() == 0 ? AggregatorMode::Recurrence : AggregatorMode::ExactSMA;
    a.window = r.u64();
    a.updates = r.u64();
    a.theta = r.reals(net.param_count());
    d.aggregator = std::move(a);
  }
  if (r.pos() != body) throw FormatError("checkpoint '" + path + "': trailing bytes");
  d.checksum = stored;
  return d;
}

inline CheckpointData read_checkpoint(const std::string& path) {
  return decode_checkpoint(detail::read_file(path), path);
}

template <Real T>
Network<T> network_from(const CheckpointData& d) {
  Network<T> net = Network<T>::from_descriptor(d.descriptor);
  std::transform(d.params.begin(), d.params.end(), net.params().begin(), [](double v) { return static_cast<T>(v); });
  std::transform(d.bn_state.begin(), d.bn_state.end(), net.bn_state().begin(),
                 [](double v) { return static_cast<T>(v); });
  return net;
}

template <Real T>
WeightAggregator<T> aggregator_from(const AggregatorState& a) {
  WeightAggregator<T> agg(a.mode, a.window, a.theta.size());
  std::vector<T> th(a.theta.begin(), a.theta.end());
  agg.restore(a.updates, FlatParams<T>(std::move(th)));
  return agg;
}

template <Real T>
Network<T> load_network(const std::string& path) {
  return network_from<T>(read_checkpoint(path));
}

}  // namespace swaat
