#include "gpw/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

namespace gpw {

namespace {

constexpr char kMagic[8] = {'G', 'P', 'W', 'C', 'K', 'P', 'T', '\0'};
// Refuse absurd lengths from corrupted headers before allocating.
constexpr std::uint64_t kMaxCount = std::uint64_t{1} << 32;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void u32(std::uint32_t v) { bytes(&v, sizeof v); }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
  void f64(double v) { bytes(&v, sizeof v); }
  void str(const std::string& s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }
  void reals(const std::vector<double>& v) {
    u64(v.size());
    bytes(v.data(), v.size() * sizeof(double));
  }
  const std::vector<char>& data() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(std::vector<char> buf, std::string path) : buf_(std::move(buf)), path_(std::move(path)) {}
  void bytes(void* p, std::size_t n) {
    if (n > buf_.size() - pos_) throw FormatError(path_ + ": truncated checkpoint");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() { std::uint32_t v; bytes(&v, sizeof v); return v; }
  std::uint64_t u64() { std::uint64_t v; bytes(&v, sizeof v); return v; }
  double f64() { double v; bytes(&v, sizeof v); return v; }
  std::uint64_t count() {
    const std::uint64_t n = u64();
    if (n > kMaxCount || n > buf_.size()) throw FormatError(path_ + ": corrupt length field");
    return n;
  }
  std::string str() {
    std::string s(count(), '\0');
    bytes(s.data(), s.size());
    return s;
  }
  std::vector<double> reals() {
    std::vector<double> v(count());
    bytes(v.data(), v.size() * sizeof(double));
    return v;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  std::vector<char> buf_;
  std::size_t pos_ = 0;
  std::string path_;
};

}  // namespace

Checkpoint capture(const RunConfig& cfg, const Model& model, const objectives::Adam& adam,
                   std::uint64_t iteration) {
  Checkpoint c;
  c.config_text = to_text(cfg);
  c.iteration = iteration;
  for (const auto& p : model.parameters().items()) {
    const auto v = p.tensor.values();
    c.params.push_back({p.name, p.tensor.shape(), std::vector<double>(v.begin(), v.end())});
  }
  c.adam_steps = adam.steps();
  c.adam = adam.config();
  c.adam_m = adam.first_moments();
  c.adam_v = adam.second_moments();
  return c;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.u32(Checkpoint::kVersion);
  w.str(ckpt.config_text);
  w.u64(ckpt.iteration);
  w.u64(ckpt.params.size());
  for (const auto& b : ckpt.params) {
    w.str(b.name);
    w.u64(b.shape.size());
    for (auto d : b.shape) w.u64(d);
    w.reals(b.values);
  }
  w.u64(ckpt.adam_steps);
  w.f64(ckpt.adam.beta1);
  w.f64(ckpt.adam.beta2);
  w.f64(ckpt.adam.eps);
  w.u64(ckpt.adam_m.size());
  for (std::size_t i = 0; i < ckpt.adam_m.size(); ++i) {
    w.reals(ckpt.adam_m[i]);
    w.reals(ckpt.adam_v.at(i));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write checkpoint " + path.string());
  out.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
  if (!out) throw FormatError("write failed for checkpoint " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(std::move(buf), path.string());
  char magic[sizeof kMagic];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw FormatError(path.string() + ": not a checkpoint file");
  }
  const std::uint32_t version = r.u32();
  if (version != Checkpoint::kVersion) {
    throw FormatError(path.string() + ": checkpoint version " + std::to_string(version) +
                      ", expected " + std::to_string(Checkpoint::kVersion));
  }
  Checkpoint c;
  c.config_text = r.str();
  c.iteration = r.u64();
  const std::uint64_t nparams = r.count();
  for (std::uint64_t i = 0; i < nparams; ++i) {
    Blob b;
    b.name = r.str();
    const std::uint64_t rank = r.count();
    for (std::uint64_t d = 0; d < rank; ++d) b.shape.push_back(r.u64());
    b.values = r.reals();
    if (b.values.size() != nd::numel(b.shape)) {
      throw FormatError(path.string() + ": blob '" + b.name + "' size does not match its shape");
    }
    c.params.push_back(std::move(b));
  }
  c.adam_steps = r.u64();
  c.adam.beta1 = r.f64();
  c.adam.beta2 = r.f64();
  c.adam.eps = r.f64();
  const std::uint64_t nstate = r.count();
  for (std::uint64_t i = 0; i < nstate; ++i) {
    c.adam_m.push_back(r.reals());
    c.adam_v.push_back(r.reals());
  }
  if (!r.done()) throw FormatError(path.string() + ": trailing bytes after checkpoint");
  return c;
}

void restore(const Checkpoint& ckpt, Model& model, objectives::Adam* adam) {
  const auto& items = model.parameters().items();
  std::map<std::string, const Blob*> by_name;
  for (const auto& b : ckpt.params) by_name[b.name] = &b;
  std::string diff;
  std::map<std::string, bool> used;
  for (const auto& p : items) {
    const auto it = by_name.find(p.name);
    if (it == by_name.end()) {
      diff += "  " + p.name + ": model " + nd::to_string(p.tensor.shape()) + ", checkpoint missing\n";
    } else {
      used[p.name] = true;
      if (it->second->shape != p.tensor.shape()) {
        diff += "  " + p.name + ": model " + nd::to_string(p.tensor.shape()) + ", checkpoint " +
                nd::to_string(it->second->shape) + "\n";
      }
    }
  }
  for (const auto& b : ckpt.params) {
    if (!used.count(b.name)) {
      diff += "  " + b.name + ": model missing, checkpoint " + nd::to_string(b.shape) + "\n";
    }
  }
  if (!diff.empty()) throw FormatError("checkpoint does not match the model:\n" + diff);
  if (ckpt.params.size() != items.size()) throw FormatError("checkpoint has duplicate names");
  for (std::size_t i = 0; i < items.size(); ++i) {
    nd::Tensor t = items[i].tensor;
    const auto& src = by_name.at(items[i].name)->values;
    std::copy(src.begin(), src.end(), t.mutable_values().begin());
  }
  if (adam) {
    if (ckpt.adam_m.size() != items.size()) {
      throw FormatError("checkpoint optimizer state covers " + std::to_string(ckpt.adam_m.size()) +
                        " tensors, model has " + std::to_string(items.size()));
    }
    // Optimizer state is stored in parameter order.
    std::map<std::string, std::size_t> order;
    for (std::size_t i = 0; i < ckpt.params.size(); ++i) order[ckpt.params[i].name] = i;
    for (std::size_t i = 0; i < items.size(); ++i) {
      const std::size_t j = order.at(items[i].name);
      adam->first_moments()[i] = ckpt.adam_m[j];
      adam->second_moments()[i] = ckpt.adam_v[j];
    }
    adam->set_steps(ckpt.adam_steps);
  }
}

}  // namespace gpw
