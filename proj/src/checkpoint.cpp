#include "ocreplay/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace ocreplay {

namespace {

constexpr char kMagic[8] = {'O', 'C', 'R', 'P', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  explicit Writer(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw std::runtime_error("checkpoint: cannot open " + path);
  }
  void bytes(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void f64(double v) { bytes(&v, 8); }
  void matrix(const Matrix& m) {
    u64(m.rows);
    u64(m.cols);
    bytes(m.data.data(), m.data.size() * sizeof(double));
  }
  void close() {
    out_.close();
    if (!out_) throw std::runtime_error("checkpoint: write failed");
  }

 private:
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : in_(path, std::ios::binary) {
    if (!in_) throw std::runtime_error("checkpoint: cannot open " + path);
  }
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n)
      throw std::runtime_error("checkpoint: truncated file");
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    bytes(&v, 8);
    return v;
  }
  double f64() {
    double v;
    bytes(&v, 8);
    return v;
  }
  Matrix matrix() {
    const std::uint64_t r = u64();
    const std::uint64_t c = u64();
    Matrix m(r, c);
    bytes(m.data.data(), m.data.size() * sizeof(double));
    return m;
  }

 private:
  std::ifstream in_;
};

}  // namespace

void save_checkpoint(const std::string& path, const JointModel& model,
                     const JointTrainer& trainer, const Rng& rng) {
  Writer w(path);
  w.bytes(kMagic, sizeof(kMagic));
  w.u32(kVersion);
  w.u64(model.input_dim);
  w.u64(model.latent_dim);
  w.u64(model.hidden);
  w.u64(model.num_classes);
  w.f64(model.beta);
  for (const Matrix* m : model.parameters_const()) w.matrix(*m);

  const AdamParams& hp = trainer.hyper();
  w.f64(hp.lr);
  w.f64(hp.beta1);
  w.f64(hp.beta2);
  w.f64(hp.eps);
  const auto& states = const_cast<JointTrainer&>(trainer).states();
  w.u64(states.size());
  for (const AdamState& st : states) {
    w.u64(st.step_count);
    w.matrix(st.first_moment);
    w.matrix(st.second_moment);
  }

  const Rng::State rs = rng.state();
  w.u64(rs.seed);
  for (int i = 0; i < 4; ++i) w.u64(rs.s[i]);
  w.u64(rs.has_cache ? 1 : 0);
  w.f64(rs.cache);
  w.close();
}

Checkpoint load_checkpoint(const std::string& path) {
  Reader r(path);
  char magic[8];
  r.bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw std::runtime_error("checkpoint: unsupported version " +
                             std::to_string(version));

  Checkpoint ck;
  JointModel& m = ck.model;
  m.input_dim = r.u64();
  m.latent_dim = r.u64();
  m.hidden = r.u64();
  m.num_classes = r.u64();
  m.beta = r.f64();
  for (auto& p : m.parameters()) *p.m = r.matrix();

  ck.adam.lr = r.f64();
  ck.adam.beta1 = r.f64();
  ck.adam.beta2 = r.f64();
  ck.adam.eps = r.f64();
  const std::uint64_t n_states = r.u64();
  ck.states.resize(n_states);
  for (auto& st : ck.states) {
    st.step_count = r.u64();
    st.first_moment = r.matrix();
    st.second_moment = r.matrix();
  }

  ck.rng_state.seed = r.u64();
  for (int i = 0; i < 4; ++i) ck.rng_state.s[i] = r.u64();
  ck.rng_state.has_cache = r.u64() != 0;
  ck.rng_state.cache = r.f64();
  return ck;
}

JointTrainer make_trainer(Checkpoint& ckpt) {
  JointTrainer t(ckpt.model, ckpt.adam);
  if (t.states().size() != ckpt.states.size())
    throw std::runtime_error("checkpoint: optimizer state count mismatch");
  t.states() = ckpt.states;
  return t;
}

}  // namespace ocreplay
