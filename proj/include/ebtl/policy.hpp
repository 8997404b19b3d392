#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ebtl/adam.hpp"
#include "ebtl/rng.hpp"
#include "ebtl/tensor.hpp"

namespace ebtl::policy {

using nn::ParamMap;
using nn::Tape;
using nn::Tensor;

class CheckpointVersionError : public Error {
 public:
  using Error::Error;
};

class CheckpointCorruptError : public Error {
 public:
  using Error::Error;
};

inline constexpr double kMaskedLogit = -1e9;

enum class EncoderKind { GridConv, Dense };

// Network layout. GridConv: two 3x3 valid convolutions (16 then 32
// channels, relu) into one dense relu layer, then linear policy/value
// heads. Dense: a relu MLP over the flat observation.
struct Architecture {
  EncoderKind kind = EncoderKind::Dense;
  std::size_t obs_dim = 0;
  std::size_t action_count = 0;
  // GridConv only:
  std::size_t channels = 0, height = 0, width = 0;
  std::size_t conv1_filters = 16, conv2_filters = 32;
  // Dense trunk sizes after the (optional) conv stack.
  std::vector<std::size_t> hidden;

  bool operator==(const Architecture&) const = default;

  std::size_t conv_out_dim() const {
    const std::size_t h2 = height - 4, w2 = width - 4;  // two valid 3x3 convs
    return conv2_filters * h2 * w2;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["kind"] = kind == EncoderKind::GridConv ? "grid_conv" : "dense";
    j["obs_dim"] = obs_dim;
    j["action_count"] = action_count;
    j["channels"] = channels;
    j["height"] = height;
    j["width"] = width;
    j["conv1_filters"] = conv1_filters;
    j["conv2_filters"] = conv2_filters;
    j["hidden"] = hidden;
    return j;
  }

  static Architecture from_json(const nlohmann::json& j) {
    Architecture a;
    a.kind = j.at("kind") == "grid_conv" ? EncoderKind::GridConv : EncoderKind::Dense;
    a.obs_dim = j.at("obs_dim");
    a.action_count = j.at("action_count");
    a.channels = j.at("channels");
    a.height = j.at("height");
    a.width = j.at("width");
    a.conv1_filters = j.at("conv1_filters");
    a.conv2_filters = j.at("conv2_filters");
    a.hidden = j.at("hidden").get<std::vector<std::size_t>>();
    return a;
  }
};

inline Architecture grid_architecture(std::size_t channels, std::size_t height,
                                      std::size_t width, std::size_t actions) {
  Architecture a;
  a.kind = EncoderKind::GridConv;
  a.channels = channels;
  a.height = height;
  a.width = width;
  a.obs_dim = channels * height * width;
  a.action_count = actions;
  a.hidden = {128};
  return a;
}

inline Architecture dense_architecture(std::size_t obs_dim, std::size_t actions) {
  Architecture a;
  a.kind = EncoderKind::Dense;
  a.obs_dim = obs_dim;
  a.action_count = actions;
  a.hidden = {256, 128};
  return a;
}

struct ActorCriticParams {
  Architecture arch;
  ParamMap tensors;
};

namespace detail {

// Orthogonal-style init: Gram-Schmidt over gaussian rows (or columns when
// the matrix is tall), scaled by `gain`.
inline std::vector<double> orthogonal(std::size_t rows, std::size_t cols, double gain, Rng& rng) {
  const bool wide = cols >= rows;
  const std::size_t n_vec = wide ? rows : cols;
  const std::size_t dim = wide ? cols : rows;
  std::vector<std::vector<double>> basis(n_vec, std::vector<double>(dim));
  for (auto& v : basis)
    for (auto& x : v) x = rng.normal();
  for (std::size_t i = 0; i < n_vec; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < dim; ++k) dot += basis[i][k] * basis[j][k];
      for (std::size_t k = 0; k < dim; ++k) basis[i][k] -= dot * basis[j][k];
    }
    double norm = 0;
    for (double x : basis[i]) norm += x * x;
    norm = std::sqrt(norm);
    // A degenerate draw is vanishingly unlikely; re-normalizing against a
    // tiny floor keeps the routine total.
    norm = std::max(norm, 1e-12);
    for (auto& x : basis[i]) x /= norm;
  }
  std::vector<double> w(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      w[r * cols + c] = gain * (wide ? basis[r][c] : basis[c][r]);
  return w;
}

inline Tensor ortho_matrix(std::size_t rows, std::size_t cols, double gain, Rng& rng) {
  return Tensor::matrix(rows, cols, orthogonal(rows, cols, gain, rng));
}

}  // namespace detail

inline ActorCriticParams init_params(const Architecture& arch, std::uint64_t seed) {
  EBTL_REQUIRE(arch.obs_dim > 0 && arch.action_count > 0, "init_params: empty architecture");
  Rng rng = Rng::derive(seed, {0x1217});
  ActorCriticParams p;
  p.arch = arch;
  const double hidden_gain = std::sqrt(2.0);
  std::size_t trunk_in = arch.obs_dim;
  if (arch.kind == EncoderKind::GridConv) {
    EBTL_REQUIRE(arch.height >= 5 && arch.width >= 5,
                 "init_params: grid too small for two 3x3 convolutions");
    p.tensors["conv1.w"] =
        detail::ortho_matrix(arch.conv1_filters, arch.channels * 9, hidden_gain, rng);
    p.tensors["conv1.b"] = Tensor::zeros({arch.conv1_filters});
    p.tensors["conv2.w"] =
        detail::ortho_matrix(arch.conv2_filters, arch.conv1_filters * 9, hidden_gain, rng);
    p.tensors["conv2.b"] = Tensor::zeros({arch.conv2_filters});
    trunk_in = arch.conv_out_dim();
  }
  for (std::size_t i = 0; i < arch.hidden.size(); ++i) {
    const std::string name = "fc" + std::to_string(i + 1);
    p.tensors[name + ".w"] = detail::ortho_matrix(trunk_in, arch.hidden[i], hidden_gain, rng);
    p.tensors[name + ".b"] = Tensor::zeros({arch.hidden[i]});
    trunk_in = arch.hidden[i];
  }
  p.tensors["pi.w"] = detail::ortho_matrix(trunk_in, arch.action_count, 0.01, rng);
  p.tensors["pi.b"] = Tensor::zeros({arch.action_count});
  p.tensors["v.w"] = detail::ortho_matrix(trunk_in, 1, 1.0, rng);
  p.tensors["v.b"] = Tensor::zeros({1});
  return p;
}

// Encoder parameter names, used by fine-tuning to freeze the feature stack.
inline std::set<std::string> encoder_param_names(const Architecture& arch) {
  if (arch.kind == EncoderKind::GridConv)
    return {"conv1.w", "conv1.b", "conv2.w", "conv2.b"};
  return {"fc1.w", "fc1.b"};
}

// Batched network outputs. `logits` are the raw pre-masking head outputs
// (energy scoring reads these); `masked_log_probs` normalize over enabled
// actions only.
struct PolicyOutput {
  Tensor logits;            // [N, K]
  Tensor masked_log_probs;  // [N, K]
  Tensor value;             // [N]
};

// Differentiable view of the parameters for one update step.
struct BoundParams {
  const Architecture* arch = nullptr;
  std::map<std::string, Tensor> leaves;

  const Tensor& at(const std::string& name) const { return leaves.at(name); }
};

inline BoundParams bind(Tape& tape, const ActorCriticParams& params) {
  BoundParams b;
  b.arch = &params.arch;
  for (const auto& [name, t] : params.tensors) b.leaves.emplace(name, tape.leaf(t));
  return b;
}

// Constant (inference) view; no gradients flow.
inline BoundParams bind_const(const ActorCriticParams& params) {
  BoundParams b;
  b.arch = &params.arch;
  for (const auto& [name, t] : params.tensors) b.leaves.emplace(name, t);
  return b;
}

inline Tensor mask_addend(const std::vector<std::uint8_t>& masks, std::size_t n, std::size_t k) {
  EBTL_REQUIRE(masks.size() == n * k, "forward: mask size ", masks.size(), " != ", n * k);
  std::vector<double> addend(n * k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    bool any = false;
    for (std::size_t j = 0; j < k; ++j) {
      if (masks[i * k + j])
        any = true;
      else
        addend[i * k + j] = kMaskedLogit;
    }
    EBTL_REQUIRE(any, "forward: all actions masked for row ", i);
  }
  return Tensor::matrix(n, k, std::move(addend));
}

// Runs the network on a batch of observations. `masks` is row-major
// [N x action_count]; pass all-ones when the environment has no masking.
inline PolicyOutput forward(Tape& tape, const BoundParams& params, const Tensor& obs,
                            const std::vector<std::uint8_t>& masks) {
  const Architecture& arch = *params.arch;
  EBTL_REQUIRE_SHAPE(obs.rank() == 2 && obs.dim(1) == arch.obs_dim,
                     "forward: observation shape ", fmt_shape(obs.shape()),
                     " does not match obs_dim ", arch.obs_dim);
  const std::size_t n = obs.dim(0), k = arch.action_count;
  Tensor h = obs;
  if (arch.kind == EncoderKind::GridConv) {
    h = tape.relu(tape.conv2d(h, params.at("conv1.w"), params.at("conv1.b"), arch.channels,
                              arch.height, arch.width, 3, 3));
    h = tape.relu(tape.conv2d(h, params.at("conv2.w"), params.at("conv2.b"), arch.conv1_filters,
                              arch.height - 2, arch.width - 2, 3, 3));
  }
  for (std::size_t i = 0; i < arch.hidden.size(); ++i) {
    const std::string name = "fc" + std::to_string(i + 1);
    h = tape.relu(tape.add(tape.matmul(h, params.at(name + ".w")), params.at(name + ".b")));
  }
  PolicyOutput out;
  out.logits = tape.add(tape.matmul(h, params.at("pi.w")), params.at("pi.b"));
  out.masked_log_probs = tape.log_softmax(tape.add(out.logits, mask_addend(masks, n, k)));
  out.value = tape.sum_rows(tape.add(tape.matmul(h, params.at("v.w")), params.at("v.b")));
  return out;
}

inline PolicyOutput forward(Tape& tape, const ActorCriticParams& params, const Tensor& obs,
                            const std::vector<std::uint8_t>& masks) {
  return forward(tape, bind_const(params), obs, masks);
}

// Categorical sample from one row of the masked distribution.
// Returns (action, log_prob of that action).
inline std::pair<int, double> sample_action(const PolicyOutput& out, std::size_t row, Rng& rng) {
  const std::size_t k = out.masked_log_probs.dim(1);
  const double u = rng.uniform();
  double cum = 0.0;
  int last_enabled = -1;
  for (std::size_t j = 0; j < k; ++j) {
    const double lp = out.masked_log_probs.at(row, j);
    const double p = std::exp(lp);
    if (p > 0.0) last_enabled = static_cast<int>(j);
    cum += p;
    if (u < cum) return {static_cast<int>(j), lp};
  }
  EBTL_REQUIRE(last_enabled >= 0, "sample_action: no enabled action");
  return {last_enabled, out.masked_log_probs.at(row, last_enabled)};
}

// Shannon entropy of one row of the masked distribution, in nats.
inline double entropy(const PolicyOutput& out, std::size_t row = 0) {
  const std::size_t k = out.masked_log_probs.dim(1);
  double h = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    const double lp = out.masked_log_probs.at(row, j);
    const double p = std::exp(lp);
    if (p > 0.0) h -= p * lp;
  }
  return h;
}

// Differentiable mean entropy over the batch: -E_i sum_a p log p.
inline Tensor entropy_mean(Tape& tape, const Tensor& masked_log_probs) {
  auto p = tape.exponent(masked_log_probs);
  auto plp = tape.multiply(p, masked_log_probs);
  return tape.negate(tape.mean(tape.sum_rows(plp)));
}

// ---- checkpoints ----

struct CheckpointMeta {
  long step = 0;
  std::string env_hash;
  nlohmann::json env_config;         // environment spec echo
  bool energy_reg = false;
  std::map<std::string, double> tau_table;  // quantile (as printed key) -> threshold
  double temperature = 1.0;
  double m_in = 0.0, m_out = 0.0, lambda = 0.0;
  nlohmann::json extra;
};

struct Checkpoint {
  ActorCriticParams params;
  CheckpointMeta meta;
};

namespace detail {

inline constexpr char kMagic[8] = {'E', 'B', 'T', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::string& out, const T& v) {
  const char* p = reinterpret_cast<const char*>(&v);
  out.append(p, sizeof(T));
}

template <typename T>
T read_pod(const std::string& in, std::size_t& off) {
  if (off + sizeof(T) > in.size())
    throw CheckpointCorruptError("checkpoint: truncated file");
  T v;
  std::memcpy(&v, in.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

}  // namespace detail

inline nlohmann::json meta_to_json(const CheckpointMeta& m) {
  nlohmann::json j;
  j["step"] = m.step;
  j["env_hash"] = m.env_hash;
  j["env_config"] = m.env_config;
  j["energy_reg"] = m.energy_reg;
  j["tau_table"] = m.tau_table;
  j["temperature"] = m.temperature;
  j["m_in"] = m.m_in;
  j["m_out"] = m.m_out;
  j["lambda"] = m.lambda;
  if (!m.extra.is_null()) j["extra"] = m.extra;
  return j;
}

inline CheckpointMeta meta_from_json(const nlohmann::json& j) {
  CheckpointMeta m;
  m.step = j.at("step");
  m.env_hash = j.at("env_hash");
  m.env_config = j.at("env_config");
  m.energy_reg = j.at("energy_reg");
  m.tau_table = j.at("tau_table").get<std::map<std::string, double>>();
  m.temperature = j.at("temperature");
  m.m_in = j.at("m_in");
  m.m_out = j.at("m_out");
  m.lambda = j.at("lambda");
  if (j.contains("extra")) m.extra = j.at("extra");
  return m;
}

// Format: magic, version, metadata length + JSON (architecture included),
// then named shape-prefixed little-endian float64 arrays, then an FNV-1a
// checksum of everything before it.
inline void save_checkpoint(const ActorCriticParams& params, const CheckpointMeta& meta,
                            const std::filesystem::path& path) {
  std::string buf;
  buf.append(detail::kMagic, sizeof(detail::kMagic));
  detail::write_pod(buf, detail::kVersion);
  nlohmann::json j = meta_to_json(meta);
  j["arch"] = params.arch.to_json();
  const std::string meta_text = j.dump();
  detail::write_pod(buf, static_cast<std::uint64_t>(meta_text.size()));
  buf += meta_text;
  detail::write_pod(buf, static_cast<std::uint64_t>(params.tensors.size()));
  for (const auto& [name, t] : params.tensors) {
    detail::write_pod(buf, static_cast<std::uint32_t>(name.size()));
    buf += name;
    detail::write_pod(buf, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::write_pod(buf, static_cast<std::uint64_t>(d));
    const auto& data = t.data();
    buf.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(double));
  }
  detail::write_pod(buf, fnv1a(buf.data(), buf.size()));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("save_checkpoint: cannot open " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  EBTL_REQUIRE(out.good(), "save_checkpoint: write failed for ", path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_checkpoint: cannot open " + path.string());
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < sizeof(detail::kMagic) + sizeof(std::uint32_t) + sizeof(std::uint64_t))
    throw CheckpointCorruptError("checkpoint: file too short: " + path.string());
  if (std::memcmp(buf.data(), detail::kMagic, sizeof(detail::kMagic)) != 0)
    throw CheckpointCorruptError("checkpoint: bad magic bytes in " + path.string());
  const std::uint64_t stored_sum =
      [&] {
        std::size_t off = buf.size() - sizeof(std::uint64_t);
        return detail::read_pod<std::uint64_t>(buf, off);
      }();
  if (fnv1a(buf.data(), buf.size() - sizeof(std::uint64_t)) != stored_sum)
    throw CheckpointCorruptError("checkpoint: checksum mismatch in " + path.string());

  std::size_t off = sizeof(detail::kMagic);
  const auto version = detail::read_pod<std::uint32_t>(buf, off);
  if (version != detail::kVersion)
    throw CheckpointVersionError("checkpoint: unsupported version " + std::to_string(version));
  const auto meta_len = detail::read_pod<std::uint64_t>(buf, off);
  if (off + meta_len > buf.size()) throw CheckpointCorruptError("checkpoint: truncated metadata");
  nlohmann::json j = nlohmann::json::parse(buf.substr(off, meta_len), nullptr, false);
  if (j.is_discarded()) throw CheckpointCorruptError("checkpoint: unparsable metadata");
  off += meta_len;

  Checkpoint ck;
  ck.meta = meta_from_json(j);
  ck.params.arch = Architecture::from_json(j.at("arch"));
  const auto n_params = detail::read_pod<std::uint64_t>(buf, off);
  for (std::uint64_t i = 0; i < n_params; ++i) {
    const auto name_len = detail::read_pod<std::uint32_t>(buf, off);
    if (off + name_len > buf.size()) throw CheckpointCorruptError("checkpoint: truncated name");
    std::string name = buf.substr(off, name_len);
    off += name_len;
    const auto rank = detail::read_pod<std::uint32_t>(buf, off);
    nn::Shape shape;
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      shape.push_back(detail::read_pod<std::uint64_t>(buf, off));
      numel *= shape.back();
    }
    if (off + numel * sizeof(double) > buf.size())
      throw CheckpointCorruptError("checkpoint: truncated weights for " + name);
    std::vector<double> data(numel);
    std::memcpy(data.data(), buf.data() + off, numel * sizeof(double));
    off += numel * sizeof(double);
    ck.params.tensors.emplace(name, Tensor(std::move(shape), std::move(data)));
  }

  // Sanity: the stored weights must describe the declared architecture.
  ActorCriticParams expect = init_params(ck.params.arch, 0);
  for (const auto& [name, t] : expect.tensors) {
    auto it = ck.params.tensors.find(name);
    EBTL_REQUIRE_SHAPE(it != ck.params.tensors.end(), "checkpoint: missing parameter '", name,
                       "'");
    EBTL_REQUIRE_SHAPE(it->second.shape() == t.shape(), "checkpoint: parameter '", name,
                       "' has shape ", fmt_shape(it->second.shape()), ", architecture expects ",
                       fmt_shape(t.shape()));
  }
  return ck;
}

// Rejects checkpoints that cannot drive the given environment signature.
inline void require_compatible(const ActorCriticParams& params, std::size_t obs_dim,
                               std::size_t action_count) {
  EBTL_REQUIRE_SHAPE(params.arch.obs_dim == obs_dim && params.arch.action_count == action_count,
                     "checkpoint/environment shape mismatch: network expects obs_dim ",
                     params.arch.obs_dim, " x ", params.arch.action_count,
                     " actions, environment provides ", obs_dim, " x ", action_count);
}

}  // namespace ebtl::policy
