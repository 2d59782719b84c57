#include "mlda/checkpoint.hpp"

#include <chrono>
#include <cstring>
#include <ctime>
#include <fstream>
#include <iterator>

namespace mlda {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[8] = {'M', 'L', 'D', 'A', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw CheckpointError("truncated checkpoint");
  return v;
}

std::string get_string(std::istream& is, std::size_t limit = 1u << 26) {
  const auto n = get<std::uint32_t>(is);
  if (n > limit) throw CheckpointError("corrupt checkpoint: string length " + std::to_string(n));
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw CheckpointError("truncated checkpoint");
  return s;
}

}  // namespace

const CheckpointSection& Checkpoint::section(const std::string& role) const {
  for (const auto& s : sections)
    if (s.role == role) return s;
  throw CheckpointError("checkpoint has no section '" + role + "'");
}

bool Checkpoint::has_section(const std::string& role) const {
  for (const auto& s : sections)
    if (s.role == role) return true;
  return false;
}

TensorDict module_state(const torch::nn::Module& module) {
  TensorDict out;
  for (const auto& p : module.named_parameters()) out.emplace_back(p.key(), p.value().detach().to(torch::kCPU).clone());
  for (const auto& b : module.named_buffers()) out.emplace_back(b.key(), b.value().detach().to(torch::kCPU).clone());
  return out;
}

void load_module_state(torch::nn::Module& module, const TensorDict& state) {
  std::map<std::string, torch::Tensor> lookup(state.begin(), state.end());
  torch::NoGradGuard no_grad;
  auto assign = [&](const std::string& name, torch::Tensor& target) {
    auto it = lookup.find(name);
    if (it == lookup.end()) throw CheckpointError("checkpoint is missing tensor '" + name + "'");
    if (!it->second.sizes().equals(target.sizes()))
      throw CheckpointError("checkpoint tensor '" + name + "' has a different shape than the module");
    target.copy_(it->second);
    lookup.erase(it);
  };
  for (auto& p : module.named_parameters()) assign(p.key(), p.value());
  for (auto& b : module.named_buffers()) assign(b.key(), b.value());
  if (!lookup.empty()) throw CheckpointError("checkpoint has unexpected tensor '" + lookup.begin()->first + "'");
}

void write_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot write checkpoint " + path.string());
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, ckpt.version);
  char stamp[kCheckpointTimestampSize] = {};
  const std::string created = ckpt.created.empty() ? utc_timestamp() : ckpt.created;
  std::memcpy(stamp, created.data(), std::min(created.size(), kCheckpointTimestampSize - 1));
  os.write(stamp, sizeof(stamp));
  put_string(os, ckpt.meta.dump());
  put<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.sections.size()));
  for (const auto& sec : ckpt.sections) {
    put_string(os, sec.role);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(sec.tensors.size()));
    for (const auto& [name, tensor] : sec.tensors) {
      auto t = tensor.detach().to(torch::kCPU).contiguous();
      std::uint8_t dtype = 0;
      if (t.scalar_type() == torch::kDouble) {
        dtype = 1;
      } else if (t.scalar_type() != torch::kFloat) {
        throw CheckpointError("tensor '" + name + "' has unsupported dtype");
      }
      put_string(os, name);
      put<std::uint8_t>(os, dtype);
      put<std::uint32_t>(os, static_cast<std::uint32_t>(t.dim()));
      for (int64_t d = 0; d < t.dim(); ++d) put<std::int64_t>(os, t.size(d));
      os.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(t.nbytes()));
    }
  }
  if (!os) throw CheckpointError("failed writing checkpoint " + path.string());
}

Checkpoint read_checkpoint(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(magic)) != 0)
    throw CheckpointError(path.string() + " is not a checkpoint file");
  Checkpoint ckpt;
  ckpt.version = get<std::uint32_t>(is);
  if (ckpt.version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(ckpt.version));
  char stamp[kCheckpointTimestampSize];
  is.read(stamp, sizeof(stamp));
  ckpt.created.assign(stamp, strnlen(stamp, sizeof(stamp)));
  try {
    ckpt.meta = nlohmann::json::parse(get_string(is));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint metadata: ") + e.what());
  }
  const auto n_sections = get<std::uint32_t>(is);
  for (std::uint32_t s = 0; s < n_sections; ++s) {
    CheckpointSection sec;
    sec.role = get_string(is);
    const auto n = get<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < n; ++i) {
      auto name = get_string(is);
      const auto dtype = get<std::uint8_t>(is);
      if (dtype > 1) throw CheckpointError("tensor '" + name + "' has unknown dtype tag");
      const auto ndim = get<std::uint32_t>(is);
      if (ndim > 8) throw CheckpointError("tensor '" + name + "' has implausible rank");
      std::vector<int64_t> dims(ndim);
      for (auto& d : dims) d = get<std::int64_t>(is);
      auto t = torch::empty(dims, dtype == 1 ? torch::kDouble : torch::kFloat);
      is.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(t.nbytes()));
      if (!is) throw CheckpointError("truncated tensor '" + name + "'");
      sec.tensors.emplace_back(std::move(name), std::move(t));
    }
    ckpt.sections.push_back(std::move(sec));
  }
  return ckpt;
}

std::uint64_t state_hash(const TensorDict& state) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, tensor] : state) {
    mix(name.data(), name.size());
    auto t = tensor.detach().to(torch::kCPU).contiguous();
    for (int64_t d = 0; d < t.dim(); ++d) {
      const int64_t s = t.size(d);
      mix(&s, sizeof(s));
    }
    mix(t.data_ptr(), t.nbytes());
  }
  return h;
}

std::uint64_t parameter_hash(const torch::nn::Module& module) { return state_hash(module_state(module)); }

bool checkpoint_bytes_equal(const fs::path& a, const fs::path& b) {
  auto slurp = [](const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw CheckpointError("cannot open " + p.string());
    return std::vector<char>(std::istreambuf_iterator<char>(is), {});
  };
  auto x = slurp(a), y = slurp(b);
  if (x.size() != y.size()) return false;
  const auto end = kCheckpointTimestampOffset + kCheckpointTimestampSize;
  if (x.size() < end) return x == y;
  std::fill(x.begin() + kCheckpointTimestampOffset, x.begin() + end, 0);
  std::fill(y.begin() + kCheckpointTimestampOffset, y.begin() + end, 0);
  return x == y;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace mlda
