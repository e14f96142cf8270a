#include "intrus/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace intrus {
namespace {

constexpr const char* kMagic = "INTRUS-CHECKPOINT 1";

void put_f32_le(std::string& out, float f) {
  std::uint32_t u = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

float get_f32_le(const unsigned char* p) {
  std::uint32_t u = 0;
  for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(u);
}

}  // namespace

void write_checkpoint(const std::string& path, const ParameterSet& params,
                      const std::map<std::string, std::string>& meta) {
  std::ostringstream header;
  header << kMagic << '\n';
  for (const auto& [k, v] : meta) {
    if (k.find_first_of(" =\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw std::invalid_argument("checkpoint meta key/value not representable: " + k);
    }
    header << "meta " << k << '=' << v << '\n';
  }
  std::string payload;
  for (const Parameter& p : params) {
    header << "tensor " << p.name << ' ' << p.value.rows() << ' ' << p.value.cols() << ' '
           << payload.size() << '\n';
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      put_f32_le(payload, static_cast<float>(p.value.data()[i]));
    }
  }
  header << "payload " << payload.size() << '\n';

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  const std::string h = header.str();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw std::runtime_error("failed writing checkpoint: " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  std::string line;
  if (!std::getline(in, line) || line != kMagic) {
    throw std::runtime_error("not a checkpoint file: " + path);
  }
  struct Entry {
    std::string name;
    Eigen::Index rows, cols;
    std::size_t offset;
  };
  std::vector<Entry> entries;
  Checkpoint ckpt;
  std::size_t payload_bytes = 0;
  bool have_payload = false;
  while (!have_payload && std::getline(in, line)) {
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "meta") {
      const std::string rest = line.substr(5);
      const auto eq = rest.find('=');
      if (eq == std::string::npos) throw std::runtime_error("bad meta line: " + line);
      ckpt.meta[rest.substr(0, eq)] = rest.substr(eq + 1);
    } else if (kind == "tensor") {
      Entry e;
      if (!(ls >> e.name >> e.rows >> e.cols >> e.offset)) {
        throw std::runtime_error("bad tensor line: " + line);
      }
      entries.push_back(std::move(e));
    } else if (kind == "payload") {
      if (!(ls >> payload_bytes)) throw std::runtime_error("bad payload line: " + line);
      have_payload = true;
    } else {
      throw std::runtime_error("unexpected checkpoint header line: " + line);
    }
  }
  if (!have_payload) throw std::runtime_error("truncated checkpoint header: " + path);
  std::vector<unsigned char> payload(payload_bytes);
  in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload_bytes));
  if (static_cast<std::size_t>(in.gcount()) != payload_bytes) {
    throw std::runtime_error("truncated checkpoint payload: " + path);
  }
  for (const Entry& e : entries) {
    const std::size_t n = static_cast<std::size_t>(e.rows * e.cols);
    if (e.offset + 4 * n > payload_bytes) {
      throw std::runtime_error("tensor " + e.name + " extends past payload");
    }
    Matrix m(e.rows, e.cols);
    for (std::size_t i = 0; i < n; ++i) m.data()[i] = get_f32_le(&payload[e.offset + 4 * i]);
    ckpt.tensors.push_back({e.name, std::move(m)});
  }
  return ckpt;
}

void load_parameters(const Checkpoint& ckpt, ParameterSet& params) {
  for (Parameter& p : params) {
    const CheckpointTensor* found = nullptr;
    for (const auto& t : ckpt.tensors) {
      if (t.name == p.name) {
        found = &t;
        break;
      }
    }
    if (found == nullptr) throw std::runtime_error("checkpoint lacks parameter " + p.name);
    if (found->value.rows() != p.value.rows() || found->value.cols() != p.value.cols()) {
      throw ShapeError("checkpoint shape mismatch for " + p.name + ": " +
                       shape_string(found->value) + " vs " + shape_string(p.value));
    }
    p.value = found->value;
  }
}

}  // namespace intrus
