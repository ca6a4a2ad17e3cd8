#include "hsf/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace hsf {

namespace {

constexpr char kMagic[4] = {'3', 'D', 'T', 'C'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void put_u32(std::ofstream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

void put_string(std::ofstream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Reader {
 public:
  Reader(const std::filesystem::path& path) : is_(path, std::ios::binary), path_(path) {
    if (!is_) throw IOError("cannot open checkpoint " + path.string());
  }
  void read(void* dst, std::size_t n) {
    is_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) throw IOError("truncated checkpoint " + path_.string());
  }
  std::uint32_t u32() {
    std::uint32_t v;
    read(&v, 4);
    return v;
  }
  std::string str() {
    const auto n = u32();
    if (n > (1u << 24)) throw IOError("corrupt checkpoint " + path_.string());
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
  bool at_end() { return is_.peek() == std::char_traits<char>::eof(); }

 private:
  std::ifstream is_;
  std::filesystem::path path_;
};

}  // namespace

const TensorRecord* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IOError("cannot write checkpoint " + path.string());
  os.write(kMagic, 4);
  put_u32(os, static_cast<std::uint32_t>(ckpt.config.items().size()));
  for (const auto& [k, v] : ckpt.config.items()) put_string(os, k + "=" + v);
  put_u32(os, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    if (static_cast<Index>(t.data.size()) != numel(t.shape))
      throw ShapeError("checkpoint record '" + t.name + "' has inconsistent length");
    put_string(os, t.name);
    put_u32(os, static_cast<std::uint32_t>(t.shape.size()));
    for (Index d : t.shape) put_u32(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * 4));
  }
  if (!os) throw IOError("failed writing checkpoint " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  char magic[4];
  r.read(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw IOError(path.string() + " is not a checkpoint (bad magic)");
  Checkpoint ck;
  const auto n_lines = r.u32();
  for (std::uint32_t i = 0; i < n_lines; ++i) {
    const std::string line = r.str();
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IOError("corrupt config line in " + path.string());
    ck.config.set(line.substr(0, eq), line.substr(eq + 1));
  }
  const auto n_tensors = r.u32();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    TensorRecord t;
    t.name = r.str();
    const auto ndim = r.u32();
    if (ndim > 8) throw IOError("corrupt tensor record in " + path.string());
    for (std::uint32_t d = 0; d < ndim; ++d) t.shape.push_back(static_cast<Index>(r.u32()));
    t.data.resize(static_cast<std::size_t>(numel(t.shape)));
    r.read(t.data.data(), t.data.size() * 4);
    ck.tensors.push_back(std::move(t));
  }
  if (!r.at_end()) throw IOError("trailing bytes in checkpoint " + path.string());
  return ck;
}

template <typename T>
TensorRecord make_record(const std::string& name, const Shape& shape, const std::vector<T>& values) {
  TensorRecord r{name, shape, std::vector<float>(values.size())};
  for (std::size_t i = 0; i < values.size(); ++i) r.data[i] = static_cast<float>(values[i]);
  return r;
}

template <typename T>
TensorRecord make_record(const std::string& name, const DiffTensor<T>& t) {
  const auto d = t.data();
  return make_record<T>(name, t.shape(), std::vector<T>(d.begin(), d.end()));
}

template <typename T>
Checkpoint make_checkpoint(const FusionNet<T>& net) {
  Checkpoint ck;
  net.config().write_to(ck.config);
  for (const auto& [name, t] : net.params().entries()) ck.tensors.push_back(make_record(name, t));
  return ck;
}

template <typename T>
void load_parameters(FusionNet<T>& net, const Checkpoint& ckpt) {
  for (const auto& [name, t] : net.params().entries()) {
    const TensorRecord* r = ckpt.find(name);
    if (!r) throw ConfigError("checkpoint lacks parameter '" + name + "'");
    if (r->shape != t.shape())
      throw ConfigError("checkpoint parameter '" + name + "' has shape " + to_string(r->shape) +
                        ", network expects " + to_string(t.shape()));
    auto d = t.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(r->data[i]);
  }
}

template <typename T>
FusionNet<T> load_network(const Checkpoint& ckpt) {
  KeyValueConfig arch;
  for (const auto& [k, v] : ckpt.config.items())
    if (FusionConfig::keys().count(k)) arch.set(k, v);
  FusionNet<T> net(FusionConfig::from_config(arch));
  load_parameters(net, ckpt);
  return net;
}

#define HSF_INSTANTIATE_CKPT(T)                                                                  \
  template TensorRecord make_record<T>(const std::string&, const DiffTensor<T>&);                \
  template TensorRecord make_record<T>(const std::string&, const Shape&, const std::vector<T>&); \
  template Checkpoint make_checkpoint<T>(const FusionNet<T>&);                                   \
  template void load_parameters<T>(FusionNet<T>&, const Checkpoint&);                            \
  template FusionNet<T> load_network<T>(const Checkpoint&);

HSF_INSTANTIATE_CKPT(float)
HSF_INSTANTIATE_CKPT(double)

}  // namespace hsf
