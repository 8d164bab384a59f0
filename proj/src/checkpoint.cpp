#include "controlvae/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

CONTROLVAE_NAMESPACE_BEGIN

namespace {

constexpr char kMagic[8] = {'C', 'V', 'A', 'E', 'C', 'K', 'P', '1'};

template <class T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    std::reverse(b, b + sizeof(T));
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
}

void put_reals(std::string& out, const Tensor& t) {
  for (Real x : t.data) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(x));
    bits = to_little(bits);
    out.append(reinterpret_cast<const char*>(&bits), 4);
  }
}

}  // namespace

const Checkpoint::Entry* Checkpoint::find(const std::string& name) const {
  for (const Entry& e : tensors)
    if (e.name == name) return &e;
  return nullptr;
}

Checkpoint make_checkpoint(const ParameterList& params, const RAdam* opt,
                           nlohmann::json meta) {
  Checkpoint c;
  std::set<std::string> seen;
  for (const Parameter* p : params) {
    if (!seen.insert(p->name).second) {
      throw ConfigError("checkpoint: duplicate parameter name '" + p->name + "'");
    }
    c.tensors.push_back({p->name, p->value});
  }
  if (opt) {
    if (opt->state().m.size() != params.size()) {
      throw ConfigError("checkpoint: optimizer does not match parameter list");
    }
    c.optimizer = opt->state();
  }
  c.meta = std::move(meta);
  return c;
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  nlohmann::json header;
  header["format"] = "controlvae-checkpoint";
  header["version"] = 1;
  nlohmann::json list = nlohmann::json::array();
  std::string payload;
  long offset = 0;
  auto add = [&](const std::string& name, const Tensor& t) {
    list.push_back({{"name", name}, {"shape", {t.rows, t.cols}}, {"offset", offset}});
    offset += static_cast<long>(t.size());
    put_reals(payload, t);
  };
  for (const auto& e : ckpt.tensors) add(e.name, e.value);
  if (ckpt.optimizer) {
    const RAdamState& s = *ckpt.optimizer;
    if (s.m.size() != ckpt.tensors.size() || s.v.size() != ckpt.tensors.size()) {
      throw ConfigError("checkpoint: optimizer moment count mismatch");
    }
    for (std::size_t i = 0; i < s.m.size(); ++i) add(ckpt.tensors[i].name + "#m", s.m[i]);
    for (std::size_t i = 0; i < s.v.size(); ++i) add(ckpt.tensors[i].name + "#v", s.v[i]);
    header["optimizer"] = {{"type", "radam"}, {"step", s.step}, {"lr", s.lr},
                           {"beta1", s.beta1}, {"beta2", s.beta2}, {"eps", s.eps}};
  }
  header["tensors"] = list;
  header["meta"] = ckpt.meta;
  const std::string text = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + tmp + "' for writing");
    f.write(kMagic, 8);
    const std::uint64_t n = to_little(static_cast<std::uint64_t>(text.size()));
    f.write(reinterpret_cast<const char*>(&n), 8);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!f) throw IoError("write failed for '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw IoError("cannot move '" + tmp + "' to '" + path + "'");
  }
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw DataError("'" + path + "' is not a checkpoint");
  }
  std::uint64_t n;
  std::memcpy(&n, bytes.data() + 8, 8);
  n = to_little(n);
  if (16 + n > bytes.size()) throw DataError("'" + path + "': truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, n));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("'" + path + "': bad header: " + e.what());
  }
  const char* payload = bytes.data() + 16 + n;
  const std::size_t payload_reals = (bytes.size() - 16 - n) / 4;

  auto read_tensor = [&](const nlohmann::json& j) {
    const int rows = j.at("shape").at(0), cols = j.at("shape").at(1);
    const long off = j.at("offset");
    Tensor t(rows, cols);
    if (off < 0 || static_cast<std::size_t>(off) + t.size() > payload_reals) {
      throw DataError("'" + path + "': tensor '" + j.at("name").get<std::string>() +
                      "' exceeds payload");
    }
    for (std::size_t i = 0; i < t.size(); ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, payload + 4 * (off + i), 4);
      t.data[i] = static_cast<Real>(std::bit_cast<float>(to_little(bits)));
    }
    return t;
  };

  Checkpoint c;
  std::vector<std::pair<std::string, Tensor>> all;
  for (const auto& j : header.at("tensors")) {
    all.emplace_back(j.at("name").get<std::string>(), read_tensor(j));
  }
  if (header.contains("optimizer")) {
    const auto& o = header["optimizer"];
    RAdamState s;
    s.step = o.at("step");
    s.lr = o.at("lr");
    s.beta1 = o.at("beta1");
    s.beta2 = o.at("beta2");
    s.eps = o.value("eps", 1e-8);
    const std::size_t np = all.size() / 3;
    if (all.size() != 3 * np) throw DataError("'" + path + "': bad optimizer block");
    for (std::size_t i = 0; i < np; ++i) c.tensors.push_back({all[i].first, all[i].second});
    for (std::size_t i = 0; i < np; ++i) s.m.push_back(all[np + i].second);
    for (std::size_t i = 0; i < np; ++i) s.v.push_back(all[2 * np + i].second);
    c.optimizer = std::move(s);
  } else {
    for (auto& [name, t] : all) c.tensors.push_back({name, std::move(t)});
  }
  c.meta = header.value("meta", nlohmann::json::object());
  return c;
}

void save_checkpoint(const std::string& path, const ParameterList& params,
                     const RAdam* opt, nlohmann::json meta) {
  write_checkpoint(path, make_checkpoint(params, opt, std::move(meta)));
}

void apply_checkpoint(const Checkpoint& ckpt, const ParameterList& params, RAdam* opt) {
  for (Parameter* p : params) {
    const Checkpoint::Entry* e = ckpt.find(p->name);
    if (!e) throw DataError("checkpoint has no tensor '" + p->name + "'");
    if (!e->value.same_shape(p->value)) {
      throw DataError("checkpoint tensor '" + p->name + "' has the wrong shape");
    }
  }
  for (Parameter* p : params) p->value = ckpt.find(p->name)->value;
  if (opt) {
    if (!ckpt.optimizer) throw DataError("checkpoint has no optimizer state");
    // moments are stored in the checkpoint's order; remap to `params`
    RAdamState s = *ckpt.optimizer;
    RAdamState& dst = opt->state();
    std::vector<Tensor> m, v;
    for (Parameter* p : params) {
      std::size_t k = 0;
      while (ckpt.tensors[k].name != p->name) ++k;
      m.push_back(s.m[k]);
      v.push_back(s.v[k]);
    }
    dst.step = s.step;
    dst.lr = s.lr;
    dst.beta1 = s.beta1;
    dst.beta2 = s.beta2;
    dst.eps = s.eps;
    dst.m = std::move(m);
    dst.v = std::move(v);
  }
}

void load_checkpoint(const std::string& path, const ParameterList& params, RAdam* opt,
                     nlohmann::json* meta) {
  Checkpoint c = read_checkpoint(path);
  apply_checkpoint(c, params, opt);
  if (meta) *meta = c.meta;
}

std::string file_hash(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for hashing");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << hash_string(bytes);
  return os.str();
}

CONTROLVAE_NAMESPACE_END
