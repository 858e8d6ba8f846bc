#include <fstream>

#include <nlohmann/json.hpp>

#include "binary_io.hpp"
#include "tlens/model.hpp"

// Weight file layout (all little-endian):
//   8 bytes   magic "TLENSWTS"
//   u32       version (1)
//   i32 x 7   n_layers, n_heads, d_model, d_head, d_mlp, vocab, ctx
//   f32 x 2   eps, rope_base
//   f32 ...   each array in WeightSet::visit order, row-major

namespace tlens {

namespace {

constexpr char kMagic[9] = "TLENSWTS";
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kHeaderBytes = 8 + 4 + 7 * 4 + 2 * 4;

}  // namespace

void save_weights(const std::string& path, const WeightSet<float>& w) {
  w.check_shapes();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorKind::Io, "cannot open " + path + " for writing");
  detail::write_magic(os, kMagic);
  detail::write_u32(os, kVersion);
  const auto& c = w.config;
  for (int v : {c.n_layers, c.n_heads, c.d_model, c.d_head, c.d_mlp, c.vocab, c.ctx}) detail::write_i32(os, v);
  detail::write_f32(os, c.eps);
  detail::write_f32(os, c.rope_base);
  w.visit([&](const std::string&, const auto& a) {
    for (Eigen::Index i = 0; i < a.size(); ++i) detail::write_f32(os, a.data()[i]);
  });
  if (!os) throw Error(ErrorKind::Io, "write failed for " + path);
}

WeightSet<float> load_weights(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::Io, "cannot open " + path);
  detail::expect_magic(is, kMagic, path);
  const auto version = detail::read_u32(is);
  if (version != kVersion) throw Error(ErrorKind::Format, path + ": unsupported weight file version");
  ModelConfig c;
  c.n_layers = detail::read_i32(is);
  c.n_heads = detail::read_i32(is);
  c.d_model = detail::read_i32(is);
  c.d_head = detail::read_i32(is);
  c.d_mlp = detail::read_i32(is);
  c.vocab = detail::read_i32(is);
  c.ctx = detail::read_i32(is);
  c.eps = detail::read_f32(is);
  c.rope_base = detail::read_f32(is);
  auto w = WeightSet<float>::zeros(c);
  w.visit([&](const std::string&, auto& a) {
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = detail::read_f32(is);
  });
  if (is.peek() != std::char_traits<char>::eof()) throw Error(ErrorKind::Format, path + ": trailing bytes");
  return w;
}

void write_weight_manifest(const std::string& path, const WeightSet<float>& w) {
  const auto& c = w.config;
  nlohmann::ordered_json j;
  j["magic"] = std::string(kMagic, 8);
  j["version"] = kVersion;
  j["endianness"] = "little";
  j["config"] = {{"n_layers", c.n_layers}, {"n_heads", c.n_heads}, {"d_model", c.d_model}, {"d_head", c.d_head},
                 {"d_mlp", c.d_mlp},       {"vocab", c.vocab},     {"ctx", c.ctx},         {"eps", c.eps},
                 {"rope_base", c.rope_base}};
  auto arrays = nlohmann::ordered_json::array();
  std::size_t offset = kHeaderBytes;
  w.visit([&](const std::string& name, const auto& a) {
    arrays.push_back({{"name", name}, {"shape", {a.rows(), a.cols()}}, {"dtype", "f32"}, {"offset", offset}});
    offset += static_cast<std::size_t>(a.size()) * 4;
  });
  j["arrays"] = arrays;
  j["parameter_count"] = w.parameter_count();
  j["file_bytes"] = offset;
  std::ofstream os(path);
  if (!os) throw Error(ErrorKind::Io, "cannot open " + path + " for writing");
  os << j.dump(2) << "\n";
}

}  // namespace tlens
