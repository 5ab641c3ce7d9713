#include "transrad/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "json.hpp"
#include "transrad/config.hpp"
#include "transrad/errors.hpp"

namespace transrad {

namespace {

constexpr char kMagic[4] = {'T', 'R', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T read_pod(std::istream& is, const std::string& what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw DataError("checkpoint truncated while reading " + what);
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& file, const Detector& model, const std::string& extra_json) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(extra_json);
  } catch (const nlohmann::json::exception&) {
    throw std::invalid_argument("checkpoint extra metadata must be JSON");
  }
  if (!meta.is_object()) throw std::invalid_argument("checkpoint extra metadata must be an object");
  meta["model"] = nlohmann::json::parse(model_config_to_json(model.config()));
  const std::string text = meta.dump();

  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  const auto tmp = std::filesystem::path(file.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw DataError("cannot write checkpoint " + file.string());
    os.write(kMagic, 4);
    write_pod(os, kVersion);
    write_pod(os, static_cast<std::uint64_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    const auto params = model.params();
    write_pod(os, static_cast<std::uint32_t>(params.entries().size()));
    for (const auto& e : params.entries()) {
      write_pod(os, static_cast<std::uint32_t>(e.name.size()));
      os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
      write_pod(os, static_cast<std::uint32_t>(e.tensor.ndim()));
      for (int d : e.tensor.shape()) write_pod(os, static_cast<std::int32_t>(d));
      const auto v = e.tensor.values();
      os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    }
    if (!os) throw DataError("failed writing checkpoint " + file.string());
  }
  std::filesystem::rename(tmp, file);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw DataError("cannot read checkpoint " + file.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw DataError("not a checkpoint: " + file.string());
  const auto version = read_pod<std::uint32_t>(is, "version");
  if (version != kVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  const auto meta_len = read_pod<std::uint64_t>(is, "meta length");
  if (meta_len > (1u << 26)) throw DataError("checkpoint meta block too large");
  std::string text(meta_len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(meta_len))) throw DataError("checkpoint truncated in meta");

  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint meta is not JSON: ") + e.what());
  }
  if (!meta.contains("model")) throw DataError("checkpoint meta lacks the model config");
  LoadedCheckpoint out;
  out.model = std::make_unique<Detector>(model_config_from_json(meta.at("model").dump()));
  meta.erase("model");
  out.extra_json = meta.dump();

  const auto params = out.model->params();
  const auto count = read_pod<std::uint32_t>(is, "tensor count");
  if (count != params.entries().size()) {
    throw DataError("checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                    std::to_string(params.entries().size()));
  }
  for (const auto& e : params.entries()) {
    const auto name_len = read_pod<std::uint32_t>(is, "name length");
    if (name_len > 4096) throw DataError("checkpoint tensor name too long");
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw DataError("checkpoint truncated in tensor name");
    if (name != e.name) throw DataError("checkpoint tensor '" + name + "' where '" + e.name + "' was expected");
    const auto rank = read_pod<std::uint32_t>(is, "rank");
    ad::Shape shape;
    for (std::uint32_t i = 0; i < rank && i < 8; ++i) shape.push_back(read_pod<std::int32_t>(is, "dims"));
    if (shape != e.tensor.shape()) {
      throw DataError("checkpoint tensor '" + name + "' has shape " + ad::shape_str(shape) + ", expected " +
                      ad::shape_str(e.tensor.shape()));
    }
    auto dst = ad::Tensor(e.tensor).values_mut();
    if (!is.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(dst.size() * sizeof(double)))) {
      throw DataError("checkpoint truncated in tensor '" + name + "'");
    }
  }
  if (is.peek() != std::char_traits<char>::eof()) throw DataError("checkpoint has trailing bytes");
  return out;
}

void copy_weights(const Detector& from, Detector& to) {
  const auto src = from.params();
  const auto dst = to.params();
  if (src.entries().size() != dst.entries().size()) throw std::invalid_argument("copy_weights: layouts differ");
  for (std::size_t i = 0; i < src.entries().size(); ++i) {
    const auto& a = src.entries()[i];
    const auto& b = dst.entries()[i];
    if (a.tensor.shape() != b.tensor.shape()) throw std::invalid_argument("copy_weights: shape mismatch at " + a.name);
    auto out = ad::Tensor(b.tensor).values_mut();
    const auto in = a.tensor.values();
    std::copy(in.begin(), in.end(), out.begin());
  }
}

}  // namespace transrad
