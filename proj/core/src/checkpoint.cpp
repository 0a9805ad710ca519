#include <cstring>

#include "binary_io.hpp"
#include "uniseg/training.hpp"

namespace uniseg {

namespace {

constexpr char kMagicPrefix[] = "UCKPT";

using detail::ByteReader;
using detail::ByteWriter;

// Section framing: tag, u64 length, payload, u64 FNV-1a of the payload.
void put_section(ByteWriter& out, const std::string& tag, const ByteWriter& payload) {
  out.put_string(tag);
  out.put<std::uint64_t>(payload.bytes().size());
  out.put_bytes(payload.bytes().data(), payload.bytes().size());
  out.put<std::uint64_t>(detail::fnv1a(payload.bytes().data(), payload.bytes().size()));
}

ByteReader get_section(ByteReader& in, const std::string& tag) {
  const std::string got = in.get_string();
  if (got != tag) throw Error(ErrorCode::Parse, "checkpoint: expected section '" + tag + "', found '" + got + "'");
  const auto n = in.get<std::uint64_t>();
  if (n > in.remaining()) throw Error(ErrorCode::Parse, "checkpoint: truncated section '" + tag + "'");
  std::vector<unsigned char> payload(n);
  in.get_bytes(payload.data(), n);
  if (in.get<std::uint64_t>() != detail::fnv1a(payload.data(), payload.size())) {
    throw Error(ErrorCode::Parse, "checkpoint: checksum mismatch in section '" + tag + "'");
  }
  return ByteReader(std::move(payload));
}

void finish(const ByteReader& r, const std::string& tag) {
  if (!r.at_end()) throw Error(ErrorCode::Parse, "checkpoint: trailing bytes in section '" + tag + "'");
}

void put_moments(ByteWriter& w, const MomentBuffer& mb) {
  w.put_doubles(mb.m);
  w.put_doubles(mb.v);
  w.put<std::int64_t>(mb.step);
}

MomentBuffer get_moments(ByteReader& r) {
  MomentBuffer mb;
  mb.m = r.get_doubles();
  mb.v = r.get_doubles();
  mb.step = r.get<std::int64_t>();
  return mb;
}

}  // namespace

std::vector<unsigned char> serialize_checkpoint(const ModelState& model) {
  ByteWriter out;
  out.put_bytes(kMagicPrefix, 5);
  out.put<char>(static_cast<char>('0' + kCheckpointVersion));

  {
    ByteWriter s;
    s.put<std::uint64_t>(model.taxonomy.hash());
    s.put_string(model.taxonomy.serialize());
    put_section(out, "taxonomy", s);
  }
  {
    ByteWriter s;
    const BackboneConfig& bc = model.config.backbone;
    s.put<std::uint64_t>(bc.channels.size());
    for (int c : bc.channels) s.put<std::int32_t>(c);
    s.put<std::int32_t>(bc.decoder_channels);
    s.put<std::int32_t>(bc.in_channels);
    s.put<std::uint8_t>(model.config.detach_global ? 1 : 0);
    s.put_string(model.config_echo);
    put_section(out, "config", s);
  }
  {
    ByteWriter s;
    s.put<std::int32_t>(model.embeddings.dim());
    s.put_string(model.embeddings.source());
    const std::vector<int> classes = model.embeddings.classes();
    s.put<std::uint64_t>(classes.size());
    for (int cls : classes) {
      s.put<std::int32_t>(cls);
      s.put_doubles(model.embeddings.get(cls));
    }
    put_section(out, "embeddings", s);
  }
  {
    ByteWriter s;
    s.put<std::uint64_t>(model.backbone.convs.size());
    for (const auto& c : model.backbone.convs) {
      s.put<std::int32_t>(c.in_channels);
      s.put<std::int32_t>(c.out_channels);
      s.put<std::int32_t>(c.kernel);
      s.put<std::int32_t>(c.stride);
      s.put<std::int32_t>(c.pad);
      s.put_doubles(c.weight);
      s.put_doubles(c.bias);
    }
    put_section(out, "backbone", s);
  }
  {
    ByteWriter s;
    s.put<std::uint64_t>(model.lpg.size());
    for (const auto& [cls, map] : model.lpg) {
      s.put<std::int32_t>(cls);
      s.put<std::int32_t>(map.out_dim);
      s.put<std::int32_t>(map.text_dim);
      s.put<std::int32_t>(map.image_dim);
      s.put_doubles(map.weight);
      s.put_doubles(map.bias);
    }
    put_section(out, "lpg", s);
  }
  {
    ByteWriter s;
    put_moments(s, model.optimizer.backbone);
    s.put<std::uint64_t>(model.optimizer.lpg.size());
    for (const auto& [cls, mb] : model.optimizer.lpg) {
      s.put<std::int32_t>(cls);
      put_moments(s, mb);
    }
    put_section(out, "adamw", s);
  }
  {
    ByteWriter s;
    s.put_string(serialize_rng(model.rng));
    s.put<std::int64_t>(model.global_step);
    put_section(out, "rng", s);
  }
  return std::move(out.bytes());
}

void save_checkpoint(const ModelState& model, const std::filesystem::path& path) {
  detail::write_file_bytes(path, serialize_checkpoint(model));
}

ModelState deserialize_checkpoint(std::vector<unsigned char> bytes, const Taxonomy* expected) {
  ByteReader in(std::move(bytes));
  char magic[6];
  in.get_bytes(magic, 6);
  if (std::memcmp(magic, kMagicPrefix, 5) != 0) throw Error(ErrorCode::Parse, "not a checkpoint (bad magic)");
  if (magic[5] != static_cast<char>('0' + kCheckpointVersion)) {
    throw Error(ErrorCode::CheckpointVersion, std::string("unsupported checkpoint version '") + magic[5] + "', expected " +
                                                  std::to_string(kCheckpointVersion));
  }

  ModelState m;
  {
    ByteReader s = get_section(in, "taxonomy");
    const auto hash = s.get<std::uint64_t>();
    m.taxonomy = parse_template(s.get_string(), "<checkpoint>");
    finish(s, "taxonomy");
    if (m.taxonomy.hash() != hash) throw Error(ErrorCode::Parse, "checkpoint: taxonomy hash does not match its text");
    if (expected && expected->hash() != hash) {
      throw Error(ErrorCode::TaxonomyMismatch, "checkpoint taxonomy differs from the supplied template");
    }
  }
  {
    ByteReader s = get_section(in, "config");
    BackboneConfig& bc = m.config.backbone;
    bc.channels.resize(s.get<std::uint64_t>());
    for (int& c : bc.channels) c = s.get<std::int32_t>();
    bc.decoder_channels = s.get<std::int32_t>();
    bc.in_channels = s.get<std::int32_t>();
    m.config.detach_global = s.get<std::uint8_t>() != 0;
    m.config_echo = s.get_string();
    finish(s, "config");
    bc.validate();
  }
  {
    ByteReader s = get_section(in, "embeddings");
    const int dim = s.get<std::int32_t>();
    m.embeddings = EmbeddingStore(dim, s.get_string());
    const auto n = s.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < n; ++i) {
      const int cls = s.get<std::int32_t>();
      m.embeddings.set(cls, s.get_doubles());
    }
    finish(s, "embeddings");
  }
  {
    ByteReader s = get_section(in, "backbone");
    m.backbone.config = m.config.backbone;
    const auto n = s.get<std::uint64_t>();
    const BackboneParams shape = BackboneParams::create(m.config.backbone);
    if (n != shape.convs.size()) throw Error(ErrorCode::Parse, "checkpoint: backbone layer count mismatch");
    for (std::uint64_t l = 0; l < n; ++l) {
      nn::Conv3d c;
      c.in_channels = s.get<std::int32_t>();
      c.out_channels = s.get<std::int32_t>();
      c.kernel = s.get<std::int32_t>();
      c.stride = s.get<std::int32_t>();
      c.pad = s.get<std::int32_t>();
      c.weight = s.get_doubles();
      c.bias = s.get_doubles();
      const nn::Conv3d& want = shape.convs[l];
      if (c.in_channels != want.in_channels || c.out_channels != want.out_channels || c.kernel != want.kernel ||
          c.stride != want.stride || c.pad != want.pad || c.weight.size() != want.weight.size() ||
          c.bias.size() != want.bias.size()) {
        throw Error(ErrorCode::Parse, "checkpoint: backbone layer " + std::to_string(l) + " has the wrong shape");
      }
      m.backbone.convs.push_back(std::move(c));
    }
    finish(s, "backbone");
  }
  {
    ByteReader s = get_section(in, "lpg");
    const auto n = s.get<std::uint64_t>();
    const auto out_dim = static_cast<int>(m.head_layout().size());
    for (std::uint64_t i = 0; i < n; ++i) {
      const int cls = s.get<std::int32_t>();
      LpgMap map;
      map.out_dim = s.get<std::int32_t>();
      map.text_dim = s.get<std::int32_t>();
      map.image_dim = s.get<std::int32_t>();
      map.weight = s.get_doubles();
      map.bias = s.get_doubles();
      if (map.out_dim != out_dim || map.text_dim != m.embeddings.dim() ||
          map.image_dim != m.config.backbone.bottleneck_channels() ||
          map.weight.size() != static_cast<std::size_t>(map.out_dim) * map.in_dim() ||
          map.bias.size() != static_cast<std::size_t>(map.out_dim)) {
        throw Error(ErrorCode::Parse, "checkpoint: LPG map for class " + std::to_string(cls) + " has the wrong shape");
      }
      if (!m.taxonomy.contains(cls)) {
        throw Error(ErrorCode::Parse, "checkpoint: LPG map for class " + std::to_string(cls) + " not in taxonomy");
      }
      m.lpg.emplace(cls, std::move(map));
    }
    finish(s, "lpg");
  }
  {
    ByteReader s = get_section(in, "adamw");
    m.optimizer.backbone = get_moments(s);
    const auto n = s.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < n; ++i) {
      const int cls = s.get<std::int32_t>();
      m.optimizer.lpg.emplace(cls, get_moments(s));
    }
    finish(s, "adamw");
  }
  {
    ByteReader s = get_section(in, "rng");
    m.rng = deserialize_rng(s.get_string());
    m.global_step = s.get<std::int64_t>();
    finish(s, "rng");
  }
  if (!in.at_end()) throw Error(ErrorCode::Parse, "checkpoint: trailing bytes");
  return m;
}

ModelState load_checkpoint(const std::filesystem::path& path, const Taxonomy* expected) {
  return deserialize_checkpoint(detail::read_file_bytes(path), expected);
}

}  // namespace uniseg
