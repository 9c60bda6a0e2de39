#include "graftkit/persistence.hpp"

#include <openssl/evp.h>
#include <unistd.h>

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <sstream>

#include "graftkit/graft.hpp"

namespace graftkit {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- JSON reader

JsonReader::JsonReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
  if (!j_.is_object()) throw ConfigError(path_, "expected an object");
}

bool JsonReader::has(std::string_view key) const { return j_.contains(std::string(key)); }

const json* JsonReader::child(std::string_view key) {
  if (!has(key)) return nullptr;
  used_.emplace_back(key);
  return &j_.at(std::string(key));
}

std::string JsonReader::child_path(std::string_view key) const {
  return path_.empty() ? std::string(key) : path_ + "." + std::string(key);
}

void JsonReader::finish() const {
  for (const auto& [key, value] : j_.items()) {
    if (std::find(used_.begin(), used_.end(), key) == used_.end()) throw ConfigError(child_path(key), "unknown key");
  }
}

// ---------------------------------------------------------------- container

namespace {

constexpr std::uint8_t kMagic[4] = {'G', 'R', 'F', 'T'};

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  std::uint8_t u8() { return take(1)[0]; }
  std::uint32_t u32() {
    const auto b = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[static_cast<std::size_t>(i)]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    const auto b = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[static_cast<std::size_t>(i)]) << (8 * i);
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    if (n > in_.size() - pos_) {
      throw TruncatedFileError("container truncated: needed " + std::to_string(n) + " bytes at offset " +
                               std::to_string(pos_) + ", have " + std::to_string(in_.size() - pos_));
    }
    const auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

template <class T, class U>
void put_values(Writer& w, std::span<const T> values) {
  for (T v : values) {
    const U bits = std::bit_cast<U>(v);
    if constexpr (sizeof(U) == 4) {
      w.u32(bits);
    } else {
      w.u64(bits);
    }
  }
}

}  // namespace

std::vector<std::uint8_t> encode_container(const std::vector<NamedTensor>& tensors) {
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (!t.defined()) throw std::invalid_argument("cannot save undefined tensor '" + name + "'");
    if (t.rank() > 255) throw std::invalid_argument("tensor '" + name + "' has too many dimensions");
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u8(static_cast<std::uint8_t>(t.dtype()));
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) w.u64(static_cast<std::uint64_t>(d));
    if (t.dtype() == DType::kF32) {
      put_values<float, std::uint32_t>(w, t.data<float>());
    } else {
      put_values<double, std::uint64_t>(w, t.data<double>());
    }
  }
  return w.take();
}

std::vector<NamedTensor> decode_container(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto magic = r.take(4);
  if (!std::equal(magic.begin(), magic.end(), kMagic)) throw BadMagicError("not a tensor container (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kFormatVersion) {
    throw FormatVersionError("container format version " + std::to_string(version) + ", expected " +
                             std::to_string(kFormatVersion));
  }
  const std::uint32_t count = r.u32();
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = r.u32();
    const auto nb = r.take(len);
    std::string name(nb.begin(), nb.end());
    const std::uint8_t code = r.u8();
    if (code != 1 && code != 2) throw PersistenceError("tensor '" + name + "' has unknown dtype code " + std::to_string(code));
    const std::uint8_t rank = r.u8();
    Shape shape;
    for (std::uint8_t k = 0; k < rank; ++k) shape.push_back(static_cast<std::int64_t>(r.u64()));
    const std::int64_t n = numel(shape);
    if (code == 1) {
      std::vector<float> v(static_cast<std::size_t>(n));
      for (auto& x : v) x = std::bit_cast<float>(r.u32());
      out.push_back({std::move(name), Tensor::from_storage(std::move(v), shape)});
    } else {
      std::vector<double> v(static_cast<std::size_t>(n));
      for (auto& x : v) x = std::bit_cast<double>(r.u64());
      out.push_back({std::move(name), Tensor::from_storage(std::move(v), shape)});
    }
  }
  if (!r.done()) throw PersistenceError("trailing bytes after the last tensor");
  return out;
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string s;
  for (unsigned int i = 0; i < len; ++i) {
    s.push_back(hex[md[i] >> 4]);
    s.push_back(hex[md[i] & 15]);
  }
  return s;
}

// ---------------------------------------------------------------- files

std::string_view to_string(ArtifactKind kind) {
  switch (kind) {
    case ArtifactKind::kCheckpoint: return "checkpoint";
    case ArtifactKind::kActivations: return "activations";
    case ArtifactKind::kDataset: return "dataset";
    case ArtifactKind::kReport: return "report";
  }
  return "?";
}

ArtifactKind parse_artifact_kind(std::string_view name) {
  for (auto k : {ArtifactKind::kCheckpoint, ArtifactKind::kActivations, ArtifactKind::kDataset, ArtifactKind::kReport}) {
    if (to_string(k) == name) return k;
  }
  throw ArtifactKindError("unknown artifact kind '" + std::string(name) + "'");
}

const Tensor& Artifact::tensor(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.value;
  }
  throw PersistenceError("artifact has no tensor '" + std::string(name) + "'");
}

fs::path manifest_path(const fs::path& container) { return fs::path(container.string() + ".json"); }

namespace {

void write_bytes_atomic(const fs::path& path, const void* data, std::size_t size) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw PersistenceError("cannot open " + tmp.string() + " for writing");
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    out.flush();
    if (!out) throw PersistenceError("write to " + tmp.string() + " failed");
  }
  fs::rename(tmp, path);
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PersistenceError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

void write_text_file(const fs::path& path, std::string_view text) { write_bytes_atomic(path, text.data(), text.size()); }

std::string read_text_file(const fs::path& path) {
  const auto b = read_bytes(path);
  return {b.begin(), b.end()};
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_artifact(const fs::path& path, ArtifactKind kind, const std::vector<NamedTensor>& tensors,
                    const json& meta) {
  const auto bytes = encode_container(tensors);
  json m = meta.is_object() ? meta : json::object();
  m["kind"] = to_string(kind);
  m["format_version"] = kFormatVersion;
  m["content_sha256"] = sha256_hex(bytes);
  m["content_bytes"] = bytes.size();
  m["created"] = utc_timestamp();
  write_bytes_atomic(path, bytes.data(), bytes.size());
  write_text_file(manifest_path(path), m.dump(2) + "\n");
}

Artifact read_artifact(const fs::path& path, ArtifactKind expected) {
  Artifact a;
  const fs::path mp = manifest_path(path);
  try {
    a.manifest = json::parse(read_text_file(mp));
  } catch (const json::parse_error& e) {
    throw PersistenceError("manifest " + mp.string() + " is not valid JSON: " + e.what());
  }
  if (!a.manifest.is_object() || !a.manifest.contains("kind") || !a.manifest["kind"].is_string()) {
    throw PersistenceError("manifest " + mp.string() + " has no kind");
  }
  const auto kind = parse_artifact_kind(a.manifest["kind"].get<std::string>());
  if (kind != expected) {
    throw ArtifactKindError(path.string() + " holds " + std::string(to_string(kind)) + ", expected " +
                            std::string(to_string(expected)));
  }
  const auto version = a.manifest.value("format_version", 0u);
  if (version != kFormatVersion) {
    throw FormatVersionError("manifest format version " + std::to_string(version) + ", expected " +
                             std::to_string(kFormatVersion));
  }
  const auto bytes = read_bytes(path);
  const auto want = a.manifest.value("content_bytes", std::uint64_t{0});
  if (bytes.size() < want) {
    throw TruncatedFileError(path.string() + " is " + std::to_string(bytes.size()) + " bytes, manifest says " +
                             std::to_string(want));
  }
  if (sha256_hex(bytes) != a.manifest.value("content_sha256", std::string())) {
    throw HashMismatchError("content hash of " + path.string() + " does not match its manifest");
  }
  a.tensors = decode_container(bytes);
  return a;
}

// ---------------------------------------------------------------- configs

json to_json(const DiTConfig& c) {
  return json{{"depth", c.depth},         {"width", c.width},
              {"heads", c.heads},         {"patch", c.patch},
              {"image_size", c.image_size}, {"channels", c.channels},
              {"num_classes", c.num_classes}, {"mlp_ratio", c.mlp_ratio},
              {"cfg_dropout", c.cfg_dropout}, {"seed", c.seed},
              {"freq_dim", c.freq_dim},   {"timesteps", c.timesteps},
              {"learn_sigma", c.learn_sigma}};
}

DiTConfig dit_config_from_json(const json& j, const std::string& path) {
  if (j.is_string()) {
    const auto name = j.get<std::string>();
    if (name == "xs") return DiTConfig::xs();
    if (name == "xl2") return DiTConfig::xl2();
    throw ConfigError(path, "unknown model profile '" + name + "' (expected xs or xl2)");
  }
  JsonReader r(j, path);
  DiTConfig c = DiTConfig::xs();
  if (r.has("profile")) c = dit_config_from_json(r.require<std::string>("profile"), r.child_path("profile"));
  c.depth = r.get("depth", c.depth);
  c.width = r.get("width", c.width);
  c.heads = r.get("heads", c.heads);
  c.patch = r.get("patch", c.patch);
  c.image_size = r.get("image_size", c.image_size);
  c.channels = r.get("channels", c.channels);
  c.num_classes = r.get("num_classes", c.num_classes);
  c.mlp_ratio = r.get("mlp_ratio", c.mlp_ratio);
  c.cfg_dropout = r.get("cfg_dropout", c.cfg_dropout);
  c.seed = r.get("seed", c.seed);
  c.freq_dim = r.get("freq_dim", c.freq_dim);
  c.timesteps = r.get("timesteps", c.timesteps);
  c.learn_sigma = r.get("learn_sigma", c.learn_sigma);
  r.finish();
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path, e.what());
  }
  return c;
}

json to_json(const OperatorConfig& c) {
  return json{{"kind", to_string(c.kind)}, {"width", c.width},   {"heads", c.heads},   {"kernel", c.kernel},
              {"window", c.window},        {"ratio", c.ratio},   {"causal", c.causal}, {"seed", c.seed}};
}

OperatorConfig operator_config_from_json(const json& j, const std::string& path) {
  JsonReader r(j, path);
  OperatorConfig c;
  try {
    c.kind = parse_operator_kind(r.require<std::string>("kind"));
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(r.child_path("kind"), e.what());
  }
  if (c.kind == OperatorKind::kHyenaXMlp) c.ratio = 2.0;
  c.width = r.get("width", c.width);
  c.heads = r.get("heads", c.heads);
  c.kernel = r.get("kernel", c.kernel);
  c.window = r.get("window", c.window);
  c.ratio = r.get("ratio", c.ratio);
  c.causal = r.get("causal", c.causal);
  c.seed = r.get("seed", c.seed);
  r.finish();
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path, e.what());
  }
  return c;
}

json to_json(const GraftPlan& plan) {
  json targets = json::array();
  for (const auto& t : plan.targets) {
    targets.push_back({{"layer", t.layer}, {"slot", to_string(t.slot)}, {"replacement", to_json(t.replacement)}});
  }
  return json{{"strategy", to_string(plan.strategy)}, {"ratio", plan.ratio}, {"depth", plan.depth},
              {"slot", to_string(plan.slot)},         {"layers", plan.layers()}, {"targets", targets}};
}

GraftPlan graft_plan_from_json(const json& j, const std::string& path) {
  JsonReader r(j, path);
  GraftPlan plan;
  auto parsed = [&](std::string_view key, auto fn) {
    try {
      return fn(r.require<std::string>(key));
    } catch (const ConfigError&) {
      throw;
    } catch (const std::invalid_argument& e) {
      throw ConfigError(r.child_path(key), e.what());
    }
  };
  plan.strategy = parsed("strategy", [](const std::string& s) { return parse_strategy(s); });
  plan.slot = parsed("slot", [](const std::string& s) { return parse_slot(s); });
  plan.ratio = r.require<double>("ratio");
  plan.depth = r.require<std::int64_t>("depth");
  if (plan.depth <= 0) throw ConfigError(r.child_path("depth"), "must be positive");
  if (plan.ratio < 0 || plan.ratio > 1) throw ConfigError(r.child_path("ratio"), "must lie in [0, 1]");
  const std::string tpath = r.child_path("targets");
  const json* targets = r.child("targets");
  if (targets == nullptr) throw ConfigError(tpath, "missing required key");
  if (!targets->is_array()) throw ConfigError(tpath, "expected an array");
  for (std::size_t i = 0; i < targets->size(); ++i) {
    const std::string where = tpath + "." + std::to_string(i);
    JsonReader tr((*targets)[i], where);
    GraftTarget t{tr.require<int>("layer"), plan.slot, OperatorConfig{}};
    try {
      t.slot = parse_slot(tr.get<std::string>("slot", std::string(to_string(plan.slot))));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(tr.child_path("slot"), e.what());
    }
    const json* rep = tr.child("replacement");
    if (rep == nullptr) throw ConfigError(tr.child_path("replacement"), "missing required key");
    t.replacement = operator_config_from_json(*rep, tr.child_path("replacement"));
    tr.finish();
    if (t.layer < 0 || t.layer >= plan.depth) throw ConfigError(where + ".layer", "outside [0, depth)");
    if (!plan.targets.empty() && t.layer <= plan.targets.back().layer) {
      throw ConfigError(where + ".layer", "targets must be in strictly ascending layer order");
    }
    if (t.slot != plan.slot) throw ConfigError(where + ".slot", "differs from the plan slot");
    plan.targets.push_back(t);
  }
  if (const json* layers = r.child("layers")) {
    std::vector<int> want;
    try {
      want = layers->get<std::vector<int>>();
    } catch (const json::exception&) {
      throw ConfigError(r.child_path("layers"), "expected an array of integers");
    }
    if (want != plan.layers()) throw ConfigError(r.child_path("layers"), "does not match the targets");
  }
  r.finish();
  return plan;
}

namespace {

DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::kF32;
  if (s == "f64") return DType::kF64;
  throw PersistenceError("unknown dtype '" + s + "'");
}

std::vector<NamedTensor> as_named(const ParameterList& params) {
  std::vector<NamedTensor> out;
  for (const auto& p : params) out.push_back({p.name, p.value});
  return out;
}

Tensor int_tensor(const std::vector<std::int64_t>& v) {
  std::vector<double> d(v.begin(), v.end());
  return Tensor::from_values(d, {static_cast<std::int64_t>(v.size())}, DType::kF64);
}

std::vector<std::int64_t> int_values(const Tensor& t) {
  std::vector<std::int64_t> out;
  for (double v : t.to_vector()) out.push_back(static_cast<std::int64_t>(v));
  return out;
}

}  // namespace

std::string fingerprint(const ModelGraph& g) { return sha256_hex(encode_container(as_named(g.named_parameters()))); }

void save_checkpoint(const ModelGraph& g, const fs::path& path, const json& extra) {
  json blocks = json::array();
  for (const auto& b : g.blocks()) blocks.push_back({{"mixer", to_json(b.mixer.config())}, {"mlp", to_json(b.mlp.config())}});
  json entries = json::array();
  for (const auto& e : g.entries()) entries.push_back(e.blocks);
  json meta = extra.is_object() ? extra : json::object();
  meta["model"] = to_json(g.config());
  meta["dtype"] = dtype_name(g.dtype());
  meta["depth"] = g.config().depth;
  meta["effective_depth"] = g.effective_depth();
  meta["blocks"] = blocks;
  meta["entries"] = entries;
  meta["param_count"] = g.param_count();
  write_artifact(path, ArtifactKind::kCheckpoint, as_named(g.named_parameters()), meta);
}

ModelGraph load_checkpoint(const fs::path& path) {
  const Artifact a = read_artifact(path, ArtifactKind::kCheckpoint);
  const json& m = a.manifest;
  ModelGraph g(dit_config_from_json(m.at("model"), "model"), parse_dtype(m.at("dtype").get<std::string>()));
  const auto& blocks = m.at("blocks");
  if (blocks.size() != g.blocks().size()) throw PersistenceError("checkpoint block count does not match its config");
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string where = "blocks." + std::to_string(i);
    g.blocks()[i].mixer = TokenMixer(operator_config_from_json(blocks[i].at("mixer"), where + ".mixer"), g.dtype());
    g.blocks()[i].mlp = TokenMixer(operator_config_from_json(blocks[i].at("mlp"), where + ".mlp"), g.dtype());
  }
  bool pairs = false;
  for (const auto& e : m.at("entries")) pairs = pairs || e.size() == 2;
  if (pairs) g = parallelize_pairs(g);
  std::vector<std::vector<int>> want;
  for (const auto& e : m.at("entries")) want.push_back(e.get<std::vector<int>>());
  if (want.size() != g.entries().size()) throw PersistenceError("checkpoint entry structure is not supported");
  for (std::size_t i = 0; i < want.size(); ++i) {
    if (want[i] != g.entries()[i].blocks) throw PersistenceError("checkpoint entry structure is not supported");
  }

  auto params = g.named_parameters();
  if (params.size() != a.tensors.size()) {
    throw PersistenceError("checkpoint holds " + std::to_string(a.tensors.size()) + " tensors, model expects " +
                           std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& src = a.tensors[i];
    if (src.name != params[i].name) {
      throw PersistenceError("checkpoint tensor '" + src.name + "' where '" + params[i].name + "' was expected");
    }
    if (src.value.shape() != params[i].value.shape() || src.value.dtype() != params[i].value.dtype()) {
      throw PersistenceError("checkpoint tensor '" + src.name + "' has shape " + to_string(src.value.shape()) +
                             ", expected " + to_string(params[i].value.shape()));
    }
    params[i].value.assign(src.value);
  }
  return g;
}

void save_activations(const ActivationDataset& acts, const fs::path& path) {
  if (acts.count() == 0 || !acts.inputs.defined()) throw std::invalid_argument("refusing to save an empty activation set");
  std::vector<NamedTensor> tensors{{"inputs", acts.inputs}, {"targets", acts.targets},
                                   {"t", int_tensor(acts.t)}, {"c", int_tensor(acts.c)}};
  if (acts.gates.defined()) tensors.push_back({"gates", acts.gates});
  const json meta{{"layer", acts.layer},
                  {"slot", to_string(acts.slot)},
                  {"count", acts.count()},
                  {"modulation_aware", acts.modulation_aware},
                  {"teacher_fingerprint", acts.teacher_fingerprint}};
  write_artifact(path, ArtifactKind::kActivations, tensors, meta);
}

ActivationDataset load_activations(const fs::path& path) {
  const Artifact a = read_artifact(path, ArtifactKind::kActivations);
  ActivationDataset d;
  d.layer = a.manifest.at("layer").get<int>();
  d.slot = parse_slot(a.manifest.at("slot").get<std::string>());
  d.modulation_aware = a.manifest.at("modulation_aware").get<bool>();
  d.teacher_fingerprint = a.manifest.at("teacher_fingerprint").get<std::string>();
  d.inputs = a.tensor("inputs");
  d.targets = a.tensor("targets");
  d.t = int_values(a.tensor("t"));
  d.c = int_values(a.tensor("c"));
  if (d.modulation_aware) d.gates = a.tensor("gates");
  if (d.count() != a.manifest.at("count").get<std::int64_t>()) throw PersistenceError("activation record count mismatch");
  return d;
}

void save_operators(const OperatorBundle& bundle, const fs::path& path, const json& extra) {
  if (bundle.ops.size() != bundle.plan.targets.size()) {
    throw std::invalid_argument("operator bundle holds " + std::to_string(bundle.ops.size()) + " operators for " +
                                std::to_string(bundle.plan.targets.size()) + " targets");
  }
  std::vector<NamedTensor> tensors;
  json ops = json::array();
  for (std::size_t i = 0; i < bundle.ops.size(); ++i) {
    const auto& op = bundle.ops[i];
    ops.push_back({{"config", to_json(op.config())}, {"dtype", dtype_name(op.dtype())}});
    for (const auto& p : op.parameters()) tensors.push_back({std::to_string(i) + "." + p.name, p.value});
  }
  json meta = extra.is_object() ? extra : json::object();
  meta["content"] = "operators";
  meta["plan"] = to_json(bundle.plan);
  meta["operators"] = ops;
  write_artifact(path, ArtifactKind::kReport, tensors, meta);
}

OperatorBundle load_operators(const fs::path& path) {
  const Artifact a = read_artifact(path, ArtifactKind::kReport);
  if (a.manifest.value("content", "") != "operators") throw ArtifactKindError(path.string() + " is not an operator bundle");
  OperatorBundle b;
  b.plan = graft_plan_from_json(a.manifest.at("plan"), "plan");
  const auto& ops = a.manifest.at("operators");
  if (ops.size() != b.plan.targets.size()) throw PersistenceError("operator bundle does not match its plan");
  std::size_t next = 0;
  for (std::size_t i = 0; i < ops.size(); ++i) {
    TokenMixer op(operator_config_from_json(ops[i].at("config"), "operators." + std::to_string(i) + ".config"),
                  parse_dtype(ops[i].at("dtype").get<std::string>()));
    for (auto& p : op.parameters()) {
      if (next >= a.tensors.size()) throw PersistenceError("operator bundle is missing tensors");
      const auto& src = a.tensors[next++];
      const std::string want = std::to_string(i) + "." + p.name;
      if (src.name != want || src.value.shape() != p.value.shape() || src.value.dtype() != p.value.dtype()) {
        throw PersistenceError("operator bundle tensor '" + src.name + "' where '" + want + "' was expected");
      }
      p.value.assign(src.value);
    }
    b.ops.push_back(std::move(op));
  }
  if (next != a.tensors.size()) throw PersistenceError("operator bundle has extra tensors");
  return b;
}

void save_dataset(const BlobDataset& data, const fs::path& path) {
  std::vector<std::int64_t> classes(static_cast<std::size_t>(data.num_classes));
  for (std::size_t k = 0; k < classes.size(); ++k) classes[k] = static_cast<std::int64_t>(k);
  const json meta{{"seed", data.seed},   {"size", data.size()},          {"classes", classes},
                  {"side", data.side},   {"noise_std", data.noise_std}};
  write_artifact(path, ArtifactKind::kDataset, {{"images", data.images}, {"labels", int_tensor(data.labels)}}, meta);
}

BlobDataset load_dataset(const fs::path& path) {
  const Artifact a = read_artifact(path, ArtifactKind::kDataset);
  BlobDataset d;
  d.seed = a.manifest.at("seed").get<std::uint64_t>();
  d.num_classes = static_cast<std::int64_t>(a.manifest.at("classes").size());
  d.side = a.manifest.at("side").get<std::int64_t>();
  d.noise_std = a.manifest.at("noise_std").get<double>();
  d.images = a.tensor("images");
  d.labels = int_values(a.tensor("labels"));
  if (d.size() != a.manifest.at("size").get<std::int64_t>()) throw PersistenceError("dataset size mismatch");
  return d;
}

}  // namespace graftkit
