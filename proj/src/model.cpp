#include "bft/model.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "bft/errors.hpp"
#include "bft/ops.hpp"
#include "bft/random.hpp"

namespace bft {

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("model config: " + what);
  };
  require(vocab_size > 0, "vocab_size must be positive");
  require(context_length >= 2, "context_length must be >= 2");
  require(embed_dim > 0, "embed_dim must be positive");
  require(layers > 0, "layers must be positive");
  require(heads > 0, "heads must be positive");
  require(embed_dim % heads == 0, "embed_dim must be divisible by heads");
}

Index ModelParams::parameter_count() const {
  Index total = 0;
  for (const auto& t : tensors) total += t.values.size();
  return total;
}

std::uint64_t ModelParams::checksum() const {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (const auto& t : tensors) {
    for (Index i = 0; i < t.values.size(); ++i) {
      std::uint64_t bits = std::bit_cast<std::uint64_t>(t.values(i));
      for (int byte = 0; byte < 8; ++byte) {
        hash ^= (bits >> (8 * byte)) & 0xffU;
        hash *= 0x100000001b3ULL;
      }
    }
  }
  return hash;
}

const NamedTensor& ModelParams::at(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw ContractError("no parameter named " + name);
}

ModelParams init_model(const ModelConfig& config) {
  config.validate();
  const Index d = config.embed_dim, v = config.vocab_size, ff = 4 * config.embed_dim;
  Rng rng(config.seed);
  ModelParams params{config, {}};

  auto normal = [&](std::string name, Shape shape) {
    Vector values(numel(shape));
    for (Index i = 0; i < values.size(); ++i) values(i) = 0.02 * rng.normal();
    params.tensors.push_back({std::move(name), std::move(shape), std::move(values)});
  };
  auto fill = [&](std::string name, Index n, double value) {
    params.tensors.push_back({std::move(name), {n}, Vector::Constant(n, value)});
  };

  normal("tok_emb", {v, d});
  normal("pos_emb", {config.context_length, d});
  for (Index l = 0; l < config.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    fill(p + "ln1.gamma", d, 1.0);
    fill(p + "ln1.beta", d, 0.0);
    for (const char* proj : {"q", "k", "v", "o"}) {
      normal(p + "attn.w" + proj, {d, d});
      fill(p + "attn.b" + proj, d, 0.0);
    }
    fill(p + "ln2.gamma", d, 1.0);
    fill(p + "ln2.beta", d, 0.0);
    normal(p + "mlp.w1", {d, ff});
    fill(p + "mlp.b1", ff, 0.0);
    normal(p + "mlp.w2", {ff, d});
    fill(p + "mlp.b2", d, 0.0);
  }
  fill("ln_f.gamma", d, 1.0);
  fill("ln_f.beta", d, 0.0);
  normal("head.w", {d, v});
  return params;
}

ModelOutput forward(Graph& graph, const ModelParams& params, const TokenGrid& inputs,
                    bool track_gradients) {
  std::vector<Tensor> leaves;
  leaves.reserve(params.tensors.size());
  for (const auto& t : params.tensors) leaves.push_back(graph.leaf(t.shape, t.values, track_gradients));
  Tensor logits = forward(params.config, leaves, inputs);
  return {std::move(logits), std::move(leaves)};
}

Tensor forward(const ModelConfig& cfg, std::span<const Tensor> weights, const TokenGrid& inputs) {
  const Index batch = inputs.rows(), steps = inputs.cols();
  if (batch < 1 || steps < 1) throw ContractError("forward: empty batch");
  if (steps > cfg.context_length) {
    throw ContractError("forward: sequence length " + std::to_string(steps) +
                        " exceeds context length " + std::to_string(cfg.context_length));
  }
  const std::size_t expected = 5 + 16 * static_cast<std::size_t>(cfg.layers);
  if (weights.size() != expected) {
    throw ContractError("forward: expected " + std::to_string(expected) + " weight tensors, got " +
                        std::to_string(weights.size()));
  }
  std::size_t next = 0;
  auto take = [&]() -> const Tensor& { return weights[next++]; };

  TokenGrid positions(batch, steps);
  for (Index b = 0; b < batch; ++b)
    for (Index t = 0; t < steps; ++t) positions(b, t) = static_cast<std::int32_t>(t);

  const Tensor& tok_emb = take();
  const Tensor& pos_emb = take();
  Tensor x = add(embedding(tok_emb, inputs), embedding(pos_emb, positions));

  auto linear = [](const Tensor& in, const Tensor& w, const Tensor& b) {
    return add_bias(matmul(in, w), b);
  };
  for (Index l = 0; l < cfg.layers; ++l) {
    const Tensor& g1 = take();
    const Tensor& b1 = take();
    const Tensor& wq = take();
    const Tensor& bq = take();
    const Tensor& wk = take();
    const Tensor& bk = take();
    const Tensor& wv = take();
    const Tensor& bv = take();
    const Tensor& wo = take();
    const Tensor& bo = take();
    const Tensor& g2 = take();
    const Tensor& b2 = take();
    const Tensor& w1 = take();
    const Tensor& c1 = take();
    const Tensor& w2 = take();
    const Tensor& c2 = take();

    const Tensor h = layer_norm(x, g1, b1);
    const Tensor attended = causal_attention(linear(h, wq, bq), linear(h, wk, bk),
                                             linear(h, wv, bv), batch, cfg.heads);
    x = add(x, linear(attended, wo, bo));
    const Tensor h2 = layer_norm(x, g2, b2);
    x = add(x, linear(gelu(linear(h2, w1, c1)), w2, c2));
  }
  const Tensor& gf = take();
  const Tensor& bf = take();
  const Tensor& head = take();
  return reshape(matmul(layer_norm(x, gf, bf), head), {batch, steps, cfg.vocab_size});
}

namespace binary_io {

void write_u64(std::ostream& out, std::uint64_t v) {
  std::array<char, 8> bytes;
  for (int i = 0; i < 8; ++i) bytes[static_cast<std::size_t>(i)] = static_cast<char>((v >> (8 * i)) & 0xffU);
  out.write(bytes.data(), 8);
}

void write_f64(std::ostream& out, double v) { write_u64(out, std::bit_cast<std::uint64_t>(v)); }

std::uint64_t read_u64(std::istream& in) {
  std::array<unsigned char, 8> bytes{};
  in.read(reinterpret_cast<char*>(bytes.data()), 8);
  if (!in) throw ParseError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | bytes[static_cast<std::size_t>(i)];
  return v;
}

double read_f64(std::istream& in) { return std::bit_cast<double>(read_u64(in)); }

void write_shaped(std::ostream& out, const Shape& shape, const Vector& values) {
  write_u64(out, shape.size());
  for (Index dim : shape) write_u64(out, static_cast<std::uint64_t>(dim));
  for (Index i = 0; i < values.size(); ++i) write_f64(out, values(i));
}

void read_shaped(std::istream& in, Shape& shape, Vector& values) {
  const std::uint64_t rank = read_u64(in);
  if (rank > 8) throw ParseError("checkpoint: implausible tensor rank " + std::to_string(rank));
  shape.assign(rank, 0);
  for (auto& dim : shape) dim = static_cast<Index>(read_u64(in));
  values.resize(numel(shape));
  for (Index i = 0; i < values.size(); ++i) values(i) = read_f64(in);
}

}  // namespace binary_io

namespace {
constexpr char kModelMagic[8] = {'B', 'F', 'T', 'C', 'K', 'P', 'T', '1'};
}

void write_model(std::ostream& out, const ModelParams& params) {
  using namespace binary_io;
  const ModelConfig& c = params.config;
  out.write(kModelMagic, 8);
  for (Index field : {c.vocab_size, c.context_length, c.embed_dim, c.layers, c.heads})
    write_u64(out, static_cast<std::uint64_t>(field));
  write_u64(out, c.seed);
  write_u64(out, params.tensors.size());
  for (const auto& t : params.tensors) write_shaped(out, t.shape, t.values);
}

ModelParams read_model(std::istream& in) {
  using namespace binary_io;
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kModelMagic, 8) != 0) throw ParseError("not a BFTCKPT1 checkpoint");
  ModelConfig c;
  c.vocab_size = static_cast<Index>(read_u64(in));
  c.context_length = static_cast<Index>(read_u64(in));
  c.embed_dim = static_cast<Index>(read_u64(in));
  c.layers = static_cast<Index>(read_u64(in));
  c.heads = static_cast<Index>(read_u64(in));
  c.seed = read_u64(in);
  c.validate();

  // Names and expected shapes come from the architecture itself.
  ModelParams params = init_model(c);
  const std::uint64_t count = read_u64(in);
  if (count != params.tensors.size()) {
    throw ParseError("checkpoint holds " + std::to_string(count) + " tensors, architecture needs " +
                     std::to_string(params.tensors.size()));
  }
  for (auto& t : params.tensors) {
    Shape shape;
    read_shaped(in, shape, t.values);
    if (shape != t.shape) {
      throw ParseError("checkpoint tensor " + t.name + " has shape " + to_string(shape) +
                       ", expected " + to_string(t.shape));
    }
  }
  return params;
}

void save_model(const std::string& path, const ModelParams& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  write_model(out, params);
}

ModelParams load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint " + path);
  return read_model(in);
}

}  // namespace bft
