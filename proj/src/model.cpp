#include "feddva/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace feddva {

using ad::Tensor;

namespace {

Tensor activate(Activation act, const Tensor& x) {
  return act == Activation::kRelu ? ad::relu(x) : ad::tanh(x);
}

Tensor copy_tensor(const Tensor& t) {
  std::vector<double> v(t.data().begin(), t.data().end());
  return t.requires_grad() ? Tensor::parameter(t.shape(), std::move(v))
                           : Tensor::constant(t.shape(), std::move(v));
}

Linear copy_linear(const Linear& l) { return {copy_tensor(l.weight), copy_tensor(l.bias)}; }

Mlp copy_mlp(const Mlp& m) {
  Mlp out;
  out.activation = m.activation;
  for (const auto& l : m.layers) out.layers.push_back(copy_linear(l));
  return out;
}

GaussianEncoder copy_encoder(const GaussianEncoder& e) {
  GaussianEncoder out{{}, copy_linear(e.mu_head), copy_linear(e.log_var_head), e.activation};
  for (const auto& l : e.trunk) out.trunk.push_back(copy_linear(l));
  return out;
}

void append(std::vector<Tensor>& dst, const std::vector<Tensor>& src) {
  dst.insert(dst.end(), src.begin(), src.end());
}

std::vector<std::size_t> parse_dims(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    out.push_back(std::stoul(item));
  }
  return out;
}

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_le(const std::vector<unsigned char>& buf, std::size_t offset, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(buf[offset + i]) << (8 * i);
  return v;
}

constexpr char kMagic[8] = {'F', 'E', 'D', 'D', 'V', 'A', 'C', 'K'};

}  // namespace

std::string to_string(Activation a) { return a == Activation::kRelu ? "relu" : "tanh"; }
std::string to_string(ModelVariant v) { return v == ModelVariant::kDual ? "dual" : "vanilla"; }
std::string to_string(ClassifierInput c) {
  switch (c) {
    case ClassifierInput::kBoth: return "both";
    case ClassifierInput::kZOnly: return "z";
    case ClassifierInput::kCOnly: return "c";
  }
  return "both";
}

std::size_t ArchitectureConfig::head_input() const {
  switch (classifier_input) {
    case ClassifierInput::kZOnly: return d_z;
    case ClassifierInput::kCOnly: return d_c;
    case ClassifierInput::kBoth: break;
  }
  return variant == ModelVariant::kDual ? d_z + d_c : d_z;
}

void ArchitectureConfig::validate() const {
  if (input_dim == 0) throw std::invalid_argument("architecture: input_dim must be positive");
  if (d_z == 0 || d_c == 0) throw std::invalid_argument("architecture: latent dims must be positive");
  for (auto h : hidden_dims) {
    if (h == 0) throw std::invalid_argument("architecture: hidden widths must be positive");
  }
  if (n_classes == 1) throw std::invalid_argument("architecture: n_classes must be 0 or >= 2");
  if (variant == ModelVariant::kVanilla && classifier_input == ClassifierInput::kCOnly && n_classes) {
    throw std::invalid_argument("architecture: vanilla variant has no c representation");
  }
}

std::string ArchitectureConfig::canonical_text() const {
  std::ostringstream os;
  os << "input_dim=" << input_dim << '\n';
  os << "hidden_dims=";
  for (std::size_t i = 0; i < hidden_dims.size(); ++i) os << (i ? "," : "") << hidden_dims[i];
  os << '\n';
  os << "d_z=" << d_z << '\n';
  os << "d_c=" << d_c << '\n';
  os << "activation=" << to_string(activation) << '\n';
  os << "variant=" << to_string(variant) << '\n';
  os << "n_classes=" << n_classes << '\n';
  os << "head_hidden=" << head_hidden << '\n';
  os << "classifier_input=" << to_string(classifier_input) << '\n';
  return os.str();
}

ArchitectureConfig ArchitectureConfig::from_canonical_text(const std::string& text) {
  ArchitectureConfig a;
  auto need = [&](const char* key) {
    auto v = header_value(text, key);
    if (!v) throw std::runtime_error(std::string("architecture text: missing key ") + key);
    return *v;
  };
  a.input_dim = std::stoul(need("input_dim"));
  a.hidden_dims = parse_dims(need("hidden_dims"));
  a.d_z = std::stoul(need("d_z"));
  a.d_c = std::stoul(need("d_c"));
  const auto act = need("activation");
  if (act == "relu") a.activation = Activation::kRelu;
  else if (act == "tanh") a.activation = Activation::kTanh;
  else throw std::runtime_error("architecture text: bad activation " + act);
  const auto var = need("variant");
  if (var == "dual") a.variant = ModelVariant::kDual;
  else if (var == "vanilla") a.variant = ModelVariant::kVanilla;
  else throw std::runtime_error("architecture text: bad variant " + var);
  a.n_classes = std::stoul(need("n_classes"));
  a.head_hidden = std::stoul(need("head_hidden"));
  const auto ci = need("classifier_input");
  if (ci == "both") a.classifier_input = ClassifierInput::kBoth;
  else if (ci == "z") a.classifier_input = ClassifierInput::kZOnly;
  else if (ci == "c") a.classifier_input = ClassifierInput::kCOnly;
  else throw std::runtime_error("architecture text: bad classifier_input " + ci);
  a.validate();
  return a;
}

Linear Linear::init(std::size_t in, std::size_t out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::vector<double> w(in * out);
  std::vector<double> b(out);
  for (auto& v : w) v = rng.uniform(-bound, bound);
  for (auto& v : b) v = rng.uniform(-bound, bound);
  return {Tensor::parameter({in, out}, std::move(w)), Tensor::parameter({out}, std::move(b))};
}

Tensor Linear::forward(const Tensor& x) const { return ad::add_row(ad::matmul(x, weight), bias); }

void Linear::zero() {
  for (auto& v : weight.mutable_data()) v = 0.0;
  for (auto& v : bias.mutable_data()) v = 0.0;
}

Mlp Mlp::init(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out,
              Activation act, Rng& rng) {
  Mlp m;
  m.activation = act;
  std::size_t prev = in;
  for (auto h : hidden) {
    m.layers.push_back(Linear::init(prev, h, rng));
    prev = h;
  }
  m.layers.push_back(Linear::init(prev, out, rng));
  return m;
}

Tensor Mlp::forward(const Tensor& x) const {
  Tensor h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i].forward(h);
    if (i + 1 < layers.size()) h = activate(activation, h);
  }
  return h;
}

std::vector<Tensor> Mlp::params() const {
  std::vector<Tensor> out;
  for (const auto& l : layers) {
    out.push_back(l.weight);
    out.push_back(l.bias);
  }
  return out;
}

GaussianEncoder GaussianEncoder::init(std::size_t in, const std::vector<std::size_t>& hidden,
                                      std::size_t latent, Activation act, Rng& rng) {
  GaussianEncoder e{{}, {}, {}, act};
  std::size_t prev = in;
  for (auto h : hidden) {
    e.trunk.push_back(Linear::init(prev, h, rng));
    prev = h;
  }
  e.mu_head = Linear::init(prev, latent, rng);
  e.log_var_head = Linear::init(prev, latent, rng);
  return e;
}

DiagGaussian GaussianEncoder::forward(const Tensor& x) const {
  Tensor h = x;
  for (const auto& l : trunk) h = activate(activation, l.forward(h));
  return {mu_head.forward(h), log_var_head.forward(h)};
}

std::vector<Tensor> GaussianEncoder::params() const {
  std::vector<Tensor> out;
  for (const auto& l : trunk) {
    out.push_back(l.weight);
    out.push_back(l.bias);
  }
  for (const auto* l : {&mu_head, &log_var_head}) {
    out.push_back(l->weight);
    out.push_back(l->bias);
  }
  return out;
}

DvaModel::DvaModel(ArchitectureConfig arch, std::uint64_t seed) : arch_(std::move(arch)) {
  arch_.validate();
  Rng rz(derive_seed(seed, "theta_z"));
  params_.theta_z = GaussianEncoder::init(arch_.input_dim, arch_.hidden_dims, arch_.d_z,
                                          arch_.activation, rz);
  if (arch_.variant == ModelVariant::kDual) {
    Rng rc(derive_seed(seed, "theta_c"));
    params_.theta_c = GaussianEncoder::init(arch_.c_encoder_input(), arch_.hidden_dims, arch_.d_c,
                                            arch_.activation, rc);
  }
  std::vector<std::size_t> dec_hidden(arch_.hidden_dims.rbegin(), arch_.hidden_dims.rend());
  Rng rp(derive_seed(seed, "phi"));
  params_.phi = Mlp::init(arch_.decoder_input(), dec_hidden, arch_.input_dim, arch_.activation, rp);
  if (arch_.n_classes > 0) {
    Rng rh(derive_seed(seed, "head"));
    params_.head = Mlp::init(arch_.head_input(), {arch_.head_hidden}, arch_.n_classes,
                             Activation::kRelu, rh);
  }
}

DvaModel DvaModel::clone() const {
  DvaParams p;
  p.theta_z = copy_encoder(params_.theta_z);
  if (params_.theta_c) p.theta_c = copy_encoder(*params_.theta_c);
  p.phi = copy_mlp(params_.phi);
  if (params_.head) p.head = copy_mlp(*params_.head);
  return DvaModel(arch_, std::move(p));
}

void DvaModel::check_input(const std::string& op, const Tensor& x) const {
  if (x.shape().size() != 2 || x.cols() != arch_.input_dim) {
    throw std::invalid_argument(op + ": expected [batch," + std::to_string(arch_.input_dim) +
                                "] input, got " + ad::shape_string(x.shape()));
  }
}

DiagGaussian DvaModel::encode_z(const Tensor& x) const {
  check_input("encode_z", x);
  return params_.theta_z.forward(x);
}

DiagGaussian DvaModel::encode_c(const Tensor& x, const Tensor& z) const {
  check_input("encode_c", x);
  if (!params_.theta_c) throw std::logic_error("encode_c: model has no c-encoder (vanilla variant)");
  if (z.shape().size() != 2 || z.rows() != x.rows() || z.cols() != arch_.d_z) {
    throw std::invalid_argument("encode_c: z " + ad::shape_string(z.shape()) +
                                " not row-aligned with x " + ad::shape_string(x.shape()));
  }
  return params_.theta_c->forward(ad::concat_last(x, z));
}

Tensor DvaModel::decode_logits(const Tensor& z, const Tensor& c) const {
  if (arch_.variant != ModelVariant::kDual) throw std::logic_error("decode: vanilla model decodes z only");
  if (z.shape().size() != 2 || c.shape().size() != 2 || z.rows() != c.rows() ||
      z.cols() != arch_.d_z || c.cols() != arch_.d_c) {
    throw std::invalid_argument("decode: z " + ad::shape_string(z.shape()) + " and c " +
                                ad::shape_string(c.shape()) + " do not match the architecture");
  }
  return params_.phi.forward(ad::concat_last(z, c));
}

Tensor DvaModel::decode(const Tensor& z, const Tensor& c) const {
  return ad::sigmoid(decode_logits(z, c));
}

Tensor DvaModel::decode_z_logits(const Tensor& z) const {
  if (arch_.variant != ModelVariant::kVanilla) throw std::logic_error("decode_z: dual model needs c");
  if (z.shape().size() != 2 || z.cols() != arch_.d_z) {
    throw std::invalid_argument("decode_z: bad z shape " + ad::shape_string(z.shape()));
  }
  return params_.phi.forward(z);
}

Tensor DvaModel::classify(const Tensor& z_mu, const Tensor& c_mu) const {
  if (!params_.head) throw std::logic_error("classify: model has no classification head");
  Tensor in;
  switch (arch_.classifier_input) {
    case ClassifierInput::kZOnly: in = z_mu; break;
    case ClassifierInput::kCOnly: in = c_mu; break;
    case ClassifierInput::kBoth:
      in = arch_.variant == ModelVariant::kDual ? ad::concat_last(z_mu, c_mu) : z_mu;
      break;
  }
  if (in.cols() != arch_.head_input()) {
    throw std::invalid_argument("classify: head expects " + std::to_string(arch_.head_input()) +
                                " features, got " + ad::shape_string(in.shape()));
  }
  return params_.head->forward(in);
}

std::vector<Tensor> DvaModel::shared_params() const {
  std::vector<Tensor> out = params_.theta_z.params();
  if (params_.theta_c) append(out, params_.theta_c->params());
  return out;
}

std::vector<Tensor> DvaModel::decoder_params() const { return params_.phi.params(); }

std::vector<Tensor> DvaModel::head_params() const {
  return params_.head ? params_.head->params() : std::vector<Tensor>{};
}

std::vector<Tensor> DvaModel::local_params() const {
  std::vector<Tensor> out = decoder_params();
  append(out, head_params());
  return out;
}

std::size_t DvaModel::shared_size() const {
  const auto p = shared_params();
  return count_params(p);
}

std::vector<double> DvaModel::flatten_shared() const {
  const auto p = shared_params();
  return flatten_params(p);
}

void DvaModel::load_shared(std::span<const double> flat) {
  auto p = shared_params();
  load_params(p, flat);
}

std::vector<double> DvaModel::flatten_local() const {
  const auto p = local_params();
  return flatten_params(p);
}

void DvaModel::load_local(std::span<const double> flat) {
  auto p = local_params();
  load_params(p, flat);
}

void DvaModel::set_shared_trainable(bool on) {
  for (auto& t : shared_params()) {
    Tensor h = t;
    h.set_requires_grad(on);
  }
}

void DvaModel::set_local_trainable(bool on) {
  for (auto& t : local_params()) {
    Tensor h = t;
    h.set_requires_grad(on);
  }
}

void DvaModel::zero_encoder_heads() {
  params_.theta_z.mu_head.zero();
  params_.theta_z.log_var_head.zero();
  if (params_.theta_c) {
    params_.theta_c->mu_head.zero();
    params_.theta_c->log_var_head.zero();
  }
}

MlpClassifier::MlpClassifier(std::size_t input_dim, const std::vector<std::size_t>& hidden,
                             std::size_t n_classes, Activation act, std::uint64_t seed)
    : input_dim_(input_dim), n_classes_(n_classes) {
  if (input_dim == 0 || n_classes < 2) throw std::invalid_argument("MlpClassifier: bad dimensions");
  Rng rng(derive_seed(seed, "classifier"));
  net_ = Mlp::init(input_dim, hidden, n_classes, act, rng);
}

MlpClassifier MlpClassifier::clone() const {
  MlpClassifier out;
  out.net_ = copy_mlp(net_);
  out.input_dim_ = input_dim_;
  out.n_classes_ = n_classes_;
  return out;
}

std::vector<double> MlpClassifier::flatten() const {
  const auto p = params();
  return flatten_params(p);
}

void MlpClassifier::load(std::span<const double> flat) {
  auto p = params();
  load_params(p, flat);
}

std::size_t count_params(std::span<const Tensor> params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.size();
  return n;
}

std::vector<double> flatten_params(std::span<const Tensor> params) {
  std::vector<double> out;
  out.reserve(count_params(params));
  for (const auto& p : params) out.insert(out.end(), p.data().begin(), p.data().end());
  return out;
}

void load_params(std::span<Tensor> params, std::span<const double> flat) {
  const std::size_t n = count_params(params);
  if (flat.size() != n) {
    throw std::invalid_argument("load_params: expected " + std::to_string(n) + " values, got " +
                                std::to_string(flat.size()));
  }
  std::size_t offset = 0;
  for (auto& p : params) {
    auto dst = p.mutable_data();
    std::copy_n(flat.begin() + offset, dst.size(), dst.begin());
    offset += dst.size();
  }
}

std::optional<std::string> header_value(const std::string& header, const std::string& key) {
  std::istringstream is(header);
  std::string line;
  const std::string prefix = key + "=";
  while (std::getline(is, line)) {
    if (line.rfind(prefix, 0) == 0) return line.substr(prefix.size());
  }
  return std::nullopt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("write_checkpoint: cannot open " + tmp);
    os.write(kMagic, sizeof(kMagic));
    put_u32(os, Checkpoint::kVersion);
    put_u32(os, static_cast<std::uint32_t>(ckpt.header.size()));
    os.write(ckpt.header.data(), static_cast<std::streamsize>(ckpt.header.size()));
    put_u64(os, ckpt.values.size());
    for (double v : ckpt.values) put_u64(os, std::bit_cast<std::uint64_t>(v));
    if (!os) throw std::runtime_error("write_checkpoint: write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_checkpoint: cannot open " + path.string());
  const std::vector<unsigned char> buf((std::istreambuf_iterator<char>(is)),
                                       std::istreambuf_iterator<char>());
  auto need = [&](std::size_t offset, std::size_t bytes, const char* what) {
    if (buf.size() < offset + bytes) {
      throw std::runtime_error("read_checkpoint: " + path.string() + " truncated reading " + what +
                               " at byte " + std::to_string(offset));
    }
  };
  need(0, 8, "magic");
  if (std::memcmp(buf.data(), kMagic, 8) != 0) {
    throw std::runtime_error("read_checkpoint: " + path.string() + " has bad magic at byte 0");
  }
  need(8, 8, "version");
  const auto version = static_cast<std::uint32_t>(get_le(buf, 8, 4));
  if (version != Checkpoint::kVersion) {
    throw std::runtime_error("read_checkpoint: unsupported version " + std::to_string(version));
  }
  const auto hlen = static_cast<std::size_t>(get_le(buf, 12, 4));
  need(16, hlen, "header");
  Checkpoint ckpt;
  ckpt.header.assign(reinterpret_cast<const char*>(buf.data() + 16), hlen);
  std::size_t offset = 16 + hlen;
  need(offset, 8, "count");
  const auto count = get_le(buf, offset, 8);
  offset += 8;
  need(offset, count * 8, "values");
  if (buf.size() != offset + count * 8) {
    throw std::runtime_error("read_checkpoint: trailing bytes after values in " + path.string());
  }
  ckpt.values.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    ckpt.values[i] = std::bit_cast<double>(get_le(buf, offset + 8 * i, 8));
  }
  return ckpt;
}

}  // namespace feddva
