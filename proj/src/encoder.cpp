#include "ieegclip/encoder.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "ieegclip/error.hpp"
#include "ieegclip/rng.hpp"

namespace ieegclip::encoder {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "ckpt1 I/O assumes a little-endian host");

void EncoderConfig::validate() const {
  if (n_channels <= 0 || hidden_dim <= 0 || n_blocks < 0 || out_dim <= 0 || attention_dim <= 0 || time_steps <= 0) {
    throw Error(ErrorKind::invalid_argument, "encoder dimensions must be positive");
  }
  if (kernel_size <= 0 || kernel_size % 2 == 0) {
    throw Error(ErrorKind::invalid_argument, "kernel_size must be odd and positive");
  }
  if (dilation_cycle.empty()) throw Error(ErrorKind::invalid_argument, "dilation_cycle is empty");
  for (int d : dilation_cycle) {
    if (d <= 0) throw Error(ErrorKind::invalid_argument, "dilations must be positive");
  }
}

json to_json(const EncoderConfig& c) {
  return {{"n_channels", c.n_channels},       {"hidden_dim", c.hidden_dim},
          {"n_blocks", c.n_blocks},           {"kernel_size", c.kernel_size},
          {"dilation_cycle", c.dilation_cycle}, {"out_dim", c.out_dim},
          {"attention_dim", c.attention_dim}, {"time_steps", c.time_steps},
          {"with_head", c.with_head},         {"head_noise", c.head_noise},
          {"seed", c.seed}};
}

EncoderConfig encoder_config_from_json(const json& j) {
  EncoderConfig c;
  c.n_channels = j.value("n_channels", c.n_channels);
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.n_blocks = j.value("n_blocks", c.n_blocks);
  c.kernel_size = j.value("kernel_size", c.kernel_size);
  c.dilation_cycle = j.value("dilation_cycle", c.dilation_cycle);
  c.out_dim = j.value("out_dim", c.out_dim);
  c.attention_dim = j.value("attention_dim", c.attention_dim);
  c.time_steps = j.value("time_steps", c.time_steps);
  c.with_head = j.value("with_head", c.with_head);
  c.head_noise = j.value("head_noise", c.head_noise);
  c.seed = j.value("seed", c.seed);
  return c;
}

// ---------------------------------------------------------------------------
// Params

template <class T>
Mat<T>& EncoderParams<T>::at(const std::string& name) {
  for (auto& a : arrays) {
    if (a.name == name) return a.value;
  }
  throw Error(ErrorKind::invalid_argument, "no parameter named '" + name + "'");
}

template <class T>
const Mat<T>& EncoderParams<T>::at(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return a.value;
  }
  throw Error(ErrorKind::invalid_argument, "no parameter named '" + name + "'");
}

template <class T>
bool EncoderParams<T>::has(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return true;
  }
  return false;
}

template <class T>
std::size_t EncoderParams<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& a : arrays) n += static_cast<std::size_t>(a.value.size());
  return n;
}

template <class T>
EncoderParams<T> EncoderParams<T>::zeros_like() const {
  EncoderParams out;
  out.config = config;
  out.arrays.reserve(arrays.size());
  for (const auto& a : arrays) out.arrays.push_back({a.name, Mat<T>::Zero(a.value.rows(), a.value.cols())});
  return out;
}

namespace {

std::string block_name(int b, const char* leaf) { return "block" + std::to_string(b) + "." + leaf; }

template <class T>
Mat<T> uniform_fan_in(CounterRng rng, int rows, int cols, int fan_in) {
  const double bound = std::sqrt(3.0 / static_cast<double>(fan_in));
  Mat<T> m(rows, cols);
  for (int c = 0; c < cols; ++c) {
    for (int r = 0; r < rows; ++r) m(r, c) = static_cast<T>(rng.uniform(-bound, bound));
  }
  return m;
}

}  // namespace

template <class T>
EncoderParams<T> init_encoder(const EncoderConfig& config) {
  config.validate();
  const int n = config.n_channels, h = config.hidden_dim, k = config.kernel_size;
  const int a = config.attention_dim, d = config.out_dim;
  const CounterRng root(config.seed);

  EncoderParams<T> p;
  p.config = config;
  p.config.with_head = false;
  auto add = [&](std::string name, Mat<T> v) { p.arrays.push_back({std::move(name), std::move(v)}); };
  add("input.weight", uniform_fan_in<T>(root.derive("input.weight"), h, n, n));
  add("input.bias", Mat<T>::Zero(h, 1));
  for (int b = 0; b < config.n_blocks; ++b) {
    add(block_name(b, "conv1.weight"), uniform_fan_in<T>(root.derive(block_name(b, "conv1.weight")), h, k * h, k * h));
    add(block_name(b, "conv1.bias"), Mat<T>::Zero(h, 1));
    add(block_name(b, "conv2.weight"), uniform_fan_in<T>(root.derive(block_name(b, "conv2.weight")), h, k * h, k * h));
    add(block_name(b, "conv2.bias"), Mat<T>::Zero(h, 1));
  }
  add("attention.weight", uniform_fan_in<T>(root.derive("attention.weight"), a, h, h));
  add("attention.bias", Mat<T>::Zero(a, 1));
  add("attention.query", uniform_fan_in<T>(root.derive("attention.query"), a, 1, a));
  add("output.weight", uniform_fan_in<T>(root.derive("output.weight"), d, h, h));
  add("output.bias", Mat<T>::Zero(d, 1));
  add("t_prime", Mat<T>::Zero(1, 1));
  if (config.with_head) return attach_head(p, config.head_noise, config.seed);
  return p;
}

template <class T>
EncoderParams<T> attach_head(const EncoderParams<T>& params, double noise, std::uint64_t seed) {
  if (params.has("head.weight")) throw Error(ErrorKind::state, "encoder already has a head");
  const int d = params.config.out_dim;
  CounterRng rng = CounterRng(seed).derive("head.weight");
  Mat<T> w = Mat<T>::Identity(d, d);
  if (noise > 0.0) {
    for (int c = 0; c < d; ++c) {
      for (int r = 0; r < d; ++r) w(r, c) += static_cast<T>(noise * rng.normal());
    }
  }
  EncoderParams<T> out;
  out.config = params.config;
  out.config.with_head = true;
  out.config.head_noise = noise;
  for (const auto& a : params.arrays) {
    if (a.name == "t_prime") {
      out.arrays.push_back({"head.weight", std::move(w)});
      out.arrays.push_back({"head.bias", Mat<T>::Zero(d, 1)});
    }
    out.arrays.push_back(a);
  }
  return out;
}

template <class To, class From>
EncoderParams<To> cast_params(const EncoderParams<From>& p) {
  EncoderParams<To> out;
  out.config = p.config;
  for (const auto& a : p.arrays) out.arrays.push_back({a.name, a.value.template cast<To>()});
  return out;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

template <class T>
T gelu(T x) {
  return static_cast<T>(0.5) * x * (static_cast<T>(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
}

template <class T>
T gelu_grad(T x) {
  const T cdf = static_cast<T>(0.5) * (static_cast<T>(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(static_cast<T>(-0.5) * x * x) * static_cast<T>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + x * pdf;
}

// Rows j*h..j*h+h-1 of column (b, t) hold H(:, b, t + (j - half) * dilation),
// zero outside the example.
template <class T>
Mat<T> im2col(const Mat<T>& x, int batch, int steps, int kernel, int dilation) {
  const auto h = x.rows();
  const int half = (kernel - 1) / 2;
  Mat<T> cols = Mat<T>::Zero(kernel * h, x.cols());
  for (int b = 0; b < batch; ++b) {
    for (int j = 0; j < kernel; ++j) {
      const int o = (j - half) * dilation;
      const int t0 = std::max(0, -o), t1 = std::min(steps, steps - o);
      if (t1 <= t0) continue;
      cols.block(j * h, b * steps + t0, h, t1 - t0) = x.block(0, b * steps + t0 + o, h, t1 - t0);
    }
  }
  return cols;
}

template <class T>
void col2im_add(const Mat<T>& cols, int batch, int steps, int kernel, int dilation, Mat<T>& dx) {
  const auto h = dx.rows();
  const int half = (kernel - 1) / 2;
  for (int b = 0; b < batch; ++b) {
    for (int j = 0; j < kernel; ++j) {
      const int o = (j - half) * dilation;
      const int t0 = std::max(0, -o), t1 = std::min(steps, steps - o);
      if (t1 <= t0) continue;
      dx.block(0, b * steps + t0 + o, h, t1 - t0) += cols.block(j * h, b * steps + t0, h, t1 - t0);
    }
  }
}

}  // namespace

template <class T>
Mat<T> forward(const EncoderParams<T>& params, const Mat<T>& batch, ForwardCache<T>* cache) {
  const auto& cfg = params.config;
  const int steps = cfg.time_steps;
  if (batch.rows() != cfg.n_channels || batch.cols() == 0 || batch.cols() % steps != 0) {
    throw Error(ErrorKind::shape_mismatch, "encoder batch must be " + std::to_string(cfg.n_channels) + " x (B*" +
                                               std::to_string(steps) + "), got " + std::to_string(batch.rows()) +
                                               " x " + std::to_string(batch.cols()));
  }
  const int nb = static_cast<int>(batch.cols() / steps);
  if (cache) {
    *cache = ForwardCache<T>{};
    cache->batch = nb;
    cache->x = batch;
  }

  Mat<T> h = params.at("input.weight") * batch;
  h.colwise() += params.at("input.bias").col(0);

  for (int b = 0; b < cfg.n_blocks; ++b) {
    const int dil = cfg.dilation(b);
    Mat<T> cols1 = im2col(h, nb, steps, cfg.kernel_size, dil);
    Mat<T> pre1 = params.at(block_name(b, "conv1.weight")) * cols1;
    pre1.colwise() += params.at(block_name(b, "conv1.bias")).col(0);
    Mat<T> act1 = pre1.unaryExpr([](T v) { return gelu(v); });
    Mat<T> cols2 = im2col(act1, nb, steps, cfg.kernel_size, dil);
    Mat<T> pre2 = params.at(block_name(b, "conv2.weight")) * cols2;
    pre2.colwise() += params.at(block_name(b, "conv2.bias")).col(0);
    Mat<T> out = h + pre2.unaryExpr([](T v) { return gelu(v); });
    if (cache) {
      cache->block_in.push_back(std::move(h));
      cache->cols1.push_back(std::move(cols1));
      cache->pre1.push_back(std::move(pre1));
      cache->cols2.push_back(std::move(cols2));
      cache->pre2.push_back(std::move(pre2));
    }
    h = std::move(out);
  }

  Mat<T> e = params.at("attention.weight") * h;
  e.colwise() += params.at("attention.bias").col(0);
  e = e.array().tanh().matrix();
  const Mat<T> scores = params.at("attention.query").transpose() * e;  // 1 x (B*T)
  Mat<T> alpha = Eigen::Map<const Mat<T>>(scores.data(), steps, nb);
  for (int b = 0; b < nb; ++b) {
    auto col = alpha.col(b);
    col.array() -= col.maxCoeff();
    col = col.array().exp().matrix();
    col /= col.sum();
  }
  Mat<T> pooled(h.rows(), nb);
  for (int b = 0; b < nb; ++b) pooled.col(b) = h.block(0, b * steps, h.rows(), steps) * alpha.col(b);

  Mat<T> u = params.at("output.weight") * pooled;
  u.colwise() += params.at("output.bias").col(0);
  Mat<T> y;
  if (cfg.with_head) {
    y = params.at("head.weight") * u;
    y.colwise() += params.at("head.bias").col(0);
  }
  if (cache) {
    cache->h_final = std::move(h);
    cache->e = std::move(e);
    cache->alpha = alpha;
    cache->pooled = std::move(pooled);
    cache->u = u;
  }
  return cfg.with_head ? y : u;
}

template <class T>
Mat<T> attention_weights(const EncoderParams<T>& params, const Mat<T>& batch) {
  ForwardCache<T> cache;
  forward(params, batch, &cache);
  return cache.alpha;
}

template <class T>
GradientSet<T> backward(const EncoderParams<T>& params, const ForwardCache<T>& cache, const Mat<T>& upstream) {
  const auto& cfg = params.config;
  const int steps = cfg.time_steps;
  const int nb = cache.batch;
  if (upstream.rows() != cfg.out_dim || upstream.cols() != nb) {
    throw Error(ErrorKind::shape_mismatch, "upstream gradient shape does not match the forward batch");
  }
  GradientSet<T> g = params.zeros_like();

  Mat<T> du = upstream;
  if (cfg.with_head) {
    g.at("head.weight") = upstream * cache.u.transpose();
    g.at("head.bias") = upstream.rowwise().sum();
    du = params.at("head.weight").transpose() * upstream;
  }
  g.at("output.weight") = du * cache.pooled.transpose();
  g.at("output.bias") = du.rowwise().sum();
  const Mat<T> dpooled = params.at("output.weight").transpose() * du;

  const auto hd = cache.h_final.rows();
  Mat<T> dh(hd, cache.h_final.cols());
  Mat<T> ds(1, cache.h_final.cols());
  for (int b = 0; b < nb; ++b) {
    const auto hb = cache.h_final.block(0, b * steps, hd, steps);
    dh.block(0, b * steps, hd, steps).noalias() = dpooled.col(b) * cache.alpha.col(b).transpose();
    const Eigen::Matrix<T, Eigen::Dynamic, 1> dalpha = hb.transpose() * dpooled.col(b);
    const T mean = cache.alpha.col(b).dot(dalpha);
    ds.block(0, b * steps, 1, steps) =
        (cache.alpha.col(b).array() * (dalpha.array() - mean)).matrix().transpose();
  }
  const auto& query = params.at("attention.query");
  g.at("attention.query") = cache.e * ds.transpose();
  const Mat<T> dz = ((query * ds).array() * (static_cast<T>(1) - cache.e.array().square())).matrix();
  g.at("attention.weight") = dz * cache.h_final.transpose();
  g.at("attention.bias") = dz.rowwise().sum();
  dh.noalias() += params.at("attention.weight").transpose() * dz;

  for (int b = cfg.n_blocks - 1; b >= 0; --b) {
    const int dil = cfg.dilation(b);
    const auto bi = static_cast<std::size_t>(b);
    const Mat<T> dpre2 = (dh.array() * cache.pre2[bi].unaryExpr([](T v) { return gelu_grad(v); }).array()).matrix();
    g.at(block_name(b, "conv2.weight")) = dpre2 * cache.cols2[bi].transpose();
    g.at(block_name(b, "conv2.bias")) = dpre2.rowwise().sum();
    const Mat<T> dcols2 = params.at(block_name(b, "conv2.weight")).transpose() * dpre2;
    Mat<T> dact1 = Mat<T>::Zero(hd, dh.cols());
    col2im_add(dcols2, nb, steps, cfg.kernel_size, dil, dact1);
    const Mat<T> dpre1 = (dact1.array() * cache.pre1[bi].unaryExpr([](T v) { return gelu_grad(v); }).array()).matrix();
    g.at(block_name(b, "conv1.weight")) = dpre1 * cache.cols1[bi].transpose();
    g.at(block_name(b, "conv1.bias")) = dpre1.rowwise().sum();
    const Mat<T> dcols1 = params.at(block_name(b, "conv1.weight")).transpose() * dpre1;
    col2im_add(dcols1, nb, steps, cfg.kernel_size, dil, dh);  // residual path keeps dh
  }

  g.at("input.weight") = dh * cache.x.transpose();
  g.at("input.bias") = dh.rowwise().sum();
  return g;
}

// ---------------------------------------------------------------------------
// ckpt1

namespace {

constexpr char kMagic[8] = {'I', 'E', 'E', 'G', 'C', 'K', 'P', '1'};

template <class T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

template <class T>
void write_blob(std::ofstream& out, const Mat<T>& m) {
  out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(T)));
}

template <class S, class T>
Mat<T> read_blob(std::ifstream& in, long rows, long cols) {
  Mat<S> m(rows, cols);
  in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(S)));
  if (!in) throw Error(ErrorKind::format, "checkpoint truncated");
  if constexpr (std::is_same_v<S, T>) {
    return m;
  } else {
    return m.template cast<T>();
  }
}

json read_header(std::ifstream& in, const std::filesystem::path& path) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw Error(ErrorKind::format, path.string() + " is not a ckpt1 file");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || len > (1u << 30)) throw Error(ErrorKind::format, "bad checkpoint header length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw Error(ErrorKind::format, "checkpoint header truncated");
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, std::string("checkpoint header: ") + e.what());
  }
}

}  // namespace

template <class T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& ckpt) {
  json tensors = json::array();
  auto describe = [&](const NamedArray<T>& a, const char* group) {
    tensors.push_back({{"name", a.name}, {"group", group}, {"rows", a.value.rows()}, {"cols", a.value.cols()}});
  };
  for (const auto& a : ckpt.params.arrays) describe(a, "param");
  for (const auto& a : ckpt.extra) describe(a, "extra");
  const json header = {{"format", "ckpt1"},
                       {"dtype", dtype_name<T>()},
                       {"config", to_json(ckpt.params.config)},
                       {"step", ckpt.step},
                       {"meta", ckpt.meta},
                       {"tensors", tensors}};
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::io, "cannot write checkpoint " + path.string());
  out.write(kMagic, 8);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& a : ckpt.params.arrays) write_blob(out, a.value);
  for (const auto& a : ckpt.extra) write_blob(out, a.value);
  if (!out) throw Error(ErrorKind::io, "short write to " + path.string());
}

template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open checkpoint " + path.string());
  const json header = read_header(in, path);
  Checkpoint<T> ck;
  try {
    ck.params.config = encoder_config_from_json(header.at("config"));
    ck.step = header.at("step").get<std::uint64_t>();
    ck.meta = header.value("meta", json::object());
    const bool f64 = header.at("dtype").get<std::string>() == "f64";
    for (const auto& t : header.at("tensors")) {
      const long rows = t.at("rows").get<long>(), cols = t.at("cols").get<long>();
      NamedArray<T> a{t.at("name").get<std::string>(),
                      f64 ? read_blob<double, T>(in, rows, cols) : read_blob<float, T>(in, rows, cols)};
      (t.at("group").get<std::string>() == "param" ? ck.params.arrays : ck.extra).push_back(std::move(a));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, std::string("checkpoint header: ") + e.what());
  }
  ck.params.config.validate();
  return ck;
}

json read_checkpoint_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open checkpoint " + path.string());
  return read_header(in, path);
}

#define IEEGCLIP_INSTANTIATE(T)                                                                              \
  template struct EncoderParams<T>;                                                                          \
  template EncoderParams<T> init_encoder<T>(const EncoderConfig&);                                           \
  template EncoderParams<T> attach_head<T>(const EncoderParams<T>&, double, std::uint64_t);                 \
  template Mat<T> forward<T>(const EncoderParams<T>&, const Mat<T>&, ForwardCache<T>*);                      \
  template Mat<T> attention_weights<T>(const EncoderParams<T>&, const Mat<T>&);                              \
  template GradientSet<T> backward<T>(const EncoderParams<T>&, const ForwardCache<T>&, const Mat<T>&);       \
  template void save_checkpoint<T>(const std::filesystem::path&, const Checkpoint<T>&);                      \
  template Checkpoint<T> load_checkpoint<T>(const std::filesystem::path&);

IEEGCLIP_INSTANTIATE(float)
IEEGCLIP_INSTANTIATE(double)
#undef IEEGCLIP_INSTANTIATE

template EncoderParams<float> cast_params<float, double>(const EncoderParams<double>&);
template EncoderParams<double> cast_params<double, float>(const EncoderParams<float>&);
template EncoderParams<float> cast_params<float, float>(const EncoderParams<float>&);
template EncoderParams<double> cast_params<double, double>(const EncoderParams<double>&);

}  // namespace ieegclip::encoder
