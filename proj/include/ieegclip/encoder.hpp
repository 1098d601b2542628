#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace ieegclip::encoder {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

struct EncoderConfig {
  int n_channels = 0;
  int hidden_dim = 320;
  int n_blocks = 5;
  int kernel_size = 3;
  std::vector<int> dilation_cycle{1, 2, 4};
  int out_dim = 0;
  int attention_dim = 128;
  int time_steps = 120;
  bool with_head = false;
  double head_noise = 1e-3;
  std::uint64_t seed = 0;

  void validate() const;  // throws invalid_argument
  int dilation(int block) const { return dilation_cycle[static_cast<std::size_t>(block) % dilation_cycle.size()]; }
};

nlohmann::json to_json(const EncoderConfig& c);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

template <class T>
struct NamedArray {
  std::string name;
  Mat<T> value;
};

// Every trainable array, in a fixed order: input projection, blocks,
// attention, output, optional head, then the log-temperature t_prime (1x1).
template <class T>
struct EncoderParams {
  EncoderConfig config;
  std::vector<NamedArray<T>> arrays;

  Mat<T>& at(const std::string& name);
  const Mat<T>& at(const std::string& name) const;
  bool has(const std::string& name) const;
  std::size_t parameter_count() const;

  T t_prime() const { return at("t_prime")(0, 0); }
  T& t_prime() { return at("t_prime")(0, 0); }

  // Same names and shapes, all zeros.
  EncoderParams zeros_like() const;
};

// Shape-congruent with EncoderParams.
template <class T>
using GradientSet = EncoderParams<T>;

template <class T>
EncoderParams<T> init_encoder(const EncoderConfig& config);

// Adds a d x d head initialized to identity + N(0, noise^2), zero bias.
// Throws state if a head is present.
template <class T>
EncoderParams<T> attach_head(const EncoderParams<T>& params, double noise, std::uint64_t seed);

template <class To, class From>
EncoderParams<To> cast_params(const EncoderParams<From>& p);

// Intermediate values kept for backward.
template <class T>
struct ForwardCache {
  int batch = 0;
  Mat<T> x;                       // n x (B*T)
  std::vector<Mat<T>> block_in;   // h x (B*T)
  std::vector<Mat<T>> cols1, pre1, cols2, pre2;
  Mat<T> h_final;                 // h x (B*T)
  Mat<T> e;                       // attn x (B*T), tanh activations
  Mat<T> alpha;                   // T x B
  Mat<T> pooled;                  // h x B
  Mat<T> u;                       // d x B, before the head
};

// batch: n x (B*T), example-major (columns b*T .. b*T+T-1 hold example b).
// Returns d x B. Throws shape_mismatch on a bad batch.
template <class T>
Mat<T> forward(const EncoderParams<T>& params, const Mat<T>& batch, ForwardCache<T>* cache = nullptr);

// Attention weights (T x B) of the last forward.
template <class T>
Mat<T> attention_weights(const EncoderParams<T>& params, const Mat<T>& batch);

// Reverse-mode gradients of <upstream, forward(batch)>. t_prime gets zero.
template <class T>
GradientSet<T> backward(const EncoderParams<T>& params, const ForwardCache<T>& cache, const Mat<T>& upstream);

// --- ckpt1 ------------------------------------------------------------------
//
// "IEEGCKP1", u64 little-endian header length, JSON header, then blobs in
// header order. Blobs are f32 or f64 as recorded in the header's dtype.

template <class T>
struct Checkpoint {
  EncoderParams<T> params;
  std::vector<NamedArray<T>> extra;  // optimizer moments etc.
  std::uint64_t step = 0;
  nlohmann::json meta = nlohmann::json::object();
};

template <class T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& ckpt);

template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path);

nlohmann::json read_checkpoint_header(const std::filesystem::path& path);

}  // namespace ieegclip::encoder
