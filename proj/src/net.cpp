// SPDX-License-Identifier: Apache-2.0
#include "echoedm/net.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace echoedm {

std::string to_string(StageMode m) {
  switch (m) {
    case StageMode::Base: return "Base";
    case StageMode::TSR: return "TSR";
    case StageMode::SSR: return "SSR";
    case StageMode::TSSR: return "TSSR";
  }
  return "?";
}

StageMode stage_mode_from_string(const std::string& s) {
  if (s == "Base") return StageMode::Base;
  if (s == "TSR") return StageMode::TSR;
  if (s == "SSR") return StageMode::SSR;
  if (s == "TSSR") return StageMode::TSSR;
  throw ValidationError("unknown stage mode '" + s + "'");
}

namespace {

int norm_groups(int c) {
  int g = std::max(1, std::min(8, c / 2));
  while (c % g != 0) --g;
  return g;
}

int attn_heads(int c) { return std::max(1, c / 32); }

}  // namespace

void NetConfig::validate() const {
  if (base_dims < 1) throw ValidationError("net.base_dims must be >= 1");
  if (layers_per_level.empty()) throw ValidationError("net.layers_per_level must not be empty");
  for (int n : layers_per_level)
    if (n < 1) throw ValidationError("net.layers_per_level entries must be >= 1");
  if (in_frames < 1) throw ValidationError("net.in_frames must be >= 1");
  const int div = 1 << (depth() - 1);
  if (in_height < 1 || in_width < 1 || in_height % div || in_width % div)
    throw ValidationError("net spatial dims " + std::to_string(in_height) + "x" +
                          std::to_string(in_width) + " must be divisible by " +
                          std::to_string(div));
}

std::uint64_t config_hash(const NetConfig& cfg) {
  std::ostringstream os;
  os << "dims=" << cfg.base_dims << ";layers=";
  for (int n : cfg.layers_per_level) os << n << ',';
  os << ";bot=" << cfg.bottleneck_attention << ";mem=" << cfg.mem_opti
     << ";mode=" << to_string(cfg.mode) << ";f=" << cfg.in_frames << ";h=" << cfg.in_height
     << ";w=" << cfg.in_width;
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : os.str()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<double> scalar_features(double v) {
  std::vector<double> out;
  out.reserve(kScalarFeatures);
  out.push_back(v);
  for (int k = 0; k < 8; ++k) {
    const double a = 2.0 * std::numbers::pi * std::ldexp(1.0, k - 3) * v;
    out.push_back(std::sin(a));
    out.push_back(std::cos(a));
  }
  return out;
}

template <class T>
Tensor<T> inject_conditioning(const BasicVideo<T>& x_in, const Conditioning& cond,
                              const NetConfig& cfg) {
  if (x_in.frames != cfg.in_frames || x_in.height != cfg.in_height ||
      x_in.width != cfg.in_width)
    throw ValidationError("network input " + x_in.shape().str() + " does not match config " +
                          cfg.shape().str());
  if (cond.ref_frame.frames != 1 || cond.ref_frame.height != cfg.in_height ||
      cond.ref_frame.width != cfg.in_width)
    throw ValidationError("reference frame must be one frame at the stage resolution");
  if (cond.lambda_c < 0.0 || cond.lambda_c > 1.0)
    throw ValidationError("lambda_c must lie in [0, 1]");
  const bool needs_prev = cfg.mode != StageMode::Base;
  if (needs_prev != cond.v_prev.has_value())
    throw ValidationError(needs_prev ? "super-resolution stage needs v_prev"
                                     : "base stage takes no v_prev");
  if (needs_prev && cond.v_prev->shape() != x_in.shape())
    throw ValidationError("v_prev must be rescaled to the stage dims");

  Tensor<T> out(cfg.input_channels(), x_in.frames, x_in.height, x_in.width);
  std::copy(x_in.data.begin(), x_in.data.end(), out.channel(0));
  const std::size_t hw = x_in.frame_size();
  for (int f = 0; f < x_in.frames; ++f)
    for (std::size_t i = 0; i < hw; ++i)
      out.channel(1)[f * hw + i] = static_cast<T>(cond.ref_frame.data[i]);
  if (needs_prev)
    for (std::size_t i = 0; i < x_in.size(); ++i)
      out.channel(2)[i] = static_cast<T>(cond.v_prev->data[i]);
  return out;
}

template <class T>
ParamRef UNet<T>::alloc(std::size_t n, Init kind, int fan_in) {
  ParamRef r{num_params_, n};
  num_params_ += n;
  inits_.push_back({r, kind, fan_in});
  return r;
}

template <class T>
typename UNet<T>::Conv UNet<T>::make_conv(int cin, int cout, int k, bool zero) {
  Conv c;
  const int fan = cin * k * k;
  c.w = alloc(static_cast<std::size_t>(cout) * fan, zero ? Init::Zero : Init::Fan, fan);
  c.b = alloc(cout, Init::Zero);
  c.s = {cin, cout, k};
  return c;
}

template <class T>
typename UNet<T>::Norm UNet<T>::make_norm(int c) {
  Norm n;
  n.g = alloc(c, Init::One);
  n.b = alloc(c, Init::Zero);
  n.groups = norm_groups(c);
  return n;
}

template <class T>
typename UNet<T>::Linear UNet<T>::make_linear(int in, int out, bool zero) {
  Linear l;
  l.w = alloc(static_cast<std::size_t>(in) * out, zero ? Init::Zero : Init::Fan, in);
  l.b = alloc(out, Init::Zero);
  l.in = in;
  l.out = out;
  return l;
}

template <class T>
typename UNet<T>::ResBlock UNet<T>::make_res(int cin, int cout) {
  ResBlock r;
  r.n1 = make_norm(cin);
  r.c1 = make_conv(cin, cout, 3);
  r.emb = make_linear(cfg_.emb_dims(), 2 * cout, true);
  r.n2 = make_norm(cout);
  r.c2 = make_conv(cout, cout, 3, true);
  if (cin != cout) r.skip = make_conv(cin, cout, 1);
  return r;
}

template <class T>
typename UNet<T>::Attn UNet<T>::make_attn(int c, kernels::AttnAxis axis) {
  Attn a;
  a.channels = c;
  a.heads = attn_heads(c);
  a.axis = axis;
  a.n = make_norm(c);
  a.qkv = make_conv(c, 3 * c, 1);
  a.out = make_conv(c, c, 1, true);
  if (axis == kernels::AttnAxis::Temporal)
    a.rel_bias = alloc(static_cast<std::size_t>(a.heads) * (2 * cfg_.in_frames - 1), Init::Zero);
  return a;
}

template <class T>
UNet<T>::UNet(NetConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const int E = cfg_.emb_dims();
  const int L = cfg_.depth();
  noise_mlp1_ = make_linear(kScalarFeatures, E);
  noise_mlp2_ = make_linear(E, E);
  lambda_mlp1_ = make_linear(kScalarFeatures, E);
  lambda_mlp2_ = make_linear(E, E);
  conv_in_ = make_conv(cfg_.input_channels(), cfg_.channels_at(0), 3);

  levels_.resize(L);
  for (int i = 0; i < L; ++i) {
    int cin = i == 0 ? cfg_.channels_at(0) : cfg_.channels_at(i - 1);
    for (int b = 0; b < cfg_.layers_per_level[i]; ++b) {
      levels_[i].down.push_back(make_res(cin, cfg_.channels_at(i)));
      cin = cfg_.channels_at(i);
    }
    levels_[i].tattn_down = make_attn(cfg_.channels_at(i), kernels::AttnAxis::Temporal);
  }
  const int cmid = cfg_.channels_at(L - 1);
  mid1_ = make_res(cmid, cmid);
  if (cfg_.bottleneck_attention) mid_sattn_ = make_attn(cmid, kernels::AttnAxis::Spatial);
  mid_tattn_ = make_attn(cmid, kernels::AttnAxis::Temporal);
  mid2_ = make_res(cmid, cmid);
  for (int i = L - 1; i >= 0; --i) {
    int cin = (i == L - 1 ? cmid : cfg_.channels_at(i + 1)) + cfg_.channels_at(i);
    for (int b = 0; b < cfg_.layers_per_level[i]; ++b) {
      levels_[i].up.push_back(make_res(cin, cfg_.channels_at(i)));
      cin = cfg_.channels_at(i);
    }
    levels_[i].tattn_up = make_attn(cfg_.channels_at(i), kernels::AttnAxis::Temporal);
  }
  out_norm_ = make_norm(cfg_.channels_at(0));
  conv_out_ = make_conv(cfg_.channels_at(0), 1, 3, true);
}

template <class T>
std::vector<T> UNet<T>::init_params(Rng& rng) const {
  std::vector<T> p(num_params_, T(0));
  for (const InitOp& op : inits_) {
    T* dst = p.data() + op.ref.offset;
    switch (op.kind) {
      case Init::Zero: break;
      case Init::One: std::fill(dst, dst + op.ref.size, T(1)); break;
      case Init::Fan: {
        const double sd = 1.0 / std::sqrt(static_cast<double>(op.fan_in));
        for (std::size_t i = 0; i < op.ref.size; ++i) dst[i] = static_cast<T>(sd * rng.normal());
        break;
      }
    }
  }
  return p;
}

template <class T>
typename UNet<T>::Id UNet<T>::run_res(Graph<T>& g, const ResBlock& r, Id x, Id emb) const {
  Id a = g.silu(g.group_norm(x, r.n1.g, r.n1.b, r.n1.groups));
  a = g.conv(a, r.c1.w, r.c1.b, r.c1.s);
  const Id ss = g.linear(emb, r.emb.w, r.emb.b, r.emb.out);
  a = g.film(g.group_norm(a, r.n2.g, r.n2.b, r.n2.groups), ss);
  a = g.conv(g.silu(a), r.c2.w, r.c2.b, r.c2.s);
  const Id skip = r.skip ? g.conv(x, r.skip->w, r.skip->b, r.skip->s) : x;
  return g.add(skip, a);
}

template <class T>
typename UNet<T>::Id UNet<T>::run_attn(Graph<T>& g, const Attn& a, Id x) const {
  Id n = g.group_norm(x, a.n.g, a.n.b, a.n.groups);
  Id qkv = g.conv(n, a.qkv.w, a.qkv.b, a.qkv.s);
  Id o = g.attention(qkv, a.rel_bias, {a.channels, a.heads, a.axis});
  o = g.conv(o, a.out.w, a.out.b, a.out.s);
  return g.add(x, o);
}

template <class T>
typename UNet<T>::Id UNet<T>::embed(Graph<T>& g, double c_noise, double lambda_c) const {
  auto feature_node = [&](double v) {
    const auto f = scalar_features(v);
    Tensor<T> t(kScalarFeatures, 1, 1, 1);
    for (int i = 0; i < kScalarFeatures; ++i) t.data[i] = static_cast<T>(f[i]);
    return g.input(std::move(t));
  };
  Id a = g.linear(feature_node(c_noise), noise_mlp1_.w, noise_mlp1_.b, noise_mlp1_.out);
  a = g.linear(g.silu(a), noise_mlp2_.w, noise_mlp2_.b, noise_mlp2_.out);
  Id b = g.linear(feature_node(lambda_c), lambda_mlp1_.w, lambda_mlp1_.b, lambda_mlp1_.out);
  b = g.linear(g.silu(b), lambda_mlp2_.w, lambda_mlp2_.b, lambda_mlp2_.out);
  return g.add(a, b);
}

template <class T>
typename UNet<T>::Id UNet<T>::build(Graph<T>& g, Id x, double c_noise, double lambda_c,
                                    bool time_layers) const {
  const int L = cfg_.depth();
  const Id emb = g.silu(embed(g, c_noise, lambda_c));
  Id h = g.conv(x, conv_in_.w, conv_in_.b, conv_in_.s);
  std::vector<Id> skips(L);
  for (int i = 0; i < L; ++i) {
    for (const ResBlock& r : levels_[i].down) h = run_res(g, r, h, emb);
    if (time_layers) h = run_attn(g, levels_[i].tattn_down, h);
    skips[i] = h;
    if (i < L - 1) h = g.avg_pool2(h);
  }
  h = run_res(g, mid1_, h, emb);
  if (cfg_.bottleneck_attention) h = run_attn(g, mid_sattn_, h);
  if (time_layers) h = run_attn(g, mid_tattn_, h);
  h = run_res(g, mid2_, h, emb);
  for (int i = L - 1; i >= 0; --i) {
    h = g.concat(h, skips[i]);
    for (const ResBlock& r : levels_[i].up) h = run_res(g, r, h, emb);
    if (time_layers) h = run_attn(g, levels_[i].tattn_up, h);
    if (i > 0) h = g.upsample2(h);
  }
  h = g.silu(g.group_norm(h, out_norm_.g, out_norm_.b, out_norm_.groups));
  return g.conv(h, conv_out_.w, conv_out_.b, conv_out_.s);
}

template <class T>
BasicVideo<T> UNet<T>::forward(std::span<const T> params, const BasicVideo<T>& x_in,
                               double c_noise, const Conditioning& cond, bool time_layers,
                               ForwardTrace* trace) const {
  if (params.size() != num_params_)
    throw ValidationError("UNet::forward: parameter count mismatch");
  Graph<T> g(params);
  const Id x = g.input(inject_conditioning(x_in, cond, cfg_));
  const Id out = build(g, x, c_noise, cond.lambda_c, time_layers);
  if (trace) {
    trace->temporal_attention_calls += g.temporal_attention_calls();
    trace->spatial_attention_calls += g.spatial_attention_calls();
  }
  const Tensor<T>& o = g.value(out);
  BasicVideo<T> v(o.f, o.h, o.w);
  std::copy(o.data.begin(), o.data.end(), v.data.begin());
  return v;
}

template <class T>
std::vector<T> UNet<T>::embedding(std::span<const T> params, double c_noise,
                                  double lambda_c) const {
  Graph<T> g(params);
  const Id e = embed(g, c_noise, lambda_c);
  return g.value(e).data;
}

template <class T>
std::vector<std::string> UNet<T>::layer_graph(bool time_layers) const {
  std::vector<std::string> names{"embed", "conv_in"};
  const int L = cfg_.depth();
  for (int i = 0; i < L; ++i) {
    for (std::size_t b = 0; b < levels_[i].down.size(); ++b)
      names.push_back("down" + std::to_string(i) + ".res" + std::to_string(b));
    if (time_layers) names.push_back("down" + std::to_string(i) + ".temporal_attention");
    if (i < L - 1) names.push_back("down" + std::to_string(i) + ".avg_pool");
  }
  names.push_back("mid.res0");
  if (cfg_.bottleneck_attention) names.push_back("mid.spatial_attention");
  if (time_layers) names.push_back("mid.temporal_attention");
  names.push_back("mid.res1");
  for (int i = L - 1; i >= 0; --i) {
    names.push_back("up" + std::to_string(i) + ".concat_skip");
    for (std::size_t b = 0; b < levels_[i].up.size(); ++b)
      names.push_back("up" + std::to_string(i) + ".res" + std::to_string(b));
    if (time_layers) names.push_back("up" + std::to_string(i) + ".temporal_attention");
    if (i > 0) names.push_back("up" + std::to_string(i) + ".upsample");
  }
  names.push_back("conv_out");
  return names;
}

template class UNet<float>;
template class UNet<double>;
template Tensor<float> inject_conditioning(const BasicVideo<float>&, const Conditioning&,
                                           const NetConfig&);
template Tensor<double> inject_conditioning(const BasicVideo<double>&, const Conditioning&,
                                            const NetConfig&);

void ema_update(EmaState& ema, std::span<const float> params) {
  if (ema.shadow.size() != params.size())
    throw ValidationError("ema_update: shadow has " + std::to_string(ema.shadow.size()) +
                          " entries, parameters " + std::to_string(params.size()));
  const float d = static_cast<float>(ema.decay);
  const float a = static_cast<float>(1.0 - ema.decay);
  for (std::size_t i = 0; i < params.size(); ++i)
    ema.shadow[i] = d * ema.shadow[i] + a * params[i];
}

double probe_loss_and_grad(const UNet<double>& net, std::span<const double> params,
                           const GradProbe& probe, std::vector<double>* grad) {
  const Precond pc = precondition_coeffs(probe.sigma, probe.stats);
  VideoD noisy = probe.y;
  for (std::size_t i = 0; i < noisy.size(); ++i) noisy.data[i] += probe.noise.data[i];
  VideoD scaled = noisy;
  for (double& v : scaled.data) v *= pc.c_in;

  std::span<double> gspan;
  if (grad) {
    grad->assign(params.size(), 0.0);
    gspan = *grad;
  }
  Graph<double> g(params, gspan);
  const auto x = g.input(inject_conditioning(scaled, probe.cond, net.config()));
  const auto out = net.build(g, x, pc.c_noise, probe.cond.lambda_c, probe.time_layers);
  const Tensor<double>& F = g.value(out);

  const double n = static_cast<double>(F.size());
  double loss = 0.0;
  Tensor<double> dF(F.c, F.f, F.h, F.w);
  for (std::size_t i = 0; i < F.size(); ++i) {
    const double e = pc.c_skip * noisy.data[i] + pc.c_out * F.data[i] - probe.y.data[i];
    loss += e * e;
    dF.data[i] = 2.0 * e * pc.c_out / n;
  }
  if (grad) g.backward(out, dF);
  return loss / n;
}

GradCheckResult gradient_check(const UNet<double>& net, std::span<const double> params,
                               const GradProbe& probe, GradCheckOptions opts) {
  std::vector<double> grad;
  probe_loss_and_grad(net, params, probe, &grad);
  if (opts.flip_sign)
    for (double& v : grad) v = -v;

  // distinct random parameter indices
  Rng rng(opts.seed);
  std::vector<std::size_t> idx(params.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const std::size_t n = std::min<std::size_t>(opts.n_params, idx.size());
  for (std::size_t i = 0; i < n; ++i)
    std::swap(idx[i], idx[i + rng.uniform_index(idx.size() - i)]);

  std::vector<double> p(params.begin(), params.end());
  GradCheckResult res;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = idx[i];
    const double orig = p[k];
    p[k] = orig + opts.step;
    const double up = probe_loss_and_grad(net, p, probe, nullptr);
    p[k] = orig - opts.step;
    const double down = probe_loss_and_grad(net, p, probe, nullptr);
    p[k] = orig;
    const double numeric = (up - down) / (2.0 * opts.step);
    const double analytic = grad[k];
    const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-7});
    res.max_rel_error = std::max(res.max_rel_error, std::abs(numeric - analytic) / denom);
    res.max_abs_grad = std::max(res.max_abs_grad, std::abs(analytic));
    ++res.checked;
  }
  return res;
}

}  // namespace echoedm
