#pragma once

// Template warping and alpha compositing. Templates are warped into the
// canvas by inverse-mapping each canvas pixel through the pose and bilinearly
// sampling the template with zero padding, then folded front-to-back with the
// over operator. Everything is differentiable w.r.t. poses, presences and
// template values.

#include "caps/distributions.hpp"
#include "caps/pose.hpp"
#include "caps/tensor.hpp"

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

namespace caps {

inline constexpr double kSigmaFloor = 0.2;
inline constexpr double kAlphaEps = 1e-8;

struct Template {
  Tensor color;  // h_T x w_T, values in [0,1]
  Tensor alpha;  // h_T x w_T, values in [0,1]
};

struct Canvas {
  Tensor color;  // H x W
  Tensor alpha;  // H x W
};

inline Canvas zero_canvas(std::size_t h, std::size_t w) {
  return {Tensor::zeros({h, w}), Tensor::zeros({h, w})};
}

namespace detail {
// constant coordinate grids, cached per thread (immutable, grad-free)
inline Tensor grid_x(std::size_t h, std::size_t w) {
  thread_local std::size_t ch = 0, cw = 0;
  thread_local Tensor cached;
  if (ch != h || cw != w || !cached.defined()) {
    std::vector<double> v(h * w);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) v[y * w + x] = static_cast<double>(x);
    cached = Tensor::from({h, w}, std::move(v));
    ch = h;
    cw = w;
  }
  return cached;
}
inline Tensor grid_y(std::size_t h, std::size_t w) {
  thread_local std::size_t ch = 0, cw = 0;
  thread_local Tensor cached;
  if (ch != h || cw != w || !cached.defined()) {
    std::vector<double> v(h * w);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) v[y * w + x] = static_cast<double>(y);
    cached = Tensor::from({h, w}, std::move(v));
    ch = h;
    cw = w;
  }
  return cached;
}
}  // namespace detail

// Inverse-warp both template planes through the pose onto an H x W canvas.
inline Canvas warp_template(const Template& tpl, const Pose& pose, std::size_t h,
                            std::size_t w) {
  Pose inv = invert(pose);  // rejects singular poses
  Tensor a = reshape(inv.offset, {6});
  Tensor i00 = take(a, {0}) + 1.0, i01 = take(a, {1}), i02 = take(a, {2});
  Tensor i10 = take(a, {3}), i11 = take(a, {4}) + 1.0, i12 = take(a, {5});
  Tensor gx = detail::grid_x(h, w), gy = detail::grid_y(h, w);
  Tensor sx = add(add(mul(i00, gx), mul(i01, gy)), i02);
  Tensor sy = add(add(mul(i10, gx), mul(i11, gy)), i12);
  return {grid_sample(tpl.color, sx, sy), grid_sample(tpl.alpha, sx, sy)};
}

// Standard over:  alpha_o = alpha_a + alpha_b (1 - alpha_a)
//                 C_o     = (C_a alpha_a + C_b alpha_b (1 - alpha_a)) / alpha_o
// Fully transparent output pixels get color 0; the quotient denominator is
// floored at kAlphaEps so the value and its gradient stay defined there.
inline Canvas over(const Canvas& top, const Canvas& bottom) {
  if (top.color.shape() != bottom.color.shape())
    throw ShapeError("over: canvas shapes " + shape_str(top.color.shape()) + " and " +
                     shape_str(bottom.color.shape()) + " differ");
  Tensor keep = sub(Tensor::scalar(1.0), top.alpha);
  Tensor alpha_b = mul(bottom.alpha, keep);
  Tensor alpha_o = add(top.alpha, alpha_b);
  Tensor numer = add(mul(top.color, top.alpha), mul(bottom.color, alpha_b));
  Tensor color = div(numer, clamp_min(alpha_o, kAlphaEps));
  return {color, alpha_o};
}

namespace detail {

// One fused node for the whole warp + presence-weighted over fold. Performs
// pixel-for-pixel the same arithmetic, in the same order, as the op-by-op
// fold of over(warp_template(...)), so values are bit-identical; the backward
// replays the fold per pixel and reverses it. Inputs per capsule: inverse
// pose entries (6), color plane, alpha plane, presence scalar.
inline Tensor fused_composite(const std::vector<Tensor>& inv_entries,
                              const std::vector<Template>& templates,
                              const std::vector<Tensor>& presences, std::size_t h,
                              std::size_t w) {
  const std::size_t n = templates.size();
  const std::ptrdiff_t th = static_cast<std::ptrdiff_t>(templates[0].color.shape()[0]);
  const std::ptrdiff_t tw = static_cast<std::ptrdiff_t>(templates[0].color.shape()[1]);

  std::vector<Tensor> inputs;
  for (std::size_t i = 0; i < n; ++i) {
    if (templates[i].color.shape() != templates[0].color.shape() ||
        templates[i].alpha.shape() != templates[0].color.shape())
      throw ShapeError("composite_scene: template planes must share one shape");
    inputs.push_back(inv_entries[i]);
    inputs.push_back(templates[i].color);
    inputs.push_back(templates[i].alpha);
    inputs.push_back(presences[i]);
  }

  auto sample = [th, tw](const std::vector<double>& src, double x, double y) {
    const double fx0 = std::floor(x), fy0 = std::floor(y);
    const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(fx0);
    const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(fy0);
    const double ax = x - fx0, ay = y - fy0;
    auto at = [&](std::ptrdiff_t yy, std::ptrdiff_t xx) -> double {
      if (yy < 0 || yy >= th || xx < 0 || xx >= tw) return 0.0;
      return src[static_cast<std::size_t>(yy * tw + xx)];
    };
    return (1 - ax) * (1 - ay) * at(y0, x0) + ax * (1 - ay) * at(y0, x0 + 1) +
           (1 - ax) * ay * at(y0 + 1, x0) + ax * ay * at(y0 + 1, x0 + 1);
  };

  std::vector<double> out(2 * h * w, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double pc = 0.0, pa = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const auto& inv = inputs[4 * i].values();
        const double sx = inv[0] * x + inv[1] * y + inv[2];
        const double sy = inv[3] * x + inv[4] * y + inv[5];
        const double cc = sample(inputs[4 * i + 1].values(), sx, sy);
        const double aa = sample(inputs[4 * i + 2].values(), sx, sy);
        const double ca = inputs[4 * i + 3][0] * aa;
        const double ab = pa * (1.0 - ca);
        const double ao = ca + ab;
        const double numer = cc * ca + pc * ab;
        pc = numer / std::max(ao, kAlphaEps);
        pa = ao;
      }
      out[y * w + x] = pc;
      out[h * w + y * w + x] = pa;
    }

  return make_op(
      "composite", {2, h, w}, std::move(out), inputs,
      [inputs, n, h, w, th, tw, sample](TensorNode& o) {
        const std::size_t hw = h * w;
        std::vector<double> pcs(n + 1), pas(n + 1), sxs(n), sys(n), ccs(n), aas(n);
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) {
            const std::size_t p = y * w + x;
            double gc = o.grad[p], ga = o.grad[hw + p];
            if (gc == 0.0 && ga == 0.0) continue;
            // replay the fold, keeping intermediates
            pcs[0] = 0.0;
            pas[0] = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
              const auto& inv = inputs[4 * i].values();
              sxs[i] = inv[0] * x + inv[1] * y + inv[2];
              sys[i] = inv[3] * x + inv[4] * y + inv[5];
              ccs[i] = sample(inputs[4 * i + 1].values(), sxs[i], sys[i]);
              aas[i] = sample(inputs[4 * i + 2].values(), sxs[i], sys[i]);
              const double ca = inputs[4 * i + 3][0] * aas[i];
              const double ab = pas[i] * (1.0 - ca);
              const double ao = ca + ab;
              const double numer = ccs[i] * ca + pcs[i] * ab;
              pcs[i + 1] = numer / std::max(ao, kAlphaEps);
              pas[i + 1] = ao;
            }
            // reverse
            for (std::size_t i = n; i-- > 0;) {
              TensorNode* ninv = inputs[4 * i].node();
              TensorNode* ncol = inputs[4 * i + 1].node();
              TensorNode* nalp = inputs[4 * i + 2].node();
              TensorNode* npre = inputs[4 * i + 3].node();
              const double t = npre->value[0];
              const double ca = t * aas[i];
              const double ab = pas[i] * (1.0 - ca);
              const double ao = ca + ab;
              const double denom = std::max(ao, kAlphaEps);
              const double numer = ccs[i] * ca + pcs[i] * ab;
              const double d_numer = gc / denom;
              const double d_ao_from_clamp =
                  ao >= kAlphaEps ? gc * (-numer / (denom * denom)) : 0.0;
              const double d_ao = ga + d_ao_from_clamp;
              double d_cc = d_numer * ca;
              double d_ca = d_numer * ccs[i] + d_ao;
              double d_ab = d_numer * pcs[i] + d_ao;
              const double d_pc_prev = d_numer * ab;
              const double d_pa_prev = d_ab * (1.0 - ca);
              d_ca -= d_ab * pas[i];
              if (npre->requires_grad) {
                npre->ensure_grad();
                npre->grad[0] += d_ca * aas[i];
              }
              double d_aa = d_ca * t;
              // bilinear backward for both planes
              const double fx0 = std::floor(sxs[i]), fy0 = std::floor(sys[i]);
              const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(fx0);
              const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(fy0);
              const double ax = sxs[i] - fx0, ay = sys[i] - fy0;
              auto in = [&](std::ptrdiff_t yy, std::ptrdiff_t xx) {
                return yy >= 0 && yy < th && xx >= 0 && xx < tw;
              };
              double d_sx = 0.0, d_sy = 0.0;
              auto plane = [&](TensorNode* node, double g) {
                const auto& v = node->value;
                auto val = [&](std::ptrdiff_t yy, std::ptrdiff_t xx) -> double {
                  return in(yy, xx) ? v[static_cast<std::size_t>(yy * tw + xx)] : 0.0;
                };
                if (node->requires_grad && g != 0.0) {
                  node->ensure_grad();
                  auto acc = [&](std::ptrdiff_t yy, std::ptrdiff_t xx, double wgt) {
                    if (in(yy, xx))
                      node->grad[static_cast<std::size_t>(yy * tw + xx)] += g * wgt;
                  };
                  acc(y0, x0, (1 - ax) * (1 - ay));
                  acc(y0, x0 + 1, ax * (1 - ay));
                  acc(y0 + 1, x0, (1 - ax) * ay);
                  acc(y0 + 1, x0 + 1, ax * ay);
                }
                const double v00 = val(y0, x0), v10 = val(y0, x0 + 1);
                const double v01 = val(y0 + 1, x0), v11 = val(y0 + 1, x0 + 1);
                d_sx += g * ((1 - ay) * (v10 - v00) + ay * (v11 - v01));
                d_sy += g * ((1 - ax) * (v01 - v00) + ax * (v11 - v10));
              };
              plane(ncol, d_cc);
              plane(nalp, d_aa);
              if (ninv->requires_grad && (d_sx != 0.0 || d_sy != 0.0)) {
                ninv->ensure_grad();
                ninv->grad[0] += d_sx * x;
                ninv->grad[1] += d_sx * y;
                ninv->grad[2] += d_sx;
                ninv->grad[3] += d_sy * x;
                ninv->grad[4] += d_sy * y;
                ninv->grad[5] += d_sy;
              }
              gc = d_pc_prev;
              ga = d_pa_prev;
            }
          }
      });
}

}  // namespace detail

// Fold of over() in ascending capsule index; index i is drawn on top of
// 0..i-1, so the highest index occludes. Each warped alpha is premultiplied
// by that capsule's presence. Runs as one fused node; values match the
// op-by-op fold exactly.
inline Canvas composite_scene(const std::vector<Template>& templates,
                              const std::vector<Pose>& poses,
                              const std::vector<Tensor>& presences, std::size_t h,
                              std::size_t w) {
  if (templates.size() != poses.size() || templates.size() != presences.size())
    throw ShapeError("composite_scene: got " + std::to_string(templates.size()) +
                     " templates, " + std::to_string(poses.size()) + " poses, " +
                     std::to_string(presences.size()) + " presences");
  if (templates.empty()) return zero_canvas(h, w);
  std::vector<Tensor> inv_entries;
  for (const auto& pose : poses) {
    Pose inv = invert(pose);  // rejects singular poses
    inv_entries.push_back(
        add(reshape(inv.offset, {6}), Tensor::from({6}, {1, 0, 0, 0, 1, 0})));
  }
  Tensor packed = detail::fused_composite(inv_entries, templates, presences, h, w);
  Tensor color = reshape(slice0(packed, 0, 1), {h, w});
  Tensor alpha = reshape(slice0(packed, 1, 1), {h, w});
  return {color, alpha};
}

// The canvas flattened over an opaque black display background; this is the
// pixel mean the likelihood sees, so presence fades a template's visible
// intensity rather than only its (normalized-away) alpha weight.
inline Tensor flatten(const Canvas& scene) { return mul(scene.color, scene.alpha); }

// Sum over pixels of log N(x; flattened scene, sigma). sigma is floored at 0.2.
inline Tensor image_log_likelihood(const Tensor& image, const Canvas& scene,
                                   const Tensor& sigma) {
  if (image.shape() != scene.color.shape())
    throw ShapeError("image_log_likelihood: image " + shape_str(image.shape()) +
                     " vs scene " + shape_str(scene.color.shape()));
  Tensor s = clamp_min(sigma, kSigmaFloor);
  return sum(normal_log_prob(image, flatten(scene), s));
}

inline Tensor image_log_likelihood(const Tensor& image, const Canvas& scene, double sigma) {
  return image_log_likelihood(image, scene, Tensor::scalar(sigma));
}

// ---- 8-bit binary PGM export ----

inline std::vector<std::uint8_t> quantize_gray(const std::vector<double>& v) {
  std::vector<std::uint8_t> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double c = std::min(std::max(v[i], 0.0), 1.0);
    out[i] = static_cast<std::uint8_t>(std::lround(c * 255.0));
  }
  return out;
}

inline void write_pgm(const std::string& path, const Tensor& gray) {
  if (gray.shape().size() != 2)
    throw ShapeError("write_pgm: expected 2-d image, got " + shape_str(gray.shape()));
  const std::size_t h = gray.shape()[0], w = gray.shape()[1];
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("write_pgm: cannot open " + path);
  f << "P5\n" << w << ' ' << h << "\n255\n";
  auto bytes = quantize_gray(gray.values());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("write_pgm: short write to " + path);
}

}  // namespace caps
