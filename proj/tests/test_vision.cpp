#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "sqvlm/gradcheck.hpp"
#include "sqvlm/vision.hpp"

using namespace sqvlm;

namespace {

// ---------------------------------------------------------------------------
// Brute-force scalar re-implementation of the EM clustering and the prototype
// redistribution, written against plain vectors so it shares no code with the
// tensor engine.

using Mat = std::vector<std::vector<double>>;

Mat tensor_rows(const Tensor& t) {
  Mat rows(t.dim(0), std::vector<double>(t.dim(1)));
  for (int i = 0; i < t.dim(0); ++i)
    for (int j = 0; j < t.dim(1); ++j)
      rows[i][j] = t.value()[i * t.dim(1) + j];
  return rows;
}

std::vector<double> scalar_linear(const Mat& w, const std::vector<double>& b,
                                  const std::vector<double>& x) {
  std::vector<double> out(w.size(), 0.0);
  for (std::size_t o = 0; o < w.size(); ++o) {
    for (std::size_t i = 0; i < x.size(); ++i) out[o] += w[o][i] * x[i];
    out[o] += b[o];
  }
  return out;
}

std::vector<double> scalar_layernorm(const std::vector<double>& x,
                                     const std::vector<double>& g,
                                     const std::vector<double>& b) {
  const int n = static_cast<int>(x.size());
  double mean = 0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  std::vector<double> out(x.size());
  for (int i = 0; i < n; ++i)
    out[i] = g[i] * (x[i] - mean) / std::sqrt(var + 1e-8) + b[i];
  return out;
}

struct ScalarBank {
  Mat qw, kw, vw, zw;
  std::vector<double> qb, kb, vb, zb;
  std::vector<double> kng, knb, vng, vnb;
  Mat c;

  static ScalarBank from(const PrototypeBank& bank) {
    ScalarBank s;
    auto grab = [](const Linear& lin, Mat& w, std::vector<double>& b) {
      Tensor wt = const_cast<Linear&>(lin).weight();
      Tensor bt = const_cast<Linear&>(lin).bias();
      w = tensor_rows(wt);
      b = bt.value();
    };
    grab(bank.q(), s.qw, s.qb);
    grab(bank.k(), s.kw, s.kb);
    grab(bank.v(), s.vw, s.vb);
    grab(bank.z(), s.zw, s.zb);
    s.kng = const_cast<LayerNorm&>(bank.k_norm()).gain().value();
    s.knb = const_cast<LayerNorm&>(bank.k_norm()).bias().value();
    s.vng = const_cast<LayerNorm&>(bank.v_norm()).gain().value();
    s.vnb = const_cast<LayerNorm&>(bank.v_norm()).bias().value();
    s.c = tensor_rows(bank.centers());
    return s;
  }
};

// E/M iterations exactly as written: M = softmax_tokens(q(C) k(Z)^T),
// C = M v(Z), repeated T times from the bank's trainable centers.
std::pair<Mat, Mat> scalar_em(const ScalarBank& s, const Mat& z, int iters) {
  const std::size_t l = z.size();
  Mat kz(l), vz(l);
  for (std::size_t i = 0; i < l; ++i) {
    kz[i] = scalar_layernorm(scalar_linear(s.kw, s.kb, z[i]), s.kng, s.knb);
    vz[i] = scalar_layernorm(scalar_linear(s.vw, s.vb, z[i]), s.vng, s.vnb);
  }
  Mat c = s.c;
  Mat m;
  for (int t = 0; t < iters; ++t) {
    m.assign(c.size(), std::vector<double>(l, 0.0));
    for (std::size_t a = 0; a < c.size(); ++a) {
      const std::vector<double> qa = scalar_linear(s.qw, s.qb, c[a]);
      double mx = -1e300;
      for (std::size_t i = 0; i < l; ++i) {
        double dot = 0;
        for (std::size_t j = 0; j < qa.size(); ++j) dot += qa[j] * kz[i][j];
        m[a][i] = dot;
        mx = std::max(mx, dot);
      }
      double sum = 0;
      for (std::size_t i = 0; i < l; ++i) {
        m[a][i] = std::exp(m[a][i] - mx);
        sum += m[a][i];
      }
      for (std::size_t i = 0; i < l; ++i) m[a][i] /= sum;
    }
    Mat c_next(c.size(), std::vector<double>(z[0].size(), 0.0));
    for (std::size_t a = 0; a < c.size(); ++a)
      for (std::size_t i = 0; i < l; ++i)
        for (std::size_t j = 0; j < z[0].size(); ++j)
          c_next[a][j] += m[a][i] * vz[i][j];
    c = c_next;
  }
  return {m, c};
}

// redistribution via unit-normalized cosine, straight from the formula
Mat scalar_enhance(const ScalarBank& s, const Mat& z, const Mat& c_out) {
  const std::size_t k = c_out.size();
  Mat out = z;
  for (std::size_t i = 0; i < z.size(); ++i) {
    std::vector<double> acc(z[0].size(), 0.0);
    double nz = 0;
    for (double v : z[i]) nz += v * v;
    nz = std::sqrt(nz);
    for (std::size_t j = 0; j < k; ++j) {
      double nc = 0, dot = 0;
      for (std::size_t d = 0; d < z[0].size(); ++d) {
        nc += c_out[j][d] * c_out[j][d];
        dot += c_out[j][d] * z[i][d];
      }
      nc = std::sqrt(nc);
      const double cos = dot / std::max(nz * nc, 1e-8);
      for (std::size_t d = 0; d < z[0].size(); ++d) acc[d] += cos * c_out[j][d];
    }
    for (auto& v : acc) v /= static_cast<double>(k);
    const std::vector<double> zed = scalar_linear(s.zw, s.zb, acc);
    for (std::size_t d = 0; d < z[0].size(); ++d) out[i][d] += zed[d];
  }
  return out;
}

VisionConfig tiny_cfg(int k, int t) {
  VisionConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.channels = 1;
  cfg.d_vision = 4;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.prototypes = k;
  cfg.em_iters = t;
  cfg.d_model = 4;
  return cfg;
}

}  // namespace

TEST_CASE("encode_image: 32x32 image with patch 8 gives 16 tokens") {
  VisionConfig cfg;  // defaults: 32 / 8 / d_vision 64
  std::mt19937_64 rng(3);
  VisionTower tower(cfg, rng);
  Tensor pixels = Tensor::full({32, 32, 3}, 0.25);
  ImageTokens toks = tower.encode_image(pixels);
  CHECK(toks.z.shape() == Shape{16, 64});
  CHECK_FALSE(toks.enhanced);
}

TEST_CASE("encode_image rejects wrong spatial size") {
  VisionConfig cfg;
  std::mt19937_64 rng(3);
  VisionTower tower(cfg, rng);
  CHECK_THROWS_AS(tower.encode_image(Tensor::zeros({16, 16, 3})), ShapeError);
}

TEST_CASE("all-zero image with zero patch bias gives equal pre-attention embeddings") {
  VisionConfig cfg;
  std::mt19937_64 rng(4);
  VisionTower tower(cfg, rng);
  // bias is zero-initialized already; make it explicit
  for (auto& v : tower.patch_embed().bias().value()) v = 0.0;
  Tensor pre = tower.patch_embed().forward(
      extract_patches(Tensor::zeros({32, 32, 3}), cfg));
  for (int i = 1; i < pre.dim(0); ++i)
    for (int j = 0; j < pre.dim(1); ++j)
      CHECK(pre.value()[i * pre.dim(1) + j] == pre.value()[j]);
}

TEST_CASE("images differing in one patch differ in that token's embedding") {
  VisionConfig cfg;
  std::mt19937_64 rng(5);
  VisionTower tower(cfg, rng);
  std::mt19937_64 prng(6);
  Tensor a = Tensor::randn({32, 32, 3}, prng, 0.1);
  for (auto& v : a.value()) v = std::abs(v);
  Tensor b = a.clone();
  // patch (1,2) occupies rows 8..15, cols 16..23
  b.value()[(8 * 32 + 16) * 3] += 0.5;
  Tensor ea = tower.patch_embed().forward(extract_patches(a, cfg));
  Tensor eb = tower.patch_embed().forward(extract_patches(b, cfg));
  const int tok = 1 * 4 + 2;
  bool differs = false;
  for (int j = 0; j < cfg.d_vision; ++j)
    differs = differs ||
              ea.value()[tok * cfg.d_vision + j] != eb.value()[tok * cfg.d_vision + j];
  CHECK(differs);
}

TEST_CASE("em_cluster assignment rows sum to 1 within 1e-12 for every T") {
  for (int t = 1; t <= 3; ++t) {
    std::mt19937_64 rng(7);
    VisionTower tower(tiny_cfg(3, t), rng);
    std::mt19937_64 zr(8);
    ImageTokens toks{Tensor::randn({5, 4}, zr, 1.0), false};
    auto [m, c_out] = tower.em_cluster(toks);
    REQUIRE(m.shape() == Shape{3, 5});
    for (int a = 0; a < 3; ++a) {
      double sum = 0;
      for (int i = 0; i < 5; ++i) sum += m.value()[a * 5 + i];
      CHECK_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-12));
    }
    CHECK(c_out.shape() == Shape{3, 4});
  }
}

TEST_CASE("em_cluster with zero q and T=1 yields the mean of v(Z) rows") {
  std::mt19937_64 rng(9);
  VisionTower tower(tiny_cfg(2, 1), rng);
  for (auto& v : tower.proto().q().weight().value()) v = 0.0;
  for (auto& v : tower.proto().q().bias().value()) v = 0.0;
  std::mt19937_64 zr(10);
  ImageTokens toks{Tensor::randn({3, 4}, zr, 1.0), false};
  auto [m, c_out] = tower.em_cluster(toks);
  for (double v : m.value()) CHECK_THAT(v, Catch::Matchers::WithinAbs(1.0 / 3, 1e-15));

  const ScalarBank s = ScalarBank::from(tower.proto());
  const Mat z = tensor_rows(toks.z);
  // column means of the normalized v-projection
  Mat vz(z.size());
  for (std::size_t i = 0; i < z.size(); ++i)
    vz[i] = scalar_layernorm(scalar_linear(s.vw, s.vb, z[i]), s.vng, s.vnb);
  for (int j = 0; j < 4; ++j) {
    double mean = (vz[0][j] + vz[1][j] + vz[2][j]) / 3.0;
    CHECK_THAT(c_out.value()[j], Catch::Matchers::WithinAbs(mean, 1e-12));
    CHECK_THAT(c_out.value()[4 + j], Catch::Matchers::WithinAbs(mean, 1e-12));
  }
}

TEST_CASE("em_cluster matches the brute-force oracle on K=2, L=3, d=4 for T=1 and T=2") {
  for (int t : {1, 2}) {
    std::mt19937_64 rng(11);
    VisionTower tower(tiny_cfg(2, t), rng);
    std::mt19937_64 zr(12);
    ImageTokens toks{Tensor::randn({3, 4}, zr, 1.0), false};
    auto [m, c_out] = tower.em_cluster(toks);

    const ScalarBank s = ScalarBank::from(tower.proto());
    auto [om, oc] = scalar_em(s, tensor_rows(toks.z), t);
    for (int a = 0; a < 2; ++a)
      for (int i = 0; i < 3; ++i)
        CHECK_THAT(m.value()[a * 3 + i],
                   Catch::Matchers::WithinAbs(om[a][i], 1e-10));
    for (int a = 0; a < 2; ++a)
      for (int j = 0; j < 4; ++j)
        CHECK_THAT(c_out.value()[a * 4 + j],
                   Catch::Matchers::WithinAbs(oc[a][j], 1e-10));
  }
}

TEST_CASE("enhance_tokens matches the brute-force oracle within 1e-10") {
  std::mt19937_64 rng(13);
  VisionTower tower(tiny_cfg(2, 2), rng);
  std::mt19937_64 zr(14);
  ImageTokens toks{Tensor::randn({3, 4}, zr, 1.0), false};
  auto [m, c_out] = tower.em_cluster(toks);
  ImageTokens enhanced = tower.enhance_tokens(toks, c_out);
  REQUIRE(enhanced.enhanced);

  const ScalarBank s = ScalarBank::from(tower.proto());
  auto [om, oc] = scalar_em(s, tensor_rows(toks.z), 2);
  (void)om;
  const Mat expected = scalar_enhance(s, tensor_rows(toks.z), oc);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j)
      CHECK_THAT(enhanced.z.value()[i * 4 + j],
                 Catch::Matchers::WithinAbs(expected[i][j], 1e-10));
}

TEST_CASE("enhance_tokens with zero z-projection is a bit-exact identity") {
  std::mt19937_64 rng(15);
  VisionTower tower(tiny_cfg(3, 1), rng);
  for (auto& v : tower.proto().z().weight().value()) v = 0.0;
  for (auto& v : tower.proto().z().bias().value()) v = 0.0;
  std::mt19937_64 zr(16);
  ImageTokens toks{Tensor::randn({4, 4}, zr, 1.0), false};
  auto [m, c_out] = tower.em_cluster(toks);
  ImageTokens out = tower.enhance_tokens(toks, c_out);
  CHECK(out.z.value() == toks.z.value());
}

TEST_CASE("K=1 with prototype equal to the token adds exactly z(C_1)") {
  std::mt19937_64 rng(17);
  VisionTower tower(tiny_cfg(1, 1), rng);
  std::mt19937_64 zr(18);
  Tensor row = Tensor::randn({1, 4}, zr, 1.0);
  ImageTokens toks{row.clone(), false};
  Tensor c_out = row.clone();
  ImageTokens out = tower.enhance_tokens(toks, c_out);
  // S_c(C_1, Z) must be exactly 1, so the pooled vector is exactly C_1
  Tensor zc = tower.proto().z().forward(c_out);
  for (int j = 0; j < 4; ++j)
    CHECK(out.z.value()[j] == row.value()[j] + zc.value()[j]);
}

TEST_CASE("permuting prototype rows permutes M and C_out and leaves enhancement unchanged") {
  const std::vector<int> perm = {2, 0, 1};
  std::mt19937_64 rng(19);
  VisionTower tower(tiny_cfg(3, 2), rng);
  std::mt19937_64 rng2(19);
  VisionTower permuted(tiny_cfg(3, 2), rng2);
  Tensor& c0 = tower.proto().centers();
  Tensor& c1 = permuted.proto().centers();
  for (int a = 0; a < 3; ++a)
    for (int j = 0; j < 4; ++j) c1.value()[a * 4 + j] = c0.value()[perm[a] * 4 + j];

  std::mt19937_64 zr(20);
  ImageTokens toks{Tensor::randn({5, 4}, zr, 1.0), false};
  auto [m0, cout0] = tower.em_cluster(toks);
  auto [m1, cout1] = permuted.em_cluster(toks);
  for (int a = 0; a < 3; ++a) {
    for (int i = 0; i < 5; ++i)
      CHECK(m1.value()[a * 5 + i] == m0.value()[perm[a] * 5 + i]);
    for (int j = 0; j < 4; ++j)
      CHECK(cout1.value()[a * 4 + j] == cout0.value()[perm[a] * 4 + j]);
  }
  ImageTokens e0 = tower.enhance_tokens(toks, cout0);
  ImageTokens e1 = permuted.enhance_tokens(toks, cout1);
  for (std::size_t i = 0; i < e0.z.numel(); ++i)
    CHECK_THAT(e1.z.value()[i], Catch::Matchers::WithinAbs(e0.z.value()[i], 1e-12));
}

TEST_CASE("pipeline order is enforced") {
  std::mt19937_64 rng(21);
  VisionTower tower(tiny_cfg(2, 1), rng);
  std::mt19937_64 zr(22);
  ImageTokens toks{Tensor::randn({3, 4}, zr, 1.0), false};
  CHECK_THROWS_AS(tower.project(toks), StateError);
  auto [m, c_out] = tower.em_cluster(toks);
  ImageTokens enhanced = tower.enhance_tokens(toks, c_out);
  CHECK_THROWS_AS(tower.em_cluster(enhanced), StateError);
  CHECK_THROWS_AS(tower.enhance_tokens(enhanced, c_out), StateError);
  CHECK(tower.project(enhanced).shape() == Shape{3, 4});
}

TEST_CASE("projector output shape and zero second layer") {
  VisionConfig cfg;
  cfg.d_model = 48;
  std::mt19937_64 rng(23);
  VisionTower tower(cfg, rng);
  std::mt19937_64 zr(24);
  ImageTokens toks{Tensor::randn({16, 64}, zr, 1.0), true};
  CHECK(tower.project(toks).shape() == Shape{16, 48});

  for (auto& v : tower.proj_fc2().weight().value()) v = 0.0;
  Tensor h = tower.project(toks);
  for (double v : h.value()) CHECK(v == 0.0);
}

TEST_CASE("projector weights pass finite-difference gradient checks") {
  std::mt19937_64 rng(25);
  VisionTower tower(tiny_cfg(2, 1), rng);
  std::mt19937_64 zr(26);
  Tensor z = Tensor::randn({3, 4}, zr, 1.0);
  Tensor w = Tensor::randn({3, 4}, zr, 1.0);
  auto forward = [&] {
    ImageTokens toks{z, true};
    return sum_all(mul(tower.project(toks), w));
  };
  const double err = max_rel_grad_err(
      forward, {tower.proj_fc1().weight(), tower.proj_fc1().bias(),
                tower.proj_fc2().weight(), tower.proj_fc2().bias()});
  CHECK(err < 1e-4);
}

TEST_CASE("full tower pipeline is differentiable end to end") {
  std::mt19937_64 rng(27);
  VisionTower tower(tiny_cfg(2, 2), rng);
  std::mt19937_64 zr(28);
  Tensor pixels = Tensor::randn({8, 8, 1}, zr, 0.3);
  for (auto& v : pixels.value()) v = std::min(1.0, std::abs(v));
  Tensor w = Tensor::randn({4, 4}, zr, 1.0);

  NamedTensors params;
  tower.params(params);
  Graph g;
  Tensor loss = sum_all(mul(tower.forward(pixels), w));
  g.backward(loss);
  for (auto& [name, t] : params) {
    INFO(name);
    REQUIRE(t.has_grad());
    double norm = 0;
    for (double v : t.grad_view()) {
      REQUIRE(std::isfinite(v));
      norm += v * v;
    }
    CHECK(norm > 0.0);
  }
}

TEST_CASE("prototype path gradients agree with finite differences") {
  std::mt19937_64 rng(29);
  VisionTower tower(tiny_cfg(2, 2), rng);
  std::mt19937_64 zr(30);
  Tensor z = Tensor::randn({4, 4}, zr, 1.0);
  Tensor w = Tensor::randn({4, 4}, zr, 1.0);
  auto forward = [&] {
    ImageTokens toks{z, false};
    auto [m, c_out] = tower.em_cluster(toks);
    (void)m;
    ImageTokens enhanced = tower.enhance_tokens(toks, c_out);
    return sum_all(mul(tower.project(enhanced), w));
  };
  PrototypeBank& p = tower.proto();
  const double err = max_rel_grad_err(
      forward, {p.centers(), p.q().weight(), p.k().weight(), p.v().weight(),
                p.z().weight(), p.k_norm().gain(), p.v_norm().bias()});
  CHECK(err < 1e-4);
}
