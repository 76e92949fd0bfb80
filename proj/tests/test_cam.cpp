#include <cmath>
#include <cstring>

#include "doctest.h"
#include "metadetr/cam.hpp"
#include "metadetr/grad_check.hpp"
#include "metadetr/ops.hpp"

using namespace metadetr;

namespace {

Value randv(Rng& rng, int r, int c, bool grad = false) {
  Value v = Value::zeros(r, c, grad);
  for (auto& x : v.data()) x = rng.normal();
  return v;
}

FeatureMap map2x2(std::vector<double> per_cell, int d) {
  // same per-cell value replicated across d channels
  FeatureMap fm;
  fm.h = 2;
  fm.w = 2;
  fm.d = d;
  fm.feat = Value::zeros(4, d);
  for (int cell = 0; cell < 4; ++cell)
    for (int c = 0; c < d; ++c) fm.feat.at(cell, c) = per_cell[cell];
  return fm;
}

PrototypeSet make_protos(const Cam& cam, const TaskEncodingTable& table,
                         const std::vector<std::pair<int, Value>>& vecs) {
  PrototypeSet p;
  p.bg = cam.bg_prototype();
  p.encodings = &table;
  int slot = 1;
  for (const auto& [cid, v] : vecs) p.prototypes.push_back({cid, slot++, v});
  return p;
}

}  // namespace

TEST_CASE("roi_align_pool: constant field, single cell, full 2x2 box") {
  FeatureMap constant = map2x2({7.5, 7.5, 7.5, 7.5}, 3);
  Value pooled = roi_align_pool(constant, {0.37, 0.61, 0.5, 0.5});
  for (int c = 0; c < 3; ++c) CHECK(pooled.at(0, c) == doctest::Approx(7.5).epsilon(1e-12));

  FeatureMap quad = map2x2({1, 2, 3, 4}, 2);
  // box covering exactly cell (0,0)
  Value cell = roi_align_pool(quad, {0.25, 0.25, 0.5, 0.5});
  CHECK(cell.at(0, 0) == doctest::Approx(1.0));
  // full box averages to 2.5 under bilinear sampling
  Value full = roi_align_pool(quad, {0.5, 0.5, 1.0, 1.0});
  CHECK(full.at(0, 0) == doctest::Approx(2.5).epsilon(1e-12));
  CHECK(full.at(0, 1) == doctest::Approx(2.5).epsilon(1e-12));
}

TEST_CASE("roi_align_pool: degenerate box flag and error cases") {
  FeatureMap quad = map2x2({1, 2, 3, 4}, 1);
  bool degenerate = false;
  Value v = roi_align_pool(quad, {0.8, 0.8, 0.1, 0.1}, 3, 2, &degenerate);
  CHECK(degenerate);
  CHECK(v.at(0, 0) == doctest::Approx(4.0));  // nearest cell is (1,1)

  degenerate = true;
  roi_align_pool(quad, {0.5, 0.5, 1.0, 1.0}, 3, 2, &degenerate);
  CHECK_FALSE(degenerate);

  CHECK_THROWS_AS(roi_align_pool(quad, {0.5, 0.5, 0.0, 0.2}), std::invalid_argument);
  CHECK_THROWS_AS(roi_align_pool(quad, {-2.0, 0.5, 0.5, 0.5}), std::invalid_argument);
}

TEST_CASE("roi_align_pool is differentiable with respect to the feature map") {
  Rng rng(17);
  Value feat = randv(rng, 9, 4, true);
  FeatureMap fm;
  fm.h = 3;
  fm.w = 3;
  fm.d = 4;
  fm.feat = feat;
  auto rep = grad_check_inputs({feat}, [&]() {
    return sum_all(roi_align_pool(fm, {0.5, 0.45, 0.8, 0.7}));
  });
  CHECK(rep.max_rel_err <= 1e-3);
}

TEST_CASE("shared_encode: translation-constant input, determinism") {
  ParamStore store;
  Rng rng(21);
  Cam cam(store, "cam", 16, 2, 32, rng);
  Value zero = Value::zeros(6, 16);
  Value out = cam.shared_encode(zero);
  // constant input rows -> identical output rows
  for (int i = 1; i < 6; ++i)
    for (int c = 0; c < 16; ++c) CHECK(out.at(i, c) == doctest::Approx(out.at(0, c)));

  Value x = randv(rng, 6, 16);
  Value o1 = cam.shared_encode(x);
  Value o2 = cam.shared_encode(x);
  CHECK(std::memcmp(o1.data().data(), o2.data().data(), o1.size() * sizeof(double)) == 0);
}

TEST_CASE("match: coefficients are a softmax over C+1 slots") {
  ParamStore store;
  Rng rng(23);
  int d = 16;
  Cam cam(store, "cam", d, 2, 32, rng);
  TaskEncodingTable table = build_table(5, d);
  Value query = randv(rng, 10, d);

  // C = 1 with background: two columns, rows sum to 1
  PrototypeSet p1 = make_protos(cam, table, {{3, randv(rng, 1, d)}});
  MatchOutput mo = cam.match(query, p1);
  CHECK(mo.coefficients.cols() == 2);
  for (int i = 0; i < 10; ++i) {
    double s = mo.coefficients.at(i, 0) + mo.coefficients.at(i, 1);
    CHECK(std::fabs(s - 1.0) <= 1e-9);
    CHECK(mo.coefficients.at(i, 0) > 0.0);
    CHECK(mo.coefficients.at(i, 0) < 1.0);
  }
  CHECK(mo.features.rows() == 10);
  CHECK(mo.features.cols() == d);
}

TEST_CASE("match: zero query nulls the feature branch; output follows the encoding path") {
  ParamStore store;
  Rng rng(29);
  int d = 16;
  Cam cam(store, "cam", d, 2, 32, rng);
  TaskEncodingTable table = build_table(5, d);
  Value zero_query = Value::zeros(8, d);
  PrototypeSet protos =
      make_protos(cam, table, {{0, randv(rng, 1, d)}, {1, randv(rng, 1, d)}});
  MatchOutput mo = cam.match(zero_query, protos);
  for (double v : mo.matched_feat.data()) CHECK(v == 0.0);
  // with Q_F = 0 the output is the FFN/residual/norm of Q_E alone
  for (size_t i = 0; i < mo.features.size(); ++i) CHECK(std::isfinite(mo.features.data()[i]));
}

TEST_CASE("match: prototype permutation leaves Q_F bitwise unchanged, Q_E not") {
  ParamStore store;
  Rng rng(31);
  int d = 24;
  Cam cam(store, "cam", d, 4, 48, rng);
  TaskEncodingTable table = build_table(5, d);
  Value query = randv(rng, 12, d);
  std::vector<std::pair<int, Value>> vecs;
  for (int i = 0; i < 4; ++i) vecs.emplace_back(i, randv(rng, 1, d));

  MatchOutput a = cam.match(query, make_protos(cam, table, vecs));
  std::vector<std::pair<int, Value>> shuffled{vecs[3], vecs[0], vecs[2], vecs[1]};
  MatchOutput b = cam.match(query, make_protos(cam, table, shuffled));

  CHECK(std::memcmp(a.matched_feat.data().data(), b.matched_feat.data().data(),
                    a.matched_feat.size() * sizeof(double)) == 0);
  CHECK(std::memcmp(a.matched_enc.data().data(), b.matched_enc.data().data(),
                    a.matched_enc.size() * sizeof(double)) != 0);
}

TEST_CASE("match: raising a prototype's alignment with a query row raises its coefficient") {
  ParamStore store;
  Rng rng(37);
  int d = 16;
  Cam cam(store, "cam", d, 2, 32, rng);
  TaskEncodingTable table = build_table(5, d);
  Value query = randv(rng, 6, d);
  std::vector<std::pair<int, Value>> vecs{{0, randv(rng, 1, d)}, {1, randv(rng, 1, d)}};
  MatchOutput before = cam.match(query, make_protos(cam, table, vecs));

  // ascent direction of logit(row, class 1) with respect to that prototype:
  // q W W^T (the logit is linear in the prototype)
  int row = 2, slot = 1;  // prototype index 0 sits in slot 1
  Value w = store.get("cam.proj");
  std::vector<double> dir(d, 0.0);
  for (int a = 0; a < d; ++a)
    for (int k = 0; k < d; ++k)
      for (int b = 0; b < d; ++b) dir[a] += query.at(row, b) * w.at(b, k) * w.at(a, k);
  for (int a = 0; a < d; ++a) vecs[0].second.at(0, a) += 1e-3 * dir[a];

  MatchOutput after = cam.match(query, make_protos(cam, table, vecs));
  CHECK(after.coefficients.at(row, slot) > before.coefficients.at(row, slot));
}

TEST_CASE("match: background-only episodes are rejected") {
  ParamStore store;
  Rng rng(41);
  Cam cam(store, "cam", 16, 2, 32, rng);
  TaskEncodingTable table = build_table(5, 16);
  Value query = randv(rng, 4, 16);
  PrototypeSet empty = make_protos(cam, table, {});
  CHECK_THROWS_AS(cam.match(query, empty), std::invalid_argument);
}

TEST_CASE("full CAM forward passes grad_check at d=8, HW=4, C=2") {
  ParamStore store;
  Rng rng(43);
  int d = 8;
  Cam cam(store, "cam", d, 2, 16, rng);
  TaskEncodingTable table = build_table(4, d);
  Value query = randv(rng, 4, d, true);
  Value p0 = randv(rng, 1, d, true);
  Value p1 = randv(rng, 1, d, true);
  Value proj = randv(rng, 4, d);

  std::vector<Parameter> leaves;
  for (const auto& p : store.all()) leaves.push_back(p);
  leaves.push_back({"query", query});
  leaves.push_back({"proto0", p0});
  leaves.push_back({"proto1", p1});
  auto forward = [&]() {
    PrototypeSet protos = make_protos(cam, table, {{0, p0}, {1, p1}});
    MatchOutput mo = cam.match(query, protos);
    return sum_all(mul(mo.features, proj));
  };
  auto rep = grad_check(leaves, forward, 1e-5, 1e-3);
  CHECK(rep.max_rel_err <= 1e-3);
}
